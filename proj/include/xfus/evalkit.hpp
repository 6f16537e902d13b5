// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xfus/clinicsim.hpp"
#include "xfus/policy.hpp"

namespace xfus {

struct EvalReport {
  std::array<double, 4> domain_accuracy{};
  std::array<std::size_t, 4> domain_counts{};
  double overall = 0.0;
  double mean_reward = 0.0;
  double format_rate = 0.0;
  std::uint64_t model_fingerprint = 0;
  std::uint64_t dataset_fingerprint = 0;
  std::uint64_t seed = 0;
};

struct EvalOptions {
  std::size_t max_new = 32;
  double w_acc = 1.0;
  double w_fmt = 0.5;
  std::uint64_t seed = 0;
  /// Fingerprint of the split the model was trained on; evaluation refuses
  /// to score a split with this fingerprint.
  std::optional<std::uint64_t> trained_on;
};

/// Canonical hash of one split's tasks in dataset order (all task fields).
std::uint64_t split_fingerprint(const StratifiedDataset& ds, Split split);

/// Maps a task to a rollout continuation, same shape as BoundPolicy::sample.
using DecodeFn = std::function<std::vector<TokenId>(const ClinicTask&)>;

/// Scores a decoder on one split: accuracy via answer extraction (token after
/// the first ANSWER if it is a label, option 0 otherwise), plus mean reward
/// and grammar-validity rate over the same rollouts.
EvalReport evaluate_decoder(const DecodeFn& decode, const VocabLayout& layout,
                            const StratifiedDataset& ds, Split split, const EvalOptions& opts);

/// Greedy rollouts from guideline prompts built with each task's own
/// paradigm. Deterministic in (theta, dataset).
EvalReport evaluate(const BoundPolicy& policy, const VocabLayout& layout,
                    const StratifiedDataset& ds, Split split, const EvalOptions& opts = {});

/// Perfect-knowledge decoder that answers from the generator's rule tables;
/// its accuracy is the label-noise ceiling.
DecodeFn oracle_decoder(const GenResult& gen);

/// One rendered line of the ablation table. Accuracies are fractions in
/// [0,1]; rendering multiplies by 100. `seed` is free text so aggregate rows
/// can say "mean".
struct ReportRow {
  std::string config;
  std::string seed;
  std::array<double, 4> domain{};
  double overall = 0.0;
  double mean_reward = 0.0;
};

ReportRow to_report_row(std::string config, const EvalReport& report);

enum class ReportFormat : std::uint8_t { markdown_table = 0, csv = 1 };

/// Round-half-even to 2 decimal places.
double round2(double v);
/// Exactly two decimals, round-half-even.
std::string format2(double v);

/// Columns: config, seed, AM, CAH, BS, CSI, overall, mean_reward.
/// Accuracy columns are percentages; mean_reward is raw. Both formats carry
/// identical numerals.
std::string emit_report(std::span<const ReportRow> rows, ReportFormat format);

}  // namespace xfus
