// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xfus/clinicsim.hpp"
#include "xfus/optim.hpp"
#include "xfus/policy.hpp"

namespace xfus {

struct GuidelinePrompt {
  Paradigm paradigm = Paradigm::Differential;
  std::vector<TokenId> prefix;
  std::vector<TokenId> context;
  std::vector<TokenId> tokens;
};

GuidelinePrompt build_guideline_prompt(const VocabLayout& layout, const ClinicTask& task,
                                       Paradigm paradigm);

enum class GbaMode : std::uint8_t { paper_reinforce = 0, clipped_kl = 1 };
const char* to_string(GbaMode m);
GbaMode gba_mode_from_string(std::string_view s);

enum class ParadigmAssign : std::uint8_t { per_group_uniform = 0, stratified_within_group = 1 };

struct GbaConfig {
  std::size_t group_size = 8;
  double clip = 0.2;
  double kl_beta = 0.001;
  double eps_std = 1e-8;
  GbaMode mode = GbaMode::clipped_kl;
  double w_acc = 1.0;
  double w_fmt = 0.5;
  ParadigmAssign paradigm_assign = ParadigmAssign::per_group_uniform;
  std::size_t max_rollout = 32;
  std::size_t iterations = 500;
  /// Prompt groups sampled per optimizer step. One group per step makes the
  /// gradient estimate far too noisy at this scale; batching several
  /// independent prompts stabilizes it without changing the objective.
  std::size_t groups_per_iter = 4;
  double learning_rate = 0.0003;
  OptKind optimizer = OptKind::adam;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  /// Off reduces prompts to bare context: the guideline-free group-relative
  /// baseline.
  bool guideline_conditioning = true;
  std::size_t collapse_patience = 100;

  void validate() const;
  std::uint64_t digest() const;
};

/// Guideline adherence: the response must close with the consultation's own
/// answer-section marker followed by a label from its own option alphabet,
/// and neither markers nor labels may appear anywhere earlier. Answering in
/// another specialty's alphabet violates the reporting guideline.
bool format_valid(const VocabLayout& layout, Domain domain, std::span<const TokenId> y);

/// w_fmt for guideline adherence plus w_acc when the answer label is the
/// gold label; a non-adherent rollout scores zero on both terms.
double reward(const VocabLayout& layout, std::span<const TokenId> y, const ClinicTask& task,
              double w_acc, double w_fmt);

/// (r_i - mean) / (population std + eps_std).
std::vector<double> group_advantages(std::span<const double> rewards, double eps_std);

struct Trajectory {
  std::vector<TokenId> prompt;
  std::vector<TokenId> y;
  std::vector<double> old_logp;
  double reward = 0.0;
  double advantage = 0.0;
};

struct TrajectoryGroup {
  std::vector<Trajectory> items;
  double mean_reward = 0.0;
  double sigma = 0.0;
};

TrajectoryGroup make_group(const BoundPolicy& policy, const VocabLayout& layout,
                           const ClinicTask& task, std::span<const Paradigm> paradigms,
                           const GbaConfig& cfg, SeededRng& rng);

struct GbaObjective {
  double objective = 0.0;
  double kl = 0.0;
  NamedTensorMap grads;
};

/// Ascent objective and its exact gradient. paper_reinforce is the literal
/// length-normalized advantage-weighted log-likelihood; clipped_kl is the
/// per-token ratio-clipped surrogate minus kl_beta times the exact per-token
/// KL(policy || ref) over the full vocabulary. `ref` may be null only outside
/// clipped_kl mode; when present the KL diagnostic is filled in either mode.
GbaObjective gba_objective(const BoundPolicy& policy, const BoundPolicy* ref,
                           std::span<const TrajectoryGroup> groups, const GbaConfig& cfg,
                           bool want_grads = true);

struct GbaLogRow {
  std::size_t iteration = 0;
  double mean_reward = 0.0;
  double kl = 0.0;
  double format_rate = 0.0;
};

struct GbaResult {
  NamedTensorMap theta;
  std::vector<GbaLogRow> log;
};

GbaResult train_gba(const PolicyConfig& pcfg, const NamedTensorMap& theta_init,
                    const VocabLayout& layout, std::span<const ClinicTask* const> tasks,
                    const GbaConfig& cfg);

std::string gba_log_csv(std::span<const GbaLogRow> rows);

}  // namespace xfus
