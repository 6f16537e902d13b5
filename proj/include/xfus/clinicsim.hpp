// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xfus/rng.hpp"
#include "xfus/tensor.hpp"

namespace xfus {

using TokenId = std::uint32_t;

enum class Domain : std::uint8_t { AM = 0, CAH = 1, BS = 2, CSI = 3 };
inline constexpr std::array<Domain, 4> kDomains = {Domain::AM, Domain::CAH, Domain::BS,
                                                   Domain::CSI};
const char* to_string(Domain d);
Domain domain_from_string(std::string_view s);

enum class Paradigm : std::uint8_t { Differential = 0, Intuitive = 1, Analytical = 2, Bayesian = 3 };
inline constexpr std::array<Paradigm, 4> kParadigms = {
    Paradigm::Differential, Paradigm::Intuitive, Paradigm::Analytical, Paradigm::Bayesian};
const char* to_string(Paradigm p);
Paradigm paradigm_from_string(std::string_view s);

enum class Split : std::uint8_t { train = 0, eval = 1 };
const char* to_string(Split s);
Split split_from_string(std::string_view s);

/// Token-id geometry shared by the generator, the policy prompts, and the
/// reward grammar. Domain d owns [d*V, (d+1)*V); the control block that
/// follows holds the four paradigm openers, the ANSWER marker, then the C
/// answer labels.
struct VocabLayout {
  std::uint32_t domain_vocab = 12;
  int num_options = 4;

  std::uint32_t domain_base(Domain d) const {
    return static_cast<std::uint32_t>(d) * domain_vocab;
  }
  std::uint32_t control_base() const { return 4 * domain_vocab; }
  TokenId opener(Paradigm p) const { return control_base() + static_cast<std::uint32_t>(p); }
  /// Each specialty closes its reasoning with its own answer-section marker,
  /// so the token preceding the label identifies the answering domain.
  TokenId answer_marker(Domain d) const {
    return control_base() + 4 + static_cast<std::uint32_t>(d);
  }
  /// Answer labels are likewise per-domain: each specialty reports its
  /// verdict in its own option alphabet.
  TokenId label(Domain d, int option_index) const {
    return control_base() + 8 +
           static_cast<std::uint32_t>(d) * static_cast<std::uint32_t>(num_options) +
           static_cast<std::uint32_t>(option_index);
  }
  std::uint32_t vocab_size() const {
    return control_base() + 8 + 4 * static_cast<std::uint32_t>(num_options);
  }
  bool is_answer_marker(TokenId t) const {
    return t >= control_base() + 4 && t < control_base() + 8;
  }
  bool is_label(TokenId t) const { return t >= control_base() + 8 && t < vocab_size(); }
  bool is_control(TokenId t) const { return t >= control_base(); }

  bool operator==(const VocabLayout&) const = default;
};

struct ClinicTask {
  std::string id;
  Domain domain = Domain::AM;
  std::vector<TokenId> context;
  std::vector<TokenId> options;
  int gold = 0;
  std::vector<TokenId> trace;
  Paradigm paradigm = Paradigm::Differential;
  Split split = Split::train;

  bool operator==(const ClinicTask&) const = default;
};

/// Ground-truth labeling rule for one domain: each sub-vocabulary token casts
/// one vote for an option, and the gold label of a context is the option with
/// the most votes (majority rule). Vote assignments are balanced — the option
/// multiset {0..C-1} is repeated across the sub-vocabulary and shuffled — so
/// every option is reachable as gold. Ties are broken by a deterministic hash
/// of the context's sorted token multiset, uniform among the tied labels.
/// Tokens outside the domain's range cast no vote.
struct DomainRuleTable {
  Domain domain = Domain::AM;
  std::uint32_t vocab_base = 0;
  std::vector<int> votes;
  int num_options = 4;

  int gold_for(std::span<const TokenId> context) const;
  /// Vote tally over the context, indexed by option.
  std::vector<int> tally(std::span<const TokenId> context) const;
};

struct GenParams {
  std::uint64_t seed = 0;
  std::size_t per_domain_count = 700;
  std::uint32_t vocab_size_per_domain = 12;
  std::size_t context_len = 5;
  double noise_rate = 0.0;
  double eval_fraction = 2.0 / 7.0;
  int num_options = 4;
};

struct StratifiedDataset {
  std::vector<ClinicTask> tasks;

  std::vector<const ClinicTask*> select(Domain d, Split s) const;
  std::vector<const ClinicTask*> select(Split s) const;
  std::uint64_t fingerprint() const;

  bool operator==(const StratifiedDataset&) const = default;
};

struct GenResult {
  StratifiedDataset dataset;
  VocabLayout layout;
  std::array<DomainRuleTable, 4> tables;
};

GenResult generate(const GenParams& params);

std::string export_jsonl_string(const StratifiedDataset& ds);
void export_jsonl(const StratifiedDataset& ds, const std::filesystem::path& path);
StratifiedDataset import_jsonl(const std::filesystem::path& path);
StratifiedDataset import_jsonl_string(std::string_view text);

/// Reconstructs the token geometry from task traces and options; validates
/// that every task is consistent with it.
VocabLayout infer_layout(const StratifiedDataset& ds);

/// Opener token for the paradigm followed by the task's context tokens: the
/// prompt composition shared by SFT, RL, and evaluation.
/// Format-pretraining corpus: a copy of the dataset whose trace labels (and
/// golds) are resampled uniformly within each task's own option alphabet.
/// Training on it teaches trace structure, citation habits, and answer-
/// section gating while leaving task accuracy at chance.
StratifiedDataset with_shuffled_labels(const StratifiedDataset& ds, const VocabLayout& layout,
                                       std::uint64_t seed);

std::vector<TokenId> guideline_prompt_tokens(const VocabLayout& layout, const ClinicTask& task,
                                             Paradigm paradigm);

}  // namespace xfus
