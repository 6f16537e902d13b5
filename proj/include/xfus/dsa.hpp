// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "xfus/clinicsim.hpp"
#include "xfus/lora.hpp"
#include "xfus/optim.hpp"
#include "xfus/policy.hpp"

namespace xfus {

/// Rank 64 / alpha 32 adapters on the output head only, batch 1 with 8
/// accumulation steps, plain gradient descent. Specialization at this scale
/// lives in the label logits; confining adapters there keeps each expert's
/// task vector out of the shared trunk, and the large step size is tuned so
/// default training actually specializes. The reference values (adapters on
/// every linear layer, adaptive-moment optimizer) are still accepted via
/// configuration.
struct SftConfig {
  double learning_rate = 0.3;
  std::size_t epochs = 10;
  std::size_t batch_size = 1;
  std::size_t grad_accum_steps = 8;
  OptKind optimizer = OptKind::sgd;
  std::uint64_t seed = 0;
  int lora_rank = 64;
  double lora_alpha = 32.0;
  LoraScope lora_scope = LoraScope::logits_only;
  bool allow_mixed_domains = false;
  double divergence_factor = 10.0;

  void validate() const;
  std::uint64_t digest() const;
};

struct SftBatchResult {
  double loss = 0.0;
  NamedTensorMap grads;
};

/// Mean over tasks of the per-task token-mean cross-entropy of the trace
/// given the guideline prompt. Gradients are whatever the bound policy
/// reports: adapter pairs in LoRA mode, every parameter otherwise.
SftBatchResult sft_loss(const BoundPolicy& policy, const VocabLayout& layout,
                        std::span<const ClinicTask* const> batch, bool allow_mixed = false);

struct TrainExpertResult {
  LoraAdapter adapter;
  std::vector<double> epoch_losses;
};

TrainExpertResult train_domain_expert(const PolicyConfig& pcfg, const NamedTensorMap& base,
                                      const VocabLayout& layout,
                                      std::span<const ClinicTask* const> tasks,
                                      const SftConfig& cfg);

}  // namespace xfus
