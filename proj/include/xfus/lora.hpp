// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xfus/checkpoint.hpp"
#include "xfus/clinicsim.hpp"
#include "xfus/tensor.hpp"

namespace xfus {

struct PolicyConfig;

/// Low-rank correction per targeted weight matrix: W_eff = W + (alpha/r) B A,
/// A is r x in (Gaussian init), B is out x r (zero init). Pairs live in
/// `params` under names "lora.<target>.A" / "lora.<target>.B" so optimizers
/// and archives treat an adapter like any parameter map.
struct LoraAdapter {
  Domain domain = Domain::AM;
  int rank = 16;
  double alpha = 32.0;
  std::uint64_t base_fingerprint = 0;
  std::vector<std::string> target_names;
  NamedTensorMap params;

  double scale() const { return alpha / static_cast<double>(rank); }
  const Tensor& A(const std::string& target) const { return params.at("lora." + target + ".A"); }
  const Tensor& B(const std::string& target) const { return params.at("lora." + target + ".B"); }
};

/// W + scale * B A for W [out, in]; entries with an exactly-zero correction
/// keep W's scalar bit-for-bit. Shared by materialization and attachment so
/// the two paths agree bitwise.
std::vector<double> lora_effective(std::span<const double> w, std::span<const double> a,
                                   std::span<const double> b, std::size_t out, std::size_t in,
                                   std::size_t r, double scale);

/// Which weight matrices an adapter corrects. logits_only trains a linear
/// readout over the frozen backbone's features; because every expert then
/// shares the identical feature map, their task vectors superpose with
/// minimal interference when merged. all_linear additionally targets the
/// attention q/k/v/o and feedforward up/down projections. Norms and
/// embeddings are never targeted.
enum class LoraScope { logits_only, all_linear };

const char* to_string(LoraScope s);
LoraScope lora_scope_from_string(std::string_view s);

std::vector<std::string> lora_target_names(const PolicyConfig& cfg,
                                           LoraScope scope = LoraScope::logits_only);

LoraAdapter init_lora(const PolicyConfig& cfg, const NamedTensorMap& base, Domain domain,
                      int rank, double alpha, std::uint64_t seed,
                      LoraScope scope = LoraScope::logits_only);

/// base + (alpha/r) B A on targeted names. Entries whose correction is exactly
/// zero keep the base scalar bit-for-bit; untouched tensors are shared.
NamedTensorMap materialize(const PolicyConfig& cfg, const NamedTensorMap& base,
                           const LoraAdapter& adapter);

void write_adapter(const LoraAdapter& adapter, std::uint64_t config_digest,
                   const std::filesystem::path& path);
LoraAdapter read_adapter(const std::filesystem::path& path);

}  // namespace xfus
