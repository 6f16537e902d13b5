// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xfus/clinicsim.hpp"
#include "xfus/lora.hpp"
#include "xfus/rng.hpp"
#include "xfus/tensor.hpp"

namespace xfus {

/// Pre-norm causal transformer: token+position embeddings, n_layers blocks of
/// (LN, multi-head attention, residual, LN, GELU feedforward, residual), a
/// final LN, and a linear logits head. No biases on linear maps; weight
/// matrices are [out, in] acting as y = x W^T.
struct PolicyConfig {
  std::uint32_t vocab_size = 72;
  std::size_t max_seq_len = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ff_mult = 2;
  double ln_eps = 1e-5;

  std::size_t ff_dim() const { return ff_mult * d_model; }
  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;

  /// Canonical parameter layout in construction order (also the init draw
  /// order): name and shape for every trainable tensor.
  std::vector<std::pair<std::string, std::vector<std::size_t>>> param_layout() const;
  std::uint64_t digest() const;

  bool operator==(const PolicyConfig&) const = default;
};

NamedTensorMap init_base(const PolicyConfig& cfg, std::uint64_t seed);

struct LayerCache {
  std::vector<double> x_in;
  std::vector<double> ln1_mean, ln1_rstd;
  std::vector<double> h1;
  std::vector<double> q, k, v;
  std::vector<double> att;
  std::vector<double> ctx;
  std::vector<double> x_mid;
  std::vector<double> ln2_mean, ln2_rstd;
  std::vector<double> h2;
  std::vector<double> ff_pre;
  std::vector<double> ff_act;
};

struct ForwardTrace {
  std::vector<TokenId> tokens;
  std::size_t seq_len = 0;
  std::vector<double> logits;
  bool cached = false;
  std::vector<double> x0;
  std::vector<LayerCache> layers;
  std::vector<double> fn_input;
  std::vector<double> fn_mean, fn_rstd;
  std::vector<double> xf;

  std::span<const double> logits_row(std::size_t t) const;
};

struct SampleOptions {
  std::size_t max_new = 32;
  double temperature = 1.0;
  bool greedy = false;
  std::vector<TokenId> answer_markers;
};

/// A parameter set bound into flat arrays for fast math, either plain weights
/// or base weights with a LoRA adapter attached (W_eff materialized once at
/// bind time). Immutable; forward/backward are const and thread-safe.
class BoundPolicy {
 public:
  BoundPolicy(const PolicyConfig& cfg, const NamedTensorMap& params);
  BoundPolicy(const PolicyConfig& cfg, const NamedTensorMap& base, const LoraAdapter& adapter);

  const PolicyConfig& config() const { return cfg_; }
  bool lora_mode() const { return lora_.has_value(); }
  /// Fingerprint of the bound (effective) parameter map.
  std::uint64_t params_fingerprint() const { return fp_; }

  ForwardTrace forward(std::span<const TokenId> tokens, bool cache) const;

  /// Gradients of a scalar loss given d loss / d logits (row-major [T, V]).
  /// Plain mode returns every parameter name; LoRA mode returns exactly the
  /// adapter names (gradients flow through W_eff into A and B).
  NamedTensorMap backward(const ForwardTrace& trace, std::span<const double> dlogits) const;

  std::pair<double, std::vector<double>> sequence_logprob(
      std::span<const TokenId> prompt, std::span<const TokenId> continuation) const;

  /// Continuation tokens only. Greedy mode ignores rng (argmax, lowest id on
  /// ties); otherwise inverse-CDF sampling from softmax(logits/temperature).
  /// Stops after the token that follows any marker in answer_markers, at
  /// max_new, or at the context window.
  std::vector<TokenId> sample(std::span<const TokenId> prompt, const SampleOptions& opts,
                              SeededRng* rng) const;

 private:
  struct LayerW {
    std::vector<double> ln1g, ln1b, wq, wk, wv, wo, ln2g, ln2b, up, down;
  };
  struct LoraBind {
    double scale = 0.0;
    std::vector<std::string> targets;
    // per target: flat A (r x in), flat B (out x r), dims
    std::vector<std::vector<double>> a, b;
    std::vector<std::size_t> rows, cols;
    int rank = 0;
  };

  const std::vector<double>& weights_of(const std::string& name) const;
  void bind(const NamedTensorMap& params);

  PolicyConfig cfg_;
  std::uint64_t fp_ = 0;
  std::vector<double> tok_, pos_;
  std::vector<LayerW> layers_;
  std::vector<double> fng_, fnb_, logw_;
  std::optional<LoraBind> lora_;
};

/// Stable helpers shared with the training modules.
void softmax_row(std::span<const double> logits, std::span<double> probs);
void log_softmax_row(std::span<const double> logits, std::span<double> logp);

}  // namespace xfus
