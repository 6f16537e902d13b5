// SPDX-License-Identifier: Apache-2.0
#include "xfus/lora.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "xfus/policy.hpp"

namespace xfus {

std::vector<double> lora_effective(std::span<const double> w, std::span<const double> a,
                                   std::span<const double> b, std::size_t out, std::size_t in,
                                   std::size_t r, double scale) {
  std::vector<double> eff(w.begin(), w.end());
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < in; ++i) {
      double d = 0.0;
      for (std::size_t k = 0; k < r; ++k) d += b[o * r + k] * a[k * in + i];
      d *= scale;
      if (d != 0.0) eff[o * in + i] = w[o * in + i] + d;
    }
  }
  return eff;
}

const char* to_string(LoraScope s) {
  return s == LoraScope::logits_only ? "logits_only" : "all_linear";
}

LoraScope lora_scope_from_string(std::string_view s) {
  if (s == "logits_only") return LoraScope::logits_only;
  if (s == "all_linear") return LoraScope::all_linear;
  fail(ErrorKind::InvalidArgument, "unknown lora scope '" + std::string(s) + "'");
}

std::vector<std::string> lora_target_names(const PolicyConfig& cfg, LoraScope scope) {
  std::vector<std::string> out;
  if (scope == LoraScope::all_linear) {
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      out.push_back(p + "attn.wq");
      out.push_back(p + "attn.wk");
      out.push_back(p + "attn.wv");
      out.push_back(p + "attn.wo");
      out.push_back(p + "ff.up");
      out.push_back(p + "ff.down");
    }
  }
  out.push_back("logits.w");
  std::sort(out.begin(), out.end());
  return out;
}

LoraAdapter init_lora(const PolicyConfig& cfg, const NamedTensorMap& base, Domain domain,
                      int rank, double alpha, std::uint64_t seed, LoraScope scope) {
  cfg.validate();
  if (rank < 1) fail(ErrorKind::InvalidArgument, "lora rank must be >= 1");
  if (!(alpha > 0.0)) fail(ErrorKind::InvalidArgument, "lora alpha must be positive");

  LoraAdapter ad;
  ad.domain = domain;
  ad.rank = rank;
  ad.alpha = alpha;
  ad.base_fingerprint = base.fingerprint();
  ad.target_names = lora_target_names(cfg, scope);

  const double sigma = 1.0 / std::sqrt(static_cast<double>(rank));
  const std::size_t r = static_cast<std::size_t>(rank);
  for (const auto& target : ad.target_names) {
    const Tensor& w = base.at(target);
    if (w.rank() != 2) {
      fail(ErrorKind::ShapeMismatch, "lora target '" + target + "' is not a matrix");
    }
    const std::size_t out = w.shape()[0];
    const std::size_t in = w.shape()[1];
    SeededRng rng(hash_label(seed, "lora." + target));
    std::vector<double> a(r * in);
    for (auto& v : a) v = sigma * rng.normal();
    ad.params.set("lora." + target + ".A", Tensor::from_data({r, in}, std::move(a)));
    ad.params.set("lora." + target + ".B", Tensor::zeros({out, r}));
  }
  return ad;
}

NamedTensorMap materialize(const PolicyConfig&, const NamedTensorMap& base,
                           const LoraAdapter& adapter) {
  if (adapter.base_fingerprint != base.fingerprint()) {
    fail(ErrorKind::FingerprintMismatch,
         "adapter was initialized against a different base checkpoint");
  }
  std::set<std::string> targets(adapter.target_names.begin(), adapter.target_names.end());
  const std::size_t r = static_cast<std::size_t>(adapter.rank);
  NamedTensorMap out;
  for (const auto& [name, w] : base) {
    if (!targets.count(name)) {
      out.set(name, w);
      continue;
    }
    const Tensor& A = adapter.A(name);
    const Tensor& B = adapter.B(name);
    const std::size_t rows = w.shape()[0];
    const std::size_t cols = w.shape()[1];
    if (A.shape() != std::vector<std::size_t>{r, cols} ||
        B.shape() != std::vector<std::size_t>{rows, r}) {
      fail(ErrorKind::ShapeMismatch, "adapter pair for '" + name + "' has shapes " +
                                         shape_str(A.shape()) + ", " + shape_str(B.shape()));
    }
    out.set(name, Tensor::from_data(w.shape(),
                                    lora_effective(w.data(), A.data(), B.data(), rows, cols, r,
                                                   adapter.scale()),
                                    w.dtype()));
  }
  for (const auto& t : adapter.target_names) {
    if (!base.contains(t)) {
      fail(ErrorKind::KeyMismatch, "adapter targets '" + t + "', absent from the base");
    }
  }
  return out;
}

void write_adapter(const LoraAdapter& adapter, std::uint64_t config_digest,
                   const std::filesystem::path& path) {
  Manifest m;
  m.role = Role::dsa_expert;
  m.domain = to_string(adapter.domain);
  m.base_fingerprint = adapter.base_fingerprint;
  m.training_config_digest = config_digest;
  m.lora_rank = adapter.rank;
  m.lora_alpha = adapter.alpha;
  write_archive(adapter.params, m, path);
}

LoraAdapter read_adapter(const std::filesystem::path& path) {
  auto [params, manifest] = read_archive(path);
  if (manifest.role != Role::dsa_expert) {
    fail(ErrorKind::BadHeader, "archive at '" + path.string() + "' is not an adapter");
  }
  if (!manifest.lora_rank || !manifest.lora_alpha || !manifest.domain) {
    fail(ErrorKind::BadHeader, "adapter manifest lacks rank, alpha, or domain");
  }
  LoraAdapter ad;
  ad.domain = domain_from_string(*manifest.domain);
  ad.rank = *manifest.lora_rank;
  ad.alpha = *manifest.lora_alpha;
  ad.base_fingerprint = manifest.base_fingerprint;
  for (const auto& [name, t] : params) {
    if (!name.starts_with("lora.") ||
        !(name.ends_with(".A") || name.ends_with(".B"))) {
      fail(ErrorKind::BadHeader, "unexpected adapter tensor '" + name + "'");
    }
    if (name.ends_with(".A")) {
      ad.target_names.push_back(name.substr(5, name.size() - 7));
    }
  }
  for (const auto& target : ad.target_names) {
    if (!params.contains("lora." + target + ".B")) {
      fail(ErrorKind::BadHeader, "adapter tensor 'lora." + target + ".B' is missing");
    }
  }
  ad.params = std::move(params);
  return ad;
}

}  // namespace xfus
