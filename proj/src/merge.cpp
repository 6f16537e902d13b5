// SPDX-License-Identifier: Apache-2.0
#include "xfus/merge.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <json.hpp>

namespace xfus {
namespace {

// Value order with a bit-pattern tie-break (so -0.0 sorts before +0.0);
// fixes one summation order regardless of how callers ordered the models.
bool canonical_less(double x, double y) {
  if (x != y) return x < y;
  std::uint64_t bx, by;
  std::memcpy(&bx, &x, sizeof bx);
  std::memcpy(&by, &y, sizeof by);
  return bx < by;
}

double canonical_sum(std::vector<double>& vals) {
  std::sort(vals.begin(), vals.end(), canonical_less);
  double s = 0.0;
  for (double v : vals) s += v;
  return s;
}

void require_aligned(std::span<const TaskVector> taus) {
  if (taus.empty()) fail(ErrorKind::InvalidArgument, "no task vectors to merge");
  const auto names = taus[0].entries.names();
  for (std::size_t k = 1; k < taus.size(); ++k) {
    if (taus[k].entries.names() != names) {
      fail(ErrorKind::KeyMismatch, "task vectors disagree on parameter names");
    }
    for (const auto& name : names) {
      if (!taus[k].entries.at(name).same_shape(taus[0].entries.at(name))) {
        fail(ErrorKind::ShapeMismatch, "task vectors disagree on shape of '" + name + "'");
      }
    }
  }
}

MergeReport base_report(std::span<const TaskVector> taus, const MergeConfig& cfg) {
  MergeReport rep;
  rep.method = cfg.method;
  rep.density = cfg.density;
  rep.eta = cfg.eta;
  rep.models = taus.size();
  for (const auto& tau : taus) {
    MergeSource src;
    src.role = to_string(tau.source_role);
    if (tau.domain) src.role += ":" + *tau.domain;
    src.fingerprint = fingerprint_hex(tau.source_fingerprint);
    rep.sources.push_back(std::move(src));
  }
  return rep;
}

}  // namespace

const char* to_string(MergeMethod m) {
  switch (m) {
    case MergeMethod::ties: return "ties";
    case MergeMethod::task_arithmetic: return "task_arithmetic";
    case MergeMethod::slerp: return "slerp";
    case MergeMethod::naive_average: return "naive_average";
  }
  fail(ErrorKind::InvalidArgument, "bad merge method value");
}

MergeMethod merge_method_from_string(std::string_view s) {
  if (s == "ties") return MergeMethod::ties;
  if (s == "task_arithmetic") return MergeMethod::task_arithmetic;
  if (s == "slerp") return MergeMethod::slerp;
  if (s == "naive_average") return MergeMethod::naive_average;
  fail(ErrorKind::InvalidArgument, "unknown merge method '" + std::string(s) + "'");
}

void MergeConfig::validate() const {
  if (!(density >= 0.0 && density <= 1.0)) {
    fail(ErrorKind::InvalidArgument, "density must lie in [0,1]");
  }
  if (!std::isfinite(eta)) fail(ErrorKind::InvalidArgument, "eta must be finite");
  if (!std::isfinite(ta_coeff)) fail(ErrorKind::InvalidArgument, "ta_coeff must be finite");
  if (!(slerp_t >= 0.0 && slerp_t <= 1.0)) {
    fail(ErrorKind::InvalidArgument, "slerp_t must lie in [0,1]");
  }
}

std::uint64_t MergeConfig::digest() const {
  Fnv64 f;
  f.update_str("merge_config");
  f.update_u64(static_cast<std::uint64_t>(method));
  f.update_f64(density);
  f.update_f64(eta);
  f.update_f64(ta_coeff);
  f.update_f64(slerp_t);
  f.update_u64(strict_fingerprints ? 1 : 0);
  return f.h;
}

TaskVector make_task_vector(const NamedTensorMap& theta, const NamedTensorMap& base,
                            Role source_role, std::optional<std::string> domain) {
  TaskVector tv;
  tv.source_role = source_role;
  tv.domain = std::move(domain);
  tv.base_fingerprint = base.fingerprint();
  tv.source_fingerprint = theta.fingerprint();
  tv.entries = map_combine([](const Tensor& a, const Tensor& b) { return sub(a, b); },
                           theta, base);
  return tv;
}

NamedTensorMap reconstruct(const NamedTensorMap& base, const NamedTensorMap& tau, double eta) {
  NamedTensorMap out;
  if (base.names() != tau.names()) {
    fail(ErrorKind::KeyMismatch, "task vector does not cover the base parameter set");
  }
  for (const auto& [name, b] : base) {
    const Tensor& t = tau.at(name);
    if (!b.same_shape(t)) {
      fail(ErrorKind::ShapeMismatch, "task vector entry '" + name + "' has shape " +
                                         shape_str(t.shape()));
    }
    std::vector<double> data(b.numel());
    const auto bd = b.data();
    const auto td = t.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double d = eta * td[i];
      data[i] = d == 0.0 ? bd[i] : bd[i] + d;
    }
    out.set(name, Tensor::from_data(b.shape(), std::move(data), b.dtype()));
  }
  return out;
}

MergeOutcome ties_merge(std::span<const TaskVector> taus, const MergeConfig& cfg) {
  cfg.validate();
  require_aligned(taus);
  const std::size_t K = taus.size();

  MergeOutcome out;
  out.report = base_report(taus, cfg);
  std::size_t total_coords = 0;
  std::size_t conflicted = 0;
  std::size_t trimmed_away = 0;

  std::vector<double> vals;
  for (const auto& [name, first] : taus[0].entries) {
    const std::size_t n = first.numel();
    std::vector<std::vector<double>> trimmed(K);
    for (std::size_t k = 0; k < K; ++k) {
      const Tensor& t = taus[k].entries.at(name);
      const double thr = magnitude_threshold(t, cfg.density);
      const auto d = t.data();
      trimmed[k].resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const bool keep = std::abs(d[i]) >= thr;
        trimmed[k][i] = keep ? d[i] : 0.0;
        if (!keep && d[i] != 0.0) ++trimmed_away;
      }
    }

    TensorMergeStat stat;
    stat.name = name;
    stat.coords = n;
    std::vector<double> merged(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      vals.clear();
      bool pos = false, neg = false;
      for (std::size_t k = 0; k < K; ++k) {
        const double v = trimmed[k][i];
        if (v == 0.0) continue;
        vals.push_back(v);
        (v > 0.0 ? pos : neg) = true;
      }
      ++total_coords;
      if (pos && neg) {
        ++conflicted;
        ++stat.conflicts;
      }
      if (vals.empty()) continue;

      std::sort(vals.begin(), vals.end(), canonical_less);
      double s = 0.0;
      for (double v : vals) s += v;
      int sign = s > 0.0 ? 1 : (s < 0.0 ? -1 : 0);
      if (sign == 0) {
        const double lo = std::abs(vals.front());
        const double hi = std::abs(vals.back());
        sign = lo > hi ? -1 : (hi > lo ? 1 : 0);
      }
      if (sign == 0) continue;

      double sum = 0.0;
      std::size_t count = 0;
      for (double v : vals) {
        if ((sign > 0 && v > 0.0) || (sign < 0 && v < 0.0)) {
          sum += v;
          ++count;
        }
      }
      merged[i] = sum / static_cast<double>(count);
      if (merged[i] != 0.0) ++stat.survivors;
    }
    out.merged_tau.set(name, Tensor::from_data(first.shape(), std::move(merged), first.dtype()));
    out.report.tensors.push_back(std::move(stat));
  }

  if (total_coords > 0) {
    out.report.conflict_rate = static_cast<double>(conflicted) / static_cast<double>(total_coords);
    out.report.trim_rate =
        static_cast<double>(trimmed_away) / static_cast<double>(total_coords * K);
  }
  return out;
}

MergeOutcome task_arithmetic_merge(std::span<const TaskVector> taus, const MergeConfig& cfg) {
  cfg.validate();
  require_aligned(taus);
  MergeOutcome out;
  out.report = base_report(taus, cfg);
  std::vector<double> vals(taus.size());
  for (const auto& [name, first] : taus[0].entries) {
    std::vector<double> merged(first.numel());
    for (std::size_t i = 0; i < merged.size(); ++i) {
      for (std::size_t k = 0; k < taus.size(); ++k) vals[k] = taus[k].entries.at(name)[i];
      merged[i] = cfg.ta_coeff * canonical_sum(vals);
    }
    out.merged_tau.set(name, Tensor::from_data(first.shape(), std::move(merged), first.dtype()));
  }
  return out;
}

MergeOutcome slerp_merge(std::span<const TaskVector> taus, const MergeConfig& cfg) {
  cfg.validate();
  require_aligned(taus);
  MergeOutcome out;
  out.report = base_report(taus, cfg);
  for (const auto& [name, first] : taus[0].entries) {
    const std::size_t n = first.numel();
    std::vector<double> acc(first.data().begin(), first.data().end());
    for (std::size_t k = 1; k < taus.size(); ++k) {
      const auto b = taus[k].entries.at(name).data();
      const double t = taus.size() == 2 ? cfg.slerp_t
                                        : 1.0 / static_cast<double>(k + 1);
      double na = 0.0, nb = 0.0, dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        na += acc[i] * acc[i];
        nb += b[i] * b[i];
        dot += acc[i] * b[i];
      }
      na = std::sqrt(na);
      nb = std::sqrt(nb);
      double wa = 1.0 - t, wb = t;
      if (na > 0.0 && nb > 0.0) {
        const double cosw = std::clamp(dot / (na * nb), -1.0, 1.0);
        if (std::abs(cosw) <= 1.0 - 1e-6) {
          const double omega = std::acos(cosw);
          const double s = std::sin(omega);
          wa = std::sin((1.0 - t) * omega) / s;
          wb = std::sin(t * omega) / s;
        }
      }
      for (std::size_t i = 0; i < n; ++i) acc[i] = wa * acc[i] + wb * b[i];
    }
    out.merged_tau.set(name, Tensor::from_data(first.shape(), std::move(acc), first.dtype()));
  }
  return out;
}

MergeOutcome naive_average_merge(std::span<const TaskVector> taus, const MergeConfig& cfg) {
  cfg.validate();
  require_aligned(taus);
  MergeOutcome out;
  out.report = base_report(taus, cfg);
  const double inv_k = 1.0 / static_cast<double>(taus.size());
  std::vector<double> vals(taus.size());
  for (const auto& [name, first] : taus[0].entries) {
    std::vector<double> merged(first.numel());
    for (std::size_t i = 0; i < merged.size(); ++i) {
      for (std::size_t k = 0; k < taus.size(); ++k) vals[k] = taus[k].entries.at(name)[i];
      merged[i] = canonical_sum(vals) * inv_k;
    }
    out.merged_tau.set(name, Tensor::from_data(first.shape(), std::move(merged), first.dtype()));
  }
  return out;
}

std::string merge_report_json(const MergeReport& report) {
  nlohmann::ordered_json j;
  j["method"] = to_string(report.method);
  j["density"] = report.density;
  j["eta"] = report.eta;
  j["models"] = report.models;
  j["conflict_rate"] = report.conflict_rate;
  j["trim_rate"] = report.trim_rate;
  j["sources"] = nlohmann::ordered_json::array();
  for (const auto& s : report.sources) {
    j["sources"].push_back({{"role", s.role}, {"fingerprint", s.fingerprint}});
  }
  j["tensors"] = nlohmann::ordered_json::array();
  for (const auto& t : report.tensors) {
    j["tensors"].push_back({{"name", t.name},
                            {"coords", t.coords},
                            {"survivors", t.survivors},
                            {"conflicts", t.conflicts}});
  }
  return j.dump(2) + "\n";
}

MergedModel merge_models(const NamedTensorMap& base, std::span<const TaskVector> taus,
                         const MergeConfig& cfg) {
  cfg.validate();
  require_aligned(taus);
  if (cfg.strict_fingerprints) {
    const std::uint64_t fp = base.fingerprint();
    for (const auto& tau : taus) {
      if (tau.base_fingerprint != fp) {
        fail(ErrorKind::FingerprintMismatch,
             "task vector from " + std::string(to_string(tau.source_role)) +
                 " was taken against a different base (" +
                 fingerprint_hex(tau.base_fingerprint) + " vs " + fingerprint_hex(fp) + ")");
      }
    }
  }
  if (taus[0].entries.names() != base.names()) {
    fail(ErrorKind::KeyMismatch, "task vectors do not cover the base parameter set");
  }

  MergeOutcome mo;
  switch (cfg.method) {
    case MergeMethod::ties: mo = ties_merge(taus, cfg); break;
    case MergeMethod::task_arithmetic: mo = task_arithmetic_merge(taus, cfg); break;
    case MergeMethod::slerp: mo = slerp_merge(taus, cfg); break;
    case MergeMethod::naive_average: mo = naive_average_merge(taus, cfg); break;
  }

  MergedModel model;
  model.theta = reconstruct(base, mo.merged_tau, cfg.eta);
  model.report = std::move(mo.report);
  model.info.method = to_string(cfg.method);
  model.info.density = cfg.density;
  model.info.eta = cfg.eta;
  model.info.sources = model.report.sources;
  return model;
}

}  // namespace xfus
