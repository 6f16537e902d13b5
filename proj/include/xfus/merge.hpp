// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xfus/checkpoint.hpp"
#include "xfus/tensor.hpp"

namespace xfus {

enum class MergeMethod : std::uint8_t {
  ties = 0,
  task_arithmetic = 1,
  slerp = 2,
  naive_average = 3,
};
const char* to_string(MergeMethod m);
MergeMethod merge_method_from_string(std::string_view s);

struct MergeConfig {
  MergeMethod method = MergeMethod::ties;
  /// TIES keep fraction: each tensor keeps the ceil(density * numel)
  /// largest-magnitude task-vector entries before sign election.
  double density = 0.2;
  /// Reconstruction scale on the merged task vector.
  double eta = 1.0;
  /// Per-model coefficient for task arithmetic.
  double ta_coeff = 0.5;
  /// Interpolation parameter for two-model slerp; k models chain with
  /// t = 1/2, 1/3, ..., 1/k so equal-norm inputs get equal say.
  double slerp_t = 0.5;
  /// Refuse task vectors whose recorded base differs from the given base.
  bool strict_fingerprints = true;

  void validate() const;
  std::uint64_t digest() const;
};

/// Difference theta - base for one source model, tagged with where it came
/// from so merges can audit lineage.
struct TaskVector {
  Role source_role = Role::dsa_expert;
  std::optional<std::string> domain;
  std::uint64_t base_fingerprint = 0;
  /// Fingerprint of the full source model theta, for lineage records.
  std::uint64_t source_fingerprint = 0;
  NamedTensorMap entries;
};

TaskVector make_task_vector(const NamedTensorMap& theta, const NamedTensorMap& base,
                            Role source_role, std::optional<std::string> domain = std::nullopt);

/// base + eta * tau, except coordinates where eta * tau is exactly zero keep
/// the base's bit pattern, so an all-zero task vector reproduces the base
/// byte for byte.
NamedTensorMap reconstruct(const NamedTensorMap& base, const NamedTensorMap& tau, double eta);

struct SignElection {
  /// +1, -1, or 0 per coordinate after the trim.
  std::vector<int> sign;
  /// Fraction of coordinates whose trimmed survivors disagreed in sign.
  double conflict_rate = 0.0;
};

struct TensorMergeStat {
  std::string name;
  std::size_t coords = 0;
  /// Coordinates whose merged value is nonzero.
  std::size_t survivors = 0;
  /// Coordinates whose trimmed survivors disagreed in sign.
  std::size_t conflicts = 0;
};

/// Bookkeeping for reports and tests.
struct MergeReport {
  MergeMethod method = MergeMethod::ties;
  double density = 0.0;
  double eta = 0.0;
  std::size_t models = 0;
  double conflict_rate = 0.0;
  /// Fraction of task-vector coordinates zeroed by the trim, averaged over
  /// models and weighted by tensor size.
  double trim_rate = 0.0;
  std::vector<MergeSource> sources;
  std::vector<TensorMergeStat> tensors;
};

std::string merge_report_json(const MergeReport& report);

struct MergeOutcome {
  NamedTensorMap merged_tau;
  MergeReport report;
};

/// TIES: per-tensor magnitude trim at cfg.density, per-coordinate sign
/// election over the trimmed values (sum in canonical value order; a tied sum
/// falls to the sign of the single largest-magnitude entry, and an exact
/// magnitude tie elects zero), then the mean of sign-matching survivors.
MergeOutcome ties_merge(std::span<const TaskVector> taus, const MergeConfig& cfg);

/// Sum of ta_coeff * tau_k.
MergeOutcome task_arithmetic_merge(std::span<const TaskVector> taus, const MergeConfig& cfg);

/// Spherical interpolation on flattened per-tensor vectors, falling back to
/// linear interpolation when the angle is numerically zero or a side has zero
/// norm. Two models use cfg.slerp_t; more chain with t = 1/(k+1).
MergeOutcome slerp_merge(std::span<const TaskVector> taus, const MergeConfig& cfg);

/// Plain coordinate mean of the task vectors.
MergeOutcome naive_average_merge(std::span<const TaskVector> taus, const MergeConfig& cfg);

/// Dispatches on cfg.method, reconstructs base + eta * merged tau, and fills
/// in a manifest-ready MergeInfo.
struct MergedModel {
  NamedTensorMap theta;
  MergeReport report;
  MergeInfo info;
};
MergedModel merge_models(const NamedTensorMap& base, std::span<const TaskVector> taus,
                         const MergeConfig& cfg);

}  // namespace xfus
