// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "xfus/dsa.hpp"
#include "xfus/evalkit.hpp"
#include "xfus/gba.hpp"
#include "xfus/merge.hpp"

namespace xfus {

/// Training schedule. `ours` merges the domain experts, runs RL from the
/// merged model, then merges the RL task vector back in with the experts;
/// `dsa_gba` stops at the RL model (single merge); `mixed_sft_gba` replaces
/// the per-domain stage with one pooled SFT pass.
enum class Schedule : std::uint8_t { ours = 0, dsa_gba = 1, mixed_sft_gba = 2 };
const char* to_string(Schedule s);
Schedule schedule_from_string(std::string_view s);

/// Recipe for the format-warmup stage: one pooled SFT pass over the
/// label-shuffled corpus that teaches the freshly initialized policy trace
/// structure (openers, citations, answer-section gating) without any task
/// knowledge, standing in for the pretrained competence that adaptation
/// normally builds on.
SftConfig default_warmup_config();

/// Merge recipe for the RL starting point: a deliberately conservative
/// reconstruction (small eta) that keeps the merged policy close to base,
/// leaving headroom and entropy for the RL stage to exploit.
MergeConfig default_dsa_merge_config();

/// One knob per stage. The seeds inside gen/sft/gba are ignored: every stage
/// seed is derived from the global `seed`, so a run is a pure function of
/// this struct.
struct PipelineConfig {
  GenParams gen;
  PolicyConfig policy;
  SftConfig warmup = default_warmup_config();
  SftConfig sft;
  GbaConfig gba;
  MergeConfig merge_dsa = default_dsa_merge_config();
  MergeConfig merge_final;
  Schedule schedule = Schedule::ours;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  /// Reuse on-disk artifacts whose manifests match the expected input
  /// fingerprint and config digest.
  bool resume = false;

  void validate() const;
};

std::string pipeline_config_to_json(const PipelineConfig& cfg);
PipelineConfig pipeline_config_from_json(const std::string& text);

struct StageRecord {
  std::string name;
  /// Path relative to out_dir.
  std::string artifact;
  std::string fingerprint;
  bool reused = false;
};

struct PipelineResult {
  EvalReport report;
  std::uint64_t final_fingerprint = 0;
  std::vector<StageRecord> stages;
};

/// gen -> init -> warmup -> adaptation -> merge -> RL -> (final merge) ->
/// evaluate,
/// per `schedule`, persisting every intermediate artifact under out_dir and
/// a pipeline_summary.json at the end. Stage errors rethrow as StageFailure
/// tagged with the stage name and artifact path.
PipelineResult run_pipeline(const PipelineConfig& cfg);

/// Canonical ablation row names, table order.
const std::vector<std::string>& ablation_config_names();

struct AblationConfig {
  /// Template run; out_dir may be empty (ablation cells run in memory).
  PipelineConfig base;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  /// Subset of ablation_config_names(); empty means all.
  std::vector<std::string> configs;
};

std::string ablation_config_to_json(const AblationConfig& cfg);
AblationConfig ablation_config_from_json(const std::string& text);

struct AblationResult {
  /// Per-seed rows grouped by config, each group followed by a "mean" row.
  std::vector<ReportRow> rows;
  /// "config/seed: message" for cells that failed; failures never abort the
  /// rest of the matrix.
  std::vector<std::string> failures;
};

AblationResult run_ablation(const AblationConfig& cfg);

}  // namespace xfus
