// SPDX-License-Identifier: Apache-2.0
//
// expertfuse — command-line front end for the xfus library.
//
// Subcommands mirror the pipeline stages: gen, dsa, gba, merge, eval,
// ablate, pipeline. Every failure exits nonzero after printing a single
// machine-readable JSON line to stderr.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xfus/checkpoint.hpp"
#include "xfus/clinicsim.hpp"
#include "xfus/dsa.hpp"
#include "xfus/error.hpp"
#include "xfus/evalkit.hpp"
#include "xfus/gba.hpp"
#include "xfus/lora.hpp"
#include "xfus/merge.hpp"
#include "xfus/pipeline.hpp"
#include "xfus/policy.hpp"

namespace {

constexpr const char* kVersion = "1.0.0";

std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) xfus::fail(xfus::ErrorKind::Io, "cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) xfus::fail(xfus::ErrorKind::Io, "cannot open " + p.string() + " for writing");
  out << text;
  if (!out) xfus::fail(xfus::ErrorKind::Io, "short write to " + p.string());
}

/// Loads the pipeline config if --config was given, otherwise defaults.
xfus::PipelineConfig load_config(const std::string& config_path) {
  if (config_path.empty()) return xfus::PipelineConfig{};
  return xfus::pipeline_config_from_json(read_text_file(config_path));
}

int cmd_gen(const std::string& config_path, std::uint64_t seed, std::int64_t per_domain,
            const std::string& out) {
  xfus::GenParams params = load_config(config_path).gen;
  params.seed = seed;
  if (per_domain > 0) params.per_domain_count = static_cast<std::size_t>(per_domain);
  const xfus::GenResult gen = xfus::generate(params);
  xfus::export_jsonl(gen.dataset, out);
  nlohmann::ordered_json j;
  j["out"] = out;
  j["tasks"] = gen.dataset.tasks.size();
  j["vocab_size"] = gen.layout.vocab_size();
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_dsa(const std::string& config_path, const std::string& base_path,
            const std::string& data_path, const std::string& domain_str, const std::string& out,
            std::string adapter_out, bool adapter_only, std::optional<std::uint64_t> seed) {
  const xfus::PipelineConfig cfg = load_config(config_path);
  xfus::SftConfig sc = cfg.sft;
  if (seed) sc.seed = *seed;

  const xfus::Domain domain = xfus::domain_from_string(domain_str);
  const xfus::StratifiedDataset ds = xfus::import_jsonl(data_path);
  const xfus::VocabLayout layout = xfus::infer_layout(ds);
  auto [base, base_man] = xfus::read_archive(base_path);
  const std::uint64_t base_fp = base.fingerprint();

  const auto tasks = ds.select(domain, xfus::Split::train);
  const xfus::TrainExpertResult res =
      xfus::train_domain_expert(cfg.policy, base, layout, tasks, sc);

  if (adapter_out.empty()) {
    std::filesystem::path p(out);
    p.replace_extension(".lora.xfus");
    adapter_out = p.string();
  }
  xfus::write_adapter(res.adapter, sc.digest(), adapter_out);

  std::uint64_t materialized_fp = 0;
  if (!adapter_only) {
    const xfus::NamedTensorMap theta = xfus::materialize(cfg.policy, base, res.adapter);
    materialized_fp = theta.fingerprint();
    xfus::Manifest m;
    m.role = xfus::Role::dsa_expert;
    m.domain = xfus::to_string(domain);
    m.base_fingerprint = base_fp;
    m.training_config_digest = sc.digest();
    m.lora_rank = sc.lora_rank;
    m.lora_alpha = sc.lora_alpha;
    xfus::write_archive(theta, m, out);
  }

  nlohmann::ordered_json j;
  j["domain"] = domain_str;
  j["adapter"] = adapter_out;
  if (!adapter_only) {
    j["out"] = out;
    j["fingerprint"] = xfus::fingerprint_hex(materialized_fp);
  }
  j["final_loss"] = res.epoch_losses.empty() ? 0.0 : res.epoch_losses.back();
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_gba(const std::string& config_path, const std::string& init_path,
            const std::string& data_path, const std::string& mode_str, std::int64_t iters,
            const std::string& out, std::string log_path, std::optional<std::uint64_t> seed) {
  const xfus::PipelineConfig cfg = load_config(config_path);
  xfus::GbaConfig gc = cfg.gba;
  if (!mode_str.empty()) gc.mode = xfus::gba_mode_from_string(mode_str);
  if (iters > 0) gc.iterations = static_cast<std::size_t>(iters);
  if (seed) gc.seed = *seed;

  const xfus::StratifiedDataset ds = xfus::import_jsonl(data_path);
  const xfus::VocabLayout layout = xfus::infer_layout(ds);
  auto [init_theta, init_man] = xfus::read_archive(init_path);
  const std::uint64_t init_fp = init_theta.fingerprint();

  const auto tasks = ds.select(xfus::Split::train);
  xfus::GbaResult res = xfus::train_gba(cfg.policy, init_theta, layout, tasks, gc);

  if (log_path.empty()) {
    std::filesystem::path p(out);
    p.replace_extension();
    log_path = p.string() + "_log.csv";
  }
  write_text_file(log_path, xfus::gba_log_csv(res.log));

  xfus::Manifest m;
  m.role = xfus::Role::rl_expert;
  m.base_fingerprint = init_fp;
  m.training_config_digest = gc.digest();
  xfus::write_archive(res.theta, m, out);

  nlohmann::ordered_json j;
  j["out"] = out;
  j["log"] = log_path;
  j["fingerprint"] = xfus::fingerprint_hex(res.theta.fingerprint());
  j["final_mean_reward"] = res.log.empty() ? 0.0 : res.log.back().mean_reward;
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_merge(const std::string& method, double density, double eta, double ta_coeff,
              double slerp_t, const std::string& base_path,
              const std::vector<std::string>& expert_paths, const std::string& out,
              std::string report_path) {
  xfus::MergeConfig mc;
  mc.method = xfus::merge_method_from_string(method);
  mc.density = density;
  mc.eta = eta;
  mc.ta_coeff = ta_coeff;
  mc.slerp_t = slerp_t;

  auto [base, base_man] = xfus::read_archive(base_path);
  std::vector<xfus::TaskVector> taus;
  taus.reserve(expert_paths.size());
  for (const auto& path : expert_paths) {
    auto [theta, man] = xfus::read_archive(path);
    taus.push_back(xfus::make_task_vector(theta, base, man.role, man.domain));
  }

  const xfus::MergedModel merged = xfus::merge_models(base, taus, mc);
  xfus::Manifest man;
  man.role = xfus::Role::merged;
  man.base_fingerprint = base.fingerprint();
  man.training_config_digest = mc.digest();
  man.merge = merged.info;
  xfus::write_archive(merged.theta, man, out);

  if (report_path.empty()) {
    std::filesystem::path p(out);
    p.replace_extension();
    report_path = p.string() + "_report.json";
  }
  write_text_file(report_path, xfus::merge_report_json(merged.report));

  nlohmann::ordered_json j;
  j["out"] = out;
  j["report"] = report_path;
  j["fingerprint"] = xfus::fingerprint_hex(merged.theta.fingerprint());
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& model_path,
             const std::string& data_path, const std::string& split_str,
             const std::string& format_str, const std::string& out, const std::string& name,
             std::uint64_t seed) {
  const xfus::PipelineConfig cfg = load_config(config_path);
  const xfus::StratifiedDataset ds = xfus::import_jsonl(data_path);
  const xfus::VocabLayout layout = xfus::infer_layout(ds);
  auto [theta, man] = xfus::read_archive(model_path);

  xfus::EvalOptions opts;
  opts.seed = seed;
  const xfus::BoundPolicy policy(cfg.policy, theta);
  const xfus::EvalReport report =
      xfus::evaluate(policy, layout, ds, xfus::split_from_string(split_str), opts);

  const xfus::ReportRow row = xfus::to_report_row(name, report);
  const xfus::ReportFormat fmt = format_str == "csv" ? xfus::ReportFormat::csv
                                                     : xfus::ReportFormat::markdown_table;
  const std::string text = xfus::emit_report({&row, 1}, fmt);
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text_file(out, text);
  }
  return 0;
}

int cmd_ablate(const std::string& config_path, std::int64_t seeds, const std::string& out,
               const std::string& format_str) {
  if (config_path.empty()) {
    xfus::fail(xfus::ErrorKind::InvalidArgument, "ablate requires --config");
  }
  xfus::AblationConfig cfg = xfus::ablation_config_from_json(read_text_file(config_path));
  if (seeds > 0) {
    cfg.seeds.clear();
    for (std::int64_t s = 1; s <= seeds; ++s) cfg.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  const xfus::AblationResult res = xfus::run_ablation(cfg);

  std::string format = format_str;
  if (format.empty()) {
    format = out.ends_with(".md") ? "markdown" : "csv";
  }
  const xfus::ReportFormat fmt =
      format == "markdown" ? xfus::ReportFormat::markdown_table : xfus::ReportFormat::csv;
  const std::string text = xfus::emit_report(res.rows, fmt);
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text_file(out, text);
  }
  for (const auto& failure : res.failures) {
    std::cerr << nlohmann::ordered_json{{"cell_failure", failure}}.dump() << "\n";
  }
  return res.failures.empty() ? 0 : 1;
}

int cmd_pipeline(const std::string& config_path, std::optional<std::uint64_t> seed,
                 const std::string& out, const std::string& schedule, bool resume) {
  xfus::PipelineConfig cfg = load_config(config_path);
  if (seed) cfg.seed = *seed;
  if (!out.empty()) cfg.out_dir = out;
  if (!schedule.empty()) cfg.schedule = xfus::schedule_from_string(schedule);
  if (resume) cfg.resume = true;

  const xfus::PipelineResult res = xfus::run_pipeline(cfg);

  nlohmann::ordered_json j;
  j["out_dir"] = cfg.out_dir.string();
  j["final_fingerprint"] = xfus::fingerprint_hex(res.final_fingerprint);
  j["overall_accuracy"] = res.report.overall;
  j["mean_reward"] = res.report.mean_reward;
  nlohmann::ordered_json stages = nlohmann::ordered_json::array();
  for (const auto& s : res.stages) {
    stages.push_back({{"name", s.name},
                      {"artifact", s.artifact},
                      {"fingerprint", s.fingerprint},
                      {"reused", s.reused}});
  }
  j["stages"] = stages;
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"expertfuse — domain-expert training, merging, and evaluation toolkit"};
  app.set_version_flag("--version", std::string("expertfuse ") + kVersion + " (archive format " +
                                        std::to_string(xfus::kArchiveVersion) + ")");
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic consultation dataset");
  std::string gen_config, gen_out = "data.jsonl";
  std::uint64_t gen_seed = 0;
  std::int64_t gen_per_domain = 0;
  gen->add_option("--config", gen_config, "Pipeline config JSON (gen section)");
  gen->add_option("--seed", gen_seed, "Dataset seed");
  gen->add_option("--per-domain", gen_per_domain, "Tasks per domain");
  gen->add_option("--out", gen_out, "Output JSONL path")->required();

  // dsa
  auto* dsa = app.add_subcommand("dsa", "Train one domain expert from a base checkpoint");
  std::string dsa_config, dsa_base, dsa_data, dsa_domain, dsa_out, dsa_adapter_out;
  bool dsa_adapter_only = false;
  std::optional<std::uint64_t> dsa_seed;
  dsa->add_option("--config", dsa_config, "Pipeline config JSON (sft section)");
  dsa->add_option("--base", dsa_base, "Base checkpoint")->required();
  dsa->add_option("--data", dsa_data, "Dataset JSONL")->required();
  dsa->add_option("--domain", dsa_domain, "Domain: AM, CAH, BS, or CSI")->required();
  dsa->add_option("--out", dsa_out, "Materialized expert checkpoint path")->required();
  dsa->add_option("--adapter-out", dsa_adapter_out, "Raw adapter archive path");
  dsa->add_flag("--adapter-only", dsa_adapter_only, "Skip the materialized checkpoint");
  dsa->add_option("--seed", dsa_seed, "Training seed");

  // gba
  auto* gba = app.add_subcommand("gba", "Reinforcement stage from a merged checkpoint");
  std::string gba_config, gba_init, gba_data, gba_mode, gba_out, gba_log;
  std::int64_t gba_iters = 0;
  std::optional<std::uint64_t> gba_seed;
  gba->add_option("--config", gba_config, "Pipeline config JSON (gba section)");
  gba->add_option("--init", gba_init, "Initial checkpoint")->required();
  gba->add_option("--data", gba_data, "Dataset JSONL")->required();
  gba->add_option("--mode", gba_mode, "Objective: clipped_kl or paper_reinforce");
  gba->add_option("--iters", gba_iters, "Optimizer iterations");
  gba->add_option("--out", gba_out, "Output checkpoint path")->required();
  gba->add_option("--log", gba_log, "Training log CSV path");
  gba->add_option("--seed", gba_seed, "Rollout seed");

  // merge
  auto* merge = app.add_subcommand("merge", "Merge expert checkpoints over a shared base");
  std::string merge_method = "ties", merge_base, merge_out, merge_report;
  double merge_density = 0.2, merge_eta = 1.0, merge_ta = 0.5, merge_slerp_t = 0.5;
  std::vector<std::string> merge_experts;
  merge->add_option("--method", merge_method, "ties, task_arithmetic, slerp, or naive_average");
  merge->add_option("--density", merge_density, "TIES keep fraction");
  merge->add_option("--eta", merge_eta, "Reconstruction coefficient");
  merge->add_option("--ta-coeff", merge_ta, "Task-arithmetic coefficient");
  merge->add_option("--slerp-t", merge_slerp_t, "SLERP interpolation parameter");
  merge->add_option("--base", merge_base, "Shared base checkpoint")->required();
  merge->add_option("--experts", merge_experts, "Expert checkpoints")->required()->expected(-1);
  merge->add_option("--out", merge_out, "Merged checkpoint path")->required();
  merge->add_option("--report", merge_report, "Merge report JSON path");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  std::string eval_config, eval_model, eval_data, eval_split = "eval", eval_format, eval_out,
              eval_name = "model";
  std::uint64_t eval_seed = 0;
  eval->add_option("--config", eval_config, "Pipeline config JSON (policy section)");
  eval->add_option("--model", eval_model, "Checkpoint to evaluate")->required();
  eval->add_option("--data", eval_data, "Dataset JSONL")->required();
  eval->add_option("--split", eval_split, "train or eval");
  eval->add_option("--format", eval_format, "markdown or csv");
  eval->add_option("--out", eval_out, "Report path (stdout when omitted)");
  eval->add_option("--name", eval_name, "Config label for the report row");
  eval->add_option("--seed", eval_seed, "Eval seed recorded in the report");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Run the ablation matrix");
  std::string ablate_config, ablate_out, ablate_format;
  std::int64_t ablate_seeds = 0;
  ablate->add_option("--config", ablate_config, "Ablation config JSON")->required();
  ablate->add_option("--seeds", ablate_seeds, "Use seeds 1..N instead of the config's");
  ablate->add_option("--out", ablate_out, "Report path (stdout when omitted)");
  ablate->add_option("--format", ablate_format, "markdown or csv");

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "Run the full staged pipeline");
  std::string pipe_config, pipe_out, pipe_schedule;
  std::optional<std::uint64_t> pipe_seed;
  bool pipe_resume = false;
  pipe->add_option("--config", pipe_config, "Pipeline config JSON");
  pipe->add_option("--seed", pipe_seed, "Global seed override");
  pipe->add_option("--out", pipe_out, "Output directory override");
  pipe->add_option("--schedule", pipe_schedule, "ours, dsa_gba, or mixed_sft_gba");
  pipe->add_flag("--resume", pipe_resume, "Reuse matching artifacts in the output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen(gen_config, gen_seed, gen_per_domain, gen_out);
    if (*dsa) {
      return cmd_dsa(dsa_config, dsa_base, dsa_data, dsa_domain, dsa_out, dsa_adapter_out,
                     dsa_adapter_only, dsa_seed);
    }
    if (*gba) {
      return cmd_gba(gba_config, gba_init, gba_data, gba_mode, gba_iters, gba_out, gba_log,
                     gba_seed);
    }
    if (*merge) {
      return cmd_merge(merge_method, merge_density, merge_eta, merge_ta, merge_slerp_t,
                       merge_base, merge_experts, merge_out, merge_report);
    }
    if (*eval) {
      return cmd_eval(eval_config, eval_model, eval_data, eval_split, eval_format, eval_out,
                      eval_name, eval_seed);
    }
    if (*ablate) return cmd_ablate(ablate_config, ablate_seeds, ablate_out, ablate_format);
    if (*pipe) return cmd_pipeline(pipe_config, pipe_seed, pipe_out, pipe_schedule, pipe_resume);
  } catch (const xfus::Error& e) {
    nlohmann::ordered_json j;
    j["error"] = xfus::to_string(e.kind());
    j["message"] = e.what();
    std::cerr << j.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    nlohmann::ordered_json j;
    j["error"] = "Unexpected";
    j["message"] = e.what();
    std::cerr << j.dump() << "\n";
    return 1;
  }
  return 0;
}
