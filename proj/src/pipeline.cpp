// SPDX-License-Identifier: Apache-2.0
#include "xfus/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>

#include <json.hpp>

namespace xfus {

using ordered_json = nlohmann::ordered_json;

namespace {

std::uint64_t stage_seed(std::uint64_t seed, const std::string& name) {
  return hash_label(seed, "stage." + name);
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.flush();
  if (!out) fail(ErrorKind::Io, "short write to '" + path.string() + "'");
}

template <typename F>
decltype(auto) run_stage(const std::string& name, const std::string& artifact, F&& f) {
  try {
    return std::forward<F>(f)();
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::StageFailure) throw;
    fail(ErrorKind::StageFailure, "stage " + name + " (" + artifact + "): " + e.what());
  } catch (const std::exception& e) {
    fail(ErrorKind::StageFailure, "stage " + name + " (" + artifact + "): " + e.what());
  }
}

ordered_json gen_to_json(const GenParams& g) {
  return {{"per_domain_count", g.per_domain_count},
          {"vocab_size_per_domain", g.vocab_size_per_domain},
          {"context_len", g.context_len},
          {"noise_rate", g.noise_rate},
          {"eval_fraction", g.eval_fraction},
          {"num_options", g.num_options}};
}

void gen_from_json(const ordered_json& j, GenParams& g) {
  g.per_domain_count = j.value("per_domain_count", g.per_domain_count);
  g.vocab_size_per_domain = j.value("vocab_size_per_domain", g.vocab_size_per_domain);
  g.context_len = j.value("context_len", g.context_len);
  g.noise_rate = j.value("noise_rate", g.noise_rate);
  g.eval_fraction = j.value("eval_fraction", g.eval_fraction);
  g.num_options = j.value("num_options", g.num_options);
}

ordered_json policy_to_json(const PolicyConfig& p) {
  return {{"vocab_size", p.vocab_size}, {"max_seq_len", p.max_seq_len},
          {"d_model", p.d_model},       {"n_layers", p.n_layers},
          {"n_heads", p.n_heads},       {"ff_mult", p.ff_mult},
          {"ln_eps", p.ln_eps}};
}

void policy_from_json(const ordered_json& j, PolicyConfig& p) {
  p.vocab_size = j.value("vocab_size", p.vocab_size);
  p.max_seq_len = j.value("max_seq_len", p.max_seq_len);
  p.d_model = j.value("d_model", p.d_model);
  p.n_layers = j.value("n_layers", p.n_layers);
  p.n_heads = j.value("n_heads", p.n_heads);
  p.ff_mult = j.value("ff_mult", p.ff_mult);
  p.ln_eps = j.value("ln_eps", p.ln_eps);
}

ordered_json sft_to_json(const SftConfig& s) {
  return {{"learning_rate", s.learning_rate},
          {"epochs", s.epochs},
          {"batch_size", s.batch_size},
          {"grad_accum_steps", s.grad_accum_steps},
          {"optimizer", to_string(s.optimizer)},
          {"lora_rank", s.lora_rank},
          {"lora_alpha", s.lora_alpha},
          {"lora_scope", to_string(s.lora_scope)},
          {"divergence_factor", s.divergence_factor}};
}

void sft_from_json(const ordered_json& j, SftConfig& s) {
  s.learning_rate = j.value("learning_rate", s.learning_rate);
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.grad_accum_steps = j.value("grad_accum_steps", s.grad_accum_steps);
  if (j.contains("optimizer")) s.optimizer = opt_kind_from_string(j.at("optimizer").get<std::string>());
  s.lora_rank = j.value("lora_rank", s.lora_rank);
  s.lora_alpha = j.value("lora_alpha", s.lora_alpha);
  s.lora_scope = lora_scope_from_string(j.value("lora_scope", to_string(s.lora_scope)));
  s.divergence_factor = j.value("divergence_factor", s.divergence_factor);
}

ordered_json gba_to_json(const GbaConfig& g) {
  return {{"group_size", g.group_size},
          {"clip", g.clip},
          {"kl_beta", g.kl_beta},
          {"eps_std", g.eps_std},
          {"mode", to_string(g.mode)},
          {"w_acc", g.w_acc},
          {"w_fmt", g.w_fmt},
          {"paradigm_assign",
           g.paradigm_assign == ParadigmAssign::per_group_uniform ? "per_group_uniform"
                                                                  : "stratified_within_group"},
          {"max_rollout", g.max_rollout},
          {"iterations", g.iterations},
          {"groups_per_iter", g.groups_per_iter},
          {"learning_rate", g.learning_rate},
          {"optimizer", to_string(g.optimizer)},
          {"temperature", g.temperature},
          {"guideline_conditioning", g.guideline_conditioning},
          {"collapse_patience", g.collapse_patience}};
}

void gba_from_json(const ordered_json& j, GbaConfig& g) {
  g.group_size = j.value("group_size", g.group_size);
  g.clip = j.value("clip", g.clip);
  g.kl_beta = j.value("kl_beta", g.kl_beta);
  g.eps_std = j.value("eps_std", g.eps_std);
  if (j.contains("mode")) g.mode = gba_mode_from_string(j.at("mode").get<std::string>());
  g.w_acc = j.value("w_acc", g.w_acc);
  g.w_fmt = j.value("w_fmt", g.w_fmt);
  if (j.contains("paradigm_assign")) {
    const auto s = j.at("paradigm_assign").get<std::string>();
    if (s == "per_group_uniform") {
      g.paradigm_assign = ParadigmAssign::per_group_uniform;
    } else if (s == "stratified_within_group") {
      g.paradigm_assign = ParadigmAssign::stratified_within_group;
    } else {
      fail(ErrorKind::InvalidArgument, "unknown paradigm_assign '" + s + "'");
    }
  }
  g.max_rollout = j.value("max_rollout", g.max_rollout);
  g.iterations = j.value("iterations", g.iterations);
  g.groups_per_iter = j.value("groups_per_iter", g.groups_per_iter);
  g.learning_rate = j.value("learning_rate", g.learning_rate);
  if (j.contains("optimizer")) g.optimizer = opt_kind_from_string(j.at("optimizer").get<std::string>());
  g.temperature = j.value("temperature", g.temperature);
  g.guideline_conditioning = j.value("guideline_conditioning", g.guideline_conditioning);
  g.collapse_patience = j.value("collapse_patience", g.collapse_patience);
}

ordered_json merge_to_json(const MergeConfig& m) {
  return {{"method", to_string(m.method)}, {"density", m.density},
          {"eta", m.eta},                  {"ta_coeff", m.ta_coeff},
          {"slerp_t", m.slerp_t},          {"strict_fingerprints", m.strict_fingerprints}};
}

void merge_from_json(const ordered_json& j, MergeConfig& m) {
  if (j.contains("method")) m.method = merge_method_from_string(j.at("method").get<std::string>());
  m.density = j.value("density", m.density);
  m.eta = j.value("eta", m.eta);
  m.ta_coeff = j.value("ta_coeff", m.ta_coeff);
  m.slerp_t = j.value("slerp_t", m.slerp_t);
  m.strict_fingerprints = j.value("strict_fingerprints", m.strict_fingerprints);
}

ordered_json pipeline_to_json_obj(const PipelineConfig& cfg) {
  ordered_json j;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir.string();
  j["schedule"] = to_string(cfg.schedule);
  j["resume"] = cfg.resume;
  j["gen"] = gen_to_json(cfg.gen);
  j["policy"] = policy_to_json(cfg.policy);
  j["warmup"] = sft_to_json(cfg.warmup);
  j["sft"] = sft_to_json(cfg.sft);
  j["gba"] = gba_to_json(cfg.gba);
  j["merge_dsa"] = merge_to_json(cfg.merge_dsa);
  j["merge_final"] = merge_to_json(cfg.merge_final);
  return j;
}

PipelineConfig pipeline_from_json_obj(const ordered_json& j) {
  PipelineConfig cfg;
  cfg.seed = j.value("seed", cfg.seed);
  cfg.out_dir = j.value("out_dir", cfg.out_dir.string());
  if (j.contains("schedule")) cfg.schedule = schedule_from_string(j.at("schedule").get<std::string>());
  cfg.resume = j.value("resume", cfg.resume);
  if (j.contains("gen")) gen_from_json(j.at("gen"), cfg.gen);
  if (j.contains("policy")) policy_from_json(j.at("policy"), cfg.policy);
  if (j.contains("sft")) sft_from_json(j.at("sft"), cfg.sft);
  if (j.contains("warmup")) sft_from_json(j.at("warmup"), cfg.warmup);
  if (j.contains("gba")) gba_from_json(j.at("gba"), cfg.gba);
  if (j.contains("merge_dsa")) merge_from_json(j.at("merge_dsa"), cfg.merge_dsa);
  if (j.contains("merge_final")) merge_from_json(j.at("merge_final"), cfg.merge_final);
  return cfg;
}

ordered_json parse_json(const std::string& text, const char* what) {
  ordered_json j = ordered_json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    fail(ErrorKind::InvalidArgument, std::string("malformed ") + what + " JSON");
  }
  return j;
}

ordered_json report_to_json(const EvalReport& r) {
  ordered_json j;
  for (Domain d : kDomains) {
    j[to_string(d)] = r.domain_accuracy[static_cast<std::size_t>(d)];
  }
  j["overall"] = r.overall;
  j["mean_reward"] = r.mean_reward;
  j["format_rate"] = r.format_rate;
  j["model_fingerprint"] = fingerprint_hex(r.model_fingerprint);
  j["dataset_fingerprint"] = fingerprint_hex(r.dataset_fingerprint);
  j["seed"] = r.seed;
  return j;
}

}  // namespace

const char* to_string(Schedule s) {
  switch (s) {
    case Schedule::ours: return "ours";
    case Schedule::dsa_gba: return "dsa_gba";
    case Schedule::mixed_sft_gba: return "mixed_sft_gba";
  }
  fail(ErrorKind::InvalidArgument, "bad schedule value");
}

Schedule schedule_from_string(std::string_view s) {
  if (s == "ours") return Schedule::ours;
  if (s == "dsa_gba") return Schedule::dsa_gba;
  if (s == "mixed_sft_gba") return Schedule::mixed_sft_gba;
  fail(ErrorKind::InvalidArgument, "unknown schedule '" + std::string(s) + "'");
}

SftConfig default_warmup_config() {
  SftConfig c;
  c.learning_rate = 0.002;
  c.epochs = 6;
  c.optimizer = OptKind::adam;
  c.lora_rank = 32;
  c.lora_scope = LoraScope::all_linear;
  c.allow_mixed_domains = true;
  return c;
}

MergeConfig default_dsa_merge_config() {
  MergeConfig c;
  c.eta = 0.1;
  return c;
}

void PipelineConfig::validate() const {
  policy.validate();
  warmup.validate();
  sft.validate();
  gba.validate();
  merge_dsa.validate();
  merge_final.validate();
  const VocabLayout layout{gen.vocab_size_per_domain, gen.num_options};
  if (layout.vocab_size() != policy.vocab_size) {
    fail(ErrorKind::InvalidArgument,
         "dataset layout needs vocab_size " + std::to_string(layout.vocab_size()) +
             ", policy has " + std::to_string(policy.vocab_size));
  }
  if (out_dir.empty()) fail(ErrorKind::InvalidArgument, "out_dir must be set");
}

std::string pipeline_config_to_json(const PipelineConfig& cfg) {
  return pipeline_to_json_obj(cfg).dump(2) + "\n";
}

PipelineConfig pipeline_config_from_json(const std::string& text) {
  return pipeline_from_json_obj(parse_json(text, "pipeline config"));
}

PipelineResult run_pipeline(const PipelineConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out_dir);
  PipelineResult res;

  auto record = [&](std::string name, std::string artifact, std::uint64_t fp, bool reused) {
    res.stages.push_back({std::move(name), std::move(artifact), fingerprint_hex(fp), reused});
  };
  auto try_reuse = [&](const std::filesystem::path& p, std::uint64_t in_fp, std::uint64_t digest,
                       NamedTensorMap& out) {
    if (!cfg.resume || !std::filesystem::exists(p)) return false;
    try {
      auto [map, man] = read_archive(p);
      if (man.base_fingerprint != in_fp || man.training_config_digest != digest) return false;
      out = std::move(map);
      return true;
    } catch (const Error&) {
      return false;
    }
  };

  // Data.
  GenParams gp = cfg.gen;
  gp.seed = stage_seed(cfg.seed, "gen");
  const GenResult gen = run_stage("gen", "data.jsonl", [&] {
    GenResult g = generate(gp);
    export_jsonl(g.dataset, cfg.out_dir / "data.jsonl");
    return g;
  });
  record("gen", "data.jsonl", gen.dataset.fingerprint(), false);
  const auto train_tasks = gen.dataset.select(Split::train);
  const std::uint64_t train_fp = split_fingerprint(gen.dataset, Split::train);

  // Base model.
  const NamedTensorMap init_theta = run_stage("init", "init.xfus", [&] {
    NamedTensorMap b = init_base(cfg.policy, stage_seed(cfg.seed, "init"));
    Manifest m;
    m.role = Role::base;
    m.base_fingerprint = b.fingerprint();
    m.training_config_digest = cfg.policy.digest();
    write_archive(b, m, cfg.out_dir / "init.xfus");
    return b;
  });
  const std::uint64_t init_fp = init_theta.fingerprint();
  record("init", "init.xfus", init_fp, false);

  // Format warmup: pooled SFT over the label-shuffled corpus. The result is
  // the base every adapter trains against and every task vector is measured
  // from.
  SftConfig wc = cfg.warmup;
  wc.seed = stage_seed(cfg.seed, "warmup");
  wc.allow_mixed_domains = true;
  NamedTensorMap base;
  {
    bool reused = try_reuse(cfg.out_dir / "base.xfus", init_fp, wc.digest(), base);
    if (!reused) {
      base = run_stage("warmup", "base.xfus", [&] {
        const StratifiedDataset warm_ds = with_shuffled_labels(
            gen.dataset, gen.layout, stage_seed(cfg.seed, "warmup.labels"));
        TrainExpertResult ter = train_domain_expert(cfg.policy, init_theta, gen.layout,
                                                    warm_ds.select(Split::train), wc);
        NamedTensorMap theta = materialize(cfg.policy, init_theta, ter.adapter);
        Manifest m;
        m.role = Role::base;
        m.base_fingerprint = init_fp;
        m.training_config_digest = wc.digest();
        m.lora_rank = wc.lora_rank;
        m.lora_alpha = wc.lora_alpha;
        write_archive(theta, m, cfg.out_dir / "base.xfus");
        return theta;
      });
    }
    record("warmup", "base.xfus", base.fingerprint(), reused);
  }
  const std::uint64_t base_fp = base.fingerprint();

  // Adaptation.
  std::vector<TaskVector> dsa_taus;
  NamedTensorMap rl_init;
  if (cfg.schedule == Schedule::mixed_sft_gba) {
    SftConfig sc = cfg.sft;
    sc.seed = stage_seed(cfg.seed, "sft.mixed");
    sc.allow_mixed_domains = true;
    const std::string art = "mixed_sft.xfus";
    NamedTensorMap mixed;
    bool reused = try_reuse(cfg.out_dir / art, base_fp, sc.digest(), mixed);
    if (!reused) {
      mixed = run_stage("sft.mixed", art, [&] {
        TrainExpertResult ter = train_domain_expert(cfg.policy, base, gen.layout, train_tasks, sc);
        NamedTensorMap theta = materialize(cfg.policy, base, ter.adapter);
        Manifest m;
        m.role = Role::dsa_expert;
        m.domain = "mixed";
        m.base_fingerprint = base_fp;
        m.training_config_digest = sc.digest();
        m.lora_rank = sc.lora_rank;
        m.lora_alpha = sc.lora_alpha;
        write_archive(theta, m, cfg.out_dir / art);
        return theta;
      });
    }
    record("sft.mixed", art, mixed.fingerprint(), reused);
    rl_init = std::move(mixed);
  } else {
    for (Domain d : kDomains) {
      const std::string dom = to_string(d);
      SftConfig sc = cfg.sft;
      sc.seed = stage_seed(cfg.seed, "dsa." + dom);
      const std::string art = "expert_" + lower(dom) + ".xfus";
      NamedTensorMap expert;
      bool reused = try_reuse(cfg.out_dir / art, base_fp, sc.digest(), expert);
      if (!reused) {
        expert = run_stage("dsa." + dom, art, [&] {
          const auto tasks = gen.dataset.select(d, Split::train);
          TrainExpertResult ter = train_domain_expert(cfg.policy, base, gen.layout, tasks, sc);
          write_adapter(ter.adapter, sc.digest(),
                        cfg.out_dir / ("expert_" + lower(dom) + ".lora.xfus"));
          NamedTensorMap theta = materialize(cfg.policy, base, ter.adapter);
          Manifest m;
          m.role = Role::dsa_expert;
          m.domain = dom;
          m.base_fingerprint = base_fp;
          m.training_config_digest = sc.digest();
          m.lora_rank = sc.lora_rank;
          m.lora_alpha = sc.lora_alpha;
          write_archive(theta, m, cfg.out_dir / art);
          return theta;
        });
      }
      record("dsa." + dom, art, expert.fingerprint(), reused);
      dsa_taus.push_back(make_task_vector(expert, base, Role::dsa_expert, dom));
    }

    const MergedModel md = run_stage("merge_dsa", "merged_dsa.xfus", [&] {
      MergedModel m = merge_models(base, dsa_taus, cfg.merge_dsa);
      Manifest man;
      man.role = Role::merged;
      man.base_fingerprint = base_fp;
      man.training_config_digest = cfg.merge_dsa.digest();
      man.merge = m.info;
      write_archive(m.theta, man, cfg.out_dir / "merged_dsa.xfus");
      write_text(cfg.out_dir / "merge_dsa_report.json", merge_report_json(m.report));
      return m;
    });
    record("merge_dsa", "merged_dsa.xfus", md.theta.fingerprint(), false);
    rl_init = md.theta;
  }
  const std::uint64_t rl_init_fp = rl_init.fingerprint();

  // Guideline-based RL.
  GbaConfig gc = cfg.gba;
  gc.seed = stage_seed(cfg.seed, "gba");
  NamedTensorMap rl;
  bool rl_reused = try_reuse(cfg.out_dir / "rl.xfus", rl_init_fp, gc.digest(), rl);
  if (!rl_reused) {
    rl = run_stage("gba", "rl.xfus", [&] {
      GbaResult gr = train_gba(cfg.policy, rl_init, gen.layout, train_tasks, gc);
      write_text(cfg.out_dir / "rl_log.csv", gba_log_csv(gr.log));
      Manifest m;
      m.role = Role::rl_expert;
      m.base_fingerprint = rl_init_fp;
      m.training_config_digest = gc.digest();
      write_archive(gr.theta, m, cfg.out_dir / "rl.xfus");
      return std::move(gr.theta);
    });
  }
  record("gba", "rl.xfus", rl.fingerprint(), rl_reused);

  // Final model.
  NamedTensorMap final_theta;
  if (cfg.schedule == Schedule::ours) {
    final_theta = run_stage("merge_final", "final.xfus", [&] {
      std::vector<TaskVector> taus = dsa_taus;
      taus.push_back(make_task_vector(rl, base, Role::rl_expert));
      MergedModel m = merge_models(base, taus, cfg.merge_final);
      Manifest man;
      man.role = Role::merged;
      man.base_fingerprint = base_fp;
      man.training_config_digest = cfg.merge_final.digest();
      man.merge = m.info;
      write_archive(m.theta, man, cfg.out_dir / "final.xfus");
      write_text(cfg.out_dir / "merge_final_report.json", merge_report_json(m.report));
      return std::move(m.theta);
    });
  } else {
    final_theta = run_stage("final", "final.xfus", [&] {
      Manifest m;
      m.role = Role::rl_expert;
      m.base_fingerprint = rl_init_fp;
      m.training_config_digest = gc.digest();
      write_archive(rl, m, cfg.out_dir / "final.xfus");
      return rl;
    });
  }
  res.final_fingerprint = final_theta.fingerprint();
  record(cfg.schedule == Schedule::ours ? "merge_final" : "final", "final.xfus",
         res.final_fingerprint, false);

  // Evaluation.
  res.report = run_stage("eval", "pipeline_summary.json", [&] {
    const BoundPolicy pol(cfg.policy, final_theta);
    EvalOptions eo;
    eo.max_new = cfg.gba.max_rollout;
    eo.w_acc = cfg.gba.w_acc;
    eo.w_fmt = cfg.gba.w_fmt;
    eo.seed = cfg.seed;
    eo.trained_on = train_fp;
    return evaluate(pol, gen.layout, gen.dataset, Split::eval, eo);
  });

  ordered_json summary;
  summary["config"] = pipeline_to_json_obj(cfg);
  summary["stages"] = ordered_json::array();
  for (const auto& s : res.stages) {
    summary["stages"].push_back({{"name", s.name},
                                 {"artifact", s.artifact},
                                 {"fingerprint", s.fingerprint},
                                 {"reused", s.reused}});
  }
  summary["final_fingerprint"] = fingerprint_hex(res.final_fingerprint);
  summary["report"] = report_to_json(res.report);
  write_text(cfg.out_dir / "pipeline_summary.json", summary.dump(2) + "\n");
  return res;
}

const std::vector<std::string>& ablation_config_names() {
  static const std::vector<std::string> names = {
      "Base",  "AM",  "CAH",           "BS",      "CSI", "Mixed SFT",
      "GRPO",  "GBA", "Mixed SFT+GBA", "DSA+GBA", "Ours"};
  return names;
}

std::string ablation_config_to_json(const AblationConfig& cfg) {
  ordered_json j;
  j["pipeline"] = pipeline_to_json_obj(cfg.base);
  j["seeds"] = cfg.seeds;
  j["configs"] = cfg.configs;
  return j.dump(2) + "\n";
}

AblationConfig ablation_config_from_json(const std::string& text) {
  const ordered_json j = parse_json(text, "ablation config");
  AblationConfig cfg;
  if (j.contains("pipeline")) cfg.base = pipeline_from_json_obj(j.at("pipeline"));
  if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("configs")) cfg.configs = j.at("configs").get<std::vector<std::string>>();
  return cfg;
}

AblationResult run_ablation(const AblationConfig& cfg) {
  cfg.base.policy.validate();
  cfg.base.sft.validate();
  cfg.base.gba.validate();
  cfg.base.merge_dsa.validate();
  cfg.base.merge_final.validate();
  if (cfg.seeds.empty()) fail(ErrorKind::InvalidArgument, "no seeds given");

  std::vector<std::string> wanted = cfg.configs.empty() ? ablation_config_names() : cfg.configs;
  for (const auto& name : wanted) {
    const auto& all = ablation_config_names();
    if (std::find(all.begin(), all.end(), name) == all.end()) {
      fail(ErrorKind::InvalidArgument, "unknown ablation config '" + name + "'");
    }
  }

  AblationResult res;
  std::map<std::string, std::vector<ReportRow>> by_config;

  for (const std::uint64_t seed : cfg.seeds) {
    GenParams gp = cfg.base.gen;
    gp.seed = stage_seed(seed, "gen");
    const GenResult gen = generate(gp);
    const auto train_tasks = gen.dataset.select(Split::train);
    const NamedTensorMap base = init_base(cfg.base.policy, stage_seed(seed, "init"));
    EvalOptions eo;
    eo.max_new = cfg.base.gba.max_rollout;
    eo.w_acc = cfg.base.gba.w_acc;
    eo.w_fmt = cfg.base.gba.w_fmt;
    eo.seed = seed;
    eo.trained_on = split_fingerprint(gen.dataset, Split::train);

    // Shared per-seed artifacts, built on first use.
    std::array<std::optional<NamedTensorMap>, 4> experts;
    std::optional<std::vector<TaskVector>> dsa_taus;
    std::optional<NamedTensorMap> mixed, merged_dsa, rl_from_merged;

    auto expert = [&](Domain d) -> const NamedTensorMap& {
      auto& slot = experts[static_cast<std::size_t>(d)];
      if (!slot) {
        SftConfig sc = cfg.base.sft;
        sc.seed = stage_seed(seed, std::string("dsa.") + to_string(d));
        const auto tasks = gen.dataset.select(d, Split::train);
        TrainExpertResult ter = train_domain_expert(cfg.base.policy, base, gen.layout, tasks, sc);
        slot = materialize(cfg.base.policy, base, ter.adapter);
      }
      return *slot;
    };
    auto taus = [&]() -> const std::vector<TaskVector>& {
      if (!dsa_taus) {
        std::vector<TaskVector> tv;
        for (Domain d : kDomains) {
          tv.push_back(make_task_vector(expert(d), base, Role::dsa_expert, to_string(d)));
        }
        dsa_taus = std::move(tv);
      }
      return *dsa_taus;
    };
    auto mixed_theta = [&]() -> const NamedTensorMap& {
      if (!mixed) {
        SftConfig sc = cfg.base.sft;
        sc.seed = stage_seed(seed, "sft.mixed");
        sc.allow_mixed_domains = true;
        TrainExpertResult ter =
            train_domain_expert(cfg.base.policy, base, gen.layout, train_tasks, sc);
        mixed = materialize(cfg.base.policy, base, ter.adapter);
      }
      return *mixed;
    };
    auto merged = [&]() -> const NamedTensorMap& {
      if (!merged_dsa) merged_dsa = merge_models(base, taus(), cfg.base.merge_dsa).theta;
      return *merged_dsa;
    };
    auto run_rl = [&](const NamedTensorMap& theta0, bool guideline) {
      GbaConfig gc = cfg.base.gba;
      gc.seed = stage_seed(seed, "gba");
      gc.guideline_conditioning = guideline;
      return train_gba(cfg.base.policy, theta0, gen.layout, train_tasks, gc).theta;
    };
    auto rl_merged = [&]() -> const NamedTensorMap& {
      if (!rl_from_merged) rl_from_merged = run_rl(merged(), true);
      return *rl_from_merged;
    };

    auto cell = [&](const std::string& name) -> NamedTensorMap {
      if (name == "Base") return base;
      if (name == "AM") return expert(Domain::AM);
      if (name == "CAH") return expert(Domain::CAH);
      if (name == "BS") return expert(Domain::BS);
      if (name == "CSI") return expert(Domain::CSI);
      if (name == "Mixed SFT") return mixed_theta();
      if (name == "GRPO") return run_rl(base, false);
      if (name == "GBA") return run_rl(base, true);
      if (name == "Mixed SFT+GBA") return run_rl(mixed_theta(), true);
      if (name == "DSA+GBA") return rl_merged();
      // "Ours": fold the RL task vector back in with the experts.
      std::vector<TaskVector> all = taus();
      all.push_back(make_task_vector(rl_merged(), base, Role::rl_expert));
      return merge_models(base, all, cfg.base.merge_final).theta;
    };

    for (const auto& name : wanted) {
      try {
        const NamedTensorMap theta = cell(name);
        const BoundPolicy pol(cfg.base.policy, theta);
        const EvalReport rep = evaluate(pol, gen.layout, gen.dataset, Split::eval, eo);
        by_config[name].push_back(to_report_row(name, rep));
      } catch (const std::exception& e) {
        res.failures.push_back(name + "/" + std::to_string(seed) + ": " + e.what());
      }
    }
  }

  for (const auto& name : wanted) {
    const auto it = by_config.find(name);
    if (it == by_config.end()) continue;
    const auto& rows = it->second;
    for (const auto& r : rows) res.rows.push_back(r);
    ReportRow mean;
    mean.config = name;
    mean.seed = "mean";
    for (const auto& r : rows) {
      for (std::size_t d = 0; d < 4; ++d) mean.domain[d] += r.domain[d];
      mean.overall += r.overall;
      mean.mean_reward += r.mean_reward;
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (auto& v : mean.domain) v *= inv;
    mean.overall *= inv;
    mean.mean_reward *= inv;
    res.rows.push_back(std::move(mean));
  }
  return res;
}

}  // namespace xfus
