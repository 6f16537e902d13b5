// SPDX-License-Identifier: Apache-2.0
#include "xfus/gba.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace xfus {

GuidelinePrompt build_guideline_prompt(const VocabLayout& layout, const ClinicTask& task,
                                       Paradigm paradigm) {
  GuidelinePrompt p;
  p.paradigm = paradigm;
  p.prefix = {layout.opener(paradigm)};
  p.context = task.context;
  p.tokens = guideline_prompt_tokens(layout, task, paradigm);
  return p;
}

const char* to_string(GbaMode m) {
  return m == GbaMode::paper_reinforce ? "paper_reinforce" : "clipped_kl";
}

GbaMode gba_mode_from_string(std::string_view s) {
  if (s == "paper_reinforce") return GbaMode::paper_reinforce;
  if (s == "clipped_kl") return GbaMode::clipped_kl;
  fail(ErrorKind::InvalidArgument, "unknown objective mode '" + std::string(s) + "'");
}

void GbaConfig::validate() const {
  if (group_size < 2) fail(ErrorKind::InvalidArgument, "group_size must be >= 2");
  if (!(eps_std > 0.0)) fail(ErrorKind::InvalidArgument, "eps_std must be positive");
  if (!(clip >= 0.0 && clip < 1.0)) fail(ErrorKind::InvalidArgument, "clip must lie in [0,1)");
  if (kl_beta < 0.0) fail(ErrorKind::InvalidArgument, "kl_beta must be nonnegative");
  if (w_acc < 0.0 || w_fmt < 0.0) fail(ErrorKind::InvalidArgument, "reward weights must be nonnegative");
  if (max_rollout == 0) fail(ErrorKind::InvalidArgument, "max_rollout must be >= 1");
  if (groups_per_iter == 0) fail(ErrorKind::InvalidArgument, "groups_per_iter must be >= 1");
  if (!(learning_rate > 0.0)) fail(ErrorKind::InvalidArgument, "learning_rate must be positive");
  if (!(temperature > 0.0)) fail(ErrorKind::InvalidArgument, "temperature must be positive");
  if (collapse_patience == 0) fail(ErrorKind::InvalidArgument, "collapse_patience must be >= 1");
  if (paradigm_assign == ParadigmAssign::stratified_within_group && group_size % 4 != 0) {
    fail(ErrorKind::InvalidArgument, "stratified groups need group_size divisible by 4");
  }
}

std::uint64_t GbaConfig::digest() const {
  Fnv64 f;
  f.update_str("gba_config");
  f.update_u64(group_size);
  f.update_f64(clip);
  f.update_f64(kl_beta);
  f.update_f64(eps_std);
  f.update_u64(static_cast<std::uint64_t>(mode));
  f.update_f64(w_acc);
  f.update_f64(w_fmt);
  f.update_u64(static_cast<std::uint64_t>(paradigm_assign));
  f.update_u64(max_rollout);
  f.update_u64(iterations);
  f.update_f64(learning_rate);
  f.update_u64(static_cast<std::uint64_t>(optimizer));
  f.update_u64(seed);
  f.update_f64(temperature);
  f.update_u64(guideline_conditioning ? 1 : 0);
  f.update_u64(collapse_patience);
  f.update_u64(groups_per_iter);
  return f.h;
}

bool format_valid(const VocabLayout& layout, Domain domain, std::span<const TokenId> y) {
  const std::size_t n = y.size();
  if (n < 3) return false;
  if (y[n - 2] != layout.answer_marker(domain)) return false;
  const TokenId label0 = layout.label(domain, 0);
  if (y[n - 1] < label0 || y[n - 1] >= label0 + static_cast<TokenId>(layout.num_options)) {
    return false;
  }
  for (std::size_t i = 0; i + 2 < n; ++i) {
    if (layout.is_answer_marker(y[i]) || layout.is_label(y[i])) return false;
  }
  return true;
}

double reward(const VocabLayout& layout, std::span<const TokenId> y, const ClinicTask& task,
              double w_acc, double w_fmt) {
  if (!format_valid(layout, task.domain, y)) return 0.0;
  double r = w_fmt;
  if (y[y.size() - 1] == layout.label(task.domain, task.gold)) r += w_acc;
  return r;
}

std::vector<double> group_advantages(std::span<const double> rewards, double eps_std) {
  const std::size_t g = rewards.size();
  if (g < 2) fail(ErrorKind::InvalidArgument, "advantage group needs at least 2 rewards");
  if (!(eps_std > 0.0)) fail(ErrorKind::InvalidArgument, "eps_std must be positive");
  double mu = 0.0;
  for (double r : rewards) mu += r;
  mu /= static_cast<double>(g);
  double var = 0.0;
  for (double r : rewards) var += (r - mu) * (r - mu);
  var /= static_cast<double>(g);
  const double denom = std::sqrt(var) + eps_std;
  std::vector<double> out(g);
  for (std::size_t i = 0; i < g; ++i) out[i] = (rewards[i] - mu) / denom;
  return out;
}

TrajectoryGroup make_group(const BoundPolicy& policy, const VocabLayout& layout,
                           const ClinicTask& task, std::span<const Paradigm> paradigms,
                           const GbaConfig& cfg, SeededRng& rng) {
  if (paradigms.size() != cfg.group_size && paradigms.size() != 1 && !paradigms.empty()) {
    fail(ErrorKind::InvalidArgument, "paradigm list must be empty, 1, or group-sized");
  }
  TrajectoryGroup group;
  SampleOptions opts;
  opts.max_new = cfg.max_rollout;
  opts.temperature = cfg.temperature;
  for (Domain d : kDomains) opts.answer_markers.push_back(layout.answer_marker(d));
  std::vector<double> rewards;
  for (std::size_t i = 0; i < cfg.group_size; ++i) {
    Trajectory traj;
    if (paradigms.empty()) {
      traj.prompt = task.context;
    } else {
      const Paradigm p = paradigms.size() == 1 ? paradigms[0] : paradigms[i];
      traj.prompt = guideline_prompt_tokens(layout, task, p);
    }
    SeededRng traj_rng = rng.child(1000 + i);
    traj.y = policy.sample(traj.prompt, opts, &traj_rng);
    if (traj.y.empty()) {
      fail(ErrorKind::InvalidArgument, "rollout produced no tokens; prompt fills the window");
    }
    traj.old_logp = policy.sequence_logprob(traj.prompt, traj.y).second;
    traj.reward = reward(layout, traj.y, task, cfg.w_acc, cfg.w_fmt);
    rewards.push_back(traj.reward);
    group.items.push_back(std::move(traj));
  }
  const std::vector<double> adv = group_advantages(rewards, cfg.eps_std);
  double mu = 0.0;
  for (double r : rewards) mu += r;
  mu /= static_cast<double>(rewards.size());
  double var = 0.0;
  for (double r : rewards) var += (r - mu) * (r - mu);
  group.mean_reward = mu;
  group.sigma = std::sqrt(var / static_cast<double>(rewards.size()));
  for (std::size_t i = 0; i < adv.size(); ++i) group.items[i].advantage = adv[i];
  return group;
}

GbaObjective gba_objective(const BoundPolicy& policy, const BoundPolicy* ref,
                           std::span<const TrajectoryGroup> groups, const GbaConfig& cfg,
                           bool want_grads) {
  if (groups.empty()) fail(ErrorKind::InvalidArgument, "no trajectory groups");
  if (cfg.mode == GbaMode::clipped_kl && ref == nullptr) {
    fail(ErrorKind::MissingReference, "clipped_kl mode needs a reference policy");
  }
  const std::uint32_t V = policy.config().vocab_size;
  const double inv_groups = 1.0 / static_cast<double>(groups.size());

  GbaObjective out;
  std::vector<double> logp(V), probs(V), ref_logp(V);
  double kl_sum = 0.0;
  std::size_t kl_count = 0;
  bool first_grad = true;

  for (const auto& group : groups) {
    const double inv_g = 1.0 / static_cast<double>(group.items.size());
    for (const auto& traj : group.items) {
      if (traj.y.empty()) fail(ErrorKind::InvalidArgument, "empty trajectory");
      if (cfg.mode == GbaMode::clipped_kl && traj.old_logp.size() != traj.y.size()) {
        fail(ErrorKind::MissingReference, "trajectory lacks stored old-policy log-probs");
      }
      std::vector<TokenId> seq(traj.prompt.begin(), traj.prompt.end());
      seq.insert(seq.end(), traj.y.begin(), traj.y.end());
      ForwardTrace tr = policy.forward(seq, want_grads);
      ForwardTrace ref_tr;
      const bool have_ref = ref != nullptr;
      if (have_ref) ref_tr = ref->forward(seq, false);

      const std::size_t P = traj.prompt.size();
      const std::size_t N = traj.y.size();
      const double unit = inv_groups * inv_g / static_cast<double>(N);
      std::vector<double> dlogits;
      if (want_grads) dlogits.assign(seq.size() * V, 0.0);

      double traj_kl = 0.0;
      for (std::size_t t = 0; t < N; ++t) {
        const std::size_t row = P + t - 1;
        const auto logits = tr.logits_row(row);
        log_softmax_row(logits, logp);
        const TokenId y_t = traj.y[t];
        const double lp = logp[y_t];

        double kl_t = 0.0;
        if (have_ref) {
          softmax_row(logits, probs);
          log_softmax_row(ref_tr.logits_row(row), ref_logp);
          for (std::uint32_t v = 0; v < V; ++v) kl_t += probs[v] * (logp[v] - ref_logp[v]);
          traj_kl += kl_t;
        }

        double coef = 0.0;
        if (cfg.mode == GbaMode::paper_reinforce) {
          out.objective += traj.advantage * lp * unit;
          coef = traj.advantage * unit;
        } else {
          const double rho = std::exp(lp - traj.old_logp[t]);
          const double clipped = std::clamp(rho, 1.0 - cfg.clip, 1.0 + cfg.clip);
          const double a_val = rho * traj.advantage;
          const double b_val = clipped * traj.advantage;
          if (a_val <= b_val) {
            out.objective += a_val * unit;
            coef = traj.advantage * rho * unit;
          } else {
            out.objective += b_val * unit;
            coef = 0.0;
          }
          out.objective -= cfg.kl_beta * kl_t * unit;
        }

        if (want_grads) {
          if (!have_ref) softmax_row(logits, probs);
          double* drow = dlogits.data() + row * V;
          if (coef != 0.0) {
            for (std::uint32_t v = 0; v < V; ++v) drow[v] -= coef * probs[v];
            drow[y_t] += coef;
          }
          if (cfg.mode == GbaMode::clipped_kl && cfg.kl_beta != 0.0) {
            const double w = cfg.kl_beta * unit;
            for (std::uint32_t v = 0; v < V; ++v) {
              const double delta = logp[v] - ref_logp[v];
              drow[v] -= w * probs[v] * (delta - kl_t);
            }
          }
        }
      }
      if (have_ref) {
        kl_sum += traj_kl / static_cast<double>(N);
        ++kl_count;
      }

      if (want_grads) {
        NamedTensorMap g = policy.backward(tr, dlogits);
        if (first_grad) {
          out.grads = std::move(g);
          first_grad = false;
        } else {
          out.grads = map_combine([](const Tensor& a, const Tensor& b) { return add(a, b); },
                                  out.grads, g);
        }
      }
    }
  }
  out.kl = kl_count ? kl_sum / static_cast<double>(kl_count) : 0.0;
  return out;
}

GbaResult train_gba(const PolicyConfig& pcfg, const NamedTensorMap& theta_init,
                    const VocabLayout& layout, std::span<const ClinicTask* const> tasks,
                    const GbaConfig& cfg) {
  cfg.validate();
  if (tasks.empty()) fail(ErrorKind::InvalidArgument, "no tasks to train on");

  GbaResult res;
  res.theta = theta_init;
  const BoundPolicy ref(pcfg, theta_init);
  Optimizer opt(cfg.optimizer, cfg.learning_rate);
  std::size_t zero_streak = 0;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const BoundPolicy policy(pcfg, res.theta);
    SeededRng it_rng(hash_label(cfg.seed, "gba.iter." + std::to_string(it)));

    std::vector<TrajectoryGroup> groups;
    groups.reserve(cfg.groups_per_iter);
    double format_hits = 0.0;
    double reward_sum = 0.0;
    std::size_t traj_count = 0;
    for (std::size_t b = 0; b < cfg.groups_per_iter; ++b) {
      const ClinicTask& task = *tasks[it_rng.uniform_int(tasks.size())];

      std::vector<Paradigm> paradigms;
      if (cfg.guideline_conditioning) {
        if (cfg.paradigm_assign == ParadigmAssign::per_group_uniform) {
          paradigms = {kParadigms[it_rng.uniform_int(4)]};
        } else {
          for (std::size_t i = 0; i < cfg.group_size; ++i) paradigms.push_back(kParadigms[i % 4]);
        }
      }

      TrajectoryGroup group = make_group(policy, layout, task, paradigms, cfg, it_rng);
      for (const auto& traj : group.items) {
        if (format_valid(layout, task.domain, traj.y)) format_hits += 1.0;
        reward_sum += traj.reward;
        ++traj_count;
      }
      groups.push_back(std::move(group));
    }

    GbaObjective obj = gba_objective(policy, &ref, groups, cfg, true);
    opt.step(res.theta, obj.grads, +1.0);

    GbaLogRow row;
    row.iteration = it;
    row.mean_reward = reward_sum / static_cast<double>(traj_count);
    row.kl = obj.kl;
    row.format_rate = format_hits / static_cast<double>(traj_count);
    res.log.push_back(row);

    if (row.mean_reward == 0.0) {
      if (++zero_streak >= cfg.collapse_patience) {
        fail(ErrorKind::RewardCollapse,
             "group reward stayed at zero for " + std::to_string(zero_streak) +
                 " consecutive iterations (last iteration " + std::to_string(it) + ")");
      }
    } else {
      zero_streak = 0;
    }
  }
  return res;
}

std::string gba_log_csv(std::span<const GbaLogRow> rows) {
  std::string out = "iteration,mean_reward,kl,format_rate\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6f\n", r.iteration, r.mean_reward, r.kl,
                  r.format_rate);
    out += buf;
  }
  return out;
}

}  // namespace xfus
