// SPDX-License-Identifier: Apache-2.0
#include "xfus/dsa.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace xfus {

void SftConfig::validate() const {
  if (!(learning_rate > 0.0)) fail(ErrorKind::InvalidArgument, "learning_rate must be positive");
  if (batch_size == 0) fail(ErrorKind::InvalidArgument, "batch_size must be >= 1");
  if (grad_accum_steps == 0) fail(ErrorKind::InvalidArgument, "grad_accum_steps must be >= 1");
  if (lora_rank < 1) fail(ErrorKind::InvalidArgument, "lora_rank must be >= 1");
  if (!(lora_alpha > 0.0)) fail(ErrorKind::InvalidArgument, "lora_alpha must be positive");
  if (!(divergence_factor > 1.0)) {
    fail(ErrorKind::InvalidArgument, "divergence_factor must exceed 1");
  }
}

std::uint64_t SftConfig::digest() const {
  Fnv64 f;
  f.update_str("sft_config");
  f.update_f64(learning_rate);
  f.update_u64(epochs);
  f.update_u64(batch_size);
  f.update_u64(grad_accum_steps);
  f.update_u64(static_cast<std::uint64_t>(optimizer));
  f.update_u64(seed);
  f.update_u64(static_cast<std::uint64_t>(lora_rank));
  f.update_f64(lora_alpha);
  f.update_str(to_string(lora_scope));
  f.update_u64(allow_mixed_domains ? 1 : 0);
  f.update_f64(divergence_factor);
  return f.h;
}

SftBatchResult sft_loss(const BoundPolicy& policy, const VocabLayout& layout,
                        std::span<const ClinicTask* const> batch, bool allow_mixed) {
  if (batch.empty()) fail(ErrorKind::InvalidArgument, "sft_loss on an empty batch");
  if (!allow_mixed) {
    for (const auto* t : batch) {
      if (t->domain != batch.front()->domain) {
        fail(ErrorKind::MixedDomainBatch,
             std::string("batch mixes domains ") + to_string(batch.front()->domain) + " and " +
                 to_string(t->domain));
      }
    }
  }

  const std::uint32_t V = policy.config().vocab_size;
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  SftBatchResult out;
  std::vector<double> logp(V), probs(V);
  bool first = true;
  for (const auto* task : batch) {
    const std::vector<TokenId> prompt =
        guideline_prompt_tokens(layout, *task, task->paradigm);
    std::vector<TokenId> seq(prompt.begin(), prompt.end());
    seq.insert(seq.end(), task->trace.begin(), task->trace.end());
    ForwardTrace tr = policy.forward(seq, true);

    const std::size_t P = prompt.size();
    const std::size_t N = task->trace.size();
    const double w = inv_batch / static_cast<double>(N);
    std::vector<double> dlogits(seq.size() * V, 0.0);
    double task_ce = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const std::size_t row = P + i - 1;
      const auto logits = tr.logits_row(row);
      log_softmax_row(logits, logp);
      softmax_row(logits, probs);
      const TokenId target = task->trace[i];
      task_ce -= logp[target];
      double* drow = dlogits.data() + row * V;
      for (std::uint32_t vtok = 0; vtok < V; ++vtok) drow[vtok] = w * probs[vtok];
      drow[target] -= w;
    }
    out.loss += task_ce / static_cast<double>(N) * inv_batch;

    NamedTensorMap g = policy.backward(tr, dlogits);
    if (first) {
      out.grads = std::move(g);
      first = false;
    } else {
      out.grads = map_combine([](const Tensor& a, const Tensor& b) { return add(a, b); },
                              out.grads, g);
    }
  }
  return out;
}

TrainExpertResult train_domain_expert(const PolicyConfig& pcfg, const NamedTensorMap& base,
                                      const VocabLayout& layout,
                                      std::span<const ClinicTask* const> tasks,
                                      const SftConfig& cfg) {
  cfg.validate();
  if (tasks.empty()) fail(ErrorKind::InvalidArgument, "no tasks to train on");
  if (!cfg.allow_mixed_domains) {
    for (const auto* t : tasks) {
      if (t->domain != tasks.front()->domain) {
        fail(ErrorKind::MixedDomainBatch,
             std::string("training set mixes domains ") + to_string(tasks.front()->domain) +
                 " and " + to_string(t->domain));
      }
    }
  }
  const Domain domain = tasks.front()->domain;

  TrainExpertResult res;
  res.adapter = init_lora(pcfg, base, domain, cfg.lora_rank, cfg.lora_alpha,
                          hash_label(cfg.seed, "dsa.init"), cfg.lora_scope);
  Optimizer opt(cfg.optimizer, cfg.learning_rate);
  SeededRng order_rng(hash_label(cfg.seed, "dsa.order"));

  double initial_loss = -1.0;
  std::vector<std::size_t> idx(tasks.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(idx);
    double epoch_loss = 0.0;
    std::size_t epoch_batches = 0;

    std::size_t cursor = 0;
    while (cursor < idx.size()) {
      NamedTensorMap accum;
      std::size_t micro = 0;
      double window_tasks = 0.0;
      for (; micro < cfg.grad_accum_steps && cursor < idx.size(); ++micro) {
        std::vector<const ClinicTask*> batch;
        for (std::size_t b = 0; b < cfg.batch_size && cursor < idx.size(); ++b, ++cursor) {
          batch.push_back(tasks[idx[cursor]]);
        }
        BoundPolicy policy(pcfg, base, res.adapter);
        SftBatchResult r = sft_loss(policy, layout, batch, cfg.allow_mixed_domains);
        if (initial_loss < 0.0) initial_loss = r.loss;
        if (r.loss > cfg.divergence_factor * initial_loss) {
          fail(ErrorKind::Divergence,
               "loss " + std::to_string(r.loss) + " exceeds " +
                   std::to_string(cfg.divergence_factor) + "x the initial " +
                   std::to_string(initial_loss));
        }
        epoch_loss += r.loss;
        ++epoch_batches;
        window_tasks += 1.0;
        if (accum.empty()) {
          accum = std::move(r.grads);
        } else {
          accum = map_combine([](const Tensor& a, const Tensor& b) { return add(a, b); },
                              accum, r.grads);
        }
      }
      const double inv_windows = 1.0 / window_tasks;
      NamedTensorMap mean_grads;
      for (const auto& [name, t] : accum) mean_grads.set(name, scale(t, inv_windows));
      opt.step(res.adapter.params, mean_grads, -1.0);
    }
    res.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_batches));
  }
  return res;
}

}  // namespace xfus
