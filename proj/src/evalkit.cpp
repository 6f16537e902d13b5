// SPDX-License-Identifier: Apache-2.0
#include "xfus/evalkit.hpp"

#include <cmath>
#include <cstdio>

#include "xfus/gba.hpp"

namespace xfus {
namespace {

void hash_tokens(Fnv64& f, std::span<const TokenId> toks) {
  f.update_u64(toks.size());
  for (TokenId t : toks) f.update_u64(t);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace

std::uint64_t split_fingerprint(const StratifiedDataset& ds, Split split) {
  Fnv64 f;
  f.update_str("split");
  f.update_u64(static_cast<std::uint64_t>(split));
  for (const ClinicTask& t : ds.tasks) {
    if (t.split != split) continue;
    f.update_str(t.id);
    f.update_u64(0);
    f.update_u64(static_cast<std::uint64_t>(t.domain));
    hash_tokens(f, t.context);
    hash_tokens(f, t.options);
    f.update_u64(static_cast<std::uint64_t>(t.gold));
    hash_tokens(f, t.trace);
    f.update_u64(static_cast<std::uint64_t>(t.paradigm));
  }
  return f.h;
}

EvalReport evaluate_decoder(const DecodeFn& decode, const VocabLayout& layout,
                            const StratifiedDataset& ds, Split split, const EvalOptions& opts) {
  const std::uint64_t ds_fp = split_fingerprint(ds, split);
  if (opts.trained_on && *opts.trained_on == ds_fp) {
    fail(ErrorKind::SplitContamination,
         "eval split fingerprint " + fingerprint_hex(ds_fp) +
             " matches the split this model was trained on");
  }
  const auto tasks = ds.select(split);
  if (tasks.empty()) fail(ErrorKind::InvalidArgument, "selected split is empty");

  EvalReport rep;
  rep.dataset_fingerprint = ds_fp;
  rep.seed = opts.seed;
  std::array<std::size_t, 4> correct{};
  double reward_sum = 0.0;
  std::size_t format_hits = 0;

  for (const ClinicTask* task : tasks) {
    const std::vector<TokenId> y = decode(*task);
    reward_sum += reward(layout, y, *task, opts.w_acc, opts.w_fmt);
    if (format_valid(layout, task->domain, y)) ++format_hits;

    int pick = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (layout.is_answer_marker(y[i])) {
        if (i + 1 < y.size() && layout.is_label(y[i + 1])) {
          const TokenId own = layout.label(task->domain, 0);
          const auto off = static_cast<std::int64_t>(y[i + 1]) - static_cast<std::int64_t>(own);
          pick = off >= 0 && off < layout.num_options ? static_cast<int>(off) : -1;
        }
        break;
      }
    }
    const auto d = static_cast<std::size_t>(task->domain);
    ++rep.domain_counts[d];
    if (pick == task->gold) ++correct[d];
  }

  std::size_t total_correct = 0;
  for (std::size_t d = 0; d < 4; ++d) {
    total_correct += correct[d];
    rep.domain_accuracy[d] =
        rep.domain_counts[d] == 0
            ? 0.0
            : static_cast<double>(correct[d]) / static_cast<double>(rep.domain_counts[d]);
  }
  const double total = static_cast<double>(tasks.size());
  rep.overall = static_cast<double>(total_correct) / total;
  rep.mean_reward = reward_sum / total;
  rep.format_rate = static_cast<double>(format_hits) / total;
  return rep;
}

EvalReport evaluate(const BoundPolicy& policy, const VocabLayout& layout,
                    const StratifiedDataset& ds, Split split, const EvalOptions& opts) {
  SampleOptions so;
  so.max_new = opts.max_new;
  so.greedy = true;
  for (Domain d : kDomains) so.answer_markers.push_back(layout.answer_marker(d));
  DecodeFn decode = [&](const ClinicTask& task) {
    const auto prompt = guideline_prompt_tokens(layout, task, task.paradigm);
    return policy.sample(prompt, so, nullptr);
  };
  EvalReport rep = evaluate_decoder(decode, layout, ds, split, opts);
  rep.model_fingerprint = policy.params_fingerprint();
  return rep;
}

DecodeFn oracle_decoder(const GenResult& gen) {
  return [layout = gen.layout, tables = gen.tables](const ClinicTask& task) {
    const auto& table = tables[static_cast<std::size_t>(task.domain)];
    const int gold = table.gold_for(task.context);
    return std::vector<TokenId>{task.context.front(), layout.answer_marker(task.domain),
                                layout.label(task.domain, gold)};
  };
}

ReportRow to_report_row(std::string config, const EvalReport& report) {
  ReportRow row;
  row.config = std::move(config);
  row.seed = std::to_string(report.seed);
  row.domain = report.domain_accuracy;
  row.overall = report.overall;
  row.mean_reward = report.mean_reward;
  return row;
}

double round2(double v) { return std::nearbyint(v * 100.0) / 100.0; }

std::string format2(double v) {
  const long long n = std::llround(std::nearbyint(v * 100.0));
  const long long a = n < 0 ? -n : n;
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s%lld.%02lld", n < 0 ? "-" : "", a / 100, a % 100);
  return buf;
}

std::string emit_report(std::span<const ReportRow> rows, ReportFormat format) {
  if (rows.empty()) fail(ErrorKind::InvalidArgument, "no report rows");
  std::string out;
  if (format == ReportFormat::markdown_table) {
    out += "| config | seed | AM | CAH | BS | CSI | overall | mean_reward |\n";
    out += "|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
      out += "| " + r.config + " | " + r.seed;
      for (double a : r.domain) out += " | " + format2(a * 100.0);
      out += " | " + format2(r.overall * 100.0);
      out += " | " + format2(r.mean_reward);
      out += " |\n";
    }
  } else {
    out += "config,seed,AM,CAH,BS,CSI,overall,mean_reward\n";
    for (const auto& r : rows) {
      out += csv_field(r.config) + "," + csv_field(r.seed);
      for (double a : r.domain) out += "," + format2(a * 100.0);
      out += "," + format2(r.overall * 100.0);
      out += "," + format2(r.mean_reward);
      out += "\n";
    }
  }
  return out;
}

}  // namespace xfus
