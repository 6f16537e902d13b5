// SPDX-License-Identifier: Apache-2.0
#include "xfus/clinicsim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "xfus/error.hpp"

namespace xfus {

namespace {

using ordered_json = nlohmann::ordered_json;

}  // namespace

const char* to_string(Domain d) {
  switch (d) {
    case Domain::AM: return "AM";
    case Domain::CAH: return "CAH";
    case Domain::BS: return "BS";
    case Domain::CSI: return "CSI";
  }
  return "AM";
}

Domain domain_from_string(std::string_view s) {
  for (Domain d : kDomains) {
    if (s == to_string(d)) return d;
  }
  fail(ErrorKind::InvalidArgument, "unknown domain '" + std::string(s) + "'");
}

const char* to_string(Paradigm p) {
  switch (p) {
    case Paradigm::Differential: return "Differential";
    case Paradigm::Intuitive: return "Intuitive";
    case Paradigm::Analytical: return "Analytical";
    case Paradigm::Bayesian: return "Bayesian";
  }
  return "Differential";
}

Paradigm paradigm_from_string(std::string_view s) {
  for (Paradigm p : kParadigms) {
    if (s == to_string(p)) return p;
  }
  fail(ErrorKind::InvalidArgument, "unknown paradigm '" + std::string(s) + "'");
}

const char* to_string(Split s) { return s == Split::train ? "train" : "eval"; }

Split split_from_string(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "eval") return Split::eval;
  fail(ErrorKind::InvalidArgument, "unknown split '" + std::string(s) + "'");
}

std::vector<int> DomainRuleTable::tally(std::span<const TokenId> context) const {
  std::vector<int> counts(static_cast<std::size_t>(num_options), 0);
  for (TokenId t : context) {
    if (t < vocab_base) continue;
    std::uint32_t local = t - vocab_base;
    if (local >= votes.size()) continue;
    counts[static_cast<std::size_t>(votes[local])] += 1;
  }
  return counts;
}

int DomainRuleTable::gold_for(std::span<const TokenId> context) const {
  const std::vector<int> counts = tally(context);
  const int best = *std::max_element(counts.begin(), counts.end());
  std::vector<int> tied;
  for (int c = 0; c < num_options; ++c) {
    if (counts[static_cast<std::size_t>(c)] == best) tied.push_back(c);
  }
  if (tied.size() == 1) return tied[0];
  std::vector<TokenId> sorted(context.begin(), context.end());
  std::sort(sorted.begin(), sorted.end());
  Fnv64 f;
  for (TokenId t : sorted) f.update_u64(t);
  return tied[mix64(f.h) % tied.size()];
}

namespace {

/// The "decisive" token: the smallest context token voting for the clean
/// gold, i.e. the first finding that supports the majority label.
TokenId decisive_token(const DomainRuleTable& table, std::span<const TokenId> context,
                       int clean_gold) {
  std::vector<TokenId> sorted(context.begin(), context.end());
  std::sort(sorted.begin(), sorted.end());
  for (TokenId t : sorted) {
    std::uint32_t local = t - table.vocab_base;
    if (local < table.votes.size() && table.votes[local] == clean_gold) return t;
  }
  return sorted.front();
}

std::vector<TokenId> build_trace(const VocabLayout& layout, const DomainRuleTable& table,
                                 std::span<const TokenId> context, int clean_gold, int gold,
                                 Paradigm paradigm) {
  std::vector<TokenId> asc(context.begin(), context.end());
  std::sort(asc.begin(), asc.end());
  std::vector<TokenId> cite;
  switch (paradigm) {
    case Paradigm::Differential:
      cite = asc;
      break;
    case Paradigm::Intuitive:
      cite = {decisive_token(table, context, clean_gold)};
      break;
    case Paradigm::Analytical:
      cite.assign(asc.rbegin(), asc.rend());
      break;
    case Paradigm::Bayesian: {
      TokenId dec = decisive_token(table, context, clean_gold);
      cite.push_back(dec);
      for (TokenId t : asc) {
        if (t != dec) cite.push_back(t);
      }
      break;
    }
  }
  std::vector<TokenId> trace;
  trace.reserve(cite.size() + 3);
  trace.push_back(layout.opener(paradigm));
  trace.insert(trace.end(), cite.begin(), cite.end());
  trace.push_back(layout.answer_marker(table.domain));
  trace.push_back(layout.label(table.domain, gold));
  return trace;
}

}  // namespace

std::vector<const ClinicTask*> StratifiedDataset::select(Domain d, Split s) const {
  std::vector<const ClinicTask*> out;
  for (const auto& t : tasks) {
    if (t.domain == d && t.split == s) out.push_back(&t);
  }
  return out;
}

std::vector<const ClinicTask*> StratifiedDataset::select(Split s) const {
  std::vector<const ClinicTask*> out;
  for (const auto& t : tasks) {
    if (t.split == s) out.push_back(&t);
  }
  return out;
}

std::uint64_t StratifiedDataset::fingerprint() const {
  Fnv64 f;
  f.update_str(export_jsonl_string(*this));
  return f.h;
}

GenResult generate(const GenParams& p) {
  if (p.context_len < 1) fail(ErrorKind::InvalidArgument, "context_len must be >= 1");
  if (p.vocab_size_per_domain < p.context_len) {
    fail(ErrorKind::InvalidArgument, "vocab_size_per_domain must be >= context_len");
  }
  if (p.per_domain_count < 1) fail(ErrorKind::InvalidArgument, "per_domain_count must be >= 1");
  if (!(p.noise_rate >= 0.0 && p.noise_rate <= 1.0)) {
    fail(ErrorKind::InvalidArgument, "noise_rate must lie in [0,1]");
  }
  if (!(p.eval_fraction >= 0.0 && p.eval_fraction < 1.0)) {
    fail(ErrorKind::InvalidArgument, "eval_fraction must lie in [0,1)");
  }
  if (p.num_options < 2) fail(ErrorKind::InvalidArgument, "num_options must be >= 2");
  if (p.vocab_size_per_domain < static_cast<std::uint32_t>(p.num_options)) {
    fail(ErrorKind::InvalidArgument, "vocab_size_per_domain must be >= num_options");
  }

  GenResult out;
  out.layout = VocabLayout{p.vocab_size_per_domain, p.num_options};
  const VocabLayout& layout = out.layout;

  const auto eval_count = static_cast<std::size_t>(std::llround(
      static_cast<double>(p.per_domain_count) * p.eval_fraction));
  const std::size_t train_count = p.per_domain_count - std::min(eval_count, p.per_domain_count);

  for (std::size_t k = 0; k < kDomains.size(); ++k) {
    const Domain d = kDomains[k];
    const std::string dname = to_string(d);

    std::vector<TokenId> options;
    for (int j = 0; j < p.num_options; ++j) options.push_back(layout.label(d, j));

    SeededRng table_rng(hash_label(p.seed, "clinicsim.table." + dname));
    const std::size_t V = p.vocab_size_per_domain;
    const auto C = static_cast<std::size_t>(p.num_options);
    // Balanced vote assignment: the option multiset {0..C-1, 0..C-1, ...} is
    // shuffled across the sub-vocabulary, so every option backs an (almost)
    // equal number of findings and stays reachable as gold.
    std::vector<int> votes(V, 0);
    for (std::size_t i = 0; i < V; ++i) votes[i] = static_cast<int>(i % C);
    table_rng.shuffle(votes);
    out.tables[k] = DomainRuleTable{d, layout.domain_base(d), votes, p.num_options};
    const DomainRuleTable& table = out.tables[k];

    SeededRng rng(hash_label(p.seed, "clinicsim.tasks." + dname));
    std::vector<std::uint32_t> pool(p.vocab_size_per_domain);
    for (std::size_t i = 0; i < p.per_domain_count; ++i) {
      // Rejection-sample contexts so gold labels cycle through the options
      // (keeping the dataset's gold marginal uniform per domain and split)
      // and the winning option leads by at least two votes, so the label is
      // robust to any single miscounted finding.
      const int target = static_cast<int>(i % static_cast<std::size_t>(p.num_options));
      std::vector<TokenId> context(p.context_len);
      int clean_gold = 0;
      for (int tries = 0; tries < 1000; ++tries) {
        std::iota(pool.begin(), pool.end(), 0u);
        for (std::size_t j = 0; j < p.context_len; ++j) {
          std::size_t pick = j + static_cast<std::size_t>(rng.uniform_int(pool.size() - j));
          std::swap(pool[j], pool[pick]);
        }
        for (std::size_t j = 0; j < p.context_len; ++j) {
          context[j] = layout.domain_base(d) + pool[j];
        }
        const std::vector<int> counts = table.tally(context);
        int second = std::numeric_limits<int>::min();
        for (int c = 0; c < p.num_options; ++c) {
          if (c != target) second = std::max(second, counts[static_cast<std::size_t>(c)]);
        }
        if (counts[static_cast<std::size_t>(target)] >= second + 2) {
          clean_gold = target;
          break;
        }
        clean_gold = table.gold_for(context);
      }
      int gold = clean_gold;
      if (rng.uniform01() < p.noise_rate) {
        gold = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(p.num_options)));
      }
      // Paradigms cycle jointly with the gold targets so every
      // (gold, paradigm) cell is equally represented and reasoning style
      // carries no information about the label.
      const Paradigm paradigm =
          kParadigms[(i / static_cast<std::size_t>(p.num_options)) % kParadigms.size()];

      ClinicTask task;
      task.id = dname + "-" + std::to_string(i);
      task.domain = d;
      task.context = std::move(context);
      task.options = options;
      task.gold = gold;
      task.trace = build_trace(layout, table, task.context, clean_gold, gold, paradigm);
      task.paradigm = paradigm;
      task.split = i < train_count ? Split::train : Split::eval;
      out.dataset.tasks.push_back(std::move(task));
    }
  }
  return out;
}

std::string export_jsonl_string(const StratifiedDataset& ds) {
  std::string out;
  for (const auto& t : ds.tasks) {
    ordered_json j;
    j["id"] = t.id;
    j["domain"] = to_string(t.domain);
    j["context"] = t.context;
    j["options"] = t.options;
    j["gold"] = t.gold;
    j["trace"] = t.trace;
    j["paradigm"] = to_string(t.paradigm);
    j["split"] = to_string(t.split);
    out += j.dump();
    out += '\n';
  }
  return out;
}

void export_jsonl(const StratifiedDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  const std::string text = export_jsonl_string(ds);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.flush();
  if (!out) fail(ErrorKind::Io, "short write to '" + path.string() + "'");
}

namespace {

[[noreturn]] void bad_line(std::size_t lineno, const std::string& what) {
  fail(ErrorKind::MalformedLine, "line " + std::to_string(lineno) + ": " + what);
}

const ordered_json& need_field(const ordered_json& j, const char* name, std::size_t lineno) {
  if (!j.contains(name)) bad_line(lineno, std::string("missing field '") + name + "'");
  return j.at(name);
}

std::vector<TokenId> token_list(const ordered_json& j, const char* name, std::size_t lineno) {
  if (!j.is_array()) bad_line(lineno, std::string("field '") + name + "' must be an array");
  std::vector<TokenId> out;
  for (const auto& v : j) {
    if (!v.is_number_unsigned()) {
      bad_line(lineno, std::string("field '") + name + "' must hold nonnegative integers");
    }
    out.push_back(v.get<TokenId>());
  }
  return out;
}

}  // namespace

StratifiedDataset import_jsonl_string(std::string_view text) {
  StratifiedDataset ds;
  std::size_t lineno = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++lineno;
    if (line.empty()) continue;

    ordered_json j = ordered_json::parse(line, nullptr, false);
    if (j.is_discarded()) bad_line(lineno, "invalid JSON");
    if (!j.is_object()) bad_line(lineno, "expected a JSON object");

    ClinicTask t;
    try {
      const auto& idf = need_field(j, "id", lineno);
      if (!idf.is_string()) bad_line(lineno, "field 'id' must be a string");
      t.id = idf.get<std::string>();
      const auto& df = need_field(j, "domain", lineno);
      if (!df.is_string()) bad_line(lineno, "field 'domain' must be a string");
      t.domain = domain_from_string(df.get<std::string>());
      t.context = token_list(need_field(j, "context", lineno), "context", lineno);
      t.options = token_list(need_field(j, "options", lineno), "options", lineno);
      const auto& gf = need_field(j, "gold", lineno);
      if (!gf.is_number_integer()) bad_line(lineno, "field 'gold' must be an integer");
      t.gold = gf.get<int>();
      t.trace = token_list(need_field(j, "trace", lineno), "trace", lineno);
      const auto& pf = need_field(j, "paradigm", lineno);
      if (!pf.is_string()) bad_line(lineno, "field 'paradigm' must be a string");
      t.paradigm = paradigm_from_string(pf.get<std::string>());
      const auto& sf = need_field(j, "split", lineno);
      if (!sf.is_string()) bad_line(lineno, "field 'split' must be a string");
      t.split = split_from_string(sf.get<std::string>());
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::MalformedLine) throw;
      bad_line(lineno, e.what());
    }
    if (t.gold < 0 || static_cast<std::size_t>(t.gold) >= t.options.size()) {
      bad_line(lineno, "gold index out of range");
    }
    if (t.trace.size() < 3) bad_line(lineno, "trace must hold opener, ANSWER, label");
    ds.tasks.push_back(std::move(t));
  }
  return ds;
}

StratifiedDataset import_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for reading");
  std::stringstream ss;
  ss << in.rdbuf();
  if (in.bad()) fail(ErrorKind::Io, "read failure on '" + path.string() + "'");
  return import_jsonl_string(ss.str());
}

StratifiedDataset with_shuffled_labels(const StratifiedDataset& ds, const VocabLayout& layout,
                                       std::uint64_t seed) {
  StratifiedDataset out = ds;
  SeededRng rng(seed);
  for (ClinicTask& t : out.tasks) {
    if (t.trace.empty()) fail(ErrorKind::InvalidArgument, "task '" + t.id + "' has an empty trace");
    t.gold = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(layout.num_options)));
    t.trace.back() = layout.label(t.domain, t.gold);
  }
  return out;
}

std::vector<TokenId> guideline_prompt_tokens(const VocabLayout& layout, const ClinicTask& task,
                                             Paradigm paradigm) {
  std::vector<TokenId> p;
  p.reserve(task.context.size() + 1);
  p.push_back(layout.opener(paradigm));
  p.insert(p.end(), task.context.begin(), task.context.end());
  return p;
}

VocabLayout infer_layout(const StratifiedDataset& ds) {
  if (ds.tasks.empty()) fail(ErrorKind::InvalidArgument, "cannot infer layout of an empty dataset");
  const ClinicTask& first = ds.tasks.front();
  const TokenId answer = first.trace[first.trace.size() - 2];
  const auto dom = static_cast<TokenId>(first.domain);
  if (answer < 4 + dom || (answer - 4 - dom) % 4 != 0) {
    fail(ErrorKind::InvalidArgument, "ANSWER marker position implies no valid layout");
  }
  VocabLayout layout;
  layout.domain_vocab = (answer - 4 - dom) / 4;
  layout.num_options = static_cast<int>(first.options.size());
  if (layout.domain_vocab == 0 || layout.num_options < 2) {
    fail(ErrorKind::InvalidArgument, "inferred layout is degenerate");
  }

  for (const auto& t : ds.tasks) {
    const std::string where = "task '" + t.id + "'";
    if (t.options.size() != static_cast<std::size_t>(layout.num_options)) {
      fail(ErrorKind::InvalidArgument, where + ": option count differs across tasks");
    }
    for (int j = 0; j < layout.num_options; ++j) {
      if (t.options[static_cast<std::size_t>(j)] != layout.label(t.domain, j)) {
        fail(ErrorKind::InvalidArgument, where + ": options disagree with inferred labels");
      }
    }
    if (t.trace.size() < 3 || t.trace[t.trace.size() - 2] != layout.answer_marker(t.domain)) {
      fail(ErrorKind::InvalidArgument, where + ": trace lacks the ANSWER marker slot");
    }
    if (t.trace.back() != layout.label(t.domain, t.gold)) {
      fail(ErrorKind::InvalidArgument, where + ": trace label disagrees with gold");
    }
    if (t.trace.front() != layout.opener(t.paradigm)) {
      fail(ErrorKind::InvalidArgument, where + ": trace opener disagrees with paradigm");
    }
    const std::uint32_t lo = layout.domain_base(t.domain);
    const std::uint32_t hi = lo + layout.domain_vocab;
    for (TokenId tok : t.context) {
      if (tok < lo || tok >= hi) {
        fail(ErrorKind::InvalidArgument, where + ": context token outside the domain range");
      }
    }
    for (std::size_t i = 1; i + 2 < t.trace.size(); ++i) {
      if (t.trace[i] < lo || t.trace[i] >= hi) {
        fail(ErrorKind::InvalidArgument, where + ": cited token outside the domain range");
      }
    }
  }
  return layout;
}

}  // namespace xfus
