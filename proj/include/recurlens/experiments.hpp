#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "recurlens/checkpoint.hpp"
#include "recurlens/lenses.hpp"
#include "recurlens/tasks.hpp"
#include "recurlens/trace.hpp"
#include "recurlens/training.hpp"

namespace recurlens {

struct StudyConfig {
  std::string run_id = "toy";
  std::size_t r = 16;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  PromptStyle prompt_style = PromptStyle::Bare;
};

/// Runs each question once and decodes every unrolled block through both
/// lenses. tracked_ranks holds the ranks of the model's predicted next token
/// ("final"), the first character of the intermediate result ("intermediate")
/// and the baseline token ("random"). `ids` defaults to 0..n-1.
inline TraceData probe_questions(const DepthRecurrentModel& m, const Tokenizer& tok,
                                 const std::vector<ArithmeticSample>& questions, const StudyConfig& cfg,
                                 const std::string& fingerprint, std::vector<std::size_t> ids = {}) {
  if (ids.empty())
    for (std::size_t i = 0; i < questions.size(); ++i) ids.push_back(i);
  if (ids.size() != questions.size()) throw ContractError("probe_questions: one id per question required");
  if (cfg.k < 1 || cfg.k > tok.size()) throw ConfigError("k must lie in [1, " + std::to_string(tok.size()) + "]");
  TraceData out;
  out.run_id = cfg.run_id;
  out.header.vocab_size = m.config.vocab_size;
  out.header.r = cfg.r;
  out.header.model_fingerprint = fingerprint;
  out.header.sigma = m.config.noise_sigma();
  out.header.baseline_token = std::string(kBaselineToken);
  const std::size_t baseline = tok.id(kBaselineToken.front());
  for (std::size_t q = 0; q < questions.size(); ++q) {
    const auto& s = questions[q];
    const auto prompt = build_prompt(make_prompt_spec(cfg.prompt_style, s), tok);
    const ForwardResult fr = forward_unrolled(m, prompt, cfg.r, cfg.seed);
    const std::size_t predicted = argmax(fr.logits.row(fr.logits.rows() - 1));
    const std::size_t inter = tok.id(std::to_string(s.intermediate).front());
    for (std::size_t b = 1; b < fr.trace.size(); ++b) {
      const BlockLabel& label = fr.trace.labels[b];
      for (LensKind lens : {LensKind::LogitLens, LensKind::CodaLens}) {
        const auto z = apply_lens(lens, m, fr.trace.states[b]);
        LensRecord rec;
        rec.question_id = ids[q];
        rec.block_index = b;
        rec.cycle = label.cycle;
        rec.block_role = label.name();
        rec.lens = lens;
        for (const auto& t : top_k(z, cfg.k)) rec.topk.push_back({tok.text(t.token), t.logit});
        rec.tracked_ranks = {{"final", token_rank(z, predicted)},
                             {"intermediate", token_rank(z, inter)},
                             {"random", token_rank(z, baseline)}};
        out.records.push_back(std::move(rec));
      }
    }
  }
  return out;
}

/// Hash of everything that determines a study's aggregates.
inline std::string study_config_hash(const TraceData& d) {
  nlohmann::ordered_json j = header_to_json(d.header);
  j["run_id"] = d.run_id;
  j["k"] = d.records.empty() ? 0 : d.records.front().topk.size();
  std::set<std::size_t> questions;
  for (const auto& r : d.records) questions.insert(r.question_id);
  j["questions"] = questions.size();
  return fingerprint_bytes(j.dump());
}

// ---------------------------------------------------------------------------
// Rank statistics

struct RankStats {
  std::size_t n = 0;
  double mean = 0.0;
  double geomean = 0.0;
  double median = 0.0;

  friend bool operator==(const RankStats&, const RankStats&) = default;
};

inline RankStats rank_stats(std::vector<std::size_t> ranks) {
  if (ranks.empty()) throw NoSamplesError("no ranks to aggregate");
  RankStats s;
  s.n = ranks.size();
  double sum = 0.0, logs = 0.0;
  for (std::size_t r : ranks) {
    sum += static_cast<double>(r);
    logs += std::log(static_cast<double>(r));
  }
  s.mean = sum / static_cast<double>(s.n);
  s.geomean = std::exp(logs / static_cast<double>(s.n));
  std::sort(ranks.begin(), ranks.end());
  const std::size_t mid = s.n / 2;
  s.median = s.n % 2 ? static_cast<double>(ranks[mid])
                     : 0.5 * (static_cast<double>(ranks[mid - 1]) + static_cast<double>(ranks[mid]));
  return s;
}

namespace detail {

inline std::size_t tracked(const LensRecord& r, const std::string& key) {
  auto it = r.tracked_ranks.find(key);
  if (it == r.tracked_ranks.end()) {
    throw InputError("record for question " + std::to_string(r.question_id) + " block " +
                     std::to_string(r.block_index) + " lacks tracked rank '" + key + "'");
  }
  return it->second;
}

inline std::size_t question_count(const TraceData& d) {
  std::set<std::size_t> q;
  for (const auto& r : d.records) q.insert(r.question_id);
  return q.size();
}

inline void require_records(const TraceData& d) {
  if (d.records.empty()) throw NoSamplesError("no qualifying samples: the trace holds no records");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-block rank trajectory of the predicted token

struct RankRow {
  LensKind lens = LensKind::LogitLens;
  std::size_t block_index = 0;
  std::string block_role;
  std::size_t cycle = 0;
  RankStats stats;

  friend bool operator==(const RankRow&, const RankRow&) = default;
};

/// One row per (lens, block), blocks 1..N; every question must cover every block.
inline std::vector<RankRow> aggregate_unrolled(const TraceData& d, const std::vector<LensKind>& lenses) {
  detail::require_records(d);
  const std::size_t nq = detail::question_count(d);
  std::vector<RankRow> out;
  for (LensKind lens : lenses) {
    std::map<std::size_t, std::pair<const LensRecord*, std::vector<std::size_t>>> by_block;
    for (const auto& r : d.records) {
      if (r.lens != lens) continue;
      auto& slot = by_block[r.block_index];
      if (!slot.first) slot.first = &r;
      slot.second.push_back(detail::tracked(r, "final"));
    }
    if (by_block.empty()) throw NoSamplesError(std::string("no records for the ") + to_string(lens) + " lens");
    std::size_t expect = 1;
    for (auto& [b, slot] : by_block) {
      if (b != expect++) throw InputError("block " + std::to_string(expect - 1) + " missing from the trace");
      if (slot.second.size() != nq) {
        throw InputError("block " + std::to_string(b) + " covers " + std::to_string(slot.second.size()) + " of " +
                         std::to_string(nq) + " questions");
      }
      out.push_back({lens, b, slot.first->block_role, slot.first->cycle, rank_stats(std::move(slot.second))});
    }
  }
  return out;
}

/// Rank 1 of the predicted token under the logit lens at the last block and
/// the coda lens at the last core block.
struct AnchorCheck {
  std::size_t questions = 0;
  std::size_t logit_ok = 0;
  std::size_t coda_ok = 0;

  bool all_hold() const { return questions > 0 && logit_ok == questions && coda_ok == questions; }
};

inline AnchorCheck check_anchors(const TraceData& d) {
  detail::require_records(d);
  std::size_t last_block = 0, last_core = 0;
  for (const auto& r : d.records) {
    last_block = std::max(last_block, r.block_index);
    if (r.cycle == d.header.r) last_core = std::max(last_core, r.block_index);
  }
  AnchorCheck c;
  c.questions = detail::question_count(d);
  for (const auto& r : d.records) {
    if (r.lens == LensKind::LogitLens && r.block_index == last_block) c.logit_ok += detail::tracked(r, "final") == 1;
    if (r.lens == LensKind::CodaLens && r.block_index == last_core) c.coda_ok += detail::tracked(r, "final") == 1;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Signed-integer prefixes among the top-k core-block tokens

struct PrefixRow {
  LensKind lens = LensKind::LogitLens;
  std::size_t cycle = 0;
  std::string block_role;
  std::size_t n = 0;
  std::size_t k = 0;
  double proportion = 0.0;

  friend bool operator==(const PrefixRow&, const PrefixRow&) = default;
};

inline double prefix_fraction(const std::vector<TopToken>& topk, std::size_t k) {
  if (k < 1 || k > topk.size()) {
    throw InputError("k=" + std::to_string(k) + " exceeds the " + std::to_string(topk.size()) +
                     " recorded top tokens");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < k; ++i) hits += is_signed_integer_prefix(topk[i].text);
  return static_cast<double>(hits) / static_cast<double>(k);
}

/// Per (lens, cycle, core block): mean over questions of the signed-prefix
/// fraction of the first k recorded tokens.
inline std::vector<PrefixRow> aggregate_prefix(const TraceData& d, const std::vector<LensKind>& lenses,
                                               std::size_t k) {
  detail::require_records(d);
  std::vector<PrefixRow> out;
  for (LensKind lens : lenses) {
    // (cycle, block_index) orders R1..R4 within a cycle.
    std::map<std::pair<std::size_t, std::size_t>, std::pair<std::string, std::vector<double>>> groups;
    for (const auto& r : d.records) {
      if (r.lens != lens || r.cycle == 0) continue;
      auto& g = groups[{r.cycle, r.block_index}];
      g.first = r.block_role;
      g.second.push_back(prefix_fraction(r.topk, k));
    }
    if (groups.empty()) throw NoSamplesError(std::string("no core-block records for the ") + to_string(lens) + " lens");
    for (const auto& [key, g] : groups) {
      double sum = 0.0;
      for (double f : g.second) sum += f;
      out.push_back({lens, key.first, g.first, g.second.size(), k, sum / static_cast<double>(g.second.size())});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Signature-token trajectories per recurrence step

struct BlockLens {
  std::string block_role;
  LensKind lens = LensKind::LogitLens;

  friend bool operator==(const BlockLens&, const BlockLens&) = default;
};

/// R3 through the logit lens and R4 through the coda lens.
inline std::vector<BlockLens> default_signature_pairs() {
  return {{"R3", LensKind::LogitLens}, {"R4", LensKind::CodaLens}};
}

inline std::vector<BlockLens> all_core_pairs(std::size_t n_core = 4) {
  std::vector<BlockLens> out;
  for (LensKind lens : {LensKind::LogitLens, LensKind::CodaLens})
    for (std::size_t i = 1; i <= n_core; ++i) out.push_back({"R" + std::to_string(i), lens});
  return out;
}

inline constexpr std::array<const char*, 3> kTrackedTokens = {"final", "intermediate", "random"};

struct SignatureRow {
  std::string block_role;
  LensKind lens = LensKind::LogitLens;
  std::size_t cycle = 0;
  std::string token;
  RankStats stats;

  friend bool operator==(const SignatureRow&, const SignatureRow&) = default;
};

/// Rows: pairs × cycles 1..r × {final, intermediate, random}.
inline std::vector<SignatureRow> aggregate_signature(const TraceData& d, const std::vector<BlockLens>& pairs) {
  detail::require_records(d);
  std::vector<SignatureRow> out;
  for (const auto& p : pairs) {
    std::map<std::size_t, std::map<std::string, std::vector<std::size_t>>> by_cycle;
    for (const auto& r : d.records) {
      if (r.lens != p.lens || r.block_role != p.block_role || r.cycle == 0) continue;
      for (const char* key : kTrackedTokens) by_cycle[r.cycle][key].push_back(detail::tracked(r, key));
    }
    for (std::size_t c = 1; c <= d.header.r; ++c) {
      auto it = by_cycle.find(c);
      if (it == by_cycle.end()) {
        throw InputError("no " + p.block_role + "/" + to_string(p.lens) + " records at recurrence step " +
                         std::to_string(c));
      }
      for (const char* key : kTrackedTokens) out.push_back({p.block_role, p.lens, c, key, rank_stats(it->second[key])});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Accuracy against recurrence depth

struct DepthRow {
  std::size_t r = 0;
  double accuracy = 0.0;
  std::size_t n = 0;

  friend bool operator==(const DepthRow&, const DepthRow&) = default;
};

inline std::vector<std::size_t> default_depth_list() { return {4, 8, 16, 32, 64}; }

inline std::vector<DepthRow> run_depth_scaling(const DepthRecurrentModel& m, const Tokenizer& tok,
                                               const std::vector<ArithmeticSample>& eval_set,
                                               const std::vector<std::size_t>& r_list, std::uint64_t seed,
                                               PromptStyle style = PromptStyle::Bare) {
  if (eval_set.empty()) throw NoSamplesError("depth scaling needs a non-empty evaluation set");
  std::vector<DepthRow> out;
  for (std::size_t r : r_list) {
    if (r < 1) throw ConfigError("recurrence count r must be >= 1");
    out.push_back({r, eval_accuracy(m, tok, eval_set, r, seed, style), eval_set.size()});
  }
  return out;
}

/// Published GSM8K accuracies (%) of the 3.5B depth-recurrent reference model.
/// Context for reading the toy table only; nothing compares against them.
inline constexpr const char* kReferenceDepthNote =
    "reference (published, 3.5B depth-recurrent model on GSM8K, accuracy %): "
    "without CoT 3.11 at r=4 rising to 4.93 at r=32 and flat to r=128; with CoT 24.87/38.13";

inline std::string depth_config_hash(const std::string& fingerprint, const std::vector<DepthRow>& rows,
                                     std::uint64_t seed, PromptStyle style) {
  nlohmann::ordered_json j;
  j["model_fingerprint"] = fingerprint;
  j["seed"] = seed;
  j["prompt_style"] = to_string(style);
  auto rs = nlohmann::ordered_json::array();
  for (const auto& r : rows) rs.push_back(r.r);
  j["r_list"] = rs;
  j["n"] = rows.empty() ? 0 : rows.front().n;
  return fingerprint_bytes(j.dump());
}

/// Depth scaling from traces recorded at different r. A trace holds no
/// generated answer, so this scores the first answer token only: the logit-lens
/// top-1 at the last block against the first character of the answer.
/// question_id indexes `questions`.
inline std::vector<DepthRow> depth_from_traces(const std::vector<TraceData>& traces,
                                               const std::vector<ArithmeticSample>& questions) {
  std::vector<DepthRow> out;
  for (const auto& d : traces) {
    std::map<std::size_t, const LensRecord*> last;
    for (const auto& rec : d.records) {
      if (rec.lens != LensKind::LogitLens) continue;
      auto& slot = last[rec.question_id];
      if (!slot || rec.block_index > slot->block_index) slot = &rec;
    }
    if (last.empty()) throw NoSamplesError("trace at r=" + std::to_string(d.header.r) + " has no logit-lens records");
    std::size_t hits = 0;
    for (const auto& [q, rec] : last) {
      if (q >= questions.size()) {
        throw InputError("trace question_id " + std::to_string(q) + " outside the question file (" +
                         std::to_string(questions.size()) + " questions)");
      }
      if (rec->topk.front().text == questions[q].answer_text().substr(0, 1)) ++hits;
    }
    out.push_back({d.header.r, static_cast<double>(hits) / static_cast<double>(last.size()), last.size()});
  }
  std::sort(out.begin(), out.end(), [](const DepthRow& a, const DepthRow& b) { return a.r < b.r; });
  for (std::size_t i = 1; i < out.size(); ++i)
    if (out[i].r == out[i - 1].r) throw InputError("two traces share r=" + std::to_string(out[i].r));
  return out;
}

inline std::string trace_depth_hash(const std::vector<TraceData>& traces) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& d : traces) j.push_back(study_config_hash(d));
  return fingerprint_bytes("first-token:" + j.dump());
}

// ---------------------------------------------------------------------------
// CSV emission. Every row carries the run id and config hash.

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline void write_unrolled_csv(std::ostream& os, const std::vector<RankRow>& rows, const std::string& run_id,
                               const std::string& hash) {
  os << "run_id,config_hash,lens,block_index,block,cycle,n,mean_rank,geomean_rank,median_rank\n";
  for (const auto& r : rows) {
    os << run_id << ',' << hash << ',' << to_string(r.lens) << ',' << r.block_index << ',' << r.block_role << ','
       << r.cycle << ',' << r.stats.n << ',' << format_number(r.stats.mean) << ','
       << format_number(r.stats.geomean) << ',' << format_number(r.stats.median) << '\n';
  }
}

inline void write_prefix_csv(std::ostream& os, const std::vector<PrefixRow>& rows, const std::string& run_id,
                             const std::string& hash) {
  os << "run_id,config_hash,lens,cycle,block,n,k,proportion\n";
  for (const auto& r : rows) {
    os << run_id << ',' << hash << ',' << to_string(r.lens) << ',' << r.cycle << ',' << r.block_role << ',' << r.n
       << ',' << r.k << ',' << format_number(r.proportion) << '\n';
  }
}

inline void write_signature_csv(std::ostream& os, const std::vector<SignatureRow>& rows, const std::string& run_id,
                                const std::string& hash) {
  os << "run_id,config_hash,block,lens,cycle,token,n,mean_rank,geomean_rank,median_rank\n";
  for (const auto& r : rows) {
    os << run_id << ',' << hash << ',' << r.block_role << ',' << to_string(r.lens) << ',' << r.cycle << ','
       << r.token << ',' << r.stats.n << ',' << format_number(r.stats.mean) << ','
       << format_number(r.stats.geomean) << ',' << format_number(r.stats.median) << '\n';
  }
}

inline void write_depth_csv(std::ostream& os, const std::vector<DepthRow>& rows, const std::string& run_id,
                            const std::string& hash) {
  os << "r,accuracy,n,run_id,config_hash\n";
  for (const auto& r : rows) {
    os << r.r << ',' << format_number(r.accuracy) << ',' << r.n << ',' << run_id << ',' << hash << '\n';
  }
}

}  // namespace recurlens
