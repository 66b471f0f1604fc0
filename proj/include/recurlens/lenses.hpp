#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "recurlens/error.hpp"
#include "recurlens/graph.hpp"
#include "recurlens/model.hpp"

namespace recurlens {

enum class LensKind { LogitLens, CodaLens };

inline const char* to_string(LensKind k) { return k == LensKind::CodaLens ? "coda" : "logit"; }

inline LensKind parse_lens(std::string_view s) {
  if (s == "logit") return LensKind::LogitLens;
  if (s == "coda") return LensKind::CodaLens;
  throw InputError("unknown lens '" + std::string(s) + "' (expected logit or coda)");
}

namespace detail {

inline void check_state_width(const DepthRecurrentModel& m, const Tensor& s) {
  if (s.rank() != 2 || s.dim(1) != m.config.d || s.dim(0) == 0) {
    throw DimensionError("lens input " + shape_str(s.shape()) + " does not have model width " +
                         std::to_string(m.config.d));
  }
}

}  // namespace detail

/// rmsnorm(s)·W_U at every position → [L×V].
inline Tensor logit_lens_all(const DepthRecurrentModel& m, const Tensor& s) {
  detail::check_state_width(m, s);
  Graph g(false);
  WeightBinder w(g);
  return unembed_all(w, m, g.constant_ref(s)).value();
}

/// Logit lens at the last position. Row-local kernels make this bit-identical
/// to the last row of logit_lens_all.
inline std::vector<double> logit_lens(const DepthRecurrentModel& m, const Tensor& s) {
  detail::check_state_width(m, s);
  const auto last = s.row(s.rows() - 1);
  Tensor row(Shape{1, m.config.d}, std::vector<double>(last.begin(), last.end()));
  const Tensor z = logit_lens_all(m, row);
  return z.storage();
}

/// rmsnorm(C2(C1(rmsnorm(s))))·W_U at every position, using the trained coda.
inline Tensor coda_lens_all(const DepthRecurrentModel& m, const Tensor& s) {
  detail::check_state_width(m, s);
  Tensor x = s;
  for (std::size_t k = 0; k < m.coda.size(); ++k) {
    Graph g(false);
    WeightBinder w(g);
    Var in = g.constant_ref(x);
    if (k == 0) in = coda_entry(w, m, in);
    x = block_apply(w, m.coda[k], m.config, in).value();
  }
  return logit_lens_all(m, x);
}

/// Coda lens at the last position. The coda attends over the whole prefix, so
/// the full sequence is decoded and the last row kept.
inline std::vector<double> coda_lens(const DepthRecurrentModel& m, const Tensor& s) {
  const Tensor z = coda_lens_all(m, s);
  const auto last = z.row(z.rows() - 1);
  return {last.begin(), last.end()};
}

inline std::vector<double> apply_lens(LensKind kind, const DepthRecurrentModel& m, const Tensor& s) {
  return kind == LensKind::CodaLens ? coda_lens(m, s) : logit_lens(m, s);
}

/// 1-based rank: 1 + #strictly larger logits + #equal logits with smaller id.
inline std::size_t token_rank(std::span<const double> logits, std::size_t token) {
  if (token >= logits.size()) {
    throw InputError("token " + std::to_string(token) + " outside vocabulary of size " +
                     std::to_string(logits.size()));
  }
  const double v = logits[token];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < logits.size(); ++j)
    if (logits[j] > v || (logits[j] == v && j < token)) ++rank;
  return rank;
}

struct ScoredToken {
  std::size_t token = 0;
  double logit = 0.0;

  friend bool operator==(const ScoredToken&, const ScoredToken&) = default;
};

/// The k highest logits, descending, ties broken by smaller token id.
inline std::vector<ScoredToken> top_k(std::span<const double> logits, std::size_t k) {
  if (k < 1 || k > logits.size()) {
    throw InputError("top_k: k=" + std::to_string(k) + " outside [1, " + std::to_string(logits.size()) + "]");
  }
  std::vector<ScoredToken> all(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) all[j] = {j, logits[j]};
  auto before = [](const ScoredToken& a, const ScoredToken& b) {
    return a.logit > b.logit || (a.logit == b.logit && a.token < b.token);
  };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), before);
  all.resize(k);
  return all;
}

struct TopToken {
  std::string text;
  double logit = 0.0;

  friend bool operator==(const TopToken&, const TopToken&) = default;
};

/// One decoded observation of one hidden state through one lens. block_index
/// counts unrolled blocks from 1 (P1) to n_prelude + n_core*r + n_coda; cycle is
/// the recurrence step for core blocks and 0 elsewhere; block_role is the block
/// name ("P1", "R3", "C2").
struct LensRecord {
  std::size_t question_id = 0;
  std::size_t block_index = 0;
  std::size_t cycle = 0;
  std::string block_role;
  LensKind lens = LensKind::LogitLens;
  std::vector<TopToken> topk;
  std::map<std::string, std::size_t> tracked_ranks;

  friend bool operator==(const LensRecord&, const LensRecord&) = default;
};

}  // namespace recurlens
