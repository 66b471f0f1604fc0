#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "recurlens/error.hpp"
#include "recurlens/graph.hpp"
#include "recurlens/tensor.hpp"

namespace recurlens {

/// How R1 merges the prelude output s2 with the running recurrent state.
enum class Combiner { ConcatAdapter, Add };

enum class Activation { Gelu, Relu };

inline const char* to_string(Combiner c) { return c == Combiner::Add ? "add" : "concat_adapter"; }
inline const char* to_string(Activation a) { return a == Activation::Relu ? "relu" : "gelu"; }

struct ModelConfig {
  std::size_t d = 32;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 0;
  std::size_t n_prelude = 2;
  std::size_t n_core = 4;
  std::size_t n_coda = 2;
  double sigma = 1.0 / std::sqrt(32.0);  // initial-state noise std, 1/sqrt(d) by default
  std::size_t r_max_train = 4;
  double eps = 1e-6;
  std::size_t mlp_ratio = 4;
  Combiner combiner = Combiner::ConcatAdapter;
  Activation activation = Activation::Gelu;

  double noise_sigma() const { return sigma; }

  /// Desk-scale defaults for a given vocabulary; sigma follows the width.
  static ModelConfig toy(std::size_t vocab, std::size_t width = 32, std::size_t heads = 4) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d = width;
    c.n_heads = heads;
    c.sigma = 1.0 / std::sqrt(static_cast<double>(width));
    return c;
  }

  /// 2 prelude, 4 core and 2 coda blocks, as in the reference architecture.
  bool reference_layout() const { return n_prelude == 2 && n_core == 4 && n_coda == 2; }

  void validate() const {
    if (d == 0 || n_heads == 0 || d % n_heads != 0) {
      throw ConfigError("model width " + std::to_string(d) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
    }
    if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
    if (n_prelude == 0 || n_core == 0 || n_coda == 0) throw ConfigError("every stage needs at least one block");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma must be positive and finite");
    if (r_max_train == 0) throw ConfigError("r_max_train must be >= 1");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
  }
};

/// One pre-norm transformer block: causal attention then an MLP, each on a
/// residual branch.
struct BlockWeights {
  Tensor wq, wk, wv, wo;
  Tensor w1, b1, w2, b2;
  Tensor norm1, norm2;

  template <class F>
  void for_each(F&& f) {
    f("wq", wq), f("wk", wk), f("wv", wv), f("wo", wo);
    f("w1", w1), f("b1", b1), f("w2", w2), f("b2", b2);
    f("norm1", norm1), f("norm2", norm2);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<BlockWeights*>(this)->for_each([&](const char* n, Tensor& t) { f(n, std::as_const(t)); });
  }

  static BlockWeights zeros(std::size_t d, std::size_t hidden) {
    BlockWeights b;
    b.wq = b.wk = b.wv = b.wo = Tensor::zeros({d, d});
    b.w1 = Tensor::zeros({d, hidden});
    b.b1 = Tensor::zeros({hidden});
    b.w2 = Tensor::zeros({hidden, d});
    b.b2 = Tensor::zeros({d});
    b.norm1 = b.norm2 = Tensor::ones({d});
    return b;
  }
};

enum class BlockRole { Embedding, Prelude, Core, Coda };

/// Position of one hidden state in the unrolled schedule: e, P1..P2, then
/// R1..R4 repeated r times (cycle 1..r), then C1..C2.
struct BlockLabel {
  BlockRole role = BlockRole::Embedding;
  std::size_t index = 0;  // 1-based within the stage; 0 for the embedding
  std::size_t cycle = 0;  // recurrence step for core blocks, 0 otherwise

  std::string name() const {
    switch (role) {
      case BlockRole::Embedding: return "E";
      case BlockRole::Prelude: return "P" + std::to_string(index);
      case BlockRole::Core: return "R" + std::to_string(index);
      case BlockRole::Coda: return "C" + std::to_string(index);
    }
    return "?";
  }

  friend bool operator==(const BlockLabel&, const BlockLabel&) = default;
};

/// Labels for states s_0 .. s_{n_prelude + n_core*r + n_coda}.
inline std::vector<BlockLabel> unrolled_schedule(const ModelConfig& cfg, std::size_t r) {
  if (r < 1) throw ConfigError("recurrence count r must be >= 1");
  std::vector<BlockLabel> labels;
  labels.reserve(1 + cfg.n_prelude + cfg.n_core * r + cfg.n_coda);
  labels.push_back({BlockRole::Embedding, 0, 0});
  for (std::size_t i = 1; i <= cfg.n_prelude; ++i) labels.push_back({BlockRole::Prelude, i, 0});
  for (std::size_t c = 1; c <= r; ++c)
    for (std::size_t i = 1; i <= cfg.n_core; ++i) labels.push_back({BlockRole::Core, i, c});
  for (std::size_t i = 1; i <= cfg.n_coda; ++i) labels.push_back({BlockRole::Coda, i, 0});
  return labels;
}

/// Every hidden state of one unrolled forward pass; states[0] is the embedding.
struct StateTrace {
  std::vector<Tensor> states;
  std::vector<BlockLabel> labels;
  std::size_t r = 0;
  double sigma = 0.0;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return states.size(); }
  /// Index of the last core-block output, s_{n_prelude + n_core*r}.
  std::size_t last_core_index() const { return states.size() - 1 - count_coda(); }

 private:
  std::size_t count_coda() const {
    std::size_t n = 0;
    for (const auto& l : labels) n += l.role == BlockRole::Coda;
    return n;
  }
};

class DepthRecurrentModel {
 public:
  ModelConfig config;
  Tensor embed;       // [V×d]
  Tensor unembed;     // [d×V]
  Tensor final_norm;  // [d]
  Tensor adapter;     // [2d×d], used by the concat combiner
  std::vector<BlockWeights> prelude, core, coda;

  std::size_t hidden() const { return config.d * config.mlp_ratio; }

  /// Random initialization; deterministic in `seed`.
  static DepthRecurrentModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DepthRecurrentModel m;
    m.config = cfg;
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.d, V = cfg.vocab_size, h = m.hidden();
    auto normal = [&](Shape s, double std) {
      std::normal_distribution<double> nd(0.0, std);
      Tensor t(std::move(s));
      for (double& v : t.data()) v = nd(rng);
      return t;
    };
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
    auto block = [&] {
      BlockWeights b;
      b.wq = normal({d, d}, in_std);
      b.wk = normal({d, d}, in_std);
      b.wv = normal({d, d}, in_std);
      b.wo = normal({d, d}, 0.5 * in_std);
      b.w1 = normal({d, h}, in_std);
      b.b1 = Tensor::zeros({h});
      b.w2 = normal({h, d}, 0.5 / std::sqrt(static_cast<double>(h)));
      b.b2 = Tensor::zeros({d});
      b.norm1 = Tensor::ones({d});
      b.norm2 = Tensor::ones({d});
      return b;
    };
    m.embed = normal({V, d}, 1.0);
    m.unembed = normal({d, V}, in_std);
    m.final_norm = Tensor::ones({d});
    m.adapter = normal({2 * d, d}, 1.0 / std::sqrt(2.0 * static_cast<double>(d)));
    for (std::size_t i = 0; i < cfg.n_prelude; ++i) m.prelude.push_back(block());
    for (std::size_t i = 0; i < cfg.n_core; ++i) m.core.push_back(block());
    for (std::size_t i = 0; i < cfg.n_coda; ++i) m.coda.push_back(block());
    m.set_requires_grad(true);
    return m;
  }

  /// Visits every parameter with a stable dotted name, e.g. "core.2.wq".
  template <class F>
  void for_each_param(F&& f) {
    f(std::string("embed"), embed);
    f(std::string("unembed"), unembed);
    f(std::string("final_norm"), final_norm);
    f(std::string("adapter"), adapter);
    auto stage = [&](const char* name, std::vector<BlockWeights>& blocks) {
      for (std::size_t i = 0; i < blocks.size(); ++i)
        blocks[i].for_each([&](const char* n, Tensor& t) {
          f(std::string(name) + "." + std::to_string(i) + "." + n, t);
        });
    };
    stage("prelude", prelude);
    stage("core", core);
    stage("coda", coda);
  }
  template <class F>
  void for_each_param(F&& f) const {
    const_cast<DepthRecurrentModel*>(this)->for_each_param(
        [&](const std::string& n, Tensor& t) { f(n, std::as_const(t)); });
  }

  void set_requires_grad(bool on) {
    for_each_param([&](const std::string&, Tensor& t) { t.set_requires_grad(on); });
  }
  void zero_grad() {
    for_each_param([](const std::string&, Tensor& t) { t.zero_grad(); });
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
  }

  /// Checks every weight shape against the config; throws DimensionError.
  void validate() const {
    config.validate();
    const std::size_t d = config.d, V = config.vocab_size, h = hidden();
    auto expect = [](const std::string& name, const Tensor& t, const Shape& s) {
      if (t.shape() != s) {
        throw DimensionError(name + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(s));
      }
      if (!t.all_finite()) throw NumericError(name + " holds non-finite values");
    };
    if (prelude.size() != config.n_prelude || core.size() != config.n_core || coda.size() != config.n_coda) {
      throw DimensionError("block counts do not match the config");
    }
    for_each_param([&](const std::string& name, const Tensor& t) {
      const auto leaf = name.substr(name.rfind('.') + 1);
      if (name == "embed") expect(name, t, {V, d});
      else if (name == "unembed") expect(name, t, {d, V});
      else if (name == "final_norm") expect(name, t, {d});
      else if (name == "adapter") expect(name, t, {2 * d, d});
      else if (leaf == "w1") expect(name, t, {d, h});
      else if (leaf == "b1") expect(name, t, {h});
      else if (leaf == "w2") expect(name, t, {h, d});
      else if (leaf == "b2" || leaf == "norm1" || leaf == "norm2") expect(name, t, {d});
      else expect(name, t, {d, d});
    });
  }
};

/// Binds model weights into a graph, once per tensor. Trainable weights become
/// gradient-receiving params only when the graph records gradients.
class WeightBinder {
 public:
  explicit WeightBinder(Graph& g) : g_(g) {}

  Var operator()(const Tensor& t) {
    auto it = cache_.find(&t);
    if (it != cache_.end()) return it->second;
    Var v = g_.grad_enabled() && t.requires_grad() ? g_.param(const_cast<Tensor&>(t)) : g_.constant_ref(t);
    cache_.emplace(&t, v);
    return v;
  }

  Graph& graph() { return g_; }

 private:
  Graph& g_;
  std::unordered_map<const Tensor*, Var> cache_;
};

/// x + attn(rmsnorm(x)), then + mlp(rmsnorm(·)).
inline Var block_apply(WeightBinder& w, const BlockWeights& b, const ModelConfig& cfg, Var x) {
  Var a = ops::causal_attention(ops::rmsnorm(x, w(b.norm1), cfg.eps), w(b.wq), w(b.wk), w(b.wv), w(b.wo),
                                cfg.n_heads);
  Var h = ops::add(x, a);
  Var pre = ops::add_bias(ops::matmul(ops::rmsnorm(h, w(b.norm2), cfg.eps), w(b.w1)), w(b.b1));
  Var act = cfg.activation == Activation::Relu ? ops::relu(pre) : ops::gelu(pre);
  Var mlp = ops::add_bias(ops::matmul(act, w(b.w2)), w(b.b2));
  return ops::add(h, mlp);
}

inline Tensor block_apply(const BlockWeights& b, const ModelConfig& cfg, const Tensor& x) {
  Graph g(false);
  WeightBinder w(g);
  return block_apply(w, b, cfg, g.constant_ref(x)).value();
}

/// R1's input: merges the prelude output with the running state.
inline Var inject(WeightBinder& w, const DepthRecurrentModel& m, Var s2, Var state) {
  if (m.config.combiner == Combiner::Add) return ops::add(s2, state);
  return ops::matmul(ops::concat_cols(s2, state), w(m.adapter));
}

/// i.i.d. N(0, sigma²) initial recurrent state.
inline Tensor initial_noise(std::size_t rows, std::size_t d, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor n(Shape{rows, d});
  for (double& v : n.data()) v = sigma * nd(rng);
  return n;
}

/// rmsnorm(s)·W_U for every row of s.
inline Var unembed_all(WeightBinder& w, const DepthRecurrentModel& m, Var s) {
  return ops::matmul(ops::rmsnorm(s, w(m.final_norm), m.config.eps), w(m.unembed));
}

/// First coda block input: the last core output, normalized with the final norm.
inline Var coda_entry(WeightBinder& w, const DepthRecurrentModel& m, Var s) {
  return ops::rmsnorm(s, w(m.final_norm), m.config.eps);
}

namespace detail {

inline void check_forward_args(const DepthRecurrentModel& m, std::span<const std::size_t> tokens, std::size_t r) {
  if (r < 1) throw ConfigError("recurrence count r must be >= 1");
  if (tokens.empty()) throw InputError("empty token sequence");
  for (std::size_t t : tokens) {
    if (t >= m.config.vocab_size) {
      throw InputError("token id " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(m.config.vocab_size));
    }
  }
}

}  // namespace detail

struct ForwardResult {
  Tensor logits;  // [L×V]
  StateTrace trace;
};

/// Unrolled inference pass with full hidden-state capture.
///
///   s0 = e = embed(tokens); s1, s2 = preludes
///   s3 = R1(inject(s2, n)),  n ~ N(0, σ²) from `seed`
///   for later core steps: R1(inject(s2, s_{i-1})) at the start of each cycle,
///   otherwise R_k(s_{i-1})
///   C1(rmsnorm(s_{last core})), C2; logits = rmsnorm(s_last)·W_U
///
/// Each block runs on its own short-lived graph so memory stays flat in r.
inline ForwardResult forward_unrolled(const DepthRecurrentModel& m, std::span<const std::size_t> tokens,
                                      std::size_t r, std::uint64_t seed) {
  detail::check_forward_args(m, tokens, r);
  const ModelConfig& cfg = m.config;
  ForwardResult out;
  StateTrace& tr = out.trace;
  tr.labels = unrolled_schedule(cfg, r);
  tr.r = r;
  tr.sigma = cfg.noise_sigma();
  tr.seed = seed;
  tr.states.reserve(tr.labels.size());

  auto step = [&](auto&& fn) {
    Graph g(false);
    WeightBinder w(g);
    tr.states.push_back(fn(g, w).value());
  };
  step([&](Graph&, WeightBinder& w) { return ops::embedding(w(m.embed), tokens); });
  for (const auto& b : m.prelude)
    step([&](Graph& g, WeightBinder& w) { return block_apply(w, b, cfg, g.constant_ref(tr.states.back())); });
  const std::size_t s2 = tr.states.size() - 1;
  const Tensor noise = initial_noise(tokens.size(), cfg.d, cfg.noise_sigma(), seed);
  for (std::size_t c = 0; c < r; ++c) {
    for (std::size_t k = 0; k < m.core.size(); ++k) {
      step([&](Graph& g, WeightBinder& w) {
        Var x = g.constant_ref(c == 0 && k == 0 ? noise : tr.states.back());
        if (k == 0) x = inject(w, m, g.constant_ref(tr.states[s2]), x);
        return block_apply(w, m.core[k], cfg, x);
      });
    }
  }
  for (std::size_t k = 0; k < m.coda.size(); ++k) {
    step([&](Graph& g, WeightBinder& w) {
      Var x = g.constant_ref(tr.states.back());
      if (k == 0) x = coda_entry(w, m, x);
      return block_apply(w, m.coda[k], cfg, x);
    });
  }
  Graph g(false);
  WeightBinder w(g);
  out.logits = unembed_all(w, m, g.constant_ref(tr.states.back())).value();
  return out;
}

/// Same computation as forward_unrolled recorded on one graph for training.
/// Returns logits [L×V]; gradients flow into every trainable weight.
inline Var forward_graph(Graph& g, WeightBinder& w, const DepthRecurrentModel& m,
                         std::span<const std::size_t> tokens, std::size_t r, std::uint64_t seed) {
  detail::check_forward_args(m, tokens, r);
  const ModelConfig& cfg = m.config;
  Var x = ops::embedding(w(m.embed), tokens);
  for (const auto& b : m.prelude) x = block_apply(w, b, cfg, x);
  const Var s2 = x;
  x = g.input(initial_noise(tokens.size(), cfg.d, cfg.noise_sigma(), seed));
  for (std::size_t c = 0; c < r; ++c)
    for (std::size_t k = 0; k < m.core.size(); ++k)
      x = block_apply(w, m.core[k], cfg, k == 0 ? inject(w, m, s2, x) : x);
  x = coda_entry(w, m, x);
  for (const auto& b : m.coda) x = block_apply(w, b, cfg, x);
  return unembed_all(w, m, x);
}

/// Index of the largest value; ties resolve to the smallest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// Greedy decoding. Step k runs a fresh unrolled pass seeded with seed + k.
/// Stops early after emitting `stop_token` (which is included in the output).
inline std::vector<std::size_t> generate(const DepthRecurrentModel& m, std::span<const std::size_t> prompt,
                                         std::size_t r, std::size_t max_new, std::uint64_t seed,
                                         std::optional<std::size_t> stop_token = std::nullopt) {
  if (max_new < 1) throw ContractError("generate: max_new must be >= 1");
  std::vector<std::size_t> seq(prompt.begin(), prompt.end());
  std::vector<std::size_t> emitted;
  for (std::size_t k = 0; k < max_new; ++k) {
    const ForwardResult fr = forward_unrolled(m, seq, r, seed + k);
    const std::size_t next = argmax(fr.logits.row(fr.logits.rows() - 1));
    emitted.push_back(next);
    if (stop_token && next == *stop_token) break;
    seq.push_back(next);
  }
  return emitted;
}

}  // namespace recurlens
