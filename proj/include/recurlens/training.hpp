#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "recurlens/error.hpp"
#include "recurlens/graph.hpp"
#include "recurlens/model.hpp"
#include "recurlens/tasks.hpp"

namespace recurlens {

struct TrainConfig {
  double learning_rate = 3e-3;  // peak; linear warmup then cosine decay
  std::size_t warmup_steps = 50;
  double final_lr_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::size_t r_max_train = 4;  // r is drawn uniformly from 1..r_max_train per batch
  std::uint64_t seed = 0;
  bool answer_only_loss = true;
  PromptStyle prompt_style = PromptStyle::Bare;

  void validate() const {
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (r_max_train < 1) throw ConfigError("r_max_train must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (!(final_lr_fraction >= 0.0 && final_lr_fraction <= 1.0)) {
      throw ConfigError("final_lr_fraction must lie in [0, 1]");
    }
  }

  double lr_at(std::size_t step) const {
    if (step < warmup_steps) return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    const double span = static_cast<double>(std::max<std::size_t>(1, steps - std::min(steps, warmup_steps)));
    const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
    const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
    return learning_rate * (final_lr_fraction + (1.0 - final_lr_fraction) * cosine);
  }
};

/// One teacher-forced sequence: inputs[t] predicts targets[t]; mask marks the
/// positions that contribute to the loss.
struct Example {
  std::vector<std::size_t> inputs;
  std::vector<std::size_t> targets;
  std::vector<bool> mask;
  std::size_t supervised = 0;
};

/// BOS + prompt + answer + EOS, shifted by one. With `answer_only` the loss
/// covers the answer characters and the closing EOS.
inline Example make_example(const ArithmeticSample& s, const Tokenizer& tok, PromptStyle style,
                            bool answer_only = true) {
  const auto prompt = build_prompt(make_prompt_spec(style, s), tok);
  std::vector<std::size_t> ids = prompt;
  for (std::size_t id : tok.encode(s.answer_text())) ids.push_back(id);
  ids.push_back(Tokenizer::kEos);
  Example ex;
  ex.inputs.assign(ids.begin(), ids.end() - 1);
  ex.targets.assign(ids.begin() + 1, ids.end());
  ex.mask.resize(ex.targets.size());
  for (std::size_t t = 0; t < ex.targets.size(); ++t) {
    ex.mask[t] = !answer_only || t + 1 >= prompt.size();
    ex.supervised += ex.mask[t];
  }
  return ex;
}

inline std::vector<Example> make_examples(const std::vector<ArithmeticSample>& samples, const Tokenizer& tok,
                                          PromptStyle style, bool answer_only = true) {
  std::vector<Example> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(make_example(s, tok, style, answer_only));
  return out;
}

/// Adam with bias correction over every parameter that received a gradient.
class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(DepthRecurrentModel& m, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t slot = 0;
    m.for_each_param([&](const std::string&, Tensor& p) {
      if (slot == m1_.size()) {
        m1_.emplace_back(p.numel(), 0.0);
        m2_.emplace_back(p.numel(), 0.0);
      }
      auto& mo = m1_[slot];
      auto& ve = m2_[slot];
      ++slot;
      if (!p.grad()) return;
      const auto& g = *p.grad();
      auto w = p.data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        mo[i] = cfg_.beta1 * mo[i] + (1.0 - cfg_.beta1) * g[i];
        ve[i] = cfg_.beta2 * ve[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        w[i] -= lr * (mo[i] / c1) / (std::sqrt(ve[i] / c2) + cfg_.adam_eps);
      }
    });
  }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m1_, m2_;
};

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
  std::size_t r = 0;

  friend bool operator==(const LossPoint&, const LossPoint&) = default;
};

/// Token-weighted masked loss of a batch; gradients accumulate into the model.
inline double batch_loss_and_grad(DepthRecurrentModel& m, const std::vector<const Example*>& batch, std::size_t r,
                                  const std::vector<std::uint64_t>& noise_seeds) {
  std::size_t total = 0;
  for (const Example* ex : batch) total += ex->supervised;
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Example& ex = *batch[i];
    const double weight = static_cast<double>(ex.supervised) / static_cast<double>(total);
    Graph g;
    WeightBinder w(g);
    Var logits = forward_graph(g, w, m, ex.inputs, r, noise_seeds[i]);
    Var l = ops::scale(ops::cross_entropy(logits, ex.targets, ex.mask), weight);
    loss += l.value()[0];
    g.backward(l);
  }
  return loss;
}

using TrainProgress = std::function<void(const LossPoint&)>;

/// Answer-only training with r drawn per batch; deterministic in cfg.seed.
/// The loss at step s is the batch loss before that step's update.
inline std::vector<LossPoint> train(DepthRecurrentModel& m, const std::vector<ArithmeticSample>& dataset,
                                    const Tokenizer& tok, const TrainConfig& cfg,
                                    const TrainProgress& progress = nullptr) {
  cfg.validate();
  if (dataset.empty()) throw InputError("training dataset is empty");
  if (tok.size() != m.config.vocab_size) {
    throw ConfigError("tokenizer has " + std::to_string(tok.size()) + " entries, model vocabulary is " +
                      std::to_string(m.config.vocab_size));
  }
  const auto examples = make_examples(dataset, tok, cfg.prompt_style, cfg.answer_only_loss);
  m.set_requires_grad(true);
  Adam opt(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, examples.size() - 1);
  std::uniform_int_distribution<std::size_t> depth(1, cfg.r_max_train);
  std::vector<LossPoint> curve;
  curve.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::size_t r = depth(rng);
    std::vector<const Example*> batch;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      batch.push_back(&examples[pick(rng)]);
      seeds.push_back(rng());
    }
    m.zero_grad();
    const double loss = batch_loss_and_grad(m, batch, r, seeds);
    if (!std::isfinite(loss)) {
      throw NumericError("loss became " + std::to_string(loss) + " at step " + std::to_string(step) + " (r=" +
                         std::to_string(r) + "); lower the learning rate");
    }
    opt.step(m, cfg.lr_at(step));
    curve.push_back({step, loss, r});
    if (progress) progress(curve.back());
  }
  return curve;
}

/// Token-weighted masked loss over a whole example set at fixed r.
inline double dataset_loss(const DepthRecurrentModel& m, const std::vector<Example>& examples, std::size_t r,
                           std::uint64_t seed) {
  if (examples.empty()) throw InputError("dataset_loss: no examples");
  double total = 0.0;
  std::size_t count = 0;
  for (const Example& ex : examples) {
    const auto fr = forward_unrolled(m, ex.inputs, r, seed);
    Graph g(false);
    const double mean = ops::cross_entropy(g.constant_ref(fr.logits), ex.targets, ex.mask).value()[0];
    total += mean * static_cast<double>(ex.supervised);
    count += ex.supervised;
  }
  return total / static_cast<double>(count);
}

/// Fraction of samples whose greedy continuation equals answer_text. Every
/// question uses the same noise seed, so the result ignores dataset order.
inline double eval_accuracy(const DepthRecurrentModel& m, const Tokenizer& tok,
                            const std::vector<ArithmeticSample>& samples, std::size_t r, std::uint64_t seed,
                            PromptStyle style = PromptStyle::Bare) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    const auto prompt = build_prompt(make_prompt_spec(style, s), tok);
    correct += greedy_answer(m, tok, prompt, r, seed) == s.answer_text();
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

inline void write_loss_csv(std::ostream& os, const std::vector<LossPoint>& curve) {
  os << "step,loss,r_drawn\n";
  char buf[64];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%.17g", p.loss);
    os << p.step << ',' << buf << ',' << p.r << '\n';
  }
}

inline void save_loss_csv(const std::string& path, const std::vector<LossPoint>& curve) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_loss_csv(os, curve);
}

}  // namespace recurlens
