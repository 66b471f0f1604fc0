#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "recurlens/graph.hpp"

using namespace recurlens;
using recurlens::testing::grad_check;
using recurlens::testing::random_tensor;

namespace {

// Triple-loop reference, independent of kernels::matmul's loop order.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c(Shape{a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.dim(1); ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  return c;
}

// Per-head loop reference for causal attention.
Tensor naive_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                       const Tensor& wo, std::size_t heads) {
  const Tensor q = naive_matmul(x, wq), k = naive_matmul(x, wk), v = naive_matmul(x, wv);
  const std::size_t L = x.dim(0), d = x.dim(1), dh = d / heads;
  Tensor o(Shape{L, d});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t t = 0; t < L; ++t) {
      std::vector<double> w(t + 1);
      double z = 0.0;
      for (std::size_t u = 0; u <= t; ++u) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q.at(t, h * dh + c) * k.at(u, h * dh + c);
        w[u] = std::exp(s / std::sqrt(static_cast<double>(dh)));
        z += w[u];
      }
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t u = 0; u <= t; ++u) acc += w[u] / z * v.at(u, h * dh + c);
        o.at(t, h * dh + c) = acc;
      }
    }
  }
  return naive_matmul(o, wo);
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), DimensionError);
  Tensor t(Shape{2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_FALSE(t.grad().has_value());
  t.ensure_grad();
  ASSERT_TRUE(t.grad().has_value());
  EXPECT_EQ(t.grad()->size(), t.numel());
}

TEST(Matmul, IdentityAndScalar) {
  Graph g(false);
  Var id = g.input(Tensor::matrix({{1, 0}, {0, 1}}));
  Var m = g.input(Tensor::matrix({{3, 4}, {5, 6}}));
  EXPECT_EQ(ops::matmul(id, m).value(), Tensor::matrix({{3, 4}, {5, 6}}));
  Var two = g.input(Tensor::matrix({{2}}));
  Var three = g.input(Tensor::matrix({{3}}));
  EXPECT_EQ(ops::matmul(two, three).value(), Tensor::matrix({{6}}));
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(7);
  const Tensor a = random_tensor({4, 3}, rng), b = random_tensor({3, 2}, rng);
  Graph g(false);
  const Tensor got = ops::matmul(g.input(a), g.input(b)).value();
  const Tensor want = naive_matmul(a, b);
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph g(false);
  Var a = g.input(Tensor(Shape{2, 3}));
  Var b = g.input(Tensor(Shape{4, 2}));
  try {
    ops::matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x2]"), std::string::npos);
  }
}

TEST(RmsNorm, ZeroAndConstantVectors) {
  Graph g(false);
  Var ones = g.input(Tensor::ones({4}));
  const Tensor z = ops::rmsnorm(g.input(Tensor::zeros({1, 4})), ones, 1e-6).value();
  for (double v : z.data()) EXPECT_EQ(v, 0.0);

  for (double c : {3.5, -0.25}) {
    const Tensor y = ops::rmsnorm(g.input(Tensor(Shape{1, 4}, c)), ones, 1e-300).value();
    for (double v : y.data()) EXPECT_NEAR(v, c > 0 ? 1.0 : -1.0, 1e-12);
  }
}

TEST(RmsNorm, MatchesScalarLoopAndHasUnitRms) {
  std::mt19937_64 rng(11);
  const Tensor x = random_tensor({1, 8}, rng, 3.0);
  const Tensor gain = random_tensor({8}, rng);
  Graph g(false);
  const Tensor y = ops::rmsnorm(g.input(x), g.input(gain), 1e-6).value();
  double ms = 0.0;
  for (double v : x.data()) ms += v * v;
  ms /= 8.0;
  for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(y[j], x[j] / std::sqrt(ms + 1e-6) * gain[j], 1e-12);

  const Tensor unit = ops::rmsnorm(g.input(x), g.input(Tensor::ones({8})), 1e-6).value();
  double rms = 0.0;
  for (double v : unit.data()) rms += v * v;
  EXPECT_NEAR(std::sqrt(rms / 8.0), 1.0, 1e-6);
}

TEST(RmsNorm, RejectsNonFiniteAndBadGain) {
  Graph g(false);
  Tensor x(Shape{1, 3});
  x[1] = std::nan("");
  EXPECT_THROW(ops::rmsnorm(g.input(x), g.input(Tensor::ones({3})), 1e-6), NumericError);
  EXPECT_THROW(ops::rmsnorm(g.input(Tensor(Shape{1, 3})), g.input(Tensor::ones({4})), 1e-6),
               DimensionError);
}

TEST(Attention, SinglePositionIsProjectedValue) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({1, 4}, rng);
  Tensor wq = random_tensor({4, 4}, rng), wk = random_tensor({4, 4}, rng);
  const Tensor wv = random_tensor({4, 4}, rng), wo = random_tensor({4, 4}, rng);
  Graph g(false);
  const Tensor got = ops::causal_attention(g.input(x), g.input(wq), g.input(wk), g.input(wv),
                                           g.input(wo), 2)
                         .value();
  const Tensor want = naive_matmul(naive_matmul(x, wv), wo);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Attention, UniformValuesGiveIdenticalRows) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({5, 4}, rng);
  Tensor v(Shape{5, 4});
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 4; ++c) v.at(t, c) = 0.5 + static_cast<double>(c);
  Graph g(false);
  Var q = g.input(random_tensor({5, 4}, rng));
  Var k = g.input(random_tensor({5, 4}, rng));
  const Tensor o = ops::attention_core(q, k, g.input(v), 2).value();
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(o.at(t, c), v.at(0, c), 1e-12);
}

TEST(Attention, MatchesPerHeadLoop) {
  std::mt19937_64 rng(13);
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor wq = random_tensor({4, 4}, rng), wk = random_tensor({4, 4}, rng),
               wv = random_tensor({4, 4}, rng), wo = random_tensor({4, 4}, rng);
  Graph g(false);
  const Tensor got = ops::causal_attention(g.input(x), g.input(wq), g.input(wk), g.input(wv),
                                           g.input(wo), 2)
                         .value();
  const Tensor want = naive_attention(x, wq, wk, wv, wo, 2);
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10);
}

TEST(Attention, FutureTokensDoNotLeak) {
  std::mt19937_64 rng(17);
  Tensor x = random_tensor({6, 8}, rng);
  const Tensor wq = random_tensor({8, 8}, rng), wk = random_tensor({8, 8}, rng),
               wv = random_tensor({8, 8}, rng), wo = random_tensor({8, 8}, rng);
  auto run = [&](const Tensor& in) {
    Graph g(false);
    return ops::causal_attention(g.input(in), g.input(wq), g.input(wk), g.input(wv), g.input(wo), 4)
        .value();
  };
  const Tensor before = run(x);
  for (std::size_t t = 0; t + 1 < 6; ++t) {
    Tensor y = x;
    for (std::size_t c = 0; c < 8; ++c) y.at(t + 1, c) += 0.75;
    const Tensor after = run(y);
    for (std::size_t u = 0; u <= t; ++u)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(after.at(u, c), before.at(u, c));
  }
}

TEST(Attention, RejectsIndivisibleHeads) {
  Graph g(false);
  Var x = g.input(Tensor(Shape{2, 6}));
  Var w = g.input(Tensor(Shape{6, 6}));
  EXPECT_THROW(ops::causal_attention(x, w, w, w, w, 4), ConfigError);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(19);
  Graph g(false);
  const Tensor p = ops::softmax(g.input(random_tensor({7, 13}, rng, 10.0))).value();
  for (std::size_t i = 0; i < 7; ++i) {
    double s = 0.0;
    for (double v : p.row(i)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(CrossEntropy, UniformAndNearDelta) {
  Graph g(false);
  const std::vector<std::size_t> tgt{2};
  const Tensor uniform = ops::cross_entropy(g.input(Tensor(Shape{1, 4}, 0.3)), tgt, {true}).value();
  EXPECT_NEAR(uniform[0], std::log(4.0), 1e-14);

  Tensor peaked(Shape{1, 4});
  peaked[2] = 100.0;
  const Tensor sharp = ops::cross_entropy(g.input(peaked), tgt, {true}).value();
  EXPECT_NEAR(sharp[0], 0.0, 1e-10);
}

TEST(CrossEntropy, MatchesExtendedPrecisionFormula) {
  std::mt19937_64 rng(23);
  const Tensor logits = random_tensor({5, 9}, rng, 4.0);
  const std::vector<std::size_t> tgt{1, 8, 0, 4, 4};
  const std::vector<bool> mask{true, false, true, true, false};
  Graph g(false);
  const double got = ops::cross_entropy(g.input(logits), tgt, mask).value()[0];
  long double total = 0.0L;
  int n = 0;
  for (std::size_t t = 0; t < 5; ++t) {
    if (!mask[t]) continue;
    long double z = 0.0L;
    for (double v : logits.row(t)) z += std::exp(static_cast<long double>(v));
    total += std::log(z) - static_cast<long double>(logits.at(t, tgt[t]));
    ++n;
  }
  EXPECT_NEAR(got, static_cast<double>(total / n), 1e-10);
}

TEST(CrossEntropy, ErrorPaths) {
  Graph g(false);
  Var logits = g.input(Tensor(Shape{2, 3}));
  const std::vector<std::size_t> ok{0, 1}, bad{0, 3};
  EXPECT_THROW(ops::cross_entropy(logits, ok, {false, false}), ContractError);
  EXPECT_THROW(ops::cross_entropy(logits, bad, {true, true}), InputError);
  EXPECT_THROW(ops::cross_entropy(logits, ok, {true}), DimensionError);
}

TEST(Embedding, RejectsOutOfVocab) {
  Graph g(false);
  const std::vector<std::size_t> ids{0, 5};
  EXPECT_THROW(ops::embedding(g.input(Tensor(Shape{5, 2})), ids), InputError);
}

TEST(Backward, SumAndSquare) {
  std::mt19937_64 rng(29);
  Tensor x = random_tensor({3, 2}, rng);
  x.set_requires_grad(true);
  {
    Graph g;
    g.backward(ops::sum(g.param(x)));
    ASSERT_TRUE(x.grad().has_value());
    for (double v : *x.grad()) EXPECT_EQ(v, 1.0);
  }
  x.clear_grad();
  {
    Graph g;
    Var xv = g.param(x);
    g.backward(ops::sum(ops::mul(xv, xv)));
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ((*x.grad())[i], 2.0 * x[i]);
  }
}

TEST(Backward, ContractViolations) {
  Graph g;
  Var x = g.input(Tensor::ones({2, 2}), true);
  EXPECT_THROW(g.backward(x), ContractError);
  Var loss = ops::sum(x);
  g.backward(loss);
  EXPECT_THROW(g.backward(loss), ContractError);
  g.reset();
  EXPECT_NO_THROW(g.backward(loss));

  Graph frozen(false);
  EXPECT_THROW(frozen.backward(ops::sum(frozen.input(Tensor::ones({1})))), ContractError);
}

TEST(Backward, VisitsTapeInReverseOrder) {
  Graph g;
  Var x = g.input(Tensor::ones({2, 2}), true);
  Var y = ops::gelu(x);
  Var z = ops::mul(y, x);
  Var loss = ops::sum(z);
  g.backward(loss);
  const std::vector<std::size_t> want{loss.id(), z.id(), y.id(), x.id()};
  EXPECT_EQ(g.backward_order(), want);
}

TEST(Backward, PopulatesEveryReachableParam) {
  std::mt19937_64 rng(31);
  Tensor a = random_tensor({2, 3}, rng), b = random_tensor({3, 3}, rng), unused(Shape{2});
  for (Tensor* t : {&a, &b, &unused}) t->set_requires_grad(true);
  Graph g;
  Var pa = g.param(a), pb = g.param(b);
  g.param(unused);
  g.backward(ops::sum(ops::gelu(ops::matmul(pa, pb))));
  EXPECT_TRUE(a.grad().has_value());
  EXPECT_TRUE(b.grad().has_value());
  EXPECT_FALSE(unused.grad().has_value());
}

// Every primitive against central finite differences, 5 seeds each.
class GradCheck : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(GradCheck, AllPrimitives) {
  const std::uint64_t seed = GetParam();
  std::mt19937_64 rng(seed * 7919 + 1);
  auto r = [&](Shape s, double sc = 1.0) { return random_tensor(std::move(s), rng, sc); };
  const std::vector<std::size_t> ids{3, 0, 3, 1};
  const std::vector<std::size_t> targets{2, 0, 4};

  struct Case {
    const char* name;
    recurlens::testing::GraphFn f;
    std::vector<Tensor> inputs;
  };
  std::vector<Case> cases{
      {"matmul", [](Graph&, const std::vector<Var>& v) { return ops::matmul(v[0], v[1]); },
       {r({3, 4}), r({4, 2})}},
      {"add", [](Graph&, const std::vector<Var>& v) { return ops::add(v[0], v[1]); },
       {r({2, 3}), r({2, 3})}},
      {"add_bias", [](Graph&, const std::vector<Var>& v) { return ops::add_bias(v[0], v[1]); },
       {r({3, 4}), r({4})}},
      {"mul", [](Graph&, const std::vector<Var>& v) { return ops::mul(v[0], v[1]); },
       {r({2, 3}), r({2, 3})}},
      {"scale", [](Graph&, const std::vector<Var>& v) { return ops::scale(v[0], -1.7); }, {r({5})}},
      {"rmsnorm", [](Graph&, const std::vector<Var>& v) { return ops::rmsnorm(v[0], v[1], 1e-6); },
       {r({3, 6}), r({6})}},
      {"gelu", [](Graph&, const std::vector<Var>& v) { return ops::gelu(v[0]); }, {r({2, 5}, 2.0)}},
      {"relu", [](Graph&, const std::vector<Var>& v) { return ops::relu(v[0]); }, {r({2, 5}, 2.0)}},
      {"softmax", [](Graph&, const std::vector<Var>& v) { return ops::softmax(v[0]); },
       {r({3, 5}, 2.0)}},
      {"embedding", [&](Graph&, const std::vector<Var>& v) { return ops::embedding(v[0], ids); },
       {r({5, 3})}},
      {"concat_cols", [](Graph&, const std::vector<Var>& v) { return ops::concat_cols(v[0], v[1]); },
       {r({3, 2}), r({3, 4})}},
      {"attention_core",
       [](Graph&, const std::vector<Var>& v) { return ops::attention_core(v[0], v[1], v[2], 2); },
       {r({4, 6}), r({4, 6}), r({4, 6})}},
      {"causal_attention",
       [](Graph&, const std::vector<Var>& v) {
         return ops::causal_attention(v[0], v[1], v[2], v[3], v[4], 2);
       },
       {r({3, 4}), r({4, 4}, 0.5), r({4, 4}, 0.5), r({4, 4}, 0.5), r({4, 4}, 0.5)}},
      {"cross_entropy",
       [&](Graph&, const std::vector<Var>& v) {
         return ops::cross_entropy(v[0], targets, {true, false, true});
       },
       {r({3, 5}, 2.0)}},
      {"sum", [](Graph&, const std::vector<Var>& v) { return ops::sum(v[0]); }, {r({2, 2})}},
  };
  for (auto& c : cases) {
    const auto res = grad_check(c.f, c.inputs, seed);
    EXPECT_TRUE(res.passed()) << c.name << " rel=" << res.max_rel_error
                              << " abs=" << res.max_abs_error_small;
    EXPECT_GT(res.checked, 0u);
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradCheck, ::testing::Values(1, 2, 3, 4, 5));
