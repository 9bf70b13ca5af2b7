#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cdd/diff.hpp"
#include "oracles.hpp"

using namespace cdd;
namespace ad = cdd::ad;

namespace {

Tensor values_of(ad::Tape& tape, ad::Var v) { return tape.value(v); }

// Weighted sum so a tensor-valued op becomes a scalar with generic gradients.
ad::Var weigh(ad::Tape& tape, ad::Var v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor& t = tape.value(v);
  Tensor w = oracle::random_tensor(t.shape(), rng);
  return ad::sum(ad::mul(v, tape.constant(w)));
}

}  // namespace

TEST(Tensor, DataLengthMustMatchShape) {
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 2, 2}), DimensionError);
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t(1, 2), 1.5);
}

TEST(Tensor, GradLengthMatchesData) {
  Tensor t(Shape{3});
  EXPECT_FALSE(t.grad().has_value());
  EXPECT_THROW(t.set_grad({1.0}), DimensionError);
  t.set_grad({1, 2, 3});
  EXPECT_EQ(t.grad()->size(), 3u);
}

TEST(Affine, IdentityCase) {
  ad::Tape tape;
  auto out = ad::affine(tape.constant(Tensor::identity(2)), tape.constant(Tensor::identity(2)),
                        tape.constant(Tensor(Shape{2})));
  EXPECT_EQ(values_of(tape, out), Tensor::identity(2));
}

TEST(Affine, HandSum) {
  ad::Tape tape;
  auto out = ad::affine(tape.constant(Tensor::rows({{1, 2}})), tape.constant(Tensor::rows({{1}, {1}})),
                        tape.constant(Tensor::vector({3})));
  EXPECT_EQ(values_of(tape, out).values(), std::vector<double>{6});
}

TEST(Affine, ShapeMismatchIsDimensionError) {
  ad::Tape tape;
  EXPECT_THROW(ad::affine(tape.constant(Tensor(Shape{2, 3})), tape.constant(Tensor(Shape{2, 2})),
                          tape.constant(Tensor(Shape{2}))),
               DimensionError);
}

TEST(Affine, WeightGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const Tensor x = oracle::random_tensor(Shape{4, 3}, rng);
  const Tensor w = oracle::random_tensor(Shape{3, 2}, rng);
  auto f = [&](ad::Tape& tape, ad::Var wv) {
    return ad::sum(ad::affine(tape.constant(x), wv, tape.constant(Tensor(Shape{2}))));
  };
  EXPECT_LT(ad::grad_check(f, w, 1e-5), 1e-6);
  // Analytic: d/dw_{mj} sum = sum_i x_{im}.
  ad::Tape tape;
  Tensor wl = w;
  wl.set_requires_grad(true);
  auto leaf = tape.leaf(wl);
  tape.backward(f(tape, leaf));
  const auto g = tape.grad(leaf);
  for (std::size_t m = 0; m < 3; ++m) {
    double col = 0.0;
    for (std::size_t i = 0; i < 4; ++i) col += x(i, m);
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(g[m * 2 + j], col, 1e-12);
  }
}

TEST(Activations, Examples) {
  ad::Tape tape;
  auto s = values_of(tape, ad::softmax(tape.constant(Tensor::rows({{0, 0}})), 1));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  EXPECT_DOUBLE_EQ(values_of(tape, ad::sigmoid(tape.constant(Tensor::scalar(0.0)))).item(), 0.5);
  const double want = std::exp(2.0) / (std::exp(2.0) + 1.0);
  EXPECT_NEAR(values_of(tape, ad::softmax(tape.constant(Tensor::rows({{2, 0}})), 1))[0], want, 1e-15);
  EXPECT_NEAR(want, 0.8808, 1e-4);
}

TEST(Activations, LogOfNonPositiveIsDomainError) {
  ad::Tape tape;
  EXPECT_THROW(ad::log(tape.constant(Tensor::vector({1.0, 0.0}))), DomainError);
  EXPECT_THROW(ad::log(tape.constant(Tensor::vector({-2.0}))), DomainError);
}

TEST(Activations, SoftmaxRowsAreDistributions) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    ad::Tape tape;
    const Tensor x = oracle::random_tensor(Shape{3, 5}, rng, 20.0);
    const Tensor p = values_of(tape, ad::softmax(tape.constant(x), 1));
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_GE(p(i, j), 0.0);
        s += p(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Activations, SoftmaxSurvivesLargeLogits) {
  ad::Tape tape;
  const Tensor p = values_of(tape, ad::softmax(tape.constant(Tensor::rows({{1000, 999}})), 1));
  EXPECT_TRUE(p.all_finite());
  EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(Cosine, Examples) {
  ad::Tape tape;
  auto cos = [&](std::vector<double> a, std::vector<double> b) {
    return values_of(tape, ad::cosine(tape.constant(Tensor::vector(a)), tape.constant(Tensor::vector(b)))).item();
  };
  EXPECT_NEAR(cos({3, -1, 2}, {3, -1, 2}), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(cos({1, 0}, {0, 1}), 0.0);
  EXPECT_NEAR(cos({1, 1}, {1, 0}), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_THROW(cos({0, 0}, {1, 0}), DegenerateInputError);
}

TEST(Reductions, MaxRoutesGradientToLowestTiedIndex) {
  ad::Tape tape;
  Tensor x = Tensor::rows({{2, 5, 5}, {7, 1, 7}});
  x.set_requires_grad(true);
  auto leaf = tape.leaf(x);
  auto m = ad::max(leaf, 1);
  EXPECT_EQ(tape.value(m).values(), (std::vector<double>{5, 7}));
  tape.backward(ad::sum(m));
  EXPECT_EQ(tape.grad(leaf), (std::vector<double>{0, 1, 0, 1, 0, 0}));
}

TEST(Reductions, SumAndMeanAlongAxes) {
  ad::Tape tape;
  auto x = tape.constant(Tensor::rows({{1, 2, 3}, {4, 5, 6}}));
  EXPECT_EQ(tape.value(ad::sum(x, 0)).values(), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(tape.value(ad::sum(x, 1)).values(), (std::vector<double>{6, 15}));
  EXPECT_EQ(tape.value(ad::mean(x, 1)).values(), (std::vector<double>{2, 5}));
  EXPECT_DOUBLE_EQ(tape.value(ad::mean(x)).item(), 3.5);
}

TEST(GradCheck, SquareAtThree) {
  auto f = [](ad::Tape&, ad::Var x) { return ad::sum(ad::mul(x, x)); };
  EXPECT_LT(ad::grad_check(f, Tensor::scalar(3.0), 1e-5), 1e-8);
  ad::Tape tape;
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  auto leaf = tape.leaf(x);
  tape.backward(f(tape, leaf));
  EXPECT_DOUBLE_EQ(tape.grad(leaf)[0], 6.0);
}

TEST(GradCheck, RejectsNonScalarOutputAndBadStep) {
  auto f = [](ad::Tape&, ad::Var x) { return ad::exp(x); };
  EXPECT_THROW(ad::grad_check(f, Tensor::vector({1, 2}), 1e-5), ContractError);
  auto g = [](ad::Tape&, ad::Var x) { return ad::sum(x); };
  EXPECT_THROW(ad::grad_check(g, Tensor::vector({1, 2}), 0.0), ContractError);
}

TEST(GradCheck, AgreesWithIndependentCentralDifference) {
  std::mt19937_64 rng(3);
  const Tensor x = oracle::random_tensor(Shape{2, 3}, rng);
  auto f = [](ad::Tape& tape, ad::Var v) { return weigh(tape, ad::log_softmax(v, 1), 9); };
  auto plain = [&](const std::vector<double>& flat) {
    ad::Tape tape;
    return tape.value(f(tape, tape.constant(Tensor(Shape{2, 3}, flat)))).item();
  };
  const auto num = oracle::numeric_gradient(plain, x.values());
  ad::Tape tape;
  Tensor xl = x;
  xl.set_requires_grad(true);
  auto leaf = tape.leaf(xl);
  tape.backward(f(tape, leaf));
  const auto g = tape.grad(leaf);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], num[i], 1e-8);
}

TEST(Tape, BackwardNeedsScalarAndVisitsEachOpOnce) {
  ad::Tape tape;
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  auto leaf = tape.leaf(x);
  auto y = ad::exp(leaf);
  EXPECT_THROW(tape.backward(y), ContractError);
  auto z = ad::sum(ad::mul(y, y));
  tape.backward(z);
  EXPECT_EQ(tape.last_backward_visits(), tape.operations());
  for (std::size_t id = 0; id < tape.size(); ++id)
    for (std::size_t in : tape.inputs(id)) EXPECT_LT(in, id);
}

TEST(Tape, DetachBlocksGradient) {
  ad::Tape tape;
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  auto leaf = tape.leaf(x);
  tape.backward(ad::sum(ad::mul(ad::detach(leaf), leaf)));
  EXPECT_EQ(tape.grad(leaf), (std::vector<double>{1, 2}));
}

// Every smooth primitive against finite differences at 100 random points.
TEST(Primitives, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> pos(0.5, 3.0);
  struct Case {
    const char* name;
    Shape shape;
    bool positive;
    ad::ScalarFn f;
  };
  const Tensor other = oracle::random_tensor(Shape{3, 4}, rng);
  const Tensor square = oracle::random_tensor(Shape{4, 2}, rng);
  std::vector<Case> cases{
      {"matmul", {3, 4}, false, [&](ad::Tape& t, ad::Var x) { return weigh(t, ad::matmul(x, t.constant(square)), 1); }},
      {"transpose", {3, 4}, false, [](ad::Tape& t, ad::Var x) { return weigh(t, ad::transpose(x), 2); }},
      {"add", {3, 4}, false, [&](ad::Tape& t, ad::Var x) { return weigh(t, ad::add(x, t.constant(other)), 3); }},
      {"sub", {3, 4}, false, [&](ad::Tape& t, ad::Var x) { return weigh(t, ad::sub(t.constant(other), x), 4); }},
      {"mul", {3, 4}, false, [&](ad::Tape& t, ad::Var x) { return weigh(t, ad::mul(x, x), 5); }},
      {"sigmoid", {3, 4}, false, [](ad::Tape& t, ad::Var x) { return weigh(t, ad::sigmoid(x), 6); }},
      {"exp", {3, 4}, false, [](ad::Tape& t, ad::Var x) { return weigh(t, ad::exp(x), 7); }},
      {"log", {3, 4}, true, [](ad::Tape& t, ad::Var x) { return weigh(t, ad::log(x), 8); }},
      {"softplus", {3, 4}, false, [](ad::Tape& t, ad::Var x) { return weigh(t, ad::softplus(x), 9); }},
      {"softmax", {3, 4}, false, [](ad::Tape& t, ad::Var x) { return weigh(t, ad::softmax(x, 1), 10); }},
      {"softmax0", {3, 4}, false, [](ad::Tape& t, ad::Var x) { return weigh(t, ad::softmax(x, 0), 11); }},
      {"log_softmax", {3, 4}, false, [](ad::Tape& t, ad::Var x) { return weigh(t, ad::log_softmax(x, 1), 12); }},
      {"sum_axis", {3, 4}, false, [](ad::Tape& t, ad::Var x) { return weigh(t, ad::sum(x, 0), 13); }},
      {"mean_axis", {3, 4}, false, [](ad::Tape& t, ad::Var x) { return weigh(t, ad::mean(x, 1), 14); }},
      {"row_normalize", {3, 4}, false, [](ad::Tape& t, ad::Var x) { return weigh(t, ad::row_normalize(x), 15); }},
      {"cosine", {4}, false, [&](ad::Tape& t, ad::Var x) {
         return ad::cosine(x, t.constant(Tensor::vector({1, -2, 0.5, 3})));
       }},
      {"affine_bias", {2}, false, [&](ad::Tape& t, ad::Var b) {
         return weigh(t, ad::affine(t.constant(other), t.constant(square), b), 16);
       }},
      {"scale_by", {1}, false, [&](ad::Tape& t, ad::Var s) {
         return weigh(t, ad::scale_by(t.constant(other), ad::reshape(s, Shape{})), 17);
       }},
      {"concat_select", {3, 4}, false, [&](ad::Tape& t, ad::Var x) {
         auto c = ad::concat_cols(ad::select_columns(x, {2, 0}), ad::select_rows(ad::transpose(x), {1, 1, 3}));
         return weigh(t, c, 18);
       }},
  };
  for (const auto& c : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Tensor x = oracle::random_tensor(c.shape, rng);
      if (c.positive)
        for (double& v : x.data()) v = pos(rng);
      worst = std::max(worst, ad::grad_check(c.f, x, 1e-5));
    }
    EXPECT_LT(worst, 1e-6) << c.name;
  }
}

TEST(Primitives, ReluAwayFromKink) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> mag(0.1, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x(Shape{6});
    for (double& v : x.data()) v = (rng() % 2 ? 1.0 : -1.0) * mag(rng);
    EXPECT_LT(ad::grad_check([](ad::Tape& t, ad::Var v) { return weigh(t, ad::relu(v), 19); }, x, 1e-5), 1e-6);
  }
}
