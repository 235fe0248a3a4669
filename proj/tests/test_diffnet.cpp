#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cina/diffnet.hpp"
#include "gradcheck.hpp"

using namespace cina;
using T2 = Tensor2<double>;
using V = Vec<double>;
namespace gc = cina::testing;

namespace {

double ce(const T2& logits, const std::vector<int>& t) { return cross_entropy_loss<double, int>(logits, t); }

}  // namespace

namespace {

T2 mat(std::initializer_list<std::initializer_list<double>> rows) {
  T2 m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

T2 random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  T2 m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace

TEST(Linear, HandComputed) {
  const T2 y = linear_forward<double>(mat({{1, 2}, {3, 4}}), mat({{1, 1}}), mat({{1, 1}}));
  EXPECT_EQ(y, mat({{4, 8}}));
}

TEST(Linear, EmptyBatch) {
  const T2 y = linear_forward<double>(mat({{1, 2}, {3, 4}}), mat({{1, 1}}), T2(0, 2));
  EXPECT_EQ(y.rows(), 0);
  EXPECT_EQ(y.cols(), 2);
}

TEST(Linear, ShapeMismatch) {
  EXPECT_THROW(linear_forward<double>(mat({{1, 2}}), mat({{0}}), mat({{1, 2, 3}})), ShapeError);
  EXPECT_THROW(linear_forward<double>(mat({{1, 2}}), mat({{0, 0}}), mat({{1, 2}})), ShapeError);
}

TEST(SineLayer, NeutralModulationIsPlainSine) {
  std::mt19937_64 rng(1);
  const T2 W = random_mat(rng, 5, 3), b = random_mat(rng, 1, 5), x = random_mat(rng, 4, 3);
  const T2 plain = sine_forward<double>(W, b, x, 30.0);
  const T2 mod = modulated_sine_forward<double>(W, b, x, V::Ones(5), V::Zero(5), 30.0);
  EXPECT_EQ(plain, mod);
}

TEST(SineLayer, ZeroWeightsGiveSinOfShift) {
  const T2 W = T2::Zero(3, 2), b = mat({{0.1, 0.2, 0.3}});
  const V psi = (V(3) << 0.5, -0.2, 1.0).finished();
  const T2 y = modulated_sine_forward<double>(W, b, mat({{0.7, -0.4}}), V::Constant(3, 2.0), psi, 30.0);
  for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(y(0, j), std::sin(b(0, j) + psi[j]));
}

TEST(SineLayer, ShiftAndBiasOutsideFrequency) {
  // sin(w0 * phi * (x W^T) + b + psi), checked entry by entry
  std::mt19937_64 rng(2);
  const T2 W = random_mat(rng, 4, 3), b = random_mat(rng, 1, 4), x = random_mat(rng, 2, 3);
  const V phi = random_mat(rng, 4, 1).col(0), psi = random_mat(rng, 4, 1).col(0);
  const T2 y = modulated_sine_forward<double>(W, b, x, phi, psi, 30.0);
  for (int r = 0; r < 2; ++r)
    for (int j = 0; j < 4; ++j) {
      double dot = 0;
      for (int k = 0; k < 3; ++k) dot += x(r, k) * W(j, k);
      EXPECT_NEAR(y(r, j), std::sin(30.0 * phi[j] * dot + b(0, j) + psi[j]), 1e-12);
    }
}

TEST(ModulationMap, MatchesMatrixVectorProduct) {
  std::mt19937_64 rng(3);
  const T2 M = random_mat(rng, 6, 4), mu = random_mat(rng, 6, 1);
  const V z = random_mat(rng, 4, 1).col(0);
  const auto [phi, psi] = modulation_map<double>(M, mu, z);
  for (int i = 0; i < 6; ++i) {
    double v = mu(i, 0);
    for (int k = 0; k < 4; ++k) v += M(i, k) * z[k];
    EXPECT_NEAR(i < 3 ? phi[i] : psi[i - 3], v, 1e-14);
  }
  EXPECT_THROW(modulation_map<double>(M, mu, V::Zero(3)), ShapeError);
}

TEST(Loss, MseHandValue) { EXPECT_EQ(mse_loss<double>(mat({{1}, {3}}), mat({{3}, {1}})), 4.0); }

TEST(Loss, CrossEntropyUniformLogits) {
  const std::vector<int> t{2, 5};
  EXPECT_NEAR(ce(T2::Zero(2, 7), t), std::log(7.0), 1e-15);
}

TEST(Loss, CrossEntropySaturates) {
  T2 logits = T2::Zero(1, 7);
  logits(0, 3) = 1000.0;
  const std::vector<int> right{3}, wrong{0};
  EXPECT_EQ(ce(logits, right), 0.0);
  EXPECT_NEAR(ce(logits, wrong), 1000.0, 1e-9);
  EXPECT_TRUE(std::isfinite(ce(logits, wrong)));
}

TEST(Loss, CrossEntropyMatchesNaiveFormula) {
  std::mt19937_64 rng(4);
  const T2 logits = random_mat(rng, 9, 7);
  std::vector<int> t;
  for (int i = 0; i < 9; ++i) t.push_back(static_cast<int>(rng() % 7));
  double ref = 0;
  for (int r = 0; r < 9; ++r) {
    double z = 0;
    for (int c = 0; c < 7; ++c) z += std::exp(logits(r, c));
    ref += -std::log(std::exp(logits(r, t[static_cast<std::size_t>(r)])) / z);
  }
  EXPECT_NEAR(ce(logits, t), ref / 9, 1e-12);
}

TEST(Loss, ClassOutOfRange) {
  const std::vector<int> t{7};
  EXPECT_THROW(ce(T2::Zero(1, 7), t), ShapeError);
}

TEST(Gradient, OneDimensionalClosedForm) {
  // L = (sin(w0 (w x) + b) - y)^2, differentiated by hand
  const double w = 0.3, b = 0.1, x = 0.4, y = 0.2, w0 = 30.0;
  SineCache<double> cache;
  const T2 out = sine_forward<double>(mat({{w}}), mat({{b}}), mat({{x}}), w0, &cache);
  const T2 dy = mse_loss_grad<double>(out, mat({{y}}));
  T2 dW = T2::Zero(1, 1), db = T2::Zero(1, 1);
  const T2 dx = sine_backward<double>(mat({{w}}), cache, nullptr, w0, dy, &dW, &db, nullptr, nullptr);
  const double a = w0 * w * x + b;
  const double common = 2 * (std::sin(a) - y) * std::cos(a);
  EXPECT_NEAR(dW(0, 0), common * w0 * x, 1e-12);
  EXPECT_NEAR(db(0, 0), common, 1e-12);
  EXPECT_NEAR(dx(0, 0), common * w0 * w, 1e-12);
}

TEST(Adam, FirstStepsByHand) {
  Param<double> p(1, 1);
  p.value(0, 0) = 1.0;
  AdamOptions o;
  o.lr = 0.1;
  p.grad(0, 0) = 0.5;
  adam_step(p, o);
  // bias-corrected first step moves by lr * g / (|g| + eps)
  EXPECT_NEAR(p.value(0, 0), 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_EQ(p.grad(0, 0), 0.0);
  p.grad(0, 0) = -1.0;
  adam_step(p, o);
  const double m = (0.9 * 0.05 + 0.1 * -1.0) / (1 - 0.81);
  const double v = (0.999 * 0.001 * 0.25 + 0.001 * 1.0) / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p.value(0, 0), 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * m / (std::sqrt(v) + 1e-8), 1e-12);
}

TEST(Adam, ZeroGradientOrRateLeavesValue) {
  Param<double> p(2, 2);
  p.value.setConstant(3.0);
  adam_step(p, AdamOptions{});
  EXPECT_EQ(p.value, T2::Constant(2, 2, 3.0));
  AdamOptions zero;
  zero.lr = 0.0;
  p.grad.setConstant(1.0);
  adam_step(p, zero);
  EXPECT_EQ(p.value, T2::Constant(2, 2, 3.0));
}

TEST(Adam, ConvexQuadraticDecreases) {
  Param<double> p(1, 3);
  p.value << 2.0, -1.0, 0.5;
  AdamOptions o;
  o.lr = 0.01;
  double prev = p.value.squaredNorm();
  for (int i = 0; i < 100; ++i) {
    p.grad = 2.0 * p.value;
    adam_step(p, o);
    const double cur = p.value.squaredNorm();
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(Adam, NonFiniteGradientAbortsAll) {
  Param<double> a(1, 1), b(1, 1);
  a.value(0, 0) = 1.0;
  b.value(0, 0) = 1.0;
  a.grad(0, 0) = 1.0;
  b.grad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  Param<double>* both[] = {&a, &b};
  EXPECT_THROW(adam_step<double>(std::span<Param<double>* const>(both), AdamOptions{}), NumericalError);
  EXPECT_EQ(a.value(0, 0), 1.0);
  EXPECT_EQ(a.step_count, 0);
}

TEST(GradCheck, FullGraph64Bit) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto c = gc::random_gradcheck_case(seed);
    const auto r = gc::compare_gradients(gc::analytic_gradient<double>(c), gc::numeric_gradient(c), 1e-4);
    EXPECT_LT(r.max_rel_error, 1e-6) << "seed " << seed;
  }
}

TEST(GradCheck, FullGraph32Bit) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto c = gc::random_gradcheck_case(seed);
    const auto r = gc::compare_gradients(gc::analytic_gradient<float>(c), gc::numeric_gradient(c), 1e-3);
    EXPECT_LT(r.max_rel_error, 1e-3) << "seed " << seed;
  }
}

TEST(Adam, ZeroGradientCountsStep) {
  Param<double> p(1, 2);
  p.value << 1.0, -2.0;
  adam_step(p, AdamOptions{});
  EXPECT_EQ(p.step_count, 1);
  EXPECT_EQ(p.value(0, 0), 1.0);
  EXPECT_EQ(p.value(0, 1), -2.0);
}

TEST(Adam, ConstantGradientMovesMonotonically) {
  Param<double> p(1, 1);
  double prev = 0.0;
  for (int i = 0; i < 100; ++i) {
    p.grad(0, 0) = 0.3;
    adam_step(p, AdamOptions{});
    EXPECT_LT(p.value(0, 0), prev);
    prev = p.value(0, 0);
  }
  // a constant gradient is fully bias-corrected: each step is lr * g / (|g| + eps)
  EXPECT_NEAR(p.value(0, 0), -100 * 2e-4 * 0.3 / (0.3 + 1e-8), 1e-12);
}

TEST(Properties, SoftmaxAndLossRanges) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 50; ++t) {
    const T2 logits = random_mat(rng, 6, 7, 10.0);
    const T2 p = softmax_rows(logits);
    for (int r = 0; r < 6; ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
    std::vector<int> labels;
    for (int r = 0; r < 6; ++r) labels.push_back(static_cast<int>(rng() % 7));
    EXPECT_GE(ce(logits, labels), 0.0);
    const T2 W = random_mat(rng, 5, 3, 3.0), b = random_mat(rng, 1, 5, 3.0), x = random_mat(rng, 6, 3, 3.0);
    const V phi = random_mat(rng, 5, 1, 3.0).col(0), psi = random_mat(rng, 5, 1, 3.0).col(0);
    const T2 y = modulated_sine_forward<double>(W, b, x, phi, psi, 30.0);
    EXPECT_LE(y.cwiseAbs().maxCoeff(), 1.0);
  }
}

TEST(Backward, ConstantLossGivesZeroGradients) {
  const auto c = gc::random_gradcheck_case(3);
  ForwardTape<double> tape;
  const auto out = forward(c.model, c.coords, c.z, tape);
  ModelGrads<double> g(c.model);
  V dz = V::Zero(c.z.size());
  backward(c.model, tape, T2(T2::Zero(out.intensity.rows(), 1)), T2(T2::Zero(out.logits.rows(), out.logits.cols())), &g, &dz);
  g.for_each([](T2& t) { EXPECT_EQ(t.cwiseAbs().maxCoeff(), 0.0); });
  EXPECT_EQ(dz.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, LinearMseClosedForm) {
  // L = (w x + b - t)^2  ->  dL/dw = 2 (w x + b - t) x
  const double w = 1.5, b = -0.25, x = 0.8, t = 2.0;
  const T2 y = linear_forward<double>(mat({{w}}), mat({{b}}), mat({{x}}));
  T2 dW = T2::Zero(1, 1), db = T2::Zero(1, 1);
  const T2 dx = linear_backward<double>(mat({{w}}), mat({{x}}), mse_loss_grad<double>(y, mat({{t}})), dW, db);
  EXPECT_NEAR(dW(0, 0), 2 * (w * x + b - t) * x, 1e-15);
  EXPECT_NEAR(db(0, 0), 2 * (w * x + b - t), 1e-15);
  EXPECT_NEAR(dx(0, 0), 2 * (w * x + b - t) * w, 1e-15);
}
