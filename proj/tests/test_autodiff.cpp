#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "relflat/autodiff.hpp"
#include "relflat/errors.hpp"
#include "relflat/model.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

namespace ad = relflat::ad;
using relflat::RngStream;
using relflat::Shape;
using relflat::Tensor;

namespace {

// Builds a scalar from a single parameter on a fresh graph.
using Builder = std::function<ad::Var(const ad::Var&)>;

double eval(const Builder& f, const Tensor& x) {
  auto g = ad::Graph::create();
  return f(g->parameter(x)).value().item();
}

Tensor gradient(const Builder& f, const Tensor& x) {
  auto g = ad::Graph::create();
  const ad::Var w = g->parameter(x);
  return ad::grad(f(w), std::span<const ad::Var>(&w, 1)).front();
}

void expect_matches_fd(const Builder& f, const Tensor& x, double tol = 1e-6) {
  const Tensor g = gradient(f, x);
  const Tensor fd = oracle::fd_gradient([&](const Tensor& p) { return eval(f, p); }, x, 1e-5);
  EXPECT_LT(oracle::rel_error(g, fd), tol);
}

}  // namespace

TEST(Grad, SumOfSquares) {
  const Builder f = [](const ad::Var& w) { return ad::sum(ad::square(w)); };
  EXPECT_EQ(gradient(f, Tensor::vector({1.0, 2.0})).values(), (std::vector<double>{2.0, 4.0}));
}

TEST(Grad, ConstantFunctionHasZeroGradient) {
  const Builder f = [](const ad::Var& w) { return ad::sum(w.graph().constant(Tensor::vector({3.0, 4.0}))); };
  const Tensor g = gradient(f, Tensor::vector({1.0, 2.0}));
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(Grad, NonScalarTargetIsRankError) {
  auto g = ad::Graph::create();
  const ad::Var w = g->parameter(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(ad::grad(ad::square(w), std::span<const ad::Var>(&w, 1)), relflat::RankError);
}

TEST(Grad, TargetWithoutGradientIsRejected) {
  auto g = ad::Graph::create();
  const ad::Var c = g->constant(Tensor::vector({1.0, 2.0}));
  const ad::Var w = g->parameter(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(ad::grad(ad::dot(c, w), std::span<const ad::Var>(&c, 1)), relflat::Error);
}

class PrimitiveFd : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveFd, MatchesCentralDifferences) {
  RngStream rng(100 + GetParam(), 1);
  const Tensor x = fixture::normal_matrix(rng, 3, 2, 0.8);
  const Tensor a = fixture::normal_matrix(rng, 3, 2);
  const Tensor b = fixture::normal_matrix(rng, 2, 4);
  const Tensor positive = [&] {
    Tensor p = x;
    for (auto& v : p.data()) v = 0.5 + std::abs(v);
    return p;
  }();
  Builder f;
  Tensor at = x;
  switch (GetParam()) {
    case 0: f = [&](const ad::Var& w) { return ad::sum(ad::add(w, w.graph().constant(a)) * w); }; break;
    case 1: f = [&](const ad::Var& w) { return ad::sum(ad::sub(w, w.graph().constant(a)) * w); }; break;
    case 2: f = [&](const ad::Var& w) { return ad::sum(ad::mul(w, w)); }; break;
    case 3: f = [&](const ad::Var& w) { return ad::sum(ad::square(ad::scale(w, -1.7))); }; break;
    case 4: f = [&](const ad::Var& w) { return ad::sum(ad::square(ad::matmul(w, w.graph().constant(b)))); }; break;
    case 5: f = [&](const ad::Var& w) { return ad::mean(ad::square(ad::transpose(w))); }; break;
    case 6: f = [&](const ad::Var& w) { return ad::sum(ad::tanh(w)); }; break;
    case 7: f = [&](const ad::Var& w) { return ad::sum(ad::softplus(ad::scale(w, 3.0))); }; break;
    case 8: f = [&](const ad::Var& w) { return ad::sum(ad::square(ad::relu(w))); }; break;
    case 9: f = [&](const ad::Var& w) { return ad::sum(ad::exp(w)); }; break;
    case 10:
      f = [&](const ad::Var& w) { return ad::sum(ad::log(w)); };
      at = positive;
      break;
    case 11: f = [&](const ad::Var& w) { return ad::dot(w, ad::tanh(w)); }; break;
    case 12: f = [&](const ad::Var& w) { return ad::sum(ad::square(ad::slice(w, 1, 2, 0, 2))); }; break;
    case 13: f = [&](const ad::Var& w) { return ad::entry(ad::tanh(w), 2, 1); }; break;
    case 14:
      f = [&](const ad::Var& w) { return ad::sum(ad::mul(ad::sum(w), ad::tanh(w))); };
      break;
  }
  if (GetParam() == 8)
    for (auto& v : at.data())
      if (std::abs(v) < 1e-3) v = 0.5;  // keep away from the kink
  expect_matches_fd(f, at);
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveFd, ::testing::Range(0, 15));

TEST(Grad, TwoLayerTanhMseMatchesFiniteDifferences) {
  auto c = fixture::random_case({3, 4, 2}, relflat::Activation::kTanh, relflat::LossKind::kMse, 6, 5);
  const relflat::LossRecord rec = relflat::forward_loss(c.state, c.x, c.y);
  const auto grads = ad::grad(rec.loss, rec.params.weights);
  for (std::size_t k = 1; k <= 2; ++k) {
    const Tensor fd = oracle::fd_gradient(oracle::loss_in_layer(c.state, k, c.x, c.y), c.state.weights[k - 1]);
    EXPECT_LT(oracle::rel_error(grads[k - 1], fd), 1e-6) << "layer " << k;
  }
}

TEST(Hvp, HalfSquaredNormIsIdentity) {
  auto g = ad::Graph::create();
  const ad::Var w = g->parameter(Tensor::vector({0.3, -1.0, 2.0}));
  const ad::Var f = ad::scale(ad::sum(ad::square(w)), 0.5);
  const Tensor v = Tensor::vector({1.0, 2.0, -3.0});
  EXPECT_EQ(ad::hvp(f, w, v).values(), v.values());
}

TEST(Hvp, QuadraticForm) {
  auto g = ad::Graph::create();
  const ad::Var w = g->parameter(Tensor::matrix(2, 1, {0.4, -0.2}));
  const ad::Var A = g->constant(Tensor::from_rows({{2, 1}, {1, 3}}));
  const ad::Var f = ad::scale(ad::sum(ad::mul(w, ad::matmul(A, w))), 0.5);
  const Tensor hv = ad::hvp(f, w, Tensor::matrix(2, 1, {1.0, 0.0}));
  EXPECT_NEAR(hv[0], 2.0, 1e-15);
  EXPECT_NEAR(hv[1], 1.0, 1e-15);
}

TEST(Hvp, ShapeMismatchIsDimensionError) {
  auto g = ad::Graph::create();
  const ad::Var w = g->parameter(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(ad::hvp(ad::sum(ad::square(w)), w, Tensor::vector({1.0})), relflat::DimensionError);
}

TEST(Hvp, BasisColumnsMatchFiniteDifferencesOfGradient) {
  auto c = fixture::random_case({3, 4, 3}, relflat::Activation::kTanh, relflat::LossKind::kCrossEntropy, 5, 9);
  const relflat::LossRecord rec = relflat::forward_loss(c.state, c.x, c.y);
  const ad::Var& w = rec.params.weights[0];
  auto grad_at = [&](const Tensor& p) {
    relflat::ModelState s = c.state;
    s.weights[0] = p;
    const auto r = relflat::forward_loss(s, c.x, c.y);
    return ad::grad(r.loss, std::span<const ad::Var>(&r.params.weights[0], 1)).front();
  };
  const double h = 1e-5;
  for (std::size_t i = 0; i < w.value().numel(); ++i) {
    const Tensor col = ad::hvp(rec.loss, w, Tensor::basis(w.shape(), i));
    Tensor plus = c.state.weights[0], minus = c.state.weights[0];
    plus[i] += h;
    minus[i] -= h;
    const Tensor fd = relflat::scale(relflat::sub(grad_at(plus), grad_at(minus)), 1.0 / (2.0 * h));
    EXPECT_LT(oracle::rel_error(col, fd), 1e-5) << "column " << i;
  }
}

TEST(LayerHessian, LinearQuadraticLoss) {
  auto g = ad::Graph::create();
  const ad::Var w = g->parameter(Tensor::matrix(1, 2, {1.0, 2.0}));
  const ad::Var x = g->constant(Tensor::matrix(2, 1, {1.0, 1.0}));
  const ad::Var r = ad::sub(ad::matmul(w, x), g->constant(Tensor::matrix(1, 1, {0.5})));
  const Tensor H = ad::layer_hessian(ad::sum(ad::square(r)), w);
  EXPECT_EQ(H.values(), (std::vector<double>{2, 2, 2, 2}));
}

TEST(LayerHessian, SymmetricAndMatchesFullFiniteDifferences) {
  auto c = fixture::random_case({2, 3, 2}, relflat::Activation::kTanh, relflat::LossKind::kCrossEntropy, 6, 4);
  const relflat::LossRecord rec = relflat::forward_loss(c.state, c.x, c.y);
  const Tensor H = ad::layer_hessian(rec.loss, rec.params.weights[1]);
  ASSERT_EQ(H.shape(), Shape::matrix(6, 6));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(H(i, j), H(j, i), 1e-9);
  const Tensor fd = oracle::fd_hessian(oracle::loss_in_layer(c.state, 2, c.x, c.y), c.state.weights[1]);
  for (std::size_t i = 0; i < H.numel(); ++i) EXPECT_NEAR(H[i], fd[i], 1e-5);
}

TEST(LayerHessian, CapExceededIsCapacityError) {
  auto g = ad::Graph::create();
  const ad::Var w = g->parameter(Tensor(Shape::matrix(3, 3), 0.1));
  EXPECT_THROW(ad::layer_hessian(ad::sum(ad::square(w)), w, 8), relflat::CapacityError);
}

TEST(Hvp, AgreesWithDenseHessianAndIsSymmetric) {
  auto c = fixture::random_case({3, 4, 3}, relflat::Activation::kTanh, relflat::LossKind::kCrossEntropy, 7, 12);
  const relflat::LossRecord rec = relflat::forward_loss(c.state, c.x, c.y);
  const ad::Var& w = rec.params.weights[1];
  const Tensor H = ad::layer_hessian(rec.loss, w);
  RngStream rng(12, 3);
  const Tensor u = fixture::normal_matrix(rng, 3, 4), v = fixture::normal_matrix(rng, 3, 4);
  const Tensor hv = ad::hvp(rec.loss, w, v);
  const Tensor dense = relflat::matmul(H, v.reshaped(Shape::matrix(12, 1)));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(hv[i], dense[i], 1e-9);
  EXPECT_NEAR(relflat::dot(ad::hvp(rec.loss, w, u), v), relflat::dot(hv, u), 1e-9);
}

TEST(Nesting, GenerationsAdvanceAndDepthIsCapped) {
  auto g = ad::Graph::create();
  const ad::Var w = g->parameter(Tensor::vector({0.3, 0.7}));
  const ad::Var f = ad::sum(ad::tanh(ad::mul(w, w)));
  EXPECT_EQ(f.generation(), 0);
  const ad::Var g1 = ad::grad_recorded(f, std::span<const ad::Var>(&w, 1)).front();
  EXPECT_EQ(g1.generation(), 1);
  const ad::Var s1 = ad::sum(g1);
  const ad::Var g2 = ad::grad_recorded(s1, std::span<const ad::Var>(&w, 1)).front();
  EXPECT_EQ(g2.generation(), 2);
  const ad::Var s2 = ad::sum(g2);
  const ad::Var g3 = ad::grad_recorded(s2, std::span<const ad::Var>(&w, 1)).front();
  EXPECT_EQ(g3.generation(), 3);
  EXPECT_THROW(ad::grad(ad::sum(g3), std::span<const ad::Var>(&w, 1)), relflat::DepthError);
}

TEST(Nesting, GradientThroughHvpMatchesFiniteDifferences) {
  auto c = fixture::random_case({2, 3, 2}, relflat::Activation::kTanh, relflat::LossKind::kCrossEntropy, 5, 21);
  RngStream rng(21, 4);
  const Tensor v = fixture::normal_matrix(rng, 2, 3);
  // s(W) = <v, H(W) v> for the output layer; differentiate wrt the first layer.
  auto s_value = [&](const Tensor& w1) {
    relflat::ModelState st = c.state;
    st.weights[0] = w1;
    const auto rec = relflat::forward_loss(st, c.x, c.y);
    return relflat::dot(ad::hvp(rec.loss, rec.params.weights[1], v), v);
  };
  const auto rec = relflat::forward_loss(c.state, c.x, c.y);
  const ad::Var hv = ad::hvp_recorded(rec.loss, rec.params.weights[1], v);
  const ad::Var s = ad::dot(hv, rec.params.graph->constant(v));
  EXPECT_EQ(s.generation(), 2);
  const Tensor g = ad::grad(s, std::span<const ad::Var>(&rec.params.weights[0], 1)).front();
  const Tensor fd = oracle::fd_gradient(s_value, c.state.weights[0], 1e-5);
  EXPECT_LT(oracle::rel_error(g, fd), 1e-4);
}

TEST(Grad, NonRecordedPassLeavesGraphSize) {
  auto g = ad::Graph::create();
  const ad::Var w = g->parameter(Tensor::vector({1.0, 2.0}));
  const ad::Var f = ad::sum(ad::tanh(w));
  const std::size_t before = g->size();
  ad::grad(f, std::span<const ad::Var>(&w, 1));
  EXPECT_EQ(g->size(), before);
}

TEST(Relu, SecondDerivativeIsZero) {
  auto g = ad::Graph::create();
  const ad::Var w = g->parameter(Tensor::vector({-0.5, 0.0, 0.5}));
  const ad::Var f = ad::sum(ad::relu(w));
  const Tensor hv = ad::hvp(f, w, Tensor::vector({1.0, 1.0, 1.0}));
  for (double v : hv.data()) EXPECT_EQ(v, 0.0);
}

TEST(Ops, NonFiniteResultIsNumericError) {
  auto g = ad::Graph::create();
  const ad::Var w = g->parameter(Tensor::vector({800.0}));
  EXPECT_THROW(ad::exp(w), relflat::NumericError);
  const ad::Var z = g->parameter(Tensor::vector({0.0}));
  EXPECT_THROW(ad::log(z), relflat::NumericError);
}
