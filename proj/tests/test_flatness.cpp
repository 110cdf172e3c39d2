#include <gtest/gtest.h>

#include <cmath>
#include <nlohmann/json.hpp>

#include "relflat/errors.hpp"
#include "relflat/flatness.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

namespace ad = relflat::ad;
using relflat::Activation;
using relflat::FlatnessConfig;
using relflat::FlatnessMode;
using relflat::LossKind;
using relflat::RngStream;
using relflat::Shape;
using relflat::Tensor;

namespace {

// loss = (w x - y)^2 for w = (1, 2), x = (1, 1): Hessian 2 x x^T, Tr(H) = 4,
// ||w||^2 = 5.
struct LinearExample {
  std::shared_ptr<ad::Graph> g = ad::Graph::create();
  ad::Var w = g->parameter(Tensor::matrix(1, 2, {1.0, 2.0}));
  ad::Var loss = ad::sum(ad::square(ad::sub(ad::matmul(w, g->constant(Tensor::matrix(2, 1, {1.0, 1.0}))),
                                            g->constant(Tensor::matrix(1, 1, {0.25})))));
};

FlatnessConfig config(FlatnessMode mode, double lambda = 0.0, std::size_t samples = 1, std::uint64_t seed = 0) {
  FlatnessConfig c;
  c.mode = mode;
  c.lambda = lambda;
  c.samples = samples;
  c.rng = RngStream(seed, relflat::kHutchinsonStream);
  return c;
}

relflat::KappaReport measure(const relflat::ModelState& s, const Tensor& x, const Tensor& y, FlatnessConfig cfg) {
  const auto rec = relflat::forward_loss(s, x, y);
  return relflat::measure_kappa(rec.loss, rec.params.weights[s.spec.flatness_index() - 1], cfg);
}

}  // namespace

TEST(KappaNeuronwise, LinearExampleIsTwenty) {
  LinearExample e;
  const auto r = relflat::kappa_neuronwise(e.loss, e.w);
  EXPECT_NEAR(r.kappa, 20.0, 1e-9);
  EXPECT_NEAR(r.trace_total, 4.0, 1e-12);
  EXPECT_NEAR((*r.gram)(0, 0), 5.0, 1e-12);
}

TEST(KappaTrace, SingleRowIdentityWithNeuronwise) {
  LinearExample e;
  auto cfg = config(FlatnessMode::kTraceExact);
  EXPECT_NEAR(relflat::kappa_trace(e.loss, e.w, cfg).kappa, relflat::kappa_neuronwise(e.loss, e.w).kappa, 1e-12);
}

TEST(Kappa, ZeroWeightsGiveZeroInEveryMode) {
  auto c = fixture::random_case({3, 4, 3}, Activation::kTanh, LossKind::kCrossEntropy, 6, 1);
  c.state.weights[1] = Tensor(c.state.weights[1].shape());
  for (auto mode : {FlatnessMode::kNeuronwise, FlatnessMode::kTraceExact, FlatnessMode::kTraceHutchinson})
    EXPECT_EQ(measure(c.state, c.x, c.y, config(mode, 0.0, 10)).kappa, 0.0) << relflat::to_string(mode);
}

TEST(KappaNeuronwise, MatchesFiniteDifferenceDoubleSum) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto c = fixture::random_case({3, 4, 3}, Activation::kTanh, LossKind::kCrossEntropy, 6, seed);
    const auto r = measure(c.state, c.x, c.y, config(FlatnessMode::kNeuronwise));
    const Tensor H = oracle::fd_hessian(oracle::loss_in_layer(c.state, 2, c.x, c.y), c.state.weights[1]);
    EXPECT_LT(oracle::rel_error(r.kappa, oracle::kappa_double_sum(H, c.state.weights[1])), 1e-4);
  }
}

TEST(KappaNeuronwise, ReportInvariants) {
  auto c = fixture::random_case({3, 5, 4}, Activation::kTanh, LossKind::kCrossEntropy, 8, 7);
  const auto r = measure(c.state, c.x, c.y, config(FlatnessMode::kNeuronwise));
  const Tensor& T = *r.pair_traces;
  const Tensor& G = *r.gram;
  double sum = 0.0;
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t t = 0; t < 4; ++t) {
      EXPECT_NEAR(T(s, t), T(t, s), 1e-9);
      sum += G(s, t) * T(s, t);
    }
  EXPECT_NEAR(r.kappa, sum, 1e-9);
  const Tensor& w = c.state.weights[1];
  for (std::size_t s = 0; s < 4; ++s) {
    double norm = 0.0;
    for (std::size_t t = 0; t < 5; ++t) norm += w(s, t) * w(s, t);
    EXPECT_NEAR(G(s, s), norm, 1e-12);
  }
}

TEST(KappaNeuronwise, CapExceeded) {
  LinearExample e;
  EXPECT_THROW(relflat::kappa_neuronwise(e.loss, e.w, 1), relflat::CapacityError);
}

TEST(KappaTrace, ExactEqualsNormTimesHessianTrace) {
  auto c = fixture::random_case({2, 4, 3}, Activation::kTanh, LossKind::kCrossEntropy, 6, 2);
  const auto r = measure(c.state, c.x, c.y, config(FlatnessMode::kTraceExact));
  const Tensor H = oracle::fd_hessian(oracle::loss_in_layer(c.state, 2, c.x, c.y), c.state.weights[1]);
  EXPECT_LT(oracle::rel_error(r.trace_total, oracle::trace(H)), 1e-5);
  EXPECT_NEAR(r.kappa, relflat::frobenius_norm_sq(c.state.weights[1]) * r.trace_total, 1e-12);
}

TEST(KappaTrace, ZeroSamplesIsConfigError) {
  LinearExample e;
  auto cfg = config(FlatnessMode::kTraceHutchinson, 0.0, 0);
  EXPECT_THROW(relflat::kappa_trace(e.loss, e.w, cfg), relflat::ConfigError);
}

TEST(Hutchinson, DiagonalHessianEverySampleIsExact) {
  auto g = ad::Graph::create();
  const ad::Var w = g->parameter(Tensor::matrix(2, 3, {0.1, -0.4, 0.9, 1.2, 0.0, -2.0}));
  const ad::Var a = g->constant(Tensor::matrix(2, 3, {1.0, 2.5, 3.0, 0.5, 4.0, 7.0}));
  const ad::Var loss = ad::scale(ad::sum(ad::mul(a, ad::square(w))), 0.5);
  auto cfg = config(FlatnessMode::kTraceHutchinson, 0.0, 1, 3);
  for (int i = 0; i < 25; ++i) EXPECT_NEAR(relflat::kappa_trace(loss, w, cfg).trace_total, 18.0, 1e-9);
}

namespace {

// Random symmetric 12 x 12 matrix as a matvec closure over 3 x 4 inputs.
struct SyntheticHessian {
  Tensor A;
  double trace = 0.0;
  explicit SyntheticHessian(std::uint64_t seed) {
    RngStream rng(seed, 5);
    const Tensor B = fixture::normal_matrix(rng, 12, 12);
    A = relflat::add(B, relflat::transpose(B));
    trace = oracle::trace(A);
  }
  Tensor operator()(const Tensor& v) const {
    return relflat::matmul(A, v.reshaped(Shape::matrix(12, 1))).reshaped(v.shape());
  }
};

std::vector<double> estimates(const SyntheticHessian& H, std::size_t V, std::size_t count, std::uint64_t seed) {
  RngStream rng(seed, relflat::kHutchinsonStream);
  std::vector<double> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(relflat::hutchinson_trace(H, Shape::matrix(3, 4), V, rng));
  return out;
}

std::pair<double, double> mean_var(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= double(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, s / double(v.size() - 1)};
}

}  // namespace

TEST(Hutchinson, UnbiasedWithinThreeStandardErrors) {
  const SyntheticHessian H(1);
  const auto [mean, var] = mean_var(estimates(H, 1, 200, 1));
  EXPECT_LE(std::abs(mean - H.trace), 3.0 * std::sqrt(var / 200.0));
}

TEST(Hutchinson, VarianceShrinksLikeOneOverV) {
  const SyntheticHessian H(2);
  const double v25 = mean_var(estimates(H, 25, 400, 2)).second;
  const double v100 = mean_var(estimates(H, 100, 400, 3)).second;
  const double ratio = v100 / v25;
  EXPECT_GE(ratio, 0.125);
  EXPECT_LE(ratio, 0.5);
}

TEST(Hutchinson, ManySamplesApproachExactTrace) {
  auto c = fixture::random_case({2, 16, 8, 2}, Activation::kTanh, LossKind::kCrossEntropy, 16, 5);
  const auto exact = measure(c.state, c.x, c.y, config(FlatnessMode::kTraceExact));
  const auto est = measure(c.state, c.x, c.y, config(FlatnessMode::kTraceHutchinson, 0.0, 2000, 5));
  EXPECT_LT(oracle::rel_error(est.kappa, exact.kappa), 0.05);
}

TEST(Hutchinson, AdvancesItsStream) {
  auto c = fixture::random_case({2, 4, 3}, Activation::kTanh, LossKind::kCrossEntropy, 6, 2);
  auto cfg = config(FlatnessMode::kTraceHutchinson, 0.0, 3, 1);
  const auto rec = relflat::forward_loss(c.state, c.x, c.y);
  relflat::kappa_trace(rec.loss, rec.params.weights[1], cfg);
  EXPECT_GT(cfg.rng.position(), 0u);
}

TEST(Reparameterization, KappaInvariantWhileTraceScales) {
  auto c = fixture::random_case({3, 6, 5, 3}, Activation::kRelu, LossKind::kCrossEntropy, 10, 3, false);
  c.state.spec.flatness_layer = 2;
  const auto before = measure(c.state, c.x, c.y, config(FlatnessMode::kNeuronwise));
  for (double alpha : {0.5, 2.0, 10.0}) {
    relflat::ModelState s = c.state;
    s.weights[1] = relflat::scale(s.weights[1], alpha);
    s.weights[2] = relflat::scale(s.weights[2], 1.0 / alpha);
    const auto after = measure(s, c.x, c.y, config(FlatnessMode::kNeuronwise));
    EXPECT_LT(oracle::rel_error(after.kappa, before.kappa), 1e-6) << alpha;
    EXPECT_LT(std::abs(after.trace_total / before.trace_total / std::pow(alpha, -2.0) - 1.0), 0.01) << alpha;
  }
}

TEST(FamObjective, ZeroLambdaIsTheLoss) {
  auto c = fixture::random_case({2, 3, 2}, Activation::kTanh, LossKind::kCrossEntropy, 4, 1);
  const auto rec = relflat::forward_loss(c.state, c.x, c.y);
  auto cfg = config(FlatnessMode::kNeuronwise, 0.0);
  const ad::Var obj = relflat::fam_objective(rec, c.state.spec, cfg);
  EXPECT_EQ(obj.value().item(), rec.loss.value().item());
}

TEST(FamObjective, LinearExampleAddsKappa) {
  LinearExample e;
  auto cfg = config(FlatnessMode::kNeuronwise, 1.0);
  const ad::Var obj = relflat::fam_objective(e.loss, e.w, cfg);
  EXPECT_NEAR(obj.value().item(), e.loss.value().item() + 20.0, 1e-9);
}

TEST(KappaTerm, LinearCaseGradientIsFirstTermOnly) {
  LinearExample e;
  auto cfg = config(FlatnessMode::kNeuronwise, 1.0);
  const auto term = relflat::kappa_term(e.loss, e.w, cfg);
  const Tensor g = ad::grad(term.kappa, std::span<const ad::Var>(&e.w, 1)).front();
  EXPECT_NEAR(g[0], 8.0, 1e-9);
  EXPECT_NEAR(g[1], 16.0, 1e-9);
  LinearExample f;
  const auto fixed = relflat::kappa_term(f.loss, f.w, cfg, relflat::GramTreatment::kHoldFixed);
  const Tensor g2 = ad::grad(fixed.kappa, std::span<const ad::Var>(&f.w, 1)).front();
  EXPECT_NEAR(g2[0], 0.0, 1e-12);
  EXPECT_NEAR(g2[1], 0.0, 1e-12);
}

TEST(FamGradient, ZeroLambdaEqualsLossGradient) {
  auto c = fixture::random_case({2, 3, 2}, Activation::kTanh, LossKind::kCrossEntropy, 5, 3);
  auto cfg = config(FlatnessMode::kNeuronwise, 0.0);
  const auto fam = relflat::fam_gradient(c.state, c.x, c.y, cfg);
  const auto plain = relflat::loss_gradient(c.state, c.x, c.y);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < fam.weights[k].numel(); ++i)
      EXPECT_NEAR(fam.weights[k][i], plain.weights[k][i], 1e-12);
}

class FamGradientFd : public ::testing::TestWithParam<FlatnessMode> {};

TEST_P(FamGradientFd, MatchesFiniteDifferencesOfObjective) {
  auto c = fixture::random_case({2, 3, 2}, Activation::kTanh, LossKind::kCrossEntropy, 6, 11);
  const auto base = config(GetParam(), 0.5, 4, 11);
  auto cfg = base;
  const auto g = relflat::fam_gradient(c.state, c.x, c.y, cfg);
  EXPECT_TRUE(g.kappa.has_value());
  for (std::size_t k = 1; k <= 2; ++k) {
    auto f = [&](const Tensor& w) {
      relflat::ModelState s = c.state;
      s.weights[k - 1] = w;
      auto local = base;
      const auto rec = relflat::forward_loss(s, c.x, c.y);
      return relflat::fam_objective(rec, s.spec, local).value().item();
    };
    EXPECT_LT(oracle::rel_error(g.weights[k - 1], oracle::fd_gradient(f, c.state.weights[k - 1])), 1e-4) << k;
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, FamGradientFd,
                         ::testing::Values(FlatnessMode::kNeuronwise, FlatnessMode::kTraceExact,
                                           FlatnessMode::kTraceHutchinson));

TEST(FamGradient, FullSetModeUsesTheGivenSet) {
  auto c = fixture::random_case({2, 3, 2}, Activation::kTanh, LossKind::kCrossEntropy, 8, 4);
  auto big = fixture::random_case({2, 3, 2}, Activation::kTanh, LossKind::kCrossEntropy, 20, 5);
  auto cfg = config(FlatnessMode::kNeuronwise, 1.0);
  cfg.hessian_batch = relflat::HessianBatch::kFullSet;
  const auto g = relflat::fam_gradient(c.state, c.x, c.y, cfg, &big.x, &big.y);
  EXPECT_NEAR(*g.kappa, measure(c.state, big.x, big.y, config(FlatnessMode::kNeuronwise)).kappa, 1e-9);
}

TEST(Lemma1, FirstTermMatchesGramPartOfAutodiff) {
  auto c = fixture::random_case({2, 3, 2}, Activation::kTanh, LossKind::kCrossEntropy, 6, 13);
  auto cfg = config(FlatnessMode::kNeuronwise, 1.0);
  const auto full = relflat::kappa_gradient(c.state, c.x, c.y, cfg, relflat::GramTreatment::kDifferentiate);
  const auto fixed = relflat::kappa_gradient(c.state, c.x, c.y, cfg, relflat::GramTreatment::kHoldFixed);
  const auto terms = relflat::lemma1_oracle(c.state, c.x, c.y);
  const std::size_t l = terms.flatness_layer;
  EXPECT_LT(oracle::rel_error(relflat::sub(full.weights[l - 1], fixed.weights[l - 1]), terms.term_one), 1e-4);
}

TEST(Lemma1, OracleTotalMatchesNestedAutodiff) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto c = fixture::random_case({2, 3, 2}, Activation::kTanh, LossKind::kCrossEntropy, 6, 20 + seed);
    auto cfg = config(FlatnessMode::kNeuronwise, 1.0);
    const auto nested = relflat::kappa_gradient(c.state, c.x, c.y, cfg);
    // The kappa part of fam_gradient at lambda = 1 is the same quantity.
    auto cfg2 = config(FlatnessMode::kNeuronwise, 1.0);
    const auto fam = relflat::fam_gradient(c.state, c.x, c.y, cfg2);
    const auto plain = relflat::loss_gradient(c.state, c.x, c.y);
    const auto total = relflat::lemma1_oracle(c.state, c.x, c.y).total();
    for (std::size_t k = 0; k < 2; ++k) {
      EXPECT_LT(oracle::rel_error(nested.weights[k], total.weights[k]), 1e-3);
      EXPECT_LT(oracle::rel_error(relflat::sub(fam.weights[k], plain.weights[k]), total.weights[k]), 1e-3);
      EXPECT_LT(oracle::rel_error(*nested.biases[k], *total.biases[k]), 1e-3);
    }
  }
}

TEST(Lemma1, CapIsEnforced) {
  auto c = fixture::random_case({30, 20, 2}, Activation::kTanh, LossKind::kCrossEntropy, 2, 1);
  EXPECT_THROW(relflat::lemma1_oracle(c.state, c.x, c.y), relflat::CapacityError);
}

TEST(KappaReport, JsonHasDocumentedKeys) {
  LinearExample e;
  const auto j = nlohmann::json::parse(relflat::to_json(relflat::kappa_neuronwise(e.loss, e.w)));
  for (const char* key : {"mode", "kappa", "trace_total", "gram", "pair_traces", "wall_time_ms"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["mode"], "neuronwise");
  auto cfg = config(FlatnessMode::kTraceHutchinson);
  LinearExample f;
  const auto j2 = nlohmann::json::parse(relflat::to_json(relflat::kappa_trace(f.loss, f.w, cfg)));
  EXPECT_FALSE(j2.contains("gram"));
}

TEST(FlatnessConfig, ParseModes) {
  EXPECT_EQ(relflat::parse_flatness_mode("trace-exact"), FlatnessMode::kTraceExact);
  EXPECT_THROW(relflat::parse_flatness_mode("exact"), relflat::ConfigError);
  FlatnessConfig c;
  c.lambda = -1.0;
  EXPECT_THROW(c.validate(), relflat::ConfigError);
}
