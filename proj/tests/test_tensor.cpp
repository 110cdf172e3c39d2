#include <gtest/gtest.h>

#include <cmath>

#include "relflat/errors.hpp"
#include "relflat/rng.hpp"
#include "relflat/tensor.hpp"
#include "support/fixtures.hpp"

using relflat::RngStream;
using relflat::Shape;
using relflat::Tensor;

TEST(Tensor, ShapeAndDataLengthAgree) {
  const Tensor t(Shape::matrix(3, 2));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(relflat::to_string(t.shape()), "[3x2]");
  EXPECT_THROW(Tensor(Shape::matrix(2, 2), std::vector<double>{1, 2, 3}), relflat::DimensionError);
  EXPECT_EQ(Tensor::scalar(4.0).item(), 4.0);
}

TEST(Tensor, RejectsNonFiniteConstruction) {
  Tensor t = Tensor::vector({1.0, 2.0});
  EXPECT_NO_THROW(relflat::require_finite(t, "test"));
  t[1] = std::nan("");
  EXPECT_THROW(relflat::require_finite(t, "test"), relflat::NumericError);
  t[1] = INFINITY;
  EXPECT_FALSE(t.all_finite());
}

TEST(Tensor, OverflowingOpIsAnError) {
  const Tensor big = Tensor::vector({1e300, 1e300});
  EXPECT_THROW(relflat::scale(big, 1e300), relflat::NumericError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor I = Tensor::from_rows({{1, 0}, {0, 1}});
  const Tensor A = Tensor::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(relflat::matmul(I, A).values(), A.values());
}

TEST(Matmul, RowTimesColumn) {
  const Tensor r = relflat::matmul(Tensor::from_rows({{1, 2}}), Tensor::from_rows({{3}, {4}}));
  EXPECT_EQ(r.shape(), Shape::matrix(1, 1));
  EXPECT_EQ(r.item(), 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
  RngStream rng(3, 1);
  const Tensor A = fixture::normal_matrix(rng, 3, 3), B = fixture::normal_matrix(rng, 3, 3);
  const Tensor C = relflat::matmul(A, B);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 3; ++k) acc += A(i, k) * B(k, j);
      EXPECT_NEAR(C(i, j), acc, 1e-12);
    }
}

TEST(Matmul, InnerMismatchNamesBothShapes) {
  try {
    relflat::matmul(Tensor(Shape::matrix(2, 3)), Tensor(Shape::matrix(2, 3)));
    FAIL() << "expected DimensionError";
  } catch (const relflat::DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, IsAssociative) {
  RngStream rng(4, 1);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor A = fixture::normal_matrix(rng, 3, 4), B = fixture::normal_matrix(rng, 4, 2),
                 C = fixture::normal_matrix(rng, 2, 5);
    const Tensor left = relflat::matmul(relflat::matmul(A, B), C);
    const Tensor right = relflat::matmul(A, relflat::matmul(B, C));
    for (std::size_t i = 0; i < left.numel(); ++i)
      EXPECT_LE(std::abs(left[i] - right[i]), 1e-10 * std::max(1.0, std::abs(right[i])));
  }
}

TEST(Tensor, ElementwiseKernels) {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor b = Tensor::from_rows({{5, 6}, {7, 8}});
  EXPECT_EQ(relflat::add(a, b).values(), (std::vector<double>{6, 8, 10, 12}));
  EXPECT_EQ(relflat::sub(b, a).values(), (std::vector<double>{4, 4, 4, 4}));
  EXPECT_EQ(relflat::hadamard(a, b).values(), (std::vector<double>{5, 12, 21, 32}));
  EXPECT_EQ(relflat::axpy(a, 2.0, b).values(), (std::vector<double>{11, 14, 17, 20}));
  EXPECT_EQ(relflat::transpose(a).values(), (std::vector<double>{1, 3, 2, 4}));
  EXPECT_EQ(relflat::dot(a, b), 70.0);
  EXPECT_EQ(relflat::sum(a), 10.0);
  EXPECT_EQ(relflat::max_abs(relflat::scale(a, -2.0)), 8.0);
  EXPECT_THROW(relflat::add(a, Tensor(Shape::matrix(2, 3))), relflat::DimensionError);
}

TEST(FrobeniusNorm, ZeroTensor) { EXPECT_EQ(relflat::frobenius_norm_sq(Tensor(Shape::matrix(3, 3))), 0.0); }

TEST(FrobeniusNorm, ThreeFour) { EXPECT_EQ(relflat::frobenius_norm_sq(Tensor::from_rows({{3, 4}})), 25.0); }

TEST(FrobeniusNorm, MatchesLoop) {
  RngStream rng(5, 1);
  const Tensor t = fixture::normal_matrix(rng, 4, 5);
  double acc = 0.0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) acc += t(i, j) * t(i, j);
  EXPECT_NEAR(relflat::frobenius_norm_sq(t), acc, 1e-12);
}

TEST(Rademacher, EntriesSquareToOne) {
  RngStream rng(1, 2);
  const Tensor v = relflat::rademacher(rng, 1000);
  for (double e : v.data()) EXPECT_EQ(e * e, 1.0);
}

TEST(Rademacher, MeanAndVarianceOverManyDraws) {
  RngStream rng(11, 2);
  const std::size_t n = 100000;
  const Tensor v = relflat::rademacher(rng, n);
  const double mean = relflat::sum(v) / double(n);
  EXPECT_GE(mean, -0.02);
  EXPECT_LE(mean, 0.02);
  double var = 0.0;
  for (double e : v.data()) var += (e - mean) * (e - mean);
  var /= double(n);
  EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(Rademacher, SameStreamIsBitIdentical) {
  RngStream a(42, 9), b(42, 9);
  EXPECT_EQ(relflat::rademacher(a, 257).values(), relflat::rademacher(b, 257).values());
}

TEST(Rademacher, ZeroLengthIsAnError) {
  RngStream rng(1, 1);
  EXPECT_THROW(relflat::rademacher(rng, 0), relflat::DimensionError);
}

TEST(Rademacher, ShapedDraw) {
  RngStream rng(1, 1);
  const Tensor v = relflat::rademacher(rng, Shape::matrix(3, 4));
  EXPECT_EQ(v.shape(), Shape::matrix(3, 4));
}

TEST(RngStream, DrawDependsOnlyOnSeedStreamAndIndex) {
  RngStream a(7, 3), b(7, 3);
  for (int i = 0; i < 10; ++i) a.next_u64();
  b.seek(10);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  // A different stream id gives a different sequence.
  RngStream c(7, 4);
  c.seek(11);
  EXPECT_NE(a.next_u64(), c.next_u64());
}

TEST(RngStream, ForkDoesNotMoveParent) {
  RngStream parent(1, 1);
  parent.next_u64();
  const auto pos = parent.position();
  RngStream child = parent.fork(5);
  child.next_u64();
  EXPECT_EQ(parent.position(), pos);
  EXPECT_NE(child.stream(), parent.stream());
}

TEST(RngStream, UniformAndBelowRanges) {
  RngStream rng(2, 2);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(rng.below(7), 7u);
  }
}

TEST(RngStream, PermutationIsBijection) {
  RngStream rng(3, 3);
  auto p = rng.permutation(50);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(p[i], i);
}

TEST(RngStream, NormalMoments) {
  RngStream rng(8, 8);
  const int n = 50000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.02);
  EXPECT_NEAR(s2 / n, 1.0, 0.03);
}
