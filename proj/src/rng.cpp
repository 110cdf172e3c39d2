#include "relflat/rng.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "relflat/errors.hpp"

namespace relflat {

namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), key_(mix64(mix64(seed + kGolden) ^ mix64(stream * kGolden + 1))) {}

RngStream RngStream::fork(std::uint64_t child_id) const {
  return RngStream(seed_, mix64(stream_ ^ mix64(child_id + 0x632be59bd9b4e019ULL)));
}

std::uint64_t RngStream::next_u64() {
  const std::uint64_t x = key_ + (counter_++) * kGolden;
  return mix64(mix64(x) ^ key_);
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::normal() {
  // 1 - u lies in (0, 1], keeping log finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n == 0) throw RangeError("RngStream::below(0)");
  // Rejection keeps the result exactly uniform.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

std::vector<std::size_t> RngStream::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(below(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

Tensor rademacher(RngStream& rng, std::size_t n) { return rademacher(rng, Shape::vector(n)); }

Tensor rademacher(RngStream& rng, Shape shape) {
  if (shape.numel() == 0) throw DimensionError("rademacher: empty dimension");
  Tensor t(shape);
  for (double& v : t.data()) v = (rng.next_u64() >> 63) ? 1.0 : -1.0;
  return t;
}

}  // namespace relflat
