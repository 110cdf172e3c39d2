#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "relflat/tensor.hpp"

namespace relflat {

// Counter-based random stream. The value of draw k depends only on
// (seed, stream id, k), so substreams never perturb each other and replay
// is independent of call interleaving elsewhere in the program.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t stream = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t position() const { return counter_; }
  void seek(std::uint64_t position) { counter_ = position; }

  // Independent child stream; the parent's position is untouched.
  RngStream fork(std::uint64_t child_id) const;

  std::uint64_t next_u64();
  // Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller; consumes two draws.
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Uniformly random permutation of [0, n).
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Vector of n independent ±1 entries.
Tensor rademacher(RngStream& rng, std::size_t n);
// Same distribution, shaped like `shape`.
Tensor rademacher(RngStream& rng, Shape shape);

}  // namespace relflat
