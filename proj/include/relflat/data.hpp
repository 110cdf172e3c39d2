#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "relflat/rng.hpp"
#include "relflat/tensor.hpp"

namespace relflat {

struct Dataset {
  std::string name;
  Tensor x;                     // n x p
  Tensor y;                     // length n class indices, or n x q targets
  std::size_t num_classes = 0;  // 0 for regression targets

  std::size_t size() const { return x.rows(); }
  std::size_t features() const { return x.cols(); }
  void validate() const;
  Dataset subset(const std::vector<std::size_t>& indices) const;
};

// Two interleaved half circles: class 0 on (cos t, sin t), class 1 on
// (1 - cos t, 1/2 - sin t), t ~ U[0, pi], plus N(0, noise^2) per coordinate.
// Exactly n/2 points per class; n must be even.
Dataset gen_two_moons(std::size_t n, double noise, std::uint64_t seed);

// Reassign round(fraction * n) distinct labels to a different class.
std::size_t flip_labels(Dataset& ds, double fraction, RngStream& rng);

// Big-endian IDX pair: images 0x00000803 (n, rows, cols) of unsigned bytes,
// labels 0x00000801 (n). Pixels are scaled to [0, 1] and flattened.
Dataset read_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t rows,
               std::size_t cols, const std::vector<std::uint8_t>& pixels, const std::vector<std::uint8_t>& label_bytes);

// Header row, comma separated, last column is the label. Labels must be
// non-negative integers when `classification` is set.
Dataset read_csv(const std::filesystem::path& path, bool classification = true);

struct Standardizer {
  Tensor mean;    // 1 x p
  Tensor stddev;  // 1 x p, population standard deviation (1 where constant)

  static Standardizer fit(const Dataset& train);
  void apply(Dataset& ds) const;
};

// Deterministic split: a pure function of (seed, train_fraction).
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_fraction, std::uint64_t seed);

struct BatchPlan {
  std::size_t batch_size = 64;
  RngStream shuffle{0, 0x73687566ULL};
  bool drop_last = false;
};

struct Batch {
  Tensor x;
  Tensor y;
  std::vector<std::size_t> indices;
};

// Shuffled minibatches for one epoch; the permutation depends only on
// (plan.shuffle, epoch).
std::vector<Batch> batches(const Dataset& ds, const BatchPlan& plan, std::uint64_t epoch);

}  // namespace relflat
