#pragma once

// Timing of the three flatness modes across layer sizes, behind
// `relflat bench`.

#include <cstdint>
#include <string>
#include <vector>

#include "relflat/flatness.hpp"

namespace relflat {

// A measured layer of d output rows and m inputs.
struct BenchSize {
  std::size_t d = 0;
  std::size_t m = 0;
  std::size_t params() const { return d * m; }
  std::string to_string() const { return std::to_string(d) + "x" + std::to_string(m); }
};

// "8x8,16x16,32x32" -> sizes. Throws ConfigError on malformed input.
std::vector<BenchSize> parse_bench_sizes(const std::string& text);

struct BenchConfig {
  std::vector<BenchSize> sizes;
  std::size_t repeats = 5;
  std::size_t batch_size = 256;  // large enough that arithmetic, not per-node overhead, dominates
  // Network input width; 0 uses m, so every layer of the m-m-d network
  // costs O(d*m) per pass and the measured layer sets the scale.
  std::size_t input_width = 0;
  std::size_t samples = 10;     // Hutchinson probes V
  std::uint64_t seed = 0;
  // Each timed sample repeats the measurement until it spans at least this
  // long and reports the per-call average (after one warm-up call).
  double min_sample_ms = 20.0;
  std::vector<FlatnessMode> modes{FlatnessMode::kNeuronwise, FlatnessMode::kTraceExact,
                                  FlatnessMode::kTraceHutchinson};

  void validate() const;
};

struct BenchRow {
  BenchSize size;
  FlatnessMode mode = FlatnessMode::kNeuronwise;
  double mean_ms = 0.0;
  double median_ms = 0.0;
  std::vector<double> samples_ms;  // per-call times
  std::size_t calls_per_sample = 1;
};

// One row per (size, mode) in the order given; repeats run serially.
std::vector<BenchRow> run_bench(const BenchConfig& cfg);

inline constexpr const char* kBenchHeader = "size,params,mode,mean_ms,median_ms";
std::string bench_csv(const std::vector<BenchRow>& rows);

// Median-time growth between two sizes, normalized to one doubling of the
// parameter count d*m: (t_b / t_a)^(log 2 / log(p_b / p_a)).
double ratio_per_doubling(const BenchRow& a, const BenchRow& b);

}  // namespace relflat
