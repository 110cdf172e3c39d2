#include "relflat/bench.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "relflat/errors.hpp"
#include "relflat/model.hpp"

namespace relflat {

namespace {

constexpr std::uint64_t kBenchStream = 0x62656e63ULL;

std::size_t parse_dim(std::string_view s, const std::string& whole) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || v == 0)
    throw ConfigError("sizes: malformed entry in '" + whole + "' (expected DxM, e.g. 8x8)");
  return v;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<BenchSize> parse_bench_sizes(const std::string& text) {
  std::vector<BenchSize> out;
  std::string_view rest(text);
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const std::string_view item = rest.substr(0, comma);
    const auto x = item.find('x');
    if (x == std::string_view::npos)
      throw ConfigError("sizes: malformed entry in '" + text + "' (expected DxM, e.g. 8x8)");
    out.push_back({parse_dim(item.substr(0, x), text), parse_dim(item.substr(x + 1), text)});
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
  if (out.empty()) throw ConfigError("sizes: at least one size is required");
  return out;
}

void BenchConfig::validate() const {
  if (sizes.empty()) throw ConfigError("sizes: at least one size is required");
  if (repeats == 0) throw ConfigError("repeats: must be at least 1");
  if (batch_size == 0) throw ConfigError("batch_size: must be at least 1");
  if (samples == 0) throw ConfigError("samples: must be at least 1");
  if (!(min_sample_ms >= 0.0)) throw ConfigError("min_sample_ms: must be non-negative");
  for (const auto& s : sizes)
    for (FlatnessMode mode : modes)
      if (mode != FlatnessMode::kTraceHutchinson && s.params() > ad::kDefaultDenseCap)
        throw CapacityError("size " + s.to_string() + " exceeds the dense cap of " +
                            std::to_string(ad::kDefaultDenseCap) + " parameters; use trace-hutchinson");
}

std::vector<BenchRow> run_bench(const BenchConfig& cfg) {
  cfg.validate();
  std::vector<BenchRow> rows;
  using Clock = std::chrono::steady_clock;
  for (std::size_t si = 0; si < cfg.sizes.size(); ++si) {
    const BenchSize size = cfg.sizes[si];
    const std::size_t p = cfg.input_width ? cfg.input_width : size.m;
    MlpSpec spec;
    spec.widths = {p, size.m, size.d};
    spec.activation = Activation::kTanh;
    spec.loss = size.d >= 2 ? LossKind::kCrossEntropy : LossKind::kMse;
    RngStream rng(cfg.seed, kBenchStream + si);
    const ModelState state = init_model(spec, rng);
    Tensor x = Tensor::zeros(Shape::matrix(cfg.batch_size, p));
    for (auto& v : x.data()) v = rng.normal();
    Tensor y = Tensor::zeros(Shape::vector(cfg.batch_size));
    for (auto& v : y.data()) v = spec.loss == LossKind::kCrossEntropy ? double(rng.below(size.d)) : rng.normal();

    for (FlatnessMode mode : cfg.modes) {
      BenchRow row;
      row.size = size;
      row.mode = mode;
      FlatnessConfig fc;
      fc.mode = mode;
      fc.samples = cfg.samples;
      fc.rng = RngStream(cfg.seed, kHutchinsonStream);
      auto once = [&] {
        const LossRecord rec = forward_loss(state, x, y);
        const KappaReport rep = measure_kappa(rec.loss, rec.params.weights[spec.flatness_index() - 1], fc);
        if (!std::isfinite(rep.kappa)) throw NumericError("bench: non-finite kappa");
      };
      auto timed = [&](std::size_t calls) {
        const auto t0 = Clock::now();
        for (std::size_t c = 0; c < calls; ++c) once();
        return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      };
      const double warm = timed(1);
      row.calls_per_sample =
          std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(cfg.min_sample_ms / std::max(warm, 1e-3))));
      for (std::size_t r = 0; r < cfg.repeats; ++r)
        row.samples_ms.push_back(timed(row.calls_per_sample) / double(row.calls_per_sample));
      row.mean_ms = std::accumulate(row.samples_ms.begin(), row.samples_ms.end(), 0.0) / double(cfg.repeats);
      row.median_ms = median(row.samples_ms);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = kBenchHeader;
  out += '\n';
  char buf[64];
  for (const auto& r : rows) {
    out += r.size.to_string() + ',' + std::to_string(r.size.params()) + ',' + to_string(r.mode) + ',';
    std::snprintf(buf, sizeof buf, "%.4f,%.4f\n", r.mean_ms, r.median_ms);
    out += buf;
  }
  return out;
}

double ratio_per_doubling(const BenchRow& a, const BenchRow& b) {
  const double growth = double(b.size.params()) / double(a.size.params());
  if (!(growth > 1.0)) throw RangeError("ratio_per_doubling: sizes must grow");
  return std::pow(b.median_ms / a.median_ms, std::log(2.0) / std::log(growth));
}

}  // namespace relflat
