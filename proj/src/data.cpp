#include "relflat/data.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "relflat/errors.hpp"

namespace relflat {

void Dataset::validate() const {
  if (x.rank() != 2) throw ValidationError("dataset features must be a matrix");
  const std::size_t n = x.rows();
  if (num_classes > 0) {
    if (y.numel() != n)
      throw ValidationError("dataset has " + std::to_string(n) + " rows but " + std::to_string(y.numel()) + " labels");
    for (std::size_t i = 0; i < n; ++i)
      if (y[i] < 0 || y[i] >= static_cast<double>(num_classes) || y[i] != std::floor(y[i]))
        throw ValidationError("label " + std::to_string(y[i]) + " at row " + std::to_string(i) +
                              " outside [0, " + std::to_string(num_classes) + ")");
  } else if (y.rows() != n) {
    throw ValidationError("dataset has " + std::to_string(n) + " rows but " + std::to_string(y.rows()) + " targets");
  }
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  const std::size_t p = x.cols();
  const std::size_t q = num_classes > 0 ? 1 : y.cols();
  std::vector<double> xs, ys;
  xs.reserve(indices.size() * p);
  ys.reserve(indices.size() * q);
  for (std::size_t i : indices) {
    if (i >= size()) throw RangeError("subset index " + std::to_string(i) + " outside dataset");
    for (std::size_t j = 0; j < p; ++j) xs.push_back(x(i, j));
    for (std::size_t j = 0; j < q; ++j) ys.push_back(y[i * q + j]);
  }
  Dataset out;
  out.name = name;
  out.num_classes = num_classes;
  out.x = Tensor::matrix(indices.size(), p, std::move(xs));
  out.y = num_classes > 0 ? Tensor::vector(std::move(ys)) : Tensor::matrix(indices.size(), q, std::move(ys));
  return out;
}

Dataset gen_two_moons(std::size_t n, double noise, std::uint64_t seed) {
  if (n == 0 || n % 2 != 0) throw ConfigError("two_moons needs an even, positive n");
  if (!(noise >= 0.0)) throw ConfigError("two_moons noise must be non-negative");
  RngStream angles(seed, 1);
  RngStream jitter(seed, 2);
  Tensor x(Shape::matrix(n, 2));
  Tensor y(Shape::vector(n));
  const std::size_t half = n / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = std::numbers::pi * angles.uniform();
    const bool upper = i < half;
    x(i, 0) = upper ? std::cos(t) : 1.0 - std::cos(t);
    x(i, 1) = upper ? std::sin(t) : 0.5 - std::sin(t);
    y[i] = upper ? 0.0 : 1.0;
  }
  if (noise > 0.0)
    for (double& v : x.data()) v += noise * jitter.normal();
  Dataset ds;
  ds.name = "two_moons";
  ds.x = std::move(x);
  ds.y = std::move(y);
  ds.num_classes = 2;
  return ds;
}

std::size_t flip_labels(Dataset& ds, double fraction, RngStream& rng) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("label noise fraction must lie in [0, 1]");
  if (ds.num_classes < 2) throw ConfigError("label noise needs a classification dataset");
  const std::size_t n = ds.size();
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  const auto order = rng.permutation(n);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = order[k];
    const auto shift = 1 + rng.below(ds.num_classes - 1);
    ds.y[i] = static_cast<double>((static_cast<std::size_t>(ds.y[i]) + shift) % ds.num_classes);
  }
  return count;
}

// --- IDX ----------------------------------------------------------------------

namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > b.size()) throw FormatError("truncated IDX header in " + path.string());
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

void put_be32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  os.write(bytes, 4);
}

std::string hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

}  // namespace

Dataset read_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto ib = read_bytes(images);
  const auto lb = read_bytes(labels);
  const std::uint32_t im = be32(ib, 0, images);
  if (im != kIdxImages) throw FormatError("IDX images magic " + hex(im) + " in " + images.string() + ", expected 0x00000803");
  const std::uint32_t lm = be32(lb, 0, labels);
  if (lm != kIdxLabels) throw FormatError("IDX labels magic " + hex(lm) + " in " + labels.string() + ", expected 0x00000801");
  const std::size_t n = be32(ib, 4, images);
  const std::size_t rows = be32(ib, 8, images);
  const std::size_t cols = be32(ib, 12, images);
  const std::size_t nl = be32(lb, 4, labels);
  if (n != nl)
    throw ValidationError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
  const std::size_t p = rows * cols;
  if (ib.size() != 16 + n * p) throw FormatError("IDX images payload size mismatch in " + images.string());
  if (lb.size() != 8 + n) throw FormatError("IDX labels payload size mismatch in " + labels.string());

  Tensor x(Shape::matrix(n, p));
  for (std::size_t i = 0; i < n * p; ++i) x[i] = static_cast<double>(ib[16 + i]) / 255.0;
  Tensor y(Shape::vector(n));
  std::size_t classes = 0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = lb[8 + i];
    classes = std::max<std::size_t>(classes, lb[8 + i] + 1u);
  }
  Dataset ds;
  ds.name = "idx";
  ds.x = std::move(x);
  ds.y = std::move(y);
  ds.num_classes = std::max<std::size_t>(classes, 2);
  return ds;
}

void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t rows,
               std::size_t cols, const std::vector<std::uint8_t>& pixels, const std::vector<std::uint8_t>& label_bytes) {
  const std::size_t n = label_bytes.size();
  if (pixels.size() != n * rows * cols) throw DimensionError("write_idx: pixel count does not match labels");
  std::ofstream im(images, std::ios::binary);
  std::ofstream lb(labels, std::ios::binary);
  if (!im || !lb) throw Error("write_idx: cannot open output files");
  put_be32(im, kIdxImages);
  put_be32(im, static_cast<std::uint32_t>(n));
  put_be32(im, static_cast<std::uint32_t>(rows));
  put_be32(im, static_cast<std::uint32_t>(cols));
  im.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  put_be32(lb, kIdxLabels);
  put_be32(lb, static_cast<std::uint32_t>(n));
  lb.write(reinterpret_cast<const char*>(label_bytes.data()), static_cast<std::streamsize>(n));
}

// --- CSV ----------------------------------------------------------------------

namespace {

double parse_double(std::string_view field, std::size_t line, const std::filesystem::path& path) {
  while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
  while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) field.remove_suffix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size())
    throw FormatError(path.string() + ":" + std::to_string(line) + ": cannot parse '" + std::string(field) + "'");
  return v;
}

}  // namespace

Dataset read_csv(const std::filesystem::path& path, bool classification) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header row");
  std::size_t columns = 1;
  for (char c : line) columns += c == ',';
  if (columns < 2) throw FormatError(path.string() + ": need at least one feature and a label column");

  std::vector<double> xs, ys;
  std::size_t rows = 0, lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::vector<double> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(parse_double(std::string_view(line).substr(start, comma - start), lineno, path));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (fields.size() != columns)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(columns) +
                        " fields, got " + std::to_string(fields.size()));
    xs.insert(xs.end(), fields.begin(), fields.end() - 1);
    ys.push_back(fields.back());
    ++rows;
  }
  if (rows == 0) throw FormatError(path.string() + ": no data rows");
  Dataset ds;
  ds.name = path.stem().string();
  ds.x = Tensor::matrix(rows, columns - 1, std::move(xs));
  if (classification) {
    double top = 0.0;
    for (double v : ys) {
      if (v < 0 || v != std::floor(v)) throw FormatError(path.string() + ": label " + std::to_string(v) + " is not a class index");
      top = std::max(top, v);
    }
    ds.num_classes = std::max<std::size_t>(static_cast<std::size_t>(top) + 1, 2);
    ds.y = Tensor::vector(std::move(ys));
  } else {
    ds.y = Tensor::matrix(rows, 1, std::move(ys));
  }
  ds.validate();
  return ds;
}

// --- normalization, splits, batching ------------------------------------------

Standardizer Standardizer::fit(const Dataset& train) {
  const std::size_t n = train.size(), p = train.features();
  if (n == 0) throw ValidationError("cannot standardize an empty dataset");
  Standardizer s{Tensor(Shape::matrix(1, p)), Tensor(Shape::matrix(1, p))};
  for (std::size_t j = 0; j < p; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += train.x(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (train.x(i, j) - mu) * (train.x(i, j) - mu);
    var /= static_cast<double>(n);
    s.mean[j] = mu;
    s.stddev[j] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  return s;
}

void Standardizer::apply(Dataset& ds) const {
  if (ds.features() != mean.numel()) throw DimensionError("standardizer feature count mismatch");
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < ds.features(); ++j) ds.x(i, j) = (ds.x(i, j) - mean[j]) / stddev[j];
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
  RngStream rng(seed, 0x73706c6974ULL);
  const auto order = rng.permutation(ds.size());
  const auto cut = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(ds.size())));
  std::vector<std::size_t> a(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut));
  std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(cut), order.end());
  return {ds.subset(a), ds.subset(b)};
}

std::vector<Batch> batches(const Dataset& ds, const BatchPlan& plan, std::uint64_t epoch) {
  if (plan.batch_size == 0) throw ConfigError("batch size must be at least 1");
  const std::size_t n = ds.size();
  if (plan.batch_size > n)
    throw ConfigError("batch size " + std::to_string(plan.batch_size) + " exceeds dataset size " + std::to_string(n));
  RngStream rng = plan.shuffle.fork(epoch);
  const auto order = rng.permutation(n);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < n; start += plan.batch_size) {
    const std::size_t end = std::min(n, start + plan.batch_size);
    if (plan.drop_last && end - start < plan.batch_size) break;
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
    Dataset part = ds.subset(idx);
    out.push_back({std::move(part.x), std::move(part.y), std::move(idx)});
  }
  return out;
}

}  // namespace relflat
