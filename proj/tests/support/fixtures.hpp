#pragma once

#include <cstdint>
#include <vector>

#include "relflat/model.hpp"
#include "relflat/rng.hpp"
#include "relflat/tensor.hpp"

namespace fixture {

using relflat::Activation;
using relflat::LossKind;
using relflat::Tensor;

inline Tensor normal_matrix(relflat::RngStream& rng, std::size_t rows, std::size_t cols, double sd = 1.0) {
  Tensor t(relflat::Shape::matrix(rows, cols));
  for (auto& v : t.data()) v = sd * rng.normal();
  return t;
}

struct Case {
  relflat::ModelState state;
  Tensor x;
  Tensor y;
};

// Random model with non-zero biases and a matching random batch.
inline Case random_case(std::vector<std::size_t> widths, Activation act, LossKind loss, std::size_t batch,
                        std::uint64_t seed, bool biases = true) {
  relflat::MlpSpec spec;
  spec.widths = std::move(widths);
  spec.activation = act;
  spec.loss = loss;
  if (!biases) spec.use_bias.assign(spec.widths.size() - 1, false);
  relflat::RngStream rng(seed, 77);
  Case c;
  c.state = relflat::init_model(spec, rng);
  for (auto& w : c.state.weights)
    for (auto& v : w.data()) v *= 2.0;
  for (auto& b : c.state.biases)
    if (b)
      for (auto& v : b->data()) v = 0.3 * rng.normal();
  c.x = normal_matrix(rng, batch, spec.widths.front());
  const std::size_t q = spec.widths.back();
  if (loss == LossKind::kCrossEntropy) {
    c.y = Tensor(relflat::Shape::vector(batch));
    for (auto& v : c.y.data()) v = double(rng.below(q));
  } else {
    c.y = normal_matrix(rng, batch, q);
  }
  return c;
}

}  // namespace fixture
