#pragma once

// Reverse-mode differentiation on an append-only graph.
//
// Backward rules are themselves expressed with recorded operations, so the
// gradient of a scalar can be kept on the graph (grad_recorded) and
// differentiated again. Every node carries a generation: user operations
// are generation 0, nodes written while differentiating a generation-k
// scalar are generation k+1. Generation kMaxGeneration is the deepest
// level that can be produced; differentiating a scalar that already sits
// at that level throws DepthError.

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "relflat/tensor.hpp"

namespace relflat::ad {

inline constexpr int kMaxGeneration = 3;
inline constexpr std::size_t kDefaultDenseCap = 4096;

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,  // multiplication by a constant scalar
  kMatMul,
  kSum,
  kMean,
  kTranspose,
  kTanh,
  kSoftplus,
  kRelu,
  kExp,
  kLog,
  kSquare,
  kDot,
  kSlice,
  kEmbed,  // adjoint of kSlice: zero-pad into a larger shape
};

const char* op_name(Op op);

class Graph;

class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  std::int32_t id() const { return id_; }
  Graph& graph() const { return *graph_; }
  const std::shared_ptr<Graph>& graph_ptr() const { return graph_; }

  const Tensor& value() const;
  const Shape& shape() const;
  bool requires_grad() const;
  int generation() const;

 private:
  friend class Graph;
  Var(std::shared_ptr<Graph> graph, std::int32_t id) : graph_(std::move(graph)), id_(id) {}

  std::shared_ptr<Graph> graph_;
  std::int32_t id_ = -1;
};

struct Node {
  Op op = Op::kLeaf;
  std::int32_t a = -1;
  std::int32_t b = -1;
  bool requires_grad = false;
  std::uint8_t generation = 0;
  double factor = 0.0;          // kScale
  std::size_t row0 = 0;         // kSlice / kEmbed offsets
  std::size_t col0 = 0;
  Shape aux;                    // kSlice: source shape; kEmbed: target shape
  Tensor value;
};

class Graph : public std::enable_shared_from_this<Graph> {
 public:
  static std::shared_ptr<Graph> create();

  Var parameter(Tensor value);
  Var constant(Tensor value);
  Var constant(double value) { return constant(Tensor::scalar(value)); }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)]; }
  int recording_generation() const { return recording_generation_; }

  // Internal: append a node and return its handle.
  Var record(Node node);
  Var handle(std::int32_t id) { return Var(shared_from_this(), id); }
  // Internal: drop every node with id >= size. Used to discard the
  // transient graph of a non-recorded backward pass.
  void truncate(std::size_t size);

  class GenerationScope {
   public:
    GenerationScope(Graph& g, int generation) : g_(g), saved_(g.recording_generation_) {
      g_.recording_generation_ = generation;
    }
    ~GenerationScope() { g_.recording_generation_ = saved_; }
    GenerationScope(const GenerationScope&) = delete;
    GenerationScope& operator=(const GenerationScope&) = delete;

   private:
    Graph& g_;
    int saved_;
  };

 private:
  Graph() = default;
  std::vector<Node> nodes_;
  int recording_generation_ = 0;
};

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var matmul(const Var& a, const Var& b);
Var sum(const Var& a);
Var mean(const Var& a);
Var transpose(const Var& a);
Var tanh(const Var& a);
Var softplus(const Var& a);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var dot(const Var& a, const Var& b);
// Sub-block [row0, row0+rows) x [col0, col0+cols) of a matrix.
Var slice(const Var& a, std::size_t row0, std::size_t rows, std::size_t col0, std::size_t cols);
// Single entry of a matrix as a scalar.
Var entry(const Var& a, std::size_t row, std::size_t col);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

// Gradient values of `scalar` with respect to each target. The backward
// pass is discarded afterwards.
std::vector<Tensor> grad(const Var& scalar, std::span<const Var> wrt);
// Gradients kept on the graph for further differentiation.
std::vector<Var> grad_recorded(const Var& scalar, std::span<const Var> wrt);

// H v, where H is the Hessian of `scalar` with respect to `wrt`.
Tensor hvp(const Var& scalar, const Var& wrt, const Tensor& v);
Var hvp_recorded(const Var& scalar, const Var& wrt, const Tensor& v);
// Same, reusing a gradient obtained from grad_recorded(scalar, wrt).
Tensor hvp_from_gradient(const Var& gradient, const Var& wrt, const Tensor& v);
Var hvp_from_gradient_recorded(const Var& gradient, const Var& wrt, const Tensor& v);

// Dense Hessian of `loss` with respect to the flattened (row-major) entries
// of `w`, assembled column by column from basis-vector products. Throws
// CapacityError when w has more than `cap` entries.
Tensor layer_hessian(const Var& loss, const Var& w, std::size_t cap = kDefaultDenseCap);

}  // namespace relflat::ad
