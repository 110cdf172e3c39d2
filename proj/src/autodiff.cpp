#include "relflat/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "relflat/errors.hpp"

namespace relflat::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kMatMul: return "matmul";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kTranspose: return "transpose";
    case Op::kTanh: return "tanh";
    case Op::kSoftplus: return "softplus";
    case Op::kRelu: return "relu";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSquare: return "square";
    case Op::kDot: return "dot";
    case Op::kSlice: return "slice";
    case Op::kEmbed: return "embed";
  }
  return "?";
}

const Tensor& Var::value() const { return graph_->node(id_).value; }
const Shape& Var::shape() const { return graph_->node(id_).value.shape(); }
bool Var::requires_grad() const { return graph_->node(id_).requires_grad; }
int Var::generation() const { return graph_->node(id_).generation; }

std::shared_ptr<Graph> Graph::create() { return std::shared_ptr<Graph>(new Graph()); }

Var Graph::parameter(Tensor value) {
  Node n;
  n.op = Op::kLeaf;
  n.requires_grad = true;
  n.value = std::move(value);
  return record(std::move(n));
}

Var Graph::constant(Tensor value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return record(std::move(n));
}

Var Graph::record(Node n) {
  require_finite(n.value, op_name(n.op));
  int gen = recording_generation_;
  bool rg = n.op == Op::kLeaf;
  for (std::int32_t p : {n.a, n.b}) {
    if (p < 0) continue;
    const Node& parent = nodes_[static_cast<std::size_t>(p)];
    gen = std::max<int>(gen, parent.generation);
    rg = rg || parent.requires_grad;
  }
  n.generation = static_cast<std::uint8_t>(gen);
  n.requires_grad = rg;
  nodes_.push_back(std::move(n));
  return handle(static_cast<std::int32_t>(nodes_.size() - 1));
}

void Graph::truncate(std::size_t size) {
  if (size < nodes_.size()) nodes_.resize(size);
}

namespace {

void require_same_graph(const Var& a, const Var& b, const char* op) {
  if (!a.valid() || !b.valid()) throw Error(std::string(op) + ": invalid Var");
  if (a.graph_ptr() != b.graph_ptr()) throw Error(std::string(op) + ": operands live on different graphs");
}

Var unary(Op op, const Var& a, Tensor value) {
  Node n;
  n.op = op;
  n.a = a.id();
  n.value = std::move(value);
  return a.graph().record(std::move(n));
}

Var binary(Op op, const Var& a, const Var& b, Tensor value) {
  Node n;
  n.op = op;
  n.a = a.id();
  n.b = b.id();
  n.value = std::move(value);
  return a.graph().record(std::move(n));
}

template <class F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.shape());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  return out;
}

// Elementwise binary op allowing either side to be a rank-0 scalar.
template <class F>
Tensor broadcast(const Tensor& x, const Tensor& y, F f, const char* op) {
  if (x.shape() == y.shape()) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(x[i], y[i]);
    return out;
  }
  if (x.rank() == 0) {
    const double s = x[0];
    return map(y, [&](double v) { return f(s, v); });
  }
  if (y.rank() == 0) {
    const double s = y[0];
    return map(x, [&](double v) { return f(v, s); });
  }
  throw DimensionError(std::string(op) + ": shape mismatch " + to_string(x.shape()) + " vs " +
                       to_string(y.shape()));
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_graph(a, b, "add");
  return binary(Op::kAdd, a, b, broadcast(a.value(), b.value(), std::plus<>{}, "add"));
}

Var sub(const Var& a, const Var& b) {
  require_same_graph(a, b, "sub");
  return binary(Op::kSub, a, b, broadcast(a.value(), b.value(), std::minus<>{}, "sub"));
}

Var mul(const Var& a, const Var& b) {
  require_same_graph(a, b, "mul");
  return binary(Op::kMul, a, b, broadcast(a.value(), b.value(), std::multiplies<>{}, "mul"));
}

Var scale(const Var& a, double factor) {
  Node n;
  n.op = Op::kScale;
  n.a = a.id();
  n.factor = factor;
  n.value = relflat::scale(a.value(), factor);
  return a.graph().record(std::move(n));
}

Var matmul(const Var& a, const Var& b) {
  require_same_graph(a, b, "matmul");
  return binary(Op::kMatMul, a, b, relflat::matmul(a.value(), b.value()));
}

Var sum(const Var& a) { return unary(Op::kSum, a, Tensor::scalar(relflat::sum(a.value()))); }

Var mean(const Var& a) {
  const auto n = static_cast<double>(a.value().numel());
  return unary(Op::kMean, a, Tensor::scalar(relflat::sum(a.value()) / n));
}

Var transpose(const Var& a) { return unary(Op::kTranspose, a, relflat::transpose(a.value())); }

Var tanh(const Var& a) {
  return unary(Op::kTanh, a, map(a.value(), [](double x) { return std::tanh(x); }));
}

Var softplus(const Var& a) {
  return unary(Op::kSoftplus, a, map(a.value(), [](double x) {
                 return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
               }));
}

Var relu(const Var& a) {
  return unary(Op::kRelu, a, map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }));
}

Var exp(const Var& a) {
  return unary(Op::kExp, a, map(a.value(), [](double x) { return std::exp(x); }));
}

Var log(const Var& a) {
  return unary(Op::kLog, a, map(a.value(), [](double x) { return std::log(x); }));
}

Var square(const Var& a) {
  return unary(Op::kSquare, a, map(a.value(), [](double x) { return x * x; }));
}

Var dot(const Var& a, const Var& b) {
  require_same_graph(a, b, "dot");
  return binary(Op::kDot, a, b, Tensor::scalar(relflat::dot(a.value(), b.value())));
}

Var slice(const Var& a, std::size_t row0, std::size_t rows, std::size_t col0, std::size_t cols) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw RankError("slice needs a matrix, got " + to_string(x.shape()));
  if (row0 + rows > x.rows() || col0 + cols > x.cols() || rows == 0 || cols == 0)
    throw RangeError("slice out of range for " + to_string(x.shape()));
  Tensor out(Shape::matrix(rows, cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = x(row0 + i, col0 + j);
  Node n;
  n.op = Op::kSlice;
  n.a = a.id();
  n.row0 = row0;
  n.col0 = col0;
  n.aux = x.shape();
  n.value = std::move(out);
  return a.graph().record(std::move(n));
}

Var entry(const Var& a, std::size_t row, std::size_t col) {
  const Var s = slice(a, row, 1, col, 1);
  // Reinterpret the 1x1 block as a scalar through a sum (cheap, exact).
  return sum(s);
}

namespace {

Var embed(const Var& a, Shape target, std::size_t row0, std::size_t col0) {
  const Tensor& x = a.value();
  Tensor out(target);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(row0 + i, col0 + j) = x(i, j);
  Node n;
  n.op = Op::kEmbed;
  n.a = a.id();
  n.row0 = row0;
  n.col0 = col0;
  n.aux = target;
  n.value = std::move(out);
  return a.graph().record(std::move(n));
}

// Adjoints of every target, as node ids on `g` (-1 when the root does not
// depend on the target). Nodes created here are appended after `root`.
std::vector<std::int32_t> backward(const Var& root, std::span<const Var> wrt) {
  Graph& g = root.graph();
  const Node& r = g.node(root.id());
  if (r.value.rank() != 0)
    throw RankError("grad needs a scalar, got " + to_string(r.value.shape()));
  const int next_generation = r.generation + 1;
  if (next_generation > kMaxGeneration)
    throw DepthError("differentiation depth " + std::to_string(next_generation) + " exceeds " +
                     std::to_string(kMaxGeneration));

  std::vector<std::int32_t> result(wrt.size(), -1);
  std::int32_t lo = root.id();
  for (const Var& w : wrt) {
    if (!w.valid() || w.graph_ptr() != root.graph_ptr())
      throw Error("grad target lives on a different graph");
    if (!w.requires_grad()) throw Error("grad target does not require grad");
    lo = std::min(lo, w.id());
  }
  const std::int32_t hi = root.id();
  const auto span = static_cast<std::size_t>(hi - lo + 1);
  auto local = [lo](std::int32_t id) { return static_cast<std::size_t>(id - lo); };

  std::vector<char> reach(span, 0);
  for (const Var& w : wrt)
    if (w.id() <= hi) reach[local(w.id())] = 1;
  for (std::int32_t i = lo; i <= hi; ++i) {
    const Node& n = g.node(i);
    for (std::int32_t p : {n.a, n.b})
      if (p >= lo && reach[local(p)]) reach[local(i)] = 1;
  }
  if (!reach[local(hi)]) return result;

  Graph::GenerationScope scope(g, next_generation);
  std::vector<std::int32_t> adjoint(span, -1);
  adjoint[local(hi)] = g.constant(1.0).id();

  auto accumulate = [&](std::int32_t parent, Var contribution) {
    if (parent < lo || !reach[local(parent)]) return;
    const Shape& target = g.node(parent).value.shape();
    if (target.rank == 0 && contribution.shape().rank != 0) contribution = sum(contribution);
    std::int32_t& slot = adjoint[local(parent)];
    slot = slot < 0 ? contribution.id() : add(g.handle(slot), contribution).id();
  };
  auto wanted = [&](std::int32_t parent) { return parent >= lo && reach[local(parent)]; };

  for (std::int32_t i = hi; i >= lo; --i) {
    const std::int32_t adj_id = adjoint[local(i)];
    if (adj_id < 0) continue;
    // Copy the fields we need: recording below may reallocate the node list.
    const Node& ref = g.node(i);
    const Op op = ref.op;
    const std::int32_t pa = ref.a, pb = ref.b;
    const double factor = ref.factor;
    const std::size_t row0 = ref.row0, col0 = ref.col0;
    const Shape aux = ref.aux;
    const Var G = g.handle(adj_id);
    const Var Y = g.handle(i);
    const Var A = pa >= 0 ? g.handle(pa) : Var();
    const Var B = pb >= 0 ? g.handle(pb) : Var();

    switch (op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kAdd:
        if (wanted(pa)) accumulate(pa, G);
        if (wanted(pb)) accumulate(pb, G);
        break;
      case Op::kSub:
        if (wanted(pa)) accumulate(pa, G);
        if (wanted(pb)) accumulate(pb, scale(G, -1.0));
        break;
      case Op::kMul:
        if (wanted(pa)) accumulate(pa, mul(G, B));
        if (wanted(pb)) accumulate(pb, mul(G, A));
        break;
      case Op::kScale:
        if (wanted(pa)) accumulate(pa, scale(G, factor));
        break;
      case Op::kMatMul:
        if (wanted(pa)) accumulate(pa, matmul(G, transpose(B)));
        if (wanted(pb)) accumulate(pb, matmul(transpose(A), G));
        break;
      case Op::kSum:
        if (wanted(pa)) accumulate(pa, mul(G, g.constant(Tensor::ones(A.shape()))));
        break;
      case Op::kMean:
        if (wanted(pa)) {
          const auto n = static_cast<double>(A.value().numel());
          accumulate(pa, mul(scale(G, 1.0 / n), g.constant(Tensor::ones(A.shape()))));
        }
        break;
      case Op::kTranspose:
        if (wanted(pa)) accumulate(pa, transpose(G));
        break;
      case Op::kTanh:
        // d tanh = 1 - tanh^2
        if (wanted(pa)) accumulate(pa, sub(G, mul(G, square(Y))));
        break;
      case Op::kSoftplus:
        // d softplus(x) = sigmoid(x) = exp(x - softplus(x))
        if (wanted(pa)) accumulate(pa, mul(G, exp(sub(A, Y))));
        break;
      case Op::kRelu:
        // Second derivative taken as zero everywhere, including the kink.
        if (wanted(pa)) {
          Tensor mask(A.shape());
          for (std::size_t k = 0; k < mask.numel(); ++k) mask[k] = A.value()[k] > 0.0 ? 1.0 : 0.0;
          accumulate(pa, mul(G, g.constant(std::move(mask))));
        }
        break;
      case Op::kExp:
        if (wanted(pa)) accumulate(pa, mul(G, Y));
        break;
      case Op::kLog:
        // 1/x written as exp(-log x) to stay within the primitive set.
        if (wanted(pa)) accumulate(pa, mul(G, exp(scale(Y, -1.0))));
        break;
      case Op::kSquare:
        if (wanted(pa)) accumulate(pa, mul(G, scale(A, 2.0)));
        break;
      case Op::kDot:
        if (wanted(pa)) accumulate(pa, mul(G, B));
        if (wanted(pb)) accumulate(pb, mul(G, A));
        break;
      case Op::kSlice:
        if (wanted(pa)) accumulate(pa, embed(G, aux, row0, col0));
        break;
      case Op::kEmbed:
        if (wanted(pa)) accumulate(pa, slice(G, row0, A.shape().rows(), col0, A.shape().cols()));
        break;
    }
  }

  for (std::size_t k = 0; k < wrt.size(); ++k)
    if (wrt[k].id() <= hi) result[k] = adjoint[local(wrt[k].id())];
  return result;
}

}  // namespace

std::vector<Tensor> grad(const Var& scalar, std::span<const Var> wrt) {
  Graph& g = scalar.graph();
  const std::size_t mark = g.size();
  const auto ids = backward(scalar, wrt);
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (std::size_t k = 0; k < wrt.size(); ++k)
    out.push_back(ids[k] < 0 ? Tensor::zeros(wrt[k].shape()) : g.node(ids[k]).value);
  g.truncate(mark);
  return out;
}

std::vector<Var> grad_recorded(const Var& scalar, std::span<const Var> wrt) {
  Graph& g = scalar.graph();
  const auto ids = backward(scalar, wrt);
  std::vector<Var> out;
  out.reserve(wrt.size());
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    if (ids[k] >= 0) {
      out.push_back(g.handle(ids[k]));
    } else {
      Graph::GenerationScope scope(g, scalar.generation() + 1);
      out.push_back(g.constant(Tensor::zeros(wrt[k].shape())));
    }
  }
  return out;
}

namespace {

Var probe(const Var& gradient, const Var& wrt, const Tensor& v) {
  if (!(v.shape() == wrt.shape()))
    throw DimensionError("hvp: vector shape " + to_string(v.shape()) + " does not match " +
                         to_string(wrt.shape()));
  return dot(gradient, gradient.graph().constant(v));
}

}  // namespace

Tensor hvp_from_gradient(const Var& gradient, const Var& wrt, const Tensor& v) {
  Graph& g = gradient.graph();
  const std::size_t mark = g.size();
  const Var s = probe(gradient, wrt, v);
  const Var targets[] = {wrt};
  Tensor out = grad(s, targets)[0];
  g.truncate(mark);
  return out;
}

Var hvp_from_gradient_recorded(const Var& gradient, const Var& wrt, const Tensor& v) {
  const Var s = probe(gradient, wrt, v);
  const Var targets[] = {wrt};
  return grad_recorded(s, targets)[0];
}

Tensor hvp(const Var& scalar, const Var& wrt, const Tensor& v) {
  if (!(v.shape() == wrt.shape()))
    throw DimensionError("hvp: vector shape " + to_string(v.shape()) + " does not match " +
                         to_string(wrt.shape()));
  Graph& g = scalar.graph();
  const std::size_t mark = g.size();
  const Var targets[] = {wrt};
  const Var gradient = grad_recorded(scalar, targets)[0];
  Tensor out = hvp_from_gradient(gradient, wrt, v);
  g.truncate(mark);
  return out;
}

Var hvp_recorded(const Var& scalar, const Var& wrt, const Tensor& v) {
  const Var targets[] = {wrt};
  const Var gradient = grad_recorded(scalar, targets)[0];
  return hvp_from_gradient_recorded(gradient, wrt, v);
}

Tensor layer_hessian(const Var& loss, const Var& w, std::size_t cap) {
  const std::size_t n = w.value().numel();
  if (n > cap)
    throw CapacityError("dense Hessian of " + std::to_string(n) + " parameters exceeds the cap of " +
                        std::to_string(cap) + "; use the trace-hutchinson path");
  Graph& g = loss.graph();
  const std::size_t mark = g.size();
  const Var targets[] = {w};
  const Var gradient = grad_recorded(loss, targets)[0];
  const std::size_t cols = w.shape().cols();
  Tensor h(Shape::matrix(n, n));
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t inner = g.size();
    const Var s = w.shape().rank == 2 ? entry(gradient, j / cols, j % cols)
                                      : dot(gradient, g.constant(Tensor::basis(w.shape(), j)));
    const Tensor column = grad(s, targets)[0];
    for (std::size_t i = 0; i < n; ++i) h(i, j) = column[i];
    g.truncate(inner);
  }
  g.truncate(mark);
  return h;
}

}  // namespace relflat::ad
