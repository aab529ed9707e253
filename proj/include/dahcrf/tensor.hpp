#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
// A Tape owns the nodes of one forward pass in creation order; backward
// replays the record in reverse, so parents are always visited after all
// of their consumers. Persistent parameters live outside the tape and
// accumulate gradients across backward calls until zero_grad().
//
// Scalar type is a template parameter: float for training, double for
// finite-difference oracle checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dahcrf/error.hpp"

namespace dahcrf {

using Shape = std::vector<int>;

inline int numel(const Shape& shape) {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Persistent learnable tensor: value plus gradient accumulator.
template <typename S>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;

  Parameter() = default;
  Parameter(std::string n, Shape s)
      : name(std::move(n)), shape(std::move(s)) {
    value.assign(numel(shape), S(0));
    grad.assign(value.size(), S(0));
  }

  int size() const { return static_cast<int>(value.size()); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }

  double grad_sq_norm() const {
    double s = 0;
    for (S g : grad) s += double(g) * double(g);
    return s;
  }
};

template <typename S>
void init_uniform(Parameter<S>& p, std::mt19937& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : p.value) v = static_cast<S>(dist(rng));
}

// uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))
template <typename S>
void init_fan_in(Parameter<S>& p, std::mt19937& rng, int fan_in) {
  double b = std::sqrt(1.0 / std::max(1, fan_in));
  init_uniform(p, rng, -b, b);
}

template <typename S>
class Tensor;

template <typename S>
class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<S> val;
    std::vector<S> grad;  // allocated iff needs_grad; scratch per backward
    bool needs_grad = false;
    std::function<void(Tape&)> back;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    leaf_cache_.clear();
  }

  int new_node(Shape shape, bool needs_grad) {
    Node n;
    n.shape = std::move(shape);
    n.val.assign(numel(n.shape), S(0));
    n.needs_grad = needs_grad && grad_enabled_;
    if (n.needs_grad) n.grad.assign(n.val.size(), S(0));
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }

  void set_back(int id, std::function<void(Tape&)> fn) {
    nodes_[id].back = std::move(fn);
  }

  void accumulate(int id, std::span<const S> g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    for (size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  Tensor<S> constant(Shape shape, std::vector<S> values) {
    if (static_cast<int>(values.size()) != numel(shape))
      throw ShapeError("constant: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    int id = new_node(std::move(shape), false);
    nodes_[id].val = std::move(values);
    return Tensor<S>(this, id);
  }

  Tensor<S> zeros(Shape shape) { return constant(std::move(shape), std::vector<S>(numel(shape), S(0))); }

  Tensor<S> scalar_const(S v) { return constant(Shape{}, {v}); }

  // Binds a parameter as a leaf node; cached so repeated binds within one
  // pass share the node and the gradient accumulates once per backward.
  Tensor<S> leaf(Parameter<S>& p) {
    auto it = leaf_cache_.find(&p);
    if (it != leaf_cache_.end()) return Tensor<S>(this, it->second);
    int id = new_node(p.shape, true);
    nodes_[id].val = p.value;
    if (nodes_[id].needs_grad) {
      Parameter<S>* pp = &p;
      set_back(id, [id, pp](Tape& t) {
        const auto& g = t.node(id).grad;
        for (size_t i = 0; i < g.size(); ++i) pp->grad[i] += g[i];
      });
    }
    leaf_cache_[&p] = id;
    return Tensor<S>(this, id);
  }

  // Embedding-row lookup; gradient scatters into the table row.
  Tensor<S> lookup(Parameter<S>& table, int row) {
    if (table.shape.size() != 2)
      throw ShapeError("lookup: table must be 2-D, got " + shape_str(table.shape));
    int rows = table.shape[0], cols = table.shape[1];
    if (row < 0 || row >= rows)
      throw std::out_of_range("lookup: row " + std::to_string(row) + " out of range [0," +
                              std::to_string(rows) + ") in " + table.name);
    int id = new_node(Shape{cols}, true);
    Node& n = nodes_[id];
    std::copy_n(table.value.begin() + static_cast<size_t>(row) * cols, cols, n.val.begin());
    if (n.needs_grad) {
      Parameter<S>* pp = &table;
      set_back(id, [id, pp, row, cols](Tape& t) {
        const auto& g = t.node(id).grad;
        for (int i = 0; i < cols; ++i) pp->grad[static_cast<size_t>(row) * cols + i] += g[i];
      });
    }
    return Tensor<S>(this, id);
  }

  // Seeds d(loss)/d(loss) = 1 and replays the record in reverse. Node
  // gradients are scratch (reset here); parameter gradients accumulate
  // across calls until Parameter::zero_grad().
  void backward(const Tensor<S>& loss);

 private:
  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> leaf_cache_;
};

// Handle to one tape node. Cheap to copy; valid while the tape lives.
template <typename S>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape<S>* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<S>& tape() const { return *tape_; }
  int id() const { return id_; }

  const Shape& shape() const { return tape_->node(id_).shape; }
  int size() const { return static_cast<int>(tape_->node(id_).val.size()); }
  std::span<const S> value() const { return tape_->node(id_).val; }
  std::span<const S> grad() const { return tape_->node(id_).grad; }
  bool needs_grad() const { return tape_->node(id_).needs_grad; }

  S operator[](int i) const { return tape_->node(id_).val[i]; }
  S scalar() const {
    if (size() != 1) throw ShapeError("scalar: tensor has shape " + shape_str(shape()));
    return tape_->node(id_).val[0];
  }
  std::vector<S> to_vector() const {
    auto v = value();
    return std::vector<S>(v.begin(), v.end());
  }

 private:
  Tape<S>* tape_ = nullptr;
  int id_ = -1;
};

template <typename S>
void Tape<S>::backward(const Tensor<S>& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  if (&loss.tape() != this) throw std::invalid_argument("backward: loss not on this tape");
  for (Node& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), S(0));
  Node& ln = nodes_[loss.id()];
  if (!ln.needs_grad) return;  // nothing reachable requires grad
  ln.grad[0] = S(1);
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.needs_grad && n.back) n.back(*this);
  }
}

namespace detail {

template <typename S>
Tape<S>& same_tape(const Tensor<S>& a, const Tensor<S>& b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("operands on different tapes");
  return a.tape();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra primitives.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  bool ng = a.needs_grad() || b.needs_grad();
  int id = t.new_node(a.shape(), ng);
  auto& out = t.node(id).val;
  auto av = a.value(), bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  if (ng)
    t.set_back(id, [id, ia = a.id(), ib = b.id()](Tape<S>& tp) {
      const auto& g = tp.node(id).grad;
      tp.accumulate(ia, g);
      tp.accumulate(ib, g);
    });
  return Tensor<S>(&t, id);
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  bool ng = a.needs_grad() || b.needs_grad();
  int id = t.new_node(a.shape(), ng);
  auto& out = t.node(id).val;
  auto av = a.value(), bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  if (ng)
    t.set_back(id, [id, ia = a.id(), ib = b.id()](Tape<S>& tp) {
      const auto& g = tp.node(id).grad;
      tp.accumulate(ia, g);
      auto& nb = tp.node(ib);
      if (nb.needs_grad)
        for (size_t i = 0; i < g.size(); ++i) nb.grad[i] -= g[i];
    });
  return Tensor<S>(&t, id);
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  bool ng = a.needs_grad() || b.needs_grad();
  int id = t.new_node(a.shape(), ng);
  auto& out = t.node(id).val;
  auto av = a.value(), bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  if (ng)
    t.set_back(id, [id, ia = a.id(), ib = b.id()](Tape<S>& tp) {
      const auto& g = tp.node(id).grad;
      auto& na = tp.node(ia);
      auto& nb = tp.node(ib);
      if (na.needs_grad)
        for (size_t i = 0; i < g.size(); ++i) na.grad[i] += g[i] * nb.val[i];
      if (nb.needs_grad)
        for (size_t i = 0; i < g.size(); ++i) nb.grad[i] += g[i] * na.val[i];
    });
  return Tensor<S>(&t, id);
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, double c) {
  Tape<S>& t = a.tape();
  int id = t.new_node(a.shape(), a.needs_grad());
  auto& out = t.node(id).val;
  auto av = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<S>(av[i] * c);
  if (a.needs_grad())
    t.set_back(id, [id, ia = a.id(), c](Tape<S>& tp) {
      const auto& g = tp.node(id).grad;
      auto& na = tp.node(ia);
      for (size_t i = 0; i < g.size(); ++i) na.grad[i] += static_cast<S>(g[i] * c);
    });
  return Tensor<S>(&t, id);
}

// Elementwise product with a fixed vector (dropout masks and the like).
template <typename S>
Tensor<S> mul_const(const Tensor<S>& a, std::vector<S> c) {
  Tape<S>& t = a.tape();
  if (static_cast<int>(c.size()) != a.size())
    throw ShapeError("mul_const: mask size " + std::to_string(c.size()) + " vs tensor " +
                     shape_str(a.shape()));
  int id = t.new_node(a.shape(), a.needs_grad());
  auto& out = t.node(id).val;
  auto av = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c[i];
  if (a.needs_grad())
    t.set_back(id, [id, ia = a.id(), c = std::move(c)](Tape<S>& tp) {
      const auto& g = tp.node(id).grad;
      auto& na = tp.node(ia);
      for (size_t i = 0; i < g.size(); ++i) na.grad[i] += g[i] * c[i];
    });
  return Tensor<S>(&t, id);
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw ShapeError("matmul: operands must be 2-D, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  int m = a.shape()[0], k = a.shape()[1];
  int k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  bool ng = a.needs_grad() || b.needs_grad();
  int id = t.new_node(Shape{m, n}, ng);
  auto& out = t.node(id).val;
  auto av = a.value(), bv = b.value();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      S aik = av[i * k + p];
      if (aik == S(0)) continue;
      for (int j = 0; j < n; ++j) out[i * n + j] += aik * bv[p * n + j];
    }
  if (ng)
    t.set_back(id, [id, ia = a.id(), ib = b.id(), m, k, n](Tape<S>& tp) {
      const auto& g = tp.node(id).grad;
      auto& na = tp.node(ia);
      auto& nb = tp.node(ib);
      if (na.needs_grad)  // dA = G * B^T
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            S s = 0;
            for (int j = 0; j < n; ++j) s += g[i * n + j] * nb.val[p * n + j];
            na.grad[i * k + p] += s;
          }
      if (nb.needs_grad)  // dB = A^T * G
        for (int p = 0; p < k; ++p)
          for (int j = 0; j < n; ++j) {
            S s = 0;
            for (int i = 0; i < m; ++i) s += na.val[i * k + p] * g[i * n + j];
            nb.grad[p * n + j] += s;
          }
    });
  return Tensor<S>(&t, id);
}

// Matrix-vector product W[m x n] * x[n] -> [m].
template <typename S>
Tensor<S> linear(const Tensor<S>& w, const Tensor<S>& x) {
  Tape<S>& t = detail::same_tape(w, x);
  if (w.shape().size() != 2 || x.shape().size() != 1)
    throw ShapeError("linear: need matrix and vector, got " + shape_str(w.shape()) + " and " +
                     shape_str(x.shape()));
  int m = w.shape()[0], n = w.shape()[1];
  if (n != x.shape()[0])
    throw ShapeError("linear: dimensions disagree: " + shape_str(w.shape()) + " vs " +
                     shape_str(x.shape()));
  bool ng = w.needs_grad() || x.needs_grad();
  int id = t.new_node(Shape{m}, ng);
  auto& out = t.node(id).val;
  auto wv = w.value(), xv = x.value();
  for (int i = 0; i < m; ++i) {
    S s = 0;
    for (int j = 0; j < n; ++j) s += wv[i * n + j] * xv[j];
    out[i] = s;
  }
  if (ng)
    t.set_back(id, [id, iw = w.id(), ix = x.id(), m, n](Tape<S>& tp) {
      const auto& g = tp.node(id).grad;
      auto& nw = tp.node(iw);
      auto& nx = tp.node(ix);
      if (nw.needs_grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) nw.grad[i * n + j] += g[i] * nx.val[j];
      if (nx.needs_grad)
        for (int j = 0; j < n; ++j) {
          S s = 0;
          for (int i = 0; i < m; ++i) s += nw.val[i * n + j] * g[i];
          nx.grad[j] += s;
        }
    });
  return Tensor<S>(&t, id);
}

// Row-vector times matrix: v[k] * M[k x d] -> [d].
template <typename S>
Tensor<S> vecmat(const Tensor<S>& v, const Tensor<S>& m) {
  Tape<S>& t = detail::same_tape(v, m);
  if (v.shape().size() != 1 || m.shape().size() != 2)
    throw ShapeError("vecmat: need vector and matrix, got " + shape_str(v.shape()) + " and " +
                     shape_str(m.shape()));
  int k = v.shape()[0], k2 = m.shape()[0], d = m.shape()[1];
  if (k != k2)
    throw ShapeError("vecmat: dimensions disagree: " + shape_str(v.shape()) + " vs " +
                     shape_str(m.shape()));
  bool ng = v.needs_grad() || m.needs_grad();
  int id = t.new_node(Shape{d}, ng);
  auto& out = t.node(id).val;
  auto vv = v.value(), mv = m.value();
  for (int i = 0; i < k; ++i) {
    S vi = vv[i];
    if (vi == S(0)) continue;
    for (int j = 0; j < d; ++j) out[j] += vi * mv[i * d + j];
  }
  if (ng)
    t.set_back(id, [id, iv = v.id(), im = m.id(), k, d](Tape<S>& tp) {
      const auto& g = tp.node(id).grad;
      auto& nv = tp.node(iv);
      auto& nm = tp.node(im);
      if (nv.needs_grad)
        for (int i = 0; i < k; ++i) {
          S s = 0;
          for (int j = 0; j < d; ++j) s += g[j] * nm.val[i * d + j];
          nv.grad[i] += s;
        }
      if (nm.needs_grad)
        for (int i = 0; i < k; ++i) {
          S vi = nv.val[i];
          for (int j = 0; j < d; ++j) nm.grad[i * d + j] += vi * g[j];
        }
    });
  return Tensor<S>(&t, id);
}

// Adds a vector to every row of a matrix.
template <typename S>
Tensor<S> add_rowwise(const Tensor<S>& m, const Tensor<S>& b) {
  Tape<S>& t = detail::same_tape(m, b);
  if (m.shape().size() != 2 || b.shape().size() != 1 || m.shape()[1] != b.shape()[0])
    throw ShapeError("add_rowwise: incompatible shapes " + shape_str(m.shape()) + " and " +
                     shape_str(b.shape()));
  int rows = m.shape()[0], cols = m.shape()[1];
  bool ng = m.needs_grad() || b.needs_grad();
  int id = t.new_node(m.shape(), ng);
  auto& out = t.node(id).val;
  auto mv = m.value(), bv = b.value();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out[i * cols + j] = mv[i * cols + j] + bv[j];
  if (ng)
    t.set_back(id, [id, im = m.id(), ib = b.id(), rows, cols](Tape<S>& tp) {
      const auto& g = tp.node(id).grad;
      tp.accumulate(im, g);
      auto& nb = tp.node(ib);
      if (nb.needs_grad)
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j) nb.grad[j] += g[i * cols + j];
    });
  return Tensor<S>(&t, id);
}

// ---------------------------------------------------------------------------
// Structure ops: concat, stacking, slicing.
// ---------------------------------------------------------------------------

// Concatenates along `axis`; operands must agree on every other dim.
// Zero-sized operands are skipped (x concat empty == x).
template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int axis = 0) {
  if (xs.empty()) throw std::invalid_argument("concat: no operands");
  Tape<S>& t = xs[0].tape();
  std::vector<const Tensor<S>*> parts;
  for (const auto& x : xs) {
    if (&x.tape() != &t) throw std::logic_error("concat: operands on different tapes");
    if (x.size() > 0) parts.push_back(&x);
  }
  if (parts.empty()) {  // all empty: keep first shape
    int empty_id = t.new_node(xs[0].shape(), false);
    return Tensor<S>(&t, empty_id);
  }
  const Shape& ref = parts[0]->shape();
  int rank = static_cast<int>(ref.size());
  if (axis < 0 || axis >= rank)
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const Tensor<S>* p : parts) {
    const Shape& s = p->shape();
    if (static_cast<int>(s.size()) != rank)
      throw ShapeError("concat: rank mismatch " + shape_str(ref) + " vs " + shape_str(s));
    for (int d = 0; d < rank; ++d)
      if (d != axis && s[d] != ref[d])
        throw ShapeError("concat: incompatible shapes " + shape_str(ref) + " vs " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  bool ng = false;
  for (const Tensor<S>* p : parts) ng = ng || p->needs_grad();
  int id = t.new_node(out_shape, ng);
  auto& out = t.node(id).val;

  int outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= ref[d];
  for (int d = axis + 1; d < rank; ++d) inner *= ref[d];
  int out_axis = out_shape[axis];

  struct Piece {
    int node_id;
    int axis_len;
    int axis_off;
  };
  std::vector<Piece> pieces;
  int off = 0;
  for (const Tensor<S>* p : parts) {
    int len = p->shape()[axis];
    auto pv = p->value();
    for (int o = 0; o < outer; ++o)
      for (int a = 0; a < len; ++a)
        std::copy_n(pv.begin() + (static_cast<size_t>(o) * len + a) * inner, inner,
                    out.begin() + (static_cast<size_t>(o) * out_axis + off + a) * inner);
    pieces.push_back({p->id(), len, off});
    off += len;
  }
  if (ng)
    t.set_back(id, [id, pieces, outer, inner, out_axis](Tape<S>& tp) {
      const auto& g = tp.node(id).grad;
      for (const auto& pc : pieces) {
        auto& n = tp.node(pc.node_id);
        if (!n.needs_grad) continue;
        for (int o = 0; o < outer; ++o)
          for (int a = 0; a < pc.axis_len; ++a) {
            size_t src = (static_cast<size_t>(o) * out_axis + pc.axis_off + a) * inner;
            size_t dst = (static_cast<size_t>(o) * pc.axis_len + a) * inner;
            for (int i = 0; i < inner; ++i) n.grad[dst + i] += g[src + i];
          }
      }
    });
  return Tensor<S>(&t, id);
}

template <typename S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b) {
  return concat(std::vector<Tensor<S>>{a, b}, 0);
}

template <typename S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& c) {
  return concat(std::vector<Tensor<S>>{a, b, c}, 0);
}

// Stacks K equal-length vectors into a [K x d] matrix.
template <typename S>
Tensor<S> stack_rows(const std::vector<Tensor<S>>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: no rows");
  Tape<S>& t = rows[0].tape();
  int d = rows[0].shape().size() == 1 ? rows[0].shape()[0] : -1;
  bool ng = false;
  for (const auto& r : rows) {
    if (r.shape().size() != 1 || r.shape()[0] != d)
      throw ShapeError("stack_rows: expected vectors of length " + std::to_string(d) + ", got " +
                       shape_str(r.shape()));
    ng = ng || r.needs_grad();
  }
  int k = static_cast<int>(rows.size());
  int id = t.new_node(Shape{k, d}, ng);
  auto& out = t.node(id).val;
  std::vector<int> ids(k);
  for (int i = 0; i < k; ++i) {
    std::copy_n(rows[i].value().begin(), d, out.begin() + static_cast<size_t>(i) * d);
    ids[i] = rows[i].id();
  }
  if (ng)
    t.set_back(id, [id, ids, d](Tape<S>& tp) {
      const auto& g = tp.node(id).grad;
      for (size_t i = 0; i < ids.size(); ++i) {
        auto& n = tp.node(ids[i]);
        if (!n.needs_grad) continue;
        for (int j = 0; j < d; ++j) n.grad[j] += g[i * d + j];
      }
    });
  return Tensor<S>(&t, id);
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tape<S>& t = a.tape();
  int id = t.new_node(std::move(shape), a.needs_grad());
  t.node(id).val.assign(a.value().begin(), a.value().end());
  if (a.needs_grad())
    t.set_back(id, [id, ia = a.id()](Tape<S>& tp) { tp.accumulate(ia, tp.node(id).grad); });
  return Tensor<S>(&t, id);
}

template <typename S>
Tensor<S> pick(const Tensor<S>& x, int i) {
  if (x.shape().size() != 1)
    throw ShapeError("pick: need a vector, got " + shape_str(x.shape()));
  if (i < 0 || i >= x.shape()[0])
    throw std::out_of_range("pick: index " + std::to_string(i) + " out of " + shape_str(x.shape()));
  Tape<S>& t = x.tape();
  int id = t.new_node(Shape{}, x.needs_grad());
  t.node(id).val[0] = x[i];
  if (x.needs_grad())
    t.set_back(id, [id, ix = x.id(), i](Tape<S>& tp) {
      auto& n = tp.node(ix);
      if (n.needs_grad) n.grad[i] += tp.node(id).grad[0];
    });
  return Tensor<S>(&t, id);
}

template <typename S>
Tensor<S> pick2(const Tensor<S>& x, int i, int j) {
  if (x.shape().size() != 2)
    throw ShapeError("pick2: need a matrix, got " + shape_str(x.shape()));
  int rows = x.shape()[0], cols = x.shape()[1];
  if (i < 0 || i >= rows || j < 0 || j >= cols)
    throw std::out_of_range("pick2: (" + std::to_string(i) + "," + std::to_string(j) +
                            ") out of " + shape_str(x.shape()));
  Tape<S>& t = x.tape();
  int id = t.new_node(Shape{}, x.needs_grad());
  t.node(id).val[0] = x[i * cols + j];
  if (x.needs_grad())
    t.set_back(id, [id, ix = x.id(), i, j, cols](Tape<S>& tp) {
      auto& n = tp.node(ix);
      if (n.needs_grad) n.grad[i * cols + j] += tp.node(id).grad[0];
    });
  return Tensor<S>(&t, id);
}

// ---------------------------------------------------------------------------
// Nonlinearities and reductions.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tape<S>& t = x.tape();
  int id = t.new_node(x.shape(), x.needs_grad());
  auto& out = t.node(id).val;
  auto xv = x.value();
  for (size_t i = 0; i < out.size(); ++i) {
    S v = xv[i];
    out[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                       : std::exp(v) / (S(1) + std::exp(v));
  }
  if (x.needs_grad())
    t.set_back(id, [id, ix = x.id()](Tape<S>& tp) {
      const auto& n = tp.node(id);
      auto& nx = tp.node(ix);
      for (size_t i = 0; i < n.grad.size(); ++i)
        nx.grad[i] += n.grad[i] * n.val[i] * (S(1) - n.val[i]);
    });
  return Tensor<S>(&t, id);
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& x) {
  Tape<S>& t = x.tape();
  int id = t.new_node(x.shape(), x.needs_grad());
  auto& out = t.node(id).val;
  auto xv = x.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  if (x.needs_grad())
    t.set_back(id, [id, ix = x.id()](Tape<S>& tp) {
      const auto& n = tp.node(id);
      auto& nx = tp.node(ix);
      for (size_t i = 0; i < n.grad.size(); ++i)
        nx.grad[i] += n.grad[i] * (S(1) - n.val[i] * n.val[i]);
    });
  return Tensor<S>(&t, id);
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Tape<S>& t = x.tape();
  int id = t.new_node(Shape{}, x.needs_grad());
  S s = 0;
  for (S v : x.value()) s += v;
  t.node(id).val[0] = s;
  if (x.needs_grad())
    t.set_back(id, [id, ix = x.id()](Tape<S>& tp) {
      S g = tp.node(id).grad[0];
      auto& nx = tp.node(ix);
      if (nx.needs_grad)
        for (auto& gi : nx.grad) gi += g;
    });
  return Tensor<S>(&t, id);
}

template <typename S>
Tensor<S> dot(const Tensor<S>& a, const Tensor<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  if (a.shape() != b.shape())
    throw ShapeError("dot: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  bool ng = a.needs_grad() || b.needs_grad();
  int id = t.new_node(Shape{}, ng);
  S s = 0;
  auto av = a.value(), bv = b.value();
  for (size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  t.node(id).val[0] = s;
  if (ng)
    t.set_back(id, [id, ia = a.id(), ib = b.id()](Tape<S>& tp) {
      S g = tp.node(id).grad[0];
      auto& na = tp.node(ia);
      auto& nb = tp.node(ib);
      if (na.needs_grad)
        for (size_t i = 0; i < na.grad.size(); ++i) na.grad[i] += g * nb.val[i];
      if (nb.needs_grad)
        for (size_t i = 0; i < nb.grad.size(); ++i) nb.grad[i] += g * na.val[i];
    });
  return Tensor<S>(&t, id);
}

// Max-shifted softmax over a vector.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
  if (x.shape().size() != 1)
    throw ShapeError("softmax: need a vector, got " + shape_str(x.shape()));
  if (x.size() == 0) throw std::invalid_argument("softmax: empty input");
  Tape<S>& t = x.tape();
  int n = x.size();
  int id = t.new_node(x.shape(), x.needs_grad());
  auto& out = t.node(id).val;
  auto xv = x.value();
  S m = xv[0];
  for (S v : xv) m = std::max(m, v);
  S z = 0;
  for (int i = 0; i < n; ++i) {
    out[i] = std::exp(xv[i] - m);
    z += out[i];
  }
  for (int i = 0; i < n; ++i) out[i] /= z;
  if (x.needs_grad())
    t.set_back(id, [id, ix = x.id()](Tape<S>& tp) {
      const auto& nd = tp.node(id);
      auto& nx = tp.node(ix);
      if (!nx.needs_grad) return;
      S gy = 0;
      for (size_t i = 0; i < nd.grad.size(); ++i) gy += nd.grad[i] * nd.val[i];
      for (size_t i = 0; i < nd.grad.size(); ++i)
        nx.grad[i] += nd.val[i] * (nd.grad[i] - gy);
    });
  return Tensor<S>(&t, id);
}

// Softmax restricted to mask-true positions; masked entries are exactly 0
// (scores treated as -inf before normalization).
template <typename S>
Tensor<S> masked_softmax(const Tensor<S>& x, const std::vector<uint8_t>& mask) {
  if (x.shape().size() != 1)
    throw ShapeError("masked_softmax: need a vector, got " + shape_str(x.shape()));
  if (static_cast<int>(mask.size()) != x.size())
    throw ShapeError("masked_softmax: mask size " + std::to_string(mask.size()) + " vs " +
                     shape_str(x.shape()));
  int n = x.size();
  int live = 0;
  for (uint8_t m : mask) live += m ? 1 : 0;
  if (live == 0) throw std::invalid_argument("masked_softmax: all positions masked");
  Tape<S>& t = x.tape();
  int id = t.new_node(x.shape(), x.needs_grad());
  auto& out = t.node(id).val;
  auto xv = x.value();
  S m = -std::numeric_limits<S>::infinity();
  for (int i = 0; i < n; ++i)
    if (mask[i]) m = std::max(m, xv[i]);
  S z = 0;
  for (int i = 0; i < n; ++i) {
    out[i] = mask[i] ? std::exp(xv[i] - m) : S(0);
    z += out[i];
  }
  for (int i = 0; i < n; ++i) out[i] /= z;
  if (x.needs_grad())
    t.set_back(id, [id, ix = x.id(), mask](Tape<S>& tp) {
      const auto& nd = tp.node(id);
      auto& nx = tp.node(ix);
      if (!nx.needs_grad) return;
      S gy = 0;
      for (size_t i = 0; i < nd.grad.size(); ++i) gy += nd.grad[i] * nd.val[i];
      for (size_t i = 0; i < nd.grad.size(); ++i)
        if (mask[i]) nx.grad[i] += nd.val[i] * (nd.grad[i] - gy);
    });
  return Tensor<S>(&t, id);
}

// Max-shifted log(sum(exp(x))) over a vector -> scalar.
template <typename S>
Tensor<S> logsumexp(const Tensor<S>& x) {
  if (x.shape().size() != 1)
    throw ShapeError("logsumexp: need a vector, got " + shape_str(x.shape()));
  if (x.size() == 0) throw std::invalid_argument("logsumexp: empty input");
  Tape<S>& t = x.tape();
  int id = t.new_node(Shape{}, x.needs_grad());
  auto xv = x.value();
  S m = xv[0];
  for (S v : xv) m = std::max(m, v);
  S z = 0;
  for (S v : xv) z += std::exp(v - m);
  t.node(id).val[0] = m + std::log(z);
  if (x.needs_grad())
    t.set_back(id, [id, ix = x.id()](Tape<S>& tp) {
      const auto& nd = tp.node(id);
      auto& nx = tp.node(ix);
      if (!nx.needs_grad) return;
      S g = nd.grad[0], y = nd.val[0];
      for (size_t i = 0; i < nx.grad.size(); ++i)
        nx.grad[i] += g * std::exp(nx.val[i] - y);
    });
  return Tensor<S>(&t, id);
}

// Per-row logsumexp of a matrix -> vector of row values.
template <typename S>
Tensor<S> logsumexp_rows(const Tensor<S>& x) {
  if (x.shape().size() != 2)
    throw ShapeError("logsumexp_rows: need a matrix, got " + shape_str(x.shape()));
  int rows = x.shape()[0], cols = x.shape()[1];
  if (cols == 0) throw std::invalid_argument("logsumexp_rows: empty rows");
  Tape<S>& t = x.tape();
  int id = t.new_node(Shape{rows}, x.needs_grad());
  auto& out = t.node(id).val;
  auto xv = x.value();
  for (int i = 0; i < rows; ++i) {
    S m = xv[i * cols];
    for (int j = 1; j < cols; ++j) m = std::max(m, xv[i * cols + j]);
    S z = 0;
    for (int j = 0; j < cols; ++j) z += std::exp(xv[i * cols + j] - m);
    out[i] = m + std::log(z);
  }
  if (x.needs_grad())
    t.set_back(id, [id, ix = x.id(), rows, cols](Tape<S>& tp) {
      const auto& nd = tp.node(id);
      auto& nx = tp.node(ix);
      if (!nx.needs_grad) return;
      for (int i = 0; i < rows; ++i) {
        S g = nd.grad[i], y = nd.val[i];
        for (int j = 0; j < cols; ++j)
          nx.grad[i * cols + j] += g * std::exp(nx.val[i * cols + j] - y);
      }
    });
  return Tensor<S>(&t, id);
}

// Elementwise max over a list of equal-shape vectors (CNN max-pooling).
// Gradient routes to the first operand attaining the max (deterministic).
template <typename S>
Tensor<S> emax(const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw std::invalid_argument("emax: no operands");
  Tape<S>& t = xs[0].tape();
  const Shape& ref = xs[0].shape();
  bool ng = false;
  for (const auto& x : xs) {
    if (x.shape() != ref)
      throw ShapeError("emax: shape mismatch " + shape_str(ref) + " vs " + shape_str(x.shape()));
    ng = ng || x.needs_grad();
  }
  int id = t.new_node(ref, ng);
  auto& out = t.node(id).val;
  std::vector<int> argmax(out.size(), 0);
  std::vector<int> ids(xs.size());
  for (size_t k = 0; k < xs.size(); ++k) {
    ids[k] = xs[k].id();
    auto xv = xs[k].value();
    for (size_t i = 0; i < out.size(); ++i) {
      if (k == 0 || xv[i] > out[i]) {
        out[i] = xv[i];
        argmax[i] = static_cast<int>(k);
      }
    }
  }
  if (ng)
    t.set_back(id, [id, ids, argmax](Tape<S>& tp) {
      const auto& g = tp.node(id).grad;
      for (size_t i = 0; i < g.size(); ++i) {
        auto& n = tp.node(ids[argmax[i]]);
        if (n.needs_grad) n.grad[i] += g[i];
      }
    });
  return Tensor<S>(&t, id);
}

// Arithmetic mean of a list of equal-shape vectors.
template <typename S>
Tensor<S> mean_of(const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean_of: no operands");
  Tensor<S> acc = xs[0];
  for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return scale(acc, 1.0 / static_cast<double>(xs.size()));
}

// Inverted dropout: identity at evaluation, mask-and-rescale in training.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, bool training, std::mt19937& rng) {
  if (!training || rate <= 0.0) return x;
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::vector<S> mask(x.size());
  S keep = static_cast<S>(1.0 / (1.0 - rate));
  for (auto& m : mask) m = dist(rng) < rate ? S(0) : keep;
  return mul_const(x, std::move(mask));
}

// Debug/validation helper: true when all parameter grads are finite.
template <typename S>
bool grads_finite(const std::vector<Parameter<S>*>& params) {
  for (const auto* p : params)
    for (S g : p->grad)
      if (!std::isfinite(double(g))) return false;
  return true;
}

}  // namespace dahcrf
