#pragma once

// Reverse-mode autodiff over dense double tensors. Small by intent: every op
// this detector needs, nothing else. Values are stored flat in row-major
// order; graphs are built eagerly and freed when the last Tensor handle dies.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace dfft {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

// Multiply-accumulate counter backing the flops analyzer tests. Only matmul
// style kernels bump it; see flops.hpp for the counting convention.
struct MacCounter {
  inline static thread_local bool enabled = false;
  inline static thread_local std::uint64_t macs = 0;
  static void reset() { macs = 0; }
  static void add(std::uint64_t n) {
    if (enabled) macs += n;
  }
};

struct Node {
  Shape shape;
  std::shared_ptr<std::vector<double>> val;
  std::shared_ptr<std::vector<double>> grad;  // allocated on first use
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;
  bool requires_grad = false;

  std::vector<double>& v() { return *val; }
  const std::vector<double>& v() const { return *val; }
  std::vector<double>& g() {
    if (!grad) grad = std::make_shared<std::vector<double>>(val->size(), 0.0);
    return *grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val = std::make_shared<std::vector<double>>(std::move(data));
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto total = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(total), 0.0),
                requires_grad);
  }

  static Tensor full(Shape shape, double value) {
    auto total = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(total), value));
  }

  static Tensor scalar(double value) { return from({1}, {value}); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return node_ref().shape; }
  int ndim() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const { return shape_numel(shape()); }
  std::int64_t dim(int i) const {
    const auto& s = shape();
    if (i < 0) i += static_cast<int>(s.size());
    return s[static_cast<std::size_t>(i)];
  }

  std::vector<double>& data() { return node_ref().v(); }
  const std::vector<double>& data() const { return node_ref().v(); }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return data()[0];
  }

  bool requires_grad() const { return node_ref().requires_grad; }

  const std::vector<double>& grad() const {
    auto& n = node_ref();
    if (!n.grad) throw ValueError("tensor has no gradient buffer");
    return *n.grad;
  }

  std::shared_ptr<Node> node() const { return n_; }

  // Reverse pass from a scalar. Gradients accumulate: leaves shared with a
  // ParamStore keep their sums across calls until zero_grad.
  void backward() const {
    auto& root = node_ref();
    if (shape_numel(root.shape) != 1)
      throw ShapeError("backward() requires a scalar, got " + shape_str(root.shape));
    if (!root.requires_grad) throw ValueError("backward() on a graph with no differentiable leaves");

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    struct Frame {
      Node* node;
      std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.node->parents.size()) {
        Node* p = f.node->parents[f.next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
    root.g()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backprop) (*it)->backprop(**it);
  }

 private:
  Node& node_ref() const {
    if (!n_) throw ValueError("use of an undefined tensor");
    return *n_;
  }
  std::shared_ptr<Node> n_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<std::shared_ptr<Node>> parents,
                      std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val = std::make_shared<std::vector<double>>(std::move(value));
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor(n);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": mismatched shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// C[m,n] += op(A) * op(B). Plain loops ordered for contiguous inner reads.
inline void mm_acc(const double* A, const double* B, double* C, std::int64_t m, std::int64_t k,
                   std::int64_t n, bool tA, bool tB) {
  if (!tA && !tB) {
    for (std::int64_t i = 0; i < m; ++i) {
      const double* a = A + i * k;
      double* c = C + i * n;
      for (std::int64_t l = 0; l < k; ++l) {
        double av = a[l];
        const double* b = B + l * n;
        for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  } else if (!tA && tB) {
    for (std::int64_t i = 0; i < m; ++i) {
      const double* a = A + i * k;
      double* c = C + i * n;
      for (std::int64_t j = 0; j < n; ++j) {
        const double* b = B + j * k;
        double acc = 0.0;
        for (std::int64_t l = 0; l < k; ++l) acc += a[l] * b[l];
        c[j] += acc;
      }
    }
  } else if (tA && !tB) {
    for (std::int64_t l = 0; l < k; ++l) {
      const double* a = A + l * m;
      const double* b = B + l * n;
      for (std::int64_t i = 0; i < m; ++i) {
        double av = a[i];
        double* c = C + i * n;
        for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  } else {
    for (std::int64_t i = 0; i < m; ++i) {
      double* c = C + i * n;
      for (std::int64_t j = 0; j < n; ++j) {
        const double* b = B + j * k;
        double acc = 0.0;
        for (std::int64_t l = 0; l < k; ++l) acc += A[l * m + i] * b[l];
        c[j] += acc;
      }
    }
  }
}

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    const auto& g = self.g();
    if (pa->requires_grad) {
      auto& ga = pa->g();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->g();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    const auto& g = self.g();
    if (pa->requires_grad) {
      auto& ga = pa->g();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->g();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    const auto& g = self.g();
    const auto& av2 = pa->v();
    const auto& bv2 = pb->v();
    if (pa->requires_grad) {
      auto& ga = pa->g();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->g();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "div");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    const auto& g = self.g();
    const auto& av2 = pa->v();
    const auto& bv2 = pb->v();
    if (pa->requires_grad) {
      auto& ga = pa->g();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv2[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->g();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av2[i] / (bv2[i] * bv2[i]);
    }
  });
}

// Ties keep the first argument's gradient.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "maximum");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] >= bv[i] ? av[i] : bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    const auto& g = self.g();
    const auto& av2 = pa->v();
    const auto& bv2 = pb->v();
    if (pa->requires_grad) {
      auto& ga = pa->g();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av2[i] >= bv2[i]) ga[i] += g[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->g();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av2[i] < bv2[i]) gb[i] += g[i];
    }
  });
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "minimum");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] <= bv[i] ? av[i] : bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    const auto& g = self.g();
    const auto& av2 = pa->v();
    const auto& bv2 = pb->v();
    if (pa->requires_grad) {
      auto& ga = pa->g();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av2[i] <= bv2[i]) ga[i] += g[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->g();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av2[i] > bv2[i]) gb[i] += g[i];
    }
  });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa, s](Node& self) {
    const auto& g = self.g();
    auto& ga = pa->g();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + s;
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa](Node& self) {
    const auto& g = self.g();
    auto& ga = pa->g();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

inline Tensor clamp_min(const Tensor& a, double lo) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > lo ? av[i] : lo;
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa, lo](Node& self) {
    const auto& g = self.g();
    const auto& av2 = pa->v();
    auto& ga = pa->g();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av2[i] > lo) ga[i] += g[i];
  });
}

inline Tensor exp_t(const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa](Node& self) {
    const auto& g = self.g();
    const auto& y = self.v();
    auto& ga = pa->g();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

// log(max(x, floor)); gradient is zero in the clamped region.
inline Tensor log_guard(const Tensor& a, double floor_val = 1e-12) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::log(av[i] > floor_val ? av[i] : floor_val);
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa, floor_val](Node& self) {
    const auto& g = self.g();
    const auto& av2 = pa->v();
    auto& ga = pa->g();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av2[i] > floor_val) ga[i] += g[i] / av2[i];
  });
}

inline Tensor sigmoid_t(const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-av[i]));
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa](Node& self) {
    const auto& g = self.g();
    const auto& y = self.v();
    auto& ga = pa->g();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

// Exact GELU: x * Phi(x).
inline Tensor gelu(const Tensor& a) {
  static constexpr double kInvSqrt2 = 0.70710678118654752440;
  static constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i)
    out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * kInvSqrt2));
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa](Node& self) {
    const auto& g = self.g();
    const auto& x = pa->v();
    auto& ga = pa->g();
    for (std::size_t i = 0; i < g.size(); ++i) {
      double phi = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
      double dens = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
      ga[i] += g[i] * (phi + x[i] * dens);
    }
  });
}

// x^p for constant p >= 0; p == 0 gives ones with zero gradient.
inline Tensor pow_const(const Tensor& a, double p) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  if (p == 0.0) {
    std::fill(out.begin(), out.end(), 1.0);
  } else {
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::pow(av[i], p);
  }
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa, p](Node& self) {
    if (p == 0.0) return;
    const auto& g = self.g();
    const auto& x = pa->v();
    auto& ga = pa->g();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * p * std::pow(x[i], p - 1.0);
  });
}

// ---- shape ----

// Zero-copy view; value and gradient buffers are shared with the source.
inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw ShapeError("reshape from " + shape_str(a.shape()) + " to " + shape_str(new_shape));
  auto pa = a.node();
  auto n = std::make_shared<Node>();
  n->shape = std::move(new_shape);
  n->val = pa->val;
  n->requires_grad = pa->requires_grad;
  if (pa->requires_grad) {
    pa->g();  // make sure the shared buffer exists before aliasing it
    n->grad = pa->grad;
    n->parents = {pa};
  }
  return Tensor(n);
}

// y[i] = x[index[i]]. The workhorse behind windowing, rolls, head packing,
// slicing, tiling and nearest-neighbor upsampling. Backward scatter-adds, so
// repeated indices implement broadcast sums for free.
inline Tensor gather(const Tensor& a, std::shared_ptr<std::vector<std::int64_t>> index,
                     Shape out_shape) {
  if (static_cast<std::int64_t>(index->size()) != shape_numel(out_shape))
    throw ShapeError("gather index size " + std::to_string(index->size()) +
                     " does not match output shape " + shape_str(out_shape));
  const auto& av = a.data();
  const auto n_in = static_cast<std::int64_t>(av.size());
  std::vector<double> out(index->size());
  const auto& idx = *index;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n_in)
      throw ShapeError("gather index " + std::to_string(idx[i]) + " out of range [0," +
                       std::to_string(n_in) + ")");
    out[i] = av[static_cast<std::size_t>(idx[i])];
  }
  auto pa = a.node();
  return detail::make_op(std::move(out_shape), std::move(out), {pa}, [pa, index](Node& self) {
    const auto& g = self.g();
    auto& ga = pa->g();
    const auto& idx2 = *index;
    for (std::size_t i = 0; i < idx2.size(); ++i) ga[static_cast<std::size_t>(idx2[i])] += g[i];
  });
}

inline Tensor concat_last(const Tensor& a, const Tensor& b) {
  if (a.ndim() != b.ndim()) throw ShapeError("concat_last: rank mismatch");
  Shape out_shape = a.shape();
  for (int i = 0; i + 1 < a.ndim(); ++i)
    if (a.shape()[static_cast<std::size_t>(i)] != b.shape()[static_cast<std::size_t>(i)])
      throw ShapeError("concat_last: leading dims differ, " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  std::int64_t ca = a.dim(-1), cb = b.dim(-1);
  out_shape.back() = ca + cb;
  std::int64_t rows = a.numel() / ca;
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(static_cast<std::size_t>(rows * (ca + cb)));
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t j = 0; j < ca; ++j) out[static_cast<std::size_t>(r * (ca + cb) + j)] = av[static_cast<std::size_t>(r * ca + j)];
    for (std::int64_t j = 0; j < cb; ++j) out[static_cast<std::size_t>(r * (ca + cb) + ca + j)] = bv[static_cast<std::size_t>(r * cb + j)];
  }
  auto pa = a.node(), pb = b.node();
  return detail::make_op(std::move(out_shape), std::move(out), {pa, pb},
                         [pa, pb, rows, ca, cb](Node& self) {
                           const auto& g = self.g();
                           if (pa->requires_grad) {
                             auto& ga = pa->g();
                             for (std::int64_t r = 0; r < rows; ++r)
                               for (std::int64_t j = 0; j < ca; ++j)
                                 ga[static_cast<std::size_t>(r * ca + j)] += g[static_cast<std::size_t>(r * (ca + cb) + j)];
                           }
                           if (pb->requires_grad) {
                             auto& gb = pb->g();
                             for (std::int64_t r = 0; r < rows; ++r)
                               for (std::int64_t j = 0; j < cb; ++j)
                                 gb[static_cast<std::size_t>(r * cb + j)] += g[static_cast<std::size_t>(r * (ca + cb) + ca + j)];
                           }
                         });
}

// Stack equal-shape tensors along a fresh trailing axis.
inline Tensor stack_last(const std::vector<Tensor>& cols) {
  if (cols.empty()) throw ShapeError("stack_last: no inputs");
  const Shape base = cols[0].shape();
  for (const auto& c : cols) detail::check_same_shape(cols[0], c, "stack_last");
  std::int64_t rows = cols[0].numel();
  std::int64_t k = static_cast<std::int64_t>(cols.size());
  Shape out_shape = base;
  out_shape.push_back(k);
  std::vector<double> out(static_cast<std::size_t>(rows * k));
  std::vector<std::shared_ptr<Node>> parents;
  for (std::int64_t j = 0; j < k; ++j) {
    const auto& cv = cols[static_cast<std::size_t>(j)].data();
    for (std::int64_t r = 0; r < rows; ++r) out[static_cast<std::size_t>(r * k + j)] = cv[static_cast<std::size_t>(r)];
    parents.push_back(cols[static_cast<std::size_t>(j)].node());
  }
  auto ps = parents;
  return detail::make_op(std::move(out_shape), std::move(out), std::move(parents),
                         [ps, rows, k](Node& self) {
                           const auto& g = self.g();
                           for (std::int64_t j = 0; j < k; ++j) {
                             auto& p = ps[static_cast<std::size_t>(j)];
                             if (!p->requires_grad) continue;
                             auto& gp = p->g();
                             for (std::int64_t r = 0; r < rows; ++r)
                               gp[static_cast<std::size_t>(r)] += g[static_cast<std::size_t>(r * k + j)];
                           }
                         });
}

// ---- matmul family ----

// x[..., k] @ W[k, n] + b[n]; leading axes are treated as rows.
inline Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b) {
  if (W.ndim() != 2) throw ShapeError("linear: weight must be 2-d, got " + shape_str(W.shape()));
  std::int64_t k = x.dim(-1);
  if (W.dim(0) != k)
    throw ShapeError("linear: input features " + std::to_string(k) + " vs weight rows " +
                     std::to_string(W.dim(0)));
  std::int64_t n = W.dim(1);
  if (b.ndim() != 1 || b.dim(0) != n)
    throw ShapeError("linear: bias shape " + shape_str(b.shape()) + " does not match width " +
                     std::to_string(n));
  std::int64_t rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;

  const auto& xv = x.data();
  const auto& wv = W.data();
  const auto& bv = b.data();
  std::vector<double> out(static_cast<std::size_t>(rows * n));
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(r * n + j)] = bv[static_cast<std::size_t>(j)];
  detail::mm_acc(xv.data(), wv.data(), out.data(), rows, k, n, false, false);
  MacCounter::add(static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(k) *
                  static_cast<std::uint64_t>(n));

  auto px = x.node(), pw = W.node(), pb = b.node();
  return detail::make_op(std::move(out_shape), std::move(out), {px, pw, pb},
                         [px, pw, pb, rows, k, n](Node& self) {
                           const auto& g = self.g();
                           if (px->requires_grad)
                             detail::mm_acc(g.data(), pw->v().data(), px->g().data(), rows, n, k,
                                            false, true);
                           if (pw->requires_grad)
                             detail::mm_acc(px->v().data(), g.data(), pw->g().data(), k, rows, n,
                                            true, false);
                           if (pb->requires_grad) {
                             auto& gb = pb->g();
                             for (std::int64_t r = 0; r < rows; ++r)
                               for (std::int64_t j = 0; j < n; ++j)
                                 gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(r * n + j)];
                           }
                         });
}

// Batched matmul over matching leading batch axes: A[g, ., .] @ B[g, ., .].
// trans flags transpose the per-batch matrices.
inline Tensor bmm(const Tensor& A, const Tensor& B, bool tA = false, bool tB = false) {
  if (A.ndim() != 3 || B.ndim() != 3) throw ShapeError("bmm: expects 3-d tensors");
  if (A.dim(0) != B.dim(0))
    throw ShapeError("bmm: batch mismatch " + std::to_string(A.dim(0)) + " vs " +
                     std::to_string(B.dim(0)));
  std::int64_t G = A.dim(0);
  std::int64_t m = tA ? A.dim(2) : A.dim(1);
  std::int64_t k = tA ? A.dim(1) : A.dim(2);
  std::int64_t kb = tB ? B.dim(2) : B.dim(1);
  std::int64_t n = tB ? B.dim(1) : B.dim(2);
  if (k != kb)
    throw ShapeError("bmm: inner dims " + std::to_string(k) + " vs " + std::to_string(kb));

  const auto& av = A.data();
  const auto& bv = B.data();
  std::vector<double> out(static_cast<std::size_t>(G * m * n), 0.0);
  std::int64_t sa = A.dim(1) * A.dim(2), sb = B.dim(1) * B.dim(2), sc = m * n;
  for (std::int64_t gI = 0; gI < G; ++gI)
    detail::mm_acc(av.data() + gI * sa, bv.data() + gI * sb, out.data() + gI * sc, m, k, n, tA, tB);
  MacCounter::add(static_cast<std::uint64_t>(G) * static_cast<std::uint64_t>(m) *
                  static_cast<std::uint64_t>(k) * static_cast<std::uint64_t>(n));

  auto pa = A.node(), pb = B.node();
  return detail::make_op({G, m, n}, std::move(out), {pa, pb},
                         [pa, pb, G, m, k, n, sa, sb, sc, tA, tB](Node& self) {
                           const auto& g = self.g();
                           for (std::int64_t gI = 0; gI < G; ++gI) {
                             const double* gc = g.data() + gI * sc;
                             if (pa->requires_grad) {
                               double* gA = pa->g().data() + gI * sa;
                               const double* Bp = pb->v().data() + gI * sb;
                               if (!tA)
                                 detail::mm_acc(gc, Bp, gA, m, n, k, false, !tB);
                               else
                                 detail::mm_acc(Bp, gc, gA, k, n, m, tB, true);
                             }
                             if (pb->requires_grad) {
                               double* gB = pb->g().data() + gI * sb;
                               const double* Ap = pa->v().data() + gI * sa;
                               if (!tB)
                                 detail::mm_acc(Ap, gc, gB, k, m, n, !tA, false);
                               else
                                 detail::mm_acc(gc, Ap, gB, n, m, k, true, tA);
                             }
                           }
                         });
}

// ---- row ops ----

inline Tensor softmax_last(const Tensor& x) {
  std::int64_t c = x.dim(-1);
  std::int64_t rows = x.numel() / c;
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double* orow = out.data() + r * c;
    double mx = row[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    double inv = 1.0 / sum;
    for (std::int64_t j = 0; j < c; ++j) orow[j] *= inv;
  }
  auto px = x.node();
  return detail::make_op(x.shape(), std::move(out), {px}, [px, rows, c](Node& self) {
    const auto& g = self.g();
    const auto& y = self.v();
    auto& gx = px->g();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * c;
      const double* yr = y.data() + r * c;
      double dot = 0.0;
      for (std::int64_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
      double* gxr = gx.data() + r * c;
      for (std::int64_t j = 0; j < c; ++j) gxr[j] += yr[j] * (gr[j] - dot);
    }
  });
}

inline Tensor layernorm_last(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                             double eps = 1e-5) {
  std::int64_t c = x.dim(-1);
  if (gamma.ndim() != 1 || gamma.dim(0) != c || beta.ndim() != 1 || beta.dim(0) != c)
    throw ShapeError("layernorm: scale/shift must be length " + std::to_string(c));
  std::int64_t rows = x.numel() / c;
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  std::vector<double> out(xv.size());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double mean = 0.0;
    for (std::int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = is;
    double* xh = xhat->data() + r * c;
    double* orow = out.data() + r * c;
    for (std::int64_t j = 0; j < c; ++j) {
      xh[j] = (row[j] - mean) * is;
      orow[j] = gv[static_cast<std::size_t>(j)] * xh[j] + bv[static_cast<std::size_t>(j)];
    }
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return detail::make_op(
      x.shape(), std::move(out), {px, pg, pb}, [px, pg, pb, rows, c, xhat, inv_std](Node& self) {
        const auto& g = self.g();
        const auto& gv2 = pg->v();
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * c;
          const double* xh = xhat->data() + r * c;
          if (px->requires_grad) {
            double* gx = px->g().data() + r * c;
            double mean_gxh = 0.0, mean_gxh_xh = 0.0;
            for (std::int64_t j = 0; j < c; ++j) {
              double gxh = gr[j] * gv2[static_cast<std::size_t>(j)];
              mean_gxh += gxh;
              mean_gxh_xh += gxh * xh[j];
            }
            mean_gxh /= static_cast<double>(c);
            mean_gxh_xh /= static_cast<double>(c);
            double is = (*inv_std)[static_cast<std::size_t>(r)];
            for (std::int64_t j = 0; j < c; ++j) {
              double gxh = gr[j] * gv2[static_cast<std::size_t>(j)];
              gx[j] += is * (gxh - mean_gxh - xh[j] * mean_gxh_xh);
            }
          }
          if (pg->requires_grad) {
            auto& gg = pg->g();
            for (std::int64_t j = 0; j < c; ++j) gg[static_cast<std::size_t>(j)] += gr[j] * xh[j];
          }
          if (pb->requires_grad) {
            auto& gb = pb->g();
            for (std::int64_t j = 0; j < c; ++j) gb[static_cast<std::size_t>(j)] += gr[j];
          }
        }
      });
}

// L2-normalizes each feature column over the token axis of x[g, n, d].
inline Tensor normalize_tokens(const Tensor& x, double eps = 1e-12) {
  if (x.ndim() != 3) throw ShapeError("normalize_tokens: expects [batch, tokens, dim]");
  std::int64_t G = x.dim(0), n = x.dim(1), d = x.dim(2);
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(G * d));
  for (std::int64_t gI = 0; gI < G; ++gI) {
    const double* xb = xv.data() + gI * n * d;
    double* ob = out.data() + gI * n * d;
    double* nb = norms->data() + gI * d;
    for (std::int64_t j = 0; j < d; ++j) {
      double ss = 0.0;
      for (std::int64_t i = 0; i < n; ++i) ss += xb[i * d + j] * xb[i * d + j];
      double r = std::sqrt(ss + eps * eps);
      nb[j] = r;
      double inv = 1.0 / r;
      for (std::int64_t i = 0; i < n; ++i) ob[i * d + j] = xb[i * d + j] * inv;
    }
  }
  auto px = x.node();
  return detail::make_op(x.shape(), std::move(out), {px}, [px, G, n, d, norms](Node& self) {
    const auto& g = self.g();
    const auto& y = self.v();
    auto& gx = px->g();
    for (std::int64_t gI = 0; gI < G; ++gI) {
      const double* gb = g.data() + gI * n * d;
      const double* yb = y.data() + gI * n * d;
      double* gxb = gx.data() + gI * n * d;
      const double* nb = norms->data() + gI * d;
      for (std::int64_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::int64_t i = 0; i < n; ++i) s += gb[i * d + j] * yb[i * d + j];
        double inv = 1.0 / nb[j];
        for (std::int64_t i = 0; i < n; ++i)
          gxb[i * d + j] += (gb[i * d + j] - yb[i * d + j] * s) * inv;
      }
    }
  });
}

// 2x2 mean pooling over the spatial axes of x[b, h, w, c].
inline Tensor avgpool2x2(const Tensor& x) {
  if (x.ndim() != 4) throw ShapeError("avgpool2x2: expects [batch, h, w, c]");
  std::int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (H % 2 != 0) throw DimensionError("height " + std::to_string(H) + " not divisible by 2");
  if (W % 2 != 0) throw DimensionError("width " + std::to_string(W) + " not divisible by 2");
  std::int64_t Ho = H / 2, Wo = W / 2;
  const auto& xv = x.data();
  std::vector<double> out(static_cast<std::size_t>(B * Ho * Wo * C));
  auto src = [&](std::int64_t b, std::int64_t y, std::int64_t xx, std::int64_t c) {
    return xv[static_cast<std::size_t>(((b * H + y) * W + xx) * C + c)];
  };
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t xx = 0; xx < Wo; ++xx)
        for (std::int64_t c = 0; c < C; ++c)
          out[static_cast<std::size_t>(((b * Ho + y) * Wo + xx) * C + c)] =
              0.25 * (src(b, 2 * y, 2 * xx, c) + src(b, 2 * y, 2 * xx + 1, c) +
                      src(b, 2 * y + 1, 2 * xx, c) + src(b, 2 * y + 1, 2 * xx + 1, c));
  auto px = x.node();
  return detail::make_op({B, Ho, Wo, C}, std::move(out), {px}, [px, B, H, W, C, Ho, Wo](Node& self) {
    const auto& g = self.g();
    auto& gx = px->g();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t y = 0; y < Ho; ++y)
        for (std::int64_t xx = 0; xx < Wo; ++xx)
          for (std::int64_t c = 0; c < C; ++c) {
            double q = 0.25 * g[static_cast<std::size_t>(((b * Ho + y) * Wo + xx) * C + c)];
            gx[static_cast<std::size_t>(((b * H + 2 * y) * W + 2 * xx) * C + c)] += q;
            gx[static_cast<std::size_t>(((b * H + 2 * y) * W + 2 * xx + 1) * C + c)] += q;
            gx[static_cast<std::size_t>(((b * H + 2 * y + 1) * W + 2 * xx) * C + c)] += q;
            gx[static_cast<std::size_t>(((b * H + 2 * y + 1) * W + 2 * xx + 1) * C + c)] += q;
          }
  });
}

// ---- reductions ----

inline Tensor sum_all(const Tensor& x) {
  const auto& xv = x.data();
  double s = 0.0;
  for (double v : xv) s += v;
  auto px = x.node();
  return detail::make_op({1}, {s}, {px}, [px](Node& self) {
    double g0 = self.g()[0];
    auto& gx = px->g();
    for (auto& v : gx) v += g0;
  });
}

inline Tensor mean_all(const Tensor& x) { return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

// Select rows of x[..., c] by flat row index.
inline Tensor take_rows(const Tensor& x, const std::vector<std::int64_t>& rows) {
  std::int64_t c = x.dim(-1);
  std::int64_t total_rows = x.numel() / c;
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(rows.size() * static_cast<std::size_t>(c));
  for (auto r : rows) {
    if (r < 0 || r >= total_rows)
      throw ShapeError("take_rows: row " + std::to_string(r) + " out of range");
    for (std::int64_t j = 0; j < c; ++j) idx->push_back(r * c + j);
  }
  return gather(x, idx, Shape{static_cast<std::int64_t>(rows.size()), c});
}

// Columns lo..hi (exclusive) of the trailing axis.
inline Tensor slice_last(const Tensor& x, std::int64_t lo, std::int64_t hi) {
  std::int64_t c = x.dim(-1);
  if (lo < 0 || hi > c || lo >= hi)
    throw ShapeError("slice_last: bad range [" + std::to_string(lo) + "," + std::to_string(hi) +
                     ") for width " + std::to_string(c));
  std::int64_t rows = x.numel() / c;
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(static_cast<std::size_t>(rows * (hi - lo)));
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = lo; j < hi; ++j) idx->push_back(r * c + j);
  Shape out_shape = x.shape();
  out_shape.back() = hi - lo;
  return gather(x, idx, std::move(out_shape));
}

}  // namespace dfft
