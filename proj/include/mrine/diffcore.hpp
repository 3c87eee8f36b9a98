// Reverse-mode automatic differentiation over dense double-precision tensors.
//
// Tensors are rank 0..3. Rank-3 tensors are batches of matrices [batch, rows, cols];
// matrix ops broadcast a rank-2 operand across the batch of a rank-3 operand.
// Every op records its parents and a backward rule on a heap node; backward()
// walks the reachable nodes once in reverse creation order.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/LU>

namespace mrine {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct SingularMatrixError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NotPositiveDefiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace ad {

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : dims_(dims) {}
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {}

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t numel() const {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
  }
  // Matrix view of ranks 2 and 3.
  std::size_t batch() const { return rank() == 3 ? dims_[0] : 1; }
  std::size_t rows() const { return dims_.at(rank() - 2); }
  std::size_t cols() const { return dims_.back(); }

  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  std::vector<std::size_t> dims_;
};

namespace detail {

inline std::uint64_t next_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool released = false;
  std::uint64_t seq = next_sequence();
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
  Node& parent(std::size_t i) { return *parents[i]; }
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values) {
    if (values.size() != shape.numel()) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape.str());
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Tensor(std::move(node));
  }
  static Tensor parameter(Shape shape, std::vector<double> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }
  static Tensor zeros(Shape shape) {
    const auto n = shape.numel();
    return constant(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor scalar(double v) { return constant(Shape{}, {v}); }
  static Tensor eye(std::size_t n) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    return constant(Shape{n, n}, std::move(v));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const double> values() const { return node_->value; }
  // Direct write access; only meaningful for leaves (parameters, constants).
  std::span<double> mutable_values() { return node_->value; }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape().str());
    return node_->value[0];
  }
  double at(std::size_t i) const { return node_->value.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && numel() > 0; }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  bool all_finite() const {
    return std::all_of(node_->value.begin(), node_->value.end(),
                       [](double v) { return std::isfinite(v); });
  }

  // Copy of the values with no graph history.
  Tensor detach() const { return constant(shape(), node_->value); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  for (const auto& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
  if (node->requires_grad) {
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  for (const auto& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
  if (node->requires_grad) {
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.shape().rank() != 2 && t.shape().rank() != 3) {
    throw ShapeError(std::string(op) + ": expected rank 2 or 3, got " + t.shape().str());
  }
}

// Batch count for a binary matrix op where a rank-2 operand broadcasts.
inline std::size_t broadcast_batch(const Shape& a, const Shape& b, const char* op) {
  if (a.rank() == 3 && b.rank() == 3 && a[0] != b[0]) {
    throw ShapeError(std::string(op) + ": batch mismatch " + a.str() + " vs " + b.str());
  }
  return std::max(a.batch(), b.batch());
}

inline Shape matrix_shape(std::size_t batch, bool batched, std::size_t r, std::size_t c) {
  return batched ? Shape{batch, r, c} : Shape{r, c};
}

// Elementwise broadcasting: shapes equal, or the smaller is a trailing suffix of the larger.
struct Broadcast {
  bool a_small = false;
  bool b_small = false;
  std::size_t inner = 0;
  std::size_t outer = 1;
  Shape out;
};

inline Broadcast elementwise_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.inner = a.numel();
    return bc;
  }
  auto is_suffix = [](const Shape& small, const Shape& big) {
    if (small.rank() > big.rank()) return false;
    const auto off = big.rank() - small.rank();
    for (std::size_t i = 0; i < small.rank(); ++i)
      if (small[i] != big[off + i]) return false;
    return true;
  };
  if (is_suffix(b, a)) {
    bc.b_small = true;
    bc.out = a;
    bc.inner = b.numel();
  } else if (is_suffix(a, b)) {
    bc.a_small = true;
    bc.out = b;
    bc.inner = a.numel();
  } else {
    throw ShapeError(std::string(op) + ": cannot broadcast " + a.str() + " with " + b.str());
  }
  bc.outer = bc.inner == 0 ? 0 : bc.out.numel() / bc.inner;
  return bc;
}

template <class Fwd, class DA, class DB>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  const Broadcast bc = elementwise_broadcast(a.shape(), b.shape(), name);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(bc.out.numel());
  for (std::size_t o = 0; o < bc.outer; ++o) {
    for (std::size_t i = 0; i < bc.inner; ++i) {
      const std::size_t k = o * bc.inner + i;
      out[k] = fwd(av[bc.a_small ? i : k], bv[bc.b_small ? i : k]);
    }
  }
  return make_result(bc.out, std::move(out), {a, b}, [bc, da, db](Node& self) {
    Node& pa = self.parent(0);
    Node& pb = self.parent(1);
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (std::size_t o = 0; o < bc.outer; ++o) {
      for (std::size_t i = 0; i < bc.inner; ++i) {
        const std::size_t k = o * bc.inner + i;
        const std::size_t ia = bc.a_small ? i : k;
        const std::size_t ib = bc.b_small ? i : k;
        const double g = self.grad[k];
        if (pa.requires_grad) pa.grad[ia] += g * da(pa.value[ia], pb.value[ib], self.value[k]);
        if (pb.requires_grad) pb.grad[ib] += g * db(pa.value[ia], pb.value[ib], self.value[k]);
      }
    }
  });
}

// f'(x) expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary_elementwise(const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [deriv](Node& self) {
    Node& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i)
      p.grad[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
  });
}

inline double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Reciprocal condition threshold for solves.
inline constexpr double kMinRcond = 1e-13;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary_elementwise(
      a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}
inline Tensor shift(const Tensor& a, double c) {
  return detail::unary_elementwise(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
inline Tensor square(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
inline Tensor exp(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Tensor tanh(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
inline Tensor softplus(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](double x) { return detail::stable_softplus(x); },
      [](double x, double) { return detail::sigmoid(x); });
}
// Gradient is zero outside [lo, hi].
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary_elementwise(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  const auto av = a.values();
  double s = 0.0;
  for (double v : av) s += v;
  return detail::make_result(Shape{}, {s}, {a}, [](detail::Node& self) {
    auto& p = self.parent(0);
    p.ensure_grad();
    const double g = self.grad[0];
    for (double& x : p.grad) x += g;
  });
}
inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape.numel() != a.numel()) {
    throw ShapeError("reshape: " + a.shape().str() + " -> " + shape.str());
  }
  std::vector<double> v(a.values().begin(), a.values().end());
  return detail::make_result(std::move(shape), std::move(v), {a}, [](detail::Node& self) {
    auto& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

// Swaps the last two dimensions.
inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const auto& s = a.shape();
  const std::size_t nb = s.batch(), r = s.rows(), c = s.cols();
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = av[b * r * c + i * c + j];
  return detail::make_result(detail::matrix_shape(nb, s.rank() == 3, c, r), std::move(out), {a},
                             [nb, r, c](detail::Node& self) {
                               auto& p = self.parent(0);
                               p.ensure_grad();
                               for (std::size_t b = 0; b < nb; ++b)
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < c; ++j)
                                     p.grad[b * r * c + i * c + j] += self.grad[b * r * c + j * r + i];
                             });
}

// 0.5 * (A + A^T) over the last two dimensions.
inline Tensor symmetrize(const Tensor& a) {
  detail::require_matrix(a, "symmetrize");
  const auto& s = a.shape();
  if (s.rows() != s.cols()) throw ShapeError("symmetrize: non-square " + s.str());
  const std::size_t nb = s.batch(), n = s.rows();
  const auto av = a.values();
  std::vector<double> out(a.numel());
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[b * n * n + i * n + j] = 0.5 * (av[b * n * n + i * n + j] + av[b * n * n + j * n + i]);
  return detail::make_result(s, std::move(out), {a}, [nb, n](detail::Node& self) {
    auto& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          p.grad[b * n * n + i * n + j] +=
              0.5 * (self.grad[b * n * n + i * n + j] + self.grad[b * n * n + j * n + i]);
  });
}

// Concatenates along the first dimension; trailing dimensions must agree.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Shape& first = parts.front().shape();
  if (first.rank() == 0) throw ShapeError("concat_rows: scalar input");
  std::size_t lead = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.rank() != first.rank()) throw ShapeError("concat_rows: rank mismatch");
    for (std::size_t i = 1; i < s.rank(); ++i)
      if (s[i] != first[i]) throw ShapeError("concat_rows: " + s.str() + " vs " + first.str());
    lead += s[0];
  }
  auto dims = first.dims();
  dims[0] = lead;
  std::vector<double> out;
  out.reserve(Shape(dims).numel());
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return detail::make_result(Shape(std::move(dims)), std::move(out), parts, [](detail::Node& self) {
    std::size_t off = 0;
    for (auto& pp : self.parents) {
      const std::size_t n = pp->value.size();
      if (pp->requires_grad) {
        pp->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pp->grad[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

// Side-by-side concatenation of rank-2 tensors with equal row counts.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts.front().shape().rank() == 2 ? parts.front().shape()[0] : 0;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.shape().rank() != 2 || p.shape()[0] != r) throw ShapeError("concat_cols: " + p.shape().str());
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  std::vector<double> out(r * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].values();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(i * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(i * total + off));
    off += widths[k];
  }
  return detail::make_result(Shape{r, total}, std::move(out), parts, [r, total, widths](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (p.requires_grad) {
        p.ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) p.grad[i * widths[k] + j] += self.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

// Rows [begin, end) along the first dimension.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (s.rank() == 0 || begin > end || end > s[0]) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + s.str());
  }
  const std::size_t stride = s[0] == 0 ? 0 : a.numel() / s[0];
  auto dims = s.dims();
  dims[0] = end - begin;
  std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                          a.values().begin() + static_cast<std::ptrdiff_t>(end * stride));
  return detail::make_result(Shape(std::move(dims)), std::move(out), {a}, [begin, stride](detail::Node& self) {
    auto& p = self.parent(0);
    p.ensure_grad();
    const std::size_t off = begin * stride;
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[off + i] += self.grad[i];
  });
}

// Columns [begin, end) of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (s.rank() != 2 || begin > end || end > s[1]) throw ShapeError("slice_cols: bad range for " + s.str());
  const std::size_t r = s[0], c = s[1], w = end - begin;
  std::vector<double> out(r * w);
  const auto av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = av[i * c + begin + j];
  return detail::make_result(Shape{r, w}, std::move(out), {a}, [r, c, w, begin](detail::Node& self) {
    auto& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) p.grad[i * c + begin + j] += self.grad[i * w + j];
  });
}

// Selects (possibly repeated) entries along the first dimension.
inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> index) {
  const Shape& s = a.shape();
  if (s.rank() == 0) throw ShapeError("gather_rows: scalar input");
  const std::size_t stride = s[0] == 0 ? 0 : a.numel() / s[0];
  for (auto i : index)
    if (i >= s[0]) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of " + s.str());
  auto dims = s.dims();
  dims[0] = index.size();
  std::vector<double> out(index.size() * stride);
  const auto av = a.values();
  for (std::size_t k = 0; k < index.size(); ++k)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(index[k] * stride), stride,
                out.begin() + static_cast<std::ptrdiff_t>(k * stride));
  return detail::make_result(Shape(std::move(dims)), std::move(out), {a},
                             [index = std::move(index), stride](detail::Node& self) {
                               auto& p = self.parent(0);
                               p.ensure_grad();
                               for (std::size_t k = 0; k < index.size(); ++k)
                                 for (std::size_t j = 0; j < stride; ++j)
                                   p.grad[index[k] * stride + j] += self.grad[k * stride + j];
                             });
}

// Row-wise select along the first dimension: out[i] = mask[i] ? a[i] : b[i].
// Unselected rows receive exactly zero gradient.
inline Tensor where_rows(const std::vector<std::uint8_t>& mask, const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("where_rows: " + a.shape().str() + " vs " + b.shape().str());
  if (a.shape().rank() == 0 || mask.size() != a.shape()[0]) throw ShapeError("where_rows: mask length");
  const std::size_t stride = a.numel() / mask.size();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const auto src = mask[i] ? a.values() : b.values();
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * stride), stride,
                out.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return detail::make_result(a.shape(), std::move(out), {a, b}, [mask, stride](detail::Node& self) {
    auto& pa = self.parent(0);
    auto& pb = self.parent(1);
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (std::size_t i = 0; i < mask.size(); ++i) {
      auto& target = mask[i] ? pa : pb;
      if (!target.requires_grad) continue;
      for (std::size_t j = 0; j < stride; ++j) target.grad[i * stride + j] += self.grad[i * stride + j];
    }
  });
}

// Vector [n] -> diagonal matrix [n, n].
inline Tensor diag(const Tensor& v) {
  if (v.shape().rank() != 1) throw ShapeError("diag: expected vector, got " + v.shape().str());
  const std::size_t n = v.numel();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = v.values()[i];
  return detail::make_result(Shape{n, n}, std::move(out), {v}, [n](detail::Node& self) {
    auto& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) p.grad[i] += self.grad[i * n + i];
  });
}

// Diagonal of square matrices: [n, n] -> [n], [b, n, n] -> [b, n].
inline Tensor diagonal(const Tensor& a) {
  detail::require_matrix(a, "diagonal");
  const auto& s = a.shape();
  if (s.rows() != s.cols()) throw ShapeError("diagonal: non-square " + s.str());
  const std::size_t nb = s.batch(), n = s.rows();
  std::vector<double> out(nb * n);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < n; ++i) out[b * n + i] = a.values()[b * n * n + i * n + i];
  Shape os = s.rank() == 3 ? Shape{nb, n} : Shape{n};
  return detail::make_result(std::move(os), std::move(out), {a}, [nb, n](detail::Node& self) {
    auto& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t i = 0; i < n; ++i) p.grad[b * n * n + i * n + i] += self.grad[b * n + i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

// Batched matrix product. A rank-2 operand broadcasts over the batch of a rank-3 operand.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.cols() != sb.rows()) throw ShapeError("matmul: " + sa.str() + " x " + sb.str());
  const std::size_t nb = detail::broadcast_batch(sa, sb, "matmul");
  const bool batched = sa.rank() == 3 || sb.rank() == 3;
  const std::size_t r = sa.rows(), k = sa.cols(), c = sb.cols();
  const bool a_batched = sa.rank() == 3, b_batched = sb.rank() == 3;
  std::vector<double> out(nb * r * c);
  for (std::size_t i = 0; i < nb; ++i) {
    detail::ConstMatMap A(a.values().data() + (a_batched ? i * r * k : 0), r, k);
    detail::ConstMatMap B(b.values().data() + (b_batched ? i * k * c : 0), k, c);
    detail::MatMap C(out.data() + i * r * c, r, c);
    C.noalias() = A * B;
  }
  return detail::make_result(
      detail::matrix_shape(nb, batched, r, c), std::move(out), {a, b},
      [nb, r, k, c, a_batched, b_batched](detail::Node& self) {
        auto& pa = self.parent(0);
        auto& pb = self.parent(1);
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::size_t i = 0; i < nb; ++i) {
          detail::ConstMatMap G(self.grad.data() + i * r * c, r, c);
          detail::ConstMatMap A(pa.value.data() + (a_batched ? i * r * k : 0), r, k);
          detail::ConstMatMap B(pb.value.data() + (b_batched ? i * k * c : 0), k, c);
          if (pa.requires_grad) {
            detail::MatMap dA(pa.grad.data() + (a_batched ? i * r * k : 0), r, k);
            dA.noalias() += G * B.transpose();
          }
          if (pb.requires_grad) {
            detail::MatMap dB(pb.grad.data() + (b_batched ? i * k * c : 0), k, c);
            dB.noalias() += A.transpose() * G;
          }
        }
      });
}

// Solves A X = B. A: [n,n] or [b,n,n]; B: [n,c] or [b,n,c].
// Throws SingularMatrixError when the reciprocal condition estimate is below 1e-13.
inline Tensor linear_solve(const Tensor& a, const Tensor& rhs) {
  detail::require_matrix(a, "linear_solve");
  detail::require_matrix(rhs, "linear_solve");
  const Shape& sa = a.shape();
  const Shape& sb = rhs.shape();
  if (sa.rows() != sa.cols()) throw ShapeError("linear_solve: non-square " + sa.str());
  if (sb.rows() != sa.rows()) throw ShapeError("linear_solve: " + sa.str() + " vs " + sb.str());
  const std::size_t nb = detail::broadcast_batch(sa, sb, "linear_solve");
  const bool a_batched = sa.rank() == 3, b_batched = sb.rank() == 3;
  const std::size_t n = sa.rows(), c = sb.cols();
  std::vector<double> out(nb * n * c);
  auto lus = std::make_shared<std::vector<Eigen::PartialPivLU<detail::RowMat>>>();
  lus->reserve(a_batched ? nb : 1);
  for (std::size_t i = 0; i < (a_batched ? nb : 1); ++i) {
    detail::ConstMatMap A(a.values().data() + i * n * n, n, n);
    lus->emplace_back(A);
    const double rc = lus->back().rcond();
    if (!(rc >= detail::kMinRcond)) {
      throw SingularMatrixError("linear_solve: matrix is singular to working precision (rcond=" +
                                std::to_string(rc) + ")");
    }
  }
  for (std::size_t i = 0; i < nb; ++i) {
    detail::ConstMatMap B(rhs.values().data() + (b_batched ? i * n * c : 0), n, c);
    detail::MatMap X(out.data() + i * n * c, n, c);
    X = (*lus)[a_batched ? i : 0].solve(B);
  }
  return detail::make_result(
      detail::matrix_shape(nb, a_batched || b_batched, n, c), std::move(out), {a, rhs},
      [nb, n, c, a_batched, b_batched, lus](detail::Node& self) {
        auto& pa = self.parent(0);
        auto& pb = self.parent(1);
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::size_t i = 0; i < nb; ++i) {
          detail::ConstMatMap G(self.grad.data() + i * n * c, n, c);
          detail::ConstMatMap X(self.value.data() + i * n * c, n, c);
          // dB = A^-T G ; dA = -dB X^T
          detail::RowMat dB = (*lus)[a_batched ? i : 0].transpose().solve(G);
          if (pb.requires_grad) {
            detail::MatMap gB(pb.grad.data() + (b_batched ? i * n * c : 0), n, c);
            gB += dB;
          }
          if (pa.requires_grad) {
            detail::MatMap gA(pa.grad.data() + (a_batched ? i * n * n : 0), n, n);
            gA.noalias() -= dB * X.transpose();
          }
        }
      });
}

// Inverse via solve against the identity; d(X^-1) = -X^-1 dX X^-1.
inline Tensor matrix_inverse(const Tensor& a) {
  detail::require_matrix(a, "matrix_inverse");
  const Shape& s = a.shape();
  if (s.rows() != s.cols()) throw ShapeError("matrix_inverse: non-square " + s.str());
  const std::size_t nb = s.batch(), n = s.rows();
  std::vector<double> out(nb * n * n);
  for (std::size_t i = 0; i < nb; ++i) {
    detail::ConstMatMap A(a.values().data() + i * n * n, n, n);
    Eigen::PartialPivLU<detail::RowMat> lu(A);
    const double rc = lu.rcond();
    if (!(rc >= detail::kMinRcond)) {
      throw SingularMatrixError("matrix_inverse: matrix is singular to working precision");
    }
    detail::MatMap X(out.data() + i * n * n, n, n);
    X = lu.solve(detail::RowMat::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)));
  }
  return detail::make_result(s, std::move(out), {a}, [nb, n](detail::Node& self) {
    auto& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t i = 0; i < nb; ++i) {
      detail::ConstMatMap X(self.value.data() + i * n * n, n, n);
      detail::ConstMatMap G(self.grad.data() + i * n * n, n, n);
      detail::MatMap gA(p.grad.data() + i * n * n, n, n);
      gA.noalias() -= X.transpose() * G * X.transpose();
    }
  });
}

// Lower Cholesky factor L with A = L L^T. Only the lower triangle of A is read.
inline Tensor cholesky(const Tensor& a) {
  detail::require_matrix(a, "cholesky");
  const Shape& s = a.shape();
  if (s.rows() != s.cols()) throw ShapeError("cholesky: non-square " + s.str());
  const std::size_t nb = s.batch(), n = s.rows();
  std::vector<double> out(nb * n * n, 0.0);
  for (std::size_t i = 0; i < nb; ++i) {
    detail::ConstMatMap A(a.values().data() + i * n * n, n, n);
    Eigen::LLT<detail::RowMat> llt(A);
    if (llt.info() != Eigen::Success) {
      throw NotPositiveDefiniteError("cholesky: input is not positive definite");
    }
    detail::MatMap L(out.data() + i * n * n, n, n);
    L = llt.matrixL();
  }
  return detail::make_result(s, std::move(out), {a}, [nb, n](detail::Node& self) {
    auto& p = self.parent(0);
    p.ensure_grad();
    const auto N = static_cast<Eigen::Index>(n);
    for (std::size_t i = 0; i < nb; ++i) {
      detail::ConstMatMap L(self.value.data() + i * n * n, N, N);
      detail::ConstMatMap Gbar(self.grad.data() + i * n * n, N, N);
      // Phi(L^T Gbar): lower triangle with halved diagonal.
      detail::RowMat P = (L.transpose() * Gbar).triangularView<Eigen::Lower>();
      P.diagonal() *= 0.5;
      // S = L^-T P L^-1
      detail::RowMat S = L.transpose().triangularView<Eigen::Upper>().solve(P);
      S = L.transpose().triangularView<Eigen::Upper>().solve(S.transpose()).transpose();
      // Gradient w.r.t. the lower triangle of A (A is treated as symmetric).
      detail::RowMat sym = S + S.transpose();
      detail::MatMap gA(p.grad.data() + i * n * n, N, N);
      for (Eigen::Index r = 0; r < N; ++r) {
        for (Eigen::Index cc = 0; cc <= r; ++cc) gA(r, cc) += r == cc ? S(r, r) : sym(r, cc);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Backward pass

// Populates grad on every requires_grad leaf reachable from a scalar loss.
// Gradients accumulate across calls; interior nodes are released afterwards,
// so a second backward through the same graph is an error.
inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::logic_error("backward: undefined tensor");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + loss.shape().str());
  auto root = loss.node();
  if (root->released) throw std::logic_error("backward: graph already consumed by an earlier backward call");
  if (!root->requires_grad) throw std::logic_error("backward: loss does not depend on any parameter");
  if (root->is_leaf()) {
    root->ensure_grad();
    root->grad[0] += 1.0;
    return;
  }

  // Shared ownership keeps every node alive until the release loop finishes.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::shared_ptr<detail::Node>> stack{root};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    for (auto& p : n->parents) {
      if (p->requires_grad && !p->is_leaf() && seen.insert(p.get()).second) stack.push_back(p);
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(), [](const auto& x, const auto& y) { return x->seq > y->seq; });

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto& n : order) {
    if (n->grad.empty()) continue;
    n->backward_fn(*n);
  }
  for (auto& n : order) {
    n->backward_fn = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->released = true;
  }
}

}  // namespace ad
}  // namespace mrine
