#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "duet/error.hpp"

namespace duet {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // sized like values once the tensor joins differentiation
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major tensor of doubles, rank 1 or 2. Scalars use shape (1).
// Handles share storage; values are treated as immutable once an op has
// consumed the tensor, only the grad slot mutates afterwards.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  static Tensor full(Shape shape, double value) {
    check_shape(shape);
    auto d = std::make_shared<detail::TensorData>();
    d->values.assign(detail::numel_of(shape), value);
    d->shape = std::move(shape);
    return Tensor(std::move(d));
  }

  static Tensor from(Shape shape, std::vector<double> values) {
    check_shape(shape);
    if (detail::numel_of(shape) != values.size())
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + detail::shape_str(shape));
    auto d = std::make_shared<detail::TensorData>();
    d->shape = std::move(shape);
    d->values = std::move(values);
    return Tensor(std::move(d));
  }

  static Tensor scalar(double value) { return from({1}, {value}); }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t numel() const { return node().values.size(); }
  bool is_scalar() const { return numel() == 1; }

  double value() const {
    if (!is_scalar()) throw ContractError("value() needs a scalar, got " + detail::shape_str(shape()));
    return node().values[0];
  }

  std::span<const double> values() const { return node().values; }
  std::span<double> values_mut() { return node().values; }

  double at(std::size_t i) const { return node().values.at(i); }
  double at(std::size_t i, std::size_t j) const {
    if (rank() != 2) throw ShapeError("at(i,j) on rank-" + std::to_string(rank()) + " tensor");
    return node().values.at(i * dim(1) + j);
  }

  bool requires_grad() const { return defined() && node().requires_grad; }

  Tensor& set_requires_grad(bool on = true) {
    auto& d = node();
    d.requires_grad = on;
    if (on && d.grad.size() != d.values.size()) d.grad.assign(d.values.size(), 0.0);
    return *this;
  }

  std::span<const double> grad() const {
    const auto& d = node();
    if (d.grad.size() != d.values.size())
      throw ContractError("gradient not populated; tensor never joined a tape");
    return d.grad;
  }

  // Handles share storage, so grad mutation is allowed through const handles.
  std::span<double> grad_mut() const {
    auto& d = node();
    if (d.grad.size() != d.values.size())
      throw ContractError("gradient not populated; tensor never joined a tape");
    return d.grad;
  }

  void zero_grad() {
    auto& d = node();
    if (d.requires_grad) d.grad.assign(d.values.size(), 0.0);
  }

  bool has_nan() const {
    for (double v : node().values)
      if (std::isnan(v)) return true;
    return false;
  }

  // Shares identity, not a deep copy.
  bool same_storage(const Tensor& other) const { return data_ == other.data_; }

  detail::TensorData& node() const {
    if (!data_) throw ContractError("use of undefined tensor");
    return *data_;
  }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> d) : data_(std::move(d)) {}

  static void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 2) throw ShapeError("rank must be 1 or 2, got " + detail::shape_str(shape));
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("zero dimension in " + detail::shape_str(shape));
  }

  std::shared_ptr<detail::TensorData> data_;
};

// Records backward rules in execution order; executing them in reverse yields
// reverse-mode gradients for every requires_grad leaf. One tape per thread,
// one backward() per tape.
class Tape {
 public:
  Tape() {
    if (active_ != nullptr) throw ContractError("a tape is already active on this thread");
    active_ = this;
  }
  ~Tape() { active_ = nullptr; }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::function<void()> backward_rule) { ops_.push_back(std::move(backward_rule)); }

  std::size_t size() const { return ops_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays every recorded rule in reverse.
  // Gradients accumulate into the grad slots of all requires_grad tensors.
  void backward(const Tensor& loss) {
    if (!loss.is_scalar()) throw ContractError("backward needs a scalar loss, got " + detail::shape_str(loss.shape()));
    if (loss.requires_grad()) {
      loss.node().grad[0] += 1.0;
      for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }
    ops_.clear();
  }

 private:
  std::vector<std::function<void()>> ops_;
  static thread_local Tape* active_;
};

inline thread_local Tape* Tape::active_ = nullptr;

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Marks the output differentiable and registers its backward rule.
inline void record(Tensor& out, std::function<void()> rule) {
  out.set_requires_grad(true);
  Tape::active()->record(std::move(rule));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

// add supports equal shapes, plus one broadcast: (m x n) + (m) replicates the
// vector across the n columns.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool broadcast = a.rank() == 2 && b.rank() == 1 && a.dim(0) == b.dim(0);
  if (!broadcast) detail::require_same_shape(a, b, "add");

  std::vector<double> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  if (broadcast) {
    const std::size_t m = a.dim(0), n = a.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + bv[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  }
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (detail::should_record({&a, &b})) {
    detail::record(r, [a, b, r, broadcast] {
      const auto g = r.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        if (broadcast) {
          const std::size_t m = a.dim(0), n = a.dim(1);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[i] += g[i * n + j];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      }
    });
  }
  return r;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (detail::should_record({&a, &b})) {
    detail::record(r, [a, b, r] {
      const auto g = r.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return r;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (detail::should_record({&a, &b})) {
    detail::record(r, [a, b, r] {
      const auto g = r.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        const auto bv2 = b.values();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        const auto av2 = a.values();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
      }
    });
  }
  return r;
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * av[i];
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (detail::should_record({&a})) {
    detail::record(r, [a, r, c] {
      const auto g = r.grad();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
  }
  return r;
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (detail::should_record({&a})) {
    detail::record(r, [a, r] {
      const auto g = r.grad();
      const auto rv = r.values();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - rv[i] * rv[i]);
    });
  }
  return r;
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (detail::should_record({&a})) {
    detail::record(r, [a, r] {
      const auto g = r.grad();
      const auto rv = r.values();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * rv[i] * (1.0 - rv[i]);
    });
  }
  return r;
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (detail::should_record({&a})) {
    detail::record(r, [a, r] {
      const auto g = r.grad();
      const auto rv = r.values();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * rv[i];
    });
  }
  return r;
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (av[i] <= 0.0) throw DomainError("log of non-positive value " + std::to_string(av[i]));
    out[i] = std::log(av[i]);
  }
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (detail::should_record({&a})) {
    detail::record(r, [a, r] {
      const auto g = r.grad();
      const auto av2 = a.values();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av2[i];
    });
  }
  return r;
}

// Value copy with the graph cut; gradients never flow past a detach.
inline Tensor detach(const Tensor& a) {
  return Tensor::from(a.shape(), std::vector<double>(a.values().begin(), a.values().end()));
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// matmul treats a rank-1 left operand as a row vector and a rank-1 right
// operand as a column vector; singleton result dims are squeezed, so
// matmul(u, v) of two rank-1 tensors is their dot product.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rank() == 2 ? a.dim(0) : 1;
  const std::size_t ka = a.rank() == 2 ? a.dim(1) : a.dim(0);
  const std::size_t kb = b.rank() == 2 ? b.dim(0) : b.dim(0);
  const std::size_t n = b.rank() == 2 ? b.dim(1) : 1;
  if (ka != kb)
    throw ShapeError("matmul inner dims: " + detail::shape_str(a.shape()) + " vs " + detail::shape_str(b.shape()));
  const std::size_t k = ka;

  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }

  Shape out_shape;
  if (a.rank() == 2 && b.rank() == 2) out_shape = {m, n};
  else if (a.rank() == 2) out_shape = {m};
  else if (b.rank() == 2) out_shape = {n};
  else out_shape = {1};

  Tensor r = Tensor::from(std::move(out_shape), std::move(out));
  if (detail::should_record({&a, &b})) {
    detail::record(r, [a, b, r, m, n, k] {
      const auto g = r.grad();
      if (a.requires_grad()) {
        // dA = G . B^T
        auto ga = a.grad_mut();
        const auto bv2 = b.values();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv2[p * n + j];
            ga[i * k + p] += acc;
          }
      }
      if (b.requires_grad()) {
        // dB = A^T . G
        auto gb = b.grad_mut();
        const auto av2 = a.values();
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) acc += av2[i * k + p] * g[i * n + j];
            gb[p * n + j] += acc;
          }
      }
    });
  }
  return r;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose needs rank 2, got " + detail::shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  Tensor r = Tensor::from({n, m}, std::move(out));
  if (detail::should_record({&a})) {
    detail::record(r, [a, r, m, n] {
      const auto g = r.grad();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return r;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (detail::numel_of(shape) != a.numel())
    throw ShapeError("reshape " + detail::shape_str(a.shape()) + " -> " + detail::shape_str(shape));
  Tensor r = Tensor::from(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()));
  if (detail::should_record({&a})) {
    detail::record(r, [a, r] {
      const auto g = r.grad();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return r;
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= a.rank()) throw ShapeError("slice axis " + std::to_string(axis) + " on " + detail::shape_str(a.shape()));
  if (len == 0 || start + len > a.dim(axis))
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) + ") exceeds dim " +
                     std::to_string(a.dim(axis)));

  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::vector<double> out(detail::numel_of(out_shape));
  const auto av = a.values();

  const std::size_t n_cols = a.rank() == 2 ? a.dim(1) : 1;
  if (a.rank() == 1 || axis == 0) {
    const std::size_t offset = start * n_cols;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[offset + i];
  } else {
    const std::size_t m = a.dim(0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < len; ++j) out[i * len + j] = av[i * n_cols + start + j];
  }

  Tensor r = Tensor::from(std::move(out_shape), std::move(out));
  if (detail::should_record({&a})) {
    detail::record(r, [a, r, axis, start, len, n_cols] {
      const auto g = r.grad();
      auto ga = a.grad_mut();
      if (a.rank() == 1 || axis == 0) {
        const std::size_t offset = start * n_cols;
        for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
      } else {
        const std::size_t m = a.dim(0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < len; ++j) ga[i * n_cols + start + j] += g[i * len + j];
      }
    });
  }
  return r;
}

inline Tensor concat(std::size_t axis, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const std::size_t rank = parts[0].rank();
  if (axis >= rank) throw ShapeError("concat axis " + std::to_string(axis) + " on rank " + std::to_string(rank));
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat rank mismatch");
    for (std::size_t ax = 0; ax < rank; ++ax)
      if (ax != axis && p.dim(ax) != parts[0].dim(ax))
        throw ShapeError("concat non-joined dims differ: " + detail::shape_str(parts[0].shape()) + " vs " +
                         detail::shape_str(p.shape()));
  }

  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) out_shape[axis] += p.dim(axis);
  std::vector<double> out(detail::numel_of(out_shape));

  if (rank == 1 || axis == 0) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const auto pv = p.values();
      std::copy(pv.begin(), pv.end(), out.begin() + static_cast<std::ptrdiff_t>(offset));
      offset += pv.size();
    }
  } else {
    const std::size_t m = out_shape[0], n = out_shape[1];
    std::size_t col0 = 0;
    for (const auto& p : parts) {
      const auto pv = p.values();
      const std::size_t pc = p.dim(1);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < pc; ++j) out[i * n + col0 + j] = pv[i * pc + j];
      col0 += pc;
    }
  }

  Tensor r = Tensor::from(std::move(out_shape), std::move(out));
  bool rec = false;
  if (Tape::active())
    for (const auto& p : parts) rec = rec || p.requires_grad();
  if (rec) {
    detail::record(r, [parts, r, axis, rank] {
      const auto g = r.grad();
      if (rank == 1 || axis == 0) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
          if (p.requires_grad()) {
            auto gp = p.grad_mut();
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
          }
          offset += p.numel();
        }
      } else {
        const std::size_t m = r.dim(0), n = r.dim(1);
        std::size_t col0 = 0;
        for (const auto& p : parts) {
          const std::size_t pc = p.dim(1);
          if (p.requires_grad()) {
            auto gp = p.grad_mut();
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * n + col0 + j];
          }
          col0 += pc;
        }
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// reductions and softmax
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  Tensor r = Tensor::scalar(acc);
  if (detail::should_record({&a})) {
    detail::record(r, [a, r] {
      const double g = r.grad()[0];
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return r;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

namespace detail {

// Iterates the 1-D lanes of a rank<=2 tensor along `axis` and applies fn to
// (base_offset, stride, length).
template <typename Fn>
void for_each_lane(const Tensor& t, std::size_t axis, Fn&& fn) {
  if (axis >= t.rank()) throw ShapeError("axis " + std::to_string(axis) + " on " + shape_str(t.shape()));
  if (t.rank() == 1) {
    fn(std::size_t{0}, std::size_t{1}, t.dim(0));
    return;
  }
  const std::size_t m = t.dim(0), n = t.dim(1);
  if (axis == 0) {
    for (std::size_t j = 0; j < n; ++j) fn(j, n, m);
  } else {
    for (std::size_t i = 0; i < m; ++i) fn(i * n, std::size_t{1}, n);
  }
}

}  // namespace detail

// Numerically stable softmax along `axis` (max-subtraction before exp).
inline Tensor softmax(const Tensor& a, std::size_t axis = 0) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  detail::for_each_lane(a, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
    double mx = av[base];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, av[base + i * stride]);
    double denom = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(av[base + i * stride] - mx);
      out[base + i * stride] = e;
      denom += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[base + i * stride] /= denom;
  });
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (detail::should_record({&a})) {
    detail::record(r, [a, r, axis] {
      const auto g = r.grad();
      const auto s = r.values();
      auto ga = a.grad_mut();
      detail::for_each_lane(r, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
        double dot = 0.0;
        for (std::size_t i = 0; i < len; ++i) dot += g[base + i * stride] * s[base + i * stride];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t ix = base + i * stride;
          ga[ix] += s[ix] * (g[ix] - dot);
        }
      });
    });
  }
  return r;
}

inline Tensor log_softmax(const Tensor& a, std::size_t axis = 0) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  detail::for_each_lane(a, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
    double mx = av[base];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, av[base + i * stride]);
    double denom = 0.0;
    for (std::size_t i = 0; i < len; ++i) denom += std::exp(av[base + i * stride] - mx);
    const double lse = mx + std::log(denom);
    for (std::size_t i = 0; i < len; ++i) out[base + i * stride] = av[base + i * stride] - lse;
  });
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (detail::should_record({&a})) {
    detail::record(r, [a, r, axis] {
      const auto g = r.grad();
      const auto lp = r.values();
      auto ga = a.grad_mut();
      detail::for_each_lane(r, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
        double gsum = 0.0;
        for (std::size_t i = 0; i < len; ++i) gsum += g[base + i * stride];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t ix = base + i * stride;
          ga[ix] += g[ix] - std::exp(lp[ix]) * gsum;
        }
      });
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// embedding lookup
// ---------------------------------------------------------------------------

// Gathers columns of an (e x V) table; output column j is table column
// indices[j]. Backward scatters into the looked-up columns only.
inline Tensor embedding_lookup(const Tensor& table, std::span<const int> indices) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2");
  if (indices.empty()) throw ContractError("embedding_lookup of empty index sequence");
  const std::size_t e = table.dim(0), v = table.dim(1), t = indices.size();
  for (int ix : indices)
    if (ix < 0 || static_cast<std::size_t>(ix) >= v)
      throw IndexError("token index " + std::to_string(ix) + " outside vocabulary of " + std::to_string(v));

  std::vector<double> out(e * t);
  const auto tv = table.values();
  for (std::size_t j = 0; j < t; ++j) {
    const auto col = static_cast<std::size_t>(indices[j]);
    for (std::size_t i = 0; i < e; ++i) out[i * t + j] = tv[i * v + col];
  }
  Tensor r = Tensor::from({e, t}, std::move(out));
  if (detail::should_record({&table})) {
    std::vector<int> idx(indices.begin(), indices.end());
    detail::record(r, [table, r, idx = std::move(idx), e, v, t] {
      const auto g = r.grad();
      auto gt = table.grad_mut();
      for (std::size_t j = 0; j < t; ++j) {
        const auto col = static_cast<std::size_t>(idx[j]);
        for (std::size_t i = 0; i < e; ++i) gt[i * v + col] += g[i * t + j];
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// small composites used all over the models
// ---------------------------------------------------------------------------

// Column j of a rank-2 tensor as a rank-1 vector.
inline Tensor column(const Tensor& a, std::size_t j) {
  if (a.rank() != 2) throw ShapeError("column() needs rank 2");
  return reshape(slice(a, 1, j, 1), {a.dim(0)});
}

// Stacks equal-length vectors as the columns of a matrix.
inline Tensor stack_columns(const std::vector<Tensor>& cols) {
  if (cols.empty()) throw ContractError("stack_columns of zero vectors");
  std::vector<Tensor> as_cols;
  as_cols.reserve(cols.size());
  for (const auto& c : cols) as_cols.push_back(reshape(c, {c.numel(), 1}));
  return concat(1, as_cols);
}

inline Tensor dot(const Tensor& u, const Tensor& v) {
  if (u.rank() != 1 || v.rank() != 1) throw ShapeError("dot needs rank-1 operands");
  return matmul(u, v);
}

// log(sum_i exp(x_i)) with the max subtracted as a constant shift; the
// gradient is exactly softmax(x) regardless of the shift.
inline Tensor log_sum_exp(const Tensor& x) {
  if (x.rank() != 1) throw ShapeError("log_sum_exp needs rank 1");
  double mx = x.values()[0];
  for (double v : x.values()) mx = std::max(mx, v);
  Tensor shifted = add(x, Tensor::full(x.shape(), -mx));
  return add(log(sum(exp(shifted))), Tensor::scalar(mx));
}

}  // namespace duet
