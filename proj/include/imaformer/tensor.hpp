#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace imaformer {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

namespace detail {

// One node of the implicit tape (define-by-run: the graph is rebuilt on every
// forward pass). `backprop` accumulates this node's gradient into its
// parents; closures capture raw TapeNode pointers only — ownership stays with
// the `parents` vector, which keeps the upstream graph alive.
struct TapeNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<double> grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<TapeNode>> parents;
  std::function<void()> backprop;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }

  ~TapeNode() {
    // Iterative teardown: recursive shared_ptr destruction overflows the
    // stack on long op chains.
    std::vector<std::shared_ptr<TapeNode>> work;
    auto drain = [&work](std::vector<std::shared_ptr<TapeNode>>& ps) {
      for (auto& p : ps)
        if (p) work.push_back(std::move(p));
      ps.clear();
    };
    drain(parents);
    while (!work.empty()) {
      std::shared_ptr<TapeNode> n = std::move(work.back());
      work.pop_back();
      if (n.use_count() == 1) {
        n->backprop = nullptr;
        drain(n->parents);
      }
    }
  }
};

inline void check_finite(const std::vector<double>& v, const char* op) {
#ifndef NDEBUG
  for (double x : v)
    if (!std::isfinite(x))
      throw std::logic_error(std::string(op) + ": non-finite value in output");
#else
  (void)v;
  (void)op;
#endif
}

}  // namespace detail

// Dense row-major f64 tensor. Copies are shallow handles to the same node;
// use clone() for an independent leaf. Leaves with requires_grad participate
// in backward(); everything else is a plain value.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) +
                                  " implies " + std::to_string(shape_numel(shape)) +
                                  " values, got " + std::to_string(values.size()));
    node_ = std::make_shared<detail::TapeNode>();
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), 0.0);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t extent(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t numel() const { return node().data.size(); }

  const std::vector<double>& data() const { return node().data; }
  // Mutable access is for leaves (parameter updates, finite differences);
  // mutating an op output after the fact invalidates recorded gradients.
  std::vector<double>& data() { return node().data; }

  bool requires_grad() const { return node().requires_grad; }

  void set_requires_grad(bool value) {
    if (!node().parents.empty())
      throw std::logic_error("set_requires_grad: only leaf tensors may be retagged");
    node().requires_grad = value;
  }

  bool has_grad() const { return !node().grad.empty(); }

  const std::vector<double>& grad() const {
    if (!has_grad())
      throw std::logic_error("grad: no gradient present (backward not run or path unused)");
    return node().grad;
  }

  void clear_grad() {
    node().grad.clear();
    node().backward_done = false;
  }

  double value() const {
    if (numel() != 1)
      throw std::invalid_argument("value: tensor has shape " + shape_str(shape()) +
                                  ", expected a scalar");
    return node().data[0];
  }

  // Deep copy as a fresh leaf (no graph history).
  Tensor clone() const {
    return Tensor(shape(), data(), requires_grad());
  }

  const std::shared_ptr<detail::TapeNode>& handle() const {
    if (!node_) throw std::logic_error("Tensor: empty handle");
    return node_;
  }

 private:
  std::shared_ptr<detail::TapeNode> node_;

  detail::TapeNode& node() const {
    if (!node_) throw std::logic_error("Tensor: empty handle");
    return *node_;
  }
};

namespace detail {

// Raw kernels shared by forward passes and gradient closures.
namespace kernels {

// C = A(m x k) * B(k x n)
inline void matmul_nn(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    const double* ai = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      double av = ai[t];
      const double* bt = b + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

// C(m x k) += A(m x n) * B(k x n)^T
inline void matmul_nt_acc(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    double* ci = c + i * k;
    for (std::size_t j = 0; j < k; ++j) {
      const double* bj = b + j * n;
      double acc = 0.0;
      for (std::size_t t = 0; t < n; ++t) acc += ai[t] * bj[t];
      ci[j] += acc;
    }
  }
}

// C(k x n) += A(m x k)^T * B(m x n)
inline void matmul_tn_acc(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t t = 0; t < m; ++t) {
    const double* at = a + t * k;
    const double* bt = b + t * n;
    for (std::size_t i = 0; i < k; ++i) {
      double av = at[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

}  // namespace kernels

inline Tensor op_result(Shape shape, std::vector<double> data,
                        std::vector<std::shared_ptr<TapeNode>> parents,
                        const char* op_name) {
  check_finite(data, op_name);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  Tensor out(std::move(shape), std::move(data));
  out.handle()->requires_grad = rg;
  if (rg) out.handle()->parents = std::move(parents);
  return out;
}

}  // namespace detail

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank-" +
                                std::to_string(rank) + " tensor, got shape " +
                                shape_str(t.shape()));
}

// ---------------------------------------------------------------------------
// elementwise / structural ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  Tensor c = detail::op_result(a.shape(), std::move(out), {a.handle(), b.handle()}, "add");
  if (c.requires_grad()) {
    auto* an = a.handle().get();
    auto* bn = b.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [an, bn, cn] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i) bn->grad[i] += cn->grad[i];
      }
    };
  }
  return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shape mismatch: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  Tensor c = detail::op_result(a.shape(), std::move(out), {a.handle(), b.handle()}, "mul");
  if (c.requires_grad()) {
    auto* an = a.handle().get();
    auto* bn = b.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [an, bn, cn] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i)
          an->grad[i] += cn->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i)
          bn->grad[i] += cn->grad[i] * an->data[i];
      }
    };
  }
  return c;
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  const auto& ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * factor;
  Tensor c = detail::op_result(a.shape(), std::move(out), {a.handle()}, "scale");
  if (c.requires_grad()) {
    auto* an = a.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [an, cn, factor] {
      an->ensure_grad();
      for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += factor * cn->grad[i];
    };
  }
  return c;
}

// matrix + per-column bias row
inline Tensor add_bias(const Tensor& m, const Tensor& bias) {
  require_rank(m, 2, "add_bias");
  require_rank(bias, 1, "add_bias");
  std::size_t rows = m.extent(0), cols = m.extent(1);
  if (bias.extent(0) != cols)
    throw std::invalid_argument("add_bias: bias length " + std::to_string(bias.extent(0)) +
                                " does not match columns of " + shape_str(m.shape()));
  std::vector<double> out(m.numel());
  const auto& md = m.data();
  const auto& bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = md[r * cols + j] + bd[j];
  Tensor c = detail::op_result(m.shape(), std::move(out), {m.handle(), bias.handle()}, "add_bias");
  if (c.requires_grad()) {
    auto* mn = m.handle().get();
    auto* bn = bias.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [mn, bn, cn, rows, cols] {
      if (mn->requires_grad) {
        mn->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i) mn->grad[i] += cn->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < cols; ++j) bn->grad[j] += cn->grad[r * cols + j];
      }
    };
  }
  return c;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) +
                                " as " + shape_str(shape));
  Tensor c = detail::op_result(std::move(shape), a.data(), {a.handle()}, "reshape");
  if (c.requires_grad()) {
    auto* an = a.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [an, cn] {
      an->ensure_grad();
      for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i];
    };
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  std::size_t rows = a.extent(0), cols = a.extent(1);
  std::vector<double> out(a.numel());
  const auto& ad = a.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = ad[i * cols + j];
  Tensor c = detail::op_result({cols, rows}, std::move(out), {a.handle()}, "transpose");
  if (c.requires_grad()) {
    auto* an = a.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [an, cn, rows, cols] {
      an->ensure_grad();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) an->grad[i * cols + j] += cn->grad[j * rows + i];
    };
  }
  return c;
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  require_rank(a, 2, "slice_rows");
  std::size_t rows = a.extent(0), cols = a.extent(1);
  if (r0 > r1 || r1 > rows)
    throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) + ", " +
                                std::to_string(r1) + ") invalid for " + shape_str(a.shape()));
  std::size_t n = r1 - r0;
  std::vector<double> out(a.data().begin() + r0 * cols, a.data().begin() + r1 * cols);
  Tensor c = detail::op_result({n, cols}, std::move(out), {a.handle()}, "slice_rows");
  if (c.requires_grad()) {
    auto* an = a.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [an, cn, r0, cols] {
      an->ensure_grad();
      for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[r0 * cols + i] += cn->grad[i];
    };
  }
  return c;
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  require_rank(a, 2, "slice_cols");
  std::size_t rows = a.extent(0), cols = a.extent(1);
  if (c0 > c1 || c1 > cols)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + ", " +
                                std::to_string(c1) + ") invalid for " + shape_str(a.shape()));
  std::size_t n = c1 - c0;
  std::vector<double> out(rows * n);
  const auto& ad = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = ad[r * cols + c0 + j];
  Tensor c = detail::op_result({rows, n}, std::move(out), {a.handle()}, "slice_cols");
  if (c.requires_grad()) {
    auto* an = a.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [an, cn, rows, cols, c0, n] {
      an->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j)
          an->grad[r * cols + c0 + j] += cn->grad[r * n + j];
    };
  }
  return c;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (cols == 0) cols = p.extent(1);
    if (p.extent(1) != cols && p.extent(0) != 0)
      throw std::invalid_argument("concat_rows: column mismatch: " +
                                  std::to_string(cols) + " vs " + shape_str(p.shape()));
  }
  std::size_t total = 0;
  for (const auto& p : parts) total += p.extent(0);
  std::vector<double> out;
  out.reserve(total * cols);
  std::vector<std::shared_ptr<detail::TapeNode>> parents;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    parents.push_back(p.handle());
  }
  Tensor c = detail::op_result({total, cols}, std::move(out), std::move(parents), "concat_rows");
  if (c.requires_grad()) {
    std::vector<detail::TapeNode*> ps;
    for (const auto& p : parts) ps.push_back(p.handle().get());
    auto* cn = c.handle().get();
    c.handle()->backprop = [ps, cn] {
      std::size_t off = 0;
      for (auto* p : ps) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += cn->grad[off + i];
        }
        off += p->data.size();
      }
    };
  }
  return c;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  std::size_t rows = parts.front().extent(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.extent(0) != rows)
      throw std::invalid_argument("concat_cols: row mismatch: " + std::to_string(rows) +
                                  " vs " + shape_str(p.shape()));
    total += p.extent(1);
  }
  std::vector<double> out(rows * total);
  std::vector<std::shared_ptr<detail::TapeNode>> parents;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::size_t pc = p.extent(1);
    const auto& pd = p.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < pc; ++j) out[r * total + off + j] = pd[r * pc + j];
    off += pc;
    parents.push_back(p.handle());
  }
  Tensor c = detail::op_result({rows, total}, std::move(out), std::move(parents), "concat_cols");
  if (c.requires_grad()) {
    std::vector<detail::TapeNode*> ps;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
      ps.push_back(p.handle().get());
      widths.push_back(p.extent(1));
    }
    auto* cn = c.handle().get();
    c.handle()->backprop = [ps, widths, cn, rows, total] {
      std::size_t off2 = 0;
      for (std::size_t k = 0; k < ps.size(); ++k) {
        auto* p = ps[k];
        std::size_t pc = widths[k];
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < pc; ++j)
              p->grad[r * pc + j] += cn->grad[r * total + off2 + j];
        }
        off2 += pc;
      }
    };
  }
  return c;
}

// single row of a matrix as a rank-1 vector
inline Tensor row(const Tensor& a, std::size_t i) {
  Tensor r = slice_rows(a, i, i + 1);
  return reshape(r, {a.extent(1)});
}

inline Tensor as_row(const Tensor& v) {
  require_rank(v, 1, "as_row");
  return reshape(v, {1, v.extent(0)});
}

// elementwise mean of same-shaped tensors
inline Tensor average(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("average: no inputs");
  const Shape& shape = parts.front().shape();
  for (const auto& p : parts)
    if (p.shape() != shape)
      throw std::invalid_argument("average: shape mismatch: " + shape_str(shape) +
                                  " vs " + shape_str(p.shape()));
  std::size_t n = shape_numel(shape);
  double inv = 1.0 / static_cast<double>(parts.size());
  std::vector<double> out(n, 0.0);
  std::vector<std::shared_ptr<detail::TapeNode>> parents;
  for (const auto& p : parts) {
    const auto& pd = p.data();
    for (std::size_t i = 0; i < n; ++i) out[i] += pd[i];
    parents.push_back(p.handle());
  }
  for (std::size_t i = 0; i < n; ++i) out[i] *= inv;
  Tensor c = detail::op_result(shape, std::move(out), std::move(parents), "average");
  if (c.requires_grad()) {
    std::vector<detail::TapeNode*> ps;
    for (const auto& p : parts) ps.push_back(p.handle().get());
    auto* cn = c.handle().get();
    c.handle()->backprop = [ps, cn, inv] {
      for (auto* p : ps) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i) p->grad[i] += inv * cn->grad[i];
      }
    };
  }
  return c;
}

// scalars (numel-1 tensors) stacked into a rank-1 vector
inline Tensor stack_scalars(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_scalars: no inputs");
  std::vector<double> out;
  std::vector<std::shared_ptr<detail::TapeNode>> parents;
  for (const auto& p : parts) {
    if (p.numel() != 1)
      throw std::invalid_argument("stack_scalars: input has shape " + shape_str(p.shape()));
    out.push_back(p.data()[0]);
    parents.push_back(p.handle());
  }
  Tensor c = detail::op_result({parts.size()}, std::move(out), std::move(parents), "stack_scalars");
  if (c.requires_grad()) {
    std::vector<detail::TapeNode*> ps;
    for (const auto& p : parts) ps.push_back(p.handle().get());
    auto* cn = c.handle().get();
    c.handle()->backprop = [ps, cn] {
      for (std::size_t i = 0; i < ps.size(); ++i) {
        if (!ps[i]->requires_grad) continue;
        ps[i]->ensure_grad();
        ps[i]->grad[0] += cn->grad[i];
      }
    };
  }
  return c;
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor c = detail::op_result({1}, {s}, {a.handle()}, "sum");
  if (c.requires_grad()) {
    auto* an = a.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [an, cn] {
      an->ensure_grad();
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += cn->grad[0];
    };
  }
  return c;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  std::size_t m = a.extent(0), k = a.extent(1);
  std::size_t k2 = b.extent(0), n = b.extent(1);
  if (k != k2)
    throw std::invalid_argument("matmul: inner extents disagree: " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  detail::kernels::matmul_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor c = detail::op_result({m, n}, std::move(out), {a.handle(), b.handle()}, "matmul");
  if (c.requires_grad()) {
    auto* an = a.handle().get();
    auto* bn = b.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [an, bn, cn, m, k, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        detail::kernels::matmul_nt_acc(cn->grad.data(), bn->data.data(), an->grad.data(), m, n, k);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::kernels::matmul_tn_acc(an->data.data(), cn->grad.data(), bn->grad.data(), m, k, n);
      }
    };
  }
  return c;
}

// ---------------------------------------------------------------------------
// nonlinearities and reductions
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank())
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(x.shape()));
  const Shape& s = x.shape();
  std::size_t len = s[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  std::size_t slice = len * inner;
  std::size_t outer = slice == 0 ? 0 : x.numel() / slice;
  std::vector<double> out(x.numel());
  const auto& xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        double e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  Tensor c = detail::op_result(s, std::move(out), {x.handle()}, "softmax");
  if (c.requires_grad()) {
    auto* xn = x.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [xn, cn, outer, len, inner] {
      xn->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          std::size_t base = o * len * inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j)
            dot += cn->grad[base + j * inner] * cn->data[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            std::size_t idx = base + j * inner;
            xn->grad[idx] += cn->data[idx] * (cn->grad[idx] - dot);
          }
        }
    };
  }
  return c;
}

// per-row normalization over the trailing extent, then affine
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  require_rank(gamma, 1, "layer_norm");
  require_rank(beta, 1, "layer_norm");
  if (x.rank() == 0) throw std::invalid_argument("layer_norm: scalar input");
  std::size_t d = x.shape().back();
  if (gamma.extent(0) != d || beta.extent(0) != d)
    throw std::invalid_argument("layer_norm: affine params " + shape_str(gamma.shape()) +
                                "/" + shape_str(beta.shape()) + " do not match trailing extent " +
                                std::to_string(d));
  std::size_t rows = d == 0 ? 0 : x.numel() / d;
  std::vector<double> out(x.numel());
  const auto& xd = x.data();
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double* orow = out.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) orow[j] = (xr[j] - mean) * inv * gd[j] + bd[j];
  }
  Tensor c = detail::op_result(x.shape(), std::move(out),
                               {x.handle(), gamma.handle(), beta.handle()}, "layer_norm");
  if (c.requires_grad()) {
    auto* xn = x.handle().get();
    auto* gn = gamma.handle().get();
    auto* bn = beta.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [xn, gn, bn, cn, rows, d, eps] {
      std::vector<double> xhat(d), dxhat(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xn->data.data() + r * d;
        const double* dy = cn->grad.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          double c2 = xr[j] - mean;
          var += c2 * c2;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) xhat[j] = (xr[j] - mean) * inv;
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (std::size_t j = 0; j < d; ++j) gn->grad[j] += dy[j] * xhat[j];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t j = 0; j < d; ++j) bn->grad[j] += dy[j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = dy[j] * gn->data[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
          }
          mean_dxhat /= static_cast<double>(d);
          mean_dxhat_xhat /= static_cast<double>(d);
          double* dx = xn->grad.data() + r * d;
          for (std::size_t j = 0; j < d; ++j)
            dx[j] += inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
      }
    };
  }
  return c;
}

inline Tensor gelu(const Tensor& x) {
  // exact erf form: x * Phi(x)
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  std::vector<double> out(x.numel());
  const auto& xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * kInvSqrt2));
  Tensor c = detail::op_result(x.shape(), std::move(out), {x.handle()}, "gelu");
  if (c.requires_grad()) {
    auto* xn = x.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [xn, cn] {
      constexpr double kInvSqrt2Pi = 0.3989422804014326779;
      constexpr double kInvSqrt2L = 0.7071067811865475244;
      xn->ensure_grad();
      for (std::size_t i = 0; i < cn->grad.size(); ++i) {
        double v = xn->data[i];
        double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2L));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        xn->grad[i] += cn->grad[i] * (phi + v * pdf);
      }
    };
  }
  return c;
}

// cos(a, b) as a scalar tensor; exact +-1 on bitwise-identical (or
// integer-scaled) inputs because the denominator is sqrt(|a|^2 * |b|^2)
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("cosine_similarity: shape mismatch: " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto& ad = a.data();
  const auto& bd = b.data();
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    dot += ad[i] * bd[i];
    na2 += ad[i] * ad[i];
    nb2 += bd[i] * bd[i];
  }
  if (na2 == 0.0 || nb2 == 0.0)
    throw std::invalid_argument("cosine_similarity: zero-norm input");
  double denom = std::sqrt(na2 * nb2);
  double cval = std::clamp(dot / denom, -1.0, 1.0);
  Tensor c = detail::op_result({1}, {cval}, {a.handle(), b.handle()}, "cosine_similarity");
  if (c.requires_grad()) {
    auto* an = a.handle().get();
    auto* bn = b.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [an, bn, cn, denom, na2, nb2, cval] {
      double dy = cn->grad[0];
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < an->data.size(); ++i)
          an->grad[i] += dy * (bn->data[i] / denom - cval * an->data[i] / na2);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < bn->data.size(); ++i)
          bn->grad[i] += dy * (an->data[i] / denom - cval * bn->data[i] / nb2);
      }
    };
  }
  return c;
}

// Count of clamped-probability events since thread start; incremented when
// cross_entropy sees probs[true_class] below the 1e-12 floor.
inline std::size_t& cross_entropy_clamp_count() {
  thread_local std::size_t n = 0;
  return n;
}

inline Tensor cross_entropy(const Tensor& probs, std::size_t true_class) {
  require_rank(probs, 1, "cross_entropy");
  std::size_t n = probs.extent(0);
  if (true_class >= n)
    throw std::out_of_range("cross_entropy: class " + std::to_string(true_class) +
                            " out of range for " + std::to_string(n) + " probabilities");
  const auto& pd = probs.data();
  double total = 0.0;
  for (double v : pd) {
    if (v < -1e-9)
      throw std::invalid_argument("cross_entropy: negative probability " + std::to_string(v));
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-6)
    throw std::invalid_argument("cross_entropy: probabilities sum to " + std::to_string(total) +
                                ", expected 1");
  constexpr double kFloor = 1e-12;
  double p = pd[true_class];
  double clamped = std::max(p, kFloor);
  if (p < kFloor) ++cross_entropy_clamp_count();
  Tensor c = detail::op_result({1}, {-std::log(clamped)}, {probs.handle()}, "cross_entropy");
  if (c.requires_grad()) {
    auto* pn = probs.handle().get();
    auto* cn = c.handle().get();
    c.handle()->backprop = [pn, cn, true_class, clamped] {
      pn->ensure_grad();
      pn->grad[true_class] += cn->grad[0] * (-1.0 / clamped);
    };
  }
  return c;
}

// ---------------------------------------------------------------------------
// reverse pass
// ---------------------------------------------------------------------------

// Populates d(root)/d(leaf) on every reachable requires_grad leaf. Gradients
// accumulate across shared subexpressions; a second call on the same root is
// rejected (clear_grad() on the root resets the latch).
inline void backward(Tensor& root) {
  detail::TapeNode* r = root.handle().get();
  if (root.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar, got shape " +
                                shape_str(root.shape()));
  if (!root.requires_grad())
    throw std::invalid_argument("backward: root does not require grad");
  if (r->backward_done)
    throw std::logic_error("backward: already run on this root");
  r->backward_done = true;

  // Iterative post-order DFS: `order` lists inputs before consumers.
  std::vector<detail::TapeNode*> order;
  std::unordered_set<detail::TapeNode*> seen;
  struct Frame {
    detail::TapeNode* node;
    std::size_t next;
  };
  std::vector<Frame> stack;
  seen.insert(r);
  stack.push_back({r, 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      detail::TapeNode* p = f.node->parents[f.next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  r->ensure_grad();
  r->grad[0] = 1.0;
  // Reverse topological order: every node's own gradient is complete before
  // it propagates to its parents, so each node is visited exactly once.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) {
      (*it)->ensure_grad();
      (*it)->backprop();
    }
  }
}

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const std::function<Tensor(Tensor&)>& f, Tensor& x, double h) {
  if (h <= 0.0) throw std::invalid_argument("grad_check: h must be positive");
  bool saved_rg = x.requires_grad();
  x.set_requires_grad(true);
  x.clear_grad();
  Tensor y = f(x);
  backward(y);
  std::vector<double> analytic = x.grad();
  x.clear_grad();
  x.set_requires_grad(false);
  auto& xd = x.data();
  double max_rel = 0.0;
  for (std::size_t i = 0; i < xd.size(); ++i) {
    double saved = xd[i];
    xd[i] = saved + h;
    double fp = f(x).value();
    xd[i] = saved - h;
    double fm = f(x).value();
    xd[i] = saved;
    double fd = (fp - fm) / (2.0 * h);
    double rel = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
    max_rel = std::max(max_rel, rel);
  }
  x.set_requires_grad(saved_rg);
  return max_rel;
}

}  // namespace imaformer
