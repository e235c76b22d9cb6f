#pragma once

// Tape-based reverse-mode differentiation over fin::matrix.
//
// Every op records its output value and a backward rule that maps the output
// gradient onto the gradients of its inputs. Parameter leaves accumulate
// straight into an external gradient buffer; constants do not take part in the
// backward sweep at all.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "fin/errors.hpp"
#include "fin/matrix.hpp"

namespace fin {

class tape;

class var {
 public:
  var() = default;
  var(tape* t, std::size_t id) : tape_(t), id_(id) {}

  tape& owner() const { return *tape_; }
  std::size_t id() const { return id_; }
  const matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
  const matrix& grad() const;

 private:
  tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class tape {
 public:
  using backward_fn = std::function<void(tape&, std::size_t self)>;

  tape() = default;
  tape(const tape&) = delete;
  tape& operator=(const tape&) = delete;

  var constant(matrix value) { return push(std::move(value), false, {}); }

  /// Leaf bound to a parameter. With a null grad sink it behaves as a constant.
  var parameter(const matrix& value, matrix* grad_sink) {
    node n;
    n.external = &value;
    n.external_grad = grad_sink;
    n.requires_grad = grad_sink != nullptr;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  var push(matrix value, bool requires_grad, backward_fn backward) {
    node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const matrix& value(std::size_t id) const {
    const node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  const matrix& grad(std::size_t id) const {
    const node& n = nodes_[id];
    return n.external_grad ? *n.external_grad : n.grad;
  }

  /// Gradient slot of a node, zero-initialised on first use.
  matrix& grad_slot(std::size_t id) {
    node& n = nodes_[id];
    if (n.external_grad) return *n.external_grad;
    if (n.grad.empty() && !value(id).empty()) {
      const matrix& v = value(id);
      n.grad = matrix(v.rows(), v.cols());
    }
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and sweeps the tape backwards.
  void backward(const var& out) {
    if (out.value().size() != 1) throw dimension_error("backward needs a scalar output");
    if (!requires_grad(out.id())) return;
    grad_slot(out.id())[0] += 1.0;
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct node {
    matrix value;
    matrix grad;
    const matrix* external = nullptr;
    matrix* external_grad = nullptr;
    bool requires_grad = false;
    backward_fn backward;
  };

  std::deque<node> nodes_;
};

inline const matrix& var::value() const { return tape_->value(id_); }
inline bool var::requires_grad() const { return tape_->requires_grad(id_); }
inline const matrix& var::grad() const { return tape_->grad(id_); }

namespace ad {

inline void require_same_tape(const var& a, const var& b) {
  if (&a.owner() != &b.owner()) throw error("vars recorded on different tapes");
}

}  // namespace ad

inline var matmul(const var& a, const var& b) {
  ad::require_same_tape(a, b);
  matrix out = matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  const bool rg = a.requires_grad() || b.requires_grad();
  return a.owner().push(std::move(out), rg, [ia, ib](tape& t, std::size_t self) {
    const matrix& g = t.grad(self);
    if (t.requires_grad(ia)) kernel::gemm_nt_acc(g, t.value(ib), t.grad_slot(ia));
    if (t.requires_grad(ib)) kernel::gemm_tn_acc(t.value(ia), g, t.grad_slot(ib));
  });
}

/// a * b^T
inline var matmul_nt(const var& a, const var& b) {
  ad::require_same_tape(a, b);
  if (a.cols() != b.cols()) {
    throw dimension_error("matmul_nt: " + a.value().shape_string() + " * (" + b.value().shape_string() + ")^T");
  }
  matrix out(a.rows(), b.rows());
  kernel::gemm_nt_acc(a.value(), b.value(), out);
  const std::size_t ia = a.id(), ib = b.id();
  const bool rg = a.requires_grad() || b.requires_grad();
  return a.owner().push(std::move(out), rg, [ia, ib](tape& t, std::size_t self) {
    const matrix& g = t.grad(self);
    if (t.requires_grad(ia)) kernel::gemm_nn_acc(g, t.value(ib), t.grad_slot(ia));
    if (t.requires_grad(ib)) kernel::gemm_tn_acc(g, t.value(ia), t.grad_slot(ib));
  });
}

/// a^T * b
inline var matmul_tn(const var& a, const var& b) {
  ad::require_same_tape(a, b);
  if (a.rows() != b.rows()) {
    throw dimension_error("matmul_tn: (" + a.value().shape_string() + ")^T * " + b.value().shape_string());
  }
  matrix out(a.cols(), b.cols());
  kernel::gemm_tn_acc(a.value(), b.value(), out);
  const std::size_t ia = a.id(), ib = b.id();
  const bool rg = a.requires_grad() || b.requires_grad();
  return a.owner().push(std::move(out), rg, [ia, ib](tape& t, std::size_t self) {
    const matrix& g = t.grad(self);
    if (t.requires_grad(ia)) kernel::gemm_nt_acc(t.value(ib), g, t.grad_slot(ia));
    if (t.requires_grad(ib)) kernel::gemm_nn_acc(t.value(ia), g, t.grad_slot(ib));
  });
}

inline var add(const var& a, const var& b) {
  ad::require_same_tape(a, b);
  matrix out = add(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.owner().push(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](tape& t, std::size_t self) {
                          const matrix& g = t.grad(self);
                          if (t.requires_grad(ia)) t.grad_slot(ia) += g;
                          if (t.requires_grad(ib)) t.grad_slot(ib) += g;
                        });
}

inline var sub(const var& a, const var& b) {
  ad::require_same_tape(a, b);
  matrix out = elementwise_sub(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.owner().push(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](tape& t, std::size_t self) {
                          const matrix& g = t.grad(self);
                          if (t.requires_grad(ia)) t.grad_slot(ia) += g;
                          if (t.requires_grad(ib)) {
                            matrix& gb = t.grad_slot(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          }
                        });
}

inline var mul(const var& a, const var& b) {
  ad::require_same_tape(a, b);
  matrix out = elementwise_mul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.owner().push(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](tape& t, std::size_t self) {
                          const matrix& g = t.grad(self);
                          if (t.requires_grad(ia)) {
                            const matrix& vb = t.value(ib);
                            matrix& ga = t.grad_slot(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
                          }
                          if (t.requires_grad(ib)) {
                            const matrix& va = t.value(ia);
                            matrix& gb = t.grad_slot(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
                          }
                        });
}

inline var scale(const var& a, double s) {
  matrix out = a.value();
  for (auto& v : out.values()) v *= s;
  const std::size_t ia = a.id();
  return a.owner().push(std::move(out), a.requires_grad(), [ia, s](tape& t, std::size_t self) {
    const matrix& g = t.grad(self);
    matrix& ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

/// Adds a 1 x c bias to every row of an r x c matrix.
inline var add_row_bias(const var& a, const var& bias) {
  ad::require_same_tape(a, bias);
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw dimension_error("add_row_bias: " + a.value().shape_string() + " + " + bias.value().shape_string());
  }
  matrix out = a.value();
  const matrix& b = bias.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += b[c];
  const std::size_t ia = a.id(), ib = bias.id();
  return a.owner().push(std::move(out), a.requires_grad() || bias.requires_grad(),
                        [ia, ib](tape& t, std::size_t self) {
                          const matrix& g = t.grad(self);
                          if (t.requires_grad(ia)) t.grad_slot(ia) += g;
                          if (t.requires_grad(ib)) {
                            matrix& gb = t.grad_slot(ib);
                            for (std::size_t r = 0; r < g.rows(); ++r)
                              for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
                          }
                        });
}

inline var concat_rows(std::span<const var> parts) {
  if (parts.empty()) throw dimension_error("concat_rows: no inputs");
  tape& t = parts.front().owner();
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  bool rg = false;
  std::vector<std::size_t> ids;
  ids.reserve(parts.size());
  for (const var& p : parts) {
    ad::require_same_tape(parts.front(), p);
    if (p.cols() != cols) throw dimension_error("concat_rows: column mismatch");
    rows += p.rows();
    rg = rg || p.requires_grad();
    ids.push_back(p.id());
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const var& p : parts) data.insert(data.end(), p.value().values().begin(), p.value().values().end());
  return t.push(matrix(rows, cols, std::move(data)), rg, [ids = std::move(ids)](tape& tp, std::size_t self) {
    const matrix& g = tp.grad(self);
    std::size_t offset = 0;
    for (std::size_t id : ids) {
      const std::size_t n = tp.value(id).size();
      if (tp.requires_grad(id)) {
        matrix& gi = tp.grad_slot(id);
        for (std::size_t i = 0; i < n; ++i) gi[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

inline var concat_cols(std::span<const var> parts) {
  if (parts.empty()) throw dimension_error("concat_cols: no inputs");
  tape& t = parts.front().owner();
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  bool rg = false;
  std::vector<std::size_t> ids;
  ids.reserve(parts.size());
  for (const var& p : parts) {
    ad::require_same_tape(parts.front(), p);
    if (p.rows() != rows) throw dimension_error("concat_cols: row mismatch");
    cols += p.cols();
    rg = rg || p.requires_grad();
    ids.push_back(p.id());
  }
  matrix out(rows, cols);
  std::size_t offset = 0;
  for (const var& p : parts) {
    const matrix& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out(r, offset + c) = v(r, c);
    offset += v.cols();
  }
  return t.push(std::move(out), rg, [ids = std::move(ids)](tape& tp, std::size_t self) {
    const matrix& g = tp.grad(self);
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const std::size_t w = tp.value(id).cols();
      if (tp.requires_grad(id)) {
        matrix& gi = tp.grad_slot(id);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) gi(r, c) += g(r, off + c);
      }
      off += w;
    }
  });
}

inline var concat_rows(std::initializer_list<var> parts) {
  return concat_rows(std::span<const var>(parts.begin(), parts.size()));
}
inline var concat_cols(std::initializer_list<var> parts) {
  return concat_cols(std::span<const var>(parts.begin(), parts.size()));
}

inline var slice_cols(const var& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols()) throw dimension_error("slice_cols: range past end");
  const matrix& v = a.value();
  matrix out(v.rows(), count);
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = v(r, begin + c);
  const std::size_t ia = a.id();
  return a.owner().push(std::move(out), a.requires_grad(), [ia, begin, count](tape& t, std::size_t self) {
    const matrix& g = t.grad(self);
    matrix& ga = t.grad_slot(ia);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < count; ++c) ga(r, begin + c) += g(r, c);
  });
}

inline var slice_rows(const var& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows()) throw dimension_error("slice_rows: range past end");
  const matrix& v = a.value();
  const std::size_t w = v.cols();
  std::vector<double> d(v.values().begin() + static_cast<std::ptrdiff_t>(begin * w),
                        v.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * w));
  const std::size_t ia = a.id();
  return a.owner().push(matrix(count, w, std::move(d)), a.requires_grad(),
                        [ia, begin, w](tape& t, std::size_t self) {
                          const matrix& g = t.grad(self);
                          matrix& ga = t.grad_slot(ia);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[begin * w + i] += g[i];
                        });
}

/// Rows `index[0], index[1], ...` of `a`, in that order.
inline var select_rows(const var& a, std::vector<std::size_t> index) {
  const matrix& v = a.value();
  const std::size_t w = v.cols();
  matrix out(index.size(), w);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= v.rows()) throw dimension_error("select_rows: index out of range");
    std::copy(v.row(index[i]).begin(), v.row(index[i]).end(), out.row(i).begin());
  }
  const std::size_t ia = a.id();
  return a.owner().push(std::move(out), a.requires_grad(), [ia, index = std::move(index), w](tape& t, std::size_t self) {
    const matrix& g = t.grad(self);
    matrix& ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t c = 0; c < w; ++c) ga(index[i], c) += g(i, c);
  });
}

/// Zeroes every row whose flag is 0.
inline var mask_rows(const var& a, std::vector<std::uint8_t> keep) {
  if (keep.size() != a.rows()) throw dimension_error("mask_rows: mask length mismatch");
  matrix out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    if (!keep[r])
      for (double& x : out.row(r)) x = 0.0;
  const std::size_t ia = a.id();
  return a.owner().push(std::move(out), a.requires_grad(), [ia, keep = std::move(keep)](tape& t, std::size_t self) {
    const matrix& g = t.grad(self);
    matrix& ga = t.grad_slot(ia);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      if (!keep[r]) continue;
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g(r, c);
    }
  });
}

/// Mean of the kept rows (1 x c). Zero when no row is kept.
inline var mean_rows(const var& a, const std::vector<std::uint8_t>& keep) {
  if (keep.size() != a.rows()) throw dimension_error("mean_rows: mask length mismatch");
  const matrix& v = a.value();
  std::size_t n = 0;
  for (auto k : keep) n += k ? 1 : 0;
  matrix out(1, v.cols());
  const double w = n == 0 ? 0.0 : 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < v.rows(); ++r)
    if (keep[r])
      for (std::size_t c = 0; c < v.cols(); ++c) out(0, c) += w * v(r, c);
  const std::size_t ia = a.id();
  return a.owner().push(std::move(out), a.requires_grad() && n > 0,
                        [ia, keep, w](tape& t, std::size_t self) {
                          const matrix& g = t.grad(self);
                          matrix& ga = t.grad_slot(ia);
                          for (std::size_t r = 0; r < ga.rows(); ++r)
                            if (keep[r])
                              for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += w * g(0, c);
                        });
}

/// x * sigmoid(x)
inline var silu(const var& a) {
  matrix out = a.value();
  for (auto& x : out.values()) x = x / (1.0 + std::exp(-x));
  const std::size_t ia = a.id();
  return a.owner().push(std::move(out), a.requires_grad(), [ia](tape& t, std::size_t self) {
    const matrix& g = t.grad(self);
    const matrix& x = t.value(ia);
    matrix& ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x[i]));
      ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
    }
  });
}

/// log(1 + e^x)
inline var softplus(const var& a) {
  matrix out = a.value();
  for (auto& x : out.values()) x = x > 30.0 ? x : std::log1p(std::exp(x));
  const std::size_t ia = a.id();
  return a.owner().push(std::move(out), a.requires_grad(), [ia](tape& t, std::size_t self) {
    const matrix& g = t.grad(self);
    const matrix& x = t.value(ia);
    matrix& ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (1.0 + std::exp(-x[i]));
  });
}

/// Softmax over all entries of a vector-shaped input with a keep mask.
/// Throws degenerate_input_error if every entry is masked.
inline var masked_softmax(const var& a, const std::vector<std::uint8_t>& keep) {
  const matrix& v = a.value();
  if (v.rows() != 1 && v.cols() != 1) throw dimension_error("masked_softmax expects a vector");
  std::vector<double> y = softmax(std::span<const double>(v.values()), std::span<const std::uint8_t>(keep));
  matrix out(v.rows(), v.cols(), std::move(y));
  const std::size_t ia = a.id();
  return a.owner().push(std::move(out), a.requires_grad(), [ia](tape& t, std::size_t self) {
    const matrix& g = t.grad(self);
    const matrix& y = t.value(self);
    double dot = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += y[i] * g[i];
    matrix& ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += y[i] * (g[i] - dot);
  });
}

/// Natural log of every entry, with inputs clamped from below at `floor`.
/// The clamp has zero gradient.
inline var log(const var& a, double floor = 0.0) {
  matrix out = a.value();
  for (auto& x : out.values()) x = std::log(std::max(x, floor));
  const std::size_t ia = a.id();
  return a.owner().push(std::move(out), a.requires_grad(), [ia, floor](tape& t, std::size_t self) {
    const matrix& g = t.grad(self);
    const matrix& x = t.value(ia);
    matrix& ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > floor) ga[i] += g[i] / x[i];
  });
}

inline var pick(const var& a, std::size_t r, std::size_t c) {
  if (r >= a.rows() || c >= a.cols()) throw dimension_error("pick: index out of range");
  const std::size_t ia = a.id();
  const std::size_t flat = r * a.cols() + c;
  return a.owner().push(matrix(1, 1, a.value()[flat]), a.requires_grad(), [ia, flat](tape& t, std::size_t self) {
    t.grad_slot(ia)[flat] += t.grad(self)[0];
  });
}

inline var sum(const var& a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  const std::size_t ia = a.id();
  return a.owner().push(matrix(1, 1, s), a.requires_grad(), [ia](tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& x : t.grad_slot(ia).values()) x += g;
  });
}

/// Rows of `table` selected by `ids` (n x cols). Gradients scatter-add into
/// `table_grad` when it is non-null.
inline var gather_rows(tape& t, const matrix& table, matrix* table_grad, std::vector<std::int32_t> ids) {
  const std::size_t w = table.cols();
  matrix out(ids.size(), w);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = static_cast<std::size_t>(ids[i]);
    if (ids[i] < 0 || id >= table.rows()) throw dimension_error("gather_rows: id out of range");
    std::copy(table.row(id).begin(), table.row(id).end(), out.row(i).begin());
  }
  return t.push(std::move(out), table_grad != nullptr,
                [table_grad, ids = std::move(ids), w](tape& tp, std::size_t self) {
                  const matrix& g = tp.grad(self);
                  for (std::size_t i = 0; i < ids.size(); ++i) {
                    double* dst = table_grad->data() + static_cast<std::size_t>(ids[i]) * w;
                    for (std::size_t c = 0; c < w; ++c) dst[c] += g(i, c);
                  }
                });
}

/// Weighted sum of table rows, sum_k weights[k] * table[ids[k]] (1 x cols).
inline var pooled_rows(tape& t, const matrix& table, matrix* table_grad, std::vector<std::int32_t> ids,
                       std::vector<double> weights) {
  if (ids.size() != weights.size()) throw dimension_error("pooled_rows: ids/weights length mismatch");
  const std::size_t w = table.cols();
  matrix out(1, w);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = static_cast<std::size_t>(ids[i]);
    if (ids[i] < 0 || id >= table.rows()) throw dimension_error("pooled_rows: id out of range");
    for (std::size_t c = 0; c < w; ++c) out[c] += weights[i] * table(id, c);
  }
  const bool requires_grad = table_grad != nullptr && !ids.empty();
  return t.push(std::move(out), requires_grad,
                [table_grad, ids = std::move(ids), weights = std::move(weights), w](tape& tp, std::size_t self) {
                  const matrix& g = tp.grad(self);
                  for (std::size_t i = 0; i < ids.size(); ++i) {
                    double* dst = table_grad->data() + static_cast<std::size_t>(ids[i]) * w;
                    for (std::size_t c = 0; c < w; ++c) dst[c] += weights[i] * g[c];
                  }
                });
}

}  // namespace fin
