#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape records every operation applied to its Vars; Tape::backward walks
// the record in reverse and accumulates gradients. All values are double so
// gradients can be checked against central finite differences.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace drawmotion {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

namespace ad {

/// Multiply-adds performed by matrix products, counted per thread.
struct OpCounter {
  std::uint64_t mac = 0;
};

inline OpCounter& op_counter() {
  thread_local OpCounter counter;
  return counter;
}

/// RAII scope that resets the thread's counter and reports the delta.
class CountScope {
 public:
  CountScope() : start_(op_counter().mac) {}
  std::uint64_t macs() const { return op_counter().mac - start_; }

 private:
  std::uint64_t start_;
};

/// A named trainable array.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  /// `record` enables gradient bookkeeping. `train_params` routes parameter
  /// gradients into Param::grad; when false parameters behave as constants,
  /// which keeps shared weights read-only.
  explicit Tape(bool record = true, bool train_params = false) : record_(record), train_params_(train_params) {
    nodes_.reserve(512);
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

  Var leaf(Matrix value) { return push(std::move(value), record_, nullptr); }

  Var param(const Param& p) {
    Var v = push(p.value, false, nullptr);
    return v;
  }

  Var param(Param& p) {
    const bool grad = record_ && train_params_;
    Var v = push(p.value, grad, nullptr);
    if (grad) nodes_[v.id_].param = &p;
    return v;
  }

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  const Matrix& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  bool needs_grad(std::initializer_list<Var> vars) const {
    if (!record_) return false;
    for (const Var& v : vars) {
      if (needs_grad(v.id_)) return true;
    }
    return false;
  }

  /// Adds `g` to the gradient of node `id` when it participates in differentiation.
  template <class Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  Var push(Matrix value, bool needs_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad && record_;
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  /// Reverse sweep from a 1x1 output.
  void backward(const Var& output, double seed = 1.0) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    if (output.rows() != 1 || output.cols() != 1) throw std::invalid_argument("backward needs a scalar output");
    Node& out = nodes_[static_cast<std::size_t>(output.id_)];
    if (!out.needs_grad) return;
    out.grad = Matrix::Constant(1, 1, seed);
    for (int i = output.id_; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param != nullptr) {
        if (n.param->grad.size() == 0) n.param->zero_grad();
        n.param->grad += n.grad;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backward backward;
    Param* param = nullptr;
  };

  bool record_;
  bool train_params_;
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline const Matrix& Var::grad() const { return tape_->grad(id_); }

namespace detail {
inline void same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("vars belong to different tapes");
}
inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Products

inline Var matmul(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  op_counter().mac += static_cast<std::uint64_t>(a.rows() * a.cols() * b.cols());
  Tape& t = *a.tape();
  Matrix v;
  v.noalias() = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(v), t.needs_grad({a, b}), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, (g * tp.value(ib).transpose()).eval());
    if (tp.needs_grad(ib)) tp.accumulate(ib, (tp.value(ia).transpose() * g).eval());
  });
}

/// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  op_counter().mac += static_cast<std::uint64_t>(a.rows() * a.cols() * b.rows());
  Tape& t = *a.tape();
  Matrix v;
  v.noalias() = a.value() * b.value().transpose();
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(v), t.needs_grad({a, b}), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, (g * tp.value(ib)).eval());
    if (tp.needs_grad(ib)) tp.accumulate(ib, (g.transpose() * tp.value(ia)).eval());
  });
}

/// a^T * b
inline Var matmul_tn(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  if (a.rows() != b.rows()) throw std::invalid_argument("matmul_tn: inner dimension mismatch");
  op_counter().mac += static_cast<std::uint64_t>(a.cols() * a.rows() * b.cols());
  Tape& t = *a.tape();
  Matrix v;
  v.noalias() = a.value().transpose() * b.value();
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(v), t.needs_grad({a, b}), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, (tp.value(ib) * g.transpose()).eval());
    if (tp.needs_grad(ib)) tp.accumulate(ib, (tp.value(ia) * g).eval());
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "add");
  Tape& t = *a.tape();
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), t.needs_grad({a, b}), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "sub");
  Tape& t = *a.tape();
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), t.needs_grad({a, b}), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, (-g).eval());
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "mul");
  Tape& t = *a.tape();
  const int ia = a.id(), ib = b.id();
  return t.push(a.value().cwiseProduct(b.value()), t.needs_grad({a, b}), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)).eval());
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)).eval());
  });
}

inline Var scale(const Var& a, double s) {
  Tape& t = *a.tape();
  const int ia = a.id();
  return t.push(a.value() * s, t.needs_grad({a}), [ia, s](Tape& tp, const Matrix& g) { tp.accumulate(ia, (g * s).eval()); });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

/// Adds a 1xC row to every row of a.
inline Var add_row(const Var& a, const Var& row) {
  detail::same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: bias shape mismatch");
  Tape& t = *a.tape();
  Matrix v = a.value();
  v.rowwise() += row.value().row(0);
  const int ia = a.id(), ir = row.id();
  return t.push(std::move(v), t.needs_grad({a, row}), [ia, ir](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    if (tp.needs_grad(ir)) tp.accumulate(ir, g.colwise().sum().eval());
  });
}

/// x * sigmoid(x)
inline Var silu(const Var& a) {
  Tape& t = *a.tape();
  const Matrix& x = a.value();
  Matrix sig = (1.0 + (-x.array()).exp()).inverse().matrix();
  Matrix v = x.cwiseProduct(sig);
  const int ia = a.id();
  return t.push(std::move(v), t.needs_grad({a}), [ia, sig = std::move(sig)](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(ia);
    const auto d = sig.array() * (1.0 + xv.array() * (1.0 - sig.array()));
    tp.accumulate(ia, (g.array() * d).matrix().eval());
  });
}

inline Var tanh(const Var& a) {
  Tape& t = *a.tape();
  Matrix v = a.value().array().tanh().matrix();
  const int ia = a.id(), io = static_cast<int>(t.size());
  return t.push(std::move(v), t.needs_grad({a}), [ia, io](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(io);
    tp.accumulate(ia, (g.array() * (1.0 - y.array().square())).matrix().eval());
  });
}

// ---------------------------------------------------------------------------
// Softmax

/// Softmax across columns within each row.
inline Var softmax_rows(const Var& a) {
  Tape& t = *a.tape();
  Matrix y = a.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  const int ia = a.id(), io = static_cast<int>(t.size());
  return t.push(std::move(y), t.needs_grad({a}), [ia, io](Tape& tp, const Matrix& g) {
    const Matrix& yv = tp.value(io);
    const Vector dot = g.cwiseProduct(yv).rowwise().sum();
    Matrix gx = g;
    gx.colwise() -= dot;
    tp.accumulate(ia, yv.cwiseProduct(gx).eval());
  });
}

/// Softmax across rows within each column.
inline Var softmax_cols(const Var& a) {
  Tape& t = *a.tape();
  Matrix y = a.value();
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const double m = y.col(c).maxCoeff();
    y.col(c) = (y.col(c).array() - m).exp().matrix();
    y.col(c) /= y.col(c).sum();
  }
  const int ia = a.id(), io = static_cast<int>(t.size());
  return t.push(std::move(y), t.needs_grad({a}), [ia, io](Tape& tp, const Matrix& g) {
    const Matrix& yv = tp.value(io);
    const RowVector dot = g.cwiseProduct(yv).colwise().sum();
    Matrix gx = g;
    gx.rowwise() -= dot;
    tp.accumulate(ia, yv.cwiseProduct(gx).eval());
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var transpose(const Var& a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  return t.push(a.value().transpose(), t.needs_grad({a}),
                [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.transpose().eval()); });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Tape& t = *parts.front().tape();
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  bool grad = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p);
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    ids.push_back(p.id());
    offsets.push_back(rows);
    rows += p.rows();
    grad = grad || t.needs_grad({p});
  }
  Matrix v(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) v.middleRows(offsets[i], parts[i].rows()) = parts[i].value();
  return t.push(std::move(v), grad, [ids, offsets](Tape& tp, const Matrix& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (tp.needs_grad(ids[i])) tp.accumulate(ids[i], g.middleRows(offsets[i], tp.value(ids[i]).rows()).eval());
    }
  });
}

inline Var concat_rows(const Var& a, const Var& b) {
  const Var parts[] = {a, b};
  return concat_rows(std::span<const Var>(parts));
}

inline Var concat_cols(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row mismatch");
  Tape& t = *a.tape();
  Matrix v(a.rows(), a.cols() + b.cols());
  v << a.value(), b.value();
  const int ia = a.id(), ib = b.id();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return t.push(std::move(v), t.needs_grad({a, b}), [ia, ib, ca, cb](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g.leftCols(ca).eval());
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.rightCols(cb).eval());
  });
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
  Tape& t = *a.tape();
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return t.push(a.value().middleRows(start, count), t.needs_grad({a}),
                [ia, start, count, rows, cols](Tape& tp, const Matrix& g) {
                  Matrix full = Matrix::Zero(rows, cols);
                  full.middleRows(start, count) = g;
                  tp.accumulate(ia, full);
                });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
  Tape& t = *a.tape();
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return t.push(a.value().middleCols(start, count), t.needs_grad({a}),
                [ia, start, count, rows, cols](Tape& tp, const Matrix& g) {
                  Matrix full = Matrix::Zero(rows, cols);
                  full.middleCols(start, count) = g;
                  tp.accumulate(ia, full);
                });
}

/// out[i] = a[i - shift] where valid, zero elsewhere. With `segment` > 0 the
/// rows form consecutive blocks of that length and nothing crosses a block.
inline Var shift_rows(const Var& a, Eigen::Index shift, Eigen::Index segment = 0) {
  Tape& t = *a.tape();
  const Eigen::Index n = a.rows();
  const Eigen::Index seg = segment > 0 ? segment : n;
  if (n % seg != 0) throw std::invalid_argument("shift_rows: rows not divisible by segment");
  const Eigen::Index len = seg - std::abs(shift);
  auto apply = [seg, len, n](const Matrix& src, Eigen::Index s) {
    Matrix out = Matrix::Zero(src.rows(), src.cols());
    if (len <= 0) return out;
    for (Eigen::Index b = 0; b < n; b += seg) {
      if (s >= 0) {
        out.middleRows(b + s, len) = src.middleRows(b, len);
      } else {
        out.middleRows(b, len) = src.middleRows(b - s, len);
      }
    }
    return out;
  };
  const int ia = a.id();
  return t.push(apply(a.value(), shift), t.needs_grad({a}),
                [ia, shift, apply](Tape& tp, const Matrix& g) { tp.accumulate(ia, apply(g, -shift)); });
}

/// Mean of each consecutive block of `segment` rows.
inline Var segment_mean_rows(const Var& a, Eigen::Index segment) {
  if (segment <= 0 || a.rows() % segment != 0) throw std::invalid_argument("segment_mean_rows: bad segment");
  Tape& t = *a.tape();
  const Eigen::Index blocks = a.rows() / segment;
  Matrix v(blocks, a.cols());
  for (Eigen::Index b = 0; b < blocks; ++b) v.row(b) = a.value().middleRows(b * segment, segment).colwise().mean();
  const int ia = a.id();
  return t.push(std::move(v), t.needs_grad({a}), [ia, segment, blocks](Tape& tp, const Matrix& g) {
    Matrix back(blocks * segment, g.cols());
    for (Eigen::Index b = 0; b < blocks; ++b) {
      back.middleRows(b * segment, segment) = (g.row(b) / static_cast<double>(segment)).replicate(segment, 1);
    }
    tp.accumulate(ia, back);
  });
}

/// Rows of `table` selected by `ids`.
inline Var gather_rows(const Var& table, std::vector<int> ids) {
  Tape& t = *table.tape();
  Matrix v(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) throw std::out_of_range("gather_rows: index");
    v.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  const int it = table.id();
  const Eigen::Index rows = table.rows();
  return t.push(std::move(v), t.needs_grad({table}), [it, rows, ids = std::move(ids)](Tape& tp, const Matrix& g) {
    Matrix back = Matrix::Zero(rows, g.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) back.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    tp.accumulate(it, back);
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalization

inline Var mean_rows(const Var& a) {
  Tape& t = *a.tape();
  const double n = static_cast<double>(a.rows());
  const int ia = a.id();
  const Eigen::Index rows = a.rows();
  return t.push(a.value().colwise().mean(), t.needs_grad({a}), [ia, n, rows](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, (g.replicate(rows, 1) / n).eval());
  });
}

inline Var sum(const Var& a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return t.push(Matrix::Constant(1, 1, a.value().sum()), t.needs_grad({a}), [ia, rows, cols](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, Matrix::Constant(rows, cols, g(0, 0)));
  });
}

/// Sum of squared entries.
inline Var square_sum(const Var& a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  return t.push(Matrix::Constant(1, 1, a.value().squaredNorm()), t.needs_grad({a}),
                [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, (2.0 * g(0, 0) * tp.value(ia)).eval()); });
}

/// Row-wise layer normalization with learned gain and bias (both 1xC).
inline Var layer_norm(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5) {
  Tape& t = *a.tape();
  const Matrix& x = a.value();
  const Eigen::Index n = x.cols();
  const Vector mean = x.rowwise().mean();
  Matrix centered = x.colwise() - mean;
  const Vector inv_std = ((centered.array().square().rowwise().sum() / static_cast<double>(n)) + eps).rsqrt().matrix();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix y = xhat.array().rowwise() * gain.value().row(0).array();
  y.rowwise() += bias.value().row(0);
  const int ia = a.id(), ig = gain.id(), ib = bias.id();
  return t.push(std::move(y), t.needs_grad({a, gain, bias}),
                [ia, ig, ib, n, xhat = std::move(xhat), inv_std](Tape& tp, const Matrix& g) {
                  if (tp.needs_grad(ig)) tp.accumulate(ig, g.cwiseProduct(xhat).colwise().sum().eval());
                  if (tp.needs_grad(ib)) tp.accumulate(ib, g.colwise().sum().eval());
                  if (tp.needs_grad(ia)) {
                    const Matrix gh = g.array().rowwise() * tp.value(ig).row(0).array();
                    const Vector m1 = gh.rowwise().mean();
                    const Vector m2 = gh.cwiseProduct(xhat).rowwise().mean();
                    Matrix gx = gh;
                    gx.colwise() -= m1;
                    gx -= (xhat.array().colwise() * m2.array()).matrix();
                    gx = gx.array().colwise() * inv_std.array();
                    tp.accumulate(ia, gx);
                  }
                  (void)n;
                });
}

/// Scales each row to unit Euclidean norm.
inline Var normalize_rows(const Var& a, double eps = 1e-12) {
  Tape& t = *a.tape();
  const Vector norms = (a.value().rowwise().squaredNorm().array() + eps).sqrt().matrix();
  Matrix y = a.value().array().colwise() / norms.array();
  const int ia = a.id(), io = static_cast<int>(t.size());
  return t.push(std::move(y), t.needs_grad({a}), [ia, io, norms](Tape& tp, const Matrix& g) {
    const Matrix& yv = tp.value(io);
    const Vector dot = g.cwiseProduct(yv).rowwise().sum();
    Matrix gx = g;
    gx -= (yv.array().colwise() * dot.array()).matrix();
    gx = gx.array().colwise() / norms.array();
    tp.accumulate(ia, gx);
  });
}

/// Sum of scaled scalars or same-shape matrices: sum_i c_i * v_i.
inline Var weighted_sum(std::span<const Var> vars, std::span<const double> weights) {
  if (vars.empty() || vars.size() != weights.size()) throw std::invalid_argument("weighted_sum: arity");
  Tape& t = *vars.front().tape();
  Matrix v = Matrix::Zero(vars.front().rows(), vars.front().cols());
  bool grad = false;
  std::vector<int> ids;
  for (std::size_t i = 0; i < vars.size(); ++i) {
    detail::same_shape(vars.front(), vars[i], "weighted_sum");
    v += weights[i] * vars[i].value();
    ids.push_back(vars[i].id());
    grad = grad || t.needs_grad({vars[i]});
  }
  std::vector<double> w(weights.begin(), weights.end());
  return t.push(std::move(v), grad, [ids, w](Tape& tp, const Matrix& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (tp.needs_grad(ids[i])) tp.accumulate(ids[i], (w[i] * g).eval());
    }
  });
}

}  // namespace ad
}  // namespace drawmotion
