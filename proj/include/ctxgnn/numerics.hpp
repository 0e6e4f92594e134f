#pragma once

// Dense rank-2 reverse-mode differentiation on top of Eigen.
//
// A BasicTape records every primitive applied to BasicVar handles in creation
// order; BasicTape::backward walks it once in reverse. Parameters live outside
// the tape (BasicParam) and receive accumulated gradients when backward runs.
// Everything is templated on the scalar type; the rest of the library uses the
// double aliases at the bottom of this file.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ctxgnn {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename Derived>
std::string shape_str(const Eigen::EigenBase<Derived>& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

template <typename Scalar>
struct BasicParam {
  MatrixX<Scalar> value;
  MatrixX<Scalar> grad;

  BasicParam() = default;
  explicit BasicParam(MatrixX<Scalar> v)
      : value(std::move(v)), grad(MatrixX<Scalar>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
class BasicTape;

template <typename Scalar>
class BasicVar {
 public:
  BasicVar() = default;
  BasicVar(BasicTape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const MatrixX<Scalar>& value() const { return tape_->value(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Scalar item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("item: expected (1x1), got " + shape_str(value()));
    return value()(0, 0);
  }

  BasicTape<Scalar>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  BasicTape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class BasicTape {
 public:
  using Matrix = MatrixX<Scalar>;
  using Var = BasicVar<Scalar>;
  using Backward = std::function<void(BasicTape&, const Matrix&)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Var constant(Matrix v) {
    entries_.push_back(Entry{std::move(v), {}, {}, nullptr, nullptr, false});
    return Var(this, entries_.size() - 1);
  }

  Var param(BasicParam<Scalar>& p) {
    entries_.push_back(Entry{{}, {}, {}, &p, &p, true});
    return Var(this, entries_.size() - 1);
  }

  // Read-only view of a parameter: no copy, no gradient.
  Var frozen(const BasicParam<Scalar>& p) {
    entries_.push_back(Entry{{}, {}, {}, &p, nullptr, false});
    return Var(this, entries_.size() - 1);
  }

  // Appends an op result. `backward` receives the upstream gradient and must
  // accumulate into operand gradients through grad(); it is only invoked when
  // some operand requires a gradient.
  Var record(Matrix v, bool needs_grad, Backward backward) {
    entries_.push_back(
        Entry{std::move(v), {}, needs_grad ? std::move(backward) : Backward{}, nullptr, nullptr, needs_grad});
    return Var(this, entries_.size() - 1);
  }

  const Matrix& value(std::size_t id) const {
    const Entry& e = entries_.at(id);
    return e.view ? e.view->value : e.value;
  }

  bool requires_grad(std::size_t id) const { return entries_.at(id).requires_grad; }

  // Zero-initialised on first access.
  Matrix& grad(std::size_t id) {
    Entry& e = entries_.at(id);
    if (e.grad.size() == 0) {
      const Matrix& v = value(id);
      e.grad = Matrix::Zero(v.rows(), v.cols());
    }
    return e.grad;
  }

  // Accumulates d(loss)/d(param) into BasicParam::grad for every parameter
  // reachable from `loss`. Callers zero parameter gradients beforehand.
  void backward(const Var& loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
    if (loss.rows() != 1 || loss.cols() != 1)
      throw ShapeError("backward: loss must be (1x1), got " + shape_str(loss.value()));
    grad(loss.id()).setConstant(Scalar(1));
    for (std::size_t k = loss.id() + 1; k-- > 0;) {
      Entry& e = entries_[k];
      if (!e.requires_grad || e.grad.size() == 0) continue;
      if (e.backward) e.backward(*this, e.grad);
      if (e.sink) e.sink->grad += e.grad;
    }
  }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    Matrix value;
    Matrix grad;
    Backward backward;
    const BasicParam<Scalar>* view;
    BasicParam<Scalar>* sink;
    bool requires_grad;
  };
  // deque: references handed out by value()/grad() survive later pushes.
  std::deque<Entry> entries_;
};

namespace detail {

template <typename Scalar>
BasicTape<Scalar>& tape_of(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("operands recorded on different tapes");
  return *a.tape();
}

template <typename Scalar>
void require_same_shape(const char* op, const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
}

inline void require_heads(const char* op, Index cols, Index heads) {
  if (heads <= 0 || cols % heads != 0)
    throw ShapeError(std::string(op) + ": width " + std::to_string(cols) + " not divisible by " +
                     std::to_string(heads) + " heads");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// Forward uses a coefficient-wise product so that each output row depends only
// on the matching input row, independent of how many rows the operand has.
template <typename Scalar>
BasicVar<Scalar> matmul(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  auto& tape = detail::tape_of(a, b);
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.value()) + " x " + shape_str(b.value()));
  MatrixX<Scalar> out = a.value().lazyProduct(b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), tape.requires_grad(ia) || tape.requires_grad(ib),
                     [ia, ib](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
                       if (t.requires_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
                     });
}

template <typename Scalar>
BasicVar<Scalar> transpose(const BasicVar<Scalar>& a) {
  auto& tape = *a.tape();
  const std::size_t ia = a.id();
  return tape.record(a.value().transpose(), tape.requires_grad(ia),
                     [ia](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) { t.grad(ia) += g.transpose(); });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
BasicVar<Scalar> add(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  auto& tape = detail::tape_of(a, b);
  detail::require_same_shape("add", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(a.value() + b.value(), tape.requires_grad(ia) || tape.requires_grad(ib),
                     [ia, ib](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       if (t.requires_grad(ia)) t.grad(ia) += g;
                       if (t.requires_grad(ib)) t.grad(ib) += g;
                     });
}

template <typename Scalar>
BasicVar<Scalar> sub(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  auto& tape = detail::tape_of(a, b);
  detail::require_same_shape("sub", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(a.value() - b.value(), tape.requires_grad(ia) || tape.requires_grad(ib),
                     [ia, ib](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       if (t.requires_grad(ia)) t.grad(ia) += g;
                       if (t.requires_grad(ib)) t.grad(ib) -= g;
                     });
}

template <typename Scalar>
BasicVar<Scalar> operator+(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) { return add(a, b); }

template <typename Scalar>
BasicVar<Scalar> operator-(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) { return sub(a, b); }

template <typename Scalar>
BasicVar<Scalar> hadamard(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  auto& tape = detail::tape_of(a, b);
  detail::require_same_shape("hadamard", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(a.value().cwiseProduct(b.value()), tape.requires_grad(ia) || tape.requires_grad(ib),
                     [ia, ib](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       if (t.requires_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
                       if (t.requires_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
                     });
}

template <typename Scalar>
BasicVar<Scalar> scale(const BasicVar<Scalar>& a, Scalar s) {
  auto& tape = *a.tape();
  const std::size_t ia = a.id();
  return tape.record(a.value() * s, tape.requires_grad(ia),
                     [ia, s](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) { t.grad(ia) += g * s; });
}

// a (n x c) + row (1 x c) broadcast over rows.
template <typename Scalar>
BasicVar<Scalar> add_row(const BasicVar<Scalar>& a, const BasicVar<Scalar>& row) {
  auto& tape = detail::tape_of(a, row);
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("add_row: " + shape_str(a.value()) + " + " + shape_str(row.value()));
  MatrixX<Scalar> out = a.value();
  out.rowwise() += row.value().row(0);
  const std::size_t ia = a.id(), ir = row.id();
  return tape.record(std::move(out), tape.requires_grad(ia) || tape.requires_grad(ir),
                     [ia, ir](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       if (t.requires_grad(ia)) t.grad(ia) += g;
                       if (t.requires_grad(ir)) t.grad(ir) += g.colwise().sum();
                     });
}

// a (n x c) scaled columnwise by row (1 x c).
template <typename Scalar>
BasicVar<Scalar> mul_row(const BasicVar<Scalar>& a, const BasicVar<Scalar>& row) {
  auto& tape = detail::tape_of(a, row);
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("mul_row: " + shape_str(a.value()) + " * " + shape_str(row.value()));
  MatrixX<Scalar> out = a.value();
  for (Index i = 0; i < out.rows(); ++i) out.row(i).array() *= row.value().row(0).array();
  const std::size_t ia = a.id(), ir = row.id();
  return tape.record(std::move(out), tape.requires_grad(ia) || tape.requires_grad(ir),
                     [ia, ir](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       const auto& r = t.value(ir);
                       if (t.requires_grad(ia)) {
                         auto& ga = t.grad(ia);
                         for (Index i = 0; i < g.rows(); ++i) ga.row(i).array() += g.row(i).array() * r.row(0).array();
                       }
                       if (t.requires_grad(ir)) t.grad(ir) += g.cwiseProduct(t.value(ia)).colwise().sum();
                     });
}

template <typename Scalar>
BasicVar<Scalar> square(const BasicVar<Scalar>& a) {
  auto& tape = *a.tape();
  const std::size_t ia = a.id();
  return tape.record(a.value().array().square().matrix(), tape.requires_grad(ia),
                     [ia](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       t.grad(ia) += (g.array() * t.value(ia).array() * Scalar(2)).matrix();
                     });
}

// Exact (erf-based) GELU.
template <typename Scalar>
BasicVar<Scalar> gelu(const BasicVar<Scalar>& a) {
  auto& tape = *a.tape();
  const std::size_t ia = a.id();
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  MatrixX<Scalar> out = a.value().unaryExpr(
      [inv_sqrt2](Scalar x) { return Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2)); });
  return tape.record(std::move(out), tape.requires_grad(ia),
                     [ia, inv_sqrt2](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       const Scalar inv_sqrt_2pi = inv_sqrt2 / std::sqrt(std::numbers::pi_v<Scalar>);
                       MatrixX<Scalar> d = t.value(ia).unaryExpr([=](Scalar x) {
                         return Scalar(0.5) * (Scalar(1) + std::erf(x * inv_sqrt2)) +
                                x * inv_sqrt_2pi * std::exp(Scalar(-0.5) * x * x);
                       });
                       t.grad(ia) += g.cwiseProduct(d);
                     });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
BasicVar<Scalar> sum(const BasicVar<Scalar>& a) {
  auto& tape = *a.tape();
  const std::size_t ia = a.id();
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return tape.record(std::move(out), tape.requires_grad(ia),
                     [ia](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) { t.grad(ia).array() += g(0, 0); });
}

template <typename Scalar>
BasicVar<Scalar> mean(const BasicVar<Scalar>& a) {
  if (a.value().size() == 0) throw ShapeError("mean: empty operand");
  return scale(sum(a), Scalar(1) / Scalar(a.value().size()));
}

// Column means (1 x c); an operand with zero rows yields a zero row.
template <typename Scalar>
BasicVar<Scalar> mean_rows(const BasicVar<Scalar>& a) {
  auto& tape = *a.tape();
  const std::size_t ia = a.id();
  const Index n = a.rows();
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(1, a.cols());
  for (Index i = 0; i < n; ++i) out.row(0) += a.value().row(i);
  if (n > 0) out /= Scalar(n);
  return tape.record(std::move(out), tape.requires_grad(ia) && n > 0,
                     [ia, n](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       t.grad(ia).rowwise() += g.row(0) / Scalar(n);
                     });
}

// ---------------------------------------------------------------------------
// Row-wise normalisation

template <typename Scalar>
MatrixX<Scalar> softmax_rows_value(const MatrixX<Scalar>& m) {
  MatrixX<Scalar> out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    const Scalar mx = m.row(i).maxCoeff();
    out.row(i) = (m.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

template <typename Scalar>
BasicVar<Scalar> softmax_rows(const BasicVar<Scalar>& a) {
  if (a.cols() == 0) throw ShapeError("softmax_rows: empty rows");
  auto& tape = *a.tape();
  const std::size_t ia = a.id();
  MatrixX<Scalar> out = softmax_rows_value(a.value());
  MatrixX<Scalar> saved = out;
  return tape.record(std::move(out), tape.requires_grad(ia),
                     [ia, s = std::move(saved)](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       auto& ga = t.grad(ia);
                       for (Index i = 0; i < g.rows(); ++i) {
                         const Scalar dot = g.row(i).dot(s.row(i));
                         ga.row(i).array() += s.row(i).array() * (g.row(i).array() - dot);
                       }
                     });
}

template <typename Scalar>
BasicVar<Scalar> log_softmax_rows(const BasicVar<Scalar>& a) {
  if (a.cols() == 0) throw ShapeError("log_softmax_rows: empty rows");
  auto& tape = *a.tape();
  const std::size_t ia = a.id();
  const auto& m = a.value();
  MatrixX<Scalar> out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    const Scalar mx = m.row(i).maxCoeff();
    const Scalar lse = mx + std::log((m.row(i).array() - mx).exp().sum());
    out.row(i) = (m.row(i).array() - lse).matrix();
  }
  MatrixX<Scalar> probs = out.array().exp().matrix();
  return tape.record(std::move(out), tape.requires_grad(ia),
                     [ia, p = std::move(probs)](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       auto& ga = t.grad(ia);
                       for (Index i = 0; i < g.rows(); ++i) ga.row(i) += g.row(i) - p.row(i) * g.row(i).sum();
                     });
}

// Softmax over the rows sharing a segment id, independently per column.
// scores: E x H, segment[e] in [0, n_segments).
template <typename Scalar>
BasicVar<Scalar> segment_softmax(const BasicVar<Scalar>& scores, std::span<const Index> segment, Index n_segments) {
  const auto& s = scores.value();
  if (static_cast<Index>(segment.size()) != s.rows())
    throw ShapeError("segment_softmax: " + std::to_string(segment.size()) + " segment ids for " +
                     shape_str(s));
  const Index H = s.cols();
  MatrixX<Scalar> mx = MatrixX<Scalar>::Constant(n_segments, H, -std::numeric_limits<Scalar>::infinity());
  for (Index e = 0; e < s.rows(); ++e) {
    const Index k = segment[e];
    if (k < 0 || k >= n_segments) throw std::out_of_range("segment_softmax: segment id out of range");
    mx.row(k) = mx.row(k).cwiseMax(s.row(e));
  }
  MatrixX<Scalar> out(s.rows(), H);
  MatrixX<Scalar> denom = MatrixX<Scalar>::Zero(n_segments, H);
  for (Index e = 0; e < s.rows(); ++e) {
    out.row(e) = (s.row(e) - mx.row(segment[e])).array().exp().matrix();
    denom.row(segment[e]) += out.row(e);
  }
  for (Index e = 0; e < s.rows(); ++e) out.row(e).array() /= denom.row(segment[e]).array();

  auto& tape = *scores.tape();
  const std::size_t is = scores.id();
  std::vector<Index> seg(segment.begin(), segment.end());
  MatrixX<Scalar> saved = out;
  return tape.record(std::move(out), tape.requires_grad(is),
                     [is, n_segments, seg = std::move(seg), p = std::move(saved)](BasicTape<Scalar>& t,
                                                                                  const MatrixX<Scalar>& g) {
                       MatrixX<Scalar> dots = MatrixX<Scalar>::Zero(n_segments, p.cols());
                       for (std::size_t e = 0; e < seg.size(); ++e)
                         dots.row(seg[e]) += g.row(e).cwiseProduct(p.row(e));
                       auto& gs = t.grad(is);
                       for (std::size_t e = 0; e < seg.size(); ++e)
                         gs.row(e).array() += p.row(e).array() * (g.row(e) - dots.row(seg[e])).array();
                     });
}

// ---------------------------------------------------------------------------
// Indexing and layout

template <typename Scalar>
BasicVar<Scalar> gather_rows(const BasicVar<Scalar>& a, std::span<const Index> rows) {
  const auto& v = a.value();
  MatrixX<Scalar> out(static_cast<Index>(rows.size()), v.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= v.rows())
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " of " + shape_str(v));
    out.row(static_cast<Index>(i)) = v.row(rows[i]);
  }
  auto& tape = *a.tape();
  const std::size_t ia = a.id();
  return tape.record(std::move(out), tape.requires_grad(ia),
                     [ia, idx = std::vector<Index>(rows.begin(), rows.end())](BasicTape<Scalar>& t,
                                                                              const MatrixX<Scalar>& g) {
                       auto& ga = t.grad(ia);
                       for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Index>(i));
                     });
}

// out (n_rows x c), out[rows[i]] += a[i].
template <typename Scalar>
BasicVar<Scalar> scatter_add_rows(const BasicVar<Scalar>& a, std::span<const Index> rows, Index n_rows) {
  const auto& v = a.value();
  if (static_cast<Index>(rows.size()) != v.rows())
    throw ShapeError("scatter_add_rows: " + std::to_string(rows.size()) + " targets for " + shape_str(v));
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(n_rows, v.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n_rows)
      throw std::out_of_range("scatter_add_rows: target " + std::to_string(rows[i]) + " >= " + std::to_string(n_rows));
    out.row(rows[i]) += v.row(static_cast<Index>(i));
  }
  auto& tape = *a.tape();
  const std::size_t ia = a.id();
  return tape.record(std::move(out), tape.requires_grad(ia),
                     [ia, idx = std::vector<Index>(rows.begin(), rows.end())](BasicTape<Scalar>& t,
                                                                              const MatrixX<Scalar>& g) {
                       auto& ga = t.grad(ia);
                       for (std::size_t i = 0; i < idx.size(); ++i) ga.row(static_cast<Index>(i)) += g.row(idx[i]);
                     });
}

template <typename Scalar>
BasicVar<Scalar> concat_rows(std::span<const BasicVar<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const Index c = parts[0].cols();
  Index n = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.tape() != parts[0].tape()) throw std::invalid_argument("concat_rows: operands on different tapes");
    if (p.cols() != c)
      throw ShapeError("concat_rows: width mismatch " + shape_str(parts[0].value()) + " vs " + shape_str(p.value()));
    n += p.rows();
    needs = needs || p.tape()->requires_grad(p.id());
  }
  MatrixX<Scalar> out(n, c);
  std::vector<std::pair<std::size_t, Index>> layout;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    layout.emplace_back(p.id(), off);
    off += p.rows();
  }
  return parts[0].tape()->record(std::move(out), needs,
                                 [layout = std::move(layout)](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                                   for (const auto& [id, o] : layout) {
                                     if (!t.requires_grad(id)) continue;
                                     auto& gi = t.grad(id);
                                     gi += g.middleRows(o, gi.rows());
                                   }
                                 });
}

template <typename Scalar>
BasicVar<Scalar> concat_cols(std::span<const BasicVar<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const Index r = parts[0].rows();
  Index n = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.tape() != parts[0].tape()) throw std::invalid_argument("concat_cols: operands on different tapes");
    if (p.rows() != r)
      throw ShapeError("concat_cols: height mismatch " + shape_str(parts[0].value()) + " vs " + shape_str(p.value()));
    n += p.cols();
    needs = needs || p.tape()->requires_grad(p.id());
  }
  MatrixX<Scalar> out(r, n);
  std::vector<std::pair<std::size_t, Index>> layout;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    layout.emplace_back(p.id(), off);
    off += p.cols();
  }
  return parts[0].tape()->record(std::move(out), needs,
                                 [layout = std::move(layout)](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                                   for (const auto& [id, o] : layout) {
                                     if (!t.requires_grad(id)) continue;
                                     auto& gi = t.grad(id);
                                     gi += g.middleCols(o, gi.cols());
                                   }
                                 });
}

template <typename Scalar>
BasicVar<Scalar> concat_rows(std::initializer_list<BasicVar<Scalar>> parts) {
  return concat_rows(std::span<const BasicVar<Scalar>>(parts.begin(), parts.size()));
}

template <typename Scalar>
BasicVar<Scalar> concat_cols(std::initializer_list<BasicVar<Scalar>> parts) {
  return concat_cols(std::span<const BasicVar<Scalar>>(parts.begin(), parts.size()));
}

// ---------------------------------------------------------------------------
// Multi-head helpers. A width-(H*k) operand is viewed as H consecutive
// column blocks of width k.

// x: n x (H*k), w: (H*k) x k stacked per-head blocks -> n x (H*k) with
// block h = x_h * w_h.
template <typename Scalar>
BasicVar<Scalar> matmul_heads(const BasicVar<Scalar>& x, const BasicVar<Scalar>& w, Index heads) {
  auto& tape = detail::tape_of(x, w);
  detail::require_heads("matmul_heads", x.cols(), heads);
  const Index k = x.cols() / heads;
  if (w.rows() != x.cols() || w.cols() != k)
    throw ShapeError("matmul_heads: " + shape_str(x.value()) + " with per-head blocks " + shape_str(w.value()));
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Index h = 0; h < heads; ++h)
    out.middleCols(h * k, k) = x.value().middleCols(h * k, k).lazyProduct(w.value().middleRows(h * k, k));
  const std::size_t ix = x.id(), iw = w.id();
  return tape.record(std::move(out), tape.requires_grad(ix) || tape.requires_grad(iw),
                     [ix, iw, heads, k](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       for (Index h = 0; h < heads; ++h) {
                         if (t.requires_grad(ix))
                           t.grad(ix).middleCols(h * k, k).noalias() +=
                               g.middleCols(h * k, k) * t.value(iw).middleRows(h * k, k).transpose();
                         if (t.requires_grad(iw))
                           t.grad(iw).middleRows(h * k, k).noalias() +=
                               t.value(ix).middleCols(h * k, k).transpose() * g.middleCols(h * k, k);
                       }
                     });
}

// Per-row, per-head dot products: n x H.
template <typename Scalar>
BasicVar<Scalar> head_dot(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b, Index heads) {
  auto& tape = detail::tape_of(a, b);
  detail::require_same_shape("head_dot", a, b);
  detail::require_heads("head_dot", a.cols(), heads);
  const Index k = a.cols() / heads;
  MatrixX<Scalar> out(a.rows(), heads);
  for (Index i = 0; i < a.rows(); ++i)
    for (Index h = 0; h < heads; ++h)
      out(i, h) = a.value().row(i).segment(h * k, k).dot(b.value().row(i).segment(h * k, k));
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), tape.requires_grad(ia) || tape.requires_grad(ib),
                     [ia, ib, heads, k](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       for (Index h = 0; h < heads; ++h) {
                         if (t.requires_grad(ia))
                           t.grad(ia).middleCols(h * k, k) +=
                               g.col(h).asDiagonal() * t.value(ib).middleCols(h * k, k);
                         if (t.requires_grad(ib))
                           t.grad(ib).middleCols(h * k, k) +=
                               g.col(h).asDiagonal() * t.value(ia).middleCols(h * k, k);
                       }
                     });
}

// x: n x (H*k), alpha: n x H -> block h of row i scaled by alpha(i, h).
template <typename Scalar>
BasicVar<Scalar> head_scale(const BasicVar<Scalar>& x, const BasicVar<Scalar>& alpha, Index heads) {
  auto& tape = detail::tape_of(x, alpha);
  detail::require_heads("head_scale", x.cols(), heads);
  if (alpha.rows() != x.rows() || alpha.cols() != heads)
    throw ShapeError("head_scale: " + shape_str(x.value()) + " by " + shape_str(alpha.value()));
  const Index k = x.cols() / heads;
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Index h = 0; h < heads; ++h)
    out.middleCols(h * k, k) = alpha.value().col(h).asDiagonal() * x.value().middleCols(h * k, k);
  const std::size_t ix = x.id(), ia = alpha.id();
  return tape.record(std::move(out), tape.requires_grad(ix) || tape.requires_grad(ia),
                     [ix, ia, heads, k](BasicTape<Scalar>& t, const MatrixX<Scalar>& g) {
                       for (Index h = 0; h < heads; ++h) {
                         if (t.requires_grad(ix))
                           t.grad(ix).middleCols(h * k, k) += t.value(ia).col(h).asDiagonal() * g.middleCols(h * k, k);
                         if (t.requires_grad(ia))
                           t.grad(ia).col(h) +=
                               g.middleCols(h * k, k).cwiseProduct(t.value(ix).middleCols(h * k, k)).rowwise().sum();
                       }
                     });
}

// ---------------------------------------------------------------------------
// Losses

// Mean binary cross-entropy on logits (n x 1) against 0/1 targets.
template <typename Scalar>
BasicVar<Scalar> bce_with_logits(const BasicVar<Scalar>& logits, std::span<const Scalar> targets) {
  const auto& z = logits.value();
  if (z.cols() != 1 || z.rows() != static_cast<Index>(targets.size()) || z.rows() == 0)
    throw ShapeError("bce_with_logits: logits " + shape_str(z) + " for " + std::to_string(targets.size()) +
                     " targets");
  const Index n = z.rows();
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar x = z(i, 0), y = targets[i];
    total += std::max(x, Scalar(0)) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = total / Scalar(n);
  auto& tape = *logits.tape();
  const std::size_t il = logits.id();
  return tape.record(std::move(out), tape.requires_grad(il),
                     [il, n, y = std::vector<Scalar>(targets.begin(), targets.end())](BasicTape<Scalar>& t,
                                                                                      const MatrixX<Scalar>& g) {
                       const auto& zz = t.value(il);
                       auto& gl = t.grad(il);
                       for (Index i = 0; i < n; ++i) {
                         const Scalar p = Scalar(1) / (Scalar(1) + std::exp(-zz(i, 0)));
                         gl(i, 0) += g(0, 0) * (p - y[i]) / Scalar(n);
                       }
                     });
}

// Mean softmax cross-entropy of logits (n x C) against class indices.
template <typename Scalar>
BasicVar<Scalar> cross_entropy(const BasicVar<Scalar>& logits, std::span<const int> classes) {
  if (logits.rows() != static_cast<Index>(classes.size()) || logits.rows() == 0)
    throw ShapeError("cross_entropy: logits " + shape_str(logits.value()) + " for " +
                     std::to_string(classes.size()) + " labels");
  MatrixX<Scalar> onehot = MatrixX<Scalar>::Zero(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] < 0 || classes[i] >= logits.cols()) throw std::out_of_range("cross_entropy: class index");
    onehot(static_cast<Index>(i), classes[i]) = Scalar(1);
  }
  auto picked = hadamard(log_softmax_rows(logits), logits.tape()->constant(std::move(onehot)));
  return scale(sum(picked), Scalar(-1) / Scalar(classes.size()));
}

template <typename Scalar>
BasicVar<Scalar> mse(const BasicVar<Scalar>& prediction, const BasicVar<Scalar>& target) {
  return mean(square(sub(prediction, target)));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct BasicAdamState {
  AdamOptions options;
  long long t = 0;
  std::vector<MatrixX<Scalar>> m;
  std::vector<MatrixX<Scalar>> v;
};

// One bias-corrected Adam update over `params` using their accumulated grads.
// The parameter order must be the same on every call for a given state.
template <typename Scalar>
void adam_step(BasicAdamState<Scalar>& state, std::span<BasicParam<Scalar>* const> params) {
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.push_back(MatrixX<Scalar>::Zero(p->value.rows(), p->value.cols()));
      state.v.push_back(MatrixX<Scalar>::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (state.m.size() != params.size())
    throw ShapeError("adam_step: state tracks " + std::to_string(state.m.size()) + " parameters, got " +
                     std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols() || state.m[i].rows() != p.value.rows() ||
        state.m[i].cols() != p.value.cols())
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " value " + shape_str(p.value) + " grad " +
                       shape_str(p.grad) + " moment " + shape_str(state.m[i]));
  }
  const auto& o = state.options;
  state.t += 1;
  const Scalar b1 = Scalar(o.beta1), b2 = Scalar(o.beta2);
  const Scalar c1 = Scalar(1) - std::pow(b1, Scalar(state.t));
  const Scalar c2 = Scalar(1) - std::pow(b2, Scalar(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = b1 * m + (Scalar(1) - b1) * p.grad;
    v = b2 * v + (Scalar(1) - b2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= Scalar(o.lr) * (m.array() / c1) / ((v.array() / c2).sqrt() + Scalar(o.eps));
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  Index worst_row = 0;
  Index worst_col = 0;
  bool finite = true;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
};

template <typename Scalar>
struct NamedParam {
  std::string name;
  BasicParam<Scalar>* param;
};

// Compares tape gradients of `f` against central differences. Relative error
// is |a - n| / max(|a|, |n|, abs_floor); the floor keeps exact zeros (unused
// parameters) from dividing by zero.
template <typename Scalar, typename F>
GradCheckReport grad_check(F&& f, std::span<const NamedParam<Scalar>> params, Scalar step, double tol,
                           double abs_floor = 1e-6) {
  for (const auto& np : params) np.param->zero_grad();
  {
    BasicTape<Scalar> tape;
    BasicVar<Scalar> loss = f(tape);
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      GradCheckReport r;
      r.passed = false;
      r.entries.push_back({"<loss>", std::numeric_limits<double>::infinity(), 0, 0, false, false});
      return r;
    }
    tape.backward(loss);
  }
  auto eval = [&f]() {
    BasicTape<Scalar> tape;
    return f(tape).item();
  };
  GradCheckReport report;
  for (const auto& np : params) {
    GradCheckEntry entry{np.name};
    MatrixX<Scalar> analytic = np.param->grad;
    auto& value = np.param->value;
    for (Index r = 0; r < value.rows() && entry.finite; ++r) {
      for (Index c = 0; c < value.cols(); ++c) {
        const Scalar saved = value(r, c);
        value(r, c) = saved + step;
        const Scalar up = eval();
        value(r, c) = saved - step;
        const Scalar down = eval();
        value(r, c) = saved;
        const double numeric = static_cast<double>((up - down) / (Scalar(2) * step));
        const double a = static_cast<double>(analytic(r, c));
        if (!std::isfinite(numeric) || !std::isfinite(a)) {
          entry.finite = false;
          entry.worst_row = r;
          entry.worst_col = c;
          entry.max_rel_error = std::numeric_limits<double>::infinity();
          break;
        }
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), abs_floor});
        if (rel > entry.max_rel_error) {
          entry.max_rel_error = rel;
          entry.worst_row = r;
          entry.worst_col = c;
        }
      }
    }
    entry.passed = entry.finite && entry.max_rel_error <= tol;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.passed = report.passed && entry.passed;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

// ---------------------------------------------------------------------------

using Matrix = MatrixX<double>;
using Param = BasicParam<double>;
using Tape = BasicTape<double>;
using Var = BasicVar<double>;
using AdamState = BasicAdamState<double>;

}  // namespace ctxgnn
