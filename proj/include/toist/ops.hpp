#pragma once

// Differentiable operations on tape variables. Included by tensor.hpp.

#include <algorithm>
#include <limits>
#include <memory>

namespace toist::ad {

namespace detail {

inline std::string dims(Index r, Index c) { return std::to_string(r) + "x" + std::to_string(c); }

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                   to_string(b));
}

template <typename S>
bool any_grad(std::initializer_list<Var<S>> vs) {
  for (const Var<S>& v : vs)
    if (v.tape->requires_grad(v.id)) return true;
  return false;
}

template <typename S>
Tape<S>& same_tape(const char* op, Var<S> a, Var<S> b) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  return *a.tape;
}

inline Index bdim(const char* op, Index x, Index y, const Shape& sa, const Shape& sb) {
  if (x == y || y == 1) return x;
  if (x == 1) return y;
  shape_error(op, sa, sb);
}

template <typename S>
Mat<S> expand(const Mat<S>& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  if (m.rows() == 1 && m.cols() == 1) return Mat<S>::Constant(rows, cols, m(0, 0));
  if (m.rows() == 1) return m.replicate(rows, 1);
  return m.replicate(1, cols);
}

template <typename S>
Mat<S> reduce_to(const Mat<S>& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Mat<S>::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

// Result shape of a broadcasting binary op.
template <typename S>
Shape broadcast_shape(const char* op, Var<S> a, Var<S> b, Index& rows, Index& cols) {
  rows = bdim(op, a.rows(), b.rows(), a.shape(), b.shape());
  cols = bdim(op, a.cols(), b.cols(), a.shape(), b.shape());
  if (a.rows() == rows && a.cols() == cols) return a.shape();
  if (b.rows() == rows && b.cols() == cols) return b.shape();
  return Shape{rows, cols};
}

template <typename S>
void accumulate(Tape<S>& t, Index id, const Mat<S>& g) {
  if (!t.requires_grad(id)) return;
  Mat<S>& dst = t.grad_ref(id);
  dst += reduce_to(g, dst.rows(), dst.cols());
}

// Elementwise unary op; `deriv(x, y)` returns dy/dx as an array expression.
template <typename S, typename F, typename D>
Var<S> unary(Var<S> a, F f, D deriv) {
  Tape<S>& t = *a.tape;
  Mat<S> y = f(a.value());
  const Index ia = a.id;
  return t.record(a.shape(), std::move(y), t.requires_grad(ia), [ia, deriv](Tape<S>& tp, Index self) {
    const auto& n = tp.node(self);
    Mat<S> g = (n.grad.array() * deriv(tp.value(ia).array(), n.value.array())).matrix();
    tp.grad_ref(ia) += g;
  });
}

}  // namespace detail

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape("add", a, b);
  Index r, c;
  Shape s = detail::broadcast_shape("add", a, b, r, c);
  Mat<S> y = detail::expand(a.value(), r, c) + detail::expand(b.value(), r, c);
  const Index ia = a.id, ib = b.id;
  return t.record(std::move(s), std::move(y), detail::any_grad({a, b}), [ia, ib](Tape<S>& tp, Index self) {
    const Mat<S> g = tp.node(self).grad;
    detail::accumulate(tp, ia, g);
    detail::accumulate(tp, ib, g);
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape("sub", a, b);
  Index r, c;
  Shape s = detail::broadcast_shape("sub", a, b, r, c);
  Mat<S> y = detail::expand(a.value(), r, c) - detail::expand(b.value(), r, c);
  const Index ia = a.id, ib = b.id;
  return t.record(std::move(s), std::move(y), detail::any_grad({a, b}), [ia, ib](Tape<S>& tp, Index self) {
    const Mat<S> g = tp.node(self).grad;
    detail::accumulate(tp, ia, g);
    detail::accumulate<S>(tp, ib, -g);
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape("mul", a, b);
  Index r, c;
  Shape s = detail::broadcast_shape("mul", a, b, r, c);
  Mat<S> y = (detail::expand(a.value(), r, c).array() * detail::expand(b.value(), r, c).array()).matrix();
  const Index ia = a.id, ib = b.id;
  return t.record(std::move(s), std::move(y), detail::any_grad({a, b}), [ia, ib, r, c](Tape<S>& tp, Index self) {
    const Mat<S>& g = tp.node(self).grad;
    if (tp.requires_grad(ia))
      detail::accumulate<S>(tp, ia, (g.array() * detail::expand(tp.value(ib), r, c).array()).matrix());
    if (tp.requires_grad(ib))
      detail::accumulate<S>(tp, ib, (g.array() * detail::expand(tp.value(ia), r, c).array()).matrix());
  });
}

template <typename S>
Var<S> div(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape("div", a, b);
  Index r, c;
  Shape s = detail::broadcast_shape("div", a, b, r, c);
  Mat<S> y = (detail::expand(a.value(), r, c).array() / detail::expand(b.value(), r, c).array()).matrix();
  const Index ia = a.id, ib = b.id;
  return t.record(std::move(s), std::move(y), detail::any_grad({a, b}), [ia, ib, r, c](Tape<S>& tp, Index self) {
    const Mat<S>& g = tp.node(self).grad;
    const Mat<S> bb = detail::expand(tp.value(ib), r, c);
    if (tp.requires_grad(ia)) detail::accumulate<S>(tp, ia, (g.array() / bb.array()).matrix());
    if (tp.requires_grad(ib)) {
      const Mat<S>& y = tp.node(self).value;
      detail::accumulate<S>(tp, ib, (-g.array() * y.array() / bb.array()).matrix());
    }
  });
}

namespace detail {
template <typename S, bool TakeMin>
Var<S> select_extreme(const char* op, Var<S> a, Var<S> b) {
  Tape<S>& t = same_tape(op, a, b);
  Index r, c;
  Shape s = broadcast_shape(op, a, b, r, c);
  const Mat<S> av = expand(a.value(), r, c), bv = expand(b.value(), r, c);
  // mask = 1 where a is selected; ties go to a.
  Mat<S> mask = TakeMin ? (av.array() <= bv.array()).template cast<S>().matrix()
                        : (av.array() >= bv.array()).template cast<S>().matrix();
  Mat<S> y = (mask.array() * av.array() + (S(1) - mask.array()) * bv.array()).matrix();
  const Index ia = a.id, ib = b.id;
  return t.record(std::move(s), std::move(y), any_grad({a, b}), [ia, ib, mask](Tape<S>& tp, Index self) {
    const Mat<S>& g = tp.node(self).grad;
    accumulate<S>(tp, ia, (g.array() * mask.array()).matrix());
    accumulate<S>(tp, ib, (g.array() * (S(1) - mask.array())).matrix());
  });
}
}  // namespace detail

template <typename S>
Var<S> minimum(Var<S> a, Var<S> b) { return detail::select_extreme<S, true>("minimum", a, b); }
template <typename S>
Var<S> maximum(Var<S> a, Var<S> b) { return detail::select_extreme<S, false>("maximum", a, b); }

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }
template <typename S>
Var<S> operator/(Var<S> a, Var<S> b) { return div(a, b); }

template <typename S>
Var<S> scale(Var<S> a, S s) {
  return detail::unary(a, [s](const Mat<S>& x) -> Mat<S> { return x * s; },
                       [s](const auto& x, const auto&) { return x * S(0) + s; });
}

template <typename S>
Var<S> add_scalar(Var<S> a, S s) {
  return detail::unary(a, [s](const Mat<S>& x) -> Mat<S> { return (x.array() + s).matrix(); },
                       [](const auto& x, const auto&) { return x * S(0) + S(1); });
}

template <typename S>
Var<S> operator-(Var<S> a) { return scale(a, S(-1)); }
template <typename S>
Var<S> operator*(Var<S> a, S s) { return scale(a, s); }
template <typename S>
Var<S> operator*(S s, Var<S> a) { return scale(a, s); }
template <typename S>
Var<S> operator+(Var<S> a, S s) { return add_scalar(a, s); }
template <typename S>
Var<S> operator-(S s, Var<S> a) { return add_scalar(scale(a, S(-1)), s); }

template <typename S>
Var<S> exp(Var<S> a) {
  return detail::unary(a, [](const Mat<S>& x) -> Mat<S> { return x.array().exp().matrix(); },
                       [](const auto&, const auto& y) { return y; });
}

template <typename S>
Var<S> log(Var<S> a) {
  return detail::unary(a, [](const Mat<S>& x) -> Mat<S> { return x.array().log().matrix(); },
                       [](const auto& x, const auto&) { return x.inverse(); });
}

template <typename S>
Var<S> sqrt(Var<S> a) {
  return detail::unary(a, [](const Mat<S>& x) -> Mat<S> { return x.array().sqrt().matrix(); },
                       [](const auto&, const auto& y) { return S(0.5) / y; });
}

template <typename S>
Var<S> square(Var<S> a) {
  return detail::unary(a, [](const Mat<S>& x) -> Mat<S> { return x.array().square().matrix(); },
                       [](const auto& x, const auto&) { return S(2) * x; });
}

template <typename S>
Var<S> abs(Var<S> a) {
  return detail::unary(a, [](const Mat<S>& x) -> Mat<S> { return x.array().abs().matrix(); },
                       [](const auto& x, const auto&) { return x.sign(); });
}

template <typename S>
Var<S> relu(Var<S> a) {
  return detail::unary(a, [](const Mat<S>& x) -> Mat<S> { return x.array().max(S(0)).matrix(); },
                       [](const auto& x, const auto&) { return (x > S(0)).template cast<S>(); });
}

template <typename S>
Var<S> tanh(Var<S> a) {
  return detail::unary(a, [](const Mat<S>& x) -> Mat<S> { return x.array().tanh().matrix(); },
                       [](const auto&, const auto& y) { return S(1) - y.square(); });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  return detail::unary(
      a, [](const Mat<S>& x) -> Mat<S> { return (S(1) / (S(1) + (-x.array()).exp())).matrix(); },
      [](const auto&, const auto& y) { return y * (S(1) - y); });
}

// log(sigmoid(x)) = min(x, 0) - log1p(exp(-|x|)), stable for large |x|.
template <typename S>
Var<S> log_sigmoid(Var<S> a) {
  return detail::unary(
      a,
      [](const Mat<S>& x) -> Mat<S> {
        return (x.array().min(S(0)) - (-x.array().abs()).exp().log1p()).matrix();
      },
      [](const auto& x, const auto&) { return S(1) / (S(1) + x.exp()); });
}

// tanh approximation of GELU.
template <typename S>
Var<S> gelu(Var<S> a) {
  static constexpr S k0 = S(0.7978845608028654);
  static constexpr S k1 = S(0.044715);
  return detail::unary(
      a,
      [](const Mat<S>& x) -> Mat<S> {
        auto xa = x.array();
        return (S(0.5) * xa * (S(1) + (k0 * (xa + k1 * xa.cube())).tanh())).matrix();
      },
      [](const auto& x, const auto&) {
        auto th = (k0 * (x + k1 * x.cube())).tanh();
        return S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th.square()) * k0 * (S(1) + S(3) * k1 * x.square());
      });
}

template <typename S>
Var<S> clamp(Var<S> a, S lo, S hi) {
  return detail::unary(
      a, [lo, hi](const Mat<S>& x) -> Mat<S> { return x.array().max(lo).min(hi).matrix(); },
      [lo, hi](const auto& x, const auto&) { return ((x >= lo) && (x <= hi)).template cast<S>(); });
}

// x^e for non-negative x.
template <typename S>
Var<S> pow(Var<S> a, S e) {
  return detail::unary(a, [e](const Mat<S>& x) -> Mat<S> { return x.array().pow(e).matrix(); },
                       [e](const auto& x, const auto&) { return e * x.pow(e - S(1)); });
}

// Euclidean norm of all entries; the gradient at zero is taken as zero.
template <typename S>
Var<S> l2_norm(Var<S> a) {
  const S n = a.value().norm();
  const Index ia = a.id;
  return a.tape->record(Shape{1}, Mat<S>::Constant(1, 1, n), a.tape->requires_grad(ia),
                        [ia, n](Tape<S>& tp, Index self) {
                          if (n == S(0)) return;
                          tp.grad_ref(ia) += tp.value(ia) * (tp.node(self).grad(0, 0) / n);
                        });
}

template <typename S>
Var<S> detach(Var<S> a) {
  return a.tape->record(a.shape(), a.value(), false, {});
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape("matmul", a, b);
  if (a.cols() != b.rows()) detail::shape_error("matmul", a.shape(), b.shape());
  Mat<S> y = a.value() * b.value();
  const Index ia = a.id, ib = b.id;
  Shape shape{y.rows(), y.cols()};
  return t.record(std::move(shape), std::move(y), detail::any_grad({a, b}),
                  [ia, ib](Tape<S>& tp, Index self) {
                    const Mat<S>& g = tp.node(self).grad;
                    if (tp.requires_grad(ia)) tp.grad_ref(ia).noalias() += g * tp.value(ib).transpose();
                    if (tp.requires_grad(ib)) tp.grad_ref(ib).noalias() += tp.value(ia).transpose() * g;
                  });
}

// a * b^T
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape("matmul_nt", a, b);
  if (a.cols() != b.cols()) detail::shape_error("matmul_nt", a.shape(), b.shape());
  Mat<S> y = a.value() * b.value().transpose();
  const Index ia = a.id, ib = b.id;
  Shape shape{y.rows(), y.cols()};
  return t.record(std::move(shape), std::move(y), detail::any_grad({a, b}),
                  [ia, ib](Tape<S>& tp, Index self) {
                    const Mat<S>& g = tp.node(self).grad;
                    if (tp.requires_grad(ia)) tp.grad_ref(ia).noalias() += g * tp.value(ib);
                    if (tp.requires_grad(ib)) tp.grad_ref(ib).noalias() += g.transpose() * tp.value(ia);
                  });
}

template <typename S>
Var<S> transpose(Var<S> a) {
  Mat<S> y = a.value().transpose();
  const Index ia = a.id;
  Shape shape{y.rows(), y.cols()};
  return a.tape->record(std::move(shape), std::move(y), a.tape->requires_grad(ia),
                        [ia](Tape<S>& tp, Index self) {
                          tp.grad_ref(ia) += tp.node(self).grad.transpose();
                        });
}

template <typename S>
Var<S> reshape(Var<S> a, Shape shape) {
  check_shape(shape);
  if (numel(shape) != a.size()) detail::shape_error("reshape", a.shape(), shape);
  const Index r = storage_rows(shape), c = storage_cols(shape);
  Mat<S> y = Eigen::Map<const Mat<S>>(a.value().data(), r, c);
  const Index ia = a.id;
  return a.tape->record(std::move(shape), std::move(y), a.tape->requires_grad(ia),
                        [ia](Tape<S>& tp, Index self) {
                          Mat<S>& dst = tp.grad_ref(ia);
                          const Mat<S>& g = tp.node(self).grad;
                          dst += Eigen::Map<const Mat<S>>(g.data(), dst.rows(), dst.cols());
                        });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape<S>& t = *parts.front().tape;
  const Index c = parts.front().cols();
  Index r = 0;
  bool rg = false;
  for (const Var<S>& p : parts) {
    if (p.tape != &t) throw std::invalid_argument("concat_rows: operands on different tapes");
    if (p.cols() != c) detail::shape_error("concat_rows", parts.front().shape(), p.shape());
    r += p.rows();
    rg = rg || t.requires_grad(p.id);
  }
  Mat<S> y(r, c);
  std::vector<std::pair<Index, Index>> spans;
  Index off = 0;
  for (const Var<S>& p : parts) {
    y.middleRows(off, p.rows()) = p.value();
    spans.emplace_back(p.id, off);
    off += p.rows();
  }
  return t.record(Shape{r, c}, std::move(y), rg, [spans](Tape<S>& tp, Index self) {
    const Mat<S>& g = tp.node(self).grad;
    for (auto [id, o] : spans)
      if (tp.requires_grad(id)) {
        Mat<S>& dst = tp.grad_ref(id);
        dst += g.middleRows(o, dst.rows());
      }
  });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape<S>& t = *parts.front().tape;
  const Index r = parts.front().rows();
  Index c = 0;
  bool rg = false;
  for (const Var<S>& p : parts) {
    if (p.tape != &t) throw std::invalid_argument("concat_cols: operands on different tapes");
    if (p.rows() != r) detail::shape_error("concat_cols", parts.front().shape(), p.shape());
    c += p.cols();
    rg = rg || t.requires_grad(p.id);
  }
  Mat<S> y(r, c);
  std::vector<std::pair<Index, Index>> spans;
  Index off = 0;
  for (const Var<S>& p : parts) {
    y.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id, off);
    off += p.cols();
  }
  return t.record(Shape{r, c}, std::move(y), rg, [spans](Tape<S>& tp, Index self) {
    const Mat<S>& g = tp.node(self).grad;
    for (auto [id, o] : spans)
      if (tp.requires_grad(id)) {
        Mat<S>& dst = tp.grad_ref(id);
        dst += g.middleCols(o, dst.cols());
      }
  });
}

template <typename S>
Var<S> slice_rows(Var<S> a, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > a.rows())
    throw ShapeError("slice_rows: range [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") out of bounds for " + to_string(a.shape()));
  Mat<S> y = a.value().middleRows(start, count);
  const Index ia = a.id;
  return a.tape->record(Shape{count, a.cols()}, std::move(y), a.tape->requires_grad(ia),
                        [ia, start, count](Tape<S>& tp, Index self) {
                          tp.grad_ref(ia).middleRows(start, count) += tp.node(self).grad;
                        });
}

template <typename S>
Var<S> slice_cols(Var<S> a, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > a.cols())
    throw ShapeError("slice_cols: range [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") out of bounds for " + to_string(a.shape()));
  Mat<S> y = a.value().middleCols(start, count);
  const Index ia = a.id;
  return a.tape->record(Shape{a.rows(), count}, std::move(y), a.tape->requires_grad(ia),
                        [ia, start, count](Tape<S>& tp, Index self) {
                          tp.grad_ref(ia).middleCols(start, count) += tp.node(self).grad;
                        });
}

template <typename S>
Var<S> gather_rows(Var<S> a, std::vector<Index> rows) {
  Mat<S> y(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows())
      throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of bounds for " +
                       to_string(a.shape()));
    y.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  const Index ia = a.id;
  Shape shape{y.rows(), y.cols()};
  return a.tape->record(std::move(shape), std::move(y), a.tape->requires_grad(ia),
                        [ia, rows = std::move(rows)](Tape<S>& tp, Index self) {
                          Mat<S>& dst = tp.grad_ref(ia);
                          const Mat<S>& g = tp.node(self).grad;
                          for (std::size_t i = 0; i < rows.size(); ++i) dst.row(rows[i]) += g.row(static_cast<Index>(i));
                        });
}

// Copy of `a` with rows[i] replaced by row i of `b`.
template <typename S>
Var<S> replace_rows(Var<S> a, const std::vector<Index>& rows, Var<S> b) {
  Tape<S>& t = detail::same_tape("replace_rows", a, b);
  if (b.rows() != static_cast<Index>(rows.size()) || b.cols() != a.cols())
    detail::shape_error("replace_rows", a.shape(), b.shape());
  Mat<S> y = a.value();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows())
      throw ShapeError("replace_rows: row " + std::to_string(rows[i]) + " out of bounds for " +
                       to_string(a.shape()));
    y.row(rows[i]) = b.value().row(static_cast<Index>(i));
  }
  const Index ia = a.id, ib = b.id;
  return t.record(a.shape(), std::move(y), detail::any_grad({a, b}), [ia, ib, rows](Tape<S>& tp, Index self) {
    const Mat<S>& g = tp.node(self).grad;
    if (tp.requires_grad(ia)) {
      Mat<S> ga = g;
      for (Index r : rows) ga.row(r).setZero();
      tp.grad_ref(ia) += ga;
    }
    if (tp.requires_grad(ib)) {
      Mat<S>& gb = tp.grad_ref(ib);
      for (std::size_t i = 0; i < rows.size(); ++i) gb.row(static_cast<Index>(i)) += g.row(rows[i]);
    }
  });
}

// Repeat a 1 x c row `n` times.
template <typename S>
Var<S> broadcast_rows(Var<S> a, Index n) {
  if (a.rows() != 1) throw ShapeError("broadcast_rows: expected a single row, got " + to_string(a.shape()));
  Mat<S> y = a.value().replicate(n, 1);
  const Index ia = a.id;
  return a.tape->record(Shape{n, a.cols()}, std::move(y), a.tape->requires_grad(ia),
                        [ia](Tape<S>& tp, Index self) {
                          tp.grad_ref(ia) += tp.node(self).grad.colwise().sum();
                        });
}

template <typename S>
Var<S> sum(Var<S> a) {
  Mat<S> y = Mat<S>::Constant(1, 1, a.value().sum());
  const Index ia = a.id;
  return a.tape->record(Shape{1}, std::move(y), a.tape->requires_grad(ia), [ia](Tape<S>& tp, Index self) {
    tp.grad_ref(ia).array() += tp.node(self).grad(0, 0);
  });
}

// axis 0 reduces rows (result 1 x c); axis 1 reduces columns (result r x 1).
template <typename S>
Var<S> sum(Var<S> a, int axis) {
  if (axis != 0 && axis != 1) throw ShapeError("sum: axis must be 0 or 1");
  Mat<S> y = axis == 0 ? Mat<S>(a.value().colwise().sum()) : Mat<S>(a.value().rowwise().sum());
  const Index ia = a.id, r = a.rows(), c = a.cols();
  Shape shape{y.rows(), y.cols()};
  return a.tape->record(std::move(shape), std::move(y), a.tape->requires_grad(ia),
                        [ia, r, c](Tape<S>& tp, Index self) {
                          tp.grad_ref(ia) += detail::expand(tp.node(self).grad, r, c);
                        });
}

template <typename S>
Var<S> mean(Var<S> a) { return scale(sum(a), S(1) / S(a.size())); }

template <typename S>
Var<S> mean(Var<S> a, int axis) {
  const Index n = axis == 0 ? a.rows() : a.cols();
  return scale(sum(a, axis), S(1) / S(n));
}

// Row-wise softmax with max subtraction.
template <typename S>
Var<S> softmax(Var<S> a) {
  const Mat<S>& x = a.value();
  Mat<S> y = x.colwise() - x.rowwise().maxCoeff();
  y = y.array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  const Index ia = a.id;
  return a.tape->record(a.shape(), std::move(y), a.tape->requires_grad(ia), [ia](Tape<S>& tp, Index self) {
    const auto& n = tp.node(self);
    Mat<S> gy = n.grad.cwiseProduct(n.value);
    const Eigen::Matrix<S, Eigen::Dynamic, 1> dot = gy.rowwise().sum();
    tp.grad_ref(ia) += (n.value.array() * (n.grad.array().colwise() - dot.array())).matrix();
  });
}

template <typename S>
Mat<S> row_logsumexp(const Mat<S>& x) {
  Eigen::Matrix<S, Eigen::Dynamic, 1> m = x.rowwise().maxCoeff();
  Eigen::Matrix<S, Eigen::Dynamic, 1> s = (x.colwise() - m).array().exp().rowwise().sum().log().matrix();
  return m + s;
}

// Row-wise log-sum-exp; result is r x 1.
template <typename S>
Var<S> logsumexp(Var<S> a) {
  Mat<S> y = row_logsumexp(a.value());
  const Index ia = a.id;
  Shape shape{y.rows(), 1};
  return a.tape->record(std::move(shape), std::move(y), a.tape->requires_grad(ia), [ia](Tape<S>& tp, Index self) {
    const auto& n = tp.node(self);
    const Mat<S>& x = tp.value(ia);
    Mat<S> p = (x.colwise() - Eigen::Matrix<S, Eigen::Dynamic, 1>(n.value.col(0))).array().exp().matrix();
    tp.grad_ref(ia) += (p.array().colwise() * n.grad.col(0).array()).matrix();
  });
}

template <typename S>
Var<S> log_softmax(Var<S> a) {
  const Mat<S>& x = a.value();
  const Mat<S> lse = row_logsumexp(x);
  Mat<S> y = x.colwise() - Eigen::Matrix<S, Eigen::Dynamic, 1>(lse.col(0));
  const Index ia = a.id;
  return a.tape->record(a.shape(), std::move(y), a.tape->requires_grad(ia), [ia](Tape<S>& tp, Index self) {
    const auto& n = tp.node(self);
    const Eigen::Matrix<S, Eigen::Dynamic, 1> gs = n.grad.rowwise().sum();
    tp.grad_ref(ia) += (n.grad.array() - n.value.array().exp().colwise() * gs.array()).matrix();
  });
}

// Row-wise layer normalization; gamma and beta are 1 x c.
template <typename S>
Var<S> layer_norm(Var<S> a, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  const Index c = a.cols();
  if (gamma.size() != c || beta.size() != c) detail::shape_error("layer_norm", a.shape(), gamma.shape());
  const Mat<S>& x = a.value();
  Eigen::Matrix<S, Eigen::Dynamic, 1> mu = x.rowwise().mean();
  Mat<S> xc = x.colwise() - mu;
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv =
      ((xc.array().square().rowwise().sum() / S(c)) + eps).rsqrt().matrix();
  Mat<S> xhat = (xc.array().colwise() * inv.array()).matrix();
  const Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> g(gamma.value().data(), c);
  const Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> b(beta.value().data(), c);
  Mat<S> y = (xhat.array().rowwise() * g.array()).matrix();
  y.rowwise() += b;
  const Index ia = a.id, ig = gamma.id, ib = beta.id;
  return a.tape->record(
      a.shape(), std::move(y), detail::any_grad({a, gamma, beta}),
      [ia, ig, ib, xhat = std::move(xhat), inv = std::move(inv), c](Tape<S>& tp, Index self) {
        const Mat<S>& gy = tp.node(self).grad;
        if (tp.requires_grad(ib)) {
          Mat<S>& gb = tp.grad_ref(ib);
          Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(gb.data(), c) += gy.colwise().sum();
        }
        if (tp.requires_grad(ig)) {
          Mat<S>& gg = tp.grad_ref(ig);
          Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(gg.data(), c) += gy.cwiseProduct(xhat).colwise().sum();
        }
        if (tp.requires_grad(ia)) {
          const Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> gam(tp.value(ig).data(), c);
          Mat<S> gx = (gy.array().rowwise() * gam.array()).matrix();
          Eigen::Matrix<S, Eigen::Dynamic, 1> m1 = gx.rowwise().mean();
          Eigen::Matrix<S, Eigen::Dynamic, 1> m2 = gx.cwiseProduct(xhat).rowwise().mean();
          Mat<S> out = gx.colwise() - m1;
          out -= (xhat.array().colwise() * m2.array()).matrix();
          out.array().colwise() *= inv.array();
          tp.grad_ref(ia) += out;
        }
      });
}

// Multi-head scaled dot-product attention. q: nq x d, k and v: nk x d, d
// divisible by heads. When `probs` is given, each head's nq x nk attention
// matrix is appended to it.
template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, Index heads, std::vector<Mat<S>>* probs = nullptr) {
  Tape<S>& t = detail::same_tape("attention", q, k);
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows() || heads <= 0 || d % heads != 0)
    detail::shape_error("attention", q.shape(), k.shape());
  const Index dh = d / heads;
  const S sc = S(1) / std::sqrt(S(dh));
  const Mat<S>& Q = q.value();
  const Mat<S>& K = k.value();
  const Mat<S>& V = v.value();
  auto P = std::make_shared<std::vector<Mat<S>>>(static_cast<std::size_t>(heads));
  Mat<S> y(Q.rows(), d);
  for (Index h = 0; h < heads; ++h) {
    Mat<S> s = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * sc;
    s.colwise() -= s.rowwise().maxCoeff();
    s = s.array().exp().matrix();
    s.array().colwise() /= s.rowwise().sum().array();
    y.middleCols(h * dh, dh).noalias() = s * V.middleCols(h * dh, dh);
    if (probs) probs->push_back(s);
    (*P)[static_cast<std::size_t>(h)] = std::move(s);
  }
  const Index iq = q.id, ik = k.id, iv = v.id;
  return t.record(Shape{Q.rows(), d}, std::move(y), detail::any_grad({q, k, v}),
                  [iq, ik, iv, P, heads, dh, sc](Tape<S>& tp, Index self) {
                    const Mat<S>& g = tp.node(self).grad;
                    const bool gq = tp.requires_grad(iq), gk = tp.requires_grad(ik), gv = tp.requires_grad(iv);
                    for (Index h = 0; h < heads; ++h) {
                      const Mat<S>& p = (*P)[static_cast<std::size_t>(h)];
                      const auto gh = g.middleCols(h * dh, dh);
                      if (gv) tp.grad_ref(iv).middleCols(h * dh, dh).noalias() += p.transpose() * gh;
                      if (!gq && !gk) continue;
                      Mat<S> dp = gh * tp.value(iv).middleCols(h * dh, dh).transpose();
                      const Eigen::Matrix<S, Eigen::Dynamic, 1> dot = dp.cwiseProduct(p).rowwise().sum();
                      Mat<S> ds = (p.array() * (dp.array().colwise() - dot.array())).matrix() * sc;
                      if (gq) tp.grad_ref(iq).middleCols(h * dh, dh).noalias() += ds * tp.value(ik).middleCols(h * dh, dh);
                      if (gk) tp.grad_ref(ik).middleCols(h * dh, dh).noalias() += ds.transpose() * tp.value(iq).middleCols(h * dh, dh);
                    }
                  });
}

// x W + b, with b a 1 x out row.
template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) { return add(matmul(x, w), b); }

// Row-wise L2 normalization.
template <typename S>
Var<S> l2_normalize_rows(Var<S> a, S eps = S(1e-12)) {
  Var<S> n = sqrt(add_scalar(sum(square(a), 1), eps));
  return div(a, n);
}

}  // namespace toist::ad
