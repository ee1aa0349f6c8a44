#include "pimsm/engine/ops.hpp"

#include "pimsm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace pimsm::engine {
namespace {

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw ContractError("operands live on different tapes");
  return tape_of(a);
}

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

Index broadcast_dim(Index a, Index b, const Matrix& ma, const Matrix& mb) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw ParameterError("incompatible shapes " + shape(ma) + " and " + shape(mb));
}

Matrix expand(const Matrix& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return m.replicate(rows / m.rows(), cols / m.cols());
}

Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

// Shared plumbing for unary elementwise ops: `deriv` maps x to dy/dx.
template <class Fwd, class Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  Tape& t = tape_of(a);
  Matrix y = fwd(a.value());
  const std::size_t ia = a.id();
  return t.record(std::move(y), a.requires_grad(), [ia, deriv](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.cwiseProduct(deriv(tp.value(ia))));
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Matrix& va = a.value();
  const Matrix& vb = b.value();
  const Index r = broadcast_dim(va.rows(), vb.rows(), va, vb);
  const Index c = broadcast_dim(va.cols(), vb.cols(), va, vb);
  Matrix y = expand(va, r, c) + expand(vb, r, c);
  const std::size_t ia = a.id(), ib = b.id();
  const Index ar = va.rows(), ac = va.cols(), br = vb.rows(), bc = vb.cols();
  return t.record(std::move(y), a.requires_grad() || b.requires_grad(),
                  [=](Tape& tp, const Matrix& g) {
                    if (tp.requires_grad(ia)) tp.accumulate(ia, reduce_to(g, ar, ac));
                    if (tp.requires_grad(ib)) tp.accumulate(ib, reduce_to(g, br, bc));
                  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Matrix& va = a.value();
  const Matrix& vb = b.value();
  const Index r = broadcast_dim(va.rows(), vb.rows(), va, vb);
  const Index c = broadcast_dim(va.cols(), vb.cols(), va, vb);
  Matrix y = expand(va, r, c) - expand(vb, r, c);
  const std::size_t ia = a.id(), ib = b.id();
  const Index ar = va.rows(), ac = va.cols(), br = vb.rows(), bc = vb.cols();
  return t.record(std::move(y), a.requires_grad() || b.requires_grad(),
                  [=](Tape& tp, const Matrix& g) {
                    if (tp.requires_grad(ia)) tp.accumulate(ia, reduce_to(g, ar, ac));
                    if (tp.requires_grad(ib)) tp.accumulate(ib, reduce_to(-g, br, bc));
                  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Matrix& va = a.value();
  const Matrix& vb = b.value();
  const Index r = broadcast_dim(va.rows(), vb.rows(), va, vb);
  const Index c = broadcast_dim(va.cols(), vb.cols(), va, vb);
  Matrix y = expand(va, r, c).cwiseProduct(expand(vb, r, c));
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), a.requires_grad() || b.requires_grad(),
                  [=](Tape& tp, const Matrix& g) {
                    const Matrix& xa = tp.value(ia);
                    const Matrix& xb = tp.value(ib);
                    if (tp.requires_grad(ia))
                      tp.accumulate(ia, reduce_to(g.cwiseProduct(expand(xb, r, c)), xa.rows(), xa.cols()));
                    if (tp.requires_grad(ib))
                      tp.accumulate(ib, reduce_to(g.cwiseProduct(expand(xa, r, c)), xb.rows(), xb.cols()));
                  });
}

Var div(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Matrix& va = a.value();
  const Matrix& vb = b.value();
  const Index r = broadcast_dim(va.rows(), vb.rows(), va, vb);
  const Index c = broadcast_dim(va.cols(), vb.cols(), va, vb);
  Matrix y = expand(va, r, c).cwiseQuotient(expand(vb, r, c));
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), a.requires_grad() || b.requires_grad(),
                  [=](Tape& tp, const Matrix& g) {
                    const Matrix& xa = tp.value(ia);
                    const Matrix& xb = tp.value(ib);
                    const Matrix eb = expand(xb, r, c);
                    if (tp.requires_grad(ia))
                      tp.accumulate(ia, reduce_to(g.cwiseQuotient(eb), xa.rows(), xa.cols()));
                    if (tp.requires_grad(ib)) {
                      const Matrix ea = expand(xa, r, c);
                      Matrix gb = -g.cwiseProduct(ea).cwiseQuotient(eb.cwiseProduct(eb));
                      tp.accumulate(ib, reduce_to(gb, xb.rows(), xb.cols()));
                    }
                  });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var add_scalar(const Var& a, double s) {
  Tape& t = tape_of(a);
  Matrix y = a.value().array() + s;
  const std::size_t ia = a.id();
  return t.record(std::move(y), a.requires_grad(),
                  [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g); });
}

Var mul_scalar(const Var& a, double s) {
  Tape& t = tape_of(a);
  Matrix y = a.value() * s;
  const std::size_t ia = a.id();
  return t.record(std::move(y), a.requires_grad(),
                  [ia, s](Tape& tp, const Matrix& g) { tp.accumulate(ia, g * s); });
}

Var operator/(double s, const Var& a) {
  return unary(
      a, [s](const Matrix& x) -> Matrix { return (s / x.array()).matrix(); },
      [s](const Matrix& x) -> Matrix { return (-s / x.array().square()).matrix(); });
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Matrix& va = a.value();
  const Matrix& vb = b.value();
  if (va.cols() != vb.rows())
    throw ParameterError("matmul shape mismatch " + shape(va) + " * " + shape(vb));
  Matrix y = va * vb;
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Matrix& g) {
                    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
                    if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
                  });
}

Var transpose(const Var& a) {
  Tape& t = tape_of(a);
  Matrix y = a.value().transpose();
  const std::size_t ia = a.id();
  return t.record(std::move(y), a.requires_grad(),
                  [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.transpose()); });
}

Var exp(const Var& a) {
  Tape& t = tape_of(a);
  Matrix y = a.value().array().exp().matrix();
  const std::size_t ia = a.id();
  // dy/dx = y, read back from this node during backward
  const std::size_t io = t.next_id();
  return t.record(std::move(y), a.requires_grad(), [ia, io](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.cwiseProduct(tp.value(io)));
  });
}

Var log(const Var& a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.array().log().matrix(); },
      [](const Matrix& x) -> Matrix { return x.cwiseInverse(); });
}

Var pow(const Var& a, double p) {
  return unary(
      a, [p](const Matrix& x) -> Matrix { return x.array().pow(p).matrix(); },
      [p](const Matrix& x) -> Matrix { return (p * x.array().pow(p - 1.0)).matrix(); });
}

Var sqrt(const Var& a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.array().sqrt().matrix(); },
      [](const Matrix& x) -> Matrix { return (0.5 / x.array().sqrt()).matrix(); });
}

Var square(const Var& a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.array().square().matrix(); },
      [](const Matrix& x) -> Matrix { return 2.0 * x; });
}

Var abs(const Var& a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.cwiseAbs(); },
      [](const Matrix& x) -> Matrix { return x.unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }); });
}

Var tanh(const Var& a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.array().tanh().matrix(); },
      [](const Matrix& x) -> Matrix { return (1.0 - x.array().tanh().square()).matrix(); });
}

namespace {
double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(const Var& a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.unaryExpr(&sigmoid_scalar); },
      [](const Matrix& x) -> Matrix {
        return x.unaryExpr([](double v) {
          const double s = sigmoid_scalar(v);
          return s * (1.0 - s);
        });
      });
}

Var silu(const Var& a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.unaryExpr([](double v) { return v * sigmoid_scalar(v); }); },
      [](const Matrix& x) -> Matrix {
        return x.unaryExpr([](double v) {
          const double s = sigmoid_scalar(v);
          return s * (1.0 + v * (1.0 - s));
        });
      });
}

Var softplus(const Var& a) {
  return unary(
      a,
      [](const Matrix& x) -> Matrix {
        return x.unaryExpr([](double v) { return v > 30 ? v : std::log1p(std::exp(v)); });
      },
      [](const Matrix& x) -> Matrix { return x.unaryExpr(&sigmoid_scalar); });
}

Var relu(const Var& a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.cwiseMax(0.0); },
      [](const Matrix& x) -> Matrix { return x.unaryExpr([](double v) { return v > 0 ? 1.0 : 0.0; }); });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](const Matrix& x) -> Matrix { return x.cwiseMax(lo).cwiseMin(hi); },
      [lo, hi](const Matrix& x) -> Matrix {
        return x.unaryExpr([lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
      });
}

namespace {
// Taylor branch below |x| < 1e-4: truncation error ~x^4/120 < 1e-18.
double phi(double x) {
  if (std::abs(x) < 1e-4) return 1.0 + x * (0.5 + x * (1.0 / 6.0 + x / 24.0));
  return std::expm1(x) / x;
}
double phi_prime(double x) {
  if (std::abs(x) < 1e-4) return 0.5 + x * (1.0 / 3.0 + x * (0.125 + x / 30.0));
  return (x * std::exp(x) - std::expm1(x)) / (x * x);
}
}  // namespace

Var expm1_over_x(const Var& a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.unaryExpr(&phi); },
      [](const Matrix& x) -> Matrix { return x.unaryExpr(&phi_prime); });
}

Var sum(const Var& a) {
  Tape& t = tape_of(a);
  Matrix y = Matrix::Constant(1, 1, a.value().sum());
  const std::size_t ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return t.record(std::move(y), a.requires_grad(), [=](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return mul_scalar(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
  Tape& t = tape_of(a);
  Matrix y = a.value().rowwise().sum();
  const std::size_t ia = a.id();
  const Index c = a.cols();
  return t.record(std::move(y), a.requires_grad(),
                  [=](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.replicate(1, c)); });
}

Var row_mean(const Var& a) { return mul_scalar(row_sum(a), 1.0 / static_cast<double>(a.cols())); }

Var col_sum(const Var& a) {
  Tape& t = tape_of(a);
  Matrix y = a.value().colwise().sum();
  const std::size_t ia = a.id();
  const Index r = a.rows();
  return t.record(std::move(y), a.requires_grad(),
                  [=](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.replicate(r, 1)); });
}

Var col_mean(const Var& a) { return mul_scalar(col_sum(a), 1.0 / static_cast<double>(a.rows())); }

namespace {
Matrix softmax_value(const Matrix& x) {
  Matrix y = x;
  for (Index r = 0; r < y.rows(); ++r) {
    const double m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}
}  // namespace

Var softmax_rows(const Var& a) {
  Tape& t = tape_of(a);
  Matrix y = softmax_value(a.value());
  const std::size_t ia = a.id();
  const std::size_t io = t.next_id();
  return t.record(std::move(y), a.requires_grad(), [ia, io](Tape& tp, const Matrix& g) {
    const Matrix& s = tp.value(io);
    // ds = s * (g - <g, s>) per row
    const Eigen::VectorXd dot = g.cwiseProduct(s).rowwise().sum();
    Matrix gx = s.cwiseProduct(g - dot.replicate(1, g.cols()));
    tp.accumulate(ia, gx);
  });
}

Var log_softmax_rows(const Var& a) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    y.row(r) = x.row(r).array() - lse;
  }
  const std::size_t ia = a.id();
  const std::size_t io = t.next_id();
  return t.record(std::move(y), a.requires_grad(), [ia, io](Tape& tp, const Matrix& g) {
    const Matrix s = tp.value(io).array().exp().matrix();
    const Eigen::VectorXd gs = g.rowwise().sum();
    tp.accumulate(ia, g - s.cwiseProduct(gs.replicate(1, g.cols())));
  });
}

Var slice_rows(const Var& a, Index start, Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.rows()) throw ParameterError("slice_rows out of range");
  Matrix y = a.value().middleRows(start, count);
  const std::size_t ia = a.id();
  return t.record(std::move(y), a.requires_grad(),
                  [=](Tape& tp, const Matrix& g) { tp.accumulate_block(ia, start, 0, g); });
}

Var slice_cols(const Var& a, Index start, Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.cols()) throw ParameterError("slice_cols out of range");
  Matrix y = a.value().middleCols(start, count);
  const std::size_t ia = a.id();
  return t.record(std::move(y), a.requires_grad(),
                  [=](Tape& tp, const Matrix& g) { tp.accumulate_block(ia, 0, start, g); });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ParameterError("concat_rows of nothing");
  Tape& t = tape_of(parts.front());
  const Index c = parts.front().cols();
  Index total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw ContractError("operands live on different tapes");
    if (p.cols() != c) throw ParameterError("concat_rows column mismatch");
    total += p.rows();
    rg = rg || p.requires_grad();
  }
  Matrix y(total, c);
  std::vector<std::pair<std::size_t, Index>> spans;
  spans.reserve(parts.size());
  Index at = 0;
  for (const auto& p : parts) {
    y.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), p.rows());
    at += p.rows();
  }
  return t.record(std::move(y), rg, [spans](Tape& tp, const Matrix& g) {
    Index off = 0;
    for (const auto& [id, n] : spans) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleRows(off, n));
      off += n;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ParameterError("concat_cols of nothing");
  Tape& t = tape_of(parts.front());
  const Index r = parts.front().rows();
  Index total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw ContractError("operands live on different tapes");
    if (p.rows() != r) throw ParameterError("concat_cols row mismatch");
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  Matrix y(r, total);
  std::vector<std::pair<std::size_t, Index>> spans;
  Index at = 0;
  for (const auto& p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), p.cols());
    at += p.cols();
  }
  return t.record(std::move(y), rg, [spans](Tape& tp, const Matrix& g) {
    Index off = 0;
    for (const auto& [id, n] : spans) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleCols(off, n));
      off += n;
    }
  });
}

Var tile_rows(const Var& a, Index times) {
  Tape& t = tape_of(a);
  if (times < 1) throw ParameterError("tile_rows needs times >= 1");
  Matrix y = a.value().replicate(times, 1);
  const std::size_t ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return t.record(std::move(y), a.requires_grad(), [=](Tape& tp, const Matrix& g) {
    Matrix acc = Matrix::Zero(r, c);
    for (Index k = 0; k < times; ++k) acc += g.middleRows(k * r, r);
    tp.accumulate(ia, acc);
  });
}

Var mean_over_blocks(const Var& a, Index blocks) {
  Tape& t = tape_of(a);
  if (blocks < 1 || a.rows() % blocks != 0) throw ParameterError("mean_over_blocks: rows not divisible by blocks");
  const Index r = a.rows() / blocks, c = a.cols();
  Matrix y = Matrix::Zero(r, c);
  for (Index k = 0; k < blocks; ++k) y += a.value().middleRows(k * r, r);
  y /= static_cast<double>(blocks);
  const std::size_t ia = a.id();
  return t.record(std::move(y), a.requires_grad(), [=](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, (g / static_cast<double>(blocks)).replicate(blocks, 1));
  });
}

Var entry(const Var& a, Index row, Index col) { return slice_cols(slice_rows(a, row, 1), col, 1); }

Var rowwise_outer(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Matrix& va = a.value();
  const Matrix& vb = b.value();
  if (va.rows() != vb.rows()) throw ParameterError("rowwise_outer row mismatch");
  const Index R = va.rows(), P = va.cols(), N = vb.cols();
  Matrix y(R, P * N);
  for (Index p = 0; p < P; ++p) y.middleCols(p * N, N) = vb.array().colwise() * va.col(p).array();
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), a.requires_grad() || b.requires_grad(),
                  [=](Tape& tp, const Matrix& g) {
                    const Matrix& xa = tp.value(ia);
                    const Matrix& xb = tp.value(ib);
                    if (tp.requires_grad(ia)) {
                      Matrix ga(R, P);
                      for (Index p = 0; p < P; ++p)
                        ga.col(p) = g.middleCols(p * N, N).cwiseProduct(xb).rowwise().sum();
                      tp.accumulate(ia, ga);
                    }
                    if (tp.requires_grad(ib)) {
                      Matrix gb = Matrix::Zero(R, N);
                      for (Index p = 0; p < P; ++p)
                        gb.array() += g.middleCols(p * N, N).array().colwise() * xa.col(p).array();
                      tp.accumulate(ib, gb);
                    }
                  });
}

Var rowwise_contract(const Var& h, const Var& c) {
  Tape& t = tape_of(h, c);
  const Matrix& vh = h.value();
  const Matrix& vc = c.value();
  const Index R = vh.rows(), N = vc.cols();
  if (vc.rows() != R || N == 0 || vh.cols() % N != 0) throw ParameterError("rowwise_contract shape mismatch");
  const Index P = vh.cols() / N;
  Matrix y(R, P);
  for (Index p = 0; p < P; ++p) y.col(p) = vh.middleCols(p * N, N).cwiseProduct(vc).rowwise().sum();
  const std::size_t ih = h.id(), ic = c.id();
  return t.record(std::move(y), h.requires_grad() || c.requires_grad(),
                  [=](Tape& tp, const Matrix& g) {
                    const Matrix& xh = tp.value(ih);
                    const Matrix& xc = tp.value(ic);
                    if (tp.requires_grad(ih)) {
                      Matrix gh(R, P * N);
                      for (Index p = 0; p < P; ++p) gh.middleCols(p * N, N) = xc.array().colwise() * g.col(p).array();
                      tp.accumulate(ih, gh);
                    }
                    if (tp.requires_grad(ic)) {
                      Matrix gc = Matrix::Zero(R, N);
                      for (Index p = 0; p < P; ++p)
                        gc.array() += xh.middleCols(p * N, N).array().colwise() * g.col(p).array();
                      tp.accumulate(ic, gc);
                    }
                  });
}

std::pair<Var, std::vector<std::vector<Index>>> sort_rows_desc(const Var& a) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  const Index R = x.rows(), C = x.cols();
  std::vector<std::vector<Index>> perm(static_cast<std::size_t>(R));
  Matrix y(R, C);
  for (Index r = 0; r < R; ++r) {
    auto& p = perm[static_cast<std::size_t>(r)];
    p.resize(static_cast<std::size_t>(C));
    std::iota(p.begin(), p.end(), Index{0});
    std::stable_sort(p.begin(), p.end(), [&](Index i, Index j) { return x(r, i) > x(r, j); });
    for (Index c = 0; c < C; ++c) y(r, c) = x(r, p[static_cast<std::size_t>(c)]);
  }
  const std::size_t ia = a.id();
  Var out = t.record(std::move(y), a.requires_grad(), [ia, perm, R, C](Tape& tp, const Matrix& g) {
    Matrix gx(R, C);
    for (Index r = 0; r < R; ++r)
      for (Index c = 0; c < C; ++c) gx(r, perm[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]) = g(r, c);
    tp.accumulate(ia, gx);
  });
  return {out, perm};
}

}  // namespace pimsm::engine
