#pragma once

// Differentiable primitives on Var.
//
// Elementwise binary ops broadcast when one operand is 1x1, a 1xC row, or an
// Rx1 column of the other's shape. Gradients of a broadcast operand are summed
// back to its own shape.

#include "pimsm/engine/tape.hpp"

#include <utility>
#include <vector>

namespace pimsm::engine {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var exp(const Var& a);
Var log(const Var& a);
Var pow(const Var& a, double p);
Var sqrt(const Var& a);
Var square(const Var& a);
Var abs(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var softplus(const Var& a);
/// max(a, 0)
Var relu(const Var& a);
/// Clamps into [lo, hi]; zero gradient where clamped.
Var clamp(const Var& a, double lo, double hi);
/// (e^x - 1)/x with its removable singularity at 0 filled in.
Var expm1_over_x(const Var& a);

/// Sum of all entries (1x1).
Var sum(const Var& a);
Var mean(const Var& a);
/// Per-row sum across columns (Rx1).
Var row_sum(const Var& a);
Var row_mean(const Var& a);
/// Per-column sum down rows (1xC).
Var col_sum(const Var& a);
Var col_mean(const Var& a);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);

Var slice_rows(const Var& a, Index start, Index count);
Var slice_cols(const Var& a, Index start, Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
/// Stacks `times` copies of `a` vertically.
Var tile_rows(const Var& a, Index times);
/// Rows are laid out in `blocks` equal vertical blocks; returns their mean
/// (one block's worth of rows).
Var mean_over_blocks(const Var& a, Index blocks);
Var entry(const Var& a, Index row, Index col);

/// out(r, p*N + n) = a(r, p) * b(r, n)
Var rowwise_outer(const Var& a, const Var& b);
/// out(r, p) = sum_n h(r, p*N + n) * c(r, n), N = c.cols()
Var rowwise_contract(const Var& h, const Var& c);

/// Sorts each row in descending order (stable). The second member holds,
/// per row, the source column of each output column.
std::pair<Var, std::vector<std::vector<Index>>> sort_rows_desc(const Var& a);

// Operator sugar. `*` and `/` are elementwise; use matmul for products.
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator+(double s, const Var& a) { return add_scalar(a, s); }
inline Var operator-(const Var& a, double s) { return add_scalar(a, -s); }
inline Var operator-(double s, const Var& a) { return add_scalar(neg(a), s); }
inline Var operator*(const Var& a, double s) { return mul_scalar(a, s); }
inline Var operator*(double s, const Var& a) { return mul_scalar(a, s); }
inline Var operator/(const Var& a, double s) { return mul_scalar(a, 1.0 / s); }
Var operator/(double s, const Var& a);

}  // namespace pimsm::engine
