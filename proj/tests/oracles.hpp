#pragma once

// Independent reference computations used only by tests. Nothing here calls
// into the library under test.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <utility>
#include <vector>

namespace oracle {

/// Adaptive Simpson quadrature on [a, b] with a per-panel relative
/// tolerance; for a positive integrand the total relative error is below tol.
inline double integrate(const std::function<double(double)>& f, double a, double b, double tol = 1e-13,
                        int depth = 40) {
  auto simpson = [](double fa, double fm, double fb, double lo, double hi) {
    return (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
  };
  std::function<double(double, double, double, double, double, double, int)> rec =
      [&](double lo, double hi, double fa, double fm, double fb, double whole, int d) {
        const double m = 0.5 * (lo + hi);
        const double flm = f(0.5 * (lo + m)), frm = f(0.5 * (m + hi));
        const double left = simpson(fa, flm, fm, lo, m);
        const double right = simpson(fm, frm, fb, m, hi);
        const double diff = left + right - whole;
        if (d <= 0 || std::abs(diff) <= 15.0 * tol * std::abs(left + right)) return left + right + diff / 15.0;
        return rec(lo, m, fa, flm, fm, left, d - 1) + rec(m, hi, fm, frm, fb, right, d - 1);
      };
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  return rec(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), depth);
}

/// Power-weighted mean frequency of f^-beta on [fa, fb], integrated in
/// log-frequency so the integrand stays smooth on wide bands.
inline double centroid_quadrature(double fa, double fb, double beta) {
  const double la = std::log(fa), lb = std::log(fb);
  // substitute f = e^u, df = e^u du; shift exponents to avoid overflow
  const double shift = (1.0 - beta) * la;
  auto num = [&](double u) { return std::exp((2.0 - beta) * u - shift - la); };
  auto den = [&](double u) { return std::exp((1.0 - beta) * u - shift); };
  return fa * integrate(num, la, lb, 1e-12) / integrate(den, la, lb, 1e-12);
}

/// Ordinary least-squares slope and intercept of y on x.
inline std::pair<double, double> ols(const std::vector<double>& x, const std::vector<double>& y) {
  Eigen::MatrixXd a(static_cast<Eigen::Index>(x.size()), 2);
  Eigen::VectorXd b(static_cast<Eigen::Index>(y.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    a(static_cast<Eigen::Index>(i), 0) = 1.0;
    a(static_cast<Eigen::Index>(i), 1) = x[i];
    b(static_cast<Eigen::Index>(i)) = y[i];
  }
  const Eigen::Vector2d s = a.colPivHouseholderQr().solve(b);
  return {s(1), s(0)};
}

/// Naive DFT power |sum_t x_t e^{-2 pi i f t}|^2 at arbitrary frequency f.
inline double dtft_power(const double* x, std::size_t n, double f) {
  std::complex<double> acc{0.0, 0.0};
  for (std::size_t t = 0; t < n; ++t)
    acc += x[t] * std::polar(1.0, -2.0 * std::numbers::pi * f * static_cast<double>(t));
  return std::norm(acc);
}

/// Mean DTFT power over a fine grid inside [lo, hi], summed over the columns
/// of the first `rows` rows of a T x d sequence.
inline double band_power(const Eigen::MatrixXd& seq, Eigen::Index rows, double lo, double hi, int grid = 24) {
  double total = 0.0;
  for (Eigen::Index c = 0; c < seq.cols(); ++c) {
    std::vector<double> col(static_cast<std::size_t>(rows));
    for (Eigen::Index t = 0; t < rows; ++t) col[static_cast<std::size_t>(t)] = seq(t, c);
    double mu = 0.0;
    for (double v : col) mu += v;
    mu /= static_cast<double>(rows);
    for (double& v : col) v -= mu;
    for (int g = 0; g < grid; ++g) {
      const double f = lo + (hi - lo) * (g + 0.5) / grid;
      total += dtft_power(col.data(), col.size(), f);
    }
  }
  return total / grid;
}

/// Bandpower oracle classifier: feature log(P_slow) - log(P_fast) over the
/// first `rows` samples; threshold fit on the first half of the items as the
/// midpoint of class means, accuracy measured on the second half.
inline double bandpower_oracle_accuracy(const std::vector<Eigen::MatrixXd>& seqs, const std::vector<int>& labels,
                                        Eigen::Index rows, std::pair<double, double> slow,
                                        std::pair<double, double> fast) {
  std::vector<double> feat(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i)
    feat[i] = std::log(band_power(seqs[i], rows, slow.first, slow.second) + 1e-12) -
              std::log(band_power(seqs[i], rows, fast.first, fast.second) + 1e-12);
  const std::size_t half = seqs.size() / 2;
  double m[2] = {0.0, 0.0};
  int n[2] = {0, 0};
  for (std::size_t i = 0; i < half; ++i) {
    m[labels[i]] += feat[i];
    ++n[labels[i]];
  }
  m[0] /= n[0];
  m[1] /= n[1];
  const double thr = 0.5 * (m[0] + m[1]);
  const bool class0_high = m[0] > m[1];
  int correct = 0;
  for (std::size_t i = half; i < seqs.size(); ++i) {
    const int pred = (feat[i] > thr) == class0_high ? 0 : 1;
    correct += pred == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(seqs.size() - half);
}

}  // namespace oracle
