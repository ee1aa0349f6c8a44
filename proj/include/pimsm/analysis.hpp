#pragma once

// Temporal kernels of discretised heads, kernel-mismatch bounds, exponential
// mixture approximation of power-law kernels, and representation similarity.

#include "pimsm/kernel_profile.hpp"
#include "pimsm/msssm.hpp"
#include "pimsm/train.hpp"
#include "pimsm/types.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace pimsm::analysis {

/// Scalar-decay head with frozen input and readout vectors.
struct HeadParams {
  double A = -1.0;
  std::vector<double> B{1.0};
  std::vector<double> C{1.0};
};

/// g(l) = delta (C . B) exp(delta A)^l for l = 0..L-1.
KernelProfile extract_kernel(const HeadParams& head, double delta, std::size_t L, double dt = 1.0);

/// Per-head parameters of block `block`, with B_t and C_t frozen to their mean
/// over a probe batch, and the head's step taken as the batch-mean delta of
/// its scale group. Returns (head, delta) pairs.
std::vector<std::pair<HeadParams, double>> probe_heads(const msssm::Model& m, const Matrix& x, Index batch,
                                                       const msssm::SpectralContext* ctx, std::size_t block = 0);

/// sum |g - h| dt over the union of supports, the shorter profile padded with
/// zeros. Grids with different dt are linearly resampled onto the finer one
/// when `resample` is set.
double l1_mismatch(const KernelProfile& g, const KernelProfile& h, bool resample = false);

/// Causal convolution y[t] = sum_l g[l] x[t-l] dt.
std::vector<double> convolve(const KernelProfile& g, std::span<const double> x);

struct Lemma1Report {
  double bound = 0.0;          // M * ||g - h||_1
  double max_gap = 0.0;        // largest sup_t |y - y~| over the random signals
  double max_ratio = 0.0;      // largest gap / bound
  std::size_t violations = 0;  // signals with ratio > 1 + 1e-12
  double witness_ratio = 0.0;  // for x[t - l] = M sign(g - h)[l]
  std::size_t signals = 0;

  [[nodiscard]] nlohmann::json to_json() const;
};

/// Draws bounded signals (|x| <= M) of length T and compares both outputs.
Lemma1Report verify_lemma1(const KernelProfile& g, const KernelProfile& h, std::size_t n_signals, double M,
                           std::size_t T, std::uint64_t seed);

struct MixtureFit {
  std::size_t K = 0;
  std::vector<double> weights;  // on the simplex
  std::vector<double> rates;    // positive
  double error = 0.0;           // discrete L1

  [[nodiscard]] KernelProfile evaluate(std::size_t L, double dt) const;
  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
};

struct MixtureOptions {
  std::size_t restarts = 32;
  std::size_t iterations = 1500;
  double learning_rate = 0.05;
};

/// Best-of-restarts minimisation of the discrete L1 error. Restarts begin at
/// jittered log-spaced rates; a supplied K-1 solution is also tried padded
/// with a zero-weight component and as a warm start.
MixtureFit fit_exp_mixture(const KernelProfile& target, std::size_t K, std::uint64_t seed,
                           const MixtureOptions& opts = {}, const MixtureFit* previous = nullptr);

struct RateRow {
  std::size_t K = 0;
  double error = 0.0;
  double relative_error = 0.0;  // error / target L1 mass
};

struct RateStudy {
  double alpha = 0.0;
  double dt = 0.0;
  double horizon = 0.0;
  double target_mass = 0.0;
  std::vector<RateRow> rows;
  std::vector<MixtureFit> fits;
  double slope = 0.0;  // least-squares slope of log error vs log K

  [[nodiscard]] nlohmann::json to_json() const;
  [[nodiscard]] std::string to_csv() const;
};

/// Lag horizon H at which the tail of (1 + t)^-alpha beyond H holds `tail`
/// of its total mass.
double powerlaw_horizon(double alpha, double tail);

/// Fits each K in order, warm-starting from the previous K. The grid reaches
/// the horizon for half the 1% tail budget.
RateStudy approximation_rate_study(double alpha, const std::vector<std::size_t>& K_list, std::uint64_t seed,
                                   double dt = 0.05, const MixtureOptions& opts = {});

/// Linear CKA with column centring; 0 if either self-term vanishes.
double linear_cka(const Matrix& x, const Matrix& y);
/// Distance correlation; 0 if either distance variance vanishes.
double dcor(const Matrix& x, const Matrix& y);

struct DriftReport {
  double cka = 0.0;
  double dcor = 0.0;
  double l2 = 0.0;  // mean row-wise ||z_a - z_b||
  double drift = 0.0;  // 1 - cka
  std::optional<double> metric_a, metric_b;

  [[nodiscard]] nlohmann::json to_json() const;
};

DriftReport drift_report(const Matrix& z_a, const Matrix& z_b);

/// Embeds paired views with their models and compares them. Items must be
/// the same (equal counts and labels).
DriftReport drift_report(const msssm::Model& model_a, const train::PreparedSet& view_a, const msssm::Model& model_b,
                         const train::PreparedSet& view_b);

}  // namespace pimsm::analysis
