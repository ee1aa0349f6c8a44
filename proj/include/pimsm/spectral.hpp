#pragma once

// Power spectra, piecewise power-law fits, and energy centroids.

#include "pimsm/scalar_math.hpp"
#include "pimsm/types.hpp"

#include "json.hpp"

#include <cmath>
#include <span>
#include <utility>
#include <vector>

namespace pimsm::spectral {

inline constexpr double kBetaMin = 0.3;
inline constexpr double kBetaMax = 5.0;

/// One-sided power spectrum on non-DC frequencies (cycles per sample).
struct Spectrum {
  std::vector<double> freqs;
  std::vector<double> power;
  double f_min = 0.0;
  double f_max = 0.5;

  [[nodiscard]] std::size_t size() const { return freqs.size(); }
  void validate() const;
};

/// |FFT(x)|^2 on the bins inside [f_min, f_max], DC excluded. No window.
Spectrum periodogram(std::span<const double> x, double f_min, double f_max);
/// Periodogram of column `channel` of a T x d sequence.
Spectrum periodogram(const Matrix& seq, Index channel, double f_min, double f_max);

/// Welch-style estimate: mean periodogram over half-overlapping segments of
/// `segment` samples, Hann-windowed.
Spectrum welch(std::span<const double> x, std::size_t segment, double f_min, double f_max);

/// Arithmetic mean of power over spectra sharing a frequency grid.
Spectrum average_spectra(std::span<const Spectrum> spectra);
/// Geometric mean of power (mean log power) over channels sharing a grid.
Spectrum consensus_spectrum(std::span<const Spectrum> channels);

/// Piecewise power law log P(f) = log_amplitudes[k] - betas[k] * log f on
/// segment k, with segments [edge_k, edge_{k+1}) where the edges are
/// f_min, knees..., f_max.
struct PiecewiseFit {
  int K = 3;
  std::vector<double> knees;
  std::vector<double> betas;
  std::vector<double> log_amplitudes;
  double f_min = 0.0;
  double f_max = 0.5;
  double residual = 0.0;  // total squared log residual of the fit that produced it

  /// Structural checks: sizes, ordering of knees inside (f_min, f_max).
  void validate() const;
  /// Also requires every beta inside [0.3, 5.0].
  void validate_strict() const;
  [[nodiscard]] std::size_t segment_of(double f) const;
  /// Band k as [lo, hi].
  [[nodiscard]] std::pair<double, double> band(std::size_t k) const;
  [[nodiscard]] double log_model(double f) const;

  [[nodiscard]] nlohmann::json to_json() const;
  static PiecewiseFit from_json(const nlohmann::json& j);
};

/// Re-derives amplitudes left to right so adjacent segments meet at knees.
PiecewiseFit project_seams(const PiecewiseFit& fit);
/// Copy with betas clamped into [0.3, 5.0].
PiecewiseFit clamp_exponents(const PiecewiseFit& fit);

struct InitFitOptions {
  std::size_t grid_points = 64;   // log-spaced knee candidates strictly inside (f_min, f_max)
  std::size_t min_bins = 3;       // per segment
};

/// Exhaustive search over ordered knee candidates; per-segment OLS of
/// log P on log f. Betas are the raw negative slopes (not clamped).
PiecewiseFit init_fit(const Spectrum& spectrum, int K, const InitFitOptions& opts = {});

/// Knee candidate grid used by init_fit.
std::vector<double> knee_grid(double f_min, double f_max, std::size_t points);

/// c_k f^-beta_k of the seam-projected fit.
double eval_piecewise(const PiecewiseFit& fit, double f);

struct FitLossOptions {
  std::vector<int> levels{1, 2, 4};  // local bin-averaging factors
};

/// Mean over resolution levels of the MAE between log model and log data;
/// at level s both are averaged over consecutive groups of s bins.
double fit_loss(const PiecewiseFit& fit, const Spectrum& spectrum, const FitLossOptions& opts = {});
/// Same, averaged equally over channels.
double fit_loss(const PiecewiseFit& fit, std::span<const Spectrum> channels, const FitLossOptions& opts = {});

/// Sum over knees of the squared jump in log model value across the knee.
double seam_loss(const PiecewiseFit& fit);

/// Averages per-channel fits: knees in log frequency, betas and log
/// amplitudes arithmetically.
PiecewiseFit consensus_fit(std::span<const PiecewiseFit> fits);

/// log of the energy centroid relative to f_a: log(f_c / f_a) for a band of
/// log-width L = log(f_b / f_a) and exponent beta. Works on doubles and tape
/// nodes alike; smooth through beta = 1 and beta = 2.
template <class T, class B>
auto log_centroid_offset(const T& log_width, const B& beta) {
  using std::log;
  return log(expm1_over_x((2.0 - beta) * log_width)) - log(expm1_over_x((1.0 - beta) * log_width));
}

/// f_c = int f P / int P for P ~ f^-beta on [f_a, f_b].
double energy_centroid(double f_a, double f_b, double beta);

}  // namespace pimsm::spectral
