#pragma once

// Synthetic multiscale signals and kernels with known ground truth.

#include "pimsm/kernel_profile.hpp"
#include "pimsm/types.hpp"

#include "json.hpp"

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace pimsm::signalgen {

/// Continuous piecewise power law: P(f) = amplitude * f^-beta_1 below the
/// first knee, and each later segment continues from the previous one at
/// its knee. Frequencies are in cycles per sample.
struct PiecewiseSpec {
  std::vector<double> knees;      // K-1, strictly increasing
  std::vector<double> exponents;  // K, each in [0.3, 5.0]
  double f_min = 0.0;
  double f_max = 0.5;
  double amplitude = 1.0;

  void validate() const;
  /// Power at f > 0. Segments extend past f_min / f_max.
  [[nodiscard]] double power(double f) const;
  [[nodiscard]] nlohmann::json to_json() const;
};

/// N sequences of T x d samples, optionally labelled.
struct LabeledSequenceSet {
  std::vector<Matrix> sequences;     // each T x d
  std::vector<int> class_labels;     // classification labels, or empty
  std::vector<Matrix> targets;       // forecasting targets (H x d), or empty
  double acquisition_step = 1.0;     // seconds (or hours) per sample
  nlohmann::json metadata = nlohmann::json::object();

  [[nodiscard]] std::size_t size() const { return sequences.size(); }
  [[nodiscard]] Index length() const { return sequences.empty() ? 0 : sequences.front().rows(); }
  [[nodiscard]] Index channels() const { return sequences.empty() ? 0 : sequences.front().cols(); }
  [[nodiscard]] int num_classes() const;
  void validate() const;
};

/// Per-column zero mean and unit (population) variance. Constant columns are
/// only centred.
void standardize_columns(Matrix& x);

/// Unlabelled set of `count` sequences whose bin magnitudes are exactly
/// sqrt(P(f)) with uniform random phases, standardised per channel.
LabeledSequenceSet gen_colored_noise(const PiecewiseSpec& spec, Index T, Index d, std::uint64_t seed,
                                     std::size_t count = 1);

/// One channel of colored noise (before standardisation is applied by the
/// caller). Exposed for reuse by other generators.
std::vector<double> colored_channel(const PiecewiseSpec& spec, std::size_t T, std::uint64_t seed);

struct Band {
  double lo = 0.0;
  double hi = 0.0;
};

struct TwoTimescaleConfig {
  std::size_t n_per_class = 64;
  Index T = 64;
  Index d = 2;
  Band slow_band{0.015, 0.04};
  Band fast_band{0.18, 0.3};
  double signal_amplitude = 1.0;  // per sinusoid, relative to unit-variance background
  int components = 3;             // sinusoids per class signal
  PiecewiseSpec background{{0.03, 0.15}, {1.0, 2.0, 0.8}, 1.0 / 64.0, 0.5, 1.0};
  double acquisition_step = 1.0;
  std::uint64_t seed = 0;
};

/// Binary task: class 0 carries a band-limited sinusoid mixture in the slow
/// band, class 1 in the fast band, on top of a shared broadband background.
/// Sinusoid frequencies and phases are drawn per sequence and channel.
LabeledSequenceSet gen_two_timescale_task(const TwoTimescaleConfig& cfg);

/// g[l] = (1 + l*dt)^-alpha for l = 0..L-1.
KernelProfile powerlaw_kernel(double alpha, std::size_t L, double dt = 1.0);

/// g[l] = sum_k a_k exp(-lambda_k * l * dt), weights on the simplex.
KernelProfile exp_mixture_kernel(std::span<const double> weights, std::span<const double> rates, std::size_t L,
                                 double dt);

}  // namespace pimsm::signalgen
