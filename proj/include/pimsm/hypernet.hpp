#pragma once

// Small feed-forward network mapping a log-binned spectrum to a piecewise
// power-law fit, plus the differentiable fit and seam terms used in training.

#include "pimsm/engine/ops.hpp"
#include "pimsm/engine/params.hpp"
#include "pimsm/spectral.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pimsm::spectral {

struct HyperNetConfig {
  int K = 3;
  std::size_t feature_bins = 32;  // log-spaced bins of mean log power
  std::size_t hidden = 64;        // two tanh layers of this width
  double f_min = 1.0 / 64.0;
  double f_max = 0.5;
  double min_fraction = 0.01;     // share of the log-frequency span spread evenly over segments
  double membership_width = 0.1;  // soft segment edge width, natural-log units
  std::vector<int> levels{1, 2, 4};

  void validate() const;
};

/// Parameter handles of a hypernet living inside a larger ParameterSet.
struct HyperNet {
  HyperNetConfig cfg;
  engine::ParamHandle w1 = 0, b1 = 0, w2 = 0, b2 = 0, w3 = 0, b3 = 0;

  /// Registers freshly initialised weights under `prefix`.
  static HyperNet create(engine::ParameterSet& params, const HyperNetConfig& cfg, std::uint64_t seed,
                         const std::string& prefix = "hyper.");

  /// Sets output biases so that a zero-input-sensitivity network reproduces
  /// `fit` (betas clamped into range, knees kept off the span edges).
  void init_from_fit(engine::ParameterSet& params, const PiecewiseFit& fit) const;
};

/// 1 x feature_bins standardised mean-log-power features. Empty bins are
/// filled by linear interpolation between their non-empty neighbours.
Matrix spectral_features(const Spectrum& spectrum, const HyperNetConfig& cfg);
/// One row per spectrum.
Matrix spectral_features(std::span<const Spectrum> spectra, const HyperNetConfig& cfg);

struct HyperOutput {
  engine::Var log_knees;  // B x (K-1), strictly increasing per row
  engine::Var betas;      // B x K, inside [0.3, 5.0]
};

/// Differentiable forward pass on a B x feature_bins feature matrix.
HyperOutput hypernet_apply(const engine::Bound& bound, const HyperNet& net, const engine::Var& features);

/// Output knees from raw knee logits (B x (K-1)).
engine::Var knees_from_logits(const engine::Var& logits, const HyperNetConfig& cfg);
/// Output betas from raw beta logits (B x K).
engine::Var betas_from_logits(const engine::Var& logits);

struct SoftFitTerms {
  engine::Var fit;         // 1x1 multi-resolution log MAE, mean over rows
  engine::Var seam;        // 1x1 summed squared knee jumps, mean over rows
  engine::Var intercepts;  // rows x K segment intercepts
};

/// Fit and seam terms of the hypernet output against observed log spectra.
/// `log_power` has one row per (channel, sequence) in channel-major order
/// (row = c * B + b); `log_freqs` is 1 x n. Segment membership is a smooth
/// step at each knee so the terms carry gradients to the knees. Intercepts
/// are membership-weighted means of log P + beta log f.
SoftFitTerms soft_fit_terms(const HyperOutput& out, const Matrix& log_freqs, const Matrix& log_power,
                            const HyperNetConfig& cfg);

/// Converts row `row` of a hypernet output plus its intercepts to a fit.
PiecewiseFit to_fit(const HyperOutput& out, const engine::Var& intercepts, Index row, const HyperNetConfig& cfg);

/// Plain evaluation on one spectrum: knees and betas from the network,
/// amplitudes from the soft intercepts on that spectrum.
PiecewiseFit hypernet_forward(const engine::ParameterSet& params, const HyperNet& net, const Spectrum& spectrum);

}  // namespace pimsm::spectral
