#pragma once

// Mapping of fitted spectral bands to ordered discretisation steps.

#include "pimsm/engine/ops.hpp"
#include "pimsm/scalar_math.hpp"
#include "pimsm/spectral.hpp"

#include "json.hpp"

#include <span>
#include <string>
#include <utility>
#include <vector>

namespace pimsm::scalemap {

enum class MapMode { PerBand, Global };

std::string to_string(MapMode m);
MapMode mode_from_string(const std::string& s);

struct MapOptions {
  double w = 0.3;                  // weight of the within-band coordinate
  MapMode mode = MapMode::PerBand;
  double delta_min_factor = 0.1;   // times acquisition_step
  double delta_max_factor = 10.0;  // times acquisition_step

  void validate() const;
  [[nodiscard]] double delta_min(double acquisition_step) const { return delta_min_factor * acquisition_step; }
  [[nodiscard]] double delta_max(double acquisition_step) const { return delta_max_factor * acquisition_step; }
};

/// Ordered steps, fast (largest) first, with the band each scale came from.
struct ScaleAssignment {
  std::vector<double> deltas;                      // K, non-increasing
  std::vector<double> centroids;                   // per scale
  std::vector<std::pair<double, double>> bands;    // per scale
  std::vector<std::size_t> band_of_scale;          // scale -> original band index
  MapMode mode = MapMode::PerBand;
  double w = 0.3;
  double delta_min = 0.1;
  double delta_max = 10.0;

  /// Throws ContractError if ordering, bounds or centroid placement fail.
  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
};

struct BandCoordinates {
  std::vector<double> p;  // log-axis position of each band's geometric midpoint
  std::vector<double> t;  // log-axis position of the centroid inside its band
  std::vector<double> g;  // log-axis position of the centroid over [f_min, f_max]
};

/// Edges of each band of a fit, [f_min, knees..., f_max].
std::vector<std::pair<double, double>> fit_bands(const spectral::PiecewiseFit& fit);
/// Energy centroid of every band under the fit's exponents.
std::vector<double> band_centroids(const spectral::PiecewiseFit& fit);

BandCoordinates band_coordinates(const spectral::PiecewiseFit& fit, std::span<const double> centroids);

/// Unordered steps, one per band.
std::vector<double> map_delta(const BandCoordinates& coords, double w, double delta_min, double delta_max,
                              MapMode mode);

/// Binds scale 1 to the largest step; stable descending sort, then clamp.
ScaleAssignment enforce_order(std::span<const double> deltas, std::span<const double> centroids,
                              std::span<const std::pair<double, double>> bands, double delta_min, double delta_max);

/// Full pipeline for one fit.
ScaleAssignment assign_scales(const spectral::PiecewiseFit& fit, const MapOptions& opts, double acquisition_step);

double delta_anchor_loss(std::span<const double> deltas, double acquisition_step, double lambda);

/// Delta / |A|; throws ParameterError for A >= 0.
double effective_timescale(double delta, double A);

// Shared formulas, usable on doubles and on tape nodes.

/// m = (1 - w) p + w t
template <class T>
T mix_position(const T& p, const T& t, double w) {
  return (1.0 - w) * p + w * t;
}

/// Affine map of m in [0, 1] onto [delta_min, delta_max].
template <class T>
T position_to_delta(const T& m, double delta_min, double delta_max) {
  return (delta_max - delta_min) * m + delta_min;
}

/// Tape version of the whole mapping for a batch: log_knees is B x (K-1),
/// betas B x K. Returns B x K steps sorted descending per row.
engine::Var map_delta_tape(const engine::Var& log_knees, const engine::Var& betas, double f_min, double f_max,
                           const MapOptions& opts, double acquisition_step);

/// lambda * mean over all entries of log(delta / step)^2.
engine::Var delta_anchor_loss(const engine::Var& deltas, double acquisition_step, double lambda);

}  // namespace pimsm::scalemap
