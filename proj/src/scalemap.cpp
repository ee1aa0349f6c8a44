#include "pimsm/scalemap.hpp"

#include "pimsm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pimsm::scalemap {

using engine::Var;

std::string to_string(MapMode m) { return m == MapMode::PerBand ? "per-band" : "global"; }

MapMode mode_from_string(const std::string& s) {
  if (s == "per-band") return MapMode::PerBand;
  if (s == "global") return MapMode::Global;
  throw ParameterError("unknown mapping mode '" + s + "' (expected per-band or global)");
}

void MapOptions::validate() const {
  if (!(w >= 0.0 && w <= 1.0)) throw ParameterError("mixing weight w must lie in [0, 1]");
  if (!(delta_min_factor > 0.0 && delta_min_factor < delta_max_factor))
    throw ParameterError("need 0 < delta_min < delta_max");
}

void ScaleAssignment::validate() const {
  const std::size_t K = deltas.size();
  if (K == 0 || centroids.size() != K || bands.size() != K || band_of_scale.size() != K)
    throw ContractError("ScaleAssignment: inconsistent sizes");
  for (std::size_t k = 0; k < K; ++k) {
    if (!(deltas[k] >= delta_min && deltas[k] <= delta_max)) throw ContractError("ScaleAssignment: delta out of bounds");
    if (k > 0 && deltas[k] > deltas[k - 1]) throw ContractError("ScaleAssignment: deltas not ordered");
    if (!(centroids[k] >= bands[k].first && centroids[k] <= bands[k].second))
      throw ContractError("ScaleAssignment: centroid outside its band");
    if (k > 0 && centroids[k] > centroids[k - 1] && deltas[k] < deltas[k - 1] && mode == MapMode::Global)
      throw ContractError("ScaleAssignment: higher centroid with smaller delta");
  }
}

nlohmann::json ScaleAssignment::to_json() const {
  nlohmann::json b = nlohmann::json::array();
  for (const auto& [lo, hi] : bands) b.push_back({lo, hi});
  return {{"deltas", deltas}, {"centroids", centroids}, {"bands", b},          {"band_of_scale", band_of_scale},
          {"mode", to_string(mode)}, {"w", w},        {"delta_min", delta_min}, {"delta_max", delta_max}};
}

std::vector<std::pair<double, double>> fit_bands(const spectral::PiecewiseFit& fit) {
  fit.validate();
  std::vector<std::pair<double, double>> out;
  for (std::size_t k = 0; k < static_cast<std::size_t>(fit.K); ++k) out.push_back(fit.band(k));
  return out;
}

std::vector<double> band_centroids(const spectral::PiecewiseFit& fit) {
  std::vector<double> c;
  const auto bands = fit_bands(fit);
  for (std::size_t k = 0; k < bands.size(); ++k)
    c.push_back(spectral::energy_centroid(bands[k].first, bands[k].second, fit.betas[k]));
  return c;
}

BandCoordinates band_coordinates(const spectral::PiecewiseFit& fit, std::span<const double> centroids) {
  const auto bands = fit_bands(fit);
  if (centroids.size() != bands.size()) throw ParameterError("band_coordinates: one centroid per band required");
  const double lmin = std::log(fit.f_min), span = std::log(fit.f_max) - lmin;
  BandCoordinates bc;
  for (std::size_t k = 0; k < bands.size(); ++k) {
    const double la = std::log(bands[k].first), lb = std::log(bands[k].second);
    if (!(lb > la)) throw ParameterError("band_coordinates: degenerate band");
    const double lc = std::log(centroids[k]);
    bc.p.push_back(clamp((0.5 * (la + lb) - lmin) / span, 0.0, 1.0));
    bc.t.push_back(clamp((lc - la) / (lb - la), 0.0, 1.0));
    bc.g.push_back(clamp((lc - lmin) / span, 0.0, 1.0));
  }
  return bc;
}

std::vector<double> map_delta(const BandCoordinates& coords, double w, double delta_min, double delta_max,
                              MapMode mode) {
  if (!(w >= 0.0 && w <= 1.0)) throw ParameterError("map_delta: w must lie in [0, 1]");
  if (!(delta_min > 0.0 && delta_min < delta_max)) throw ParameterError("map_delta: need 0 < delta_min < delta_max");
  std::vector<double> out;
  for (std::size_t k = 0; k < coords.p.size(); ++k) {
    const double m = mode == MapMode::PerBand ? mix_position(coords.p[k], coords.t[k], w) : coords.g[k];
    out.push_back(position_to_delta(m, delta_min, delta_max));
  }
  return out;
}

ScaleAssignment enforce_order(std::span<const double> deltas, std::span<const double> centroids,
                              std::span<const std::pair<double, double>> bands, double delta_min, double delta_max) {
  if (deltas.size() != centroids.size() || deltas.size() != bands.size())
    throw ParameterError("enforce_order: deltas, centroids and bands must match");
  std::vector<std::size_t> order(deltas.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return deltas[a] > deltas[b]; });
  ScaleAssignment s;
  s.delta_min = delta_min;
  s.delta_max = delta_max;
  for (const std::size_t i : order) {
    s.deltas.push_back(clamp(deltas[i], delta_min, delta_max));
    s.centroids.push_back(centroids[i]);
    s.bands.push_back(bands[i]);
    s.band_of_scale.push_back(i);
  }
  return s;
}

ScaleAssignment assign_scales(const spectral::PiecewiseFit& fit, const MapOptions& opts, double acquisition_step) {
  opts.validate();
  if (!(acquisition_step > 0.0)) throw ParameterError("assign_scales: acquisition_step must be positive");
  const auto bands = fit_bands(fit);
  const auto centroids = band_centroids(fit);
  const auto coords = band_coordinates(fit, centroids);
  const double dmin = opts.delta_min(acquisition_step), dmax = opts.delta_max(acquisition_step);
  const auto deltas = map_delta(coords, opts.w, dmin, dmax, opts.mode);
  ScaleAssignment s = enforce_order(deltas, centroids, bands, dmin, dmax);
  s.mode = opts.mode;
  s.w = opts.w;
  return s;
}

double delta_anchor_loss(std::span<const double> deltas, double acquisition_step, double lambda) {
  if (deltas.empty()) return 0.0;
  if (!(acquisition_step > 0.0)) throw ParameterError("delta_anchor_loss: acquisition_step must be positive");
  double s = 0.0;
  for (const double d : deltas) {
    if (!(d > 0.0)) throw ParameterError("delta_anchor_loss: deltas must be positive");
    const double l = std::log(d / acquisition_step);
    s += l * l;
  }
  return lambda * s / static_cast<double>(deltas.size());
}

double effective_timescale(double delta, double A) {
  if (!(A < 0.0)) throw ParameterError("effective_timescale: A must be negative");
  if (!(delta > 0.0)) throw ParameterError("effective_timescale: delta must be positive");
  return delta / std::abs(A);
}

Var map_delta_tape(const Var& log_knees, const Var& betas, double f_min, double f_max, const MapOptions& opts,
                   double acquisition_step) {
  using engine::slice_cols;
  opts.validate();
  engine::Tape& t = *betas.tape();
  const Index B = betas.rows();
  const Index K = betas.cols();
  const double lmin = std::log(f_min), lmax = std::log(f_max), span = lmax - lmin;
  const double dmin = opts.delta_min(acquisition_step), dmax = opts.delta_max(acquisition_step);
  std::vector<Var> deltas;
  for (Index k = 0; k < K; ++k) {
    const Var la = k == 0 ? t.constant(Matrix::Constant(B, 1, lmin)) : slice_cols(log_knees, k - 1, 1);
    const Var lb = k == K - 1 ? t.constant(Matrix::Constant(B, 1, lmax)) : slice_cols(log_knees, k, 1);
    const Var width = lb - la;
    const Var offset = spectral::log_centroid_offset(width, slice_cols(betas, k, 1));
    Var m;
    if (opts.mode == MapMode::PerBand) {
      const Var p = engine::clamp(((la + lb) * 0.5 - lmin) / span, 0.0, 1.0);
      const Var tk = engine::clamp(offset / width, 0.0, 1.0);
      m = mix_position(p, tk, opts.w);
    } else {
      m = engine::clamp((la + offset - lmin) / span, 0.0, 1.0);
    }
    deltas.push_back(position_to_delta(m, dmin, dmax));
  }
  const Var sorted = engine::sort_rows_desc(engine::concat_cols(deltas)).first;
  return engine::clamp(sorted, dmin, dmax);
}

Var delta_anchor_loss(const Var& deltas, double acquisition_step, double lambda) {
  return lambda * engine::mean(engine::square(engine::log(deltas / acquisition_step)));
}

}  // namespace pimsm::scalemap
