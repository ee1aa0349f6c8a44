#include "pimsm/spectral.hpp"

#include "pimsm/errors.hpp"
#include "pimsm/fft.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace pimsm::spectral {
namespace {

constexpr double kFreqTol = 1e-12;
// log of zero power is clamped here so exactly-flat spectra stay finite
constexpr double kPowerFloor = 1e-300;

double safe_log(double p) { return std::log(std::max(p, kPowerFloor)); }

Spectrum from_bins(const std::vector<std::complex<double>>& bins, std::size_t n, double f_min, double f_max,
                   double scale) {
  Spectrum s;
  s.f_min = f_min;
  s.f_max = f_max;
  for (std::size_t k = 1; k < bins.size(); ++k) {
    const double f = static_cast<double>(k) / static_cast<double>(n);
    if (f < f_min - kFreqTol || f > f_max + kFreqTol) continue;
    s.freqs.push_back(f);
    s.power.push_back(std::norm(bins[k]) * scale);
  }
  if (s.freqs.empty()) throw ParameterError("periodogram: no bins inside [f_min, f_max]");
  return s;
}

void check_bounds(double f_min, double f_max) {
  if (!(f_min > 0.0) || !(f_min < f_max) || f_max > 0.5 + kFreqTol)
    throw ParameterError("spectral bounds must satisfy 0 < f_min < f_max <= 0.5");
}

struct Ols {
  double slope = 0.0;
  double intercept = 0.0;
  double sse = 0.0;
};

// Two-pass least squares on [begin, end).
Ols ols(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  Ols r;
  r.slope = sxx > 0.0 ? sxy / sxx : 0.0;
  r.intercept = my - r.slope * mx;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - r.intercept - r.slope * x[i];
    r.sse += e * e;
  }
  return r;
}

// Prefix sums for O(1) segment regressions during the grid search.
struct Moments {
  std::vector<double> n, sx, sy, sxx, sxy, syy;

  Moments(std::span<const double> x, std::span<const double> y) {
    const std::size_t m = x.size();
    n.assign(m + 1, 0.0);
    sx = sy = sxx = sxy = syy = n;
    for (std::size_t i = 0; i < m; ++i) {
      n[i + 1] = n[i] + 1.0;
      sx[i + 1] = sx[i] + x[i];
      sy[i + 1] = sy[i] + y[i];
      sxx[i + 1] = sxx[i] + x[i] * x[i];
      sxy[i + 1] = sxy[i] + x[i] * y[i];
      syy[i + 1] = syy[i] + y[i] * y[i];
    }
  }

  [[nodiscard]] double sse(std::size_t a, std::size_t b) const {
    const double cn = n[b] - n[a];
    const double cx = sx[b] - sx[a], cy = sy[b] - sy[a];
    const double cxx = sxx[b] - sxx[a], cxy = sxy[b] - sxy[a], cyy = syy[b] - syy[a];
    const double vxx = cxx - cx * cx / cn;
    const double vxy = cxy - cx * cy / cn;
    const double vyy = cyy - cy * cy / cn;
    const double e = vxx > 0.0 ? vyy - vxy * vxy / vxx : vyy;
    return std::max(e, 0.0);
  }
};

}  // namespace

void Spectrum::validate() const {
  if (freqs.size() != power.size()) throw ParameterError("Spectrum: freqs and power differ in length");
  if (freqs.empty()) throw ParameterError("Spectrum: empty");
  double prev = 0.0;
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    if (!(freqs[i] > prev) || freqs[i] > 0.5 + kFreqTol)
      throw ParameterError("Spectrum: frequencies must be strictly increasing inside (0, 0.5]");
    if (!(power[i] >= 0.0)) throw ParameterError("Spectrum: power must be non-negative");
    prev = freqs[i];
  }
}

Spectrum periodogram(std::span<const double> x, double f_min, double f_max) {
  if (x.size() < 4) throw ParameterError("periodogram: need at least 4 samples");
  check_bounds(f_min, f_max);
  return from_bins(fft::rfft(x), x.size(), f_min, f_max, 1.0);
}

Spectrum periodogram(const Matrix& seq, Index channel, double f_min, double f_max) {
  if (channel < 0 || channel >= seq.cols()) throw ParameterError("periodogram: channel out of range");
  const Vector col = seq.col(channel);
  return periodogram(std::span<const double>(col.data(), static_cast<std::size_t>(col.size())), f_min, f_max);
}

Spectrum welch(std::span<const double> x, std::size_t segment, double f_min, double f_max) {
  if (segment < 4 || segment > x.size()) throw ParameterError("welch: segment must be in [4, len(x)]");
  check_bounds(f_min, f_max);
  std::vector<double> window(segment);
  double wss = 0.0;
  for (std::size_t i = 0; i < segment; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(segment));
    wss += window[i] * window[i];
  }
  const std::size_t hop = std::max<std::size_t>(1, segment / 2);
  std::vector<Spectrum> parts;
  std::vector<double> buf(segment);
  for (std::size_t start = 0; start + segment <= x.size(); start += hop) {
    for (std::size_t i = 0; i < segment; ++i) buf[i] = x[start + i] * window[i];
    parts.push_back(from_bins(fft::rfft(buf), segment, f_min, f_max, static_cast<double>(segment) / wss));
  }
  return average_spectra(parts);
}

Spectrum average_spectra(std::span<const Spectrum> spectra) {
  if (spectra.empty()) throw ParameterError("average_spectra: nothing to average");
  Spectrum out = spectra.front();
  for (std::size_t s = 1; s < spectra.size(); ++s) {
    if (spectra[s].freqs != out.freqs) throw ParameterError("average_spectra: frequency grids differ");
    for (std::size_t i = 0; i < out.power.size(); ++i) out.power[i] += spectra[s].power[i];
  }
  for (auto& p : out.power) p /= static_cast<double>(spectra.size());
  return out;
}

Spectrum consensus_spectrum(std::span<const Spectrum> channels) {
  if (channels.empty()) throw ParameterError("consensus_spectrum: no channels");
  Spectrum out = channels.front();
  std::vector<double> acc(out.size(), 0.0);
  for (const auto& ch : channels) {
    if (ch.freqs != out.freqs) throw ParameterError("consensus_spectrum: frequency grids differ");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += safe_log(ch.power[i]);
  }
  for (std::size_t i = 0; i < acc.size(); ++i) out.power[i] = std::exp(acc[i] / static_cast<double>(channels.size()));
  return out;
}

// ---------------------------------------------------------------------------

void PiecewiseFit::validate() const {
  if (K < 1) throw ParameterError("PiecewiseFit: K must be at least 1");
  const auto k = static_cast<std::size_t>(K);
  if (knees.size() != k - 1 || betas.size() != k || log_amplitudes.size() != k)
    throw ParameterError("PiecewiseFit: need K-1 knees, K betas and K amplitudes");
  if (!(f_min > 0.0 && f_min < f_max)) throw ParameterError("PiecewiseFit: need 0 < f_min < f_max");
  double prev = f_min;
  for (const double kn : knees) {
    if (!(kn > prev)) throw ParameterError("PiecewiseFit: knees must increase strictly inside (f_min, f_max)");
    prev = kn;
  }
  if (!(prev < f_max)) throw ParameterError("PiecewiseFit: last knee must be below f_max");
  for (std::size_t i = 0; i < k; ++i)
    if (!std::isfinite(betas[i]) || !std::isfinite(log_amplitudes[i]))
      throw ParameterError("PiecewiseFit: non-finite parameters");
}

void PiecewiseFit::validate_strict() const {
  validate();
  for (const double b : betas)
    if (!(b >= kBetaMin && b <= kBetaMax)) throw ParameterError("PiecewiseFit: beta outside [0.3, 5.0]");
}

std::size_t PiecewiseFit::segment_of(double f) const {
  // left-closed segments
  return static_cast<std::size_t>(std::upper_bound(knees.begin(), knees.end(), f) - knees.begin());
}

std::pair<double, double> PiecewiseFit::band(std::size_t k) const {
  if (k >= static_cast<std::size_t>(K)) throw ParameterError("PiecewiseFit::band: index out of range");
  const double lo = k == 0 ? f_min : knees[k - 1];
  const double hi = k + 1 == static_cast<std::size_t>(K) ? f_max : knees[k];
  return {lo, hi};
}

double PiecewiseFit::log_model(double f) const {
  const std::size_t k = segment_of(f);
  return log_amplitudes[k] - betas[k] * std::log(f);
}

nlohmann::json PiecewiseFit::to_json() const {
  return {{"K", K},
          {"knees", knees},
          {"betas", betas},
          {"log_amplitudes", log_amplitudes},
          {"f_min", f_min},
          {"f_max", f_max},
          {"residual", residual}};
}

PiecewiseFit PiecewiseFit::from_json(const nlohmann::json& j) {
  PiecewiseFit f;
  f.K = j.at("K").get<int>();
  f.knees = j.at("knees").get<std::vector<double>>();
  f.betas = j.at("betas").get<std::vector<double>>();
  f.log_amplitudes = j.at("log_amplitudes").get<std::vector<double>>();
  f.f_min = j.at("f_min").get<double>();
  f.f_max = j.at("f_max").get<double>();
  f.residual = j.value("residual", 0.0);
  f.validate();
  return f;
}

PiecewiseFit project_seams(const PiecewiseFit& fit) {
  PiecewiseFit out = fit;
  for (std::size_t k = 0; k + 1 < out.betas.size(); ++k)
    out.log_amplitudes[k + 1] = out.log_amplitudes[k] + (out.betas[k + 1] - out.betas[k]) * std::log(out.knees[k]);
  return out;
}

PiecewiseFit clamp_exponents(const PiecewiseFit& fit) {
  PiecewiseFit out = fit;
  for (auto& b : out.betas) b = std::clamp(b, kBetaMin, kBetaMax);
  return out;
}

std::vector<double> knee_grid(double f_min, double f_max, std::size_t points) {
  std::vector<double> g(points);
  const double a = std::log(f_min), b = std::log(f_max);
  for (std::size_t i = 0; i < points; ++i)
    g[i] = std::exp(a + (b - a) * static_cast<double>(i + 1) / static_cast<double>(points + 1));
  return g;
}

PiecewiseFit init_fit(const Spectrum& spectrum, int K, const InitFitOptions& opts) {
  spectrum.validate();
  if (K < 1) throw ParameterError("init_fit: K must be at least 1");
  const std::size_t n = spectrum.size();
  const auto uk = static_cast<std::size_t>(K);
  if (n < 4 * uk) throw ParameterError("init_fit: spectrum needs at least 4K bins, has " + std::to_string(n));
  if (K > 1 && opts.grid_points < uk - 1) throw ParameterError("init_fit: knee grid too small");

  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = std::log(spectrum.freqs[i]);
    y[i] = safe_log(spectrum.power[i]);
  }

  PiecewiseFit fit;
  fit.K = K;
  fit.f_min = spectrum.f_min;
  fit.f_max = spectrum.f_max;

  std::vector<std::size_t> best_idx;  // indices into the candidate grid
  const std::vector<double> grid = knee_grid(spectrum.f_min, spectrum.f_max, opts.grid_points);
  if (K > 1) {
    // boundary bin index of each candidate knee
    std::vector<std::size_t> cut(grid.size());
    for (std::size_t g = 0; g < grid.size(); ++g)
      cut[g] = static_cast<std::size_t>(std::lower_bound(spectrum.freqs.begin(), spectrum.freqs.end(), grid[g]) -
                                        spectrum.freqs.begin());
    const Moments mom(x, y);
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> idx(uk - 1);
    // depth-first enumeration of strictly increasing candidate tuples
    auto search = [&](auto&& self, std::size_t depth, std::size_t first_cand, std::size_t seg_start,
                      double acc) -> void {
      if (acc >= best) return;
      if (depth == uk - 1) {
        if (n - seg_start < opts.min_bins) return;
        const double total = acc + mom.sse(seg_start, n);
        if (total < best) {
          best = total;
          best_idx = idx;
        }
        return;
      }
      for (std::size_t g = first_cand; g < grid.size(); ++g) {
        if (cut[g] < seg_start + opts.min_bins) continue;
        if (n - cut[g] < opts.min_bins * (uk - 1 - depth)) break;
        idx[depth] = g;
        self(self, depth + 1, g + 1, cut[g], acc + mom.sse(seg_start, cut[g]));
      }
    };
    search(search, 0, 0, 0, 0.0);
    if (best_idx.empty()) throw ParameterError("init_fit: no knee placement leaves min_bins per segment");
    for (const auto g : best_idx) fit.knees.push_back(grid[g]);
  }

  // final per-segment regressions with the two-pass formula
  std::size_t start = 0;
  fit.residual = 0.0;
  for (std::size_t k = 0; k < uk; ++k) {
    const std::size_t end =
        k + 1 < uk ? static_cast<std::size_t>(std::lower_bound(spectrum.freqs.begin(), spectrum.freqs.end(),
                                                               fit.knees[k]) -
                                              spectrum.freqs.begin())
                   : n;
    const Ols r = ols(std::span<const double>(x).subspan(start, end - start),
                      std::span<const double>(y).subspan(start, end - start));
    fit.betas.push_back(-r.slope);
    fit.log_amplitudes.push_back(r.intercept);
    fit.residual += r.sse;
    start = end;
  }
  return fit;
}

double eval_piecewise(const PiecewiseFit& fit, double f) {
  if (f < fit.f_min * (1.0 - kFreqTol) || f > fit.f_max * (1.0 + kFreqTol))
    throw ParameterError("eval_piecewise: frequency outside [f_min, f_max]");
  return std::exp(project_seams(fit).log_model(f));
}

double fit_loss(const PiecewiseFit& fit, const Spectrum& spectrum, const FitLossOptions& opts) {
  fit.validate();
  spectrum.validate();
  const std::size_t n = spectrum.size();
  double total = 0.0;
  int used = 0;
  for (const int s : opts.levels) {
    if (s < 1) throw ParameterError("fit_loss: levels must be positive");
    const std::size_t step = static_cast<std::size_t>(s);
    const std::size_t groups = n / step;
    if (groups == 0) continue;
    double mae = 0.0;
    for (std::size_t g = 0; g < groups; ++g) {
      double data = 0.0, model = 0.0;
      for (std::size_t i = g * step; i < (g + 1) * step; ++i) {
        data += safe_log(spectrum.power[i]);
        model += fit.log_model(spectrum.freqs[i]);
      }
      mae += std::abs(model - data) / static_cast<double>(step);
    }
    total += mae / static_cast<double>(groups);
    ++used;
  }
  if (used == 0) throw ParameterError("fit_loss: spectrum too short for every level");
  return total / static_cast<double>(used);
}

double fit_loss(const PiecewiseFit& fit, std::span<const Spectrum> channels, const FitLossOptions& opts) {
  if (channels.empty()) throw ParameterError("fit_loss: no channels");
  double total = 0.0;
  for (const auto& ch : channels) total += fit_loss(fit, ch, opts);
  return total / static_cast<double>(channels.size());
}

double seam_loss(const PiecewiseFit& fit) {
  fit.validate();
  double s = 0.0;
  for (std::size_t k = 0; k < fit.knees.size(); ++k) {
    const double lf = std::log(fit.knees[k]);
    const double left = fit.log_amplitudes[k] - fit.betas[k] * lf;
    const double right = fit.log_amplitudes[k + 1] - fit.betas[k + 1] * lf;
    s += (left - right) * (left - right);
  }
  return s;
}

PiecewiseFit consensus_fit(std::span<const PiecewiseFit> fits) {
  if (fits.empty()) throw ParameterError("consensus_fit: no fits");
  PiecewiseFit out = fits.front();
  const double n = static_cast<double>(fits.size());
  for (std::size_t k = 0; k < out.knees.size(); ++k) {
    double acc = 0.0;
    for (const auto& f : fits) acc += std::log(f.knees.at(k));
    out.knees[k] = std::exp(acc / n);
  }
  for (std::size_t k = 0; k < out.betas.size(); ++k) {
    double b = 0.0, a = 0.0;
    for (const auto& f : fits) {
      if (f.K != out.K) throw ParameterError("consensus_fit: K differs between fits");
      b += f.betas[k];
      a += f.log_amplitudes[k];
    }
    out.betas[k] = b / n;
    out.log_amplitudes[k] = a / n;
  }
  double r = 0.0;
  for (const auto& f : fits) r += f.residual;
  out.residual = r / n;
  return out;
}

double energy_centroid(double f_a, double f_b, double beta) {
  if (!(f_a > 0.0)) throw ParameterError("energy_centroid: f_a must be positive");
  if (!(f_a < f_b)) throw ParameterError("energy_centroid: need f_a < f_b");
  if (!std::isfinite(beta)) throw ParameterError("energy_centroid: beta must be finite");
  const double fc = f_a * std::exp(log_centroid_offset(std::log(f_b / f_a), beta));
  // rounding can only push a result onto the band edge, never past it
  return std::clamp(fc, f_a, f_b);
}

}  // namespace pimsm::spectral
