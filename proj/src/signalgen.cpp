#include "pimsm/signalgen.hpp"

#include "pimsm/errors.hpp"
#include "pimsm/fft.hpp"
#include "pimsm/rng.hpp"

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

namespace pimsm {

double KernelProfile::l1_mass() const {
  double s = 0.0;
  for (const double v : values) s += std::abs(v);
  return s * dt;
}

void KernelProfile::validate() const {
  if (!(dt > 0.0)) throw ParameterError("KernelProfile: dt must be positive");
  for (const double v : values)
    if (!std::isfinite(v)) throw ParameterError("KernelProfile: non-finite value");
}

}  // namespace pimsm

namespace pimsm::signalgen {

void PiecewiseSpec::validate() const {
  if (exponents.empty()) throw ParameterError("PiecewiseSpec: at least one exponent required");
  if (knees.size() + 1 != exponents.size()) throw ParameterError("PiecewiseSpec: need K-1 knees for K exponents");
  if (!(f_min > 0.0) || !(f_min < f_max) || f_max > 0.5)
    throw ParameterError("PiecewiseSpec: require 0 < f_min < f_max <= 0.5");
  double prev = f_min;
  for (const double k : knees) {
    if (!(k > prev)) throw ParameterError("PiecewiseSpec: knees must be strictly increasing inside (f_min, f_max)");
    prev = k;
  }
  if (!(prev < f_max)) throw ParameterError("PiecewiseSpec: last knee must be below f_max");
  for (const double b : exponents)
    if (!(b >= 0.3 && b <= 5.0)) throw ParameterError("PiecewiseSpec: exponents must lie in [0.3, 5.0]");
  if (!(amplitude > 0.0)) throw ParameterError("PiecewiseSpec: amplitude must be positive");
}

double PiecewiseSpec::power(double f) const {
  // log P = log A - beta_1 log f, then continuity at each knee
  double log_p0 = std::log(amplitude);
  std::size_t k = 0;
  while (k < knees.size() && f >= knees[k]) {
    // offset so that segment k+1 meets segment k at knee k
    log_p0 += (exponents[k + 1] - exponents[k]) * std::log(knees[k]);
    ++k;
  }
  return std::exp(log_p0 - exponents[k] * std::log(f));
}

nlohmann::json PiecewiseSpec::to_json() const {
  return {{"knees", knees}, {"exponents", exponents}, {"f_min", f_min}, {"f_max", f_max}, {"amplitude", amplitude}};
}

int LabeledSequenceSet::num_classes() const {
  int c = 0;
  for (const int l : class_labels) c = std::max(c, l + 1);
  return c;
}

void LabeledSequenceSet::validate() const {
  if (sequences.empty()) throw DataError("sequence set is empty");
  const Index T = length(), d = channels();
  if (T < 4) throw DataError("sequences need at least 4 samples");
  if (d < 1) throw DataError("sequences need at least one channel");
  for (std::size_t i = 0; i < sequences.size(); ++i)
    if (sequences[i].rows() != T || sequences[i].cols() != d)
      throw DataError("sequence " + std::to_string(i) + " has inconsistent shape");
  if (!(acquisition_step > 0.0)) throw DataError("acquisition_step must be positive");
  if (!class_labels.empty()) {
    if (class_labels.size() != sequences.size()) throw DataError("label count does not match sequence count");
    for (const int l : class_labels)
      if (l < 0) throw DataError("class labels must be non-negative");
  }
  if (!targets.empty() && targets.size() != sequences.size())
    throw DataError("target count does not match sequence count");
}

void standardize_columns(Matrix& x) {
  for (Index c = 0; c < x.cols(); ++c) {
    const double mu = x.col(c).mean();
    x.col(c).array() -= mu;
    const double sd = std::sqrt(x.col(c).squaredNorm() / static_cast<double>(x.rows()));
    if (sd > 0.0) x.col(c) /= sd;
  }
}

std::vector<double> colored_channel(const PiecewiseSpec& spec, std::size_t T, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::vector<std::complex<double>> bins(T / 2 + 1, {0.0, 0.0});
  for (std::size_t k = 1; k < bins.size(); ++k) {
    const double f = static_cast<double>(k) / static_cast<double>(T);
    const double mag = std::sqrt(spec.power(f));
    if (T % 2 == 0 && k == T / 2) {
      // Nyquist bin must be real
      bins[k] = {phase(rng) < std::numbers::pi ? mag : -mag, 0.0};
    } else {
      bins[k] = std::polar(mag, phase(rng));
    }
  }
  return fft::irfft(bins, T);
}

LabeledSequenceSet gen_colored_noise(const PiecewiseSpec& spec, Index T, Index d, std::uint64_t seed,
                                     std::size_t count) {
  spec.validate();
  if (T < 4) throw ParameterError("gen_colored_noise: T must be at least 4");
  if (d < 1) throw ParameterError("gen_colored_noise: d must be at least 1");
  if (count < 1) throw ParameterError("gen_colored_noise: count must be at least 1");
  LabeledSequenceSet out;
  out.sequences.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    Matrix x(T, d);
    for (Index c = 0; c < d; ++c) {
      const auto ch = colored_channel(spec, static_cast<std::size_t>(T),
                                      derive_seed(seed, {n, static_cast<std::uint64_t>(c)}));
      for (Index t = 0; t < T; ++t) x(t, c) = ch[static_cast<std::size_t>(t)];
    }
    standardize_columns(x);
    out.sequences.push_back(std::move(x));
  }
  out.metadata = {{"generator", "colored_noise"}, {"spec", spec.to_json()}, {"T", T}, {"d", d},
                  {"seed", seed}, {"count", count}};
  return out;
}

namespace {
bool overlaps(const Band& a, const Band& b) { return a.lo < b.hi && b.lo < a.hi; }
}  // namespace

LabeledSequenceSet gen_two_timescale_task(const TwoTimescaleConfig& cfg) {
  for (const Band& b : {cfg.slow_band, cfg.fast_band})
    if (!(b.lo > 0.0 && b.lo < b.hi && b.hi < 0.5))
      throw ParameterError("gen_two_timescale_task: bands must be sub-intervals of (0, 0.5)");
  if (overlaps(cfg.slow_band, cfg.fast_band)) throw ParameterError("gen_two_timescale_task: bands overlap");
  if (cfg.T < 4 || cfg.d < 1 || cfg.n_per_class < 1 || cfg.components < 1)
    throw ParameterError("gen_two_timescale_task: invalid sizes");
  if (cfg.signal_amplitude < 0.0) throw ParameterError("gen_two_timescale_task: negative amplitude");
  cfg.background.validate();

  LabeledSequenceSet out;
  out.acquisition_step = cfg.acquisition_step;
  const std::size_t total = 2 * cfg.n_per_class;
  for (std::size_t n = 0; n < total; ++n) {
    // interleave labels so any prefix is balanced
    const int label = static_cast<int>(n % 2);
    const Band& band = label == 0 ? cfg.slow_band : cfg.fast_band;
    Matrix x(cfg.T, cfg.d);
    for (Index c = 0; c < cfg.d; ++c) {
      const std::uint64_t s = derive_seed(cfg.seed, {n, static_cast<std::uint64_t>(c)});
      auto bg = colored_channel(cfg.background, static_cast<std::size_t>(cfg.T), s);
      Eigen::Map<Vector> col(bg.data(), cfg.T);
      const double mu = col.mean();
      col.array() -= mu;
      col /= std::sqrt(col.squaredNorm() / static_cast<double>(cfg.T));
      std::mt19937_64 rng(derive_seed(s, {0x5167ULL}));
      std::uniform_real_distribution<double> freq(band.lo, band.hi);
      std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
      for (int m = 0; m < cfg.components; ++m) {
        const double f = freq(rng);
        const double ph = phase(rng);
        for (Index t = 0; t < cfg.T; ++t)
          col(t) += cfg.signal_amplitude * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(t) + ph);
      }
      x.col(c) = col;
    }
    standardize_columns(x);
    out.sequences.push_back(std::move(x));
    out.class_labels.push_back(label);
  }
  out.metadata = {{"generator", "two_timescale"},
                  {"n_per_class", cfg.n_per_class},
                  {"T", cfg.T},
                  {"d", cfg.d},
                  {"slow_band", {cfg.slow_band.lo, cfg.slow_band.hi}},
                  {"fast_band", {cfg.fast_band.lo, cfg.fast_band.hi}},
                  {"signal_amplitude", cfg.signal_amplitude},
                  {"components", cfg.components},
                  {"background", cfg.background.to_json()},
                  {"seed", cfg.seed}};
  return out;
}

KernelProfile powerlaw_kernel(double alpha, std::size_t L, double dt) {
  if (!(alpha > 1.0)) throw ParameterError("powerlaw_kernel: alpha must exceed 1 (L1 mass diverges otherwise)");
  if (L < 1) throw ParameterError("powerlaw_kernel: L must be at least 1");
  if (!(dt > 0.0)) throw ParameterError("powerlaw_kernel: dt must be positive");
  KernelProfile k;
  k.dt = dt;
  k.values.resize(L);
  for (std::size_t l = 0; l < L; ++l) k.values[l] = std::pow(1.0 + static_cast<double>(l) * dt, -alpha);
  return k;
}

KernelProfile exp_mixture_kernel(std::span<const double> weights, std::span<const double> rates, std::size_t L,
                                 double dt) {
  if (weights.empty() || weights.size() != rates.size())
    throw ParameterError("exp_mixture_kernel: need matching, non-empty weights and rates");
  double total = 0.0;
  for (const double a : weights) {
    if (!(a >= 0.0)) throw ParameterError("exp_mixture_kernel: weights must be non-negative");
    total += a;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ParameterError("exp_mixture_kernel: weights must sum to 1");
  for (const double r : rates)
    if (!(r > 0.0)) throw ParameterError("exp_mixture_kernel: rates must be positive");
  if (!(dt > 0.0)) throw ParameterError("exp_mixture_kernel: dt must be positive");
  KernelProfile k;
  k.dt = dt;
  k.values.assign(L, 0.0);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t i = 0; i < weights.size(); ++i)
      k.values[l] += weights[i] * std::exp(-rates[i] * static_cast<double>(l) * dt);
  return k;
}

}  // namespace pimsm::signalgen
