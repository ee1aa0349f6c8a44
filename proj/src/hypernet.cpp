#include "pimsm/hypernet.hpp"

#include "pimsm/errors.hpp"
#include "pimsm/init.hpp"

#include <algorithm>
#include <cmath>

namespace pimsm::spectral {

using engine::Bound;
using engine::ParameterSet;
using engine::Tape;
using engine::Var;

void HyperNetConfig::validate() const {
  if (K < 1) throw ParameterError("hypernet: K must be at least 1");
  if (feature_bins < 2 || hidden < 1) throw ParameterError("hypernet: invalid layer sizes");
  if (!(f_min > 0.0 && f_min < f_max && f_max <= 0.5)) throw ParameterError("hypernet: need 0 < f_min < f_max <= 0.5");
  if (!(min_fraction >= 0.0 && min_fraction < 1.0)) throw ParameterError("hypernet: min_fraction must be in [0, 1)");
  if (!(membership_width > 0.0)) throw ParameterError("hypernet: membership_width must be positive");
  if (levels.empty()) throw ParameterError("hypernet: at least one fit level required");
}

HyperNet HyperNet::create(ParameterSet& params, const HyperNetConfig& cfg, std::uint64_t seed,
                          const std::string& prefix) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const auto nb = static_cast<Index>(cfg.feature_bins), nh = static_cast<Index>(cfg.hidden);
  const Index nout = 2 * cfg.K - 1;
  HyperNet net;
  net.cfg = cfg;
  net.w1 = params.add(prefix + "w1", glorot(nb, nh, rng));
  net.b1 = params.add(prefix + "b1", Matrix::Zero(1, nh), false);
  net.w2 = params.add(prefix + "w2", glorot(nh, nh, rng));
  net.b2 = params.add(prefix + "b2", Matrix::Zero(1, nh), false);
  // small output weights so the biases set the initial fit
  net.w3 = params.add(prefix + "w3", glorot(nh, nout, rng, 0.01));
  Matrix b3 = Matrix::Zero(1, nout);
  for (int k = 0; k < cfg.K; ++k) b3(0, cfg.K - 1 + k) = std::log((1.0 - 0.3) / (5.0 - 1.0));  // beta = 1
  net.b3 = params.add(prefix + "b3", b3, false);
  return net;
}

void HyperNet::init_from_fit(ParameterSet& params, const PiecewiseFit& fit) const {
  if (fit.K != cfg.K) throw ParameterError("hypernet init: K mismatch");
  const int K = cfg.K;
  const double lo = std::log(cfg.f_min), span = std::log(cfg.f_max) - lo;
  Matrix& b3 = params[this->b3].value;
  std::vector<double> edges{0.0};
  for (const double kn : fit.knees) edges.push_back(std::clamp((std::log(kn) - lo) / span, 0.0, 1.0));
  edges.push_back(1.0);
  std::vector<double> share(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const double frac = edges[static_cast<std::size_t>(k) + 1] - edges[static_cast<std::size_t>(k)];
    share[static_cast<std::size_t>(k)] =
        std::max((frac - cfg.min_fraction / K) / (1.0 - cfg.min_fraction), 1e-4);
  }
  for (int k = 0; k + 1 < K; ++k)
    b3(0, k) = std::log(share[static_cast<std::size_t>(k)]) - std::log(share.back());
  for (int k = 0; k < K; ++k) {
    const double u = std::clamp((fit.betas[static_cast<std::size_t>(k)] - kBetaMin) / (kBetaMax - kBetaMin), 0.01, 0.99);
    b3(0, K - 1 + k) = std::log(u / (1.0 - u));
  }
}

Matrix spectral_features(const Spectrum& spectrum, const HyperNetConfig& cfg) {
  spectrum.validate();
  const std::size_t nb = cfg.feature_bins;
  const double lo = std::log(cfg.f_min), hi = std::log(cfg.f_max);
  std::vector<double> acc(nb, 0.0);
  std::vector<int> count(nb, 0);
  for (std::size_t i = 0; i < spectrum.size(); ++i) {
    const double u = (std::log(spectrum.freqs[i]) - lo) / (hi - lo);
    const auto b = static_cast<std::size_t>(std::clamp(u, 0.0, 1.0 - 1e-12) * static_cast<double>(nb));
    acc[b] += std::log(std::max(spectrum.power[i], 1e-300));
    ++count[b];
  }
  std::vector<std::size_t> filled;
  for (std::size_t b = 0; b < nb; ++b)
    if (count[b] > 0) {
      acc[b] /= count[b];
      filled.push_back(b);
    }
  if (filled.empty()) throw ParameterError("spectral_features: no spectrum bins inside the feature range");
  for (std::size_t b = 0; b < nb; ++b) {
    if (count[b] > 0) continue;
    const auto right = std::lower_bound(filled.begin(), filled.end(), b);
    if (right == filled.begin()) {
      acc[b] = acc[filled.front()];
    } else if (right == filled.end()) {
      acc[b] = acc[filled.back()];
    } else {
      const std::size_t r = *right, l = *(right - 1);
      const double w = static_cast<double>(b - l) / static_cast<double>(r - l);
      acc[b] = (1.0 - w) * acc[l] + w * acc[r];
    }
  }
  Matrix out(1, static_cast<Index>(nb));
  for (std::size_t b = 0; b < nb; ++b) out(0, static_cast<Index>(b)) = acc[b];
  const double mu = out.mean();
  out.array() -= mu;
  const double sd = std::sqrt(out.squaredNorm() / static_cast<double>(nb));
  if (sd > 1e-12) out /= sd;
  return out;
}

Matrix spectral_features(std::span<const Spectrum> spectra, const HyperNetConfig& cfg) {
  Matrix out(static_cast<Index>(spectra.size()), static_cast<Index>(cfg.feature_bins));
  for (std::size_t i = 0; i < spectra.size(); ++i) out.row(static_cast<Index>(i)) = spectral_features(spectra[i], cfg);
  return out;
}

Var knees_from_logits(const Var& logits, const HyperNetConfig& cfg) {
  Tape& t = *logits.tape();
  const int K = cfg.K;
  const Var padded = engine::concat_cols({logits, t.constant(Matrix::Zero(logits.rows(), 1))});
  const Var frac = engine::softmax_rows(padded) * (1.0 - cfg.min_fraction) + cfg.min_fraction / K;
  // cumulative sums of the first K-1 fractions
  Matrix upper = Matrix::Zero(K, K - 1);
  for (int i = 0; i < K; ++i)
    for (int k = i; k < K - 1; ++k) upper(i, k) = 1.0;
  const double lo = std::log(cfg.f_min), span = std::log(cfg.f_max) - lo;
  return engine::matmul(frac, t.constant(upper)) * span + lo;
}

Var betas_from_logits(const Var& logits) { return engine::sigmoid(logits) * (kBetaMax - kBetaMin) + kBetaMin; }

HyperOutput hypernet_apply(const Bound& p, const HyperNet& net, const Var& features) {
  using engine::matmul;
  using engine::tanh;
  const int K = net.cfg.K;
  const Var h1 = tanh(matmul(features, p[net.w1]) + p[net.b1]);
  const Var h2 = tanh(matmul(h1, p[net.w2]) + p[net.b2]);
  const Var out = matmul(h2, p[net.w3]) + p[net.b3];
  HyperOutput r;
  if (K > 1) {
    r.log_knees = knees_from_logits(engine::slice_cols(out, 0, K - 1), net.cfg);
  } else {
    r.log_knees = features.tape()->constant(Matrix::Zero(features.rows(), 0));
  }
  r.betas = betas_from_logits(engine::slice_cols(out, K - 1, K));
  return r;
}

SoftFitTerms soft_fit_terms(const HyperOutput& out, const Matrix& log_freqs, const Matrix& log_power,
                            const HyperNetConfig& cfg) {
  using engine::slice_cols;
  Tape& t = *out.betas.tape();
  const int K = cfg.K;
  const Index B = out.betas.rows();
  const Index n = log_freqs.cols();
  if (log_power.cols() != n || log_freqs.rows() != 1) throw ParameterError("soft_fit_terms: shape mismatch");
  if (B == 0 || log_power.rows() % B != 0) throw ParameterError("soft_fit_terms: rows must be channels x batch");
  const Index channels = log_power.rows() / B;
  const Var knees = channels == 1 ? out.log_knees : engine::tile_rows(out.log_knees, channels);
  const Var betas = channels == 1 ? out.betas : engine::tile_rows(out.betas, channels);
  const Var X = t.constant(log_freqs);
  const Var Y = t.constant(log_power);

  // step[k] rises from 0 to 1 across knee k
  std::vector<Var> step;
  for (int k = 0; k + 1 < K; ++k)
    step.push_back(engine::sigmoid((X - slice_cols(knees, k, 1)) * (1.0 / cfg.membership_width)));
  std::vector<Var> member;
  for (int k = 0; k < K; ++k) {
    if (K == 1) {
      member.push_back(t.constant(Matrix::Ones(log_power.rows(), n)));
    } else if (k == 0) {
      member.push_back(1.0 - step[0]);
    } else if (k == K - 1) {
      member.push_back(step[static_cast<std::size_t>(k) - 1]);
    } else {
      member.push_back(step[static_cast<std::size_t>(k) - 1] - step[static_cast<std::size_t>(k)]);
    }
  }
  std::vector<Var> icpt;
  Var model;
  for (int k = 0; k < K; ++k) {
    const Var beta = slice_cols(betas, k, 1);
    const Var& m = member[static_cast<std::size_t>(k)];
    const Var a = engine::row_sum(m * (Y + beta * X)) / (engine::row_sum(m) + 1e-12);
    icpt.push_back(a);
    const Var seg = m * (a - beta * X);
    model = k == 0 ? seg : model + seg;
  }
  const Var err = model - Y;
  Var fit;
  int used = 0;
  for (const int s : cfg.levels) {
    const Index groups = n / s;
    if (groups == 0) continue;
    Matrix avg = Matrix::Zero(n, groups);
    for (Index g = 0; g < groups; ++g) avg.block(g * s, g, s, 1).setConstant(1.0 / s);
    const Var level = engine::mean(engine::abs(engine::matmul(err, t.constant(avg))));
    fit = used == 0 ? level : fit + level;
    ++used;
  }
  if (used == 0) throw ParameterError("soft_fit_terms: spectrum shorter than every level");
  SoftFitTerms r;
  r.fit = fit / static_cast<double>(used);
  r.intercepts = engine::concat_cols(icpt);
  if (K == 1) {
    r.seam = t.constant(0.0);
  } else {
    Var seam;
    for (int k = 0; k + 1 < K; ++k) {
      const Var lk = slice_cols(knees, k, 1);
      const Var left = icpt[static_cast<std::size_t>(k)] - slice_cols(betas, k, 1) * lk;
      const Var right = icpt[static_cast<std::size_t>(k) + 1] - slice_cols(betas, k + 1, 1) * lk;
      const Var jump = engine::square(left - right);
      seam = k == 0 ? jump : seam + jump;
    }
    r.seam = engine::mean(seam);
  }
  return r;
}

PiecewiseFit to_fit(const HyperOutput& out, const Var& intercepts, Index row, const HyperNetConfig& cfg) {
  PiecewiseFit f;
  f.K = cfg.K;
  f.f_min = cfg.f_min;
  f.f_max = cfg.f_max;
  for (Index k = 0; k < out.log_knees.cols(); ++k) f.knees.push_back(std::exp(out.log_knees.value()(row, k)));
  for (Index k = 0; k < out.betas.cols(); ++k) {
    f.betas.push_back(out.betas.value()(row, k));
    f.log_amplitudes.push_back(intercepts.value()(row, k));
  }
  return f;
}

PiecewiseFit hypernet_forward(const ParameterSet& params, const HyperNet& net, const Spectrum& spectrum) {
  Tape tape;
  const Bound bound(tape, params);
  const HyperOutput out = hypernet_apply(bound, net, tape.constant(spectral_features(spectrum, net.cfg)));
  Matrix lf(1, static_cast<Index>(spectrum.size())), lp(1, static_cast<Index>(spectrum.size()));
  for (std::size_t i = 0; i < spectrum.size(); ++i) {
    lf(0, static_cast<Index>(i)) = std::log(spectrum.freqs[i]);
    lp(0, static_cast<Index>(i)) = std::log(std::max(spectrum.power[i], 1e-300));
  }
  const SoftFitTerms terms = soft_fit_terms(out, lf, lp, net.cfg);
  PiecewiseFit fit = to_fit(out, terms.intercepts, 0, net.cfg);
  fit.residual = terms.fit.scalar();
  return fit;
}

}  // namespace pimsm::spectral
