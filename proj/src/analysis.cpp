#include "pimsm/analysis.hpp"

#include "pimsm/errors.hpp"
#include "pimsm/rng.hpp"
#include "pimsm/signalgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace pimsm::analysis {

KernelProfile extract_kernel(const HeadParams& head, double delta, std::size_t L, double dt) {
  if (!(delta > 0.0)) throw ParameterError("extract_kernel: delta must be positive");
  if (!(head.A < 0.0)) throw ParameterError("extract_kernel: A must be negative");
  if (head.B.size() != head.C.size() || head.B.empty()) throw ParameterError("extract_kernel: B and C must match");
  if (L < 1) throw ParameterError("extract_kernel: L must be at least 1");
  double bc = 0.0;
  for (std::size_t n = 0; n < head.B.size(); ++n) bc += head.B[n] * head.C[n];
  const double a_bar = std::exp(delta * head.A);
  KernelProfile k;
  k.dt = dt;
  double v = delta * bc;
  for (std::size_t l = 0; l < L; ++l) {
    k.values.push_back(v);
    v *= a_bar;
  }
  return k;
}

std::vector<std::pair<HeadParams, double>> probe_heads(const msssm::Model& m, const Matrix& x, Index batch,
                                                       const msssm::SpectralContext* ctx, std::size_t block) {
  if (block >= m.blocks.size()) throw ParameterError("probe_heads: block index out of range");
  engine::Tape t;
  engine::Bound p(t, m.params);
  const auto fwd = msssm::backbone_forward(m, p, x, batch, ctx);
  const engine::Var in =
      block == 0 ? engine::matmul(t.constant(x), p[m.w_in]) + p[m.b_in] : fwd.block_outputs[block - 1];
  const auto& h = m.blocks[block];
  const engine::Var v = msssm::rms_norm(in, p[h.norm1]);
  const Matrix b = engine::matmul(v, p[h.w_b]).value().colwise().mean();
  const Matrix c = engine::matmul(v, p[h.w_c]).value().colwise().mean();
  const Matrix d = fwd.deltas.value().colwise().mean();
  const Matrix& a_log = m.params[h.a_log].value;
  std::vector<std::pair<HeadParams, double>> out;
  for (std::size_t g = 0; g < m.groups.size(); ++g)
    for (const Index j : m.groups[g]) {
      HeadParams hp;
      hp.A = -std::exp(a_log(0, j));
      hp.B.assign(b.data(), b.data() + b.size());
      hp.C.assign(c.data(), c.data() + c.size());
      out.emplace_back(hp, d(0, static_cast<Index>(g)));
    }
  return out;
}

namespace {

double sample_at(const KernelProfile& k, double t) {
  const double pos = t / k.dt;
  const auto i = static_cast<std::size_t>(std::floor(pos));
  if (i >= k.size()) return 0.0;
  if (i + 1 >= k.size()) return pos - static_cast<double>(i) < 1e-12 ? k.values[i] : 0.0;
  const double f = pos - static_cast<double>(i);
  return (1.0 - f) * k.values[i] + f * k.values[i + 1];
}

}  // namespace

double l1_mismatch(const KernelProfile& g, const KernelProfile& h, bool resample) {
  g.validate();
  h.validate();
  if (std::abs(g.dt - h.dt) <= 1e-12 * std::max(g.dt, h.dt)) {
    double s = 0.0;
    for (std::size_t l = 0; l < std::max(g.size(), h.size()); ++l) {
      const double a = l < g.size() ? g.values[l] : 0.0, b = l < h.size() ? h.values[l] : 0.0;
      s += std::abs(a - b);
    }
    return s * g.dt;
  }
  if (!resample) throw ParameterError("l1_mismatch: kernels live on different grids and resampling is off");
  const double dt = std::min(g.dt, h.dt);
  const double extent = std::max(static_cast<double>(g.size()) * g.dt, static_cast<double>(h.size()) * h.dt);
  const auto n = static_cast<std::size_t>(std::ceil(extent / dt - 1e-9));
  double s = 0.0;
  for (std::size_t l = 0; l < n; ++l) {
    const double t = static_cast<double>(l) * dt;
    s += std::abs(sample_at(g, t) - sample_at(h, t));
  }
  return s * dt;
}

std::vector<double> convolve(const KernelProfile& g, std::span<const double> x) {
  std::vector<double> y(x.size(), 0.0);
  for (std::size_t t = 0; t < x.size(); ++t) {
    double s = 0.0;
    for (std::size_t l = 0; l <= t && l < g.size(); ++l) s += g.values[l] * x[t - l];
    y[t] = s * g.dt;
  }
  return y;
}

nlohmann::json Lemma1Report::to_json() const {
  return {{"bound", bound},         {"max_gap", max_gap},           {"max_ratio", max_ratio},
          {"violations", violations}, {"witness_ratio", witness_ratio}, {"signals", signals}};
}

Lemma1Report verify_lemma1(const KernelProfile& g, const KernelProfile& h, std::size_t n_signals, double M,
                           std::size_t T, std::uint64_t seed) {
  g.validate();
  h.validate();
  if (std::abs(g.dt - h.dt) > 1e-12 * std::max(g.dt, h.dt)) throw ParameterError("verify_lemma1: kernels must share dt");
  if (!(M > 0.0) || T < 1) throw ParameterError("verify_lemma1: need M > 0 and T >= 1");
  const std::size_t L = std::max(g.size(), h.size());
  KernelProfile diff;
  diff.dt = g.dt;
  for (std::size_t l = 0; l < L; ++l)
    diff.values.push_back((l < g.size() ? g.values[l] : 0.0) - (l < h.size() ? h.values[l] : 0.0));
  Lemma1Report r;
  r.bound = M * diff.l1_mass();
  r.signals = n_signals;
  auto ratio = [&](double gap) { return r.bound > 0.0 ? gap / r.bound : (gap > 0.0 ? INFINITY : 0.0); };

  std::mt19937_64 rng(derive_seed(seed, {0x1E77A}));
  std::uniform_real_distribution<double> u(-M, M);
  std::bernoulli_distribution coin(0.5);
  std::vector<double> x(T);
  for (std::size_t s = 0; s < n_signals; ++s) {
    const bool signs = s % 2 == 1;
    for (auto& v : x) v = signs ? (coin(rng) ? M : -M) : u(rng);
    const auto y1 = convolve(g, x), y2 = convolve(h, x);
    double gap = 0.0;
    for (std::size_t t = 0; t < T; ++t) gap = std::max(gap, std::abs(y1[t] - y2[t]));
    r.max_gap = std::max(r.max_gap, gap);
    const double q = ratio(gap);
    r.max_ratio = std::max(r.max_ratio, q);
    if (q > 1.0 + 1e-12) ++r.violations;
  }

  // x[L-1-l] = M sign(d[l]) makes the output gap at t = L-1 equal the bound
  std::vector<double> w(L);
  for (std::size_t l = 0; l < L; ++l) w[L - 1 - l] = diff.values[l] >= 0.0 ? M : -M;
  const auto y1 = convolve(g, w), y2 = convolve(h, w);
  double gap = 0.0;
  for (std::size_t t = 0; t < L; ++t) gap = std::max(gap, std::abs(y1[t] - y2[t]));
  r.witness_ratio = r.bound > 0.0 ? gap / r.bound : 1.0;
  return r;
}

KernelProfile MixtureFit::evaluate(std::size_t L, double dt) const {
  KernelProfile k;
  k.dt = dt;
  for (std::size_t l = 0; l < L; ++l) {
    const double t = static_cast<double>(l) * dt;
    double s = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * std::exp(-rates[i] * t);
    k.values.push_back(s);
  }
  return k;
}

void MixtureFit::validate() const {
  if (weights.size() != K || rates.size() != K) throw ContractError("MixtureFit: sizes differ from K");
  double s = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    if (!(weights[i] >= 0.0)) throw ContractError("MixtureFit: negative weight");
    if (!(rates[i] > 0.0)) throw ContractError("MixtureFit: non-positive rate");
    s += weights[i];
  }
  if (std::abs(s - 1.0) > 1e-9) throw ContractError("MixtureFit: weights do not sum to 1");
}

nlohmann::json MixtureFit::to_json() const {
  return {{"K", K}, {"weights", weights}, {"rates", rates}, {"error", error}};
}

namespace {

using Array = Eigen::ArrayXd;

struct Objective {
  Array t;  // lag times
  Array g;  // target
  double dt;

  [[nodiscard]] double l1(const std::vector<double>& w, const std::vector<double>& r) const {
    Array model = Array::Zero(t.size());
    for (std::size_t i = 0; i < w.size(); ++i) model += w[i] * (-r[i] * t).exp();
    return (g - model).abs().sum() * dt;
  }
};

MixtureFit make_fit(std::vector<double> w, std::vector<double> r, double err) {
  MixtureFit f;
  f.K = w.size();
  f.weights = std::move(w);
  f.rates = std::move(r);
  f.error = err;
  return f;
}

std::vector<double> softmax(const Array& u) {
  const Array e = (u - u.maxCoeff()).exp();
  const Array a = e / e.sum();
  return {a.data(), a.data() + a.size()};
}

/// Adam on (weight logits, log rates) against a smoothed L1 whose smoothing
/// width shrinks geometrically; returns the best exact-L1 iterate.
MixtureFit descend(const Objective& obj, Array u, Array v, const MixtureOptions& opts) {
  const auto K = u.size();
  const double scale = obj.g.abs().maxCoeff();
  const double d0 = 1e-2 * scale, d1 = 1e-7 * scale;
  Array mu = Array::Zero(2 * K), nu = Array::Zero(2 * K);
  const double b1 = 0.9, b2 = 0.999;
  MixtureFit best;
  best.error = INFINITY;
  const Eigen::Index L = obj.t.size();
  Eigen::ArrayXXd E(K, L);
  for (std::size_t it = 0; it <= opts.iterations; ++it) {
    const std::vector<double> a = softmax(u);
    const Array lam = v.exp();
    Array model = Array::Zero(L);
    for (Eigen::Index k = 0; k < K; ++k) {
      E.row(k) = (-lam(k) * obj.t).exp().transpose();
      model += a[static_cast<std::size_t>(k)] * E.row(k).transpose();
    }
    const Array res = obj.g - model;
    const double err = res.abs().sum() * obj.dt;
    if (err < best.error)
      best = make_fit(a, std::vector<double>(lam.data(), lam.data() + K), err);
    if (it == opts.iterations) break;
    const double frac = static_cast<double>(it) / static_cast<double>(opts.iterations);
    const double delta = d0 * std::pow(d1 / d0, frac);
    const Array s = res / (res.square() + delta * delta).sqrt();
    // d err / d a_k and d err / d lambda_k
    Array ga(K), gl(K);
    for (Eigen::Index k = 0; k < K; ++k) {
      ga(k) = -(s * E.row(k).transpose()).sum() * obj.dt;
      gl(k) = a[static_cast<std::size_t>(k)] * (s * obj.t * E.row(k).transpose()).sum() * obj.dt;
    }
    Array grad(2 * K);
    double adot = 0.0;
    for (Eigen::Index k = 0; k < K; ++k) adot += a[static_cast<std::size_t>(k)] * ga(k);
    for (Eigen::Index k = 0; k < K; ++k) {
      grad(k) = a[static_cast<std::size_t>(k)] * (ga(k) - adot);
      grad(K + k) = gl(k) * lam(k);
    }
    const double lr = opts.learning_rate * (0.01 + 0.99 * 0.5 * (1.0 + std::cos(M_PI * frac)));
    mu = b1 * mu + (1.0 - b1) * grad;
    nu = b2 * nu + (1.0 - b2) * grad.square();
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(it + 1)), c2 = 1.0 - std::pow(b2, static_cast<double>(it + 1));
    const Array step = lr * (mu / c1) / ((nu / c2).sqrt() + 1e-12);
    u -= step.head(K);
    v -= step.tail(K);
  }
  return best;
}

}  // namespace

MixtureFit fit_exp_mixture(const KernelProfile& target, std::size_t K, std::uint64_t seed, const MixtureOptions& opts,
                           const MixtureFit* previous) {
  if (K < 1) throw ParameterError("fit_exp_mixture: K must be at least 1");
  target.validate();
  if (target.size() < 2) throw ParameterError("fit_exp_mixture: target needs at least 2 samples");
  if (opts.restarts < 1) throw ParameterError("fit_exp_mixture: need at least one restart");
  if (previous != nullptr && previous->K + 1 != K) throw ParameterError("fit_exp_mixture: warm start must have K - 1 terms");
  Objective obj;
  obj.dt = target.dt;
  obj.g = Eigen::Map<const Array>(target.values.data(), static_cast<Eigen::Index>(target.size()));
  obj.t = Array::LinSpaced(obj.g.size(), 0.0, static_cast<double>(obj.g.size() - 1) * obj.dt);

  const auto k = static_cast<Eigen::Index>(K);
  const double lo = std::log(1.0 / obj.t(obj.t.size() - 1)), hi = std::log(1.0 / obj.dt);
  const double spacing = K > 1 ? (hi - lo) / static_cast<double>(K - 1) : (hi - lo);
  std::mt19937_64 rng(derive_seed(seed, {0xE4F, K}));
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> unif(lo, hi);

  MixtureFit best;
  best.error = INFINITY;
  if (previous != nullptr) {
    std::vector<double> w = previous->weights, r = previous->rates;
    w.push_back(0.0);
    r.push_back(std::exp(0.5 * (lo + hi)));
    best = make_fit(w, r, obj.l1(w, r));
  }
  for (std::size_t s = 0; s < opts.restarts; ++s) {
    Array u(k), v(k);
    if (previous != nullptr && s % 4 == 1) {
      for (Eigen::Index i = 0; i + 1 < k; ++i) {
        u(i) = std::log(0.9 * previous->weights[static_cast<std::size_t>(i)] + 1e-12);
        v(i) = std::log(previous->rates[static_cast<std::size_t>(i)]);
      }
      u(k - 1) = std::log(0.1);
      v(k - 1) = unif(rng);
    } else {
      for (Eigen::Index i = 0; i < k; ++i) {
        const double base = K > 1 ? lo + spacing * static_cast<double>(i) : 0.5 * (lo + hi);
        v(i) = s == 0 ? base : base + 0.5 * spacing * n01(rng);
        u(i) = s == 0 ? 0.0 : n01(rng);
      }
    }
    const MixtureFit f = descend(obj, u, v, opts);
    if (f.error < best.error) best = f;
  }
  // fastest component first
  std::vector<std::size_t> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return best.rates[a] > best.rates[b]; });
  MixtureFit out = best;
  for (std::size_t i = 0; i < K; ++i) {
    out.weights[i] = best.weights[order[i]];
    out.rates[i] = best.rates[order[i]];
  }
  return out;
}

double powerlaw_horizon(double alpha, double tail) {
  if (!(alpha > 1.0)) throw ParameterError("powerlaw_horizon: alpha must exceed 1");
  if (!(tail > 0.0 && tail < 1.0)) throw ParameterError("powerlaw_horizon: tail must lie in (0, 1)");
  return std::pow(tail, -1.0 / (alpha - 1.0)) - 1.0;
}

RateStudy approximation_rate_study(double alpha, const std::vector<std::size_t>& K_list, std::uint64_t seed, double dt,
                                   const MixtureOptions& opts) {
  if (!(alpha > 1.0)) throw ParameterError("approximation_rate_study: alpha must exceed 1");
  if (K_list.empty()) throw ParameterError("approximation_rate_study: empty K list");
  RateStudy st;
  st.alpha = alpha;
  st.dt = dt;
  st.horizon = powerlaw_horizon(alpha, 0.005);
  const auto L = static_cast<std::size_t>(std::ceil(st.horizon / dt)) + 1;
  const KernelProfile target = signalgen::powerlaw_kernel(alpha, L, dt);
  st.target_mass = target.l1_mass();
  std::vector<std::size_t> ks = K_list;
  std::sort(ks.begin(), ks.end());
  const MixtureFit* prev = nullptr;
  for (const std::size_t K : ks) {
    const bool chain = prev != nullptr && prev->K + 1 == K;
    st.fits.push_back(fit_exp_mixture(target, K, seed, opts, chain ? prev : nullptr));
    prev = &st.fits.back();
    st.rows.push_back({K, prev->error, prev->error / st.target_mass});
  }
  if (st.rows.size() >= 2) {
    double mx = 0.0, my = 0.0;
    for (const auto& r : st.rows) {
      mx += std::log(static_cast<double>(r.K));
      my += std::log(r.error);
    }
    mx /= static_cast<double>(st.rows.size());
    my /= static_cast<double>(st.rows.size());
    double sxy = 0.0, sxx = 0.0;
    for (const auto& r : st.rows) {
      const double dx = std::log(static_cast<double>(r.K)) - mx;
      sxy += dx * (std::log(r.error) - my);
      sxx += dx * dx;
    }
    st.slope = sxx > 0.0 ? sxy / sxx : 0.0;
  }
  return st;
}

nlohmann::json RateStudy::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  for (std::size_t i = 0; i < rows.size(); ++i)
    rows_j.push_back({{"K", rows[i].K},
                      {"error", rows[i].error},
                      {"relative_error", rows[i].relative_error},
                      {"fit", fits[i].to_json()}});
  return {{"alpha", alpha}, {"dt", dt}, {"horizon", horizon}, {"target_mass", target_mass}, {"rows", rows_j},
          {"slope", slope}};
}

std::string RateStudy::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "K,error,relative_error\n";
  for (const auto& r : rows) os << r.K << ',' << r.error << ',' << r.relative_error << '\n';
  return os.str();
}

double linear_cka(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) throw ParameterError("linear_cka: row counts differ");
  if (x.rows() < 2) throw ParameterError("linear_cka: need at least 2 rows");
  const Matrix xc = x.rowwise() - x.colwise().mean();
  const Matrix yc = y.rowwise() - y.colwise().mean();
  const double den = (xc.transpose() * xc).norm() * (yc.transpose() * yc).norm();
  if (!(den > 0.0)) return 0.0;
  return (xc.transpose() * yc).squaredNorm() / den;
}

namespace {

Matrix centred_distances(const Matrix& x) {
  const Index n = x.rows();
  Matrix d(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = i; j < n; ++j) d(i, j) = d(j, i) = (x.row(i) - x.row(j)).norm();
  const Eigen::VectorXd rm = d.rowwise().mean();
  const double gm = d.mean();
  return (d.colwise() - rm).rowwise() - rm.transpose() + Matrix::Constant(n, n, gm);
}

}  // namespace

double dcor(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) throw ParameterError("dcor: row counts differ");
  if (x.rows() < 2) throw ParameterError("dcor: need at least 2 rows");
  const Matrix a = centred_distances(x), b = centred_distances(y);
  const double vxy = (a.array() * b.array()).mean();
  const double vx = a.array().square().mean(), vy = b.array().square().mean();
  if (!(vx > 0.0 && vy > 0.0)) return 0.0;
  return std::sqrt(std::max(0.0, vxy) / std::sqrt(vx * vy));
}

nlohmann::json DriftReport::to_json() const {
  nlohmann::json j{{"cka", cka}, {"dcor", dcor}, {"l2", l2}, {"drift", drift}};
  if (metric_a) j["metric_a"] = *metric_a;
  if (metric_b) j["metric_b"] = *metric_b;
  return j;
}

DriftReport drift_report(const Matrix& z_a, const Matrix& z_b) {
  if (z_a.rows() != z_b.rows()) throw ParameterError("drift_report: views must pair the same items");
  DriftReport r;
  r.cka = linear_cka(z_a, z_b);
  r.dcor = dcor(z_a, z_b);
  if (z_a.cols() == z_b.cols()) r.l2 = (z_a - z_b).rowwise().norm().mean();
  else r.l2 = std::numeric_limits<double>::quiet_NaN();
  r.drift = 1.0 - r.cka;
  return r;
}

DriftReport drift_report(const msssm::Model& model_a, const train::PreparedSet& view_a, const msssm::Model& model_b,
                         const train::PreparedSet& view_b) {
  if (view_a.size() != view_b.size() || view_a.labels != view_b.labels)
    throw ParameterError("drift_report: views must pair the same items");
  const auto ea = train::evaluate(model_a, view_a), eb = train::evaluate(model_b, view_b);
  DriftReport r = drift_report(ea.z, eb.z);
  r.metric_a = ea.metric;
  r.metric_b = eb.metric;
  return r;
}

}  // namespace pimsm::analysis
