// One PASS/FAIL line per acceptance criterion; nonzero exit if any fails.

#include "oracles.hpp"

#include "pimsm/analysis.hpp"
#include "pimsm/engine/gradcheck.hpp"
#include "pimsm/errors.hpp"
#include "pimsm/experiment.hpp"
#include "pimsm/hypernet.hpp"
#include "pimsm/scalemap.hpp"
#include "pimsm/signalgen.hpp"
#include "pimsm/spectral.hpp"
#include "pimsm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

using namespace pimsm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

Matrix gaussian(Index n, Index p, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix m(n, p);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

Outcome centroid_correctness() {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> lf(std::log(1e-3), std::log(0.5));
  const std::vector<double> betas{0.3, 0.9, 1.0 - 1e-7, 1.0 + 1e-7, 1.5, 2.0 - 1e-7, 2.0 + 1e-7, 3.0, 5.0};
  double worst = 0.0;
  for (const double beta : betas)
    for (int b = 0; b < 20; ++b) {
      double lo = std::exp(lf(rng)), hi = std::exp(lf(rng));
      if (lo > hi) std::swap(lo, hi);
      if (hi / lo < 1.01) hi = lo * 1.5;
      const double ref = oracle::centroid_quadrature(lo, hi, beta);
      worst = std::max(worst, std::abs(spectral::energy_centroid(lo, hi, beta) - ref) / ref);
    }
  double jump = 0.0;
  for (int b = 0; b < 20; ++b) {
    double lo = std::exp(lf(rng)), hi = std::exp(lf(rng));
    if (lo > hi) std::swap(lo, hi);
    if (hi / lo < 1.01) hi = lo * 1.5;
    for (const double k : {1.0, 2.0}) {
      const double at = spectral::energy_centroid(lo, hi, k);
      for (const double e : {-1e-7, 1e-7})
        jump = std::max(jump, std::abs(spectral::energy_centroid(lo, hi, k + e) - at) / at);
    }
  }
  return {worst <= 1e-8 && jump <= 1e-6, fmt("max rel err %.2e (<= 1e-8), continuity %.2e (<= 1e-6)", worst, jump)};
}

Outcome spectral_recovery() {
  const std::size_t T = 1 << 14;
  signalgen::PiecewiseSpec spec{{0.01, 0.08}, {0.6, 2.2, 1.0}, 1.0 / T, 0.5, 1.0};
  std::vector<spectral::Spectrum> parts;
  for (std::uint64_t seed = 0; seed < 32; ++seed) {
    const auto set = signalgen::gen_colored_noise(spec, static_cast<Index>(T), 1, seed);
    parts.push_back(spectral::periodogram(set.sequences[0], 0, spec.f_min, spec.f_max));
  }
  const auto fit = spectral::init_fit(spectral::average_spectra(parts), 3);
  double knee = 0.0, beta = 0.0;
  for (std::size_t k = 0; k < 2; ++k) knee = std::max(knee, std::abs(std::log(fit.knees[k] / spec.knees[k])));
  for (std::size_t k = 0; k < 3; ++k) beta = std::max(beta, std::abs(fit.betas[k] - spec.exponents[k]));
  return {knee <= std::log(1.25) && beta <= 0.3,
          fmt("knee |log ratio| %.3f (<= %.3f), beta abs err %.3f (<= 0.3)", knee, std::log(1.25), beta)};
}

Outcome lemma1_bound() {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> rate(0.02, 3.0), step(0.1, 2.0), coef(-1.5, 1.5);
  double worst = 0.0, witness = 1.0;
  std::size_t violations = 0;
  for (int pair = 0; pair < 10; ++pair) {
    const analysis::HeadParams a{-rate(rng), {coef(rng), coef(rng)}, {coef(rng), coef(rng)}};
    const analysis::HeadParams b{-rate(rng), {coef(rng), coef(rng)}, {coef(rng), coef(rng)}};
    const auto g = analysis::extract_kernel(a, step(rng), 128, 0.5);
    const auto h = analysis::extract_kernel(b, step(rng), 128, 0.5);
    const auto rep = analysis::verify_lemma1(g, h, 1000, 1.0 + pair, 256, static_cast<std::uint64_t>(pair));
    worst = std::max(worst, rep.max_ratio);
    witness = std::min(witness, rep.witness_ratio);
    violations += rep.violations;
  }
  return {worst <= 1.0 + 1e-12 && violations == 0 && witness >= 0.999,
          fmt("max ratio %.15f (<= 1), violations %.0f, min witness ratio %.15f (>= 0.999)", worst,
              static_cast<double>(violations), witness)};
}

Outcome rate_trend() {
  const auto study = analysis::approximation_rate_study(2.0, {1, 2, 3, 4, 5}, 0);
  bool mono = true;
  for (std::size_t k = 1; k < study.rows.size(); ++k) mono = mono && study.rows[k].error <= study.rows[k - 1].error;
  const double e1 = study.rows[0].error, e3 = study.rows[2].error;
  return {mono && e3 < e1 / 2.0 && study.slope <= -1.0,
          fmt("nonincreasing %.0f, err(3)/err(1) %.3f (< 0.5), slope %.3f (<= -1.0)", mono ? 1.0 : 0.0, e3 / e1,
              study.slope)};
}

Outcome gradient_integrity() {
  signalgen::TwoTimescaleConfig dc;
  dc.n_per_class = 1;
  dc.T = 32;
  const auto data = signalgen::gen_two_timescale_task(dc);
  msssm::ModelConfig mc;
  mc.d_in = 2;
  mc.d_model = 16;
  mc.d_inter = 32;
  mc.layers = 2;
  mc.hyper.f_min = 1.0 / 32.0;
  mc.hyper.hidden = 16;
  auto model = msssm::Model::create(mc, 5);
  const auto prep = train::prepare(data, mc.hyper, 0);
  std::vector<std::size_t> idx{0, 1};
  const auto ctx = train::batch_context(prep, idx);
  std::vector<const Matrix*> seqs{&prep.inputs[0], &prep.inputs[1]};
  std::vector<Matrix> shorts{prep.inputs[0].topRows(4), prep.inputs[1].topRows(4)};
  std::vector<const Matrix*> sp{&shorts[0], &shorts[1]};
  const Matrix x = msssm::pack_time_major(seqs), xs = msssm::pack_time_major(sp);
  train::LossWeights w;
  w.drift = 0.1;
  std::vector<Matrix*> params;
  for (auto& p : model.params) params.push_back(&p.value);
  const auto report = engine::grad_check(
      [&](engine::Tape& t, const std::vector<engine::Var>& leaves) {
        const engine::Bound p(leaves);
        const auto fwd = msssm::backbone_forward(model, p, x, 2, &ctx);
        train::LossInputs in;
        in.task = train::task_loss_classification(fwd.prediction, prep.labels, w.label_smoothing);
        in.deltas = fwd.deltas;
        in.a_log = msssm::all_a_log(model, p);
        in.a0 = model.a0;
        in.hyper = fwd.hyper;
        in.fit = spectral::soft_fit_terms(*fwd.hyper, ctx.log_freqs, ctx.log_power, mc.hyper);
        in.teacher_log_knees = &prep.teacher_log_knees;
        in.teacher_betas = &prep.teacher_betas;
        in.z_full = fwd.z;
        in.z_trunc = msssm::backbone_forward_with(model, p, xs, 2, fwd.deltas).z;
        (void)t;
        return train::total_loss(in, w).total;
      },
      params, {.step = 1e-5, .tolerance = 1e-4, .samples = 50, .seed = 7});
  if (std::getenv("ACCEPTANCE_VERBOSE"))
    for (const auto& pr : report.probes)
      std::printf("  %s (%ld,%ld) analytic %.6e numeric %.6e rel %.2e\n", model.params[pr.tensor].name.c_str(),
                  static_cast<long>(pr.row), static_cast<long>(pr.col), pr.analytic, pr.numeric, pr.rel_error);
  return {report.passed && report.probes.size() == 50 && report.max_rel_error < 1e-4,
          fmt("max rel err %.2e over %.0f parameters (< 1e-4)", report.max_rel_error,
              static_cast<double>(report.probes.size()))};
}

Outcome structural_invariants() {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 2.0);
  spectral::HyperNetConfig hc;
  hc.feature_bins = 16;
  hc.hidden = 16;
  hc.f_min = 1.0 / 256.0;
  engine::ParameterSet ps;
  const auto net = spectral::HyperNet::create(ps, hc, 1);
  spectral::Spectrum s;
  s.f_min = hc.f_min;
  for (int i = 2; i <= 128; ++i) s.freqs.push_back(i / 256.0);
  s.power.resize(s.freqs.size());
  std::size_t delta_bad = 0, fit_bad = 0, revin_bad = 0;
  double revin_worst = 0.0;
  const int trials = 10000;
  for (int trial = 0; trial < trials; ++trial) {
    // scale map on a random valid fit
    spectral::PiecewiseFit fit;
    fit.f_min = hc.f_min;
    double p1 = 0.005 + 0.99 * u(rng), p2 = 0.005 + 0.99 * u(rng);
    if (p1 > p2) std::swap(p1, p2);
    if (p2 - p1 < 1e-3) p2 = p1 + 1e-3;
    const double span = std::log(0.5) - std::log(hc.f_min);
    fit.knees = {hc.f_min * std::exp(p1 * span), hc.f_min * std::exp(p2 * span)};
    fit.betas = {0.3 + 4.7 * u(rng), 0.3 + 4.7 * u(rng), 0.3 + 4.7 * u(rng)};
    fit.log_amplitudes = {0.0, 0.0, 0.0};
    scalemap::MapOptions mo;
    mo.w = u(rng);
    mo.mode = u(rng) < 0.5 ? scalemap::MapMode::PerBand : scalemap::MapMode::Global;
    const double step = std::exp(4.0 * u(rng) - 2.0);
    try {
      const auto sa = scalemap::assign_scales(fit, mo, step);
      sa.validate();
      for (std::size_t k = 0; k < sa.deltas.size(); ++k) {
        if (sa.deltas[k] < mo.delta_min(step) || sa.deltas[k] > mo.delta_max(step)) ++delta_bad;
        if (k > 0 && sa.deltas[k] > sa.deltas[k - 1]) ++delta_bad;
      }
    } catch (const std::exception&) {
      ++delta_bad;
    }
    // hypernet output under random weights and spectra
    if (trial % 4 == 0) {
      for (auto& p : ps)
        for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = g(rng);
      const double beta = 0.1 + 6.0 * u(rng);
      for (std::size_t i = 0; i < s.freqs.size(); ++i) s.power[i] = std::pow(s.freqs[i], -beta) * std::exp(g(rng));
      try {
        const auto f = spectral::hypernet_forward(ps, net, s);
        f.validate_strict();
        const auto sa = scalemap::assign_scales(f, mo, step);
        sa.validate();
      } catch (const std::exception&) {
        ++fit_bad;
      }
    }
    // RevIN round trip
    Matrix win = gaussian(16, 3, rng);
    win = (win * std::exp(3.0 * g(rng) / 2.0)).array() + 10.0 * g(rng);
    const auto [z, st] = msssm::revin_apply(win);
    const double err = (msssm::revin_invert(z, st) - win).cwiseAbs().maxCoeff() / std::max(1.0, win.cwiseAbs().maxCoeff());
    revin_worst = std::max(revin_worst, err);
    if (err > 1e-12) ++revin_bad;
  }
  return {delta_bad == 0 && fit_bad == 0 && revin_bad == 0,
          fmt("%.0f trials: delta violations %.0f, invalid fits %.0f, RevIN worst %.1e", trials,
              static_cast<double>(delta_bad), static_cast<double>(fit_bad), revin_worst)};
}

Outcome metric_sanity() {
  std::mt19937_64 rng(7);
  const Matrix x = gaussian(256, 8, rng);
  const double self_cka = analysis::linear_cka(x, x), self_dcor = analysis::dcor(x, x);
  const Matrix q = Eigen::HouseholderQR<Matrix>(gaussian(8, 8, rng)).householderQ();
  const Matrix y = gaussian(256, 5, rng);
  const double orth = std::abs(analysis::linear_cka(x * q, y) - analysis::linear_cka(x, y));
  const double indep = analysis::linear_cka(gaussian(512, 16, rng), gaussian(512, 16, rng));
  const bool ok = std::abs(self_cka - 1.0) < 1e-12 && std::abs(self_dcor - 1.0) < 1e-12 && orth < 1e-10 && indep < 0.1;
  return {ok, fmt("self CKA %.15f, self dCor %.15f, orthogonal change %.1e, independent CKA %.4f", self_cka, self_dcor,
                  orth, indep)};
}

experiment::ExperimentConfig truncation_config() {
  experiment::ExperimentConfig c;
  c.task = experiment::Task::Classify;
  c.axis = experiment::Axis::Truncation;
  c.presets = {msssm::Preset::Pimsm, msssm::Preset::SingleScale, msssm::Preset::RandomDelta};
  c.seeds = {0, 1, 2, 3, 4};
  c.test_fraction = 0.4;
  c.data.params = {{"n_per_class", 128}, {"T", 64}, {"d", 2}};
  return c;
}

Outcome truncation_trend() {
  const auto b = experiment::run_experiment(truncation_config());
  auto mean_of = [&](const std::string& preset, const std::string& col) {
    double s = 0.0;
    int n = 0;
    for (std::size_t r = 0; r < b.runs.rows.size(); ++r)
      if (b.runs.rows[r][b.runs.column("preset")] == preset && b.runs.rows[r].back() == "ok") {
        s += b.runs.number(r, col);
        ++n;
      }
    return n == 5 ? s / n : std::nan("");
  };
  const double acc_p = mean_of("pimsm", "acc_trunc"), acc_s = mean_of("single-scale", "acc_trunc");
  const double cka_p = mean_of("pimsm", "cka"), cka_r = mean_of("random-delta", "cka");
  const bool a = acc_p >= acc_s - 0.01, bb = cka_p > cka_r;
  return {a && bb, std::string("(a) ") + (a ? "pass" : "fail") +
                       fmt(" trunc acc pimsm %.4f vs single-scale %.4f; ", acc_p, acc_s) + "(b) " +
                       (bb ? "pass" : "fail") + fmt(" CKA pimsm %.4f vs random-delta %.4f", cka_p, cka_r)};
}

Outcome loss_bookkeeping() {
  signalgen::TwoTimescaleConfig dc;
  dc.n_per_class = 24;
  const auto data = signalgen::gen_two_timescale_task(dc);
  train::TrainConfig tc;
  tc.model.d_in = 2;
  tc.model.d_model = 16;
  tc.model.d_inter = 32;
  tc.epochs = 4;
  tc.batch_size = 16;
  tc.weights.drift = 0.1;
  tc.check_identity = false;
  const auto prep = train::prepare(data, tc.model.hyper, 0);
  const auto full = train::train_loop(tc, prep);
  double worst = 0.0;
  for (const auto& s : full.steps) worst = std::max(worst, std::abs(s.loss.sum() - s.loss.total));
  auto zero = tc;
  zero.weights = tc.weights.without_aux();
  auto off = tc;
  off.aux_terms = false;
  const auto rz = train::train_loop(zero, prep), ro = train::train_loop(off, prep);
  bool identical = train::metric_log_csv(rz.log) == train::metric_log_csv(ro.log) && rz.steps.size() == ro.steps.size();
  for (std::size_t i = 0; identical && i < rz.steps.size(); ++i) {
    const auto& p = rz.steps[i].loss;
    const auto& q = ro.steps[i].loss;
    identical = p.task == q.task && p.total == q.total && p.total == p.task && p.fit == 0.0 && p.seam == 0.0 &&
                p.delta == 0.0 && p.a_scale == 0.0 && p.hyp == 0.0 && p.beta == 0.0 && p.drift == 0.0;
  }
  return {worst <= 1e-12 && identical,
          fmt("%.0f steps, max |sum - total| %.1e (<= 1e-12), zero-aux log bit-identical %.0f",
              static_cast<double>(full.steps.size()), worst, identical ? 1.0 : 0.0)};
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "centroid correctness", 1.0, centroid_correctness},
      {2, "spectral recovery", 30.0, spectral_recovery},
      {3, "kernel mismatch bound", 10.0, lemma1_bound},
      {4, "exponential mixture rate", 120.0, rate_trend},
      {5, "gradient integrity", 60.0, gradient_integrity},
      {6, "structural invariants", 30.0, structural_invariants},
      {7, "metric sanity", 10.0, metric_sanity},
      {8, "truncation trend", 900.0, truncation_trend},
      {9, "loss bookkeeping", 60.0, loss_bookkeeping},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    failed += pass ? 0 : 1;
    std::printf("criterion %d %s: %s  %s  [%.1fs, budget %.0fs%s]\n", c.id, c.name, pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs, c.budget_s, in_time ? "" : ", over budget");
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
