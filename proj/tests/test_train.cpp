#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pimsm/engine/gradcheck.hpp"
#include "pimsm/errors.hpp"
#include "pimsm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace pimsm;
using namespace pimsm::train;
using engine::Tape;

namespace {

signalgen::LabeledSequenceSet toy_data(std::size_t per_class, Index T, std::uint64_t seed) {
  signalgen::TwoTimescaleConfig g;
  g.n_per_class = per_class;
  g.T = T;
  g.seed = seed;
  return signalgen::gen_two_timescale_task(g);
}

TrainConfig tiny_config(msssm::Preset preset, Index T) {
  TrainConfig c;
  auto& m = c.model;
  m.d_in = 2;
  m.d_model = 8;
  m.d_inter = 12;
  m.heads = 3;
  m.head_dim = 3;
  m.state_dim = 4;
  m.preset = preset;
  m.hyper.feature_bins = 8;
  m.hyper.hidden = 6;
  m.hyper.f_min = 1.0 / static_cast<double>(T);
  c.epochs = 3;
  c.batch_size = 8;
  return c;
}

std::pair<PreparedSet, PreparedSet> split(const PreparedSet& all, std::uint64_t seed) {
  std::vector<std::size_t> perm(all.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> a, b;
  for (std::size_t j = 0; j < perm.size(); ++j) (j % 4 == 3 ? b : a).push_back(perm[j]);
  return {subset(all, a), subset(all, b)};
}

Matrix gaussian(Index n, Index p, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix m(n, p);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

}  // namespace

TEST_CASE("classification loss with label smoothing") {
  const std::vector<int> labels{0, 1, 1};
  CHECK(task_loss_classification(Matrix::Zero(3, 2), labels, 0.0) == doctest::Approx(std::log(2.0)));
  Matrix logits(3, 3);
  logits << 1, 2, 3, -1, 0, 4, 2, 2, -3;
  const std::vector<int> l3{0, 1, 2}, l3b{2, 2, 0};
  CHECK(task_loss_classification(logits, l3, 1.0) == doctest::Approx(task_loss_classification(logits, l3b, 1.0)));

  // confident correct logits stay above the smoothed-target floor
  for (const double eps : {0.05, 0.1, 0.3}) {
    const double C = 3.0;
    const double spec_floor = -((1.0 - eps) * std::log(1.0 - eps) + eps * std::log(eps / (C - 1.0)));
    const double hi = 1.0 - eps + eps / C, lo = eps / C;
    const double entropy = -(hi * std::log(hi) + (C - 1.0) * lo * std::log(lo));
    Matrix conf = Matrix::Zero(3, 3);
    for (Index i = 0; i < 3; ++i) conf(i, i) = 12.0;
    const double loss = task_loss_classification(conf, l3, eps);
    CHECK(loss >= spec_floor);
    CHECK(loss >= entropy);
    // the minimiser of the smoothed loss reaches the target entropy
    Matrix opt = Matrix::Zero(3, 3);
    for (Index i = 0; i < 3; ++i) opt(i, i) = std::log(hi / lo);
    CHECK(task_loss_classification(opt, l3, eps) == doctest::Approx(entropy).epsilon(1e-12));
  }

  Tape t;
  CHECK(task_loss_classification(t.constant(logits), l3, 0.1).scalar() ==
        doctest::Approx(task_loss_classification(logits, l3, 0.1)).epsilon(1e-14));
  const std::vector<int> bad{0, 3, 1};
  CHECK_THROWS_AS(task_loss_classification(logits, bad, 0.1), DataError);
  CHECK_THROWS_AS(task_loss_classification(t.constant(logits), bad, 0.1), DataError);

  std::vector<Matrix*> params{&logits};
  const auto rep = engine::grad_check(
      [&](Tape&, const std::vector<engine::Var>& v) { return task_loss_classification(v[0], l3, 0.1); }, params);
  CHECK(rep.passed);
}

TEST_CASE("extreme beta hinge") {
  const std::vector<double> mid{2.0}, top{5.0}, low{0.4};
  CHECK(extreme_beta_loss(mid) == 0.0);
  CHECK(extreme_beta_loss(top) == doctest::Approx(0.04));
  CHECK(extreme_beta_loss(low) == doctest::Approx(0.01));
  Tape t;
  Matrix b(2, 3);
  b << 2.0, 5.0, 0.4, 1.0, 1.0, 1.0;
  CHECK(extreme_beta_loss(t.constant(b)).scalar() == doctest::Approx(0.05 / 2.0));
}

TEST_CASE("hypernet alignment loss") {
  spectral::PiecewiseFit a;
  a.K = 3;
  a.knees = {0.02, 0.1};
  a.betas = {1.0, 2.0, 1.5};
  a.log_amplitudes = {0, 0, 0};
  a.f_min = 0.01;
  CHECK(hyp_alignment_loss(a, a) == 0.0);
  auto b = a;
  b.knees[1] *= std::exp(1.0);
  CHECK(hyp_alignment_loss(a, b) == doctest::Approx(1.0 / 5.0));
  b.betas[0] = 1.7;
  CHECK(hyp_alignment_loss(a, b) == doctest::Approx(hyp_alignment_loss(b, a)));
  auto c = a;
  c.K = 2;
  c.knees = {0.05};
  c.betas = {1.0, 1.0};
  CHECK_THROWS_AS(hyp_alignment_loss(a, c), ParameterError);

  Tape t;
  Matrix lk(1, 2), bt(1, 3);
  lk << std::log(0.02), std::log(0.1);
  bt << 1.0, 2.0, 1.5;
  Matrix tk = lk;
  tk(0, 1) += 1.0;
  const spectral::HyperOutput out{t.constant(lk), t.constant(bt)};
  CHECK(hyp_alignment_loss(out, tk, bt).scalar() == doctest::Approx(0.2));
}

TEST_CASE("mask generation") {
  MaskSpec spec;
  const Index T = 100;
  double frac = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) frac += make_mask(T, 1, spec, static_cast<std::uint64_t>(i)).mean();
  frac /= n;
  const double expected = 1.0 - (1.0 - spec.point_prob) * (1.0 - 30.0 / 100.0);
  CHECK(frac == doctest::Approx(expected).epsilon(0.01));
  const Matrix m = make_mask(40, 3, spec, 7);
  for (Index c = 0; c < 3; ++c) {
    // a contiguous run of 12 ones exists in every channel
    Index run = 0, best = 0;
    for (Index t = 0; t < 40; ++t) {
      run = m(t, c) == 1.0 ? run + 1 : 0;
      best = std::max(best, run);
    }
    CHECK(best >= 12);
  }
  CHECK(make_mask(40, 3, spec, 7) == m);
  MaskSpec bad;
  bad.point_prob = 1.5;
  CHECK_THROWS_AS(make_mask(4, 1, bad, 0), ParameterError);
}

TEST_CASE("masked pretraining loss") {
  auto cfg = tiny_config(msssm::Preset::LearnableDelta, 16);
  cfg.model.recon_head = true;
  const auto m = msssm::Model::create(cfg.model, 3);
  std::mt19937_64 rng(4);
  std::vector<Matrix> seqs{gaussian(16, 2, rng), gaussian(16, 2, rng)};
  std::vector<const Matrix*> ptr{&seqs[0], &seqs[1]};
  std::vector<Matrix> masks{make_mask(16, 2, MaskSpec{}, 1), make_mask(16, 2, MaskSpec{}, 2)};

  Tape t;
  engine::Bound p(t, m.params);
  msssm::ForwardResult fwd;
  const double loss = masked_pretrain_loss(m, p, ptr, masks, nullptr, &fwd).scalar();
  std::vector<const Matrix*> mp{&masks[0], &masks[1]};
  const Matrix x = msssm::pack_time_major(ptr), mk = msssm::pack_time_major(mp);
  const Matrix err = (fwd.reconstruction.value() - x).cwiseAbs().cwiseProduct(mk);
  CHECK(loss == doctest::Approx(err.sum() / mk.sum()).epsilon(1e-14));

  // values at masked positions never reach the model
  std::vector<Matrix> altered = seqs;
  for (std::size_t i = 0; i < 2; ++i)
    for (Index k = 0; k < altered[i].size(); ++k)
      if (masks[i].data()[k] == 1.0) altered[i].data()[k] = 1e3;
  Tape t2;
  engine::Bound p2(t2, m.params);
  msssm::ForwardResult fwd2;
  masked_pretrain_loss(m, p2, {&altered[0], &altered[1]}, masks, nullptr, &fwd2);
  CHECK(fwd2.reconstruction.value() == fwd.reconstruction.value());

  std::vector<Matrix> none{Matrix::Zero(16, 2), Matrix::Zero(16, 2)};
  Tape t3;
  engine::Bound p3(t3, m.params);
  CHECK(masked_pretrain_loss(m, p3, ptr, none, nullptr).scalar() == 0.0);

  auto no_head = cfg.model;
  no_head.recon_head = false;
  const auto m2 = msssm::Model::create(no_head, 3);
  Tape t4;
  engine::Bound p4(t4, m2.params);
  CHECK_THROWS_AS(masked_pretrain_loss(m2, p4, ptr, masks, nullptr), ParameterError);
}

TEST_CASE("drift intervention loss") {
  std::mt19937_64 rng(11);
  const Matrix z = gaussian(64, 8, rng);
  Tape t;
  CHECK(drift_intervention_loss(t.constant(z), t.constant(z), 0.7).scalar() == doctest::Approx(0.0).scale(1.0));
  const Matrix q = Eigen::HouseholderQR<Matrix>(gaussian(8, 8, rng)).householderQ();
  CHECK(std::abs(drift_intervention_loss(t.constant(z), t.constant(z * q), 0.7).scalar()) < 1e-10);
  double mc = 0.0;
  for (int r = 0; r < 20; ++r)
    mc += drift_intervention_loss(t.constant(gaussian(256, 16, rng)), t.constant(gaussian(256, 16, rng)), 1.0).scalar();
  mc /= 20.0;
  CHECK(mc > 0.85);
  CHECK(mc <= 1.0);
  CHECK_THROWS_AS(drift_intervention_loss(t.constant(z.topRows(1)), t.constant(z.topRows(1)), 1.0), ParameterError);

  Matrix a = gaussian(10, 3, rng), b = gaussian(10, 4, rng);
  const auto rep = engine::grad_check(
      [](Tape&, const std::vector<engine::Var>& v) { return drift_intervention_loss(v[0], v[1], 1.0); }, {&a, &b});
  CHECK(rep.passed);
}

TEST_CASE("composite loss bookkeeping") {
  Tape t;
  LossInputs in;
  in.task = t.constant(0.37);
  in.deltas = t.constant(Matrix::Constant(2, 3, 0.5));
  in.a_log = t.constant(Matrix::Constant(1, 4, std::log(2.0)));
  in.a0 = 2.0;
  in.acquisition_step = 0.5;
  spectral::SoftFitTerms fit{t.constant(0.0), t.constant(0.0), t.constant(Matrix::Zero(2, 3))};
  in.fit = fit;
  Matrix lk(2, 2), bt = Matrix::Constant(2, 3, 2.0);
  lk << -4.0, -2.0, -3.0, -1.5;
  in.hyper = spectral::HyperOutput{t.constant(lk), t.constant(bt)};
  in.teacher_log_knees = &lk;
  in.teacher_betas = &bt;
  // every auxiliary term at its zero case
  const auto r0 = total_loss(in, LossWeights{});
  CHECK(r0.parts.total == 0.37);
  CHECK(r0.parts.sum() == r0.parts.total);

  in.fit = spectral::SoftFitTerms{t.constant(0.2), t.constant(0.05), t.constant(Matrix::Zero(2, 3))};
  in.deltas = t.constant(Matrix::Constant(2, 3, 1.3));
  in.a0 = 1.0;
  Matrix bt2 = bt;
  bt2(0, 0) = 4.95;
  in.hyper = spectral::HyperOutput{t.constant(lk), t.constant(bt2)};
  const auto r = total_loss(in, LossWeights{});
  CHECK(std::abs(r.parts.sum() - r.parts.total) <= 1e-12);
  CHECK(r.parts.fit == doctest::Approx(3.0 * 0.2));
  CHECK(r.parts.seam == doctest::Approx(0.1 * 0.05));
  CHECK(r.parts.delta == doctest::Approx(0.1 * std::pow(std::log(1.3 / 0.5), 2)));
  CHECK(r.parts.a_scale == doctest::Approx(0.1 * std::pow(std::log(2.0), 2)));
  CHECK(r.parts.beta == doctest::Approx(0.5 * 0.15 * 0.15 / 2.0));
  CHECK(r.parts.hyp == doctest::Approx(0.3 * 2.95 * 2.95 / 10.0));
  const auto zero = total_loss(in, LossWeights{}.without_aux());
  CHECK(zero.parts.total == 0.37);
  const auto off = total_loss(in, LossWeights{}, false);
  CHECK(off.parts.total == 0.37);
  CHECK(off.parts.fit == 0.0);
  LossWeights neg;
  neg.w_fit = -1.0;
  CHECK_THROWS_AS(total_loss(in, neg), ParameterError);
}

TEST_CASE("training is deterministic and keeps its books") {
  const Index T = 32;
  const auto all = prepare(toy_data(12, T, 1), tiny_config(msssm::Preset::Pimsm, T).model.hyper, 0);
  const auto [tr, va] = split(all, 5);
  auto cfg = tiny_config(msssm::Preset::Pimsm, T);
  cfg.seed = 9;
  const auto a = train_loop(cfg, tr, &va);
  const auto b = train_loop(cfg, tr, &va);
  CHECK(metric_log_csv(a.log) == metric_log_csv(b.log));
  for (const auto& s : a.steps) CHECK(std::abs(s.loss.sum() - s.loss.total) <= 1e-12);
  CHECK(a.log.size() == 2 * cfg.epochs);
  CHECK(a.log.front().deltas.size() == 3);

  // zero auxiliary weights reproduce a pure task-loss run bit for bit
  auto zero = cfg;
  zero.weights = cfg.weights.without_aux();
  auto off = cfg;
  off.aux_terms = false;
  const auto rz = train_loop(zero, tr, &va);
  const auto ro = train_loop(off, tr, &va);
  CHECK(metric_log_csv(rz.log) == metric_log_csv(ro.log));
  REQUIRE(rz.steps.size() == ro.steps.size());
  for (std::size_t i = 0; i < rz.steps.size(); ++i) {
    CHECK(rz.steps[i].loss.task == ro.steps[i].loss.task);
    CHECK(rz.steps[i].loss.total == ro.steps[i].loss.total);
  }
}

TEST_CASE("task loss alone reaches the hypernet through the steps") {
  const Index T = 32;
  auto cfg = tiny_config(msssm::Preset::Pimsm, T);
  const auto data = prepare(toy_data(4, T, 2), cfg.model.hyper, 0);
  const auto m = msssm::Model::create(cfg.model, 1);
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto ctx = batch_context(data, idx);
  std::vector<const Matrix*> seqs;
  for (const auto& s : data.inputs) seqs.push_back(&s);
  Tape t;
  engine::Bound p(t, m.params);
  const auto fwd = msssm::backbone_forward(m, p, msssm::pack_time_major(seqs), static_cast<Index>(idx.size()), &ctx);
  LossInputs in;
  in.task = task_loss_classification(fwd.prediction, data.labels, 0.1);
  t.backward(total_loss(in, LossWeights{}, false).total);
  CHECK(p[m.hyper->w3].grad().cwiseAbs().maxCoeff() > 0.0);
  CHECK(p[m.hyper->b3].grad().cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("non-finite loss aborts with a component dump") {
  const Index T = 32;
  auto cfg = tiny_config(msssm::Preset::LearnableDelta, T);
  auto data = prepare(toy_data(4, T, 3), cfg.model.hyper, 0);
  data.inputs[0](3, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    train_loop(cfg, data);
    FAIL("expected a NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("task=") != std::string::npos);
  }
}

TEST_CASE("masked pretraining runs and lowers the reconstruction error") {
  const Index T = 32;
  auto cfg = tiny_config(msssm::Preset::Pimsm, T);
  cfg.pretrain = true;
  cfg.epochs = 20;
  const auto data = prepare(toy_data(8, T, 4), cfg.model.hyper, 0);
  const auto r = train_loop(cfg, data);
  CHECK(r.model.w_recon.has_value());
  const auto n = r.log.size();
  const double early = (r.log[0].metric + r.log[1].metric + r.log[2].metric) / 3.0;
  const double late = (r.log[n - 1].metric + r.log[n - 2].metric + r.log[n - 3].metric) / 3.0;
  CHECK(late < early);
}

TEST_CASE("desk-scale model learns the two-timescale task") {
  const Index T = 64;
  TrainConfig cfg;
  cfg.model.d_in = 2;
  cfg.model.hyper.f_min = 1.0 / static_cast<double>(T);
  cfg.seed = 0;
  const auto all = prepare(toy_data(64, T, 0), cfg.model.hyper, 0);
  const auto [tr, va] = split(all, 0);
  const auto r = train_loop(cfg, tr, &va);
  double last_val = 0.0;
  const double log_a0 = std::log(r.model.a0);
  for (const auto& e : r.log) {
    CHECK(std::abs(e.mean_log_abs_a - log_a0) <= 0.5);
    if (e.split == "val") last_val = e.metric;
  }
  CHECK(last_val >= 0.9);
}
