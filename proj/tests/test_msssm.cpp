#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pimsm/engine/gradcheck.hpp"
#include "pimsm/errors.hpp"
#include "pimsm/msssm.hpp"

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

using namespace pimsm;
using namespace pimsm::msssm;
using engine::Tape;

namespace {

ModelConfig small_config(Preset preset = Preset::LearnableDelta) {
  ModelConfig c;
  c.d_in = 2;
  c.d_model = 8;
  c.d_inter = 12;
  c.layers = 2;
  c.heads = 6;
  c.scales = 3;
  c.head_dim = 3;
  c.state_dim = 4;
  c.preset = preset;
  c.hyper.feature_bins = 8;
  c.hyper.hidden = 6;
  return c;
}

std::vector<Matrix> random_seqs(std::size_t n, Index T, Index d, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix m(T, d);
    for (Index r = 0; r < T; ++r)
      for (Index c = 0; c < d; ++c) m(r, c) = g(rng);
    out.push_back(m);
  }
  return out;
}

Matrix run_z(const Model& m, const std::vector<Matrix>& seqs) {
  std::vector<const Matrix*> p;
  for (const auto& s : seqs) p.push_back(&s);
  Tape t;
  engine::Bound b(t, m.params);
  return backbone_forward(m, b, pack_time_major(p), static_cast<Index>(seqs.size()), nullptr).z.value();
}

}  // namespace

TEST_CASE("head initialisation") {
  const auto h = init_heads(12, 3, 0.72, 5);
  CHECK(h.A_log.size() == 12);
  std::set<double> distinct(h.A_log.begin(), h.A_log.end());
  CHECK(distinct.size() == 12);
  double s = 0.0;
  for (const double a : h.A_log) {
    const double tau = 1.0 / std::exp(a);
    CHECK(tau >= 0.72 * (1.0 - 1e-12));
    CHECK(tau <= 72.0 * (1.0 + 1e-12));
    s += std::exp(a);
  }
  CHECK(h.a0 == doctest::Approx(s / 12.0));
  CHECK(init_heads(12, 3, 0.72, 5).A_log == h.A_log);
  CHECK(init_heads(12, 3, 0.72, 6).A_log != h.A_log);
  CHECK(h.scale_of_head[0] == 0);
  CHECK(h.scale_of_head[11] == 2);
  CHECK_THROWS_AS(init_heads(10, 3, 1.0, 0), ParameterError);
}

TEST_CASE("discretisation and the reference scan") {
  const auto d = discretize(-1.0, 1.0);
  CHECK(d.A_bar == doctest::Approx(std::exp(-1.0)));
  CHECK(d.B_factor == 1.0);
  CHECK(discretize(-2.0, 0.0).A_bar == 1.0);

  const Index T = 12;
  Matrix x = Matrix::Zero(T, 1);
  x(0, 0) = 1.0;
  const Matrix ones = Matrix::Ones(T, 1);
  const Matrix y = ssm_scan(-1.0, 1.0, x, ones, ones);
  for (Index l = 0; l < T; ++l) CHECK(y(l, 0) == doctest::Approx(std::exp(-static_cast<double>(l))).epsilon(1e-14));

  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  Matrix x1(T, 2), x2(T, 2), B(T, 3), C(T, 3);
  for (Index r = 0; r < T; ++r) {
    for (Index c = 0; c < 2; ++c) {
      x1(r, c) = g(rng);
      x2(r, c) = g(rng);
    }
    for (Index c = 0; c < 3; ++c) {
      B(r, c) = g(rng);
      C(r, c) = g(rng);
    }
  }
  const Matrix lin = ssm_scan(-0.4, 0.7, 2.0 * x1 - 3.0 * x2, B, C);
  const Matrix sup = 2.0 * ssm_scan(-0.4, 0.7, x1, B, C) - 3.0 * ssm_scan(-0.4, 0.7, x2, B, C);
  CHECK((lin - sup).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("linear_scan matches a plain loop") {
  const Index B = 3, T = 7, C = 4;
  const Matrix u = Matrix::Random(T * B, C);
  const Matrix decay = Matrix::Random(B, C).cwiseAbs();
  Tape t;
  const Matrix h = linear_scan(t.constant(u), t.constant(decay), B).value();
  for (Index b = 0; b < B; ++b) {
    Eigen::RowVectorXd s = Eigen::RowVectorXd::Zero(C);
    for (Index k = 0; k < T; ++k) {
      s = s.cwiseProduct(decay.row(b)) + u.row(k * B + b);
      CHECK((h.row(k * B + b) - s).cwiseAbs().maxCoeff() < 1e-14);
    }
  }
  CHECK_THROWS_AS(linear_scan(t.constant(u), t.constant(decay), 4), ParameterError);
}

TEST_CASE("scale aggregation") {
  Tape t;
  std::vector<engine::Var> s;
  for (int j = 0; j < 4; ++j) s.push_back(t.constant(Matrix::Constant(2, 2, j)));
  const auto agg = scale_aggregate(s, head_groups(4, 2));
  CHECK(agg.size() == 2);
  CHECK(agg[0].value()(0, 0) == doctest::Approx(0.5));
  CHECK(agg[1].value()(1, 1) == doctest::Approx(2.5));
  const auto single = scale_aggregate(s, head_groups(4, 1));
  CHECK(single[0].value()(0, 0) == doctest::Approx(1.5));
  CHECK_THROWS_AS(scale_aggregate(s, {{0}, {}}), ParameterError);
}

TEST_CASE("cross-scale attention") {
  Tape t;
  const Matrix w = Matrix::Random(3, 3);
  std::vector<engine::Var> tokens;
  for (int k = 0; k < 3; ++k) tokens.push_back(t.constant(Matrix::Random(5, 3)));
  const auto zero_q = cross_scale_attention(tokens, t.constant(Matrix::Zero(3, 3)), t.constant(w), t.constant(w));
  CHECK((zero_q.weights.value().array() - 1.0 / 3.0).abs().maxCoeff() < 1e-15);
  const auto r = cross_scale_attention(tokens, t.constant(w), t.constant(w), t.constant(w));
  for (int a = 0; a < 3; ++a)
    for (Index row = 0; row < 5; ++row) CHECK(r.weights.value().block(row, a * 3, 1, 3).sum() == doctest::Approx(1.0));
  const auto one = cross_scale_attention({tokens[0]}, t.constant(w), t.constant(w), t.constant(Matrix::Identity(3, 3)));
  CHECK((one.weights.value().array() - 1.0).abs().maxCoeff() < 1e-15);
  CHECK((one.outputs[0].value() - tokens[0].value()).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("a block with zero output weights is the identity") {
  auto m = Model::create(small_config(), 3);
  auto& b = m.blocks[0];
  m.params[b.w_o].value.setZero();
  m.params[b.w_3].value.setZero();
  Tape t;
  engine::Bound p(t, m.params);
  const Matrix x = Matrix::Random(4 * 5, 8);
  const auto d = preset_deltas(m, p, 4, nullptr);
  const Matrix y = block_forward(m, p, b, t.constant(x), 4, d).value();
  CHECK((y - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward pass shapes, finiteness and batch structure") {
  for (const Preset preset : {Preset::LearnableDelta, Preset::SingleScale, Preset::RandomDelta}) {
    const auto m = Model::create(small_config(preset), 11);
    const auto seqs = random_seqs(4, 9, 2, 2);
    std::vector<const Matrix*> ptr;
    for (const auto& s : seqs) ptr.push_back(&s);
    Tape t;
    engine::Bound p(t, m.params);
    const auto r = backbone_forward(m, p, pack_time_major(ptr), 4, nullptr);
    CHECK(r.z.rows() == 4);
    CHECK(r.z.cols() == 8);
    CHECK(r.prediction.cols() == 2);
    CHECK(r.z.value().allFinite());
    CHECK(r.block_outputs.size() == 2);
    CHECK(r.scale_states.size() == static_cast<std::size_t>(m.cfg.groups()));
    const Matrix& d = r.deltas.value();
    for (Index k = 1; k < d.cols(); ++k) CHECK(d(0, k) <= d(0, k - 1));

    // one sequence alone gives the same embedding as inside a batch
    const Matrix zb = run_z(m, seqs);
    const Matrix z0 = run_z(m, {seqs[2]});
    CHECK((zb.row(2) - z0.row(0)).cwiseAbs().maxCoeff() < 1e-12);
    // permuting the batch permutes the embeddings
    const Matrix zp = run_z(m, {seqs[3], seqs[1], seqs[0], seqs[2]});
    CHECK((zp.row(0) - zb.row(3)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((zp.row(3) - zb.row(2)).cwiseAbs().maxCoeff() < 1e-12);
  }
  auto pm = Model::create(small_config(Preset::Pimsm), 1);
  Tape t;
  engine::Bound p(t, pm.params);
  CHECK_THROWS_AS(backbone_forward(pm, p, Matrix::Zero(10, 2), 2, nullptr), ParameterError);
}

TEST_CASE("pimsm steps follow the spectral context") {
  const auto m = Model::create(small_config(Preset::Pimsm), 4);
  Tape t;
  engine::Bound p(t, m.params);
  SpectralContext ctx;
  ctx.features = Matrix::Random(3, 8);
  ctx.log_freqs = Matrix::Zero(1, 4);
  ctx.log_power = Matrix::Zero(6, 4);
  std::optional<spectral::HyperOutput> hyper;
  const auto d = preset_deltas(m, p, 3, &ctx, &hyper);
  REQUIRE(hyper.has_value());
  CHECK(d.rows() == 3);
  for (Index b = 0; b < 3; ++b)
    for (Index k = 0; k < 3; ++k) {
      CHECK(d.value()(b, k) >= 0.1 - 1e-12);
      CHECK(d.value()(b, k) <= 10.0 + 1e-12);
      if (k > 0) CHECK(d.value()(b, k) <= d.value()(b, k - 1));
    }
}

TEST_CASE("mean pool and head") {
  Tape t;
  Matrix h(6, 2);
  h << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12;
  const Matrix z = temporal_mean_pool(t.constant(h), 3).value();
  CHECK(z(0, 0) == doctest::Approx(5.0));
  CHECK(z(1, 1) == doctest::Approx(8.0));
  // the linear head is Lipschitz with constant ||W||_2
  const auto m = Model::create(small_config(), 8);
  const Matrix& W = m.params[m.w_head].value;
  const double lip = Eigen::JacobiSVD<Matrix>(W).singularValues()(0);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (int i = 0; i < 20; ++i) {
    Eigen::RowVectorXd a(8), b(8);
    for (Index j = 0; j < 8; ++j) {
      a(j) = g(rng);
      b(j) = g(rng);
    }
    CHECK(((a - b) * W).norm() <= lip * (a - b).norm() * (1.0 + 1e-12));
  }
}

TEST_CASE("RevIN") {
  Matrix w(4, 2);
  w << 1, 5, 2, 5, 3, 5, 4, 5;
  const auto [n, s] = revin_apply(w);
  CHECK(s.mean(0, 0) == doctest::Approx(2.5));
  CHECK(s.scale(0, 0) == doctest::Approx(std::sqrt(1.25)));
  CHECK(s.scale(0, 1) == kRevinFloor);
  CHECK(n.col(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK((revin_invert(n, s) - w).cwiseAbs().maxCoeff() < 1e-12);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(3.0, 10.0);
  for (int i = 0; i < 100; ++i) {
    Matrix x(16, 3);
    for (Index r = 0; r < 16; ++r)
      for (Index c = 0; c < 3; ++c) x(r, c) = g(rng);
    const auto [y, st] = revin_apply(x);
    CHECK((revin_invert(y, st) - x).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, x.cwiseAbs().maxCoeff()));
  }
  CHECK_THROWS_AS(revin_invert(Matrix::Zero(2, 3), s), ParameterError);
}

TEST_CASE("A-scale anchor") {
  const std::vector<double> a{std::log(0.5), std::log(1.5)};
  CHECK(a_scale_loss(a, 1.0, 0.1) == doctest::Approx(0.0).scale(1.0));
  CHECK(a_scale_loss(a, std::exp(-1.0), 0.1) == doctest::Approx(0.1));
  Tape t;
  Matrix row(1, 2);
  row << a[0], a[1];
  CHECK(a_scale_loss(t.constant(row), std::exp(-1.0), 0.1).scalar() == doctest::Approx(0.1));
  CHECK_THROWS_AS(a_scale_loss(a, 0.0, 0.1), ParameterError);
  const auto m = Model::create(small_config(), 2);
  Tape t2;
  engine::Bound p(t2, m.params);
  CHECK(a_scale_loss(all_a_log(m, p), m.a0, 1.0).scalar() == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("checkpoint round trip") {
  for (const Preset preset : {Preset::Pimsm, Preset::RandomDelta}) {
    auto m = Model::create(small_config(preset), 21);
    for (auto& prm : m.params) prm.value.array() += 0.25;
    const auto path = (std::filesystem::temp_directory_path() / "pimsm_ckpt_test.bin").string();
    save_checkpoint(m, path);
    const Model r = load_checkpoint(path);
    CHECK(r.cfg.to_json() == m.cfg.to_json());
    CHECK(r.a0 == m.a0);
    CHECK(r.fixed_deltas == m.fixed_deltas);
    REQUIRE(r.params.size() == m.params.size());
    for (std::size_t i = 0; i < m.params.size(); ++i) CHECK(r.params[i].value == m.params[i].value);
    std::filesystem::remove(path);
  }
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.bin"), IoError);
}

TEST_CASE("config validation and presets") {
  auto c = small_config();
  c.heads = 5;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = small_config(Preset::SingleScale);
  c.heads = 5;
  CHECK_NOTHROW(c.validate());
  CHECK(c.groups() == 1);
  c = small_config(Preset::Pimsm);
  c.hyper.K = 2;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  CHECK(ModelConfig::from_json(small_config().to_json()).to_json() == small_config().to_json());
  CHECK(preset_from_string(to_string(Preset::RandomDelta)) == Preset::RandomDelta);
  CHECK_THROWS_AS(preset_from_string("mamba"), ParameterError);
  const auto a = Model::create(small_config(Preset::RandomDelta), 1);
  const auto b = Model::create(small_config(Preset::RandomDelta), 1);
  CHECK(a.fixed_deltas == b.fixed_deltas);
}

TEST_CASE("backbone gradients match finite differences") {
  auto m = Model::create(small_config(Preset::LearnableDelta), 6);
  const auto seqs = random_seqs(2, 5, 2, 8);
  std::vector<const Matrix*> ptr;
  for (const auto& s : seqs) ptr.push_back(&s);
  const Matrix x = pack_time_major(ptr);
  std::vector<Matrix*> params;
  for (auto& prm : m.params) params.push_back(&prm.value);
  engine::GradCheckOptions opts;
  opts.samples = 40;
  const auto report = engine::grad_check(
      [&](Tape&, const std::vector<engine::Var>& leaves) {
        const engine::Bound p(leaves);
        return engine::sum(engine::square(backbone_forward(m, p, x, 2, nullptr).prediction));
      },
      params, opts);
  CHECK(report.passed);
}
