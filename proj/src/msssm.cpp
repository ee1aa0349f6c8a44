#include "pimsm/msssm.hpp"

#include "pimsm/errors.hpp"
#include "pimsm/init.hpp"
#include "pimsm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace pimsm::msssm {

using engine::Bound;
using engine::concat_cols;
using engine::matmul;
using engine::slice_cols;
using engine::slice_rows;
using engine::Tape;

std::string to_string(Preset p) {
  switch (p) {
    case Preset::Pimsm: return "pimsm";
    case Preset::SingleScale: return "single-scale";
    case Preset::LearnableDelta: return "learnable-delta";
    case Preset::RandomDelta: return "random-delta";
  }
  return "pimsm";
}

Preset preset_from_string(const std::string& s) {
  if (s == "pimsm") return Preset::Pimsm;
  if (s == "single-scale") return Preset::SingleScale;
  if (s == "learnable-delta") return Preset::LearnableDelta;
  if (s == "random-delta") return Preset::RandomDelta;
  throw ParameterError("unknown preset '" + s + "' (expected pimsm, single-scale, learnable-delta or random-delta)");
}

void ModelConfig::validate() const {
  if (d_in < 1 || d_model < 1 || d_inter < 1 || layers < 1 || heads < 1 || scales < 1 || head_dim < 1 ||
      state_dim < 1)
    throw ParameterError("model dimensions must be positive");
  if (heads % groups() != 0) throw ParameterError("heads must be divisible by the number of scale groups");
  if (task == TaskKind::Classification && classes < 2) throw ParameterError("classification needs at least 2 classes");
  if (task == TaskKind::Forecast && horizon < 1) throw ParameterError("forecast horizon must be positive");
  if (!(acquisition_step > 0.0)) throw ParameterError("acquisition_step must be positive");
  map.validate();
  if (preset == Preset::Pimsm) {
    if (hyper.K != scales) throw ParameterError("hypernet K must equal the number of scales");
    hyper.validate();
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_in", d_in},
          {"d_model", d_model},
          {"d_inter", d_inter},
          {"layers", layers},
          {"heads", heads},
          {"scales", scales},
          {"head_dim", head_dim},
          {"state_dim", state_dim},
          {"task", task == TaskKind::Classification ? "classify" : "forecast"},
          {"classes", classes},
          {"horizon", horizon},
          {"recon_head", recon_head},
          {"preset", to_string(preset)},
          {"acquisition_step", acquisition_step},
          {"map",
           {{"w", map.w},
            {"mode", scalemap::to_string(map.mode)},
            {"delta_min_factor", map.delta_min_factor},
            {"delta_max_factor", map.delta_max_factor}}},
          {"hyper",
           {{"K", hyper.K},
            {"feature_bins", hyper.feature_bins},
            {"hidden", hyper.hidden},
            {"f_min", hyper.f_min},
            {"f_max", hyper.f_max},
            {"min_fraction", hyper.min_fraction},
            {"membership_width", hyper.membership_width},
            {"levels", hyper.levels}}}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_in = j.value("d_in", c.d_in);
  c.d_model = j.value("d_model", c.d_model);
  c.d_inter = j.value("d_inter", c.d_inter);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.scales = j.value("scales", c.scales);
  c.head_dim = j.value("head_dim", c.head_dim);
  c.state_dim = j.value("state_dim", c.state_dim);
  const std::string task = j.value("task", std::string("classify"));
  if (task != "classify" && task != "forecast") throw ParameterError("model task must be classify or forecast");
  c.task = task == "classify" ? TaskKind::Classification : TaskKind::Forecast;
  c.classes = j.value("classes", c.classes);
  c.horizon = j.value("horizon", c.horizon);
  c.recon_head = j.value("recon_head", c.recon_head);
  c.preset = preset_from_string(j.value("preset", std::string("pimsm")));
  c.acquisition_step = j.value("acquisition_step", c.acquisition_step);
  if (j.contains("map")) {
    const auto& m = j.at("map");
    c.map.w = m.value("w", c.map.w);
    c.map.mode = scalemap::mode_from_string(m.value("mode", std::string("per-band")));
    c.map.delta_min_factor = m.value("delta_min_factor", c.map.delta_min_factor);
    c.map.delta_max_factor = m.value("delta_max_factor", c.map.delta_max_factor);
  }
  c.hyper.K = static_cast<int>(c.scales);
  if (j.contains("hyper")) {
    const auto& h = j.at("hyper");
    c.hyper.K = h.value("K", c.hyper.K);
    c.hyper.feature_bins = h.value("feature_bins", c.hyper.feature_bins);
    c.hyper.hidden = h.value("hidden", c.hyper.hidden);
    c.hyper.f_min = h.value("f_min", c.hyper.f_min);
    c.hyper.f_max = h.value("f_max", c.hyper.f_max);
    c.hyper.min_fraction = h.value("min_fraction", c.hyper.min_fraction);
    c.hyper.membership_width = h.value("membership_width", c.hyper.membership_width);
    c.hyper.levels = h.value("levels", c.hyper.levels);
  }
  return c;
}

ModelConfig ModelConfig::paper_scale() {
  ModelConfig c;
  c.d_model = 320;
  c.d_inter = 1024;
  c.layers = 9;
  c.head_dim = 32;
  c.state_dim = 32;
  return c;
}

std::vector<std::vector<Index>> head_groups(Index H, Index K) {
  if (K < 1 || H % K != 0) throw ParameterError("heads must be divisible by the number of scale groups");
  std::vector<std::vector<Index>> g(static_cast<std::size_t>(K));
  for (Index j = 0; j < H; ++j) g[static_cast<std::size_t>(j / (H / K))].push_back(j);
  return g;
}

HeadInit init_heads(Index H, Index K, double acquisition_step, std::uint64_t seed) {
  if (!(acquisition_step > 0.0)) throw ParameterError("init_heads: acquisition_step must be positive");
  const auto groups = head_groups(H, K);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, std::log(100.0));
  HeadInit h;
  h.scale_of_head.resize(static_cast<std::size_t>(H));
  for (std::size_t k = 0; k < groups.size(); ++k)
    for (const Index j : groups[k]) h.scale_of_head[static_cast<std::size_t>(j)] = static_cast<Index>(k);
  double s = 0.0;
  for (Index j = 0; j < H; ++j) {
    const double tau = acquisition_step * std::exp(u(rng));
    h.A_log.push_back(std::log(1.0 / tau));
    s += 1.0 / tau;
  }
  h.a0 = s / static_cast<double>(H);
  return h;
}

Discretized discretize(double A, double delta) { return {std::exp(delta * A), delta}; }

Matrix ssm_scan(double A, double delta, const Matrix& x, const Matrix& B, const Matrix& C) {
  if (x.rows() != B.rows() || x.rows() != C.rows() || B.cols() != C.cols())
    throw ParameterError("ssm_scan: shape mismatch");
  const auto [a_bar, b_fac] = discretize(A, delta);
  const Index T = x.rows(), P = x.cols(), N = B.cols();
  Matrix h = Matrix::Zero(P, N);
  Matrix y(T, P);
  for (Index t = 0; t < T; ++t) {
    h = a_bar * h + b_fac * x.row(t).transpose() * B.row(t);
    y.row(t) = (h * C.row(t).transpose()).transpose();
  }
  return y;
}

Model Model::create(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.seed = seed;
  const Index D = cfg.d_model, I = cfg.d_inter, H = cfg.heads, K = cfg.groups(), P = cfg.head_dim,
              N = cfg.state_dim;
  m.groups = head_groups(H, K);
  std::mt19937_64 rng(derive_seed(seed, {0x11}));
  auto& ps = m.params;
  m.w_in = ps.add("embed.w", glorot(cfg.d_in, D, rng));
  m.b_in = ps.add("embed.b", Matrix::Zero(1, D), false);
  double a_sum = 0.0;
  for (Index l = 0; l < cfg.layers; ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    BlockHandles b{};
    b.norm1 = ps.add(pre + "norm1", Matrix::Ones(1, D), false);
    b.w_x = ps.add(pre + "w_x", glorot(D, H * P, rng));
    b.w_b = ps.add(pre + "w_b", glorot(D, N, rng));
    b.w_c = ps.add(pre + "w_c", glorot(D, N, rng));
    const HeadInit hi = init_heads(H, K, cfg.acquisition_step, derive_seed(seed, {0xA0, static_cast<std::uint64_t>(l)}));
    Matrix a_log(1, H);
    for (Index j = 0; j < H; ++j) {
      a_log(0, j) = hi.A_log[static_cast<std::size_t>(j)];
      a_sum += std::exp(a_log(0, j));
    }
    b.a_log = ps.add(pre + "a_log", a_log, false);
    b.norm_s = ps.add(pre + "norm_s", Matrix::Ones(1, P), false);
    b.w_q = ps.add(pre + "w_q", glorot(P, P, rng));
    b.w_k = ps.add(pre + "w_k", glorot(P, P, rng));
    b.w_v = ps.add(pre + "w_v", glorot(P, P, rng));
    b.w_o = ps.add(pre + "w_o", glorot(K * P, D, rng));
    b.b_o = ps.add(pre + "b_o", Matrix::Zero(1, D), false);
    b.norm2 = ps.add(pre + "norm2", Matrix::Ones(1, D), false);
    b.w_1 = ps.add(pre + "w_1", glorot(D, I, rng));
    b.w_2 = ps.add(pre + "w_2", glorot(D, I, rng));
    b.w_3 = ps.add(pre + "w_3", glorot(I, D, rng));
    m.blocks.push_back(b);
  }
  m.a0 = a_sum / static_cast<double>(H * cfg.layers);
  m.norm_f = ps.add("final.norm", Matrix::Ones(1, D), false);
  const Index out = cfg.task == TaskKind::Classification ? cfg.classes : cfg.horizon * cfg.d_in;
  m.w_head = ps.add("head.w", glorot(D, out, rng));
  m.b_head = ps.add("head.b", Matrix::Zero(1, out), false);
  if (cfg.recon_head) {
    m.w_recon = ps.add("recon.w", glorot(D, cfg.d_in, rng));
    m.b_recon = ps.add("recon.b", Matrix::Zero(1, cfg.d_in), false);
  }
  const double lmin = std::log(cfg.map.delta_min(cfg.acquisition_step));
  const double lmax = std::log(cfg.map.delta_max(cfg.acquisition_step));
  switch (cfg.preset) {
    case Preset::Pimsm:
      m.hyper = spectral::HyperNet::create(ps, cfg.hyper, derive_seed(seed, {0x4E}));
      break;
    case Preset::SingleScale:
    case Preset::LearnableDelta: {
      // evenly spread positions on the log-step axis, fastest first
      Matrix logits(1, K);
      for (Index k = 0; k < K; ++k) {
        const double pos = static_cast<double>(K - k) / static_cast<double>(K + 1);
        logits(0, k) = std::log(pos / (1.0 - pos));
      }
      m.delta_logits = ps.add("delta.logits", logits, false);
      break;
    }
    case Preset::RandomDelta: {
      std::mt19937_64 drng(derive_seed(seed, {0xDE17A}));
      std::uniform_real_distribution<double> u(lmin, lmax);
      std::vector<double> d(static_cast<std::size_t>(K));
      for (auto& v : d) v = std::exp(u(drng));
      std::sort(d.begin(), d.end(), std::greater<>());
      m.fixed_deltas = Matrix(1, K);
      for (Index k = 0; k < K; ++k) m.fixed_deltas(0, k) = d[static_cast<std::size_t>(k)];
      break;
    }
  }
  return m;
}

Var preset_deltas(const Model& m, const Bound& p, Index batch, const SpectralContext* ctx,
                  std::optional<spectral::HyperOutput>* hyper_out) {
  const auto& cfg = m.cfg;
  Tape& t = *p[m.w_in].tape();
  switch (cfg.preset) {
    case Preset::Pimsm: {
      if (ctx == nullptr) throw ParameterError("pimsm preset needs a spectral context");
      if (ctx->features.rows() != batch) throw ParameterError("spectral features must have one row per sequence");
      const auto out = spectral::hypernet_apply(p, *m.hyper, t.constant(ctx->features));
      if (hyper_out != nullptr) *hyper_out = out;
      return scalemap::map_delta_tape(out.log_knees, out.betas, cfg.hyper.f_min, cfg.hyper.f_max, cfg.map,
                                      cfg.acquisition_step);
    }
    case Preset::SingleScale:
    case Preset::LearnableDelta: {
      const double lmin = std::log(cfg.map.delta_min(cfg.acquisition_step));
      const double lmax = std::log(cfg.map.delta_max(cfg.acquisition_step));
      const Var d = engine::exp(engine::sigmoid(p[*m.delta_logits]) * (lmax - lmin) + lmin);
      return engine::sort_rows_desc(d).first;
    }
    case Preset::RandomDelta:
      return t.constant(m.fixed_deltas);
  }
  throw ContractError("unhandled preset");
}

Var rms_norm(const Var& x, const Var& gain, double eps) {
  const Var rms = engine::sqrt(engine::row_mean(engine::square(x)) + eps);
  return x / rms * gain;
}

Var linear_scan(const Var& u, const Var& decay, Index batch) {
  if (batch < 1 || u.rows() % batch != 0) throw ParameterError("linear_scan: rows must be a multiple of the batch");
  if (decay.cols() != u.cols() || (decay.rows() != batch && decay.rows() != 1))
    throw ParameterError("linear_scan: decay must be B x C or 1 x C");
  const Index T = u.rows() / batch;
  std::vector<Var> states;
  states.reserve(static_cast<std::size_t>(T));
  Var h = slice_rows(u, 0, batch);
  states.push_back(h);
  for (Index t = 1; t < T; ++t) {
    h = decay * h + slice_rows(u, t * batch, batch);
    states.push_back(h);
  }
  return engine::concat_rows(states);
}

std::vector<Var> scale_aggregate(const std::vector<Var>& head_states, const std::vector<std::vector<Index>>& groups) {
  std::vector<Var> out;
  for (const auto& g : groups) {
    if (g.empty()) throw ParameterError("scale_aggregate: empty scale group");
    Var s = head_states.at(static_cast<std::size_t>(g.front()));
    for (std::size_t i = 1; i < g.size(); ++i) s = s + head_states.at(static_cast<std::size_t>(g[i]));
    out.push_back(g.size() == 1 ? s : s * (1.0 / static_cast<double>(g.size())));
  }
  return out;
}

AttentionResult cross_scale_attention(const std::vector<Var>& tokens, const Var& w_q, const Var& w_k,
                                      const Var& w_v) {
  if (tokens.empty()) throw ParameterError("cross_scale_attention: no tokens");
  const Index P = tokens.front().cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(P));
  std::vector<Var> q, k, v;
  for (const auto& s : tokens) {
    if (s.cols() != P || s.rows() != tokens.front().rows())
      throw ParameterError("cross_scale_attention: tokens must share a shape");
    q.push_back(matmul(s, w_q));
    k.push_back(matmul(s, w_k));
    v.push_back(matmul(s, w_v));
  }
  AttentionResult r;
  std::vector<Var> all_w;
  for (std::size_t a = 0; a < tokens.size(); ++a) {
    std::vector<Var> logits;
    for (std::size_t b = 0; b < tokens.size(); ++b) logits.push_back(engine::row_sum(q[a] * k[b]) * scale);
    const Var w = engine::softmax_rows(concat_cols(logits));
    Var o;
    for (std::size_t b = 0; b < tokens.size(); ++b) {
      const Var term = slice_cols(w, static_cast<Index>(b), 1) * v[b];
      o = b == 0 ? term : o + term;
    }
    r.outputs.push_back(o);
    all_w.push_back(w);
  }
  r.weights = concat_cols(all_w);
  return r;
}

Var block_forward(const Model& m, const Bound& p, const BlockHandles& h, const Var& x, Index batch,
                  const Var& deltas, std::vector<Var>* scale_states, Var* attention) {
  const auto& cfg = m.cfg;
  const Index H = cfg.heads, P = cfg.head_dim, N = cfg.state_dim, K = cfg.groups();
  if (x.cols() != cfg.d_model) throw ParameterError("block_forward: input width must equal d_model");
  if (batch < 1 || x.rows() % batch != 0) throw ParameterError("block_forward: rows must be a multiple of the batch");
  if (deltas.cols() != K || (deltas.rows() != batch && deltas.rows() != 1))
    throw ParameterError("block_forward: deltas must be B x K or 1 x K");
  const Index T = x.rows() / batch;
  Tape& t = *x.tape();

  const Var v = rms_norm(x, p[h.norm1]);
  const Var xs = matmul(v, p[h.w_x]);
  const Var bt = matmul(v, p[h.w_b]);
  const Var ct = matmul(v, p[h.w_c]);
  const Var row_deltas = deltas.rows() == 1 || T == 1 ? deltas : engine::tile_rows(deltas, T);
  const Var A = -engine::exp(p[h.a_log]);
  const Var ones = t.constant(Matrix::Ones(1, P * N));

  std::vector<Index> scale_of(static_cast<std::size_t>(H), 0);
  for (std::size_t g = 0; g < m.groups.size(); ++g)
    for (const Index j : m.groups[g]) scale_of[static_cast<std::size_t>(j)] = static_cast<Index>(g);
  std::vector<Var> inputs, decays;
  for (Index j = 0; j < H; ++j) {
    const Index k = scale_of[static_cast<std::size_t>(j)];
    const Var a_bar = engine::exp(slice_cols(deltas, k, 1) * slice_cols(A, j, 1));
    decays.push_back(a_bar * ones);
    inputs.push_back(engine::rowwise_outer(slice_cols(xs, j * P, P), bt) * slice_cols(row_deltas, k, 1));
  }
  const Var states = linear_scan(concat_cols(inputs), concat_cols(decays), batch);
  std::vector<Var> head_states;
  for (Index j = 0; j < H; ++j) head_states.push_back(slice_cols(states, j * P * N, P * N));
  std::vector<Var> tokens, normed;
  for (const Var& s : scale_aggregate(head_states, m.groups)) {
    tokens.push_back(engine::rowwise_contract(s, ct));
    normed.push_back(rms_norm(tokens.back(), p[h.norm_s]));
  }
  const AttentionResult att = cross_scale_attention(normed, p[h.w_q], p[h.w_k], p[h.w_v]);
  if (scale_states != nullptr) *scale_states = tokens;
  if (attention != nullptr) *attention = att.weights;

  const Var fused = matmul(concat_cols(att.outputs), p[h.w_o]) + p[h.b_o];
  const Var mid = x + fused;
  const Var v2 = rms_norm(mid, p[h.norm2]);
  const Var gated = engine::silu(matmul(v2, p[h.w_1])) * matmul(v2, p[h.w_2]);
  return mid + matmul(gated, p[h.w_3]);
}

Var temporal_mean_pool(const Var& h, Index T) { return engine::mean_over_blocks(h, T); }

ForwardResult backbone_forward_with(const Model& m, const Bound& p, const Matrix& x, Index batch,
                                    const Var& deltas) {
  if (x.rows() == 0 || batch < 1) throw ParameterError("backbone_forward: empty input");
  if (x.rows() % batch != 0) throw ParameterError("backbone_forward: rows must be a multiple of the batch");
  if (x.cols() != m.cfg.d_in) throw ParameterError("backbone_forward: input width must equal d_in");
  const Index T = x.rows() / batch;
  Tape& t = *p[m.w_in].tape();
  ForwardResult r;
  r.deltas = deltas;
  Var h = matmul(t.constant(x), p[m.w_in]) + p[m.b_in];
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const bool last = l + 1 == m.blocks.size();
    h = block_forward(m, p, m.blocks[l], h, batch, deltas, last ? &r.scale_states : nullptr,
                      last ? &r.attention : nullptr);
    r.block_outputs.push_back(h);
  }
  r.hidden = rms_norm(h, p[m.norm_f]);
  r.z = temporal_mean_pool(r.hidden, T);
  r.prediction = matmul(r.z, p[m.w_head]) + p[m.b_head];
  if (m.w_recon) r.reconstruction = matmul(r.hidden, p[*m.w_recon]) + p[*m.b_recon];
  return r;
}

ForwardResult backbone_forward(const Model& m, const Bound& p, const Matrix& x, Index batch,
                               const SpectralContext* ctx) {
  std::optional<spectral::HyperOutput> hyper;
  const Var deltas = preset_deltas(m, p, batch, ctx, &hyper);
  ForwardResult r = backbone_forward_with(m, p, x, batch, deltas);
  r.hyper = hyper;
  return r;
}

Matrix pack_time_major(const std::vector<const Matrix*>& seqs) {
  if (seqs.empty()) throw ParameterError("pack_time_major: no sequences");
  const Index T = seqs.front()->rows(), d = seqs.front()->cols();
  const auto B = static_cast<Index>(seqs.size());
  Matrix out(T * B, d);
  for (Index b = 0; b < B; ++b) {
    const Matrix& s = *seqs[static_cast<std::size_t>(b)];
    if (s.rows() != T || s.cols() != d) throw ParameterError("pack_time_major: ragged batch");
    for (Index t = 0; t < T; ++t) out.row(t * B + b) = s.row(t);
  }
  return out;
}

Var all_a_log(const Model& m, const Bound& p) {
  std::vector<Var> parts;
  for (const auto& b : m.blocks) parts.push_back(p[b.a_log]);
  return concat_cols(parts);
}

double mean_log_abs_a(const Model& m) {
  double s = 0.0;
  Index n = 0;
  for (const auto& b : m.blocks) {
    s += m.params[b.a_log].value.array().exp().sum();
    n += m.params[b.a_log].value.size();
  }
  return std::log(s / static_cast<double>(n));
}

Var a_scale_loss(const Var& a_log, double a0, double lambda) {
  if (!(a0 > 0.0)) throw ParameterError("a_scale_loss: a0 must be positive");
  return lambda * engine::square(engine::log(engine::mean(engine::exp(a_log))) - std::log(a0));
}

double a_scale_loss(const std::vector<double>& a_log, double a0, double lambda) {
  if (!(a0 > 0.0)) throw ParameterError("a_scale_loss: a0 must be positive");
  double s = 0.0;
  for (const double a : a_log) s += std::exp(a);
  const double d = std::log(s / static_cast<double>(a_log.size())) - std::log(a0);
  return lambda * d * d;
}

std::pair<Matrix, RevinStats> revin_apply(const Matrix& window) {
  if (window.rows() < 1) throw ParameterError("revin_apply: empty window");
  RevinStats s;
  s.mean = window.colwise().mean();
  const Matrix centred = window.rowwise() - s.mean.row(0);
  s.scale = (centred.colwise().squaredNorm() / static_cast<double>(window.rows())).cwiseSqrt();
  s.scale = s.scale.cwiseMax(kRevinFloor);
  Matrix out = centred.array().rowwise() / s.scale.row(0).array();
  return {out, s};
}

Matrix revin_invert(const Matrix& y, const RevinStats& stats) {
  if (y.cols() != stats.mean.cols()) throw ParameterError("revin_invert: width mismatch");
  Matrix out = y.array().rowwise() * stats.scale.row(0).array();
  out.rowwise() += stats.mean.row(0);
  return out;
}

namespace {
constexpr char kMagic[8] = {'P', 'I', 'M', 'S', 'M', 'C', 'K', '1'};
constexpr int kSchema = 1;
}  // namespace

void save_checkpoint(const Model& m, const std::string& path) {
  nlohmann::json header;
  header["schema"] = kSchema;
  header["config"] = m.cfg.to_json();
  header["seed"] = m.seed;
  header["a0"] = m.a0;
  header["groups"] = m.groups;
  std::vector<double> fd(m.fixed_deltas.data(), m.fixed_deltas.data() + m.fixed_deltas.size());
  header["fixed_deltas"] = fd;
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : m.params) {
    tensors.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(p.value.size());
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : m.params) {
    // column-major, as stored by Eigen
    out.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * 8));
  }
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw DataError("not a checkpoint file: " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1ULL << 30)) throw DataError("corrupt checkpoint header: " + path);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(text);
  if (header.at("schema").get<int>() != kSchema) throw DataError("unsupported checkpoint schema in " + path);
  Model m = Model::create(ModelConfig::from_json(header.at("config")), header.at("seed").get<std::uint64_t>());
  m.a0 = header.at("a0").get<double>();
  const auto fd = header.at("fixed_deltas").get<std::vector<double>>();
  if (!fd.empty()) {
    m.fixed_deltas = Matrix(1, static_cast<Index>(fd.size()));
    for (std::size_t k = 0; k < fd.size(); ++k) m.fixed_deltas(0, static_cast<Index>(k)) = fd[k];
  }
  std::vector<double> blob;
  std::uint64_t total = 0;
  for (const auto& t : header.at("tensors")) total += t.at("rows").get<std::uint64_t>() * t.at("cols").get<std::uint64_t>();
  blob.resize(total);
  in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(total * 8));
  if (!in) throw DataError("truncated checkpoint: " + path);
  for (const auto& t : header.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto h = m.params.find(name);
    if (!h) throw DataError("checkpoint tensor '" + name + "' does not exist in the model");
    Matrix& v = m.params[*h].value;
    if (v.rows() != t.at("rows").get<Index>() || v.cols() != t.at("cols").get<Index>())
      throw DataError("checkpoint tensor '" + name + "' has the wrong shape");
    std::copy_n(blob.begin() + static_cast<std::ptrdiff_t>(t.at("offset").get<std::uint64_t>()), v.size(), v.data());
  }
  return m;
}

}  // namespace pimsm::msssm
