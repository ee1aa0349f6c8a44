#include "pimsm/train.hpp"

#include "pimsm/errors.hpp"
#include "pimsm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

namespace pimsm::train {

using engine::Bound;
using engine::Tape;

void LossWeights::validate() const {
  for (const double v : {w_fit, w_seam, lambda_delta, lambda_a, w_hyp, lambda_beta, drift})
    if (!(v >= 0.0) || !std::isfinite(v)) throw ParameterError("loss weights must be finite and non-negative");
  if (!(label_smoothing >= 0.0 && label_smoothing <= 1.0)) throw ParameterError("label_smoothing must lie in [0, 1]");
}

LossWeights LossWeights::without_aux() const {
  LossWeights w;
  w.w_fit = w.w_seam = w.lambda_delta = w.lambda_a = w.w_hyp = w.lambda_beta = w.drift = 0.0;
  w.label_smoothing = label_smoothing;
  return w;
}

nlohmann::json LossWeights::to_json() const {
  return {{"w_fit", w_fit},       {"w_seam", w_seam},           {"lambda_delta", lambda_delta},
          {"lambda_a", lambda_a}, {"w_hyp", w_hyp},             {"lambda_beta", lambda_beta},
          {"label_smoothing", label_smoothing}, {"drift", drift}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.w_fit = j.value("w_fit", w.w_fit);
  w.w_seam = j.value("w_seam", w.w_seam);
  w.lambda_delta = j.value("lambda_delta", w.lambda_delta);
  w.lambda_a = j.value("lambda_a", w.lambda_a);
  w.w_hyp = j.value("w_hyp", w.w_hyp);
  w.lambda_beta = j.value("lambda_beta", w.lambda_beta);
  w.label_smoothing = j.value("label_smoothing", w.label_smoothing);
  w.drift = j.value("drift", w.drift);
  w.validate();
  return w;
}

void MaskSpec::validate() const {
  if (!(point_prob >= 0.0 && point_prob <= 1.0) || !(span_fraction >= 0.0 && span_fraction <= 1.0))
    throw ParameterError("mask probabilities must lie in [0, 1]");
}

Matrix make_mask(Index T, Index d, const MaskSpec& spec, std::uint64_t stream) {
  spec.validate();
  if (T < 1 || d < 1) throw ParameterError("make_mask: empty shape");
  std::mt19937_64 rng(derive_seed(spec.seed, {0x3A5C, stream}));
  std::bernoulli_distribution point(spec.point_prob);
  Matrix m(T, d);
  for (Index c = 0; c < d; ++c)
    for (Index t = 0; t < T; ++t) m(t, c) = point(rng) ? 1.0 : 0.0;
  const auto len = static_cast<Index>(std::llround(spec.span_fraction * static_cast<double>(T)));
  if (len > 0) {
    std::uniform_int_distribution<Index> start(0, T - len);
    for (Index c = 0; c < d; ++c) m.col(c).segment(start(rng), len).setOnes();
  }
  return m;
}

namespace {

Matrix smoothed_targets(std::span<const int> labels, Index C, double eps) {
  if (C < 2) throw ParameterError("classification needs at least 2 classes");
  if (!(eps >= 0.0 && eps <= 1.0)) throw ParameterError("label smoothing must lie in [0, 1]");
  Matrix y = Matrix::Constant(static_cast<Index>(labels.size()), C, eps / static_cast<double>(C));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= C)
      throw DataError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) + " outside [0, " +
                      std::to_string(C) + ")");
    y(static_cast<Index>(i), labels[i]) += 1.0 - eps;
  }
  return y;
}

}  // namespace

double task_loss_classification(const Matrix& logits, std::span<const int> labels, double eps) {
  if (logits.rows() != static_cast<Index>(labels.size()) || logits.rows() == 0)
    throw ParameterError("task loss: one label per logit row required");
  const Matrix y = smoothed_targets(labels, logits.cols(), eps);
  double loss = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    loss -= (y.row(i).array() * (logits.row(i).array() - lse)).sum();
  }
  return loss / static_cast<double>(logits.rows());
}

Var task_loss_classification(const Var& logits, std::span<const int> labels, double eps) {
  if (logits.rows() != static_cast<Index>(labels.size()) || logits.rows() == 0)
    throw ParameterError("task loss: one label per logit row required");
  const Matrix y = smoothed_targets(labels, logits.cols(), eps);
  const Var lp = engine::log_softmax_rows(logits);
  return -engine::sum(lp * logits.tape()->constant(y)) / static_cast<double>(logits.rows());
}

double extreme_beta_loss(std::span<const double> betas, double lo, double hi, double margin) {
  double s = 0.0;
  for (const double b : betas) {
    const double up = std::max(0.0, b - (hi - margin)), down = std::max(0.0, (lo + margin) - b);
    s += up * up + down * down;
  }
  return s;
}

Var extreme_beta_loss(const Var& betas, double lo, double hi, double margin) {
  const Var up = engine::relu(betas - (hi - margin));
  const Var down = engine::relu((lo + margin) - betas);
  return engine::sum(engine::square(up) + engine::square(down)) / static_cast<double>(betas.rows());
}

double hyp_alignment_loss(const spectral::PiecewiseFit& a, const spectral::PiecewiseFit& b) {
  if (a.K != b.K || a.knees.size() != b.knees.size() || a.betas.size() != b.betas.size())
    throw ParameterError("hyp_alignment_loss: fits must share K");
  double s = 0.0;
  for (std::size_t k = 0; k < a.knees.size(); ++k) {
    const double d = std::log(a.knees[k]) - std::log(b.knees[k]);
    s += d * d;
  }
  for (std::size_t k = 0; k < a.betas.size(); ++k) s += (a.betas[k] - b.betas[k]) * (a.betas[k] - b.betas[k]);
  return s / static_cast<double>(2 * a.K - 1);
}

Var hyp_alignment_loss(const spectral::HyperOutput& out, const Matrix& teacher_log_knees, const Matrix& teacher_betas) {
  if (teacher_log_knees.rows() != out.log_knees.rows() || teacher_log_knees.cols() != out.log_knees.cols() ||
      teacher_betas.rows() != out.betas.rows() || teacher_betas.cols() != out.betas.cols())
    throw ParameterError("hyp_alignment_loss: fits must share K and batch");
  Tape& t = *out.betas.tape();
  const double n = static_cast<double>(out.betas.rows() * (out.betas.cols() + out.log_knees.cols()));
  const Var beta_sq = engine::sum(engine::square(out.betas - t.constant(teacher_betas)));
  if (out.log_knees.cols() == 0) return beta_sq / n;
  return (engine::sum(engine::square(out.log_knees - t.constant(teacher_log_knees))) + beta_sq) / n;
}

Var linear_cka(const Var& x, const Var& y) {
  if (x.rows() != y.rows()) throw ParameterError("linear_cka: row counts differ");
  if (x.rows() < 2) throw ParameterError("linear_cka: need at least 2 rows");
  const Var xc = x - engine::col_mean(x);
  const Var yc = y - engine::col_mean(y);
  const Var xty = engine::matmul(engine::transpose(xc), yc);
  const Var xtx = engine::matmul(engine::transpose(xc), xc);
  const Var yty = engine::matmul(engine::transpose(yc), yc);
  const Var den = engine::sqrt(engine::sum(engine::square(xtx))) * engine::sqrt(engine::sum(engine::square(yty)));
  if (!(den.scalar() > 0.0)) return x.tape()->constant(0.0);
  return engine::sum(engine::square(xty)) / den;
}

Var drift_intervention_loss(const Var& z_full, const Var& z_trunc, double lambda) {
  if (z_full.rows() < 2) throw ParameterError("drift_intervention_loss: batch must hold at least 2 items");
  return lambda * (1.0 - linear_cka(z_full, z_trunc));
}

LossComponents& LossComponents::operator+=(const LossComponents& o) {
  task += o.task;
  fit += o.fit;
  seam += o.seam;
  delta += o.delta;
  a_scale += o.a_scale;
  hyp += o.hyp;
  beta += o.beta;
  drift += o.drift;
  total += o.total;
  return *this;
}

LossComponents LossComponents::scaled(double s) const {
  LossComponents c = *this;
  c.task *= s;
  c.fit *= s;
  c.seam *= s;
  c.delta *= s;
  c.a_scale *= s;
  c.hyp *= s;
  c.beta *= s;
  c.drift *= s;
  c.total *= s;
  return c;
}

LossResult total_loss(const LossInputs& in, const LossWeights& w, bool aux) {
  w.validate();
  if (!in.task.valid()) throw ParameterError("total_loss: task term missing");
  Tape& t = *in.task.tape();
  LossResult r;
  r.parts.task = in.task.scalar();
  Var total = in.task;
  if (aux) {
    const Var zero = t.constant(0.0);
    const Var fit = in.fit ? w.w_fit * in.fit->fit : zero;
    const Var seam = in.fit ? w.w_seam * in.fit->seam : zero;
    const Var delta =
        in.deltas.valid() ? scalemap::delta_anchor_loss(in.deltas, in.acquisition_step, w.lambda_delta) : zero;
    const Var a_scale = in.a_log.valid() ? msssm::a_scale_loss(in.a_log, in.a0, w.lambda_a) : zero;
    Var hyp = zero, beta = zero;
    if (in.hyper) {
      if (in.teacher_log_knees != nullptr && in.teacher_betas != nullptr)
        hyp = w.w_hyp * hyp_alignment_loss(*in.hyper, *in.teacher_log_knees, *in.teacher_betas);
      beta = w.lambda_beta * extreme_beta_loss(in.hyper->betas);
    }
    const Var drift = in.z_full.valid() && in.z_trunc.valid() && w.drift > 0.0
                          ? drift_intervention_loss(in.z_full, in.z_trunc, w.drift)
                          : zero;
    r.parts.fit = fit.scalar();
    r.parts.seam = seam.scalar();
    r.parts.delta = delta.scalar();
    r.parts.a_scale = a_scale.scalar();
    r.parts.hyp = hyp.scalar();
    r.parts.beta = beta.scalar();
    r.parts.drift = drift.scalar();
    total = total + fit + seam + delta + a_scale + hyp + beta + drift;
  }
  r.total = total;
  r.parts.total = total.scalar();
  return r;
}

PreparedSet prepare(const signalgen::LabeledSequenceSet& data, const spectral::HyperNetConfig& hyper, Index window) {
  data.validate();
  if (data.size() == 0) throw DataError("prepare: empty dataset");
  const Index T = data.length(), d = data.channels();
  if (window < 0 || window > T) throw ParameterError("prepare: window must lie in [0, T]");
  const Index w = window == 0 ? T : window;
  PreparedSet s;
  s.acquisition_step = data.acquisition_step;
  s.labels = data.class_labels;
  s.features.resize(static_cast<Index>(data.size()), static_cast<Index>(hyper.feature_bins));
  s.teacher_log_knees.resize(static_cast<Index>(data.size()), hyper.K - 1);
  s.teacher_betas.resize(static_cast<Index>(data.size()), hyper.K);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Matrix& x = data.sequences[i];
    s.inputs.push_back(x.topRows(w));
    if (!data.targets.empty()) {
      const Matrix& y = data.targets[i];
      Matrix flat(1, y.size());
      for (Index h = 0; h < y.rows(); ++h)
        for (Index c = 0; c < y.cols(); ++c) flat(0, h * y.cols() + c) = y(h, c);
      s.targets.push_back(flat);
    }
    std::vector<spectral::Spectrum> ch;
    for (Index c = 0; c < d; ++c) ch.push_back(spectral::periodogram(x, c, hyper.f_min, hyper.f_max));
    const Index n = static_cast<Index>(ch.front().size());
    if (i == 0) {
      s.log_freqs.resize(1, n);
      for (Index k = 0; k < n; ++k) s.log_freqs(0, k) = std::log(ch.front().freqs[static_cast<std::size_t>(k)]);
    }
    Matrix lp(d, n);
    for (Index c = 0; c < d; ++c)
      for (Index k = 0; k < n; ++k)
        lp(c, k) = std::log(std::max(ch[static_cast<std::size_t>(c)].power[static_cast<std::size_t>(k)], 1e-300));
    s.log_power.push_back(lp);
    const auto cons = spectral::consensus_spectrum(ch);
    s.features.row(static_cast<Index>(i)) = spectral::spectral_features(cons, hyper);
    const auto teacher = spectral::clamp_exponents(spectral::init_fit(cons, hyper.K));
    for (int k = 0; k + 1 < hyper.K; ++k)
      s.teacher_log_knees(static_cast<Index>(i), k) = std::log(teacher.knees[static_cast<std::size_t>(k)]);
    for (int k = 0; k < hyper.K; ++k) s.teacher_betas(static_cast<Index>(i), k) = teacher.betas[static_cast<std::size_t>(k)];
    s.consensus.push_back(cons);
  }
  return s;
}

PreparedSet subset(const PreparedSet& s, std::span<const std::size_t> idx) {
  PreparedSet o;
  o.acquisition_step = s.acquisition_step;
  o.log_freqs = s.log_freqs;
  o.features.resize(static_cast<Index>(idx.size()), s.features.cols());
  o.teacher_log_knees.resize(static_cast<Index>(idx.size()), s.teacher_log_knees.cols());
  o.teacher_betas.resize(static_cast<Index>(idx.size()), s.teacher_betas.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const std::size_t i = idx[r];
    if (i >= s.size()) throw ParameterError("subset: index out of range");
    const auto ri = static_cast<Index>(r), si = static_cast<Index>(i);
    o.inputs.push_back(s.inputs[i]);
    if (!s.labels.empty()) o.labels.push_back(s.labels[i]);
    if (!s.targets.empty()) o.targets.push_back(s.targets[i]);
    o.features.row(ri) = s.features.row(si);
    o.log_power.push_back(s.log_power[i]);
    o.teacher_log_knees.row(ri) = s.teacher_log_knees.row(si);
    o.teacher_betas.row(ri) = s.teacher_betas.row(si);
    o.consensus.push_back(s.consensus[i]);
  }
  return o;
}

msssm::SpectralContext batch_context(const PreparedSet& data, std::span<const std::size_t> idx) {
  msssm::SpectralContext ctx;
  const auto B = static_cast<Index>(idx.size());
  const Index d = data.log_power.front().rows(), n = data.log_freqs.cols();
  ctx.features.resize(B, data.features.cols());
  ctx.log_freqs = data.log_freqs;
  ctx.log_power.resize(d * B, n);
  for (Index b = 0; b < B; ++b) {
    const std::size_t i = idx[static_cast<std::size_t>(b)];
    ctx.features.row(b) = data.features.row(static_cast<Index>(i));
    for (Index c = 0; c < d; ++c) ctx.log_power.row(c * B + b) = data.log_power[i].row(c);
  }
  return ctx;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"model", model.to_json()},
          {"weights", weights.to_json()},
          {"optim",
           {{"lr", optim.lr},
            {"weight_decay", optim.weight_decay},
            {"beta1", optim.beta1},
            {"beta2", optim.beta2},
            {"eps", optim.eps},
            {"clip_norm", optim.clip_norm},
            {"min_lr", optim.min_lr}}},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"warmup_fraction", warmup_fraction},
          {"seed", seed},
          {"aux_terms", aux_terms},
          {"window", window},
          {"drift_window", drift_window},
          {"pretrain", pretrain},
          {"mask", {{"point_prob", mask.point_prob}, {"span_fraction", mask.span_fraction}, {"seed", mask.seed}}},
          {"patience", patience}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("model")) c.model = msssm::ModelConfig::from_json(j.at("model"));
  if (j.contains("weights")) c.weights = LossWeights::from_json(j.at("weights"));
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    c.optim.lr = o.value("lr", c.optim.lr);
    c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
    c.optim.beta1 = o.value("beta1", c.optim.beta1);
    c.optim.beta2 = o.value("beta2", c.optim.beta2);
    c.optim.eps = o.value("eps", c.optim.eps);
    c.optim.clip_norm = o.value("clip_norm", c.optim.clip_norm);
    c.optim.min_lr = o.value("min_lr", c.optim.min_lr);
  }
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.seed = j.value("seed", c.seed);
  c.aux_terms = j.value("aux_terms", c.aux_terms);
  c.window = j.value("window", c.window);
  c.drift_window = j.value("drift_window", c.drift_window);
  c.pretrain = j.value("pretrain", c.pretrain);
  if (j.contains("mask")) {
    const auto& m = j.at("mask");
    c.mask.point_prob = m.value("point_prob", c.mask.point_prob);
    c.mask.span_fraction = m.value("span_fraction", c.mask.span_fraction);
    c.mask.seed = m.value("seed", c.mask.seed);
  }
  c.patience = j.value("patience", c.patience);
  if (c.epochs == 0 || c.batch_size == 0) throw ParameterError("epochs and batch_size must be positive");
  if (!(c.warmup_fraction >= 0.0 && c.warmup_fraction <= 1.0)) throw ParameterError("warmup_fraction must lie in [0, 1]");
  c.mask.validate();
  return c;
}

std::string metric_log_csv(const std::vector<EpochRecord>& log) {
  std::ostringstream os;
  os << std::setprecision(17);
  const std::size_t K = log.empty() ? 0 : log.front().deltas.size();
  os << "epoch,split,metric,task,fit,seam,delta,a_scale,hyp,beta,drift,total";
  for (std::size_t k = 0; k < K; ++k) os << ",delta_" << k + 1;
  os << ",mean_log_abs_a\n";
  for (const auto& r : log) {
    const auto& l = r.loss;
    os << r.epoch << ',' << r.split << ',' << r.metric << ',' << l.task << ',' << l.fit << ',' << l.seam << ','
       << l.delta << ',' << l.a_scale << ',' << l.hyp << ',' << l.beta << ',' << l.drift << ',' << l.total;
    for (const double d : r.deltas) os << ',' << d;
    os << ',' << r.mean_log_abs_a << '\n';
  }
  return os.str();
}

void write_metric_log(const std::vector<EpochRecord>& log, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write metric log '" + path + "'");
  f << metric_log_csv(log);
}

namespace {

std::vector<const Matrix*> gather(const std::vector<Matrix>& v, std::span<const std::size_t> idx) {
  std::vector<const Matrix*> out;
  for (const std::size_t i : idx) out.push_back(&v[i]);
  return out;
}

std::vector<int> gather_labels(const PreparedSet& s, std::span<const std::size_t> idx) {
  std::vector<int> out;
  for (const std::size_t i : idx) out.push_back(s.labels.at(i));
  return out;
}

Matrix gather_targets(const PreparedSet& s, std::span<const std::size_t> idx) {
  Matrix y(static_cast<Index>(idx.size()), s.targets.at(idx.front()).cols());
  for (std::size_t r = 0; r < idx.size(); ++r) y.row(static_cast<Index>(r)) = s.targets.at(idx[r]);
  return y;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Index>(idx.size()), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Index>(r)) = m.row(static_cast<Index>(idx[r]));
  return out;
}

void check_dataset(const msssm::ModelConfig& cfg, const PreparedSet& s) {
  if (s.size() == 0) throw DataError("empty dataset");
  if (s.inputs.front().cols() != cfg.d_in) throw DataError("dataset channel count differs from the model's d_in");
  if (cfg.task == msssm::TaskKind::Classification && s.labels.size() != s.size())
    throw DataError("classification needs one label per sequence");
  if (cfg.task == msssm::TaskKind::Forecast && s.targets.size() != s.size())
    throw DataError("forecasting needs one target per sequence");
}

std::vector<Matrix> truncated(const std::vector<const Matrix*>& seqs, Index w) {
  std::vector<Matrix> out;
  for (const Matrix* s : seqs) out.push_back(s->topRows(std::min(w, s->rows())));
  return out;
}

std::string describe(const LossComponents& c) {
  std::ostringstream os;
  os << std::setprecision(10) << "task=" << c.task << " fit=" << c.fit << " seam=" << c.seam << " delta=" << c.delta
     << " a_scale=" << c.a_scale << " hyp=" << c.hyp << " beta=" << c.beta << " drift=" << c.drift
     << " total=" << c.total;
  return os.str();
}

double accuracy(const Matrix& logits, std::span<const int> labels) {
  std::size_t hit = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    if (arg == labels[static_cast<std::size_t>(i)]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(logits.rows());
}

}  // namespace

Var masked_pretrain_loss(const msssm::Model& m, const Bound& p, const std::vector<const Matrix*>& seqs,
                         const std::vector<Matrix>& masks, const msssm::SpectralContext* ctx,
                         msssm::ForwardResult* fwd) {
  if (!m.w_recon) throw ParameterError("masked pretraining needs a reconstruction head");
  if (seqs.size() != masks.size() || seqs.empty()) throw ParameterError("masked_pretrain_loss: one mask per sequence");
  const auto B = static_cast<Index>(seqs.size());
  std::vector<const Matrix*> mp;
  for (const auto& mk : masks) mp.push_back(&mk);
  const Matrix x = msssm::pack_time_major(seqs);
  const Matrix mask = msssm::pack_time_major(mp);
  if (mask.rows() != x.rows() || mask.cols() != x.cols()) throw ParameterError("masked_pretrain_loss: mask shape");
  const Matrix xin = x.array() * (1.0 - mask.array());
  msssm::ForwardResult r = msssm::backbone_forward(m, p, xin, B, ctx);
  Tape& t = *p[m.w_in].tape();
  const double count = mask.sum();
  Var loss;
  if (count == 0.0) {
    std::cerr << "warning: fully unmasked batch, pretraining loss skipped\n";
    loss = t.constant(0.0);
  } else {
    loss = engine::sum(engine::abs(r.reconstruction - t.constant(x)) * t.constant(mask)) / count;
  }
  if (fwd != nullptr) *fwd = r;
  return loss;
}

Evaluation evaluate(const msssm::Model& m, const PreparedSet& data, std::size_t batch_size, double label_smoothing) {
  check_dataset(m.cfg, data);
  const bool cls = m.cfg.task == msssm::TaskKind::Classification;
  Evaluation ev;
  ev.z.resize(static_cast<Index>(data.size()), m.cfg.d_model);
  ev.deltas.resize(static_cast<Index>(data.size()), m.cfg.groups());
  double loss = 0.0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    Tape t;
    Bound p(t, m.params);
    const auto ctx = batch_context(data, idx);
    const auto r = msssm::backbone_forward(m, p, msssm::pack_time_major(gather(data.inputs, idx)),
                                           static_cast<Index>(idx.size()), &ctx);
    const Matrix& pred = r.prediction.value();
    if (ev.predictions.size() == 0) ev.predictions.resize(static_cast<Index>(data.size()), pred.cols());
    const auto b0 = static_cast<Index>(start), nb = static_cast<Index>(idx.size());
    ev.predictions.middleRows(b0, nb) = pred;
    ev.z.middleRows(b0, nb) = r.z.value();
    const Matrix& d = r.deltas.value();
    ev.deltas.middleRows(b0, nb) = d.rows() == 1 ? Matrix(d.replicate(nb, 1)) : d;
    if (cls) {
      const auto labels = gather_labels(data, idx);
      loss += task_loss_classification(pred, labels, label_smoothing) * static_cast<double>(nb);
    } else {
      loss += (pred - gather_targets(data, idx)).squaredNorm() / static_cast<double>(pred.cols());
    }
  }
  ev.task_loss = loss / static_cast<double>(data.size());
  if (cls) {
    ev.metric = accuracy(ev.predictions, data.labels);
  } else {
    ev.metric = ev.task_loss;
  }
  return ev;
}

TrainResult train_loop(const TrainConfig& cfg, const PreparedSet& train, const PreparedSet* val) {
  cfg.weights.validate();
  cfg.mask.validate();
  if (cfg.epochs == 0 || cfg.batch_size == 0) throw ParameterError("epochs and batch_size must be positive");
  msssm::ModelConfig mcfg = cfg.model;
  if (cfg.pretrain) mcfg.recon_head = true;
  check_dataset(mcfg, train);
  if (val != nullptr) check_dataset(mcfg, *val);
  const bool cls = mcfg.task == msssm::TaskKind::Classification;

  TrainResult res{msssm::Model::create(mcfg, cfg.seed), {}, {}, 0.0};
  msssm::Model& model = res.model;
  if (model.hyper) {
    // initial knees and betas from the offline fit of the pooled training spectrum
    const auto pooled = spectral::consensus_spectrum(train.consensus);
    model.hyper->init_from_fit(model.params, spectral::clamp_exponents(spectral::init_fit(pooled, mcfg.hyper.K)));
  }

  const std::size_t N = train.size();
  const std::size_t steps_per_epoch = (N + cfg.batch_size - 1) / cfg.batch_size;
  engine::AdamWConfig ocfg = cfg.optim;
  ocfg.total_steps = steps_per_epoch * cfg.epochs;
  ocfg.warmup_steps = static_cast<std::size_t>(std::llround(cfg.warmup_fraction * static_cast<double>(ocfg.total_steps)));
  engine::AdamW opt(model.params, ocfg);

  const Index T = train.inputs.front().rows();
  const Index drift_w = cfg.drift_window > 0 ? cfg.drift_window : (T + 7) / 8;
  const bool drift_on = cfg.aux_terms && cfg.weights.drift > 0.0;
  const bool lower_better = cfg.pretrain || !cls;
  double best = lower_better ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
  engine::ParameterSet best_params = model.params;
  std::size_t since_best = 0, step = 0;

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, {0x5F, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    LossComponents acc;
    Matrix delta_sum = Matrix::Zero(1, mcfg.groups());
    double metric_sum = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * cfg.batch_size, hi = std::min(N, lo + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      const auto B = static_cast<Index>(idx.size());
      const auto seqs = gather(train.inputs, idx);
      const auto ctx = batch_context(train, idx);
      Tape t;
      Bound p(t, model.params);

      LossInputs in;
      msssm::ForwardResult fwd;
      double batch_metric = 0.0;
      if (cfg.pretrain) {
        std::vector<Matrix> masks;
        for (const std::size_t i : idx)
          masks.push_back(make_mask(seqs.front()->rows(), seqs.front()->cols(), cfg.mask, epoch * N + i));
        in.task = masked_pretrain_loss(model, p, seqs, masks, &ctx, &fwd);
        batch_metric = in.task.scalar();
      } else {
        fwd = msssm::backbone_forward(model, p, msssm::pack_time_major(seqs), B, &ctx);
        if (cls) {
          const auto labels = gather_labels(train, idx);
          in.task = task_loss_classification(fwd.prediction, labels, cfg.weights.label_smoothing);
          batch_metric = accuracy(fwd.prediction.value(), labels);
        } else {
          in.task = engine::mean(engine::square(fwd.prediction - t.constant(gather_targets(train, idx))));
          batch_metric = in.task.scalar();
        }
      }
      in.deltas = fwd.deltas;
      in.a_log = msssm::all_a_log(model, p);
      in.a0 = model.a0;
      in.acquisition_step = mcfg.acquisition_step;
      const Matrix tk = gather_rows(train.teacher_log_knees, idx), tb = gather_rows(train.teacher_betas, idx);
      if (fwd.hyper) {
        in.hyper = fwd.hyper;
        in.fit = spectral::soft_fit_terms(*fwd.hyper, ctx.log_freqs, ctx.log_power, mcfg.hyper);
        in.teacher_log_knees = &tk;
        in.teacher_betas = &tb;
      }
      if (drift_on) {
        const auto short_seqs = truncated(seqs, drift_w);
        std::vector<const Matrix*> sp;
        for (const auto& m : short_seqs) sp.push_back(&m);
        const auto tr = msssm::backbone_forward_with(model, p, msssm::pack_time_major(sp), B, fwd.deltas);
        in.z_full = fwd.z;
        in.z_trunc = tr.z;
      }
      const LossResult lr = total_loss(in, cfg.weights, cfg.aux_terms);
      if (!std::isfinite(lr.parts.total))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                           ": " + describe(lr.parts));
      if (cfg.check_identity && std::abs(lr.parts.sum() - lr.parts.total) > 1e-12)
        throw ContractError("logged loss components do not sum to the total: " + describe(lr.parts));
      t.backward(lr.total);
      opt.step(model.params, p.grads());
      res.steps.push_back({step++, lr.parts});
      acc += lr.parts;
      delta_sum += fwd.deltas.value().colwise().mean();
      metric_sum += batch_metric * static_cast<double>(B);
    }
    const double inv = 1.0 / static_cast<double>(steps_per_epoch);
    EpochRecord tr;
    tr.epoch = epoch;
    tr.split = "train";
    tr.metric = metric_sum / static_cast<double>(N);
    tr.loss = acc.scaled(inv);
    for (Index k = 0; k < delta_sum.cols(); ++k) tr.deltas.push_back(delta_sum(0, k) * inv);
    tr.mean_log_abs_a = msssm::mean_log_abs_a(model);
    res.log.push_back(tr);

    if (val != nullptr && !cfg.pretrain) {
      const Evaluation ev = evaluate(model, *val, 64, cfg.weights.label_smoothing);
      EpochRecord vr;
      vr.epoch = epoch;
      vr.split = "val";
      vr.metric = ev.metric;
      vr.loss.task = ev.task_loss;
      vr.loss.total = ev.task_loss;
      for (Index k = 0; k < ev.deltas.cols(); ++k) vr.deltas.push_back(ev.deltas.col(k).mean());
      vr.mean_log_abs_a = tr.mean_log_abs_a;
      res.log.push_back(vr);
      const bool improved = lower_better ? ev.metric < best : ev.metric > best;
      if (improved) {
        best = ev.metric;
        since_best = 0;
        if (cfg.patience > 0) best_params = model.params;
      } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
        break;
      }
    }
  }
  if (cfg.patience > 0 && val != nullptr && !cfg.pretrain) model.params = best_params;
  res.best_val_metric = best;
  return res;
}

}  // namespace pimsm::train
