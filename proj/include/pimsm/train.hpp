#pragma once

// Composite loss, supervised training, masked pretraining and the drift
// intervention objective.

#include "pimsm/engine/optim.hpp"
#include "pimsm/msssm.hpp"
#include "pimsm/signalgen.hpp"

#include "json.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pimsm::train {

using engine::Var;

struct LossWeights {
  double w_fit = 3.0;
  double w_seam = 0.1;
  double lambda_delta = 0.1;
  double lambda_a = 0.1;
  double w_hyp = 0.3;
  double lambda_beta = 0.5;
  double label_smoothing = 0.1;
  double drift = 0.0;  // intervention weight, off by default

  void validate() const;
  /// Every auxiliary weight zero; label smoothing kept.
  [[nodiscard]] LossWeights without_aux() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

struct MaskSpec {
  double point_prob = 0.10;     // independent per entry
  double span_fraction = 0.30;  // one contiguous span per channel
  std::uint64_t seed = 0;

  void validate() const;
};

/// 1 where masked, per T x d sequence.
Matrix make_mask(Index T, Index d, const MaskSpec& spec, std::uint64_t stream);

/// Cross-entropy against (1 - eps) one-hot + eps / C, batch mean.
double task_loss_classification(const Matrix& logits, std::span<const int> labels, double eps);
Var task_loss_classification(const Var& logits, std::span<const int> labels, double eps);

/// sum_k relu(beta_k - (hi - margin))^2 + relu((lo + margin) - beta_k)^2
double extreme_beta_loss(std::span<const double> betas, double lo = 0.3, double hi = 5.0, double margin = 0.2);
/// Row sums of the above, averaged over rows.
Var extreme_beta_loss(const Var& betas, double lo = 0.3, double hi = 5.0, double margin = 0.2);

/// Mean over the 2K-1 entries of squared log-knee and beta differences.
double hyp_alignment_loss(const spectral::PiecewiseFit& a, const spectral::PiecewiseFit& b);
Var hyp_alignment_loss(const spectral::HyperOutput& out, const Matrix& teacher_log_knees, const Matrix& teacher_betas);

/// Differentiable linear CKA between two n x p embedding batches.
Var linear_cka(const Var& x, const Var& y);
/// lambda * (1 - CKA(z_full, z_trunc)).
Var drift_intervention_loss(const Var& z_full, const Var& z_trunc, double lambda);

/// Weighted contributions; they add up to `total` in this order.
struct LossComponents {
  double task = 0.0, fit = 0.0, seam = 0.0, delta = 0.0, a_scale = 0.0, hyp = 0.0, beta = 0.0, drift = 0.0;
  double total = 0.0;

  [[nodiscard]] double sum() const { return task + fit + seam + delta + a_scale + hyp + beta + drift; }
  LossComponents& operator+=(const LossComponents& o);
  [[nodiscard]] LossComponents scaled(double s) const;
};

struct LossInputs {
  Var task;
  std::optional<spectral::SoftFitTerms> fit;
  std::optional<spectral::HyperOutput> hyper;
  const Matrix* teacher_log_knees = nullptr;
  const Matrix* teacher_betas = nullptr;
  Var deltas;
  Var a_log;
  double a0 = 1.0;
  double acquisition_step = 1.0;
  Var z_full, z_trunc;  // set both to enable the drift term
};

struct LossResult {
  Var total;
  LossComponents parts;
};

/// task + w_fit fit + w_seam seam + L_delta + L_A + w_hyp hyp + lambda_beta beta + drift.
/// With `aux` false only the task term is built.
LossResult total_loss(const LossInputs& in, const LossWeights& w, bool aux = true);

/// Precomputed per-sequence inputs: backbone windows and spectral context.
struct PreparedSet {
  std::vector<Matrix> inputs;        // T' x d backbone windows
  std::vector<int> labels;
  std::vector<Matrix> targets;       // flattened 1 x (H*d) forecast targets
  Matrix features;                   // N x bins
  std::vector<Matrix> log_power;     // per sequence, d x n
  Matrix log_freqs;                  // 1 x n
  Matrix teacher_log_knees;          // N x (K-1)
  Matrix teacher_betas;              // N x K
  std::vector<spectral::Spectrum> consensus;
  double acquisition_step = 1.0;

  [[nodiscard]] std::size_t size() const { return inputs.size(); }
};

/// Spectral context always comes from the full sequence; the backbone sees
/// the first `window` samples (0 = all).
PreparedSet prepare(const signalgen::LabeledSequenceSet& data, const spectral::HyperNetConfig& hyper, Index window);

/// Restricts a prepared set to the given indices.
PreparedSet subset(const PreparedSet& s, std::span<const std::size_t> idx);

struct TrainConfig {
  msssm::ModelConfig model;
  LossWeights weights;
  engine::AdamWConfig optim{.lr = 1e-2};
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double warmup_fraction = 0.1;
  std::uint64_t seed = 0;
  bool aux_terms = true;
  Index window = 0;           // backbone input length, 0 = full
  Index drift_window = 0;     // truncated view for the intervention, 0 = ceil(T/8)
  bool pretrain = false;      // masked reconstruction instead of the task loss
  MaskSpec mask;
  std::size_t patience = 0;   // early stopping on the validation metric, 0 = off
  bool check_identity = true; // assert logged components sum to the total

  [[nodiscard]] nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  double metric = 0.0;  // accuracy, MSE, or masked L1
  LossComponents loss;
  std::vector<double> deltas;  // mean over the split
  double mean_log_abs_a = 0.0;
};

struct StepRecord {
  std::size_t step = 0;
  LossComponents loss;
};

struct TrainResult {
  msssm::Model model;
  std::vector<EpochRecord> log;
  std::vector<StepRecord> steps;
  double best_val_metric = 0.0;
};

/// Writes the epoch log as CSV.
void write_metric_log(const std::vector<EpochRecord>& log, const std::string& path);
std::string metric_log_csv(const std::vector<EpochRecord>& log);

struct Evaluation {
  double metric = 0.0;  // accuracy for classification, MSE for forecasting
  double task_loss = 0.0;
  Matrix z;             // N x d_model embeddings
  Matrix deltas;        // N x K steps
  Matrix predictions;
};

Evaluation evaluate(const msssm::Model& m, const PreparedSet& data, std::size_t batch_size = 64,
                    double label_smoothing = 0.0);

/// Masked L1 reconstruction for one batch: mean |x - x_hat| over masked
/// positions; the spectral context stays unmasked.
Var masked_pretrain_loss(const msssm::Model& m, const engine::Bound& p, const std::vector<const Matrix*>& seqs,
                         const std::vector<Matrix>& masks, const msssm::SpectralContext* ctx,
                         msssm::ForwardResult* fwd = nullptr);

/// Batch spectral context for the given items.
msssm::SpectralContext batch_context(const PreparedSet& data, std::span<const std::size_t> idx);

TrainResult train_loop(const TrainConfig& cfg, const PreparedSet& train, const PreparedSet* val = nullptr);

}  // namespace pimsm::train
