#pragma once

// Multi-scale selective state-space backbone.
//
// Batches are laid out time-major: a batch of B sequences of length T with d
// channels is an (T*B) x d matrix whose row t*B + b holds step t of sequence b.

#include "pimsm/engine/ops.hpp"
#include "pimsm/engine/params.hpp"
#include "pimsm/hypernet.hpp"
#include "pimsm/scalemap.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace pimsm::msssm {

using engine::ParamHandle;
using engine::Var;

/// pimsm: steps from the spectral hypernet; single-scale: one learnable step
/// shared by every head; learnable-delta: K free learnable steps;
/// random-delta: K fixed log-uniform steps drawn from the seed.
enum class Preset { Pimsm, SingleScale, LearnableDelta, RandomDelta };
std::string to_string(Preset p);
Preset preset_from_string(const std::string& s);

enum class TaskKind { Classification, Forecast };

struct ModelConfig {
  Index d_in = 1;
  Index d_model = 32;
  Index d_inter = 64;
  Index layers = 2;
  Index heads = 6;
  Index scales = 3;
  Index head_dim = 8;   // P, width of each head's input stream
  Index state_dim = 8;  // N, length of B_t and C_t
  TaskKind task = TaskKind::Classification;
  Index classes = 2;
  Index horizon = 1;        // forecast steps
  bool recon_head = false;  // per-timestep decoder for masked pretraining
  Preset preset = Preset::Pimsm;
  double acquisition_step = 1.0;
  scalemap::MapOptions map;
  spectral::HyperNetConfig hyper;

  void validate() const;
  /// Scale groups actually used by the backbone (1 for single-scale).
  [[nodiscard]] Index groups() const { return preset == Preset::SingleScale ? 1 : scales; }
  [[nodiscard]] nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  /// d_model 320, d_inter 1024, nine blocks.
  static ModelConfig paper_scale();
};

struct HeadInit {
  std::vector<double> A_log;          // per head
  std::vector<Index> scale_of_head;   // 0-based scale group
  double a0 = 0.0;                    // mean exp(A_log) at init
};

/// tau ~ LogUniform(1, 100) * step, A_log = log(1 / tau). Heads are grouped
/// contiguously, H / K per scale.
HeadInit init_heads(Index H, Index K, double acquisition_step, std::uint64_t seed);

/// Contiguous partition of H heads into K groups.
std::vector<std::vector<Index>> head_groups(Index H, Index K);

struct Discretized {
  double A_bar;     // exp(delta * A)
  double B_factor;  // delta
};
Discretized discretize(double A, double delta);

/// Reference recurrence for one head on one sequence: x is T x P, B and C are
/// T x N. Returns y (T x P) with h_t = exp(delta A) h_{t-1} + delta x_t B_t^T
/// and y_t = h_t C_t.
Matrix ssm_scan(double A, double delta, const Matrix& x, const Matrix& B, const Matrix& C);

struct BlockHandles {
  ParamHandle norm1, w_x, w_b, w_c, a_log, norm_s, w_q, w_k, w_v, w_o, b_o, norm2, w_1, w_2, w_3;
};

struct Model {
  ModelConfig cfg;
  engine::ParameterSet params;
  ParamHandle w_in = 0, b_in = 0, norm_f = 0, w_head = 0, b_head = 0;
  std::optional<ParamHandle> w_recon, b_recon;
  std::optional<ParamHandle> delta_logits;  // learnable-delta and single-scale
  std::vector<BlockHandles> blocks;
  std::optional<spectral::HyperNet> hyper;
  std::vector<std::vector<Index>> groups;
  Matrix fixed_deltas;  // random-delta preset, 1 x K
  double a0 = 0.0;
  std::uint64_t seed = 0;

  static Model create(const ModelConfig& cfg, std::uint64_t seed);
};

/// Spectral input for the pimsm preset: features are B x bins; log_power has
/// one row per (channel, sequence), channel-major.
struct SpectralContext {
  Matrix features;
  Matrix log_freqs;
  Matrix log_power;
};

struct ForwardResult {
  Var deltas;                    // B x K or 1 x K, non-increasing per row
  std::optional<spectral::HyperOutput> hyper;
  std::vector<Var> block_outputs;  // (T*B) x d_model per block
  std::vector<Var> scale_states;   // last block, (T*B) x P per scale
  Var attention;                   // last block, (T*B) x (K*K) row-wise weights
  Var hidden;                      // final normalised sequence
  Var z;                           // B x d_model temporal mean
  Var prediction;                  // B x classes, or B x (horizon*d_in)
  Var reconstruction;              // (T*B) x d_in when the decoder exists
};

/// Steps for a batch of `batch` sequences under the model's preset.
Var preset_deltas(const Model& m, const engine::Bound& p, Index batch, const SpectralContext* ctx,
                  std::optional<spectral::HyperOutput>* hyper_out = nullptr);

ForwardResult backbone_forward(const Model& m, const engine::Bound& p, const Matrix& x, Index batch,
                               const SpectralContext* ctx);

/// Same, with steps supplied by the caller (B x K or 1 x K).
ForwardResult backbone_forward_with(const Model& m, const engine::Bound& p, const Matrix& x, Index batch,
                                    const Var& deltas);

// Building blocks, exposed for testing.

Var rms_norm(const Var& x, const Var& gain, double eps = 1e-6);

/// h_t = decay * h_{t-1} + u_t over time-major rows, unrolled on the tape.
/// decay is B x C or 1 x C.
Var linear_scan(const Var& u, const Var& decay, Index batch);

/// Mean of the member heads' states per group; head_states[j] is R x S.
std::vector<Var> scale_aggregate(const std::vector<Var>& head_states, const std::vector<std::vector<Index>>& groups);

struct AttentionResult {
  std::vector<Var> outputs;  // per scale token, R x P
  Var weights;               // R x (K*K), row k*K + k' blocks
};
/// Single-head attention across the scale tokens at each row.
AttentionResult cross_scale_attention(const std::vector<Var>& tokens, const Var& w_q, const Var& w_k,
                                      const Var& w_v);

Var block_forward(const Model& m, const engine::Bound& p, const BlockHandles& h, const Var& x, Index batch,
                  const Var& deltas, std::vector<Var>* scale_states = nullptr, Var* attention = nullptr);

/// Mean over the T time blocks of a time-major sequence.
Var temporal_mean_pool(const Var& h, Index T);

/// Stacks sequences (each T x d) into a time-major (T*B) x d matrix.
Matrix pack_time_major(const std::vector<const Matrix*>& seqs);

/// 1 x H row of all blocks' A_log values.
Var all_a_log(const Model& m, const engine::Bound& p);
/// log of the mean |A| over all heads and blocks.
double mean_log_abs_a(const Model& m);

/// lambda * (log mean exp(A_log) - log a0)^2
Var a_scale_loss(const Var& a_log, double a0, double lambda);
double a_scale_loss(const std::vector<double>& a_log, double a0, double lambda);

struct RevinStats {
  Matrix mean;   // 1 x d
  Matrix scale;  // 1 x d, floored
};
inline constexpr double kRevinFloor = 1e-5;
/// Per-variable mean / population std over time; returns the normalised window.
std::pair<Matrix, RevinStats> revin_apply(const Matrix& window);
Matrix revin_invert(const Matrix& y, const RevinStats& stats);

/// Single-file checkpoint: magic, header length, JSON header, raw tensors.
void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace pimsm::msssm
