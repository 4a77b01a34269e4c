#pragma once

// Joint VAE + flow objective, optimizer, EMA and collapse monitoring.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "simflow/flow.hpp"
#include "simflow/nn.hpp"
#include "simflow/rng.hpp"
#include "simflow/tensor.hpp"
#include "simflow/vae.hpp"

namespace simflow {

/// Differential entropy of N(0, sigma_bar^2 I_N):
///   N/2 log(2 pi sigma_bar^2) + N/2.
double entropy_constant(double sigma_bar, std::size_t n);

// ---------------------------------------------------------------------------
// Alignment (REPA-style) head

/// Projector from flow hidden states to teacher features, plus a frozen
/// teacher: a fixed random linear map of the ground-truth patch pixels,
/// L2-normalized per token.
class AlignmentHead {
 public:
  static constexpr std::size_t kDefaultFeatureDim = 32;

  AlignmentHead(std::size_t hidden_dim, std::size_t patch_pixels, std::size_t feature_dim,
                Rng& rng);

  std::size_t feature_dim() const { return feature_dim_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  /// Row-major [patch_pixels, feature_dim]; never trained.
  const std::vector<double>& teacher() const { return teacher_; }

  /// patches [B, D, P] -> unit-norm features [B, D, F] (constant).
  Tensor teacher_features(const Tensor& patches) const;
  /// hidden [B, D, H] -> [B, D, F] through the 3-layer projector.
  Tensor project(const Binding& p, const Tensor& hidden) const;

 private:
  std::size_t patch_pixels_;
  std::size_t feature_dim_;
  std::vector<double> teacher_;
  ParameterSet params_;
  Mlp projector_;
};

/// mean over tokens of 1 - cos(project(h_d), teacher_d).
Tensor alignment_loss(const AlignmentHead& head, const Binding& p, const Tensor& hidden,
                      const Tensor& teacher_features);
/// Same, for already projected features [B, D, F].
Tensor cosine_distance(const Tensor& projected, const Tensor& teacher_features);

// ---------------------------------------------------------------------------
// Joint objective

struct SimFlowModel {
  VaeModel vae;
  FlowStack flow;
  std::optional<AlignmentHead> align;
};

struct ObjectiveConfig {
  double reconstruction_weight = 1.0;
  double nf_weight = 1.0;
  double alignment_weight = 1.0;
  /// KL(q || N(0, I)) weight, learnable variance only.
  double kl_weight = 1e-5;
  NoiseMode noise_mode = NoiseMode::kAdditive;
  /// t for linear/slerp. Additive noise uses the VAE's sigma_bar.
  double perturb_t = 0.9;
  double class_drop = 0.1;
  /// Stop-gradient between the latent and the flow (frozen-encoder pattern).
  bool detach_flow = false;
  bool align = false;
  HiddenTap align_tap{};
};

struct LossBreakdown {
  double reconstruction_ll = 0.0;  // -mean squared error per pixel
  double nf_nll = 0.0;             // per latent dimension
  double alignment = 0.0;
  double kl = 0.0;                 // learnable variance only, per latent dimension
  double total = 0.0;
  /// Reported, never optimized. Per latent dimension; absent when the
  /// perturbation is deterministic.
  std::optional<double> entropy_constant;
};

struct ModelBindings {
  Binding vae;
  Binding flow;
  std::optional<Binding> projector;
};

struct JointLoss {
  Tensor total;
  Tensor mu;
  LossBreakdown values;
};

/// One evaluation of the combined objective on a batch. Classes are dropped
/// to the null label with probability class_drop (drawn from rng).
JointLoss joint_loss(const SimFlowModel& model, const ModelBindings& bindings,
                     const ObjectiveConfig& config, const Tensor& images,
                     std::span<const int> labels, Rng& rng);

// ---------------------------------------------------------------------------
// Optimizer

enum class LrSchedule { kConstant, kCosine };

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double max_grad_norm = 1.0;  // <= 0 disables clipping
  double ema_rate = 0.9999;
  /// Ramp the EMA decay as min(rate, (1 + t) / (10 + t)).
  bool ema_warmup = true;
  LrSchedule schedule = LrSchedule::kConstant;
  double lr_final = 1e-6;
  std::uint64_t cosine_start = 0;
  std::uint64_t total_steps = 0;

  double learning_rate(std::uint64_t step) const;
};

struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
  std::vector<std::vector<double>> ema;

  /// Zero moments and an EMA copy of the current values, for every parameter
  /// of every group (flattened in group order).
  static OptimizerState create(const AdamWConfig& config,
                               std::span<const ParameterSet* const> groups);
};

struct StepReport {
  double grad_norm = 0.0;
  double clip_scale = 1.0;
  double lr = 0.0;
};

/// AdamW with bias correction after global-norm clipping, then the EMA
/// update. `grads` is flat in the same order as OptimizerState::first.
/// A non-finite gradient throws NumericError and leaves everything untouched.
StepReport optimizer_step(OptimizerState& state, std::span<ParameterSet* const> groups,
                          const std::vector<std::vector<double>>& grads);

/// Copy the EMA shadow of `state` into parameter sets shaped like `groups`.
void load_ema(const OptimizerState& state, std::span<ParameterSet* const> groups);

// ---------------------------------------------------------------------------
// Collapse monitoring

/// Mean over dimensions of the across-batch standard deviation of mu [B, ...].
double collapse_metric(const Tensor& mu);

class CollapseMonitor {
 public:
  CollapseMonitor() = default;
  CollapseMonitor(double threshold, std::size_t window);

  /// Records (step, metric); returns whether the collapse flag is set. Steps
  /// must be strictly increasing.
  bool update(std::uint64_t step, double metric);

  bool collapsed() const { return collapsed_; }
  double threshold() const { return threshold_; }
  std::size_t window() const { return window_; }
  std::size_t run_length() const { return run_; }
  const std::vector<std::pair<std::uint64_t, double>>& history() const { return history_; }

  /// Restores a monitor from its recorded history.
  static CollapseMonitor replay(double threshold, std::size_t window,
                                const std::vector<std::pair<std::uint64_t, double>>& history);

 private:
  double threshold_ = 0.0;
  std::size_t window_ = 200;
  std::size_t run_ = 0;
  bool collapsed_ = false;
  std::vector<std::pair<std::uint64_t, double>> history_;
};

// ---------------------------------------------------------------------------
// Training state

struct TrainState {
  SimFlowModel model;
  OptimizerState optimizer;
  CollapseMonitor monitor;
  Rng rng;
  LossBreakdown last;

  std::uint64_t step() const { return optimizer.step; }
  /// Parameter groups in optimizer order: vae, flow, projector (if any).
  std::vector<ParameterSet*> groups();
  std::vector<const ParameterSet*> groups() const;
};

struct StepResult {
  LossBreakdown loss;
  StepReport update;
  double collapse_metric = 0.0;
  bool collapsed = false;
};

/// One optimizer step on a batch. With `train_vae` false the autoencoder is
/// held fixed (constant binding).
StepResult train_step(TrainState& state, const ObjectiveConfig& config, const Tensor& images,
                      std::span<const int> labels, bool train_vae = true);

}  // namespace simflow
