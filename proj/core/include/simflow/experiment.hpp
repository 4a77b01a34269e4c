#pragma once

// Experiment runners behind the command line tool.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "simflow/checkpoint.hpp"
#include "simflow/config.hpp"
#include "simflow/dataset.hpp"
#include "simflow/objective.hpp"

namespace simflow {

/// CSV sink with header `step,metric,value`, LF endings, 17 significant digits.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  /// Appends to an existing nonempty file without repeating the header.
  explicit MetricsWriter(const std::string& path, bool append = false);

  bool is_open() const { return out_.is_open(); }
  void write(std::uint64_t step, const std::string& metric, double value);
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

/// Fresh state for a configuration: model initialized from `seed`, zero
/// moments, empty collapse history.
TrainState make_train_state(const ExperimentConfig& config, const ImageShape& image,
                            std::size_t num_classes);

Dataset load_dataset(const ExperimentConfig& config);

struct EvalResult {
  double nf_nll = 0.0;     // per latent dim, on perturbed latents as in training
  double recon_mse = 0.0;  // clean decode(mu)
  double collapse_metric = 0.0;
};

/// Deterministic evaluation over config.eval_batches fixed batches.
EvalResult evaluate(const TrainState& state, const ExperimentConfig& config, const Dataset& data,
                    bool use_ema);

/// Copy of the model with EMA weights loaded.
SimFlowModel ema_model(const TrainState& state);

enum class RunStatus { kCompleted, kCollapsed };

struct TrainResult {
  RunStatus status = RunStatus::kCompleted;
  std::uint64_t steps = 0;
  LossBreakdown last_loss;
  EvalResult eval;
  bool collapsed = false;
  double collapse_metric = 0.0;
  std::string checkpoint_path;
};

/// Runs steps until config.steps. Writes per-step metrics when `metrics` is
/// open and checkpoints to `checkpoint_path` every checkpoint_interval steps
/// (when the path is nonempty).
TrainResult train_loop(TrainState& state, const ExperimentConfig& config, const Dataset& data,
                       MetricsWriter* metrics, const std::string& checkpoint_path);

/// Full training run into config.out: metrics.csv, checkpoint.sflw,
/// config.txt. With `resume` the stored state continues; run-length fields
/// (steps, out, checkpoint_interval, abort_on_collapse) come from `config`.
TrainResult run_train(const ExperimentConfig& config, const std::optional<std::string>& resume = {});

struct SampleRequest {
  std::string checkpoint;
  std::string out_dir;
  std::optional<int> class_id;
  std::optional<std::size_t> count;
  std::optional<std::uint64_t> seed;
  std::optional<double> guidance_w;
  std::optional<double> gamma;
};

struct SampleResult {
  std::vector<std::string> files;
  std::string manifest;
};

SampleResult run_sample(const SampleRequest& request);

/// Stats CSV for a checkpoint over a dataset (defaults to the checkpoint's own
/// dataset). With `compare` both checkpoints are analyzed and rows are
/// prefixed "a." and "b.".
void run_analyze(const std::string& checkpoint, const std::optional<std::string>& dataset,
                 const std::string& out_path, const std::optional<std::string>& compare = {});

struct AblationRow {
  std::string name;
  bool ok = false;
  std::string error;
  double nf_nll = 0.0;
  double recon_mse = 0.0;
  bool collapsed = false;
  double collapse_metric = 0.0;
};

/// Matrix text: base `key = value` lines, then `[name]` sections of overrides.
std::vector<std::pair<std::string, ExperimentConfig>> parse_ablation_matrix(
    const std::string& text, const ExperimentConfig& base = {});

/// Trains every entry into <out>/<name>/ and writes <out>/ablation.csv.
std::vector<AblationRow> run_ablation(const std::vector<std::pair<std::string, ExperimentConfig>>& matrix,
                                      const std::string& out_dir);

struct VerifyCheck {
  std::string name;
  bool pass = false;
  double value = 0.0;
  double tolerance = 0.0;
};

/// Oracle suite against a checkpoint: invertibility, numeric-Jacobian log
/// determinant, joint-loss gradients by finite differences.
std::vector<VerifyCheck> run_verify(const std::string& checkpoint, std::uint64_t seed = 0);

}  // namespace simflow
