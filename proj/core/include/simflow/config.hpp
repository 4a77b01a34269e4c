#pragma once

// Experiment configuration: flat `key = value` text with `#` comments.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "simflow/flow.hpp"
#include "simflow/objective.hpp"
#include "simflow/sampling.hpp"
#include "simflow/vae.hpp"

namespace simflow {

struct ExperimentConfig {
  // run
  std::uint64_t seed = 0;
  std::uint64_t steps = 2000;
  std::size_t batch_size = 64;
  std::string dataset = "toy-shapes";
  std::string dataset_format = "auto";  // auto | builtin | csv | pgm
  std::size_t dataset_size = 2048;      // builtin generators only
  std::string out = "run";
  std::uint64_t checkpoint_interval = 0;  // 0: final checkpoint only
  bool abort_on_collapse = false;
  std::size_t eval_batches = 4;

  // autoencoder
  std::size_t patch_size = 2;
  std::size_t token_dim = 2;
  double sigma_bar = 0.5;
  std::string variance_mode = "fixed";
  bool encoder_layernorm = false;
  std::vector<std::size_t> encoder_hidden = {32};
  std::vector<std::size_t> decoder_hidden = {32};
  bool vae_identity = false;
  bool train_vae = true;

  // flow
  std::size_t num_blocks = 4;
  std::vector<std::size_t> layers_per_block = {1, 1, 1, 2};
  std::size_t hidden_dim = 32;
  std::size_t num_heads = 2;
  std::size_t mlp_ratio = 2;
  bool conditional = true;

  // objective
  std::string noise_mode = "additive";
  double perturb_t = 0.9;
  double class_drop = 0.1;
  bool detach_flow = false;
  bool align = false;
  std::size_t align_block = 2;
  std::size_t align_layer = 0;
  std::size_t align_feature_dim = 32;
  double reconstruction_weight = 1.0;
  double nf_weight = 1.0;
  double alignment_weight = 1.0;
  double kl_weight = 1e-5;
  double collapse_factor = 0.05;
  std::size_t collapse_window = 200;

  // optimizer
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double max_grad_norm = 1.0;
  double ema_rate = 0.9999;
  bool ema_warmup = true;
  std::string lr_schedule = "constant";
  double lr_final = 1e-6;
  std::uint64_t cosine_start = 0;

  // sampling
  double guidance_w = 1.0;
  double gamma = 0.25;
  bool use_guidance_w = true;
  bool use_score_step = true;
  std::size_t sample_count = 16;
  int class_id = -1;

  bool operator==(const ExperimentConfig&) const = default;

  /// Throws std::invalid_argument naming the offending key.
  void validate() const;

  VaeConfig vae_config(const ImageShape& image) const;
  FlowConfig flow_config(const ImageShape& image, std::size_t num_classes) const;
  ObjectiveConfig objective_config() const;
  AdamWConfig adamw_config() const;
  GuidanceConfig guidance_config() const;
};

struct ConfigKey {
  std::string key;
  std::string doc;
};

/// Every recognized key with a one-line description, in serialization order.
const std::vector<ConfigKey>& config_keys();

/// Applies `key = value` lines onto `base`. Unknown keys, malformed lines and
/// bad values throw std::invalid_argument with the line number.
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {});
/// Sets one key; throws on unknown keys or bad values.
void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const ExperimentConfig& config, const std::string& key);
/// All keys, one per line, doubles with 17 significant digits.
std::string serialize_config(const ExperimentConfig& config);

/// FNV-1a 64 of the serialized config, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

/// Round-tripping text for a double: 17 significant digits.
std::string format_double(double v);

}  // namespace simflow
