#pragma once

// Patch-token autoencoder with a fixed (or, for ablations, learned) latent
// variance. Images are [B, H, W, C] tensors; the encoder maps every
// non-overlapping patch to one latent token with a shared MLP, and the decoder
// maps tokens back to patch pixels.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "simflow/nn.hpp"
#include "simflow/rng.hpp"
#include "simflow/tensor.hpp"

namespace simflow {

enum class VarianceMode { kFixed, kLearnable };
enum class NoiseMode { kNone, kLinear, kSlerp, kAdditive };

std::string to_string(VarianceMode mode);
std::string to_string(NoiseMode mode);
VarianceMode parse_variance_mode(const std::string& text);
NoiseMode parse_noise_mode(const std::string& text);

struct ImageShape {
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t channels = 1;

  std::size_t pixels() const { return height * width * channels; }
  bool operator==(const ImageShape&) const = default;
};

struct VaeConfig {
  ImageShape image;
  std::size_t patch_size = 2;
  std::size_t token_dim = 2;
  VarianceMode variance_mode = VarianceMode::kFixed;
  double sigma_bar = 0.5;
  bool encoder_layernorm = false;
  std::vector<std::size_t> encoder_hidden = {32};
  std::vector<std::size_t> decoder_hidden = {32};
  /// Encoder and decoder are the identity on patch pixels (no parameters);
  /// needs patch_pixels() == token_dim.
  bool identity = false;

  void validate() const;
  std::size_t grid_rows() const { return image.height / patch_size; }
  std::size_t grid_cols() const { return image.width / patch_size; }
  std::size_t token_count() const { return grid_rows() * grid_cols(); }
  std::size_t patch_pixels() const { return patch_size * patch_size * image.channels; }
  std::size_t latent_size() const { return token_count() * token_dim; }
};

struct Encoding {
  Tensor mu;                      // [B, D, C]
  std::optional<Tensor> log_var;  // learnable mode only
};

class VaeModel {
 public:
  VaeModel(const VaeConfig& config, Rng& rng);

  const VaeConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// [B, H, W, C] -> [B, D, P] (row-major patch grid). Not differentiable.
  Tensor patchify(const Tensor& images) const;
  /// Inverse of patchify; returns a detached [B, H, W, C] tensor.
  Tensor unpatchify(const Tensor& patches) const;

  Encoding encode(const Binding& p, const Tensor& images) const;
  /// Latents [B, D, C] -> patch reconstruction [B, D, P].
  Tensor decode(const Binding& p, const Tensor& x) const;
  /// Latents -> images [B, H, W, C] (detached).
  Tensor decode_images(const Binding& p, const Tensor& x) const;

  Encoding encode(const Tensor& images) const { return encode(Binding::constant(params_), images); }
  Tensor decode(const Tensor& x) const { return decode(Binding::constant(params_), x); }

 private:
  void check_images(const Tensor& images) const;

  VaeConfig config_;
  ParameterSet params_;
  Mlp encoder_;
  Mlp decoder_;
};

/// x = mu + sigma_bar * eps, eps ~ N(0, I). The noise is a constant, so the
/// gradient with respect to x passes to mu unchanged.
Tensor reparameterize(const Tensor& mu, double sigma_bar, Rng& rng);
/// x = mu + exp(log_var / 2) * eps.
Tensor reparameterize(const Tensor& mu, const Tensor& log_var, Rng& rng);

/// Latent perturbations:
///   none      x' = x
///   linear    x' = t x + (1 - t) eps
///   slerp     x' = t x + sqrt(1 - t^2) eps
///   additive  x' = x + eps,  eps ~ N(0, sigma_bar^2 I)
/// `param` is t for linear/slerp and sigma_bar for additive.
Tensor perturb(const Tensor& mu, NoiseMode mode, double param, Rng& rng);

/// Standard deviation of the noise a perturbation adds, or nullopt for none.
std::optional<double> perturb_noise_std(NoiseMode mode, double param);

/// Gaussian log-likelihood up to constants: -mean((target - recon)^2),
/// averaged over pixels. Returns a scalar tensor.
Tensor reconstruction_log_likelihood(const Tensor& target, const Tensor& recon);

}  // namespace simflow
