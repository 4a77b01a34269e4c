#include "simflow/vae.hpp"

#include <cmath>
#include <stdexcept>

namespace simflow {
namespace {

// Small enough that a normalized token has unit variance to ~1e-13 for any
// token with variance above 1e-2.
constexpr double kEncoderNormEps = 1e-20;

std::vector<std::size_t> widths(std::size_t in, const std::vector<std::size_t>& hidden,
                                std::size_t out) {
  std::vector<std::size_t> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

}  // namespace

std::string to_string(VarianceMode mode) {
  return mode == VarianceMode::kFixed ? "fixed" : "learnable";
}

std::string to_string(NoiseMode mode) {
  switch (mode) {
    case NoiseMode::kNone: return "none";
    case NoiseMode::kLinear: return "linear";
    case NoiseMode::kSlerp: return "slerp";
    case NoiseMode::kAdditive: return "additive";
  }
  return "additive";
}

VarianceMode parse_variance_mode(const std::string& text) {
  if (text == "fixed") return VarianceMode::kFixed;
  if (text == "learnable") return VarianceMode::kLearnable;
  throw std::invalid_argument("unknown variance mode '" + text + "' (expected fixed|learnable)");
}

NoiseMode parse_noise_mode(const std::string& text) {
  if (text == "none") return NoiseMode::kNone;
  if (text == "linear") return NoiseMode::kLinear;
  if (text == "slerp") return NoiseMode::kSlerp;
  if (text == "additive") return NoiseMode::kAdditive;
  throw std::invalid_argument("unknown noise mode '" + text +
                              "' (expected none|linear|slerp|additive)");
}

void VaeConfig::validate() const {
  if (patch_size == 0 || image.height == 0 || image.width == 0 || image.channels == 0) {
    throw std::invalid_argument("VaeConfig: image dims and patch_size must be positive");
  }
  if (image.height % patch_size != 0 || image.width % patch_size != 0) {
    throw std::invalid_argument("VaeConfig: image " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + " not divisible by patch_size " +
                                std::to_string(patch_size));
  }
  if (token_dim == 0) throw std::invalid_argument("VaeConfig: token_dim must be positive");
  if (!(sigma_bar >= 0.0)) throw std::invalid_argument("VaeConfig: sigma_bar must be >= 0");
  if (identity && patch_pixels() != token_dim) {
    throw std::invalid_argument("VaeConfig: identity autoencoder needs token_dim == patch pixels (" +
                                std::to_string(patch_pixels()) + ")");
  }
  if (identity && variance_mode == VarianceMode::kLearnable) {
    throw std::invalid_argument("VaeConfig: identity autoencoder has no learnable variance");
  }
}

VaeModel::VaeModel(const VaeConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  if (config_.identity) return;
  const std::size_t enc_out =
      config_.variance_mode == VarianceMode::kLearnable ? 2 * config_.token_dim : config_.token_dim;
  encoder_ = Mlp::create(params_, "encoder",
                         widths(config_.patch_pixels(), config_.encoder_hidden, enc_out), rng);
  decoder_ = Mlp::create(params_, "decoder",
                         widths(config_.token_dim, config_.decoder_hidden, config_.patch_pixels()),
                         rng);
}

void VaeModel::check_images(const Tensor& images) const {
  const auto& s = images.shape();
  const auto& im = config_.image;
  if (s.size() != 4 || s[1] != im.height || s[2] != im.width || s[3] != im.channels) {
    throw ShapeError("vae: expected images [B, " + std::to_string(im.height) + ", " +
                     std::to_string(im.width) + ", " + std::to_string(im.channels) + "], got " +
                     to_string(s));
  }
}

Tensor VaeModel::patchify(const Tensor& images) const {
  check_images(images);
  const std::size_t batch = images.size(0);
  const std::size_t p = config_.patch_size;
  const std::size_t w = config_.image.width;
  const std::size_t ch = config_.image.channels;
  const std::size_t rows = config_.grid_rows();
  const std::size_t cols = config_.grid_cols();
  const std::size_t pp = config_.patch_pixels();
  std::vector<double> out(images.numel());
  const double* src = images.ptr();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < rows; ++gy)
      for (std::size_t gx = 0; gx < cols; ++gx)
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t token = gy * cols + gx;
              const std::size_t dst = (b * rows * cols + token) * pp + (py * p + px) * ch + c;
              const std::size_t y = gy * p + py;
              const std::size_t x = gx * p + px;
              out[dst] = src[((b * config_.image.height + y) * w + x) * ch + c];
            }
  return Tensor({batch, rows * cols, pp}, std::move(out));
}

Tensor VaeModel::unpatchify(const Tensor& patches) const {
  const std::size_t d = config_.token_count();
  const std::size_t pp = config_.patch_pixels();
  if (patches.dim() != 3 || patches.size(1) != d || patches.size(2) != pp) {
    throw ShapeError("vae: expected patches [B, " + std::to_string(d) + ", " + std::to_string(pp) +
                     "], got " + to_string(patches.shape()));
  }
  const std::size_t batch = patches.size(0);
  const std::size_t p = config_.patch_size;
  const std::size_t w = config_.image.width;
  const std::size_t ch = config_.image.channels;
  const std::size_t cols = config_.grid_cols();
  std::vector<double> out(patches.numel());
  const double* src = patches.ptr();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t token = 0; token < d; ++token)
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          for (std::size_t c = 0; c < ch; ++c) {
            const std::size_t y = (token / cols) * p + py;
            const std::size_t x = (token % cols) * p + px;
            out[((b * config_.image.height + y) * w + x) * ch + c] =
                src[(b * d + token) * pp + (py * p + px) * ch + c];
          }
  return Tensor({batch, config_.image.height, w, ch}, std::move(out));
}

Encoding VaeModel::encode(const Binding& p, const Tensor& images) const {
  const Tensor patches = patchify(images);
  Encoding enc;
  if (config_.identity) {
    enc.mu = patches;
  } else if (config_.variance_mode == VarianceMode::kLearnable) {
    const Tensor out = encoder_(p, patches);
    enc.mu = slice(out, 2, 0, config_.token_dim);
    enc.log_var = slice(out, 2, config_.token_dim, 2 * config_.token_dim);
  } else {
    enc.mu = encoder_(p, patches);
  }
  if (config_.encoder_layernorm) enc.mu = layernorm_lastdim(enc.mu, kEncoderNormEps);
  return enc;
}

Tensor VaeModel::decode(const Binding& p, const Tensor& x) const {
  if (x.dim() != 3 || x.size(1) != config_.token_count() || x.size(2) != config_.token_dim) {
    throw ShapeError("vae decode: expected latents [B, " + std::to_string(config_.token_count()) +
                     ", " + std::to_string(config_.token_dim) + "], got " + to_string(x.shape()));
  }
  if (config_.identity) return x;
  return decoder_(p, x);
}

Tensor VaeModel::decode_images(const Binding& p, const Tensor& x) const {
  return unpatchify(decode(p, x).detach());
}

// ---------------------------------------------------------------------------

Tensor reparameterize(const Tensor& mu, double sigma_bar, Rng& rng) {
  if (!(sigma_bar >= 0.0)) throw DomainError("reparameterize: sigma_bar must be >= 0");
  if (sigma_bar == 0.0) return mu;
  return add(mu, Tensor(mu.shape(), rng.normals(mu.numel(), sigma_bar)));
}

Tensor reparameterize(const Tensor& mu, const Tensor& log_var, Rng& rng) {
  const Tensor eps(mu.shape(), rng.normals(mu.numel()));
  return add(mu, mul(exp(scale(log_var, 0.5)), eps));
}

Tensor perturb(const Tensor& mu, NoiseMode mode, double param, Rng& rng) {
  switch (mode) {
    case NoiseMode::kNone:
      return mu;
    case NoiseMode::kAdditive:
      return reparameterize(mu, param, rng);
    case NoiseMode::kLinear:
    case NoiseMode::kSlerp: {
      if (!(param >= 0.0 && param <= 1.0)) {
        throw DomainError("perturb: t must lie in [0, 1], got " + std::to_string(param));
      }
      const double noise = mode == NoiseMode::kLinear ? 1.0 - param : std::sqrt(1.0 - param * param);
      const Tensor eps(mu.shape(), rng.normals(mu.numel(), noise));
      return add(scale(mu, param), eps);
    }
  }
  return mu;
}

std::optional<double> perturb_noise_std(NoiseMode mode, double param) {
  switch (mode) {
    case NoiseMode::kNone: return std::nullopt;
    case NoiseMode::kAdditive: return param;
    case NoiseMode::kLinear: return 1.0 - param;
    case NoiseMode::kSlerp: return std::sqrt(1.0 - param * param);
  }
  return std::nullopt;
}

Tensor reconstruction_log_likelihood(const Tensor& target, const Tensor& recon) {
  if (target.shape() != recon.shape()) {
    throw ShapeError("reconstruction_log_likelihood: shapes " + to_string(target.shape()) +
                     " and " + to_string(recon.shape()) + " differ");
  }
  const Tensor diff = sub(target, recon);
  return scale(mean(mul(diff, diff)), -1.0);
}

}  // namespace simflow
