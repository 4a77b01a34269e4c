#pragma once

// Latent-space diagnostics: frequency statistics and smoothness of latent
// grids, interpolation traces, and reconstruction robustness under latent
// noise.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "simflow/flow.hpp"
#include "simflow/nn.hpp"
#include "simflow/tensor.hpp"
#include "simflow/vae.hpp"

namespace simflow {

/// Normalized Shannon entropy of the 2D power spectrum of grid [rows, cols],
/// DC included. All-zero input gives 0.
double spectral_entropy(const Tensor& grid);

/// Share of non-DC spectral power above half the Nyquist radius.
double high_freq_ratio(const Tensor& grid);

/// Mean absolute difference over horizontally and vertically adjacent cells.
double total_variation(const Tensor& grid);

struct Autocorrelation {
  double value = 0.0;
  bool degenerate = false;  // zero variance, value forced to 0
};

/// Pearson correlation of seq[0..D-2] with seq[1..D-1].
Autocorrelation autocorrelation_lag1(std::span<const double> sequence);

struct LatentStats {
  double spectral_entropy = 0.0;
  double high_freq_ratio = 0.0;
  double total_variation = 0.0;
  double autocorrelation_lag1 = 0.0;
  std::size_t degenerate_sequences = 0;
};

/// Batch-averaged stats of latents [B, D, C] on a rows x cols token grid.
/// Grid stats are per channel; sequence stats use the row-major token order
/// per channel. Both are averaged over channels and samples.
LatentStats latent_stats(const Tensor& latents, std::size_t rows, std::size_t cols);

struct InterpolationTrace {
  std::vector<double> t;
  Tensor latents;                 // [steps, D, C]
  Tensor images;                  // [steps, H, W, C]
  std::vector<double> nf_nll;     // per latent dim, when a flow is given
};

/// Decodes lerp(mu_a, mu_b, t) on a uniform grid of `steps` points including
/// both ends. image_a and image_b are single images [1, H, W, C].
InterpolationTrace latent_interpolation(const VaeModel& vae, const Binding& vae_params,
                                        const FlowStack* flow, const Binding* flow_params,
                                        const Tensor& image_a, const Tensor& image_b,
                                        std::size_t steps);

struct RobustnessRow {
  double level = 0.0;
  double mse = 0.0;
};

/// Reconstruction MSE of decode(mu + s eps) per noise level s, averaged over
/// the images and `noise_seeds` noise draws (seeded base_seed + k).
std::vector<RobustnessRow> noise_robustness_sweep(const VaeModel& vae, const Binding& vae_params,
                                                  const Tensor& images,
                                                  std::span<const double> levels,
                                                  std::size_t noise_seeds = 8,
                                                  std::uint64_t base_seed = 0);

}  // namespace simflow
