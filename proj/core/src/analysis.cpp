#include "simflow/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "simflow/rng.hpp"

namespace simflow {
namespace {

void check_grid(const Tensor& grid, const char* what) {
  if (grid.dim() != 2 || grid.size(0) < 2 || grid.size(1) < 2) {
    throw ShapeError(std::string(what) + ": expected a [rows>=2, cols>=2] grid, got " +
                     to_string(grid.shape()));
  }
}

// |DFT|^2 of a real grid, computed separably.
std::vector<double> power_spectrum(const Tensor& grid) {
  const std::size_t rows = grid.size(0);
  const std::size_t cols = grid.size(1);
  using cd = std::complex<double>;
  std::vector<cd> tmp(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t l = 0; l < cols; ++l) {
      cd acc = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double ang = -2.0 * std::numbers::pi * double(l * c % cols) / double(cols);
        acc += grid[r * cols + c] * std::polar(1.0, ang);
      }
      tmp[r * cols + l] = acc;
    }
  std::vector<double> power(rows * cols);
  for (std::size_t k = 0; k < rows; ++k)
    for (std::size_t l = 0; l < cols; ++l) {
      cd acc = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        const double ang = -2.0 * std::numbers::pi * double(k * r % rows) / double(rows);
        acc += tmp[r * cols + l] * std::polar(1.0, ang);
      }
      power[k * cols + l] = std::norm(acc);
    }
  return power;
}

// Radial frequency of bin (k, l) in cycles per sample; Nyquist radius is 0.5.
double radial_frequency(std::size_t k, std::size_t l, std::size_t rows, std::size_t cols) {
  const double fk = double(std::min(k, rows - k)) / double(rows);
  const double fl = double(std::min(l, cols - l)) / double(cols);
  return std::sqrt(fk * fk + fl * fl);
}

Tensor channel_grid(const Tensor& latents, std::size_t b, std::size_t ch, std::size_t rows,
                    std::size_t cols) {
  const std::size_t d = latents.size(1);
  const std::size_t c = latents.size(2);
  std::vector<double> g(rows * cols);
  for (std::size_t t = 0; t < d; ++t) g[t] = latents[(b * d + t) * c + ch];
  return Tensor({rows, cols}, std::move(g));
}

}  // namespace

double spectral_entropy(const Tensor& grid) {
  check_grid(grid, "spectral_entropy");
  const auto power = power_spectrum(grid);
  double total = 0.0;
  for (double p : power) total += p;
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (double p : power) {
    if (p <= 0.0) continue;
    const double q = p / total;
    h -= q * std::log(q);
  }
  return std::clamp(h / std::log(double(power.size())), 0.0, 1.0);
}

double high_freq_ratio(const Tensor& grid) {
  check_grid(grid, "high_freq_ratio");
  const std::size_t rows = grid.size(0);
  const std::size_t cols = grid.size(1);
  const auto power = power_spectrum(grid);
  double total = 0.0;
  double high = 0.0;
  for (std::size_t k = 0; k < rows; ++k)
    for (std::size_t l = 0; l < cols; ++l) {
      if (k == 0 && l == 0) continue;
      const double p = power[k * cols + l];
      total += p;
      if (radial_frequency(k, l, rows, cols) > 0.25) high += p;
    }
  // Round-off leaves ~1e-30 of non-DC power on constant grids.
  double dc = power[0];
  if (total <= 1e-24 * std::max(1.0, dc)) return 0.0;
  return std::clamp(high / total, 0.0, 1.0);
}

double total_variation(const Tensor& grid) {
  check_grid(grid, "total_variation");
  const std::size_t rows = grid.size(0);
  const std::size_t cols = grid.size(1);
  double acc = 0.0;
  std::size_t pairs = 0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = grid[r * cols + c];
      if (c + 1 < cols) {
        acc += std::abs(grid[r * cols + c + 1] - v);
        ++pairs;
      }
      if (r + 1 < rows) {
        acc += std::abs(grid[(r + 1) * cols + c] - v);
        ++pairs;
      }
    }
  return acc / double(pairs);
}

Autocorrelation autocorrelation_lag1(std::span<const double> sequence) {
  const std::size_t d = sequence.size();
  if (d < 3) throw ShapeError("autocorrelation_lag1: need at least 3 values, got " + std::to_string(d));
  const std::size_t n = d - 1;
  double ma = 0.0;
  double mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += sequence[i];
    mb += sequence[i + 1];
  }
  ma /= double(n);
  mb /= double(n);
  double sab = 0.0;
  double saa = 0.0;
  double sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = sequence[i] - ma;
    const double b = sequence[i + 1] - mb;
    sab += a * b;
    saa += a * a;
    sbb += b * b;
  }
  if (saa <= 0.0 || sbb <= 0.0) return {0.0, true};
  return {std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0), false};
}

LatentStats latent_stats(const Tensor& latents, std::size_t rows, std::size_t cols) {
  if (latents.dim() != 3 || latents.size(0) == 0 || latents.size(1) != rows * cols) {
    throw ShapeError("latent_stats: expected [B>0, " + std::to_string(rows * cols) +
                     ", C], got " + to_string(latents.shape()));
  }
  const std::size_t batch = latents.size(0);
  const std::size_t channels = latents.size(2);
  LatentStats s;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const Tensor g = channel_grid(latents, b, ch, rows, cols);
      s.spectral_entropy += spectral_entropy(g);
      s.high_freq_ratio += high_freq_ratio(g);
      s.total_variation += total_variation(g);
      const auto ac = autocorrelation_lag1(g.data());
      s.autocorrelation_lag1 += ac.value;
      if (ac.degenerate) ++s.degenerate_sequences;
    }
  const double n = double(batch * channels);
  s.spectral_entropy /= n;
  s.high_freq_ratio /= n;
  s.total_variation /= n;
  s.autocorrelation_lag1 /= n;
  return s;
}

InterpolationTrace latent_interpolation(const VaeModel& vae, const Binding& vae_params,
                                        const FlowStack* flow, const Binding* flow_params,
                                        const Tensor& image_a, const Tensor& image_b,
                                        std::size_t steps) {
  if (steps < 2) throw ContractError("latent_interpolation: steps must be >= 2");
  if (image_a.dim() != 4 || image_a.size(0) != 1 || image_b.shape() != image_a.shape()) {
    throw ShapeError("latent_interpolation: expected two [1, H, W, C] images");
  }
  const Tensor mu_a = vae.encode(vae_params, image_a).mu.detach();
  const Tensor mu_b = vae.encode(vae_params, image_b).mu.detach();
  const std::size_t n = mu_a.numel();

  InterpolationTrace trace;
  std::vector<double> lat(steps * n);
  for (std::size_t s = 0; s < steps; ++s) {
    const double t = double(s) / double(steps - 1);
    trace.t.push_back(t);
    for (std::size_t i = 0; i < n; ++i) {
      // exact at both ends
      lat[s * n + i] = s + 1 == steps ? mu_b[i] : mu_a[i] + t * (mu_b[i] - mu_a[i]);
    }
  }
  trace.latents = Tensor({steps, mu_a.size(1), mu_a.size(2)}, std::move(lat));
  trace.images = vae.decode_images(vae_params, trace.latents);
  if (flow && flow_params) {
    const Tensor logp =
        nf_log_density(*flow, *flow_params, trace.latents, null_classes(steps));
    for (std::size_t s = 0; s < steps; ++s) trace.nf_nll.push_back(-logp[s] / double(n));
  }
  return trace;
}

std::vector<RobustnessRow> noise_robustness_sweep(const VaeModel& vae, const Binding& vae_params,
                                                  const Tensor& images,
                                                  std::span<const double> levels,
                                                  std::size_t noise_seeds,
                                                  std::uint64_t base_seed) {
  if (levels.empty() || levels.front() != 0.0 || !std::is_sorted(levels.begin(), levels.end())) {
    throw ContractError("noise_robustness_sweep: levels must ascend from 0");
  }
  if (noise_seeds == 0) throw ContractError("noise_robustness_sweep: need at least one noise seed");
  if (images.dim() != 4 || images.size(0) == 0) {
    throw ShapeError("noise_robustness_sweep: expected a nonempty [B, H, W, C] batch");
  }
  const Tensor patches = vae.patchify(images);
  const Tensor mu = vae.encode(vae_params, images).mu.detach();
  auto mse_of = [&](const Tensor& x) {
    return -reconstruction_log_likelihood(patches, vae.decode(vae_params, x)).item();
  };

  std::vector<RobustnessRow> rows;
  const double clean = mse_of(mu);
  for (double level : levels) {
    if (level == 0.0) {
      rows.push_back({0.0, clean});
      continue;
    }
    double acc = 0.0;
    for (std::size_t k = 0; k < noise_seeds; ++k) {
      Rng rng(base_seed + k);
      acc += mse_of(add(mu, Tensor(mu.shape(), rng.normals(mu.numel(), level))));
    }
    rows.push_back({level, acc / double(noise_seeds)});
  }
  return rows;
}

}  // namespace simflow
