#pragma once

// Generation: z ~ N(0, I) -> guided inverse -> score step -> decode.

#include <cstddef>
#include <span>

#include "simflow/flow.hpp"
#include "simflow/nn.hpp"
#include "simflow/rng.hpp"
#include "simflow/tensor.hpp"
#include "simflow/vae.hpp"

namespace simflow {

struct GuidanceConfig {
  /// Last-block extrapolation weight; 1 is plain conditional inversion.
  double weight = 1.0;
  /// Step size of the score-based correction.
  double gamma = 0.25;
  bool use_weight = true;
  bool use_score = true;

  void validate() const;
  double effective_weight() const { return use_weight ? weight : 1.0; }
  double effective_gamma() const { return use_score ? gamma : 0.0; }
};

/// x~ = x + gamma (grad_x log p(x|c) - grad_x log p(x|null)), gradients
/// through every block. `p` must be a constant binding; the step builds its
/// own tapes and touches no parameter gradients.
Tensor score_guidance_step(const FlowStack& stack, const Binding& p, const Tensor& x,
                           std::span<const int> classes, double gamma);

/// grad_x log p(x | classes) per sample, [B, D, C].
Tensor log_density_gradient(const FlowStack& stack, const Binding& p, const Tensor& x,
                            std::span<const int> classes);

/// Latents for `count` samples of one class (kNullClass for unconditional).
Tensor generate_latents(const FlowStack& stack, const Binding& flow_params, int class_id,
                        const GuidanceConfig& guidance, Rng& rng, std::size_t count);

/// Images [count, H, W, C].
Tensor generate(const VaeModel& vae, const Binding& vae_params, const FlowStack& stack,
                const Binding& flow_params, int class_id, const GuidanceConfig& guidance,
                Rng& rng, std::size_t count);

}  // namespace simflow
