#include "simflow/sampling.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace simflow {

void GuidanceConfig::validate() const {
  if (!(weight >= 0.0)) throw std::invalid_argument("GuidanceConfig: guidance weight must be >= 0");
  if (!(gamma >= 0.0)) throw std::invalid_argument("GuidanceConfig: gamma must be >= 0");
}

Tensor log_density_gradient(const FlowStack& stack, const Binding& p, const Tensor& x,
                            std::span<const int> classes) {
  if (p.differentiable()) {
    throw ContractError("score step: parameters must be bound as constants");
  }
  Tape tape;
  const Tensor xl = tape.leaf(x.detach());
  const Tensor logp = sum(nf_log_density(stack, p, xl, classes));
  return tape.backward(logp).of(xl);
}

Tensor score_guidance_step(const FlowStack& stack, const Binding& p, const Tensor& x,
                           std::span<const int> classes, double gamma) {
  if (!(gamma >= 0.0)) throw DomainError("score_guidance_step: gamma must be >= 0");
  for (double v : x.data())
    if (!std::isfinite(v)) throw NumericError("score_guidance_step: non-finite input");
  if (gamma == 0.0) return x.detach();
  const Tensor g_cond = log_density_gradient(stack, p, x, classes);
  const Tensor g_null = log_density_gradient(stack, p, x, null_classes(x.size(0)));
  return add(x.detach(), scale(sub(g_cond, g_null), gamma));
}

Tensor generate_latents(const FlowStack& stack, const Binding& flow_params, int class_id,
                        const GuidanceConfig& guidance, Rng& rng, std::size_t count) {
  guidance.validate();
  const FlowConfig& fc = stack.config();
  if (class_id != kNullClass &&
      (class_id < 0 || static_cast<std::size_t>(class_id) >= fc.num_classes)) {
    throw ContractError("generate: class id " + std::to_string(class_id) + " out of range for " +
                        std::to_string(fc.num_classes) + " classes");
  }
  if (count == 0) return Tensor::zeros({0, fc.token_count, fc.token_dim});
  const std::vector<int> classes(count, class_id);
  const Tensor z({count, fc.token_count, fc.token_dim}, rng.normals(count * fc.latent_size()));
  const Tensor x = stack.guided_inverse(flow_params, z, classes, guidance.effective_weight());
  return score_guidance_step(stack, flow_params, x, classes, guidance.effective_gamma());
}

Tensor generate(const VaeModel& vae, const Binding& vae_params, const FlowStack& stack,
                const Binding& flow_params, int class_id, const GuidanceConfig& guidance,
                Rng& rng, std::size_t count) {
  const Tensor x = generate_latents(stack, flow_params, class_id, guidance, rng, count);
  const ImageShape& im = vae.config().image;
  if (count == 0) return Tensor::zeros({0, im.height, im.width, im.channels});
  return vae.decode_images(vae_params, x);
}

}  // namespace simflow
