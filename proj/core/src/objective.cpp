#include "simflow/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace simflow {
namespace {

constexpr double kCosineEps = 1e-12;
constexpr double kTeacherNormFloor = 1e-12;

}  // namespace

double entropy_constant(double sigma_bar, std::size_t n) {
  if (!(sigma_bar > 0.0)) {
    throw DomainError("entropy_constant: sigma_bar must be > 0, got " + std::to_string(sigma_bar));
  }
  if (n == 0) throw DomainError("entropy_constant: N must be >= 1");
  const double nd = static_cast<double>(n);
  return 0.5 * nd * std::log(2.0 * std::numbers::pi * sigma_bar * sigma_bar) + 0.5 * nd;
}

// ---------------------------------------------------------------------------

AlignmentHead::AlignmentHead(std::size_t hidden_dim, std::size_t patch_pixels,
                             std::size_t feature_dim, Rng& rng)
    : patch_pixels_(patch_pixels), feature_dim_(feature_dim) {
  if (hidden_dim == 0 || patch_pixels == 0 || feature_dim == 0) {
    throw std::invalid_argument("AlignmentHead: dimensions must be positive");
  }
  teacher_ = rng.normals(patch_pixels * feature_dim, 1.0 / std::sqrt(double(patch_pixels)));
  projector_ = Mlp::create(params_, "projector",
                           {hidden_dim, 2 * hidden_dim, 2 * hidden_dim, feature_dim}, rng);
}

Tensor AlignmentHead::teacher_features(const Tensor& patches) const {
  if (patches.dim() != 3 || patches.size(2) != patch_pixels_) {
    throw ShapeError("teacher_features: expected [B, D, " + std::to_string(patch_pixels_) +
                     "], got " + to_string(patches.shape()));
  }
  const std::size_t rows = patches.size(0) * patches.size(1);
  std::vector<double> out(rows * feature_dim_, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double* f = out.data() + r * feature_dim_;
    for (std::size_t i = 0; i < patch_pixels_; ++i) {
      const double v = patches[r * patch_pixels_ + i];
      for (std::size_t j = 0; j < feature_dim_; ++j) f[j] += v * teacher_[i * feature_dim_ + j];
    }
    double norm = 0.0;
    for (std::size_t j = 0; j < feature_dim_; ++j) norm += f[j] * f[j];
    norm = std::sqrt(norm);
    if (norm < kTeacherNormFloor) {
      std::fill_n(f, feature_dim_, 0.0);
    } else {
      for (std::size_t j = 0; j < feature_dim_; ++j) f[j] /= norm;
    }
  }
  return Tensor({patches.size(0), patches.size(1), feature_dim_}, std::move(out));
}

Tensor AlignmentHead::project(const Binding& p, const Tensor& hidden) const {
  return projector_(p, hidden);
}

Tensor cosine_distance(const Tensor& projected, const Tensor& teacher_features) {
  if (projected.shape() != teacher_features.shape()) {
    throw ShapeError("alignment_loss: projected " + to_string(projected.shape()) +
                     " vs teacher " + to_string(teacher_features.shape()));
  }
  const Tensor pn = sqrt(add_scalar(sum_lastdim(mul(projected, projected)), kCosineEps));
  const Tensor tn = sqrt(add_scalar(sum_lastdim(mul(teacher_features, teacher_features)), kCosineEps));
  const Tensor dot = sum_lastdim(mul(projected, teacher_features));
  return add_scalar(scale(mean(div(dot, mul(pn, tn))), -1.0), 1.0);
}

Tensor alignment_loss(const AlignmentHead& head, const Binding& p, const Tensor& hidden,
                      const Tensor& teacher_features) {
  return cosine_distance(head.project(p, hidden), teacher_features);
}

// ---------------------------------------------------------------------------

JointLoss joint_loss(const SimFlowModel& model, const ModelBindings& bindings,
                     const ObjectiveConfig& config, const Tensor& images,
                     std::span<const int> labels, Rng& rng) {
  if (images.dim() == 0 || images.size(0) == 0) throw ContractError("joint_loss: empty batch");
  const std::size_t batch = images.size(0);
  const VaeConfig& vc = model.vae.config();
  const std::size_t n = vc.latent_size();

  const Tensor patches = model.vae.patchify(images);
  const Encoding enc = model.vae.encode(bindings.vae, images);
  Tensor x;
  if (enc.log_var) {
    x = reparameterize(enc.mu, *enc.log_var, rng);
  } else {
    const double param = config.noise_mode == NoiseMode::kAdditive ? vc.sigma_bar : config.perturb_t;
    x = perturb(enc.mu, config.noise_mode, param, rng);
  }
  const Tensor recon_ll = reconstruction_log_likelihood(patches, model.vae.decode(bindings.vae, x));

  std::vector<int> classes = null_classes(batch);
  if (model.flow.config().num_classes > 0 && !labels.empty()) {
    if (labels.size() != batch) {
      throw ContractError("joint_loss: " + std::to_string(labels.size()) +
                          " labels for batch of " + std::to_string(batch));
    }
    for (std::size_t b = 0; b < batch; ++b) {
      const bool drop = config.class_drop > 0.0 && rng.uniform() < config.class_drop;
      classes[b] = drop ? kNullClass : labels[b];
    }
  }

  const bool align = config.align && model.align && bindings.projector;
  const Tensor flow_in = config.detach_flow ? x.detach() : x;
  const StackOutput out = model.flow.forward(
      bindings.flow, flow_in, classes, align ? std::optional(config.align_tap) : std::nullopt);
  const Tensor sq = sum_lastdim(reshape(mul(out.z, out.z), {batch, n}));
  const double base = 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  // -log p per sample, averaged over batch and latent dimensions
  const Tensor nf_nll =
      scale(mean(sub(add_scalar(scale(sq, 0.5), base), out.log_det)), 1.0 / static_cast<double>(n));

  JointLoss result;
  result.mu = enc.mu;
  Tensor total = add(scale(recon_ll, -config.reconstruction_weight),
                     scale(nf_nll, config.nf_weight));
  if (align) {
    const Tensor al = alignment_loss(*model.align, *bindings.projector, *out.hidden,
                                     model.align->teacher_features(patches));
    total = add(total, scale(al, config.alignment_weight));
    result.values.alignment = al.item();
  }
  if (enc.log_var) {
    // KL(q(x|i) || N(0, I)) per latent dimension, standard VAE regularizer.
    const Tensor& lv = *enc.log_var;
    const Tensor kl = scale(mean(sub(add(mul(enc.mu, enc.mu), exp(lv)), add_scalar(lv, 1.0))), 0.5);
    total = add(total, scale(kl, config.kl_weight));
    result.values.kl = kl.item();
  } else if (auto sd = perturb_noise_std(config.noise_mode,
                                         config.noise_mode == NoiseMode::kAdditive
                                             ? vc.sigma_bar
                                             : config.perturb_t);
             sd && *sd > 0.0) {
    result.values.entropy_constant = entropy_constant(*sd, n) / static_cast<double>(n);
  }
  result.values.reconstruction_ll = recon_ll.item();
  result.values.nf_nll = nf_nll.item();
  result.values.total = total.item();
  result.total = total;
  return result;
}

// ---------------------------------------------------------------------------

double AdamWConfig::learning_rate(std::uint64_t step) const {
  if (schedule == LrSchedule::kConstant || step < cosine_start || total_steps <= cosine_start) {
    return lr;
  }
  const double span = static_cast<double>(total_steps - cosine_start);
  const double frac = std::min(1.0, static_cast<double>(step - cosine_start) / span);
  return lr_final + 0.5 * (lr - lr_final) * (1.0 + std::cos(std::numbers::pi * frac));
}

OptimizerState OptimizerState::create(const AdamWConfig& config,
                                      std::span<const ParameterSet* const> groups) {
  OptimizerState s;
  s.config = config;
  for (const ParameterSet* g : groups)
    for (const Parameter& p : *g) {
      s.first.emplace_back(p.value.size(), 0.0);
      s.second.emplace_back(p.value.size(), 0.0);
      s.ema.push_back(p.value);
    }
  return s;
}

StepReport optimizer_step(OptimizerState& state, std::span<ParameterSet* const> groups,
                          const std::vector<std::vector<double>>& grads) {
  std::vector<Parameter*> params;
  for (ParameterSet* g : groups)
    for (Parameter& p : *g) params.push_back(&p);
  if (params.size() != grads.size() || params.size() != state.first.size()) {
    throw ContractError("optimizer_step: " + std::to_string(grads.size()) + " gradients, " +
                        std::to_string(params.size()) + " parameters, " +
                        std::to_string(state.first.size()) + " moment buffers");
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i]->value.size() ||
        state.first[i].size() != params[i]->value.size()) {
      throw ShapeError("optimizer_step: size mismatch for parameter " + params[i]->name);
    }
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      if (!std::isfinite(grads[i][j])) {
        throw NumericError("optimizer_step: non-finite gradient in " + params[i]->name + "[" +
                           std::to_string(j) + "] at step " + std::to_string(state.step + 1));
      }
      sq += grads[i][j] * grads[i][j];
    }
  }

  const AdamWConfig& c = state.config;
  StepReport report;
  report.grad_norm = std::sqrt(sq);
  if (c.max_grad_norm > 0.0 && report.grad_norm > c.max_grad_norm) {
    report.clip_scale = c.max_grad_norm / report.grad_norm;
  }
  report.lr = c.learning_rate(state.step);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const double decay = c.ema_warmup ? std::min(c.ema_rate, (1.0 + t) / (10.0 + t)) : c.ema_rate;

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i]->value;
    auto& m = state.first[i];
    auto& v = state.second[i];
    auto& e = state.ema[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grads[i][j] * report.clip_scale;
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps);
      value[j] -= report.lr * (update + c.weight_decay * value[j]);
      e[j] += (1.0 - decay) * (value[j] - e[j]);
    }
  }
  return report;
}

void load_ema(const OptimizerState& state, std::span<ParameterSet* const> groups) {
  std::size_t i = 0;
  for (ParameterSet* g : groups)
    for (Parameter& p : *g) {
      if (i >= state.ema.size() || state.ema[i].size() != p.value.size()) {
        throw ShapeError("load_ema: EMA buffer does not match parameter " + p.name);
      }
      p.value = state.ema[i++];
    }
  if (i != state.ema.size()) throw ShapeError("load_ema: leftover EMA buffers");
}

// ---------------------------------------------------------------------------

double collapse_metric(const Tensor& mu) {
  if (mu.dim() == 0 || mu.size(0) < 2) {
    throw ContractError("collapse_metric: need a batch of at least 2");
  }
  const std::size_t batch = mu.size(0);
  const std::size_t dims = mu.numel() / batch;
  double total = 0.0;
  for (std::size_t d = 0; d < dims; ++d) {
    double mean = 0.0;
    for (std::size_t b = 0; b < batch; ++b) mean += mu[b * dims + d];
    mean /= static_cast<double>(batch);
    double var = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const double diff = mu[b * dims + d] - mean;
      var += diff * diff;
    }
    total += std::sqrt(var / static_cast<double>(batch));
  }
  return total / static_cast<double>(dims);
}

CollapseMonitor::CollapseMonitor(double threshold, std::size_t window)
    : threshold_(threshold), window_(window) {
  if (window == 0) throw std::invalid_argument("CollapseMonitor: window must be positive");
}

bool CollapseMonitor::update(std::uint64_t step, double metric) {
  if (!history_.empty() && step <= history_.back().first) {
    throw ContractError("CollapseMonitor: step " + std::to_string(step) + " after " +
                        std::to_string(history_.back().first));
  }
  history_.emplace_back(step, metric);
  run_ = metric < threshold_ ? run_ + 1 : 0;
  if (run_ >= window_) collapsed_ = true;
  return collapsed_;
}

CollapseMonitor CollapseMonitor::replay(double threshold, std::size_t window,
                                        const std::vector<std::pair<std::uint64_t, double>>& history) {
  CollapseMonitor m(threshold, window);
  for (const auto& [step, metric] : history) m.update(step, metric);
  return m;
}

// ---------------------------------------------------------------------------

std::vector<ParameterSet*> TrainState::groups() {
  std::vector<ParameterSet*> g{&model.vae.parameters(), &model.flow.parameters()};
  if (model.align) g.push_back(&model.align->parameters());
  return g;
}

std::vector<const ParameterSet*> TrainState::groups() const {
  std::vector<const ParameterSet*> g{&model.vae.parameters(), &model.flow.parameters()};
  if (model.align) g.push_back(&model.align->parameters());
  return g;
}

StepResult train_step(TrainState& state, const ObjectiveConfig& config, const Tensor& images,
                      std::span<const int> labels, bool train_vae) {
  Tape tape;
  ModelBindings b{
      train_vae ? Binding::on_tape(state.model.vae.parameters(), tape)
                : Binding::constant(state.model.vae.parameters()),
      Binding::on_tape(state.model.flow.parameters(), tape),
      std::nullopt,
  };
  if (state.model.align) b.projector = Binding::on_tape(state.model.align->parameters(), tape);

  const JointLoss jl = joint_loss(state.model, b, config, images, labels, state.rng);
  const Gradients grads = tape.backward(jl.total);
  std::vector<std::vector<double>> flat = b.vae.gradients(grads);
  for (auto& g : b.flow.gradients(grads)) flat.push_back(std::move(g));
  if (b.projector)
    for (auto& g : b.projector->gradients(grads)) flat.push_back(std::move(g));

  StepResult r;
  r.loss = jl.values;
  r.update = optimizer_step(state.optimizer, state.groups(), flat);
  r.collapse_metric = collapse_metric(jl.mu);
  r.collapsed = state.monitor.update(state.optimizer.step, r.collapse_metric);
  state.last = jl.values;
  return r;
}

}  // namespace simflow
