#include "simflow/flow.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace simflow {
namespace {

constexpr double kMaskValue = -1e9;
constexpr double kFlowNormEps = 1e-6;

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_) {
  return add(mul(x, add_scalar(scale_, 1.0)), shift);
}

// Causal mask for a length-L prefix: entry (i, j) is masked when j > i.
std::vector<unsigned char> causal_mask(std::size_t len) {
  std::vector<unsigned char> m(len * len, 0);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = i + 1; j < len; ++j) m[i * len + j] = 1;
  return m;
}

// Token d of a [B, L, C] buffer as a [B, C] range copy.
void copy_token(const double* src, std::size_t src_len, std::size_t d, std::size_t batch,
                std::size_t channels, std::vector<double>& dst) {
  dst.resize(batch * channels);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      dst[b * channels + c] = src[(b * src_len + d) * channels + c];
}

}  // namespace

void FlowConfig::validate() const {
  if (num_blocks == 0) throw std::invalid_argument("FlowConfig: num_blocks must be positive");
  if (layers_per_block.size() != num_blocks) {
    throw std::invalid_argument("FlowConfig: layers_per_block has " +
                                std::to_string(layers_per_block.size()) + " entries for " +
                                std::to_string(num_blocks) + " blocks");
  }
  for (auto l : layers_per_block)
    if (l == 0) throw std::invalid_argument("FlowConfig: every block needs at least one layer");
  if (hidden_dim == 0 || num_heads == 0 || hidden_dim % num_heads != 0) {
    throw std::invalid_argument("FlowConfig: hidden_dim " + std::to_string(hidden_dim) +
                                " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (token_count == 0 || token_dim == 0) {
    throw std::invalid_argument("FlowConfig: token_count and token_dim must be positive");
  }
  if (mlp_ratio == 0) throw std::invalid_argument("FlowConfig: mlp_ratio must be positive");
}

std::vector<int> null_classes(std::size_t batch) { return std::vector<int>(batch, kNullClass); }

// ---------------------------------------------------------------------------

AffineBlock::AffineBlock(ParameterSet& params, const std::string& prefix,
                         const FlowConfig& config, std::size_t layers, Ordering ordering, Rng& rng)
    : config_(config), ordering_(ordering) {
  const std::size_t h = config.hidden_dim;
  const std::size_t c = config.token_dim;
  in_proj_ = Linear::create(params, prefix + ".in_proj", c, h, Init::kNormalScaled, rng);
  start_ = params.add(prefix + ".start", {h}, rng.normals(h, 0.02));
  positions_ = params.add(prefix + ".positions", {config.token_count, h},
                          rng.normals(config.token_count * h, 0.02));
  class_table_ = params.add(prefix + ".class_table", {config.num_classes + 1, h},
                            rng.normals((config.num_classes + 1) * h, 1.0));
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l);
    Layer layer;
    layer.modulation = Linear::create(params, lp + ".modulation", h, 6 * h, Init::kZero, rng);
    layer.query = Linear::create(params, lp + ".query", h, h, Init::kNormalScaled, rng);
    layer.key = Linear::create(params, lp + ".key", h, h, Init::kNormalScaled, rng);
    layer.value = Linear::create(params, lp + ".value", h, h, Init::kNormalScaled, rng);
    layer.attn_out = Linear::create(params, lp + ".attn_out", h, h, Init::kNormalScaled, rng);
    layer.mlp_in = Linear::create(params, lp + ".mlp_in", h, config.mlp_ratio * h,
                                  Init::kNormalScaled, rng);
    layer.mlp_out = Linear::create(params, lp + ".mlp_out", config.mlp_ratio * h, h,
                                   Init::kNormalScaled, rng);
    layers_.push_back(layer);
  }
  final_modulation_ = Linear::create(params, prefix + ".final_modulation", h, 2 * h, Init::kZero, rng);
  head_ = Linear::create(params, prefix + ".head", h, 2 * c, Init::kZero, rng);
}

Tensor AffineBlock::to_order(const Tensor& x) const {
  return ordering_ == Ordering::kReversed ? flip(x, 1) : x;
}

std::vector<std::size_t> AffineBlock::class_rows(std::span<const int> classes,
                                                 std::size_t batch) const {
  std::vector<std::size_t> rows(batch, config_.num_classes);
  if (classes.empty()) return rows;
  if (classes.size() != batch) {
    throw ContractError("flow: " + std::to_string(classes.size()) + " class labels for batch of " +
                        std::to_string(batch));
  }
  for (std::size_t b = 0; b < batch; ++b) {
    const int cls = classes[b];
    if (cls == kNullClass) continue;
    if (cls < 0 || static_cast<std::size_t>(cls) >= config_.num_classes) {
      throw ContractError("flow: class id " + std::to_string(cls) + " out of range for " +
                          std::to_string(config_.num_classes) + " classes");
    }
    rows[b] = static_cast<std::size_t>(cls);
  }
  return rows;
}

Tensor AffineBlock::attention(const Binding& p, const Layer& layer, const Tensor& h) const {
  const std::size_t len = h.size(1);
  const std::size_t heads = config_.num_heads;
  const std::size_t hd = config_.hidden_dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto mask = causal_mask(len);
  const Tensor q = layer.query(p, h);
  const Tensor k = layer.key(p, h);
  const Tensor v = layer.value(p, h);

  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    const Tensor qh = heads == 1 ? q : slice(q, 2, i * hd, (i + 1) * hd);
    const Tensor kh = heads == 1 ? k : slice(k, 2, i * hd, (i + 1) * hd);
    const Tensor vh = heads == 1 ? v : slice(v, 2, i * hd, (i + 1) * hd);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    scores = masked_fill(scores, {len, len}, mask, kMaskValue);
    outs.push_back(matmul(softmax_lastdim(scores), vh));
  }
  const Tensor joined = heads == 1 ? outs.front() : concat(outs, 2);
  return layer.attn_out(p, joined);
}

AffineParams AffineBlock::predict(const Binding& p, const Tensor& x_ordered,
                                  std::span<const int> classes,
                                  std::vector<Tensor>* layer_outputs) const {
  if (x_ordered.dim() != 3 || x_ordered.size(2) != config_.token_dim ||
      x_ordered.size(1) == 0 || x_ordered.size(1) > config_.token_count) {
    throw ShapeError("flow block: expected [B, L<=" + std::to_string(config_.token_count) + ", " +
                     std::to_string(config_.token_dim) + "], got " + to_string(x_ordered.shape()));
  }
  const std::size_t batch = x_ordered.size(0);
  const std::size_t len = x_ordered.size(1);
  const std::size_t hdim = config_.hidden_dim;

  const Tensor start = reshape(repeat(p[start_], 0, batch), {batch, 1, hdim});
  Tensor h = start;
  if (len > 1) h = concat({start, in_proj_(p, slice(x_ordered, 1, 0, len - 1))}, 1);
  h = add(h, slice(p[positions_], 0, 0, len));

  const auto rows = class_rows(classes, batch);
  const Tensor cond = gather_rows(p[class_table_], rows);
  auto piece = [&](const Tensor& mod, std::size_t i) {
    return repeat(slice(mod, 1, i * hdim, (i + 1) * hdim), 1, len);
  };

  for (const auto& layer : layers_) {
    const Tensor mod = layer.modulation(p, cond);
    const Tensor a = modulate(layernorm_lastdim(h, kFlowNormEps), piece(mod, 0), piece(mod, 1));
    h = add(h, mul(piece(mod, 2), attention(p, layer, a)));
    const Tensor m = modulate(layernorm_lastdim(h, kFlowNormEps), piece(mod, 3), piece(mod, 4));
    h = add(h, mul(piece(mod, 5), layer.mlp_out(p, gelu(layer.mlp_in(p, m)))));
    if (layer_outputs) layer_outputs->push_back(h);
  }

  const Tensor fmod = final_modulation_(p, cond);
  const Tensor hf = modulate(layernorm_lastdim(h, kFlowNormEps), piece(fmod, 0), piece(fmod, 1));
  const Tensor out = head_(p, hf);
  const std::size_t c = config_.token_dim;
  return {slice(out, 2, 0, c), slice(out, 2, c, 2 * c)};
}

BlockOutput AffineBlock::forward(const Binding& p, const Tensor& x, std::span<const int> classes,
                                 bool keep_hidden) const {
  if (x.dim() != 3 || x.size(1) != config_.token_count || x.size(2) != config_.token_dim) {
    throw ShapeError("block_forward: expected [B, " + std::to_string(config_.token_count) + ", " +
                     std::to_string(config_.token_dim) + "], got " + to_string(x.shape()));
  }
  const std::size_t batch = x.size(0);
  const Tensor xo = to_order(x);
  std::vector<Tensor> hidden;
  const AffineParams ap = predict(p, xo, classes, keep_hidden ? &hidden : nullptr);
  const Tensor zo = mul(sub(xo, ap.beta), exp(scale(ap.log_alpha, -1.0)));

  BlockOutput out;
  out.z = to_order(zo);
  out.sum_log_alpha = sum_lastdim(reshape(ap.log_alpha, {batch, config_.latent_size()}));
  for (auto& hs : hidden) out.hidden.push_back(to_order(hs));
  return out;
}

template <typename Combine>
Tensor AffineBlock::invert_tokens(const Tensor& z, Combine&& combine) const {
  if (z.dim() != 3 || z.size(1) != config_.token_count || z.size(2) != config_.token_dim) {
    throw ShapeError("block_inverse: expected [B, " + std::to_string(config_.token_count) + ", " +
                     std::to_string(config_.token_dim) + "], got " + to_string(z.shape()));
  }
  const std::size_t batch = z.size(0);
  const std::size_t dlen = config_.token_count;
  const std::size_t c = config_.token_dim;
  const Tensor zo = to_order(z.detach());
  std::vector<double> xo(batch * dlen * c, 0.0);
  std::vector<double> s_d;
  std::vector<double> b_d;

  for (std::size_t d = 0; d < dlen; ++d) {
    std::vector<double> prefix(batch * (d + 1) * c, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(xo.data() + b * dlen * c, d * c, prefix.data() + b * (d + 1) * c);
    const Tensor prefix_t({batch, d + 1, c}, std::move(prefix));
    combine(prefix_t, d, s_d, b_d);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t i = (b * dlen + d) * c + j;
        xo[i] = b_d[b * c + j] + std::exp(s_d[b * c + j]) * zo[i];
      }
  }
  return to_order(Tensor({batch, dlen, c}, std::move(xo)));
}

Tensor AffineBlock::inverse(const Binding& p, const Tensor& z, std::span<const int> classes) const {
  const std::size_t c = config_.token_dim;
  return invert_tokens(z, [&](const Tensor& prefix, std::size_t d, std::vector<double>& s_d,
                                 std::vector<double>& b_d) {
    const AffineParams ap = predict(p, prefix, classes);
    copy_token(ap.log_alpha.ptr(), d + 1, d, prefix.size(0), c, s_d);
    copy_token(ap.beta.ptr(), d + 1, d, prefix.size(0), c, b_d);
  });
}

Tensor AffineBlock::inverse_guided(const Binding& p, const Tensor& z, std::span<const int> classes,
                                   double weight) const {
  // w = 1 must reproduce the conditional inverse bit for bit
  if (weight == 1.0) return inverse(p, z, classes);
  const std::size_t c = config_.token_dim;
  const auto nulls = null_classes(z.size(0));
  std::vector<double> s_null;
  std::vector<double> b_null;
  return invert_tokens(z, [&](const Tensor& prefix, std::size_t d, std::vector<double>& s_d,
                                 std::vector<double>& b_d) {
    const std::size_t batch = prefix.size(0);
    const AffineParams cond = predict(p, prefix, classes);
    const AffineParams uncond = predict(p, prefix, nulls);
    copy_token(cond.log_alpha.ptr(), d + 1, d, batch, c, s_d);
    copy_token(cond.beta.ptr(), d + 1, d, batch, c, b_d);
    copy_token(uncond.log_alpha.ptr(), d + 1, d, batch, c, s_null);
    copy_token(uncond.beta.ptr(), d + 1, d, batch, c, b_null);
    for (std::size_t i = 0; i < s_d.size(); ++i) {
      s_d[i] = s_null[i] + weight * (s_d[i] - s_null[i]);
      b_d[i] = b_null[i] + weight * (b_d[i] - b_null[i]);
    }
  });
}

// ---------------------------------------------------------------------------

FlowStack::FlowStack(const FlowConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  blocks_.reserve(config_.num_blocks);
  for (std::size_t t = 0; t < config_.num_blocks; ++t) {
    blocks_.emplace_back(params_, "block" + std::to_string(t), config_,
                         config_.layers_per_block[t],
                         t % 2 == 0 ? Ordering::kForward : Ordering::kReversed, rng);
  }
}

StackOutput FlowStack::forward(const Binding& p, const Tensor& x, std::span<const int> classes,
                               std::optional<HiddenTap> tap) const {
  if (tap && (tap->block >= blocks_.size() || tap->layer >= blocks_[tap->block].layer_count())) {
    throw ContractError("stack_forward: hidden tap (" + std::to_string(tap->block) + ", " +
                        std::to_string(tap->layer) + ") out of range");
  }
  StackOutput out;
  Tensor h = x;
  std::optional<Tensor> log_det;
  for (std::size_t t = 0; t < blocks_.size(); ++t) {
    const bool keep = tap && tap->block == t;
    BlockOutput bo = blocks_[t].forward(p, h, classes, keep);
    log_det = log_det ? sub(*log_det, bo.sum_log_alpha) : scale(bo.sum_log_alpha, -1.0);
    if (keep) out.hidden = bo.hidden[tap->layer];
    h = bo.z;
  }
  out.z = h;
  out.log_det = *log_det;
  return out;
}

Tensor FlowStack::inverse(const Binding& p, const Tensor& z, std::span<const int> classes) const {
  Tensor h = z;
  for (std::size_t t = blocks_.size(); t-- > 0;) h = blocks_[t].inverse(p, h, classes);
  return h;
}

Tensor FlowStack::guided_inverse(const Binding& p, const Tensor& z, std::span<const int> classes,
                                 double weight) const {
  Tensor h = z;
  for (std::size_t t = blocks_.size(); t-- > 0;) {
    h = t + 1 == blocks_.size() ? blocks_[t].inverse_guided(p, h, classes, weight)
                                : blocks_[t].inverse(p, h, classes);
  }
  return h;
}

StackOutput FlowStack::forward(const Tensor& x, std::span<const int> classes) const {
  return forward(Binding::constant(params_), x, classes);
}

Tensor FlowStack::inverse(const Tensor& z, std::span<const int> classes) const {
  return inverse(Binding::constant(params_), z, classes);
}

Tensor nf_log_density(const FlowStack& stack, const Binding& p, const Tensor& x,
                      std::span<const int> classes) {
  const std::size_t batch = x.size(0);
  const std::size_t n = stack.config().latent_size();
  const StackOutput out = stack.forward(p, x, classes);
  const Tensor sq = sum_lastdim(reshape(mul(out.z, out.z), {batch, n}));
  const double base = -0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  return add(add_scalar(scale(sq, -0.5), base), out.log_det);
}

Tensor nf_log_density(const FlowStack& stack, const Tensor& x, std::span<const int> classes) {
  return nf_log_density(stack, Binding::constant(stack.parameters()), x, classes);
}

std::vector<double> standard_normal_log_density(const Tensor& x) {
  const std::size_t batch = x.dim() == 0 ? 1 : x.size(0);
  const std::size_t n = x.numel() / batch;
  const double base = -0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  std::vector<double> out(batch, base);
  for (std::size_t b = 0; b < batch; ++b) {
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) sq += x[b * n + i] * x[b * n + i];
    out[b] -= 0.5 * sq;
  }
  return out;
}

}  // namespace simflow
