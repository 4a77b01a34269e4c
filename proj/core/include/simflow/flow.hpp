#pragma once

// Stack of autoregressive affine blocks over a token sequence.
//
// Each block maps x [B, D, C] to z with
//   z_d = (x_d - beta(x_<d)) * exp(-s(x_<d)),   log alpha = s,
// where (s, beta) come from a small causal transformer that sees a learned
// start token followed by the preceding tokens. Odd blocks scan the tokens in
// reverse. Class conditioning uses adaLN-Zero modulation, so a freshly built
// block is an exact identity map.
//
// Block and stack inputs/outputs are always in canonical token order; the
// reversal for reversed blocks happens inside the block.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "simflow/nn.hpp"
#include "simflow/tensor.hpp"

namespace simflow {

/// Label used for the unconditional (null) class embedding.
inline constexpr int kNullClass = -1;

struct FlowConfig {
  std::size_t num_blocks = 4;
  std::vector<std::size_t> layers_per_block = {2, 2, 2, 4};
  std::size_t hidden_dim = 32;
  std::size_t num_heads = 2;
  std::size_t mlp_ratio = 2;
  std::size_t token_count = 16;
  std::size_t token_dim = 2;
  std::size_t num_classes = 0;  // 0 = unconditional

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  std::size_t latent_size() const { return token_count * token_dim; }
};

enum class Ordering { kForward, kReversed };

/// Raw per-token affine parameters in the block's scan order, [B, L, C].
struct AffineParams {
  Tensor log_alpha;
  Tensor beta;
};

struct BlockOutput {
  Tensor z;                    // [B, D, C], canonical order
  Tensor sum_log_alpha;        // [B]
  std::vector<Tensor> hidden;  // per-layer outputs [B, D, H], canonical order
};

class AffineBlock {
 public:
  AffineBlock(ParameterSet& params, const std::string& prefix, const FlowConfig& config,
              std::size_t layers, Ordering ordering, Rng& rng);

  Ordering ordering() const { return ordering_; }
  std::size_t layer_count() const { return layers_.size(); }

  /// Affine parameters for an already-ordered prefix x [B, L, C], L <= D.
  /// Position d only reads x[:, 0..d-1]; the last input token is unused.
  /// If `layer_outputs` is given it receives each layer's output [B, L, H].
  AffineParams predict(const Binding& p, const Tensor& x_ordered, std::span<const int> classes,
                       std::vector<Tensor>* layer_outputs = nullptr) const;

  BlockOutput forward(const Binding& p, const Tensor& x, std::span<const int> classes,
                      bool keep_hidden = false) const;

  /// Sequential inversion, one token at a time.
  Tensor inverse(const Binding& p, const Tensor& z, std::span<const int> classes) const;

  /// Inversion with guidance: per token the parameters are extrapolated from
  /// the null-class prediction toward the conditional one,
  ///   beta = beta_null + w (beta_c - beta_null),
  ///   log alpha = s_null + w (s_c - s_null).
  Tensor inverse_guided(const Binding& p, const Tensor& z, std::span<const int> classes,
                        double weight) const;

 private:
  struct Layer {
    Linear modulation;  // H -> 6H: shift/scale/gate for attention and MLP
    Linear query;
    Linear key;
    Linear value;
    Linear attn_out;
    Linear mlp_in;
    Linear mlp_out;
  };

  Tensor to_order(const Tensor& x) const;
  std::vector<std::size_t> class_rows(std::span<const int> classes, std::size_t batch) const;
  Tensor attention(const Binding& p, const Layer& layer, const Tensor& h) const;
  template <typename Combine>
  Tensor invert_tokens(const Tensor& z, Combine&& combine) const;

  FlowConfig config_;
  Ordering ordering_;
  Linear in_proj_;
  ParamId start_ = 0;      // [H]
  ParamId positions_ = 0;  // [D, H]
  ParamId class_table_ = 0;  // [num_classes + 1, H]; last row is the null class
  std::vector<Layer> layers_;
  Linear final_modulation_;  // H -> 2H
  Linear head_;              // H -> 2C
};

/// Which layer output to expose from stack_forward (for representation
/// alignment).
struct HiddenTap {
  std::size_t block = 0;
  std::size_t layer = 0;
};

struct StackOutput {
  Tensor z;        // [B, D, C]
  Tensor log_det;  // [B], log|det dz/dx| = -sum_t sum_log_alpha_t
  std::optional<Tensor> hidden;
};

class FlowStack {
 public:
  FlowStack(const FlowConfig& config, Rng& rng);

  const FlowConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  std::size_t block_count() const { return blocks_.size(); }
  const AffineBlock& block(std::size_t t) const { return blocks_[t]; }

  StackOutput forward(const Binding& p, const Tensor& x, std::span<const int> classes,
                      std::optional<HiddenTap> tap = std::nullopt) const;
  Tensor inverse(const Binding& p, const Tensor& z, std::span<const int> classes) const;
  /// Inverse with guidance applied in the last block only (the first one
  /// undone during sampling). weight = 1 is plain conditional inversion.
  Tensor guided_inverse(const Binding& p, const Tensor& z, std::span<const int> classes,
                        double weight) const;

  /// Convenience overloads that evaluate with the current parameter values.
  StackOutput forward(const Tensor& x, std::span<const int> classes) const;
  Tensor inverse(const Tensor& z, std::span<const int> classes) const;

 private:
  FlowConfig config_;
  ParameterSet params_;
  std::vector<AffineBlock> blocks_;
};

/// Exact log density under the flow with a standard-normal base, per sample:
///   -0.5 |z|^2 - (N/2) log(2 pi) + log_det,  N = D * C.  Returns [B].
Tensor nf_log_density(const FlowStack& stack, const Binding& p, const Tensor& x,
                      std::span<const int> classes);
Tensor nf_log_density(const FlowStack& stack, const Tensor& x, std::span<const int> classes);

/// Log density of a standard normal in N dims, per row of x [B, ...].
std::vector<double> standard_normal_log_density(const Tensor& x);

/// Batch-of-nulls helper.
std::vector<int> null_classes(std::size_t batch);

}  // namespace simflow
