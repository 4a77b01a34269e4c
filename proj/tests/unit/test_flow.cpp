#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "simflow/flow.hpp"
#include "test_support.hpp"

using namespace simflow;
using simflow::testing::jitter;
using simflow::testing::max_abs_diff;
using simflow::testing::normal_tensor;
using simflow::testing::uniform_tensor;

namespace {

FlowConfig small_config(std::size_t d, std::size_t c, std::size_t blocks, std::size_t classes = 0) {
  FlowConfig f;
  f.num_blocks = blocks;
  f.layers_per_block.assign(blocks, 1);
  f.layers_per_block.back() = 2;
  f.hidden_dim = 8;
  f.num_heads = 2;
  f.token_count = d;
  f.token_dim = c;
  f.num_classes = classes;
  return f;
}

FlowStack trained_like(const FlowConfig& cfg, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  FlowStack stack(cfg, rng);
  jitter(stack.parameters(), rng, scale);
  return stack;
}

}  // namespace

TEST(Flow, IdentityAtInit) {
  Rng rng(1);
  FlowStack stack(small_config(4, 2, 4, 3), rng);
  const auto x = normal_tensor({3, 4, 2}, rng);
  const std::vector<int> cls = {0, 2, kNullClass};
  const auto out = stack.forward(x, cls);
  EXPECT_EQ(out.z.to_vector(), x.to_vector());
  for (double v : out.log_det.to_vector()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(stack.inverse(x, cls).to_vector(), x.to_vector());
  EXPECT_EQ(stack.guided_inverse(Binding::constant(stack.parameters()), x, cls, 3.0).to_vector(),
            x.to_vector());
}

TEST(Flow, LogDensityAtModeForTwoDims) {
  Rng rng(2);
  FlowStack stack(small_config(1, 2, 2), rng);
  const auto lp = nf_log_density(stack, Tensor::zeros({1, 1, 2}), {});
  EXPECT_NEAR(lp[0], -std::log(2.0 * std::numbers::pi), 1e-15);
}

TEST(Flow, IdentityLogDensityEqualsStandardNormal) {
  Rng rng(3);
  FlowStack stack(small_config(3, 2, 4, 2), rng);
  const auto x = uniform_tensor({5, 3, 2}, rng, -3, 3);
  const std::vector<int> cls = {0, 1, 0, kNullClass, 1};
  const auto lp = nf_log_density(stack, x, cls);
  const auto ref = standard_normal_log_density(x);
  for (std::size_t b = 0; b < 5; ++b) EXPECT_NEAR(lp[b], ref[b], 1e-12);
}

TEST(Flow, SingleTokenUsesStartPrediction) {
  const auto stack = trained_like(small_config(1, 2, 1), 4);
  Rng rng(5);
  const auto x = normal_tensor({2, 1, 2}, rng);
  const auto p = Binding::constant(stack.parameters());
  const auto params = stack.block(0).predict(p, x, {});
  const auto out = stack.block(0).forward(p, x, {});
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_NEAR(out.z[i], (x[i] - params.beta[i]) * std::exp(-params.log_alpha[i]), 1e-14);
  }
}

TEST(Flow, PerTokenRecomputationMatchesMaskedPass) {
  const auto stack = trained_like(small_config(4, 2, 1), 6);
  const auto p = Binding::constant(stack.parameters());
  Rng rng(7);
  const auto x = normal_tensor({2, 4, 2}, rng);
  const auto full = stack.block(0).predict(p, x, {});
  for (std::size_t d = 0; d < 4; ++d) {
    const auto prefix = stack.block(0).predict(p, slice(x, 1, 0, d + 1), {});
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 2; ++c) {
        const std::size_t fi = (b * 4 + d) * 2 + c;
        const std::size_t pi = (b * (d + 1) + d) * 2 + c;
        EXPECT_NEAR(full.log_alpha[fi], prefix.log_alpha[pi], 1e-12);
        EXPECT_NEAR(full.beta[fi], prefix.beta[pi], 1e-12);
      }
  }
}

TEST(Flow, CausalityExactZeroDifference) {
  const auto stack = trained_like(small_config(5, 2, 1, 2), 8);
  const auto p = Binding::constant(stack.parameters());
  Rng rng(9);
  const auto x = normal_tensor({1, 5, 2}, rng);
  const std::vector<int> cls = {1};
  const auto base = stack.block(0).predict(p, x, cls);
  for (std::size_t j = 0; j < 5; ++j) {
    auto v = x.to_vector();
    v[j * 2] += 0.7;
    v[j * 2 + 1] -= 0.3;
    const auto moved = stack.block(0).predict(p, Tensor(x.shape(), v), cls);
    for (std::size_t d = 0; d <= j; ++d)
      for (std::size_t c = 0; c < 2; ++c) {
        EXPECT_EQ(moved.log_alpha[d * 2 + c], base.log_alpha[d * 2 + c]) << "j=" << j << " d=" << d;
        EXPECT_EQ(moved.beta[d * 2 + c], base.beta[d * 2 + c]);
      }
    if (j + 1 < 5) EXPECT_NE(moved.log_alpha[(j + 1) * 2], base.log_alpha[(j + 1) * 2]);
  }
}

TEST(Flow, BlockRoundTrip) {
  const auto stack = trained_like(small_config(6, 2, 2, 2), 10);
  const auto p = Binding::constant(stack.parameters());
  Rng rng(11);
  const auto z = uniform_tensor({3, 6, 2}, rng, -4, 4);
  const std::vector<int> cls = {0, 1, kNullClass};
  for (std::size_t t = 0; t < 2; ++t) {
    const auto x = stack.block(t).inverse(p, z, cls);
    EXPECT_LE(max_abs_diff(stack.block(t).forward(p, x, cls).z, z), 1e-8);
  }
}

TEST(Flow, InverseBySubstitution) {
  const auto stack = trained_like(small_config(3, 2, 1), 12);
  const auto p = Binding::constant(stack.parameters());
  Rng rng(13);
  const auto z = normal_tensor({1, 3, 2}, rng);
  std::vector<double> x(6, 0.0);
  for (std::size_t d = 0; d < 3; ++d) {
    const auto prm = stack.block(0).predict(p, Tensor({1, d + 1, 2}, std::vector<double>(x.begin(), x.begin() + 2 * (d + 1))), {});
    for (std::size_t c = 0; c < 2; ++c) {
      x[d * 2 + c] = prm.beta[d * 2 + c] + std::exp(prm.log_alpha[d * 2 + c]) * z[d * 2 + c];
    }
  }
  const auto inv = stack.block(0).inverse(p, z, {});
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(inv[i], x[i], 1e-12);
}

TEST(Flow, StackIsCompositionOfBlocks) {
  const auto stack = trained_like(small_config(4, 2, 2), 14);
  const auto p = Binding::constant(stack.parameters());
  Rng rng(15);
  const auto x = normal_tensor({2, 4, 2}, rng);
  const auto b0 = stack.block(0).forward(p, x, {});
  const auto b1 = stack.block(1).forward(p, b0.z, {});
  const auto out = stack.forward(x, {});
  EXPECT_EQ(out.z.to_vector(), b1.z.to_vector());
  for (std::size_t b = 0; b < 2; ++b) {
    EXPECT_NEAR(out.log_det[b], -(b0.sum_log_alpha[b] + b1.sum_log_alpha[b]), 1e-13);
  }
  EXPECT_EQ(stack.block(1).ordering(), Ordering::kReversed);
}

TEST(Flow, ReversedBlockDependsOnLaterTokens) {
  const auto stack = trained_like(small_config(4, 1, 2), 16);
  const auto p = Binding::constant(stack.parameters());
  Rng rng(17);
  const auto x = normal_tensor({1, 4, 1}, rng);
  auto v = x.to_vector();
  v[3] += 1.0;  // last canonical token is first in reversed scan order
  const auto a = stack.block(1).forward(p, x, {});
  const auto b = stack.block(1).forward(p, Tensor(x.shape(), v), {});
  EXPECT_NE(a.z[0], b.z[0]);
}

TEST(Flow, SingleBlockStackInverseEqualsBlockInverse) {
  const auto stack = trained_like(small_config(4, 2, 1), 18);
  Rng rng(19);
  const auto z = normal_tensor({2, 4, 2}, rng);
  EXPECT_EQ(stack.inverse(z, {}).to_vector(),
            stack.block(0).inverse(Binding::constant(stack.parameters()), z, {}).to_vector());
}

TEST(Flow, StackRoundTripHundredSeeds) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto stack = trained_like(small_config(8, 2, 4, 2), 1000 + seed, 0.2);
    Rng rng(seed);
    const auto z = uniform_tensor({2, 8, 2}, rng, -4, 4);
    const std::vector<int> cls = {static_cast<int>(seed % 2), kNullClass};
    const auto x = stack.inverse(z, cls);
    worst = std::max(worst, max_abs_diff(stack.forward(x, cls).z, z));
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(Flow, LogDetMatchesNumericalJacobian) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto stack = trained_like(small_config(3, 2, 4, 2), 2000 + seed);
    Rng rng(seed);
    const auto x0 = normal_tensor({1, 3, 2}, rng);
    const std::vector<int> cls = {static_cast<int>(seed % 2)};
    const VectorFn f = [&](const std::vector<double>& v) {
      return stack.forward(Tensor({1, 3, 2}, v), cls).z.to_vector();
    };
    const double numeric = log_abs_det(numeric_jacobian(f, x0.to_vector()), 6);
    const double analytic = stack.forward(x0, cls).log_det[0];
    EXPECT_LE(relative_error(analytic, numeric, 1.0), 1e-4) << "seed " << seed;
  }
}

TEST(Flow, LogDensityMatchesJacobianOracle) {
  const auto stack = trained_like(small_config(3, 2, 4), 3000);
  Rng rng(21);
  const auto x0 = normal_tensor({1, 3, 2}, rng);
  const VectorFn f = [&](const std::vector<double>& v) { return stack.forward(Tensor({1, 3, 2}, v), {}).z.to_vector(); };
  const auto z = f(x0.to_vector());
  double sq = 0.0;
  for (double v : z) sq += v * v;
  const double oracle = -0.5 * sq - 3.0 * std::log(2.0 * std::numbers::pi) +
                        log_abs_det(numeric_jacobian(f, x0.to_vector()), 6);
  EXPECT_LE(relative_error(nf_log_density(stack, x0, {})[0], oracle, 1.0), 1e-4);
}

TEST(Flow, GuidanceWeightOneIsConditionalInverse) {
  const auto stack = trained_like(small_config(4, 2, 2, 2), 22);
  const auto p = Binding::constant(stack.parameters());
  Rng rng(23);
  const auto z = normal_tensor({2, 4, 2}, rng);
  const std::vector<int> cls = {1, 0};
  EXPECT_EQ(stack.guided_inverse(p, z, cls, 1.0).to_vector(), stack.inverse(p, z, cls).to_vector());
}

TEST(Flow, GuidanceWeightZeroUsesNullInLastBlock) {
  const auto stack = trained_like(small_config(4, 2, 2, 2), 24);
  const auto p = Binding::constant(stack.parameters());
  Rng rng(25);
  const auto z = normal_tensor({2, 4, 2}, rng);
  const std::vector<int> cls = {1, 0};
  const auto h = stack.block(1).inverse(p, z, null_classes(2));
  const auto ref = stack.block(0).inverse(p, h, cls);
  EXPECT_LE(max_abs_diff(stack.guided_inverse(p, z, cls, 0.0), ref), 1e-12);
}

TEST(Flow, GuidedInverseFollowsExtrapolationFormula) {
  const auto stack = trained_like(small_config(3, 2, 1, 2), 26);
  const auto p = Binding::constant(stack.parameters());
  Rng rng(27);
  const auto z = normal_tensor({1, 3, 2}, rng);
  const std::vector<int> cls = {1};
  const std::vector<int> null = {kNullClass};
  const double w = 2.0;
  std::vector<double> x(6, 0.0);
  for (std::size_t d = 0; d < 3; ++d) {
    const Tensor prefix({1, d + 1, 2}, std::vector<double>(x.begin(), x.begin() + 2 * (d + 1)));
    const auto c = stack.block(0).predict(p, prefix, cls);
    const auto u = stack.block(0).predict(p, prefix, null);
    for (std::size_t k = 0; k < 2; ++k) {
      const std::size_t i = d * 2 + k;
      const double s = u.log_alpha[i] + w * (c.log_alpha[i] - u.log_alpha[i]);
      const double b = u.beta[i] + w * (c.beta[i] - u.beta[i]);
      x[i] = b + std::exp(s) * z[i];
    }
  }
  const auto got = stack.guided_inverse(p, z, cls, w);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(got[i], x[i], 1e-12);
  EXPECT_GT(max_abs_diff(got, stack.guided_inverse(p, z, cls, 1.0)), 1e-6);
}

TEST(Flow, BadClassAndShapeAreRejected) {
  Rng rng(28);
  FlowStack stack(small_config(4, 2, 2, 2), rng);
  const auto x = Tensor::zeros({1, 4, 2});
  const std::vector<int> bad = {5};
  EXPECT_THROW(stack.forward(x, bad), ContractError);
  EXPECT_THROW(stack.forward(Tensor::zeros({1, 3, 2}), {}), ShapeError);
  FlowConfig broken = small_config(4, 2, 2);
  broken.layers_per_block = {1};
  EXPECT_THROW(broken.validate(), std::invalid_argument);
}

TEST(Flow, ParameterGradientsMatchFiniteDifferences) {
  auto stack = trained_like(small_config(2, 1, 2, 2), 29, 0.2);
  Rng rng(30);
  const auto x = normal_tensor({2, 2, 1}, rng);
  const std::vector<int> cls = {0, kNullClass};
  Tape tape;
  const auto p = Binding::on_tape(stack.parameters(), tape);
  const auto grads = p.gradients(tape.backward(mean(nf_log_density(stack, p, x, cls))));
  double worst = 0.0;
  auto& params = stack.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t i = 0; i < params[k].value.size(); ++i) {
      const ScalarFn f = [&](const std::vector<double>& v) {
        const auto saved = params[k].value;
        params[k].value = v;
        const double r = mean(nf_log_density(stack, x, cls)).item();
        params[k].value = saved;
        return r;
      };
      worst = std::max(worst, relative_error(grads[k][i], central_difference(f, params[k].value, i), 1e-4));
    }
  }
  EXPECT_LE(worst, 1e-5);
}
