#include <gtest/gtest.h>

#include <cmath>

#include "simflow/experiment.hpp"
#include "simflow/vae.hpp"
#include "test_support.hpp"

using namespace simflow;
using simflow::testing::max_abs_diff;
using simflow::testing::normal_tensor;
using simflow::testing::uniform_tensor;

namespace {

VaeConfig small_vae(double sigma_bar = 0.5) {
  VaeConfig c;
  c.image = {4, 4, 1};
  c.patch_size = 2;
  c.token_dim = 2;
  c.sigma_bar = sigma_bar;
  c.encoder_hidden = {16};
  c.decoder_hidden = {16};
  return c;
}

// Tiny joint setup on 4x4 images for the overfit oracles.
ExperimentConfig fit_config(double sigma_bar) {
  ExperimentConfig c;
  c.patch_size = 2;
  c.token_dim = 2;
  c.sigma_bar = sigma_bar;
  c.encoder_hidden = {16};
  c.decoder_hidden = {16};
  c.num_blocks = 2;
  c.layers_per_block = {1, 1};
  c.hidden_dim = 8;
  c.conditional = false;
  c.lr = 1e-2;
  c.seed = 3;
  return c;
}

Tensor fit(TrainState& state, const ExperimentConfig& cfg, const Tensor& images, int steps) {
  const auto obj = cfg.objective_config();
  for (int i = 0; i < steps; ++i) train_step(state, obj, images, {});
  return state.model.vae.encode(images).mu;
}

}  // namespace

TEST(Vae, PatchifyRoundTripAndLayout) {
  Rng rng(1);
  VaeModel vae(small_vae(), rng);
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
  const Tensor img({1, 4, 4, 1}, v);
  const auto patches = vae.patchify(img);
  ASSERT_EQ(patches.shape(), (Shape{1, 4, 4}));
  // token 1 is the top-right 2x2 patch
  EXPECT_EQ(std::vector<double>(patches.data().begin() + 4, patches.data().begin() + 8),
            (std::vector<double>{2, 3, 6, 7}));
  EXPECT_EQ(vae.unpatchify(patches).to_vector(), v);
}

TEST(Vae, ZeroImageThroughZeroedEncoderGivesBias) {
  Rng rng(2);
  VaeModel vae(small_vae(), rng);
  auto& params = vae.parameters();
  for (auto& p : params) std::fill(p.value.begin(), p.value.end(), 0.0);
  for (auto& p : params)
    if (p.name == "encoder.1.bias") p.value = {0.25, -1.5};
  const auto mu = vae.encode(Tensor::zeros({2, 4, 4, 1})).mu;
  for (std::size_t i = 0; i < mu.numel(); i += 2) {
    EXPECT_EQ(mu[i], 0.25);
    EXPECT_EQ(mu[i + 1], -1.5);
  }
}

TEST(Vae, LayerNormTokensAndIdempotence) {
  Rng rng(3);
  auto cfg = small_vae();
  cfg.token_dim = 4;
  cfg.encoder_layernorm = true;
  VaeModel vae(cfg, rng);
  const auto mu = vae.encode(uniform_tensor({3, 4, 4, 1}, rng, -1, 1)).mu;
  for (std::size_t t = 0; t < mu.numel() / 4; ++t) {
    double m = 0, s = 0;
    for (std::size_t k = 0; k < 4; ++k) m += mu[t * 4 + k];
    m /= 4;
    for (std::size_t k = 0; k < 4; ++k) s += (mu[t * 4 + k] - m) * (mu[t * 4 + k] - m);
    EXPECT_NEAR(m, 0.0, 1e-10);
    EXPECT_NEAR(std::sqrt(s / 4), 1.0, 1e-10);
  }
  EXPECT_LE(max_abs_diff(layernorm_lastdim(mu, 1e-20), mu), 1e-12);
}

TEST(Vae, ReparameterizeZeroSigmaIsExact) {
  Rng rng(4);
  const auto mu = normal_tensor({2, 3}, rng);
  EXPECT_EQ(reparameterize(mu, 0.0, rng).to_vector(), mu.to_vector());
}

TEST(Vae, ReparameterizeEmpiricalStd) {
  Rng rng(5);
  const auto mu = Tensor::full({100000}, 1.5);
  const auto x = reparameterize(mu, 0.5, rng);
  double s = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += (x[i] - 1.5) * (x[i] - 1.5);
  EXPECT_NEAR(std::sqrt(s / 1e5), 0.5, 0.01);
}

TEST(Vae, FixedVariancePerDimensionStd) {
  Rng rng(6);
  VaeModel vae(small_vae(), rng);
  const auto img = uniform_tensor({1, 4, 4, 1}, rng, -1, 1);
  const auto mu = vae.encode(img).mu;
  const std::size_t draws = 100000;
  std::vector<double> acc(mu.numel(), 0.0);
  for (std::size_t k = 0; k < draws; ++k) {
    const auto x = reparameterize(mu, 0.5, rng);
    for (std::size_t i = 0; i < mu.numel(); ++i) acc[i] += (x[i] - mu[i]) * (x[i] - mu[i]);
  }
  for (double a : acc) EXPECT_NEAR(std::sqrt(a / draws), 0.5, 0.5 * 0.02);
}

TEST(Vae, GradientThroughReparameterizeIsIdentity) {
  Rng rng(7);
  const auto mu0 = normal_tensor({4}, rng);
  Tape tape;
  const auto mu = tape.leaf(mu0);
  const auto x = reparameterize(mu, 0.5, rng);
  const auto g = tape.backward(sum(mul(x, x)));
  const auto gx = scale(x, 2.0);
  EXPECT_EQ(g.of(mu).to_vector(), gx.to_vector());
}

TEST(Vae, PerturbModes) {
  Rng rng(8);
  const auto x = normal_tensor({6}, rng);
  EXPECT_EQ(perturb(x, NoiseMode::kSlerp, 1.0, rng).to_vector(), x.to_vector());
  EXPECT_EQ(perturb(x, NoiseMode::kNone, 0.3, rng).to_vector(), x.to_vector());
  Rng a(9), b(9);
  const auto lin = perturb(x, NoiseMode::kLinear, 0.0, a);
  const auto eps = b.normals(6);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(lin[i], eps[i], 1e-15);
  EXPECT_THROW(perturb(x, NoiseMode::kLinear, 1.5, rng), DomainError);
  EXPECT_FALSE(perturb_noise_std(NoiseMode::kNone, 0.5).has_value());
  EXPECT_NEAR(*perturb_noise_std(NoiseMode::kSlerp, 0.6), 0.8, 1e-15);
}

TEST(Vae, SlerpPreservesUnitVariance) {
  Rng rng(10);
  const auto x = normal_tensor({100000}, rng);
  const auto y = perturb(x, NoiseMode::kSlerp, 0.7, rng);
  double m = 0, s = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) m += y[i];
  m /= 1e5;
  for (std::size_t i = 0; i < y.numel(); ++i) s += (y[i] - m) * (y[i] - m);
  EXPECT_NEAR(s / 1e5, 1.0, 0.01);
}

TEST(Vae, NoiseModeNamesRoundTrip) {
  for (auto m : {NoiseMode::kNone, NoiseMode::kLinear, NoiseMode::kSlerp, NoiseMode::kAdditive})
    EXPECT_EQ(parse_noise_mode(to_string(m)), m);
  EXPECT_THROW(parse_noise_mode("gaussian"), std::invalid_argument);
  EXPECT_EQ(parse_variance_mode("learnable"), VarianceMode::kLearnable);
}

TEST(Vae, DecodeIsDeterministicAndChecksShape) {
  Rng rng(11);
  VaeModel vae(small_vae(), rng);
  const auto x = normal_tensor({2, 4, 2}, rng);
  EXPECT_EQ(vae.decode(x).to_vector(), vae.decode(x).to_vector());
  EXPECT_THROW(vae.decode(Tensor::zeros({2, 3, 2})), ShapeError);
  EXPECT_THROW(vae.encode(Tensor::zeros({2, 4, 5, 1})), ShapeError);
}

TEST(Vae, ReconstructionLogLikelihood) {
  const Tensor img({1, 2, 2, 1}, {0.1, -0.4, 0.9, 0.0});
  EXPECT_EQ(reconstruction_log_likelihood(img, img).item(), 0.0);
  EXPECT_EQ(reconstruction_log_likelihood(Tensor::zeros({4}), Tensor::full({4}, 1.0)).item(), -1.0);
  const Tensor rec({1, 2, 2, 1}, {0.3, -0.1, 0.2, 0.5});
  double manual = 0;
  for (std::size_t i = 0; i < 4; ++i) manual += (img[i] - rec[i]) * (img[i] - rec[i]);
  EXPECT_NEAR(reconstruction_log_likelihood(img, rec).item(), -manual / 4, 1e-16);
}

TEST(Vae, IdentityAutoencoder) {
  VaeConfig c;
  c.image = {1, 2, 1};
  c.patch_size = 1;
  c.token_dim = 1;
  c.identity = true;
  Rng rng(12);
  VaeModel vae(c, rng);
  EXPECT_TRUE(vae.parameters().empty());
  const Tensor p({1, 1, 2, 1}, {0.3, -0.7});
  EXPECT_EQ(vae.encode(p).mu.to_vector(), p.to_vector());
  c.token_dim = 2;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(VaeFit, SingleImageWithoutNoiseIsMemorized) {
  auto cfg = fit_config(0.0);
  cfg.nf_weight = 0.0;
  auto state = make_train_state(cfg, {4, 4, 1}, 0);
  Rng rng(13);
  const auto one = uniform_tensor({1, 4, 4, 1}, rng, -1, 1);
  const auto batch = concat({one, one}, 0);
  const auto mu = fit(state, cfg, batch, 600);
  const auto rec = state.model.vae.decode_images(Binding::constant(state.model.vae.parameters()), mu);
  EXPECT_LE(-reconstruction_log_likelihood(batch, rec).item(), 1e-3);
}

TEST(VaeFit, TwoImagesStaySeparatedAndCleanDecodeWins) {
  const double sigma = 0.5;
  auto cfg = fit_config(sigma);
  // unit weight lets the NF term pull the two codes together
  cfg.reconstruction_weight = 10.0;
  auto state = make_train_state(cfg, {4, 4, 1}, 0);
  Rng rng(14);
  const auto batch = uniform_tensor({2, 4, 4, 1}, rng, -1, 1);
  const auto mu = fit(state, cfg, batch, 800);
  double dist = 0;
  const std::size_t n = mu.numel() / 2;
  for (std::size_t i = 0; i < n; ++i) dist += (mu[i] - mu[n + i]) * (mu[i] - mu[n + i]);
  EXPECT_GT(std::sqrt(dist), 2.0 * sigma * std::sqrt(static_cast<double>(n)));

  const auto vp = Binding::constant(state.model.vae.parameters());
  const double clean = -reconstruction_log_likelihood(batch, state.model.vae.decode_images(vp, mu)).item();
  double noisy = 0;
  for (int k = 0; k < 16; ++k) {
    const auto x = reparameterize(mu, 3.0 * sigma, rng);
    noisy += -reconstruction_log_likelihood(batch, state.model.vae.decode_images(vp, x)).item() / 16;
  }
  EXPECT_LT(clean, noisy);
}
