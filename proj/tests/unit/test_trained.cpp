// Oracles that need a trained model. Each test trains its own small model.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "simflow/analysis.hpp"
#include "simflow/experiment.hpp"
#include "simflow/sampling.hpp"
#include "test_support.hpp"
#include "tiny_run.hpp"

using namespace simflow;
using simflow::testing::scratch_dir;
namespace fs = std::filesystem;

namespace {

TrainState train(const ExperimentConfig& c, const Dataset& data) {
  TrainState st = make_train_state(c, data.shape, data.num_classes);
  train_loop(st, c, data, nullptr, "");
  return st;
}

ExperimentConfig toy(std::uint64_t seed, std::uint64_t steps) {
  ExperimentConfig c;
  c.seed = seed;
  c.steps = steps;
  c.dataset = "toy-shapes";
  c.dataset_size = 512;
  c.batch_size = 16;
  c.encoder_hidden = {32};
  c.decoder_hidden = {32};
  c.num_blocks = 4;
  c.layers_per_block = {1, 1, 1, 1};
  c.hidden_dim = 16;
  c.reconstruction_weight = 2.0;
  return c;
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

}  // namespace

TEST(TrainedToy, GuidanceClassifierAndRobustness) {
  const auto c = toy(11, 1500);
  const Dataset data = load_dataset(c);
  const TrainState st = train(c, data);
  const SimFlowModel m = ema_model(st);
  const auto fp = Binding::constant(m.flow.parameters());
  const auto vp = Binding::constant(m.vae.parameters());
  const auto& fc = m.flow.config();

  // w = 2 moves away from w = 1. The first scanned token of the last block
  // sees only the start token, so with z = 0 it sits at beta_null + w d.
  {
    const AffineBlock& last = m.flow.block(m.flow.block_count() - 1);
    Rng rng(4);
    const Tensor z({8, fc.token_count, fc.token_dim}, rng.normals(8 * fc.latent_size()));
    const std::vector<int> cls(8, 1);
    EXPECT_GT(simflow::testing::max_abs_diff(last.inverse_guided(fp, z, cls, 2.0), last.inverse_guided(fp, z, cls, 1.0)), 1e-6);

    const Tensor zero = Tensor::zeros({1, fc.token_count, fc.token_dim});
    const std::vector<int> one = {1};
    const auto pc = last.predict(fp, zero, one);
    const auto pn = last.predict(fp, zero, null_classes(1));
    const std::size_t first = last.ordering() == Ordering::kForward ? 0 : fc.token_count - 1;
    double prev = -INFINITY;
    for (const double w : {1.0, 1.5, 2.0, 2.5, 3.0}) {
      const Tensor x = last.inverse_guided(fp, zero, one, w);
      double along = 0;
      for (std::size_t k = 0; k < fc.token_dim; ++k) {
        const double d = pc.beta[k] - pn.beta[k];
        along += x[first * fc.token_dim + k] * d;
      }
      EXPECT_GT(along, prev) << "w=" << w;
      prev = along;
    }
  }

  // 5-NN fit on the real images labels 100 class-conditional samples per class
  {
    const Tensor real = data.all();
    const std::size_t px = real.numel() / data.size();
    GuidanceConfig g;
    g.weight = 1.5;
    std::size_t hits = 0, total = 0;
    Rng rng(5);
    for (int cls = 0; cls < 2; ++cls) {
      const Tensor imgs = generate(m.vae, vp, m.flow, fp, cls, g, rng, 100);
      for (std::size_t s = 0; s < 100; ++s) {
        const auto q = imgs.data().subspan(s * px, px);
        std::vector<std::pair<double, int>> nn;
        for (std::size_t r = 0; r < data.size(); ++r)
          nn.emplace_back(sq_dist(q, real.data().subspan(r * px, px)), data.labels[r]);
        std::partial_sort(nn.begin(), nn.begin() + 5, nn.end());
        int votes = 0;
        for (int k = 0; k < 5; ++k) votes += nn[k].second == cls;
        hits += votes >= 3;
        ++total;
      }
    }
    EXPECT_GE(double(hits) / double(total), 0.8);
  }

  // reconstruction error grows with latent noise
  {
    std::vector<std::size_t> idx(128);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::vector<double> levels = {0.0, 0.1, 0.25, 0.5, 0.75, 1.0};
    const auto rows = noise_robustness_sweep(m.vae, vp, data.batch(idx), levels, 8, 3);
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_GE(rows[i].mse, rows[i - 1].mse) << "s=" << rows[i].level;
  }
}

TEST(TrainedPoints, TwoMoonsSamplesStayNearData) {
  ExperimentConfig c;
  c.out = scratch_dir("trained_moons").string();
  c.dataset = "two-moons";
  c.dataset_size = 4096;
  c.batch_size = 128;
  c.patch_size = 1;
  c.token_dim = 1;
  c.vae_identity = true;
  c.sigma_bar = 0.1;
  c.conditional = false;
  c.layers_per_block = {1, 1, 1, 1};
  c.hidden_dim = 16;
  c.steps = 1500;
  const auto r = run_train(c);
  SampleRequest req;
  req.checkpoint = r.checkpoint_path;
  req.out_dir = (fs::path(c.out) / "samples").string();
  req.count = 5000;
  run_sample(req);

  // training points back in raw coordinates
  const Dataset data = load_dataset(c);
  std::vector<double> raw(data.samples.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = data.samples[i] * data.stddev[i % 2] + data.mean[i % 2];

  std::ifstream in(fs::path(req.out_dir) / "samples.csv");
  std::string line;
  std::getline(in, line);
  std::size_t near = 0, n = 0;
  while (std::getline(in, line)) {
    double x, y;
    char comma;
    std::istringstream(line) >> x >> comma >> y;
    double best = INFINITY;
    for (std::size_t k = 0; k + 1 < raw.size(); k += 2)
      best = std::min(best, (raw[k] - x) * (raw[k] - x) + (raw[k + 1] - y) * (raw[k + 1] - y));
    near += std::sqrt(best) <= 0.3;
    ++n;
  }
  ASSERT_EQ(n, 5000u);
  EXPECT_GE(double(near) / double(n), 0.95);
}

// Midpoints between the two clusters decode closer to a cluster mean with
// fixed variance than with learned variance.
TEST(TrainedPoints, FixedVarianceMidpointsStayNearClusters) {
  double err[2] = {0, 0};
  const int seeds = 20;
  for (int s = 0; s < seeds; ++s) {
    for (int learnable = 0; learnable < 2; ++learnable) {
      ExperimentConfig c;
      c.seed = 300 + s;
      c.dataset = "gaussian-mixture-2";
      c.dataset_size = 1024;
      c.batch_size = 64;
      c.patch_size = 1;
      c.token_dim = 1;
      c.encoder_hidden = {16};
      c.decoder_hidden = {16};
      c.num_blocks = 2;
      c.layers_per_block = {1, 1};
      c.hidden_dim = 8;
      c.conditional = false;
      c.steps = 1500;
      // at unit weight the learnable model decodes everything to the origin
      c.reconstruction_weight = 10.0;
      c.sigma_bar = 0.5;
      if (learnable) c.variance_mode = "learnable";
      const Dataset data = load_dataset(c);
      const TrainState st = train(c, data);
      const SimFlowModel m = ema_model(st);
      const auto vp = Binding::constant(m.vae.parameters());

      double mean[2][2] = {{0, 0}, {0, 0}};
      double cnt[2] = {0, 0};
      for (std::size_t i = 0; i < data.size(); ++i) {
        const int l = data.labels[i];
        mean[l][0] += data.samples[2 * i];
        mean[l][1] += data.samples[2 * i + 1];
        ++cnt[l];
      }
      for (int l = 0; l < 2; ++l)
        for (int k = 0; k < 2; ++k) mean[l][k] /= cnt[l];

      // pairs (0, 1), (2, 3), ... alternate clusters
      for (std::size_t p = 0; p < 16; ++p) {
        const std::vector<std::size_t> ia = {2 * p}, ib = {2 * p + 1};
        const auto tr = latent_interpolation(m.vae, vp, nullptr, nullptr, data.batch(ia), data.batch(ib), 3);
        const auto mid = tr.images.data().subspan(2, 2);
        const double d = std::min(sq_dist(mid, mean[0]), sq_dist(mid, mean[1]));
        err[learnable] += d / (16.0 * seeds);
      }
    }
  }
  EXPECT_LT(err[0], err[1]) << "fixed " << err[0] << " learnable " << err[1];
}

TEST(Ablation, SigmaGridRunsToCompletion) {
  const auto dir = scratch_dir("ablate_sigma");
  auto base = simflow::testing::tiny_config(dir);
  base.steps = 5;
  std::string text;
  for (const char* s : {"0.1", "0.25", "0.5", "0.75", "1.0"}) text += std::string("[sigma_") + s + "]\nsigma_bar = " + s + "\n";
  const auto rows = run_ablation(parse_ablation_matrix(text, base), dir.string());
  ASSERT_EQ(rows.size(), 5u);
  for (const auto& r : rows) {
    EXPECT_TRUE(r.ok) << r.name << ": " << r.error;
    EXPECT_TRUE(std::isfinite(r.nf_nll) && std::isfinite(r.recon_mse)) << r.name;
  }
}
