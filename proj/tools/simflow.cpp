// simflow: train, sample, analyze, ablate and verify from the command line.
//
// Exit codes: 0 success, 1 error, 2 usage, 3 training stopped on collapse,
// 4 verification failure.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "simflow/config.hpp"
#include "simflow/experiment.hpp"

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> steps;
  std::optional<std::string> out;
  std::optional<std::string> dataset;
  std::optional<double> sigma_bar;
  std::optional<std::string> noise_mode;
  bool detach_flow = false;
  bool align = false;
  std::optional<double> guidance_w;
  std::optional<double> gamma;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--seed", seed, "master seed");
    app->add_option("--steps", steps, "optimizer steps");
    app->add_option("--out", out, "output directory");
    app->add_option("--dataset", dataset, "dataset path or builtin name");
    app->add_option("--sigma-bar", sigma_bar, "fixed latent noise std");
    app->add_option("--noise-mode", noise_mode, "none|linear|slerp|additive");
    app->add_flag("--detach-flow", detach_flow, "stop-gradient between latent and flow");
    app->add_flag("--align", align, "enable alignment loss");
    app->add_option("--guidance-w", guidance_w, "last-block guidance weight");
    app->add_option("--gamma", gamma, "score step size");
    app->add_option("--set", sets, "extra key=value overrides")->take_all();
  }

  void apply(simflow::ExperimentConfig& c) const {
    if (seed) c.seed = *seed;
    if (steps) c.steps = *steps;
    if (out) c.out = *out;
    if (dataset) c.dataset = *dataset;
    if (sigma_bar) c.sigma_bar = *sigma_bar;
    if (noise_mode) c.noise_mode = *noise_mode;
    if (detach_flow) c.detach_flow = true;
    if (align) c.align = true;
    if (guidance_w) c.guidance_w = *guidance_w;
    if (gamma) c.gamma = *gamma;
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
      simflow::set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
  }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SimFlow: joint fixed-variance VAE and autoregressive flow training"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a model");
  std::string train_config;
  std::optional<std::string> resume;
  Overrides train_over;
  train->add_option("--config", train_config, "config file (key = value)");
  train->add_option("--resume", resume, "checkpoint to continue from");
  train_over.attach(train);

  auto* sample = app.add_subcommand("sample", "generate samples from a checkpoint");
  simflow::SampleRequest sreq;
  sample->add_option("--checkpoint", sreq.checkpoint, "checkpoint file")->required();
  sample->add_option("--out", sreq.out_dir, "output directory")->required();
  sample->add_option("--class-id", sreq.class_id, "class to sample, -1 = unconditional");
  sample->add_option("--count", sreq.count, "number of samples");
  sample->add_option("--seed", sreq.seed, "sampling seed");
  sample->add_option("--guidance-w", sreq.guidance_w, "last-block guidance weight");
  sample->add_option("--gamma", sreq.gamma, "score step size");

  auto* analyze = app.add_subcommand("analyze", "latent statistics for a checkpoint");
  std::string an_ckpt;
  std::string an_out;
  std::optional<std::string> an_dataset;
  std::optional<std::string> an_compare;
  analyze->add_option("--checkpoint", an_ckpt, "checkpoint file")->required();
  analyze->add_option("--out", an_out, "stats CSV path")->required();
  analyze->add_option("--dataset", an_dataset, "dataset override");
  analyze->add_option("--compare", an_compare, "second checkpoint for paired rows");

  auto* ablate = app.add_subcommand("ablate", "train a matrix of configurations");
  std::string matrix;
  std::string ab_out = "ablation";
  std::string ab_config;
  Overrides ab_over;
  ablate->add_option("--matrix", matrix, "matrix file: base lines, then [name] sections")->required();
  ablate->add_option("--config", ab_config, "base config file");
  ab_over.attach(ablate);

  auto* verify = app.add_subcommand("verify", "run the oracle suite against a checkpoint");
  std::string ver_ckpt;
  std::uint64_t ver_seed = 0;
  verify->add_option("--checkpoint", ver_ckpt, "checkpoint file")->required();
  verify->add_option("--seed", ver_seed, "seed for random probes");

  auto* keys = app.add_subcommand("keys", "list config keys with defaults");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      simflow::ExperimentConfig cfg;
      if (!train_config.empty()) cfg = simflow::load_config(train_config);
      train_over.apply(cfg);
      const auto r = simflow::run_train(cfg, resume);
      std::printf("steps=%llu nf_nll=%.6f reconstruction_mse=%.6f collapsed=%s checkpoint=%s\n",
                  static_cast<unsigned long long>(r.steps), r.eval.nf_nll, r.eval.recon_mse,
                  r.collapsed ? "true" : "false", r.checkpoint_path.c_str());
      return r.status == simflow::RunStatus::kCollapsed ? 3 : 0;
    }
    if (*sample) {
      const auto r = simflow::run_sample(sreq);
      std::printf("wrote %zu file(s), manifest %s\n", r.files.size(), r.manifest.c_str());
      return 0;
    }
    if (*analyze) {
      simflow::run_analyze(an_ckpt, an_dataset, an_out, an_compare);
      std::printf("wrote %s\n", an_out.c_str());
      return 0;
    }
    if (*ablate) {
      simflow::ExperimentConfig base;
      if (!ab_config.empty()) base = simflow::load_config(ab_config);
      ab_over.apply(base);
      if (ab_over.out) ab_out = *ab_over.out;
      const auto rows = simflow::run_ablation(simflow::parse_ablation_matrix(read_file(matrix), base), ab_out);
      for (const auto& r : rows) {
        std::printf("%-16s %-6s nf_nll=%.6f mse=%.6f collapsed=%s %s\n", r.name.c_str(),
                    r.ok ? "ok" : "FAILED", r.nf_nll, r.recon_mse, r.collapsed ? "true" : "false",
                    r.error.c_str());
      }
      return 0;
    }
    if (*verify) {
      bool all = true;
      for (const auto& c : simflow::run_verify(ver_ckpt, ver_seed)) {
        std::printf("%s %-28s value=%.3e tol=%.1e\n", c.pass ? "PASS" : "FAIL", c.name.c_str(),
                    c.value, c.tolerance);
        all = all && c.pass;
      }
      return all ? 0 : 4;
    }
    if (*keys) {
      const simflow::ExperimentConfig defaults;
      for (const auto& k : simflow::config_keys()) {
        std::printf("%-22s = %-12s # %s\n", k.key.c_str(),
                    simflow::get_config_value(defaults, k.key).c_str(), k.doc.c_str());
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
