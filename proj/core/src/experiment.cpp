#include "simflow/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "simflow/analysis.hpp"
#include "simflow/oracles.hpp"
#include "simflow/sampling.hpp"

namespace simflow {
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kTrainStreamSalt = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kEvalSeedOffset = 1000003;

std::vector<std::size_t> eval_indices(std::size_t k, std::size_t batch, std::size_t n) {
  std::vector<std::size_t> idx(batch);
  for (std::size_t j = 0; j < batch; ++j) idx[j] = (k * batch + j) % n;
  return idx;
}

// Encoder means for a whole dataset, in chunks.
Tensor dataset_latents(const VaeModel& vae, const Dataset& data) {
  const std::size_t n = data.size();
  const std::size_t d = vae.config().token_count();
  const std::size_t c = vae.config().token_dim;
  std::vector<double> out;
  out.reserve(n * d * c);
  const Binding p = Binding::constant(vae.parameters());
  for (std::size_t start = 0; start < n; start += 256) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + 256); ++i) idx.push_back(i);
    const Tensor mu = vae.encode(p, data.batch(idx)).mu;
    out.insert(out.end(), mu.data().begin(), mu.data().end());
  }
  return Tensor({n, d, c}, std::move(out));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

struct LoadedRun {
  Checkpoint ckpt;
  TrainState state;
};

LoadedRun load_run(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  TrainState state = make_train_state(ckpt.config, ckpt.image, ckpt.num_classes);
  restore(state, ckpt);
  return {std::move(ckpt), std::move(state)};
}

}  // namespace

MetricsWriter::MetricsWriter(const std::string& path, bool append) {
  const bool has_content = append && fs::exists(path) && fs::file_size(path) > 0;
  out_.open(path, std::ios::binary | (has_content ? std::ios::app : std::ios::trunc));
  if (!out_) throw std::runtime_error("cannot open metrics file " + path);
  if (!has_content) out_ << "step,metric,value\n";
}

void MetricsWriter::write(std::uint64_t step, const std::string& metric, double value) {
  out_ << step << ',' << metric << ',' << format_double(value) << '\n';
}

// ---------------------------------------------------------------------------

TrainState make_train_state(const ExperimentConfig& config, const ImageShape& image,
                            std::size_t num_classes) {
  config.validate();
  Rng init(config.seed);
  VaeModel vae(config.vae_config(image), init);
  FlowStack flow(config.flow_config(image, num_classes), init);
  std::optional<AlignmentHead> align;
  if (config.align) {
    align.emplace(config.hidden_dim, vae.config().patch_pixels(), config.align_feature_dim, init);
  }
  TrainState s{SimFlowModel{std::move(vae), std::move(flow), std::move(align)},
               OptimizerState{},
               CollapseMonitor(config.collapse_factor * config.sigma_bar, config.collapse_window),
               Rng(config.seed ^ kTrainStreamSalt),
               LossBreakdown{}};
  const auto groups = std::as_const(s).groups();
  s.optimizer = OptimizerState::create(config.adamw_config(), groups);
  return s;
}

Dataset load_dataset(const ExperimentConfig& config) {
  Dataset d = load_dataset(config.dataset, config.dataset_format, config.dataset_size, config.seed);
  if (d.size() == 0) throw std::invalid_argument("dataset " + config.dataset + " is empty");
  if (d.kind == DatasetKind::kGrayscaleImages &&
      (d.shape.height % config.patch_size != 0 || d.shape.width % config.patch_size != 0)) {
    throw std::invalid_argument("config: image " + std::to_string(d.shape.height) + "x" +
                                std::to_string(d.shape.width) + " not divisible by patch_size " +
                                std::to_string(config.patch_size));
  }
  return d;
}

SimFlowModel ema_model(const TrainState& state) {
  SimFlowModel m = state.model;
  std::vector<ParameterSet*> groups{&m.vae.parameters(), &m.flow.parameters()};
  if (m.align) groups.push_back(&m.align->parameters());
  load_ema(state.optimizer, groups);
  return m;
}

EvalResult evaluate(const TrainState& state, const ExperimentConfig& config, const Dataset& data,
                    bool use_ema) {
  const SimFlowModel model = use_ema ? ema_model(state) : state.model;
  ObjectiveConfig oc = config.objective_config();
  oc.class_drop = 0.0;
  oc.align = false;
  Rng rng(config.seed + kEvalSeedOffset);
  const ModelBindings b{Binding::constant(model.vae.parameters()),
                        Binding::constant(model.flow.parameters()), std::nullopt};
  EvalResult r;
  for (std::size_t k = 0; k < config.eval_batches; ++k) {
    const auto idx = eval_indices(k, config.batch_size, data.size());
    const Tensor images = data.batch(idx);
    const auto labels = data.batch_labels(idx);
    const JointLoss jl = joint_loss(model, b, oc, images, labels, rng);
    r.nf_nll += jl.values.nf_nll;
    r.recon_mse += -reconstruction_log_likelihood(model.vae.patchify(images),
                                                  model.vae.decode(b.vae, jl.mu))
                       .item();
    r.collapse_metric += collapse_metric(jl.mu);
  }
  const double n = double(config.eval_batches);
  r.nf_nll /= n;
  r.recon_mse /= n;
  r.collapse_metric /= n;
  return r;
}

TrainResult train_loop(TrainState& state, const ExperimentConfig& config, const Dataset& data,
                       MetricsWriter* metrics, const std::string& checkpoint_path) {
  const ObjectiveConfig oc = config.objective_config();
  const bool train_vae = config.train_vae && !config.vae_identity;
  std::vector<std::size_t> idx(config.batch_size);
  TrainResult result;
  while (state.step() < config.steps) {
    for (auto& i : idx) i = state.rng.index(data.size());
    const Tensor images = data.batch(idx);
    const auto labels = data.batch_labels(idx);
    const StepResult r = train_step(state, oc, images, labels, train_vae);
    const std::uint64_t step = state.step();
    if (metrics && metrics->is_open()) {
      metrics->write(step, "loss.total", r.loss.total);
      metrics->write(step, "loss.reconstruction_mse", -r.loss.reconstruction_ll);
      metrics->write(step, "loss.nf_nll", r.loss.nf_nll);
      if (oc.align) metrics->write(step, "loss.alignment", r.loss.alignment);
      if (r.loss.entropy_constant) metrics->write(step, "entropy_constant", *r.loss.entropy_constant);
      if (parse_variance_mode(config.variance_mode) == VarianceMode::kLearnable) {
        metrics->write(step, "loss.kl", r.loss.kl);
      }
      metrics->write(step, "collapse.metric", r.collapse_metric);
      metrics->write(step, "collapse.flag", r.collapsed ? 1.0 : 0.0);
      metrics->write(step, "optim.grad_norm", r.update.grad_norm);
      metrics->write(step, "optim.lr", r.update.lr);
    }
    ++result.steps;
    result.last_loss = r.loss;
    result.collapse_metric = r.collapse_metric;
    if (!checkpoint_path.empty() && config.checkpoint_interval > 0 &&
        step % config.checkpoint_interval == 0) {
      save_checkpoint(checkpoint_path,
                      capture(state, config, data.shape, data.num_classes, data.mean, data.stddev));
    }
    if (r.collapsed && config.abort_on_collapse) {
      result.status = RunStatus::kCollapsed;
      break;
    }
  }
  result.collapsed = state.monitor.collapsed();
  return result;
}

TrainResult run_train(const ExperimentConfig& config_in, const std::optional<std::string>& resume) {
  ExperimentConfig config = config_in;
  std::optional<Checkpoint> ckpt;
  if (resume) {
    ckpt = load_checkpoint(*resume);
    ExperimentConfig merged = ckpt->config;
    merged.steps = config.steps;
    merged.out = config.out;
    merged.checkpoint_interval = config.checkpoint_interval;
    merged.abort_on_collapse = config.abort_on_collapse;
    config = merged;
  }
  config.validate();
  const Dataset data = load_dataset(config);
  const std::size_t classes = config.conditional ? data.num_classes : 0;
  TrainState state = make_train_state(config, data.shape, classes);
  if (ckpt) {
    if (!(ckpt->image == data.shape)) throw std::invalid_argument("resume: dataset shape differs from checkpoint");
    restore(state, *ckpt);
  }

  fs::create_directories(config.out);
  const fs::path out(config.out);
  write_text(out / "config.txt", serialize_config(config));
  MetricsWriter metrics((out / "metrics.csv").string(), resume.has_value());
  const std::string ckpt_path = (out / "checkpoint.sflw").string();
  TrainResult result = train_loop(state, config, data, &metrics, ckpt_path);
  metrics.flush();
  save_checkpoint(ckpt_path, capture(state, config, data.shape, classes, data.mean, data.stddev));
  result.checkpoint_path = ckpt_path;
  result.eval = evaluate(state, config, data, true);

  MetricsWriter eval((out / "eval.csv").string());
  eval.write(state.step(), "eval.nf_nll", result.eval.nf_nll);
  eval.write(state.step(), "eval.reconstruction_mse", result.eval.recon_mse);
  eval.write(state.step(), "eval.collapse_metric", result.eval.collapse_metric);
  eval.write(state.step(), "train.collapsed", result.collapsed ? 1.0 : 0.0);
  return result;
}

// ---------------------------------------------------------------------------

SampleResult run_sample(const SampleRequest& req) {
  LoadedRun run = load_run(req.checkpoint);
  const ExperimentConfig& cfg = run.ckpt.config;
  const SimFlowModel model = ema_model(run.state);
  const int class_id = req.class_id.value_or(cfg.class_id);
  const std::size_t classes = model.flow.config().num_classes;
  if (class_id != kNullClass && (class_id < 0 || static_cast<std::size_t>(class_id) >= classes)) {
    throw std::invalid_argument("sample: class_id " + std::to_string(class_id) +
                                " out of range (model has " + std::to_string(classes) + " classes)");
  }
  GuidanceConfig g = cfg.guidance_config();
  if (req.guidance_w) g.weight = *req.guidance_w;
  if (req.gamma) g.gamma = *req.gamma;
  g.validate();
  const std::size_t count = req.count.value_or(cfg.sample_count);
  const std::uint64_t seed = req.seed.value_or(cfg.seed);

  fs::create_directories(req.out_dir);
  Rng rng(seed);
  const Binding vp = Binding::constant(model.vae.parameters());
  const Binding fp = Binding::constant(model.flow.parameters());
  SampleResult result;
  if (count > 0) {
    const Tensor images = generate(model.vae, vp, model.flow, fp, class_id, g, rng, count);
    const ImageShape& im = run.ckpt.image;
    const bool points = run.ckpt.find("data/mean") != nullptr;
    if (points) {
      const auto& mean = run.ckpt.at("data/mean").data;
      const auto& sd = run.ckpt.at("data/stddev").data;
      std::ostringstream csv;
      csv << "x,y\n";
      for (std::size_t i = 0; i < count; ++i) {
        csv << format_double(images[i * 2] * sd[0] + mean[0]) << ','
            << format_double(images[i * 2 + 1] * sd[1] + mean[1]) << '\n';
      }
      const fs::path p = fs::path(req.out_dir) / "samples.csv";
      write_text(p, csv.str());
      result.files.push_back(p.filename().string());
    } else {
      if (im.channels != 1) throw std::invalid_argument("sample: PGM output needs 1 channel");
      const std::size_t px = im.pixels();
      for (std::size_t i = 0; i < count; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%05zu.pgm", i);
        const std::span<const double> values(images.ptr() + i * px, px);
        write_pgm((fs::path(req.out_dir) / name).string(), to_gray(values, im.height, im.width));
        result.files.emplace_back(name);
      }
    }
  }
  nlohmann::json manifest;
  manifest["seed"] = seed;
  manifest["config_hash"] = config_hash(cfg);
  manifest["checkpoint_step"] = run.ckpt.step;
  manifest["class_id"] = class_id;
  manifest["count"] = count;
  manifest["guidance"] = {{"weight", g.weight},
                          {"gamma", g.gamma},
                          {"use_weight", g.use_weight},
                          {"use_score", g.use_score}};
  manifest["files"] = result.files;
  result.manifest = (fs::path(req.out_dir) / "manifest.json").string();
  write_text(result.manifest, manifest.dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------------------

namespace {

void analyze_one(MetricsWriter& out, const std::string& prefix, const LoadedRun& run,
                 const Dataset& data) {
  const SimFlowModel model = ema_model(run.state);
  const VaeConfig& vc = model.vae.config();
  const std::uint64_t step = run.ckpt.step;
  if (!(data.shape == vc.image)) {
    throw std::invalid_argument("analyze: dataset shape does not match the checkpoint");
  }
  const Binding vp = Binding::constant(model.vae.parameters());
  const Binding fp = Binding::constant(model.flow.parameters());
  const Tensor all = data.all();
  const Tensor mu = dataset_latents(model.vae, data);

  const Tensor patches = model.vae.patchify(all);
  out.write(step, prefix + "reconstruction_mse",
            -reconstruction_log_likelihood(patches, model.vae.decode(vp, mu)).item());
  const Tensor logp = nf_log_density(model.flow, fp, mu, {});
  double nll = 0.0;
  for (double v : logp.data()) nll -= v;
  out.write(step, prefix + "nf_nll_mu", nll / double(logp.numel() * vc.latent_size()));
  out.write(step, prefix + "collapse_metric", collapse_metric(mu));

  if (vc.grid_rows() >= 2 && vc.grid_cols() >= 2) {
    const LatentStats s = latent_stats(mu, vc.grid_rows(), vc.grid_cols());
    out.write(step, prefix + "spectral_entropy", s.spectral_entropy);
    out.write(step, prefix + "high_freq_ratio", s.high_freq_ratio);
    out.write(step, prefix + "total_variation", s.total_variation);
    out.write(step, prefix + "autocorrelation_lag1", s.autocorrelation_lag1);
    out.write(step, prefix + "degenerate_sequences", double(s.degenerate_sequences));
  }

  const std::vector<double> levels = {0.0, 0.1, 0.25, 0.5, 0.75, 1.0};
  const std::size_t eval_n = std::min<std::size_t>(data.size(), 256);
  std::vector<std::size_t> idx(eval_n);
  for (std::size_t i = 0; i < eval_n; ++i) idx[i] = i;
  for (const auto& row : noise_robustness_sweep(model.vae, vp, data.batch(idx), levels, 8, run.ckpt.config.seed)) {
    out.write(step, prefix + "robustness_mse@" + format_double(row.level), row.mse);
  }
  if (data.size() >= 2) {
    const auto trace = latent_interpolation(model.vae, vp, &model.flow, &fp, data.batch(std::vector<std::size_t>{0}),
                                            data.batch(std::vector<std::size_t>{1}), 5);
    for (std::size_t i = 0; i < trace.t.size(); ++i) {
      out.write(step, prefix + "interpolation_nf_nll@" + format_double(trace.t[i]), trace.nf_nll[i]);
    }
  }
}

}  // namespace

void run_analyze(const std::string& checkpoint, const std::optional<std::string>& dataset,
                 const std::string& out_path, const std::optional<std::string>& compare) {
  const LoadedRun run = load_run(checkpoint);
  ExperimentConfig dcfg = run.ckpt.config;
  if (dataset) {
    dcfg.dataset = *dataset;
    dcfg.dataset_format = "auto";
  }
  const Dataset data = load_dataset(dcfg);
  if (data.size() == 0) throw std::invalid_argument("analyze: empty dataset");
  if (const auto parent = fs::path(out_path).parent_path(); !parent.empty()) fs::create_directories(parent);
  MetricsWriter out(out_path);
  if (!compare) {
    analyze_one(out, "", run, data);
    return;
  }
  analyze_one(out, "a.", run, data);
  analyze_one(out, "b.", load_run(*compare), data);
}

// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, ExperimentConfig>> parse_ablation_matrix(
    const std::string& text, const ExperimentConfig& base_in) {
  std::string base_text;
  std::vector<std::pair<std::string, std::string>> sections;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = line.substr(0, line.find('#'));
    t.erase(0, t.find_first_not_of(" \t\r"));
    t.erase(t.find_last_not_of(" \t\r") + 1);
    if (!t.empty() && t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) {
        throw std::invalid_argument("matrix line " + std::to_string(lineno) + ": bad section header");
      }
      sections.emplace_back(t.substr(1, t.size() - 2), "");
      continue;
    }
    (sections.empty() ? base_text : sections.back().second) += line + "\n";
  }
  const ExperimentConfig base = parse_config(base_text, base_in);
  std::vector<std::pair<std::string, ExperimentConfig>> out;
  for (const auto& [name, body] : sections) {
    for (const auto& [other, unused] : out)
      if (other == name) throw std::invalid_argument("matrix: duplicate entry [" + name + "]");
    out.emplace_back(name, parse_config(body, base));
  }
  if (out.empty()) out.emplace_back("base", base);
  return out;
}

std::vector<AblationRow> run_ablation(
    const std::vector<std::pair<std::string, ExperimentConfig>>& matrix, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::vector<AblationRow> rows;
  for (const auto& [name, cfg_in] : matrix) {
    AblationRow row;
    row.name = name;
    try {
      ExperimentConfig cfg = cfg_in;
      cfg.out = (fs::path(out_dir) / name).string();
      const TrainResult r = run_train(cfg);
      row.ok = true;
      row.nf_nll = r.eval.nf_nll;
      row.recon_mse = r.eval.recon_mse;
      row.collapsed = r.collapsed;
      row.collapse_metric = r.eval.collapse_metric;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(row);
  }
  std::ostringstream csv;
  csv << "name,status,nf_nll,reconstruction_mse,collapsed,collapse_metric,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    csv << r.name << ',' << (r.ok ? "ok" : "failed") << ',' << format_double(r.nf_nll) << ','
        << format_double(r.recon_mse) << ',' << (r.collapsed ? "true" : "false") << ','
        << format_double(r.collapse_metric) << ',' << err << '\n';
  }
  write_text(fs::path(out_dir) / "ablation.csv", csv.str());
  return rows;
}

// ---------------------------------------------------------------------------

std::vector<VerifyCheck> run_verify(const std::string& checkpoint, std::uint64_t seed) {
  const LoadedRun run = load_run(checkpoint);
  const SimFlowModel& model = run.state.model;
  const FlowStack& flow = model.flow;
  const FlowConfig& fc = flow.config();
  const std::size_t n = fc.latent_size();
  const Binding fp = Binding::constant(flow.parameters());
  Rng rng(seed);
  std::vector<VerifyCheck> checks;

  {
    const std::size_t batch = 8;
    const Tensor z({batch, fc.token_count, fc.token_dim}, rng.normals(batch * n));
    const auto classes = null_classes(batch);
    const Tensor back = flow.forward(fp, flow.inverse(fp, z, classes), classes).z;
    double err = 0.0;
    for (std::size_t i = 0; i < z.numel(); ++i) err = std::max(err, std::abs(back[i] - z[i]));
    checks.push_back({"invertibility_max_abs", err <= 1e-6, err, 1e-6});
  }
  {
    double worst = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
      const std::vector<double> x0 = rng.normals(n);
      const auto f = [&](const std::vector<double>& v) {
        return flow.forward(fp, Tensor({1, fc.token_count, fc.token_dim}, v), {}).z.to_vector();
      };
      const double numeric = log_abs_det(numeric_jacobian(f, x0), n);
      const double analytic =
          flow.forward(fp, Tensor({1, fc.token_count, fc.token_dim}, x0), {}).log_det.item();
      worst = std::max(worst, relative_error(analytic, numeric, 1.0));
    }
    checks.push_back({"log_det_vs_numeric_jacobian", worst <= 1e-4, worst, 1e-4});
  }
  {
    // Score gradient against finite differences of the log density.
    const std::vector<double> x0 = rng.normals(n);
    const Tensor x({1, fc.token_count, fc.token_dim}, x0);
    const Tensor g = log_density_gradient(flow, fp, x, {});
    const ScalarFn f = [&](const std::vector<double>& v) {
      return nf_log_density(flow, fp, Tensor({1, fc.token_count, fc.token_dim}, v), {}).item();
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < std::min<std::size_t>(n, 16); ++i) {
      worst = std::max(worst, relative_error(g[i], central_difference(f, x0, i), 1e-4));
    }
    checks.push_back({"score_gradient_vs_fd", worst <= 1e-5, worst, 1e-5});
  }
  {
    // Joint-loss parameter gradients on a two-sample batch, sampled coordinates.
    ExperimentConfig cfg = run.ckpt.config;
    const Dataset data = load_dataset(cfg);
    const std::vector<std::size_t> idx{0, std::min<std::size_t>(1, data.size() - 1)};
    const Tensor images = data.batch(idx);
    const auto labels = data.batch_labels(idx);
    ObjectiveConfig oc = cfg.objective_config();
    oc.class_drop = 0.0;
    SimFlowModel m = model;
    auto groups = std::vector<ParameterSet*>{&m.vae.parameters(), &m.flow.parameters()};
    if (m.align) groups.push_back(&m.align->parameters());
    const Rng noise(seed + 17);
    auto loss_value = [&]() {
      Rng r = noise;
      ModelBindings b{Binding::constant(m.vae.parameters()), Binding::constant(m.flow.parameters()),
                      m.align ? std::optional(Binding::constant(m.align->parameters())) : std::nullopt};
      return joint_loss(m, b, oc, images, labels, r).values.total;
    };
    Tape tape;
    ModelBindings b{Binding::on_tape(m.vae.parameters(), tape),
                    Binding::on_tape(m.flow.parameters(), tape),
                    m.align ? std::optional(Binding::on_tape(m.align->parameters(), tape)) : std::nullopt};
    Rng r = noise;
    const Gradients grads = tape.backward(joint_loss(m, b, oc, images, labels, r).total);
    std::vector<std::vector<std::vector<double>>> analytic{b.vae.gradients(grads), b.flow.gradients(grads)};
    if (b.projector) analytic.push_back(b.projector->gradients(grads));

    double worst = 0.0;
    for (int k = 0; k < 48; ++k) {
      const std::size_t g = rng.index(groups.size());
      if (groups[g]->empty()) continue;
      const std::size_t p = rng.index(groups[g]->size());
      auto& value = (*groups[g])[p].value;
      const std::size_t j = rng.index(value.size());
      const double v0 = value[j];
      value[j] = v0 + 1e-5;
      const double up = loss_value();
      value[j] = v0 - 1e-5;
      const double down = loss_value();
      value[j] = v0;
      worst = std::max(worst, relative_error(analytic[g][p][j], (up - down) / 2e-5, 1e-4));
    }
    checks.push_back({"joint_loss_gradient_vs_fd", worst <= 1e-5, worst, 1e-5});
  }
  return checks;
}

}  // namespace simflow
