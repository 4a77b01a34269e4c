#include "simflow/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <type_traits>

namespace simflow {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& text) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw std::invalid_argument("config: bad integer for '" + key + "': '" + text + "'");
  }
  return v;
}

double parse_double(const std::string& key, const std::string& text) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size()) {
    throw std::invalid_argument("config: bad number for '" + key + "': '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw std::invalid_argument("config: bad boolean for '" + key + "': '" + text + "'");
}

struct Field {
  std::string key;
  std::string doc;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field field(std::string key, T ExperimentConfig::*member, std::string doc) {
  Field f;
  f.key = key;
  f.doc = std::move(doc);
  f.set = [key, member](ExperimentConfig& c, const std::string& text) {
    if constexpr (std::is_same_v<T, bool>) {
      c.*member = parse_bool(key, text);
    } else if constexpr (std::is_same_v<T, double>) {
      c.*member = parse_double(key, text);
    } else if constexpr (std::is_same_v<T, std::string>) {
      c.*member = text;
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      std::vector<std::size_t> out;
      std::stringstream ss(text);
      std::string part;
      while (std::getline(ss, part, ',')) out.push_back(parse_integer<std::size_t>(key, trim(part)));
      c.*member = std::move(out);
    } else {
      c.*member = parse_integer<T>(key, text);
    }
  };
  f.get = [member](const ExperimentConfig& c) -> std::string {
    const T& v = c.*member;
    if constexpr (std::is_same_v<T, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_same_v<T, double>) {
      return format_double(v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    } else {
      return std::to_string(v);
    }
  };
  return f;
}

const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = {
      field("seed", &C::seed, "master seed for initialization, data order and noise"),
      field("steps", &C::steps, "total optimizer steps"),
      field("batch_size", &C::batch_size, "samples per step"),
      field("dataset", &C::dataset,
            "path, or builtin: two-moons | gaussian | gaussian-mixture-K | checkerboard | toy-shapes"),
      field("dataset_format", &C::dataset_format, "auto | builtin | csv | pgm"),
      field("dataset_size", &C::dataset_size, "sample count for builtin generators"),
      field("out", &C::out, "output directory"),
      field("checkpoint_interval", &C::checkpoint_interval, "steps between checkpoints, 0 = final only"),
      field("abort_on_collapse", &C::abort_on_collapse, "stop training when the collapse flag trips"),
      field("eval_batches", &C::eval_batches, "batches averaged by evaluation"),
      field("patch_size", &C::patch_size, "patch edge in pixels (points use 1)"),
      field("token_dim", &C::token_dim, "latent channels per token"),
      field("sigma_bar", &C::sigma_bar, "fixed latent noise standard deviation"),
      field("variance_mode", &C::variance_mode, "fixed | learnable"),
      field("encoder_layernorm", &C::encoder_layernorm, "normalize each latent token"),
      field("encoder_hidden", &C::encoder_hidden, "encoder hidden widths, comma separated"),
      field("decoder_hidden", &C::decoder_hidden, "decoder hidden widths, comma separated"),
      field("vae_identity", &C::vae_identity, "parameter-free identity autoencoder"),
      field("train_vae", &C::train_vae, "update autoencoder parameters"),
      field("num_blocks", &C::num_blocks, "flow blocks"),
      field("layers_per_block", &C::layers_per_block, "transformer layers per block, comma separated"),
      field("hidden_dim", &C::hidden_dim, "flow transformer width"),
      field("num_heads", &C::num_heads, "attention heads"),
      field("mlp_ratio", &C::mlp_ratio, "MLP expansion factor"),
      field("conditional", &C::conditional, "use dataset labels for class conditioning"),
      field("noise_mode", &C::noise_mode, "none | linear | slerp | additive"),
      field("perturb_t", &C::perturb_t, "t for linear and slerp noise"),
      field("class_drop", &C::class_drop, "probability of replacing a label by the null class"),
      field("detach_flow", &C::detach_flow, "stop-gradient between latent and flow"),
      field("align", &C::align, "enable the representation alignment loss"),
      field("align_block", &C::align_block, "flow block whose hidden states are aligned"),
      field("align_layer", &C::align_layer, "layer within align_block"),
      field("align_feature_dim", &C::align_feature_dim, "teacher feature width"),
      field("reconstruction_weight", &C::reconstruction_weight, "weight of -log p(i|x)"),
      field("nf_weight", &C::nf_weight, "weight of the flow NLL"),
      field("alignment_weight", &C::alignment_weight, "weight of the alignment loss"),
      field("kl_weight", &C::kl_weight, "KL weight (learnable variance only)"),
      field("collapse_factor", &C::collapse_factor, "collapse threshold as a multiple of sigma_bar"),
      field("collapse_window", &C::collapse_window, "consecutive low steps that trip the flag"),
      field("lr", &C::lr, "learning rate"),
      field("beta1", &C::beta1, "Adam beta1"),
      field("beta2", &C::beta2, "Adam beta2"),
      field("adam_eps", &C::adam_eps, "Adam epsilon"),
      field("weight_decay", &C::weight_decay, "decoupled weight decay"),
      field("max_grad_norm", &C::max_grad_norm, "global gradient clip norm, <= 0 disables"),
      field("ema_rate", &C::ema_rate, "EMA decay"),
      field("ema_warmup", &C::ema_warmup, "ramp EMA decay as (1+t)/(10+t)"),
      field("lr_schedule", &C::lr_schedule, "constant | cosine"),
      field("lr_final", &C::lr_final, "cosine floor"),
      field("cosine_start", &C::cosine_start, "step where the cosine decay begins"),
      field("guidance_w", &C::guidance_w, "last-block guidance weight"),
      field("gamma", &C::gamma, "score step size"),
      field("use_guidance_w", &C::use_guidance_w, "enable last-block guidance"),
      field("use_score_step", &C::use_score_step, "enable the score step"),
      field("sample_count", &C::sample_count, "samples written by `sample`"),
      field("class_id", &C::class_id, "class to sample, -1 = unconditional"),
  };
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& f : fields()) k.push_back({f.key, f.doc});
    return k;
  }();
  return keys;
}

void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value) {
  find_field(key).set(config, value);
}

std::string get_config_value(const ExperimentConfig& config, const std::string& key) {
  return find_field(key).get(config);
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected `key = value`, got '" + line + "'");
    }
    try {
      set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

ExperimentConfig load_config(const std::string& path, ExperimentConfig base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string serialize_config(const ExperimentConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

std::string config_hash(const ExperimentConfig& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : serialize_config(config)) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument("config: " + key + " " + why);
  };
  if (batch_size < 2) fail("batch_size", "must be >= 2");
  if (dataset_format != "auto" && dataset_format != "builtin" && dataset_format != "csv" &&
      dataset_format != "pgm") {
    fail("dataset_format", "must be auto|builtin|csv|pgm");
  }
  if (eval_batches == 0) fail("eval_batches", "must be positive");
  parse_variance_mode(variance_mode);
  parse_noise_mode(noise_mode);
  if (!(sigma_bar >= 0.0)) fail("sigma_bar", "must be >= 0");
  if (!(perturb_t >= 0.0 && perturb_t <= 1.0)) fail("perturb_t", "must lie in [0, 1]");
  if (!(class_drop >= 0.0 && class_drop <= 1.0)) fail("class_drop", "must lie in [0, 1]");
  if (layers_per_block.size() != num_blocks) fail("layers_per_block", "needs num_blocks entries");
  if (align && (align_block >= num_blocks || align_layer >= layers_per_block[align_block])) {
    fail("align_block/align_layer", "out of range");
  }
  if (lr_schedule != "constant" && lr_schedule != "cosine") fail("lr_schedule", "must be constant|cosine");
  if (!(lr > 0.0)) fail("lr", "must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "must lie in [0, 1)");
  if (!(ema_rate >= 0.0 && ema_rate <= 1.0)) fail("ema_rate", "must lie in [0, 1]");
  if (collapse_window == 0) fail("collapse_window", "must be positive");
  if (!(guidance_w >= 0.0)) fail("guidance_w", "must be >= 0");
  if (!(gamma >= 0.0)) fail("gamma", "must be >= 0");
  if (class_id < -1) fail("class_id", "must be >= -1");
}

VaeConfig ExperimentConfig::vae_config(const ImageShape& image) const {
  VaeConfig v;
  v.image = image;
  v.patch_size = patch_size;
  v.token_dim = token_dim;
  v.variance_mode = parse_variance_mode(variance_mode);
  v.sigma_bar = sigma_bar;
  v.encoder_layernorm = encoder_layernorm;
  v.encoder_hidden = encoder_hidden;
  v.decoder_hidden = decoder_hidden;
  v.identity = vae_identity;
  v.validate();
  return v;
}

FlowConfig ExperimentConfig::flow_config(const ImageShape& image, std::size_t num_classes) const {
  const VaeConfig v = vae_config(image);
  FlowConfig f;
  f.num_blocks = num_blocks;
  f.layers_per_block = layers_per_block;
  f.hidden_dim = hidden_dim;
  f.num_heads = num_heads;
  f.mlp_ratio = mlp_ratio;
  f.token_count = v.token_count();
  f.token_dim = token_dim;
  f.num_classes = conditional ? num_classes : 0;
  f.validate();
  return f;
}

ObjectiveConfig ExperimentConfig::objective_config() const {
  ObjectiveConfig o;
  o.reconstruction_weight = reconstruction_weight;
  o.nf_weight = nf_weight;
  o.alignment_weight = alignment_weight;
  o.kl_weight = kl_weight;
  o.noise_mode = parse_noise_mode(noise_mode);
  o.perturb_t = perturb_t;
  o.class_drop = class_drop;
  o.detach_flow = detach_flow;
  o.align = align;
  o.align_tap = {align_block, align_layer};
  return o;
}

AdamWConfig ExperimentConfig::adamw_config() const {
  AdamWConfig a;
  a.lr = lr;
  a.beta1 = beta1;
  a.beta2 = beta2;
  a.eps = adam_eps;
  a.weight_decay = weight_decay;
  a.max_grad_norm = max_grad_norm;
  a.ema_rate = ema_rate;
  a.ema_warmup = ema_warmup;
  a.schedule = lr_schedule == "cosine" ? LrSchedule::kCosine : LrSchedule::kConstant;
  a.lr_final = lr_final;
  a.cosine_start = cosine_start;
  a.total_steps = steps;
  return a;
}

GuidanceConfig ExperimentConfig::guidance_config() const {
  GuidanceConfig g;
  g.weight = guidance_w;
  g.gamma = gamma;
  g.use_weight = use_guidance_w;
  g.use_score = use_score_step;
  return g;
}

}  // namespace simflow
