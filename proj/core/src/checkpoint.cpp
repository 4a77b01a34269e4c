#include "simflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace simflow {
namespace {

using json = nlohmann::json;

constexpr char kMagic[4] = {'S', 'F', 'L', 'W'};

template <typename T>
void put_le(std::vector<unsigned char>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

template <typename T>
T get_le(std::span<const unsigned char> in, std::size_t pos) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(in[pos + i]) << (8 * i);
  return v;
}

void add_set(std::vector<NamedTensor>& out, const std::string& prefix, const ParameterSet& set) {
  for (const auto& p : set) out.push_back({prefix + p.name, p.shape, p.value});
}

void add_buffers(std::vector<NamedTensor>& out, const std::string& prefix,
                 const std::vector<const ParameterSet*>& groups,
                 const std::vector<std::vector<double>>& buffers) {
  std::size_t i = 0;
  static const char* names[] = {"vae", "flow", "projector"};
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (const auto& p : *groups[g]) out.push_back({prefix + names[g] + "/" + p.name, p.shape, buffers[i++]});
}

void copy_into(std::vector<double>& dst, const Shape& shape, const Checkpoint& ckpt,
               const std::string& name) {
  const NamedTensor& t = ckpt.at(name);
  if (t.shape != shape) {
    throw std::invalid_argument("checkpoint: tensor " + name + " has shape " + to_string(t.shape) +
                                ", model expects " + to_string(shape));
  }
  dst = t.data;
}

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const NamedTensor& Checkpoint::at(const std::string& name) const {
  if (const auto* t = find(name)) return *t;
  throw std::invalid_argument("checkpoint: missing tensor " + name);
}

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  json header;
  header["config"] = serialize_config(ckpt.config);
  header["image"] = {ckpt.image.height, ckpt.image.width, ckpt.image.channels};
  header["num_classes"] = ckpt.num_classes;
  header["step"] = ckpt.step;
  header["rng"] = ckpt.rng_state;
  json list = json::array();
  for (const auto& t : ckpt.tensors) {
    if (numel(t.shape) != t.data.size()) {
      throw ShapeError("checkpoint: tensor " + t.name + " data does not match its shape");
    }
    list.push_back({{"name", t.name}, {"shape", t.shape}, {"length", t.data.size()}});
  }
  header["tensors"] = list;
  const std::string text = header.dump();

  std::vector<unsigned char> out(kMagic, kMagic + 4);
  put_le<std::uint32_t>(out, ckpt.version);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : ckpt.tensors)
    for (double v : t.data) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes, const std::string& name) {
  auto fail = [&](const std::string& what) -> void {
    throw std::invalid_argument(name + ": " + what);
  };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) fail("not a SFLW checkpoint");
  Checkpoint ckpt;
  ckpt.version = get_le<std::uint32_t>(bytes, 4);
  if (ckpt.version != kCheckpointVersion) {
    fail("unsupported checkpoint version " + std::to_string(ckpt.version) + " (expected " +
         std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t hlen = get_le<std::uint64_t>(bytes, 8);
  if (hlen > bytes.size() - 16) fail("truncated header");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    ckpt.config = parse_config(header.at("config").get<std::string>());
    const auto image = header.at("image").get<std::vector<std::size_t>>();
    if (image.size() != 3) fail("image shape needs 3 entries");
    ckpt.image = {image[0], image[1], image[2]};
    ckpt.num_classes = header.at("num_classes").get<std::size_t>();
    ckpt.step = header.at("step").get<std::uint64_t>();
    ckpt.rng_state = header.at("rng").get<std::string>();
    std::size_t pos = 16 + hlen;
    for (const auto& entry : header.at("tensors")) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<Shape>();
      const std::size_t len = entry.at("length").get<std::size_t>();
      if (len != numel(t.shape)) fail("tensor " + t.name + " length does not match its shape");
      if ((bytes.size() - pos) / 8 < len) fail("truncated payload for tensor " + t.name);
      t.data.resize(len);
      for (std::size_t i = 0; i < len; ++i, pos += 8) {
        t.data[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos));
      }
      ckpt.tensors.push_back(std::move(t));
    }
    if (pos != bytes.size()) fail("trailing bytes after payload");
  } catch (const json::exception& e) {
    fail(std::string("bad header: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

Checkpoint capture(const TrainState& state, const ExperimentConfig& config, const ImageShape& image,
                   std::size_t num_classes, std::span<const double> data_mean,
                   std::span<const double> data_std) {
  Checkpoint c;
  c.config = config;
  c.image = image;
  c.num_classes = num_classes;
  c.step = state.optimizer.step;
  c.rng_state = state.rng.state();
  add_set(c.tensors, "raw/vae/", state.model.vae.parameters());
  add_set(c.tensors, "raw/flow/", state.model.flow.parameters());
  if (state.model.align) {
    add_set(c.tensors, "raw/projector/", state.model.align->parameters());
    const auto& teacher = state.model.align->teacher();
    c.tensors.push_back({"teacher", {teacher.size() / state.model.align->feature_dim(),
                                     state.model.align->feature_dim()}, teacher});
  }
  const auto groups = state.groups();
  add_buffers(c.tensors, "ema/", groups, state.optimizer.ema);
  add_buffers(c.tensors, "adam_m/", groups, state.optimizer.first);
  add_buffers(c.tensors, "adam_v/", groups, state.optimizer.second);

  const auto& hist = state.monitor.history();
  NamedTensor steps{"monitor/steps", {hist.size()}, {}};
  NamedTensor values{"monitor/values", {hist.size()}, {}};
  for (const auto& [s, v] : hist) {
    steps.data.push_back(static_cast<double>(s));
    values.data.push_back(v);
  }
  c.tensors.push_back(std::move(steps));
  c.tensors.push_back(std::move(values));
  if (!data_mean.empty()) {
    c.tensors.push_back({"data/mean", {data_mean.size()}, {data_mean.begin(), data_mean.end()}});
    c.tensors.push_back({"data/stddev", {data_std.size()}, {data_std.begin(), data_std.end()}});
  }
  return c;
}

void restore(TrainState& state, const Checkpoint& ckpt) {
  static const char* names[] = {"vae", "flow", "projector"};
  auto groups = state.groups();
  std::size_t i = 0;
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (auto& p : *groups[g]) {
      const std::string n = std::string(names[g]) + "/" + p.name;
      copy_into(p.value, p.shape, ckpt, "raw/" + n);
      copy_into(state.optimizer.ema[i], p.shape, ckpt, "ema/" + n);
      copy_into(state.optimizer.first[i], p.shape, ckpt, "adam_m/" + n);
      copy_into(state.optimizer.second[i], p.shape, ckpt, "adam_v/" + n);
      ++i;
    }
  if (state.model.align) {
    const NamedTensor& t = ckpt.at("teacher");
    if (t.data != state.model.align->teacher()) {
      throw std::invalid_argument("checkpoint: teacher weights differ from the configured teacher");
    }
  }
  const auto& steps = ckpt.at("monitor/steps").data;
  const auto& values = ckpt.at("monitor/values").data;
  if (steps.size() != values.size()) throw std::invalid_argument("checkpoint: monitor history mismatch");
  std::vector<std::pair<std::uint64_t, double>> hist;
  for (std::size_t k = 0; k < steps.size(); ++k) hist.emplace_back(static_cast<std::uint64_t>(steps[k]), values[k]);
  state.monitor = CollapseMonitor::replay(state.monitor.threshold(), state.monitor.window(), hist);
  state.optimizer.step = ckpt.step;
  state.rng.set_state(ckpt.rng_state);
}

}  // namespace simflow
