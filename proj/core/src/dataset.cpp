#include "simflow/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace simflow {
namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(trim(part));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_number(const std::string& s, double& v) {
  if (s.empty()) return false;
  char* end = nullptr;
  v = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(v);
}

std::size_t count_classes(const std::vector<int>& labels) {
  int top = -1;
  for (int l : labels) {
    if (l < 0) throw std::invalid_argument("dataset: negative class label " + std::to_string(l));
    top = std::max(top, l);
  }
  return static_cast<std::size_t>(top + 1);
}

}  // namespace

std::size_t Dataset::size() const { return samples.size() / shape.pixels(); }

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t px = shape.pixels();
  std::vector<double> out(indices.size() * px);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw std::out_of_range("dataset: index out of range");
    std::copy_n(samples.data() + indices[i] * px, px, out.data() + i * px);
  }
  return Tensor({indices.size(), shape.height, shape.width, shape.channels}, std::move(out));
}

Tensor Dataset::all() const {
  return Tensor({size(), shape.height, shape.width, shape.channels}, samples);
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  if (labels.empty()) return {};
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

std::vector<double> Dataset::unstandardize(std::span<const double> points) const {
  if (kind != DatasetKind::kPoints2d) throw std::logic_error("unstandardize: not a point set");
  std::vector<double> out(points.begin(), points.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * stddev[i % 2] + mean[i % 2];
  return out;
}

// ---------------------------------------------------------------------------

Dataset points_from_raw(const std::vector<double>& xy, std::vector<int> labels) {
  if (xy.empty() || xy.size() % 2 != 0) throw std::invalid_argument("points: need n x 2 values");
  const std::size_t n = xy.size() / 2;
  if (!labels.empty() && labels.size() != n) throw std::invalid_argument("points: label count mismatch");
  Dataset d;
  d.kind = DatasetKind::kPoints2d;
  d.shape = {1, 2, 1};
  d.mean.assign(2, 0.0);
  d.stddev.assign(2, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 2; ++c) d.mean[c] += xy[i * 2 + c];
  for (auto& m : d.mean) m /= double(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      const double diff = xy[i * 2 + c] - d.mean[c];
      d.stddev[c] += diff * diff;
    }
  for (auto& s : d.stddev) s = std::max(std::sqrt(s / double(n)), kStdFloor);
  d.samples.resize(xy.size());
  for (std::size_t i = 0; i < xy.size(); ++i) d.samples[i] = (xy[i] - d.mean[i % 2]) / d.stddev[i % 2];
  d.num_classes = count_classes(labels);
  d.labels = std::move(labels);
  return d;
}

Dataset load_points_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<double> xy;
  std::vector<int> labels;
  std::string line;
  std::size_t lineno = 0;
  std::size_t rows = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    const auto f = split_csv(line);
    double x = 0.0;
    double y = 0.0;
    if (rows == 0 && xy.empty() && !f.empty() && !parse_number(f[0], x)) continue;  // header
    if (f.size() != 2 && f.size() != 3) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": expected x,y[,label], got " +
                                  std::to_string(f.size()) + " fields");
    }
    if (width == 0) width = f.size();
    if (f.size() != width) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": inconsistent field count (labels on some rows only)");
    }
    if (!parse_number(f[0], x) || !parse_number(f[1], y)) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": malformed coordinates");
    }
    xy.push_back(x);
    xy.push_back(y);
    if (f.size() == 3) {
      double l = 0.0;
      if (!parse_number(f[2], l) || l < 0 || l != std::floor(l)) {
        throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": bad label '" + f[2] + "'");
      }
      labels.push_back(static_cast<int>(l));
    }
    ++rows;
  }
  if (rows == 0) throw std::invalid_argument(path + ": no samples");
  return points_from_raw(xy, std::move(labels));
}

// ---------------------------------------------------------------------------

GrayImage parse_pgm(std::span<const unsigned char> bytes, const std::string& name) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> void {
    throw std::invalid_argument(name + ": " + what + " at byte offset " + std::to_string(pos));
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> std::size_t {
    skip_space();
    if (pos >= bytes.size()) fail("truncated header");
    if (!std::isdigit(bytes[pos])) fail("expected a number");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1u << 20) fail("header value too large");
      ++pos;
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') fail("not a binary PGM (P5)");
  pos = 2;
  GrayImage img;
  img.width = read_int();
  img.height = read_int();
  const std::size_t maxval = read_int();
  if (img.width == 0 || img.height == 0) fail("zero image size");
  if (maxval == 0 || maxval > 255) fail("unsupported maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail("truncated header");
  ++pos;
  const std::size_t need = img.width * img.height;
  if (bytes.size() - pos < need) {
    pos = bytes.size();
    fail("truncated pixel data (expected " + std::to_string(need) + " bytes)");
  }
  img.pixels.resize(need);
  for (std::size_t i = 0; i < need; ++i) {
    const unsigned v = bytes[pos + i];
    img.pixels[i] = static_cast<unsigned char>(maxval == 255 ? v : std::min(255u, v * 255u / unsigned(maxval)));
  }
  return img;
}

GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  return parse_pgm(bytes, path);
}

void write_pgm(const std::string& path, const GrayImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P5\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
}

GrayImage to_gray(std::span<const double> values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) throw std::invalid_argument("to_gray: size mismatch");
  GrayImage img{width, height, std::vector<unsigned char>(values.size())};
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::clamp((values[i] + 1.0) * 127.5, 0.0, 255.0);
    img.pixels[i] = static_cast<unsigned char>(std::lround(v));
  }
  return img;
}

Dataset load_pgm_directory(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error(dir + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::invalid_argument(dir + ": no .pgm files");

  std::map<std::string, int> label_of;
  const fs::path sidecar = fs::path(dir) / "labels.csv";
  if (fs::exists(sidecar)) {
    std::ifstream in(sidecar);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      line = trim(line);
      if (line.empty()) continue;
      const auto f = split_csv(line);
      double l = 0.0;
      if (f.size() != 2 || !parse_number(f[1], l) || l < 0 || l != std::floor(l)) {
        if (lineno == 1) continue;  // header
        throw std::invalid_argument(sidecar.string() + ":" + std::to_string(lineno) +
                                    ": expected filename,label");
      }
      label_of[f[0]] = static_cast<int>(l);
    }
  }

  Dataset d;
  d.kind = DatasetKind::kGrayscaleImages;
  for (const auto& f : files) {
    const GrayImage img = read_pgm(f.string());
    if (d.samples.empty()) {
      d.shape = {img.height, img.width, 1};
    } else if (img.height != d.shape.height || img.width != d.shape.width) {
      throw std::invalid_argument(f.string() + ": size " + std::to_string(img.width) + "x" +
                                  std::to_string(img.height) + " differs from the first image");
    }
    for (unsigned char p : img.pixels) d.samples.push_back(double(p) / 127.5 - 1.0);
    if (!label_of.empty()) {
      auto it = label_of.find(f.filename().string());
      if (it == label_of.end()) throw std::invalid_argument("labels.csv has no row for " + f.filename().string());
      d.labels.push_back(it->second);
    }
  }
  d.num_classes = count_classes(d.labels);
  return d;
}

// ---------------------------------------------------------------------------

std::vector<double> gaussian_mixture_centers(std::size_t k) {
  std::vector<double> c;
  for (std::size_t i = 0; i < k; ++i) {
    const double a = 2.0 * std::numbers::pi * double(i) / double(k);
    c.push_back(2.0 * std::cos(a));
    c.push_back(2.0 * std::sin(a));
  }
  return c;
}

Dataset make_two_moons(std::size_t count, std::uint64_t seed, double noise) {
  Rng rng(seed);
  std::vector<double> xy;
  std::vector<int> labels;
  for (std::size_t i = 0; i < count; ++i) {
    const int cls = static_cast<int>(i % 2);
    const double t = std::numbers::pi * rng.uniform();
    double x = cls == 0 ? std::cos(t) : 1.0 - std::cos(t);
    double y = cls == 0 ? std::sin(t) : 0.5 - std::sin(t);
    x += noise * rng.normal();
    y += noise * rng.normal();
    xy.push_back(x);
    xy.push_back(y);
    labels.push_back(cls);
  }
  return points_from_raw(xy, std::move(labels));
}

Dataset make_gaussian(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  return points_from_raw(rng.normals(2 * count), {});
}

Dataset make_gaussian_mixture(std::size_t k, std::size_t count, std::uint64_t seed,
                              double component_std) {
  if (k == 0) throw std::invalid_argument("gaussian-mixture: k must be positive");
  Rng rng(seed);
  const auto centers = gaussian_mixture_centers(k);
  std::vector<double> xy;
  std::vector<int> labels;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = i % k;
    xy.push_back(centers[2 * c] + component_std * rng.normal());
    xy.push_back(centers[2 * c + 1] + component_std * rng.normal());
    labels.push_back(static_cast<int>(c));
  }
  return points_from_raw(xy, std::move(labels));
}

Dataset make_checkerboard(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> xy;
  while (xy.size() < 2 * count) {
    const double x = 4.0 * rng.uniform() - 2.0;
    const double y = 4.0 * rng.uniform() - 2.0;
    const int cell = static_cast<int>(std::floor(x)) + static_cast<int>(std::floor(y));
    if ((cell % 2 + 2) % 2 == 0) {
      xy.push_back(x);
      xy.push_back(y);
    }
  }
  return points_from_raw(xy, {});
}

Dataset make_toy_shapes(std::size_t count, std::uint64_t seed, std::size_t size) {
  if (size < 4) throw std::invalid_argument("toy-shapes: size must be >= 4");
  Rng rng(seed);
  Dataset d;
  d.kind = DatasetKind::kGrayscaleImages;
  d.shape = {size, size, 1};
  d.num_classes = 2;
  d.samples.reserve(count * size * size);
  for (std::size_t i = 0; i < count; ++i) {
    const int cls = static_cast<int>(i % 2);
    const std::size_t thick = 1 + rng.index(2);
    const std::size_t at = rng.index(size - thick + 1);
    const double bright = 0.2 + 0.8 * rng.uniform();
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const std::size_t coord = cls == 0 ? y : x;
        const bool on = coord >= at && coord < at + thick;
        const double v = on ? bright : -0.8;
        d.samples.push_back(std::clamp(v + 0.05 * rng.normal(), -1.0, 1.0));
      }
    d.labels.push_back(cls);
  }
  return d;
}

Dataset load_dataset(const std::string& source, const std::string& format, std::size_t count,
                     std::uint64_t seed) {
  const bool builtin_name = source == "two-moons" || source == "gaussian" ||
                            source == "checkerboard" || source == "toy-shapes" ||
                            source.rfind("gaussian-mixture-", 0) == 0;
  std::string fmt = format;
  if (fmt == "auto") {
    if (builtin_name && !fs::exists(source)) {
      fmt = "builtin";
    } else if (fs::is_directory(source)) {
      fmt = "pgm";
    } else {
      fmt = "csv";
    }
  }
  if (fmt == "builtin") {
    if (count == 0) throw std::invalid_argument("dataset: builtin generators need dataset_size > 0");
    if (source == "two-moons") return make_two_moons(count, seed);
    if (source == "gaussian") return make_gaussian(count, seed);
    if (source == "checkerboard") return make_checkerboard(count, seed);
    if (source == "toy-shapes") return make_toy_shapes(count, seed);
    if (source.rfind("gaussian-mixture-", 0) == 0) {
      const std::string k = source.substr(17);
      if (k.empty() || !std::all_of(k.begin(), k.end(), ::isdigit)) {
        throw std::invalid_argument("dataset: bad mixture size in '" + source + "'");
      }
      return make_gaussian_mixture(std::stoul(k), count, seed);
    }
    throw std::invalid_argument("dataset: unknown builtin '" + source + "'");
  }
  if (fmt == "csv") return load_points_csv(source);
  if (fmt == "pgm") return load_pgm_directory(source);
  throw std::invalid_argument("dataset: unknown format '" + format + "'");
}

}  // namespace simflow
