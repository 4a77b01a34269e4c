#pragma once

// Datasets: 2D point sets and small grayscale image sets, from files or the
// builtin generators. Points are stored as 1x2x1 "images" so the same
// patch-token pipeline handles both.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "simflow/rng.hpp"
#include "simflow/tensor.hpp"
#include "simflow/vae.hpp"

namespace simflow {

enum class DatasetKind { kPoints2d, kGrayscaleImages };

struct Dataset {
  DatasetKind kind = DatasetKind::kPoints2d;
  ImageShape shape{1, 2, 1};
  /// Row-major [count, H * W * C], already normalized.
  std::vector<double> samples;
  /// Empty, or one label per sample.
  std::vector<int> labels;
  std::size_t num_classes = 0;
  /// Points only: per-coordinate standardization.
  std::vector<double> mean;
  std::vector<double> stddev;

  std::size_t size() const;
  Tensor batch(std::span<const std::size_t> indices) const;
  Tensor all() const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  /// Points only: standardized -> original coordinates, row-major [n, 2].
  std::vector<double> unstandardize(std::span<const double> points) const;
};

/// Floor applied to the per-coordinate standard deviation of point sets.
inline constexpr double kStdFloor = 1e-8;

/// `source` is a path or a builtin name; format is auto | builtin | csv | pgm.
/// `count` and `seed` are used by the builtin generators.
Dataset load_dataset(const std::string& source, const std::string& format, std::size_t count,
                     std::uint64_t seed);

/// "x,y[,label]" rows; an optional header line whose first field is not a
/// number is skipped.
Dataset load_points_csv(const std::string& path);
Dataset points_from_raw(const std::vector<double>& xy, std::vector<int> labels);

/// Directory of binary PGM (P5) files read in filename order, plus an optional
/// labels.csv sidecar with "filename,label" rows.
Dataset load_pgm_directory(const std::string& dir);

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<unsigned char> pixels;
};
GrayImage read_pgm(const std::string& path);
GrayImage parse_pgm(std::span<const unsigned char> bytes, const std::string& name);
void write_pgm(const std::string& path, const GrayImage& image);
/// [-1, 1] values -> 8-bit pixels (clamped, rounded).
GrayImage to_gray(std::span<const double> values, std::size_t height, std::size_t width);

// Builtin generators (raw coordinates, before standardization).
std::vector<double> gaussian_mixture_centers(std::size_t k);
Dataset make_two_moons(std::size_t count, std::uint64_t seed, double noise = 0.05);
Dataset make_gaussian(std::size_t count, std::uint64_t seed);
Dataset make_gaussian_mixture(std::size_t k, std::size_t count, std::uint64_t seed,
                              double component_std = 0.3);
Dataset make_checkerboard(std::size_t count, std::uint64_t seed);
/// 8x8 images of a horizontal (class 0) or vertical (class 1) bar with random
/// position, width and brightness on a dark background.
Dataset make_toy_shapes(std::size_t count, std::uint64_t seed, std::size_t size = 8);

}  // namespace simflow
