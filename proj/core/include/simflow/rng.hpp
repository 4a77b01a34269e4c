#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace simflow {

// Portable, serializable random source. std::mt19937_64 has a standardized
// output sequence; the distributions below are written out explicitly because
// the standard library ones are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller; the second variate is cached.
  double normal();
  std::vector<double> normals(std::size_t n, double stddev = 1.0);
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  /// Text snapshot of the full generator state, including the cached variate.
  std::string state() const;
  void set_state(const std::string& state);

  /// Child generator with an independent stream, derived from this one.
  Rng split();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace simflow
