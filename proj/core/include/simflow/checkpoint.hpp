#pragma once

// Binary checkpoints:
//   "SFLW" | u32 version | u64 header length | JSON header | f64 payloads
// All integers and floats little-endian; payloads follow the header's tensor
// list in order.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "simflow/config.hpp"
#include "simflow/objective.hpp"
#include "simflow/tensor.hpp"
#include "simflow/vae.hpp"

namespace simflow {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;

  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  ExperimentConfig config;
  ImageShape image;
  std::size_t num_classes = 0;
  std::uint64_t step = 0;
  std::string rng_state;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
  const NamedTensor& at(const std::string& name) const;
};

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes, const std::string& name = "checkpoint");
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Snapshot of a training state: raw and EMA parameters, Adam moments,
/// teacher weights, collapse history and RNG state. Point-set normalization
/// statistics are stored when given.
Checkpoint capture(const TrainState& state, const ExperimentConfig& config, const ImageShape& image,
                   std::size_t num_classes, std::span<const double> data_mean = {},
                   std::span<const double> data_std = {});

/// Copies a checkpoint into a state built from the same configuration.
/// Missing tensors or shape mismatches throw std::invalid_argument naming the
/// tensor.
void restore(TrainState& state, const Checkpoint& ckpt);

}  // namespace simflow
