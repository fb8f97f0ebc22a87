#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "clipin/model.hpp"
#include "clipin/train.hpp"

namespace clipin {

// Binary layout, little-endian:
//   "CLPN" u32 version
//   u64 x 10 dims, u8 shared_pre, u64 step, u64 corpus_seed, u64 adam_t
//   u64 echo length, echo bytes
//   u64 tensor count, then per tensor:
//     u32 name length, name, u32 rank, u64 x rank shape, f64 x size payload
// Tensors: online.*, target.*, adam.m/online.*, adam.v/online.*.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorEntry {
  std::string name;
  Shape shape;
};

struct CheckpointInfo {
  std::uint32_t version = 0;
  DimsConfig dims;
  bool shared_pre = true;
  std::uint64_t step = 0;
  std::uint64_t corpus_seed = 0;
  std::uint64_t adam_t = 0;
  std::string config_echo;
  std::vector<TensorEntry> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const ModelState& state,
                     const OptimizerState& opt, const std::string& config_echo,
                     std::uint64_t corpus_seed);

struct LoadedCheckpoint {
  ModelState state;
  OptimizerState optimizer;
  CheckpointInfo info;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Header and tensor table only; payloads are skipped.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

}  // namespace clipin
