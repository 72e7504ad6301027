#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sharelora/model.hpp"

namespace sharelora {

/// Binary layout, little-endian:
///   "SHLORA01" | u64 header_len | JSON header | u64 n_tensors |
///   n_tensors x (u32 name_len | name | u32 ndim | u64 dims[ndim] | f64 data[]) |
///   u64 FNV-1a of every preceding byte
///
/// Adapter checkpoints hold adapter matrices only (shared ones once) and
/// rebuild the frozen base from base_seed; full fine-tune checkpoints hold
/// every base tensor.
struct Checkpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline constexpr char kCheckpointMagic[8] = {'S', 'H', 'L', 'O', 'R', 'A', '0', '1'};

// Named tensors a checkpoint of this model stores, sharing storage with the model.
std::vector<NamedTensor> checkpoint_tensors(const TinyTransformer& model);

Checkpoint make_checkpoint(const TinyTransformer& model, std::uint64_t base_seed, std::uint64_t adapter_seed);

std::string encode_checkpoint(const Checkpoint& ckpt);
// Throws CheckpointError on bad magic, truncation, checksum mismatch or malformed header.
Checkpoint decode_checkpoint(const std::string& bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Rebuilds the model named by the header and loads every stored tensor.
TinyTransformer restore_model(const Checkpoint& ckpt);

}  // namespace sharelora
