#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>

#include "msat/nn/optim.hpp"

namespace msat {

inline constexpr int kCheckpointFormatVersion = 1;

// Checkpoint file layout (little-endian):
//   magic "MSATCKPT" | u32 format_version | u64 header_len | header JSON
//   | f32 parameter payload | u32 crc32(payload)
// The header JSON carries the run configuration and a parameter manifest with
// names, shapes and payload offsets (in floats).
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     const nn::ParamList<float>& params);

struct LoadedCheckpoint {
  nlohmann::json config;
  std::map<std::string, nn::Tensor<float>> tensors;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Copies the matching tensors into params; throws on missing names or shape
// mismatches.
void restore_params(nn::ParamList<float>& params, const LoadedCheckpoint& ckpt);

// CRC of the parameter payload as stored in the file (determinism checks).
uint32_t checkpoint_payload_crc(const std::filesystem::path& path);

}  // namespace msat
