#pragma once

#include <filesystem>

#include "msat/data/episode.hpp"

namespace msat {

// Dataset directory layout:
//   manifest.json  format_version=1, env, spec dims, obs shape, dtype "u8",
//                  per-episode table {offset, T, return, crc32}, seed
//   episodes.bin   per episode, contiguous little-endian:
//                  states u8 (T*C*H*W), actions u8 (T*n), rewards f32 (T)
// States are stored as bytes scaled to [0,255] and mapped back to [0,1] on
// read. Each episode chunk carries its own CRC so corruption reports name the
// offending episode.
void write_dataset(const TrajectoryDataset& dataset, const std::filesystem::path& dir);

TrajectoryDataset read_dataset(const std::filesystem::path& dir);

inline constexpr int kDatasetFormatVersion = 1;

}  // namespace msat
