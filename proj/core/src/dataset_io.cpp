#include "msat/data/dataset_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "msat/crc32.hpp"
#include "msat/errors.hpp"

namespace msat {

namespace {

using nlohmann::json;

std::vector<uint8_t> episode_bytes(const Episode& ep, const ObsShape& obs, int32_t n) {
  const int64_t t = ep.length();
  const int64_t obs_len = obs.numel();
  std::vector<uint8_t> buf;
  buf.reserve(static_cast<size_t>(t * (obs_len + n) + t * 4));
  for (const auto& ts : ep.steps) {
    for (float v : ts.state) {
      buf.push_back(static_cast<uint8_t>(std::lround(v * 255.0f)));
    }
  }
  for (const auto& ts : ep.steps) {
    for (int32_t a : ts.action) buf.push_back(static_cast<uint8_t>(a));
  }
  for (const auto& ts : ep.steps) {
    uint8_t raw[4];
    std::memcpy(raw, &ts.reward, 4);  // little-endian host assumed
    buf.insert(buf.end(), raw, raw + 4);
  }
  return buf;
}

}  // namespace

void write_dataset(const TrajectoryDataset& dataset, const std::filesystem::path& dir) {
  dataset.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);

  std::ofstream bin(dir / "episodes.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot open " + (dir / "episodes.bin").string() + " for writing");

  json episodes = json::array();
  int64_t offset = 0;
  for (const auto& ep : dataset.episodes) {
    const auto bytes = episode_bytes(ep, dataset.obs_shape, dataset.spec.n());
    bin.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    episodes.push_back({{"offset", offset},
                        {"T", ep.length()},
                        {"return", ep.episode_return},
                        {"crc32", crc32(bytes.data(), bytes.size())}});
    offset += static_cast<int64_t>(bytes.size());
  }
  bin.close();
  if (!bin) throw IoError("failed writing episodes.bin");

  json manifest = {
      {"format_version", kDatasetFormatVersion},
      {"env", dataset.meta.env},
      {"policy_id", dataset.meta.policy_id},
      {"seed", dataset.meta.seed},
      {"action_dims", dataset.spec.dims},
      {"obs_shape", {dataset.obs_shape.c, dataset.obs_shape.h, dataset.obs_shape.w}},
      {"dtype", "u8"},
      {"total_bytes", offset},
      {"episodes", episodes},
  };
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) throw IoError("cannot open " + (dir / "manifest.json").string() + " for writing");
  mf << manifest.dump(2) << "\n";
  if (!mf) throw IoError("failed writing manifest.json");
}

TrajectoryDataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw IoError("cannot open " + (dir / "manifest.json").string());
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw IoError("manifest.json is not valid JSON: " + std::string(e.what()));
  }

  const int version = manifest.value("format_version", -1);
  if (version != kDatasetFormatVersion) {
    throw VersionError("unsupported version " + std::to_string(version) + " (expected " +
                       std::to_string(kDatasetFormatVersion) + ")");
  }

  TrajectoryDataset ds;
  try {
    ds.meta.env = manifest.at("env").get<std::string>();
    ds.meta.policy_id = manifest.value("policy_id", "");
    ds.meta.seed = manifest.value("seed", uint64_t{0});
    ds.spec = MultiDiscreteSpec(manifest.at("action_dims").get<std::vector<int32_t>>());
    const auto shape = manifest.at("obs_shape").get<std::vector<int32_t>>();
    if (shape.size() != 3) throw IoError("manifest obs_shape must have 3 entries");
    ds.obs_shape = {shape[0], shape[1], shape[2]};
  } catch (const json::exception& e) {
    throw IoError("manifest.json is malformed: " + std::string(e.what()));
  }
  if (manifest.value("dtype", "") != "u8") throw IoError("manifest dtype must be u8");

  std::ifstream bin(dir / "episodes.bin", std::ios::binary);
  if (!bin) throw IoError("cannot open " + (dir / "episodes.bin").string());
  bin.seekg(0, std::ios::end);
  const int64_t file_size = bin.tellg();

  const int64_t obs_len = ds.obs_shape.numel();
  const int32_t n = ds.spec.n();
  size_t index = 0;
  if (!manifest.contains("episodes") || !manifest["episodes"].is_array()) {
    throw IoError("manifest.json is missing the episode table");
  }
  for (const auto& entry : manifest.at("episodes")) {
    int64_t offset = 0, t = 0;
    uint32_t want_crc = 0;
    try {
      offset = entry.at("offset").get<int64_t>();
      t = entry.at("T").get<int64_t>();
      want_crc = entry.at("crc32").get<uint32_t>();
    } catch (const json::exception& e) {
      throw IoError("manifest episode entry " + std::to_string(index) + " is malformed: " +
                    e.what());
    }
    const int64_t chunk = t * (obs_len + n) + t * 4;
    if (offset + chunk > file_size) {
      throw TruncatedError("episodes.bin truncated at episode " + std::to_string(index));
    }
    std::vector<uint8_t> bytes(static_cast<size_t>(chunk));
    bin.seekg(offset);
    bin.read(reinterpret_cast<char*>(bytes.data()), chunk);
    if (!bin) throw TruncatedError("episodes.bin read failed at episode " + std::to_string(index));
    const uint32_t got_crc = crc32(bytes.data(), bytes.size());
    if (got_crc != want_crc) {
      throw ChecksumError("checksum mismatch in episode " + std::to_string(index));
    }

    Episode ep;
    ep.steps.resize(static_cast<size_t>(t));
    const uint8_t* states = bytes.data();
    const uint8_t* actions = states + t * obs_len;
    const uint8_t* rewards = actions + t * n;
    for (int64_t i = 0; i < t; ++i) {
      Timestep& ts = ep.steps[static_cast<size_t>(i)];
      ts.state.resize(static_cast<size_t>(obs_len));
      for (int64_t j = 0; j < obs_len; ++j) {
        ts.state[static_cast<size_t>(j)] = static_cast<float>(states[i * obs_len + j]) / 255.0f;
      }
      ts.action.resize(static_cast<size_t>(n));
      for (int32_t j = 0; j < n; ++j) ts.action[static_cast<size_t>(j)] = actions[i * n + j];
      std::memcpy(&ts.reward, rewards + i * 4, 4);
    }
    ep.finalize();
    ds.episodes.push_back(std::move(ep));
    ++index;
  }
  ds.validate();
  return ds;
}

}  // namespace msat
