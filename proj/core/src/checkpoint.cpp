#include "msat/model/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "msat/crc32.hpp"
#include "msat/errors.hpp"

namespace msat {

namespace {

constexpr char kMagic[8] = {'M', 'S', 'A', 'T', 'C', 'K', 'P', 'T'};

template <typename V>
void write_raw(std::ofstream& out, const V& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <typename V>
V read_raw(std::ifstream& in, const char* what) {
  V value;
  in.read(reinterpret_cast<char*>(&value), sizeof(V));
  if (!in) throw TruncatedError(std::string("checkpoint truncated reading ") + what);
  return value;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     const nn::ParamList<float>& params) {
  nlohmann::json manifest = nlohmann::json::array();
  int64_t offset = 0;
  for (const auto& p : params) {
    manifest.push_back({{"name", p.name},
                        {"shape", p.var.value().shape()},
                        {"offset", offset}});
    offset += p.var.value().numel();
  }
  nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                           {"config", config},
                           {"params", manifest}};
  const std::string header_str = header.dump();

  std::vector<float> payload(static_cast<size_t>(offset));
  int64_t at = 0;
  for (const auto& p : params) {
    const auto flat = p.var.value().flat();
    std::copy(flat.begin(), flat.end(), payload.begin() + at);
    at += p.var.value().numel();
  }
  const uint32_t crc = crc32(payload.data(), payload.size() * sizeof(float));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  write_raw(out, static_cast<uint32_t>(kCheckpointFormatVersion));
  write_raw(out, static_cast<uint64_t>(header_str.size()));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
  write_raw(out, crc);
  out.close();
  if (!out) throw IoError("failed writing " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError(path.string() + " is not a checkpoint file");
  }
  const auto version = read_raw<uint32_t>(in, "version");
  if (version != kCheckpointFormatVersion) {
    throw VersionError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = read_raw<uint64_t>(in, "header length");
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw TruncatedError("checkpoint truncated reading header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint header is not valid JSON: " + std::string(e.what()));
  }

  if (!header.contains("params") || !header.contains("config")) {
    throw IoError("checkpoint header is missing required fields");
  }
  int64_t total = 0;
  try {
    for (const auto& entry : header.at("params")) {
      int64_t numel = 1;
      for (int64_t d : entry.at("shape").get<std::vector<int64_t>>()) numel *= d;
      total = std::max(total, entry.at("offset").get<int64_t>() + numel);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint parameter manifest is malformed: " + std::string(e.what()));
  }
  std::vector<float> payload(static_cast<size_t>(total));
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!in) throw TruncatedError("checkpoint truncated reading payload");
  const auto stored_crc = read_raw<uint32_t>(in, "checksum");
  const uint32_t crc = crc32(payload.data(), payload.size() * sizeof(float));
  if (crc != stored_crc) throw ChecksumError("checkpoint payload checksum mismatch");

  LoadedCheckpoint ckpt;
  ckpt.config = header.at("config");
  try {
    for (const auto& entry : header.at("params")) {
      const auto shape = entry.at("shape").get<std::vector<int64_t>>();
      int64_t numel = 1;
      for (int64_t d : shape) numel *= d;
      const int64_t offset = entry.at("offset").get<int64_t>();
      nn::Tensor<float> t(shape);
      std::copy(payload.begin() + offset, payload.begin() + offset + numel, t.data());
      ckpt.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint parameter manifest is malformed: " + std::string(e.what()));
  }
  return ckpt;
}

void restore_params(nn::ParamList<float>& params, const LoadedCheckpoint& ckpt) {
  for (auto& p : params) {
    const auto it = ckpt.tensors.find(p.name);
    if (it == ckpt.tensors.end()) {
      throw IoError("checkpoint is missing parameter '" + p.name + "'");
    }
    if (!(it->second.shape() == p.var.value().shape())) {
      throw IoError("checkpoint parameter '" + p.name + "' has shape " +
                    nn::Tensor<float>::shape_str(it->second.shape()) + ", expected " +
                    nn::Tensor<float>::shape_str(p.var.value().shape()));
    }
    const auto src = it->second.flat();
    std::copy(src.begin(), src.end(), p.var.mutable_value().data());
  }
}

uint32_t checkpoint_payload_crc(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  const auto version = read_raw<uint32_t>(in, "version");
  (void)version;
  const auto header_len = read_raw<uint64_t>(in, "header length");
  in.seekg(static_cast<std::streamoff>(header_len), std::ios::cur);
  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  const auto payload_start = static_cast<std::streamoff>(8 + 4 + 8 + header_len);
  const auto payload_len = static_cast<size_t>(end) - payload_start - 4;
  std::vector<char> payload(payload_len);
  in.seekg(payload_start);
  in.read(payload.data(), static_cast<std::streamsize>(payload_len));
  if (!in) throw TruncatedError("checkpoint truncated");
  return crc32(payload.data(), payload.size());
}

}  // namespace msat
