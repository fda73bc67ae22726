#pragma once

#include <filesystem>
#include <span>

#include "msat/train/train.hpp"

namespace msat {

inline constexpr int kAttnFormatVersion = 1;

// One layer/head attention matrix from an evaluation rollout, with token
// labels. scores is lower-triangular and row-stochastic (capture windows are
// unpadded, so every row has at least its diagonal entry).
struct AttentionRecord {
  int32_t layer = 0;
  int32_t head = 0;
  std::vector<std::vector<float>> scores;  // L x L
  std::vector<TokenLabel> labels;          // length L
  std::string env;
  uint64_t seed = 0;
  int32_t episode_steps = 0;
  int32_t capture_step = 0;  // env step whose window was recorded
};

// Runs one evaluation episode and records attention for every layer/head from
// a forward pass over the completed final window (or every step's window when
// every_step is set).
std::vector<AttentionRecord> capture_attention(const Transformer<float>& model,
                                               const Tokenizer<float>& tokenizer, Env& env,
                                               const TrainConfig& cfg, uint64_t seed,
                                               bool every_step = false);

struct InfluenceEntry {
  int32_t layer = 0;
  int32_t head = 0;
  TokenLabel target;
  double weight = 0.0;
};

// All (layer, head, target) entries whose attention on the source token is at
// least min_weight, sorted by descending weight. Unknown labels raise a
// ConfigError that lists the valid ones.
std::vector<InfluenceEntry> query_influence(std::span<const AttentionRecord> records,
                                            const std::string& source_label, double min_weight);

enum class ExportFormat { kJson, kHtml };

inline ExportFormat parse_export_format(const std::string& s) {
  if (s == "json") return ExportFormat::kJson;
  if (s == "html") return ExportFormat::kHtml;
  throw ConfigError("unknown export format '" + s + "' (valid: json, html)");
}

// json: full records under schema attn_format_version=1.
// html: one self-contained page of per-layer/head heatmaps with token labels
// on both axes and hover readouts; no external resources.
void export_records(std::span<const AttentionRecord> records, const std::filesystem::path& path,
                    ExportFormat format);

std::vector<AttentionRecord> import_records_json(const std::filesystem::path& path);

}  // namespace msat
