#include <algorithm>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "msat/errors.hpp"
#include "msat/interpret/attention.hpp"

namespace msat {

std::vector<InfluenceEntry> query_influence(std::span<const AttentionRecord> records,
                                            const std::string& source_label, double min_weight) {
  if (records.empty()) throw ConfigError("query_influence: no records");
  const TokenLabel source = TokenLabel::parse(source_label);

  std::vector<InfluenceEntry> out;
  bool found = false;
  for (const auto& rec : records) {
    int64_t src = -1;
    for (size_t i = 0; i < rec.labels.size(); ++i) {
      if (rec.labels[i] == source) {
        src = static_cast<int64_t>(i);
        break;
      }
    }
    if (src < 0) continue;
    found = true;
    for (size_t p = static_cast<size_t>(src); p < rec.scores.size(); ++p) {
      const double w = rec.scores[p][static_cast<size_t>(src)];
      if (w >= min_weight) {
        out.push_back({rec.layer, rec.head, rec.labels[p], w});
      }
    }
  }
  if (!found) {
    std::set<std::string> valid;
    for (const auto& l : records.front().labels) valid.insert(l.str());
    std::string msg = "label '" + source_label + "' not present; valid labels:";
    for (const auto& v : valid) msg += " " + v;
    throw ConfigError(msg);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const InfluenceEntry& a, const InfluenceEntry& b) { return a.weight > b.weight; });
  return out;
}

namespace {

using nlohmann::json;

json record_to_json(const AttentionRecord& rec) {
  json labels = json::array();
  for (const auto& l : rec.labels) labels.push_back(l.str());
  return {{"layer", rec.layer},     {"head", rec.head},
          {"env", rec.env},         {"seed", rec.seed},
          {"episode_steps", rec.episode_steps}, {"capture_step", rec.capture_step},
          {"labels", labels},       {"scores", rec.scores}};
}

void export_json(std::span<const AttentionRecord> records, const std::filesystem::path& path) {
  json doc = {{"attn_format_version", kAttnFormatVersion}, {"records", json::array()}};
  for (const auto& rec : records) doc["records"].push_back(record_to_json(rec));
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << doc.dump(1) << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

std::string heat_color(double w) {
  // white -> dark blue
  const int r = static_cast<int>(255.0 * (1.0 - w * 0.85));
  const int g = static_cast<int>(255.0 * (1.0 - w * 0.75));
  const int b = static_cast<int>(255.0 - 90.0 * w);
  std::ostringstream os;
  os << "rgb(" << r << "," << g << "," << b << ")";
  return os.str();
}

void export_html(std::span<const AttentionRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");

  out << "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n"
      << "<title>attention heatmaps</title>\n<style>\n"
      << "body{font-family:monospace;background:#fafafa;margin:16px}\n"
      << "h2{margin:24px 0 4px 0}\n"
      << ".meta{color:#555;margin-bottom:12px}\n"
      << "svg{background:#fff;border:1px solid #ccc;margin:4px}\n"
      << "rect:hover{stroke:#d22;stroke-width:1px}\n"
      << "</style>\n</head>\n<body>\n";

  if (!records.empty()) {
    out << "<div class=\"meta\">env=" << records.front().env << " seed=" << records.front().seed
        << " episode_steps=" << records.front().episode_steps << "</div>\n";
  }

  const int cell = 11;
  const int margin = 46;
  for (const auto& rec : records) {
    const int64_t l = static_cast<int64_t>(rec.labels.size());
    const int size = margin + static_cast<int>(l) * cell + 4;
    out << "<h2>layer " << rec.layer << " head " << rec.head << " (step " << rec.capture_step
        << ")</h2>\n";
    out << "<svg width=\"" << size << "\" height=\"" << size << "\">\n";
    // axis labels: keys along the top (rotated), queries down the left
    for (int64_t j = 0; j < l; ++j) {
      const int x = margin + static_cast<int>(j) * cell + cell / 2;
      out << "<text x=\"" << x << "\" y=\"" << margin - 4 << "\" font-size=\"7\" text-anchor=\"start\""
          << " transform=\"rotate(-60 " << x << " " << margin - 4 << ")\">"
          << rec.labels[static_cast<size_t>(j)].str() << "</text>\n";
    }
    for (int64_t i = 0; i < l; ++i) {
      const int y = margin + static_cast<int>(i) * cell + cell - 3;
      out << "<text x=\"" << margin - 4 << "\" y=\"" << y
          << "\" font-size=\"7\" text-anchor=\"end\">" << rec.labels[static_cast<size_t>(i)].str()
          << "</text>\n";
    }
    for (int64_t i = 0; i < l; ++i) {
      for (int64_t j = 0; j < l; ++j) {
        const double w = rec.scores[static_cast<size_t>(i)][static_cast<size_t>(j)];
        out << "<rect x=\"" << margin + j * cell << "\" y=\"" << margin + i * cell << "\" width=\""
            << cell << "\" height=\"" << cell << "\" fill=\"" << heat_color(w) << "\"><title>"
            << rec.labels[static_cast<size_t>(i)].str() << " &#8592; "
            << rec.labels[static_cast<size_t>(j)].str() << ": " << w << "</title></rect>\n";
      }
    }
    out << "</svg>\n";
  }
  out << "</body>\n</html>\n";
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

void export_records(std::span<const AttentionRecord> records, const std::filesystem::path& path,
                    ExportFormat format) {
  if (format == ExportFormat::kJson) {
    export_json(records, path);
  } else {
    export_html(records, path);
  }
}

std::vector<AttentionRecord> import_records_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw IoError("attention json parse error: " + std::string(e.what()));
  }
  const int version = doc.value("attn_format_version", -1);
  if (version != kAttnFormatVersion) {
    throw VersionError("unsupported attention format version " + std::to_string(version));
  }
  std::vector<AttentionRecord> records;
  for (const auto& r : doc.at("records")) {
    AttentionRecord rec;
    rec.layer = r.at("layer").get<int32_t>();
    rec.head = r.at("head").get<int32_t>();
    rec.env = r.value("env", "");
    rec.seed = r.value("seed", uint64_t{0});
    rec.episode_steps = r.value("episode_steps", 0);
    rec.capture_step = r.value("capture_step", 0);
    for (const auto& l : r.at("labels")) rec.labels.push_back(TokenLabel::parse(l.get<std::string>()));
    rec.scores = r.at("scores").get<std::vector<std::vector<float>>>();
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace msat
