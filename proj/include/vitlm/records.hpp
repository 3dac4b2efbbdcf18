#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitlm/errors.hpp"
#include "vitlm/prompts.hpp"

namespace vitlm {

/// One planted abnormality: `keyword` in `organ`, `size_mm` across.
struct Finding {
  std::string keyword;
  std::string organ;
  std::string region;
  int size_mm = 0;

  bool operator==(const Finding&) const = default;
};

inline void to_json(nlohmann::json& j, const Finding& f) {
  j = {{"keyword", f.keyword}, {"organ", f.organ}, {"region", f.region}, {"size_mm", f.size_mm}};
}

inline void from_json(const nlohmann::json& j, Finding& f) {
  f.keyword = j.at("keyword").get<std::string>();
  f.organ = j.at("organ").get<std::string>();
  f.region = j.at("region").get<std::string>();
  f.size_mm = j.value("size_mm", 0);
}

struct ReportRecord {
  std::string volume_path;
  std::map<std::string, std::vector<std::string>> sections;  // region → sentences
  std::string source = "native";                             // native | harmonized

  void validate() const {
    for (const auto& [region, sentences] : sections) {
      if (!is_region(region)) throw FormatError("unknown report region '" + region + "'");
      for (const auto& s : sentences) {
        if (s.empty()) throw FormatError("empty sentence in " + region + " section of " + volume_path);
      }
    }
    if (source != "native" && source != "harmonized") {
      throw FormatError("report source must be native or harmonized, got " + source);
    }
  }

  bool empty() const {
    for (const auto& [r, s] : sections) {
      if (!s.empty()) return false;
    }
    return true;
  }
};

inline void to_json(nlohmann::json& j, const ReportRecord& r) {
  j = {{"volume_path", r.volume_path}, {"sections", r.sections}, {"source", r.source}};
}

inline void from_json(const nlohmann::json& j, ReportRecord& r) {
  r.volume_path = j.at("volume_path").get<std::string>();
  r.sections = j.value("sections", std::map<std::string, std::vector<std::string>>{});
  r.source = j.value("source", std::string("native"));
  r.validate();
}

struct VqaRecord {
  std::string volume_path;
  std::string question;
  std::vector<std::string> options;
  std::size_t answer_index = 0;

  void validate() const {
    if (options.size() < 2 || options.size() > 5) {
      throw FormatError("VQA record needs 2-5 options, got " + std::to_string(options.size()));
    }
    if (answer_index >= options.size()) throw FormatError("VQA answer_index out of range");
    std::set<std::string> seen(options.begin(), options.end());
    if (seen.size() != options.size()) throw FormatError("VQA options must be distinct");
    if (question.empty()) throw FormatError("VQA question is empty");
  }

  std::string answer_letter() const { return std::string(1, option_letter(answer_index)); }
};

inline void to_json(nlohmann::json& j, const VqaRecord& r) {
  j = {{"volume_path", r.volume_path},
       {"question", r.question},
       {"options", r.options},
       {"answer_index", r.answer_index}};
}

inline void from_json(const nlohmann::json& j, VqaRecord& r) {
  r.volume_path = j.at("volume_path").get<std::string>();
  r.question = j.at("question").get<std::string>();
  r.options = j.at("options").get<std::vector<std::string>>();
  r.answer_index = j.at("answer_index").get<std::size_t>();
  r.validate();
}

/// MRG training row; `findings` is only present for synthetic data.
struct MrgRow {
  std::string volume_path;
  std::string region;
  std::string report_text;
  std::optional<std::vector<Finding>> findings;
};

inline void to_json(nlohmann::json& j, const MrgRow& r) {
  j = {{"volume_path", r.volume_path}, {"region", r.region}, {"report_text", r.report_text}};
  if (r.findings) j["findings"] = *r.findings;
}

inline void from_json(const nlohmann::json& j, MrgRow& r) {
  r.volume_path = j.at("volume_path").get<std::string>();
  r.region = j.at("region").get<std::string>();
  if (!is_region(r.region)) throw FormatError("unknown region '" + r.region + "'");
  r.report_text = j.at("report_text").get<std::string>();
  if (j.contains("findings")) r.findings = j.at("findings").get<std::vector<Finding>>();
}

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

/// Parses every row of a JSONL file as `R`, tagging errors with the line.
template <class R>
std::vector<R> read_records(const std::filesystem::path& path) {
  std::vector<R> out;
  std::size_t i = 0;
  for (const auto& row : read_jsonl(path)) {
    ++i;
    try {
      out.push_back(row.get<R>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + " row " + std::to_string(i) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + " row " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

template <class R>
void write_jsonl(const std::filesystem::path& path, const std::vector<R>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : rows) out << nlohmann::json(r).dump() << "\n";
}

}  // namespace vitlm
