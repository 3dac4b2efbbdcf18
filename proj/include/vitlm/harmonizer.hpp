#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitlm/records.hpp"

namespace vitlm {

namespace detail {

// Lowercase alphanumeric runs; everything else separates words.
inline std::vector<std::string> lexicon_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string join_words(const std::vector<std::string>& w, std::size_t from, std::size_t n) {
  std::string s;
  for (std::size_t i = from; i < from + n; ++i) {
    if (i > from) s += ' ';
    s += w[i];
  }
  return s;
}

}  // namespace detail

/// Organ term → region. Terms are stored lowercased with single spaces, so
/// lookup is case-insensitive.
class OrganLexicon {
 public:
  void add(const std::string& term, const std::string& region) {
    if (!is_region(region)) throw ConfigError("lexicon region must be chest, abdomen or pelvis: " + region);
    const auto words = detail::lexicon_words(term);
    if (words.empty()) throw ConfigError("empty lexicon term");
    const auto key = detail::join_words(words, 0, words.size());
    auto [it, inserted] = terms_.emplace(key, region);
    if (!inserted && it->second != region) {
      throw ConfigError("lexicon term '" + key + "' maps to both " + it->second + " and " + region);
    }
    max_words_ = std::max(max_words_, words.size());
  }

  std::optional<std::string> region_of(std::string_view term) const {
    const auto words = detail::lexicon_words(term);
    auto it = terms_.find(detail::join_words(words, 0, words.size()));
    if (it == terms_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t size() const { return terms_.size(); }
  std::size_t max_words() const { return max_words_; }
  const std::map<std::string, std::string>& terms() const { return terms_; }

  static OrganLexicon defaults() {
    OrganLexicon lex;
    for (const char* t : {"lung", "lungs", "heart", "trachea", "bronchus", "pleura", "esophagus"}) {
      lex.add(t, "chest");
    }
    for (const char* t : {"liver", "kidney", "kidneys", "spleen", "pancreas", "gallbladder",
                          "adrenal gland", "stomach"}) {
      lex.add(t, "abdomen");
    }
    for (const char* t : {"bladder", "urinary bladder", "prostate", "uterus", "rectum", "ovary",
                          "ovaries"}) {
      lex.add(t, "pelvis");
    }
    return lex;
  }

  /// {"chest": [terms...], "abdomen": [...], "pelvis": [...]}
  static OrganLexicon from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw FormatError("lexicon must be a JSON object of region → terms");
    OrganLexicon lex;
    for (const auto& [region, terms] : j.items()) {
      if (!terms.is_array()) throw FormatError("lexicon entry for " + region + " must be a list");
      for (const auto& t : terms) lex.add(t.get<std::string>(), region);
    }
    return lex;
  }

  static OrganLexicon load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open lexicon " + path.string());
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("bad lexicon " + path.string() + ": " + e.what());
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (auto r : kRegions) j[std::string(r)] = nlohmann::json::array();
    for (const auto& [t, r] : terms_) j[r].push_back(t);
    return j;
  }

 private:
  std::map<std::string, std::string> terms_;
  std::size_t max_words_ = 0;
};

inline const std::vector<std::string>& default_abbreviations() {
  static const std::vector<std::string> a = {"approx", "e.g", "i.e", "etc", "vs", "dr",
                                             "fig",    "cf",  "mr",  "mrs", "ca", "incl"};
  return a;
}

/// Splits on '.', '?', '!' followed by whitespace or end of text. A period
/// ending a guarded abbreviation or sitting between digits does not split.
inline std::vector<std::string> split_sentences(std::string_view text,
                                                const std::vector<std::string>& guard = default_abbreviations()) {
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  };
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    cur.push_back(c);
    if (c != '.' && c != '?' && c != '!') continue;
    const bool at_break = i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]));
    if (!at_break) continue;
    if (c == '.') {
      std::size_t b = cur.size() - 1;
      while (b > 0 && !std::isspace(static_cast<unsigned char>(cur[b - 1]))) --b;
      std::string word = cur.substr(b, cur.size() - 1 - b);
      std::transform(word.begin(), word.end(), word.begin(),
                     [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
      while (!word.empty() && (word.front() == '(' || word.front() == '"')) word.erase(0, 1);
      if (std::find(guard.begin(), guard.end(), word) != guard.end()) continue;
    }
    if (auto s = trim(cur); !s.empty()) out.push_back(std::move(s));
    cur.clear();
  }
  if (auto s = trim(cur); !s.empty()) out.push_back(std::move(s));
  return out;
}

struct OrganMention {
  std::string term;
  std::string region;

  bool operator==(const OrganMention&) const = default;
};

/// Greedy longest-match scan over word boundaries; each term is reported
/// once, in order of first appearance.
inline std::vector<OrganMention> ner_extract_organs(std::string_view sentence, const OrganLexicon& lex) {
  const auto words = detail::lexicon_words(sentence);
  std::vector<OrganMention> out;
  std::size_t i = 0;
  while (i < words.size()) {
    std::size_t matched = 0;
    for (std::size_t n = std::min(lex.max_words(), words.size() - i); n >= 1; --n) {
      const auto key = detail::join_words(words, i, n);
      auto it = lex.terms().find(key);
      if (it != lex.terms().end()) {
        const bool dup = std::any_of(out.begin(), out.end(), [&](const auto& m) { return m.term == key; });
        if (!dup) out.push_back({key, it->second});
        matched = n;
        break;
      }
    }
    i += matched ? matched : 1;
  }
  return out;
}

struct RoutingStats {
  std::size_t sentences = 0;
  std::size_t routed = 0;
  std::size_t dropped = 0;
  std::size_t multi_region = 0;
};

/// Regions mentioned by the sentence, in chest/abdomen/pelvis order. An
/// organ-free sentence yields no region and counts as dropped.
inline std::vector<std::string> route_sentence(std::string_view sentence, const OrganLexicon& lex,
                                               RoutingStats* stats = nullptr) {
  const auto mentions = ner_extract_organs(sentence, lex);
  std::vector<std::string> regions;
  for (auto r : kRegions) {
    if (std::any_of(mentions.begin(), mentions.end(), [&](const auto& m) { return m.region == r; })) {
      regions.emplace_back(r);
    }
  }
  if (stats) {
    ++stats->sentences;
    if (regions.empty()) {
      ++stats->dropped;
    } else {
      ++stats->routed;
      if (regions.size() > 1) ++stats->multi_region;
    }
  }
  return regions;
}

/// Free-text report → region sections (source "harmonized").
inline ReportRecord harmonize_report(const std::string& volume_path, std::string_view text,
                                     const OrganLexicon& lex, RoutingStats* stats = nullptr) {
  ReportRecord rec;
  rec.volume_path = volume_path;
  rec.source = "harmonized";
  for (const auto& s : split_sentences(text)) {
    for (const auto& r : route_sentence(s, lex, stats)) rec.sections[r].push_back(s);
  }
  return rec;
}

struct SplitConfig {
  double train_ratio = 0.76;
  std::uint64_t seed = 0;
};

struct DatasetSplit {
  std::vector<MrgRow> mrg_train, mrg_val;
  std::vector<VqaRecord> vqa_train, vqa_val;
  std::vector<std::string> train_volumes, val_volumes;
};

inline std::string join_sentences(const std::vector<std::string>& s) {
  std::string out;
  for (const auto& x : s) {
    if (!out.empty()) out += ' ';
    out += x;
  }
  return out;
}

/// Splits by volume so no scan lands on both sides. Volume paths are
/// resolved against `base_dir` for the existence check; `findings`, when
/// given, is keyed by volume path and copied into the MRG rows per region.
inline DatasetSplit build_dataset(const std::vector<ReportRecord>& reports,
                                  const std::vector<VqaRecord>& vqa, const SplitConfig& cfg,
                                  const std::filesystem::path& base_dir,
                                  const std::map<std::string, std::vector<Finding>>* findings = nullptr) {
  if (!(cfg.train_ratio >= 0.0 && cfg.train_ratio <= 1.0)) {
    throw ConfigError("train ratio must lie in [0, 1]");
  }
  std::set<std::string> volume_set;
  for (const auto& r : reports) volume_set.insert(r.volume_path);
  for (const auto& q : vqa) volume_set.insert(q.volume_path);

  std::vector<std::string> missing;
  for (const auto& v : volume_set) {
    const std::filesystem::path p = std::filesystem::path(v).is_absolute() ? std::filesystem::path(v) : base_dir / v;
    if (!std::filesystem::exists(p)) missing.push_back(p.string());
  }
  if (!missing.empty()) {
    std::string msg = "missing volume files (" + std::to_string(missing.size()) + "):";
    for (const auto& m : missing) msg += " " + m;
    throw IoError(msg);
  }

  std::vector<std::string> volumes(volume_set.begin(), volume_set.end());
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(volumes.begin(), volumes.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_ratio * volumes.size()));
  std::set<std::string> train(volumes.begin(), volumes.begin() + static_cast<std::ptrdiff_t>(n_train));

  DatasetSplit out;
  out.train_volumes.assign(volumes.begin(), volumes.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val_volumes.assign(volumes.begin() + static_cast<std::ptrdiff_t>(n_train), volumes.end());
  std::sort(out.train_volumes.begin(), out.train_volumes.end());
  std::sort(out.val_volumes.begin(), out.val_volumes.end());

  for (const auto& rec : reports) {
    rec.validate();
    for (auto region : kRegions) {
      auto it = rec.sections.find(std::string(region));
      if (it == rec.sections.end() || it->second.empty()) continue;
      MrgRow row{rec.volume_path, std::string(region), join_sentences(it->second), std::nullopt};
      if (findings) {
        std::vector<Finding> f;
        if (auto fit = findings->find(rec.volume_path); fit != findings->end()) {
          for (const auto& x : fit->second) {
            if (x.region == region) f.push_back(x);
          }
        }
        row.findings = std::move(f);
      }
      (train.count(rec.volume_path) ? out.mrg_train : out.mrg_val).push_back(std::move(row));
    }
  }
  for (const auto& q : vqa) {
    q.validate();
    (train.count(q.volume_path) ? out.vqa_train : out.vqa_val).push_back(q);
  }
  return out;
}

}  // namespace vitlm
