#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitlm/harmonizer.hpp"
#include "vitlm/nifti.hpp"
#include "vitlm/records.hpp"

namespace vitlm {

/// A plantable abnormality: a bright ellipsoid of one of `sizes_mm`
/// diameters centred at fractional position `center` (d, h, w).
struct FindingType {
  std::string keyword;
  std::string organ;
  std::string region;
  std::array<double, 3> center{0.5, 0.5, 0.5};
  double intensity_hu = 600.0;
  std::vector<int> sizes_mm{10, 15, 20};
};

inline void to_json(nlohmann::json& j, const FindingType& f) {
  j = {{"keyword", f.keyword},   {"organ", f.organ},
       {"region", f.region},     {"center", f.center},
       {"intensity_hu", f.intensity_hu}, {"sizes_mm", f.sizes_mm}};
}

inline void from_json(const nlohmann::json& j, FindingType& f) {
  f.keyword = j.at("keyword").get<std::string>();
  f.organ = j.at("organ").get<std::string>();
  f.region = j.at("region").get<std::string>();
  f.center = j.value("center", f.center);
  f.intensity_hu = j.value("intensity_hu", f.intensity_hu);
  f.sizes_mm = j.value("sizes_mm", f.sizes_mm);
}

inline std::vector<FindingType> default_finding_menu() {
  return {
      {"nodule", "lung", "chest", {0.5, 0.17, 0.27}, 500.0, {10, 15, 20}},
      {"lesion", "liver", "abdomen", {0.5, 0.5, 0.27}, 700.0, {10, 15, 20}},
      {"cyst", "kidney", "abdomen", {0.5, 0.5, 0.73}, 300.0, {10, 15, 20}},
      {"stone", "bladder", "pelvis", {0.5, 0.83, 0.5}, 900.0, {10, 15, 20}},
  };
}

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t n_examples = 200;
  Dims3 shape{8, 32, 32};
  std::array<double, 3> spacing_mm{4.0, 2.5, 2.5};
  double noise_hu = 80.0;
  std::size_t max_findings = 3;
  int jitter_voxels = 1;
  bool shuffle_options = false;
  std::vector<FindingType> menu = default_finding_menu();

  void validate() const {
    if (n_examples == 0) throw ConfigError("synthetic spec needs n_examples >= 1");
    if (menu.empty()) throw ConfigError("synthetic spec needs a nonempty findings menu");
    if (max_findings > menu.size()) throw ConfigError("max_findings exceeds the findings menu");
    for (const auto& f : menu) {
      if (!is_region(f.region)) throw ConfigError("finding region must be chest, abdomen or pelvis");
      if (f.sizes_mm.empty()) throw ConfigError("finding " + f.keyword + " has no sizes");
    }
    for (auto s : shape) {
      if (s == 0) throw ConfigError("synthetic volume shape must be positive");
    }
  }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"seed", s.seed},           {"n_examples", s.n_examples},
       {"shape", s.shape},         {"spacing_mm", s.spacing_mm},
       {"noise_hu", s.noise_hu},   {"max_findings", s.max_findings},
       {"jitter_voxels", s.jitter_voxels}, {"shuffle_options", s.shuffle_options},
       {"menu", s.menu}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  SyntheticSpec d;
  s.seed = j.value("seed", d.seed);
  s.n_examples = j.value("n_examples", d.n_examples);
  s.shape = j.value("shape", d.shape);
  s.spacing_mm = j.value("spacing_mm", d.spacing_mm);
  s.noise_hu = j.value("noise_hu", d.noise_hu);
  s.max_findings = j.value("max_findings", d.max_findings);
  s.jitter_voxels = j.value("jitter_voxels", d.jitter_voxels);
  s.shuffle_options = j.value("shuffle_options", d.shuffle_options);
  s.menu = j.value("menu", d.menu);
  s.validate();
}

inline std::string finding_sentence(const Finding& f) {
  return "There is a " + std::to_string(f.size_mm) + " mm " + f.keyword + " in the " + f.organ + ".";
}

inline constexpr const char* kNormalSentence = "No abnormality detected.";

struct SyntheticCase {
  std::string volume_path;  // relative to the corpus root
  Volume volume;
  std::vector<Finding> findings;
  ReportRecord report;
  std::vector<VqaRecord> questions;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline const char* count_word(std::size_t n) {
  static const char* words[] = {"none", "one", "two", "three", "four", "five"};
  return n < 6 ? words[n] : "many";
}

inline VqaRecord make_question(const std::string& path, std::string question,
                               std::vector<std::string> options, std::size_t answer, bool shuffle,
                               std::mt19937_64& rng) {
  if (shuffle) {
    const std::string correct = options[answer];
    std::shuffle(options.begin(), options.end(), rng);
    answer = static_cast<std::size_t>(std::find(options.begin(), options.end(), correct) - options.begin());
  }
  return {path, std::move(question), std::move(options), answer};
}

}  // namespace detail

/// Builds one case from its own derived seed, so cases are independent of
/// each other and of generation order.
inline SyntheticCase synthesize_case(const SyntheticSpec& spec, std::size_t index) {
  std::mt19937_64 rng(detail::splitmix64(spec.seed ^ detail::splitmix64(index)));
  SyntheticCase c;
  char name[48];
  std::snprintf(name, sizeof name, "volumes/case_%04zu.nii.gz", index);
  c.volume_path = name;

  const std::size_t n_find = std::uniform_int_distribution<std::size_t>(0, spec.max_findings)(rng);
  std::vector<std::size_t> types(spec.menu.size());
  std::iota(types.begin(), types.end(), std::size_t{0});
  std::shuffle(types.begin(), types.end(), rng);
  types.resize(n_find);
  std::sort(types.begin(), types.end());

  const auto [D, H, W] = spec.shape;
  std::vector<float> vox(D * H * W);
  std::normal_distribution<double> noise(0.0, spec.noise_hu);
  for (auto& v : vox) v = static_cast<float>(noise(rng));

  for (std::size_t t : types) {
    const auto& ft = spec.menu[t];
    const int size = ft.sizes_mm[std::uniform_int_distribution<std::size_t>(0, ft.sizes_mm.size() - 1)(rng)];
    std::array<double, 3> ctr{};
    for (int a = 0; a < 3; ++a) {
      ctr[a] = ft.center[a] * static_cast<double>(spec.shape[a] - 1);
      if (a > 0 && spec.jitter_voxels > 0) {
        ctr[a] += std::uniform_int_distribution<int>(-spec.jitter_voxels, spec.jitter_voxels)(rng);
      }
    }
    const double r = size / 2.0;
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double dz = (z - ctr[0]) * spec.spacing_mm[0];
          const double dy = (y - ctr[1]) * spec.spacing_mm[1];
          const double dx = (x - ctr[2]) * spec.spacing_mm[2];
          if (dz * dz + dy * dy + dx * dx <= r * r) {
            vox[(z * H + y) * W + x] += static_cast<float>(ft.intensity_hu);
          }
        }
    c.findings.push_back({ft.keyword, ft.organ, ft.region, size});
  }
  for (auto& v : vox) v = std::clamp(std::round(v), -32768.0f, 32767.0f) + 0.0f;  // stored as int16, no -0
  c.volume.voxels = Tensor<float>({D, H, W}, std::move(vox));
  for (int a = 0; a < 3; ++a) c.volume.spacing_mm[a] = static_cast<float>(spec.spacing_mm[a]);
  c.volume.source_id = c.volume_path;

  c.report.volume_path = c.volume_path;
  c.report.source = "native";
  for (auto region : kRegions) {
    auto& section = c.report.sections[std::string(region)];
    for (const auto& f : c.findings) {
      if (f.region == region) section.push_back(finding_sentence(f));
    }
    if (section.empty()) section.emplace_back(kNormalSentence);
  }

  const std::vector<std::string> presence{"yes", "no", "uncertain", "not assessable"};
  for (const auto& ft : spec.menu) {
    const bool present = std::any_of(c.findings.begin(), c.findings.end(),
                                     [&](const Finding& f) { return f.keyword == ft.keyword; });
    c.questions.push_back(detail::make_question(
        c.volume_path, "Is there a " + ft.keyword + " in the " + ft.organ + "?", presence,
        present ? 0 : 1, spec.shuffle_options, rng));
  }
  for (auto region : kRegions) {
    std::size_t n = 0, cap = 0;
    for (const auto& f : c.findings) n += f.region == region;
    for (const auto& ft : spec.menu) cap += ft.region == region;
    std::vector<std::string> opts;
    for (std::size_t k = 0; k < std::max<std::size_t>(cap + 1, 4) && opts.size() < 4; ++k) {
      opts.emplace_back(detail::count_word(k));
    }
    c.questions.push_back(detail::make_question(
        c.volume_path, "How many findings are in the " + std::string(region) + "?", opts, n,
        spec.shuffle_options, rng));
  }
  for (const auto& f : c.findings) {
    const auto& ft = *std::find_if(spec.menu.begin(), spec.menu.end(),
                                   [&](const FindingType& t) { return t.keyword == f.keyword; });
    std::vector<int> sizes = ft.sizes_mm;
    for (int extra = 5; sizes.size() < 4; extra += 5) {
      if (std::find(sizes.begin(), sizes.end(), extra) == sizes.end()) sizes.push_back(extra);
    }
    std::sort(sizes.begin(), sizes.end());
    std::vector<std::string> opts;
    for (int s : sizes) opts.push_back(std::to_string(s) + " mm");
    const auto answer = static_cast<std::size_t>(std::find(sizes.begin(), sizes.end(), f.size_mm) - sizes.begin());
    c.questions.push_back(detail::make_question(
        c.volume_path, "What is the size of the " + f.keyword + " in the " + f.organ + "?", opts,
        answer, spec.shuffle_options, rng));
  }
  return c;
}

inline std::vector<SyntheticCase> synthesize_corpus(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<SyntheticCase> cases;
  cases.reserve(spec.n_examples);
  for (std::size_t i = 0; i < spec.n_examples; ++i) cases.push_back(synthesize_case(spec, i));
  return cases;
}

/// Free-text form of a report, all sections run together (harmonizer input).
inline std::string flatten_report(const ReportRecord& r) {
  std::string out;
  for (auto region : kRegions) {
    auto it = r.sections.find(std::string(region));
    if (it == r.sections.end()) continue;
    for (const auto& s : it->second) {
      if (s == kNormalSentence) continue;
      if (!out.empty()) out += ' ';
      out += s;
    }
  }
  return out;
}

/// Writes volumes (int16 NIfTI, gzipped), reports.jsonl, vqa.jsonl,
/// findings.jsonl, reports_raw.jsonl and spec.json under `dir`.
inline void write_corpus(const std::filesystem::path& dir, const SyntheticSpec& spec,
                         const std::vector<SyntheticCase>& cases) {
  std::filesystem::create_directories(dir / "volumes");
  NiftiWriteOptions opt;
  opt.datatype = NiftiDatatype::int16;
  opt.gzip = true;
  std::vector<ReportRecord> reports;
  std::vector<VqaRecord> questions;
  std::vector<nlohmann::json> findings, raw;
  for (const auto& c : cases) {
    save_nifti(dir / c.volume_path, c.volume, opt);
    reports.push_back(c.report);
    questions.insert(questions.end(), c.questions.begin(), c.questions.end());
    findings.push_back({{"volume_path", c.volume_path}, {"findings", c.findings}});
    raw.push_back({{"volume_path", c.volume_path}, {"report_text", flatten_report(c.report)}});
  }
  write_jsonl(dir / "reports.jsonl", reports);
  write_jsonl(dir / "vqa.jsonl", questions);
  write_jsonl(dir / "findings.jsonl", findings);
  write_jsonl(dir / "reports_raw.jsonl", raw);
  std::ofstream(dir / "spec.json") << nlohmann::json(spec).dump(2) << "\n";
}

inline std::map<std::string, std::vector<Finding>> read_findings(const std::filesystem::path& path) {
  std::map<std::string, std::vector<Finding>> out;
  for (const auto& row : read_jsonl(path)) {
    out[row.at("volume_path").get<std::string>()] = row.at("findings").get<std::vector<Finding>>();
  }
  return out;
}

}  // namespace vitlm
