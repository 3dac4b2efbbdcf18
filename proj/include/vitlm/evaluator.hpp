#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitlm/model.hpp"
#include "vitlm/records.hpp"

namespace vitlm {

inline constexpr const char* kProxyNote =
    "Green score not computed (requires a judge language model); "
    "lcs_f1 and finding_recall are transparent substitutes";

/// Half-up rounding to `digits` decimals, with a small tolerance so that
/// values printed as exact halves (0.125) round up despite binary error.
inline double round_half_up(double x, int digits = 2) {
  const double scale = std::pow(10.0, digits);
  return std::floor(x * scale + 0.5 + 1e-9) / scale;
}

inline double macro_average(const std::vector<double>& values) {
  if (values.empty()) throw ContractError("macro average of no values");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

/// One metric over one task, per region where applicable. Regions without
/// examples are absent, not zero.
struct EvalReport {
  std::string task;
  std::string metric;
  std::map<std::string, double> regions;
  std::map<std::string, std::size_t> region_counts;
  double overall = 0.0;  // macro average over present regions, or plain score
  std::size_t n_examples = 0;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"task", task},
                        {"metric", metric},
                        {"n_examples", n_examples},
                        {"average", overall},
                        {"average_rounded", round_half_up(overall)}};
    if (!regions.empty()) {
      j["regions"] = regions;
      j["region_counts"] = region_counts;
    }
    return j;
  }
};

/// Aggregates per-example scores by region into a macro-averaged report.
inline EvalReport aggregate_by_region(std::string task, std::string metric,
                                      const std::vector<std::pair<std::string, double>>& scores) {
  EvalReport rep{std::move(task), std::move(metric), {}, {}, 0.0, scores.size()};
  std::map<std::string, double> sums;
  for (const auto& [region, s] : scores) {
    sums[region] += s;
    ++rep.region_counts[region];
  }
  std::vector<double> means;
  for (auto r : kRegions) {
    auto it = sums.find(std::string(r));
    if (it == sums.end()) continue;
    const double m = it->second / static_cast<double>(rep.region_counts[it->first]);
    rep.regions[it->first] = m;
    means.push_back(m);
  }
  if (!means.empty()) rep.overall = macro_average(means);
  return rep;
}

/// Aligned text table: one row per report, columns chest/abdomen/pelvis/avg.
inline std::string format_table(const std::vector<EvalReport>& reports) {
  std::string out = "# ";
  out += kProxyNote;
  out += "\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-6s %-16s %8s %8s %8s %8s %6s\n", "task", "metric", "chest",
                "abdomen", "pelvis", "avg.", "n");
  out += line;
  for (const auto& r : reports) {
    std::string cells[3];
    for (int i = 0; i < 3; ++i) {
      auto it = r.regions.find(std::string(kRegions[i]));
      if (it == r.regions.end()) {
        cells[i] = "-";
      } else {
        char v[16];
        std::snprintf(v, sizeof v, "%.2f", round_half_up(it->second));
        cells[i] = v;
      }
    }
    std::snprintf(line, sizeof line, "%-6s %-16s %8s %8s %8s %8.2f %6zu\n", r.task.c_str(),
                  r.metric.c_str(), cells[0].c_str(), cells[1].c_str(), cells[2].c_str(),
                  round_half_up(r.overall), r.n_examples);
    out += line;
  }
  return out;
}

/// First single-letter token naming one of the options, if any.
inline std::optional<std::size_t> parse_option_letter(std::string_view text, std::size_t n_options) {
  for (const auto& w : split_words(text)) {
    if (w.size() == 1 && w[0] >= 'a' && static_cast<std::size_t>(w[0] - 'a') < n_options) {
      return static_cast<std::size_t>(w[0] - 'a');
    }
  }
  return std::nullopt;
}

inline EvalReport vqa_accuracy(const std::vector<std::string>& predictions,
                               const std::vector<VqaRecord>& records) {
  if (records.empty()) throw ContractError("vqa_accuracy: no records");
  if (predictions.size() != records.size()) {
    throw ContractError("vqa_accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(records.size()) + " records");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto letter = parse_option_letter(predictions[i], records[i].options.size());
    correct += letter && *letter == records[i].answer_index;
  }
  EvalReport rep;
  rep.task = "vqa";
  rep.metric = "accuracy";
  rep.n_examples = records.size();
  rep.overall = static_cast<double>(correct) / static_cast<double>(records.size());
  return rep;
}

namespace detail {

inline std::vector<std::string> metric_tokens(std::string_view text) {
  std::vector<std::string> out;
  for (auto& w : split_words(text)) {
    if (std::any_of(w.begin(), w.end(), [](unsigned char c) { return std::isalnum(c); })) {
      out.push_back(std::move(w));
    }
  }
  return out;
}

inline bool contains_phrase(const std::vector<std::string>& words, const std::vector<std::string>& phrase) {
  if (phrase.empty() || phrase.size() > words.size()) return false;
  for (std::size_t i = 0; i + phrase.size() <= words.size(); ++i) {
    if (std::equal(phrase.begin(), phrase.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) {
      return true;
    }
  }
  return false;
}

}  // namespace detail

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Token LCS F1 over lowercased words (punctuation ignored).
inline double lcs_overlap_f1(std::string_view generated, std::string_view reference) {
  const auto ref = detail::metric_tokens(reference);
  if (ref.empty()) throw ContractError("lcs_overlap_f1: empty reference");
  const auto gen = detail::metric_tokens(generated);
  if (gen.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(gen, ref));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(gen.size());
  const double r = lcs / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

/// Fraction of planted findings whose organ and keyword both appear.
/// Undefined (nullopt) when nothing was planted.
inline std::optional<double> finding_recall(std::string_view generated, const std::vector<Finding>& planted) {
  if (planted.empty()) return std::nullopt;
  const auto words = detail::metric_tokens(generated);
  std::size_t hit = 0;
  for (const auto& f : planted) {
    hit += detail::contains_phrase(words, detail::metric_tokens(f.organ)) &&
           detail::contains_phrase(words, detail::metric_tokens(f.keyword));
  }
  return static_cast<double>(hit) / static_cast<double>(planted.size());
}

template <std::floating_point T>
struct MrgEvalExample {
  std::string volume_path;
  std::string region;
  Tensor<T> volume;
  std::string reference;
  std::optional<std::vector<Finding>> findings;
};

template <std::floating_point T>
struct VqaEvalExample {
  Tensor<T> volume;
  VqaRecord record;
};

struct MrgEvaluation {
  EvalReport lcs_f1;
  std::optional<EvalReport> recall;  // only with planted findings
  std::vector<nlohmann::json> predictions;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"task", "mrg"}, {"note", kProxyNote}, {"lcs_f1", lcs_f1.to_json()}};
    if (recall) j["finding_recall"] = recall->to_json();
    return j;
  }
  std::vector<EvalReport> reports() const {
    std::vector<EvalReport> r{lcs_f1};
    if (recall) r.push_back(*recall);
    return r;
  }
};

/// Greedy report generation per example, scored per region.
template <std::floating_point T>
MrgEvaluation evaluate_mrg(const MultimodalModel<T>& model, const std::vector<MrgEvalExample<T>>& examples,
                           std::size_t max_new = 48) {
  if (examples.empty()) throw ContractError("evaluate_mrg: no examples");
  std::vector<std::pair<std::string, double>> f1, rec;
  MrgEvaluation out;
  GenerateOptions opt;
  opt.max_new = max_new;
  for (const auto& ex : examples) {
    const auto ids = model.generate(model.mrg_prompt(ex.region), model.encode(ex.volume), opt);
    const auto text = model.vocab().decode(ids);
    const double s = lcs_overlap_f1(text, ex.reference);
    f1.emplace_back(ex.region, s);
    nlohmann::json row = {{"volume_path", ex.volume_path}, {"region", ex.region},
                          {"generated", text}, {"reference", ex.reference}, {"lcs_f1", s}};
    if (ex.findings) {
      if (auto r = finding_recall(text, *ex.findings)) {
        rec.emplace_back(ex.region, *r);
        row["finding_recall"] = *r;
      }
    }
    out.predictions.push_back(std::move(row));
  }
  out.lcs_f1 = aggregate_by_region("mrg", "lcs_f1", f1);
  const bool has_findings = std::any_of(examples.begin(), examples.end(),
                                        [](const auto& e) { return e.findings.has_value(); });
  if (has_findings) out.recall = aggregate_by_region("mrg", "finding_recall", rec);
  return out;
}

struct VqaEvaluation {
  EvalReport accuracy;
  std::vector<nlohmann::json> predictions;

  nlohmann::json to_json() const { return {{"task", "vqa"}, {"accuracy", accuracy.to_json()}}; }
};

template <std::floating_point T>
VqaEvaluation evaluate_vqa(const MultimodalModel<T>& model, const std::vector<VqaEvalExample<T>>& examples,
                           std::size_t max_new = 4) {
  if (examples.empty()) throw ContractError("evaluate_vqa: no examples");
  std::vector<std::string> preds;
  std::vector<VqaRecord> records;
  VqaEvaluation out;
  GenerateOptions opt;
  opt.max_new = max_new;
  for (const auto& ex : examples) {
    const auto ids = model.generate(model.vqa_prompt(ex.record.question, ex.record.options),
                                    model.encode(ex.volume), opt);
    preds.push_back(model.vocab().decode(ids));
    records.push_back(ex.record);
    out.predictions.push_back({{"volume_path", ex.record.volume_path},
                               {"question", ex.record.question},
                               {"prediction", preds.back()},
                               {"answer", ex.record.answer_letter()}});
  }
  out.accuracy = vqa_accuracy(preds, records);
  return out;
}

}  // namespace vitlm
