#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitlm/errors.hpp"
#include "vitlm/tokenizer.hpp"

namespace vitlm {

inline constexpr std::array<std::string_view, 3> kRegions = {"chest", "abdomen", "pelvis"};

inline bool is_region(std::string_view r) {
  for (auto k : kRegions) {
    if (k == r) return true;
  }
  return false;
}

inline char option_letter(std::size_t i) {
  if (i >= 26) throw ContractError("option index out of range");
  return static_cast<char>('A' + i);
}

/// "(A) yes, (B) no, ..."
inline std::string render_options(const std::vector<std::string>& options) {
  std::string out;
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (i) out += ", ";
    out += '(';
    out += option_letter(i);
    out += ") ";
    out += options[i];
  }
  return out;
}

namespace detail {

inline std::string substitute(std::string text, std::string_view key, std::string_view value) {
  const auto pos = text.find(key);
  if (pos == std::string::npos) {
    throw ConfigError("prompt template lacks placeholder " + std::string(key));
  }
  text.replace(pos, key.size(), value);
  return text;
}

}  // namespace detail

/// Instruction templates. `{region}`, `{question}` and `{A..D}` are
/// placeholders; each template carries one `<IMG>` marker.
struct PromptTemplates {
  std::string mrg = "Describe the findings in the {region} region. <IMG>";
  std::string vqa = "<IMG> {question} Options: {A..D}. Answer with the option letter.";

  void validate() const {
    for (const auto* t : {&mrg, &vqa}) {
      std::size_t n = 0;
      for (const auto& w : split_words(*t)) n += w == "<img>";
      if (n != 1) throw ConfigError("prompt template needs exactly one <IMG>: " + *t);
    }
    if (mrg.find("{region}") == std::string::npos) throw ConfigError("MRG template lacks {region}");
    if (vqa.find("{question}") == std::string::npos || vqa.find("{A..D}") == std::string::npos) {
      throw ConfigError("VQA template lacks {question} or {A..D}");
    }
  }

  std::string render_mrg(std::string_view region) const {
    return detail::substitute(mrg, "{region}", region);
  }

  std::string render_vqa(std::string_view question, const std::vector<std::string>& options) const {
    return detail::substitute(detail::substitute(vqa, "{question}", question), "{A..D}",
                              render_options(options));
  }
};

inline void to_json(nlohmann::json& j, const PromptTemplates& t) {
  j = {{"mrg", t.mrg}, {"vqa", t.vqa}};
}

inline void from_json(const nlohmann::json& j, PromptTemplates& t) {
  PromptTemplates d;
  t.mrg = j.value("mrg", d.mrg);
  t.vqa = j.value("vqa", d.vqa);
  t.validate();
}

}  // namespace vitlm
