#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitlm/errors.hpp"

namespace vitlm {

struct TokenSequence {
  std::vector<int> ids;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool operator==(const TokenSequence&) const = default;
};

/// Word-level text normalization shared by the tokenizer and the metrics:
/// ASCII lowercase, whitespace split, punctuation split into single-character
/// tokens (a '.' between digits stays inside the number), `<img>` kept whole.
inline std::vector<std::string> split_words(std::string_view text) {
  auto is_punct = [](char c) {
    return std::string_view(".,;:?!()[]\"").find(c) != std::string_view::npos;
  };
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(text[i])));
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (c == '<' && i + 5 <= text.size()) {
      std::string probe(text.substr(i, 5));
      std::transform(probe.begin(), probe.end(), probe.begin(),
                     [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
      if (probe == "<img>") {
        flush();
        out.emplace_back("<img>");
        i += 4;
      } else {
        cur.push_back(c);
      }
    } else if (is_punct(c)) {
      const bool decimal = c == '.' && !cur.empty() &&
                           std::isdigit(static_cast<unsigned char>(cur.back())) &&
                           i + 1 < text.size() &&
                           std::isdigit(static_cast<unsigned char>(text[i + 1]));
      if (decimal) {
        cur.push_back(c);
      } else {
        flush();
        out.emplace_back(1, c);
      }
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kImg = 4;
  static constexpr int kNumSpecials = 5;

  static const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> s = {"<pad>", "<bos>", "<eos>", "<unk>", "<img>"};
    return s;
  }

  /// Frequency-ranked word vocabulary, specials first; ties broken
  /// lexicographically so the result depends only on the corpus contents.
  static Vocab build(const std::vector<std::string>& corpus) {
    if (corpus.empty()) throw ContractError("build_vocab: empty corpus");
    std::map<std::string, std::size_t> counts;
    for (const auto& text : corpus) {
      for (auto& w : split_words(text)) {
        if (!is_special(w)) ++counts[w];
      }
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens = special_tokens();
    for (auto& [w, n] : ranked) tokens.push_back(w);
    return from_tokens(std::move(tokens));
  }

  static Vocab from_tokens(std::vector<std::string> tokens) {
    const auto& specials = special_tokens();
    if (tokens.size() < specials.size() ||
        !std::equal(specials.begin(), specials.end(), tokens.begin())) {
      throw FormatError("vocabulary must start with the special tokens");
    }
    Vocab v;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (!v.index_.emplace(tokens[i], static_cast<int>(i)).second) {
        throw FormatError("duplicate vocabulary token: " + tokens[i]);
      }
    }
    v.tokens_ = std::move(tokens);
    return v;
  }

  static Vocab from_json(const nlohmann::json& j) {
    return from_tokens(j.get<std::vector<std::string>>());
  }
  nlohmann::json to_json() const { return tokens_; }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw OutOfVocabularyError("token id " + std::to_string(id) + " outside vocabulary of " +
                                 std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  TokenSequence encode(std::string_view text) const {
    TokenSequence seq;
    for (const auto& w : split_words(text)) seq.ids.push_back(id(w));
    return seq;
  }

  /// Inverse of encode up to canonical form: single spaces, punctuation
  /// attached to the preceding word, sentence-case capitalization. BOS, EOS
  /// and PAD are not rendered.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    bool sentence_start = true;
    bool suppress_space = true;
    for (int id : ids) {
      const std::string& tok = token(id);
      if (id == kBos || id == kEos || id == kPad) continue;
      const bool closing = tok.size() == 1 && std::string_view(".,;:?!)]").find(tok[0]) != std::string_view::npos;
      if (!suppress_space && !closing) out.push_back(' ');
      std::size_t start = out.size();
      out += tok;
      if (sentence_start && !is_special(tok) && !closing) {
        out[start] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[start])));
        sentence_start = false;
      }
      if (tok == "." || tok == "?" || tok == "!") sentence_start = true;
      suppress_space = tok == "(" || tok == "[";
    }
    return out;
  }
  std::string decode(const TokenSequence& seq) const { return decode(seq.ids); }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  static bool is_special(const std::string& w) {
    const auto& s = special_tokens();
    return std::find(s.begin(), s.end(), w) != s.end();
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace vitlm
