#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitlm/tokenizer.hpp"
#include "vitlm/transformer.hpp"
#include "vitlm/vision.hpp"

namespace vitlm {

struct LmConfig {
  std::size_t vocab_size = 0;
  std::size_t d_lm = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 96;
  std::size_t mlp_mult = 4;
  LoraConfig lora{};

  void validate() const {
    if (vocab_size <= static_cast<std::size_t>(Vocab::kNumSpecials)) {
      throw ConfigError("vocab_size must exceed the special-token count");
    }
    if (d_lm == 0 || n_heads == 0 || d_lm % n_heads != 0) {
      throw ConfigError("d_lm must be a positive multiple of n_heads");
    }
    if (lora.rank < 1) throw ConfigError("LoRA rank must be >= 1");
    for (const auto& t : lora.targets) lora_linear_name("x", t);
  }
};

inline void to_json(nlohmann::json& j, const LmConfig& c) {
  j = {{"vocab_size", c.vocab_size},
       {"d_lm", c.d_lm},
       {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},
       {"max_seq_len", c.max_seq_len},
       {"mlp_mult", c.mlp_mult},
       {"lora", {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"targets", c.lora.targets}}}};
}

inline void from_json(const nlohmann::json& j, LmConfig& c) {
  LmConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_lm = j.value("d_lm", d.d_lm);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.mlp_mult = j.value("mlp_mult", d.mlp_mult);
  const auto lora = j.value("lora", nlohmann::json::object());
  c.lora.rank = lora.value("rank", d.lora.rank);
  c.lora.alpha = lora.value("alpha", d.lora.alpha);
  c.lora.targets = lora.value("targets", d.lora.targets);
}

/// [BOS | prompt before <img> | image tokens | prompt after <img> | target],
/// embedded. `token_ids` is −1 on image rows; `answer_mask` marks target rows.
template <std::floating_point T>
struct MultimodalInput {
  Tensor<T> embeddings;  // [L × d_lm], positions not yet added
  std::vector<int> token_ids;
  std::vector<bool> answer_mask;

  std::size_t length() const { return token_ids.size(); }
};

template <std::floating_point T>
MultimodalInput<T> assemble_input(const TokenSequence& prompt, const ImageContext<T>& image,
                                  const TokenSequence& target, const ParamStore<T>& store,
                                  const LmConfig& config) {
  const auto img_count = std::count(prompt.ids.begin(), prompt.ids.end(), Vocab::kImg);
  if (img_count != 1) {
    throw ContractError("prompt must contain exactly one <img> placeholder, found " +
                        std::to_string(img_count));
  }
  if (std::count(target.ids.begin(), target.ids.end(), Vocab::kImg) != 0) {
    throw ContractError("target may not contain <img>");
  }
  const std::size_t n_img = image.tokens.dim(0);
  const std::size_t length = prompt.size() + n_img + target.size();  // BOS replaces <img>
  if (length > config.max_seq_len) {
    throw LengthError("assembled sequence of " + std::to_string(length) +
                      " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  if (image.tokens.dim(1) != config.d_lm) {
    throw DimensionError("image tokens have width " + std::to_string(image.tokens.dim(1)) +
                         ", language model expects " + std::to_string(config.d_lm));
  }

  const auto img_at = static_cast<std::size_t>(
      std::find(prompt.ids.begin(), prompt.ids.end(), Vocab::kImg) - prompt.ids.begin());
  std::vector<int> before{Vocab::kBos};
  before.insert(before.end(), prompt.ids.begin(), prompt.ids.begin() + img_at);
  std::vector<int> after(prompt.ids.begin() + img_at + 1, prompt.ids.end());
  after.insert(after.end(), target.ids.begin(), target.ids.end());

  const auto& table = store.get("lm.tok_embed");
  std::vector<Tensor<T>> parts{embedding_lookup(table, std::span<const int>(before)), image.tokens};
  if (!after.empty()) parts.push_back(embedding_lookup(table, std::span<const int>(after)));

  MultimodalInput<T> input;
  input.embeddings = concat(parts, 0);
  input.token_ids = before;
  input.token_ids.insert(input.token_ids.end(), n_img, -1);
  input.token_ids.insert(input.token_ids.end(), after.begin(), after.end());
  input.answer_mask.assign(input.token_ids.size(), false);
  std::fill(input.answer_mask.end() - static_cast<std::ptrdiff_t>(target.size()),
            input.answer_mask.end(), true);
  return input;
}

/// Causal decoder forward; returns next-token logits [L × V].
template <std::floating_point T>
Tensor<T> lm_forward(const MultimodalInput<T>& input, const ParamStore<T>& store,
                     const LmConfig& config) {
  const std::size_t length = input.embeddings.dim(0);
  if (length > config.max_seq_len) {
    throw LengthError("sequence of " + std::to_string(length) + " exceeds max_seq_len");
  }
  BlockSpec spec{config.d_lm, config.n_heads, true, &config.lora};
  auto x = add(input.embeddings, slice(store.get("lm.pos_embed"), 0, 0, length));
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    x = transformer_block(x, store, "lm.blocks." + std::to_string(i), spec);
  }
  x = apply_layer_norm(x, store, "lm.ln_final", spec.ln_eps);
  return matmul_nt(x, store.get("lm.head.weight"));
}

/// Row i of the logits predicts token i+1: returns the rows and ids that
/// fall on target positions.
struct NextTokenTargets {
  std::vector<std::size_t> rows;
  std::vector<std::size_t> ids;
};

template <std::floating_point T>
NextTokenTargets next_token_targets(const MultimodalInput<T>& input) {
  NextTokenTargets t;
  for (std::size_t p = 1; p < input.length(); ++p) {
    if (input.answer_mask[p]) {
      t.rows.push_back(p - 1);
      t.ids.push_back(static_cast<std::size_t>(input.token_ids[p]));
    }
  }
  return t;
}

/// Σ_t log P(y_t | prompt, image, y_<t), teacher-forced in one pass.
template <std::floating_point T>
Tensor<T> sequence_log_prob(const TokenSequence& prompt, const ImageContext<T>& image,
                            const TokenSequence& target, const ParamStore<T>& store,
                            const LmConfig& config) {
  if (target.empty()) throw ContractError("sequence_log_prob needs a nonempty target");
  auto input = assemble_input(prompt, image, target, store, config);
  auto logp = log_softmax(lm_forward(input, store, config), 1);
  auto t = next_token_targets(input);
  return sum(pick(logp, t.rows, t.ids));
}

enum class DecodeMode { greedy, temperature, top_k };

struct GenerateOptions {
  DecodeMode mode = DecodeMode::greedy;
  double temperature = 1.0;
  std::size_t top_k = 5;
  std::uint64_t seed = 0;
  std::size_t max_new = 64;
};

namespace detail {

template <std::floating_point T>
int argmax_lowest(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return static_cast<int>(best);
}

template <std::floating_point T>
int sample_row(std::span<const T> row, const GenerateOptions& opt, std::mt19937_64& rng) {
  if (opt.mode == DecodeMode::greedy || opt.temperature <= 0.0) return argmax_lowest(row);
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (opt.mode == DecodeMode::top_k && opt.top_k > 0 && opt.top_k < row.size()) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    order.resize(opt.top_k);
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (auto j : order) mx = std::max(mx, static_cast<double>(row[j]));
  std::vector<double> w(order.size());
  double z = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    w[i] = std::exp((static_cast<double>(row[order[i]]) - mx) / opt.temperature);
    z += w[i];
  }
  double u = std::uniform_real_distribution<double>(0.0, z)(rng);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (u < w[i]) return static_cast<int>(order[i]);
    u -= w[i];
  }
  return static_cast<int>(order.back());
}

}  // namespace detail

/// Autoregressive decoding; stops at EOS (not included) or after max_new
/// tokens. The prefix is recomputed every step. PAD, BOS and IMG are never
/// emitted.
template <std::floating_point T>
TokenSequence generate(const TokenSequence& prompt, const ImageContext<T>& image,
                       const ParamStore<T>& store, const LmConfig& config,
                       const GenerateOptions& options) {
  if (options.max_new < 1) throw ContractError("generate needs max_new >= 1");
  std::mt19937_64 rng(options.seed);
  TokenSequence out;
  const std::size_t fixed = prompt.size() + image.tokens.dim(0);
  while (out.size() < options.max_new && fixed + out.size() < config.max_seq_len) {
    auto logits = lm_forward(assemble_input(prompt, image, out, store, config), store, config);
    const std::size_t v = logits.dim(1);
    auto last = logits.data().subspan((logits.dim(0) - 1) * v, v);
    std::vector<T> row(last.begin(), last.end());
    for (int banned : {Vocab::kPad, Vocab::kBos, Vocab::kImg}) {
      if (static_cast<std::size_t>(banned) < v) row[banned] = -std::numeric_limits<T>::infinity();
    }
    const int next = detail::sample_row(std::span<const T>(row), options, rng);
    if (next == Vocab::kEos) break;
    out.ids.push_back(next);
  }
  return out;
}

template <std::floating_point T>
void init_lm_params(ParamStore<T>& store, Initializer& init, const LmConfig& config) {
  config.validate();
  store.add("lm.tok_embed", ParamGroup::lm_base, init.normal<T>({config.vocab_size, config.d_lm}, 1.0));
  store.add("lm.pos_embed", ParamGroup::lm_base,
            init.normal<T>({config.max_seq_len, config.d_lm}, 0.1));
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    add_transformer_block(store, init, "lm.blocks." + std::to_string(i), ParamGroup::lm_base,
                          config.d_lm, config.mlp_mult);
  }
  add_layer_norm(store, "lm.ln_final", ParamGroup::lm_base, config.d_lm);
  add_linear(store, init, "lm.head", ParamGroup::lm_base, config.d_lm, config.vocab_size, false);
}

template <std::floating_point T>
void init_lora_params(ParamStore<T>& store, Initializer& init, const LmConfig& config) {
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    for (const auto& target : config.lora.targets) {
      attach_lora(store, init, lora_linear_name("lm.blocks." + std::to_string(i), target),
                  config.lora);
    }
  }
}

}  // namespace vitlm
