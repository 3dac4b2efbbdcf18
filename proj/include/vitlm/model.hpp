#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "vitlm/checkpoint.hpp"
#include "vitlm/language_model.hpp"
#include "vitlm/prompts.hpp"
#include "vitlm/vision.hpp"

namespace vitlm {

struct ModelConfig {
  VisionConfig vision{};
  LmConfig lm{};
  std::uint64_t seed = 0;

  void validate() const {
    vision.validate();
    lm.validate();
    if (vision.d_lm != lm.d_lm) {
      throw ConfigError("projector width " + std::to_string(vision.d_lm) +
                        " differs from language model width " + std::to_string(lm.d_lm));
    }
    if (lm.max_seq_len < vision.num_image_tokens() + 2) {
      throw ConfigError("max_seq_len cannot hold the image tokens");
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vision", c.vision}, {"lm", c.lm}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vision = j.value("vision", VisionConfig{});
  c.lm = j.value("lm", LmConfig{});
  c.seed = j.value("seed", std::uint64_t{0});
}

/// Vision encoder, projector and LoRA-adapted decoder sharing one parameter
/// store, plus the vocabulary and prompt templates needed to run it.
template <std::floating_point T>
class MultimodalModel {
 public:
  MultimodalModel(ModelConfig config, Vocab vocab, PromptTemplates templates = {})
      : config_(std::move(config)), vocab_(std::move(vocab)), templates_(std::move(templates)) {
    config_.lm.vocab_size = vocab_.size();
    config_.vision.d_lm = config_.lm.d_lm;
    config_.validate();
    templates_.validate();
    Initializer init(config_.seed);
    init_vision_params(store_, init, config_.vision);
    init_projector_params(store_, init, config_.vision);
    init_lm_params(store_, init, config_.lm);
    init_lora_params(store_, init, config_.lm);
  }

  const ModelConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }
  const PromptTemplates& templates() const { return templates_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  ImageContext<T> encode(const Tensor<T>& volume) const {
    return encode_image(volume, config_.vision, store_);
  }

  Tensor<T> logits(const TokenSequence& prompt, const ImageContext<T>& image,
                   const TokenSequence& target) const {
    return lm_forward(assemble_input(prompt, image, target, store_, config_.lm), store_,
                      config_.lm);
  }

  Tensor<T> log_prob(const TokenSequence& prompt, const ImageContext<T>& image,
                     const TokenSequence& target) const {
    return sequence_log_prob(prompt, image, target, store_, config_.lm);
  }

  TokenSequence generate(const TokenSequence& prompt, const ImageContext<T>& image,
                         const GenerateOptions& options) const {
    return vitlm::generate(prompt, image, store_, config_.lm, options);
  }

  TokenSequence mrg_prompt(std::string_view region) const {
    return vocab_.encode(templates_.render_mrg(region));
  }

  TokenSequence vqa_prompt(std::string_view question, const std::vector<std::string>& options) const {
    return vocab_.encode(templates_.render_vqa(question, options));
  }

  /// Target ids for training: the encoded text followed by EOS.
  TokenSequence target(std::string_view text) const {
    auto seq = vocab_.encode(text);
    seq.ids.push_back(Vocab::kEos);
    return seq;
  }

  void save(const std::filesystem::path& dir, nlohmann::json extra = nlohmann::json::object()) const {
    nlohmann::json meta = {{"model", config_},
                           {"vocab", vocab_.to_json()},
                           {"templates", templates_},
                           {"precision", dtype_name<T>()}};
    for (auto& [k, v] : extra.items()) meta[k] = v;
    save_checkpoint(dir, store_.named(), meta);
    std::ofstream(dir / "vocab.json") << vocab_.to_json().dump() << "\n";
  }

  /// Rebuilds the architecture from the manifest and overwrites every
  /// parameter with its stored value.
  static MultimodalModel load(const std::filesystem::path& dir) {
    auto ck = Checkpoint::load(dir);
    const auto& meta = ck.meta();
    if (!meta.contains("model") || !meta.contains("vocab")) {
      throw FormatError(dir.string() + ": manifest lacks model config or vocabulary");
    }
    MultimodalModel m(meta.at("model").get<ModelConfig>(), Vocab::from_json(meta.at("vocab")),
                      meta.value("templates", PromptTemplates{}));
    for (auto& e : m.store_.entries()) {
      auto stored = ck.get<T>(e.name);
      if (stored.shape() != e.tensor.shape()) {
        throw FormatError("checkpoint tensor " + e.name + " has shape " +
                          shape_str(stored.shape()) + ", model expects " +
                          shape_str(e.tensor.shape()));
      }
      auto dst = e.tensor.mutable_data();
      std::copy(stored.data().begin(), stored.data().end(), dst.begin());
    }
    return m;
  }

 private:
  ModelConfig config_;
  Vocab vocab_;
  PromptTemplates templates_;
  ParamStore<T> store_;
};

}  // namespace vitlm
