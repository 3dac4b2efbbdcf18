#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitlm/model.hpp"

namespace vitlm {

struct TrainConfig {
  double lr = 1e-5;
  std::size_t batch_size = 6;
  std::size_t epochs = 8;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  std::string precision = "f32";
  std::size_t max_steps = 0;  // 0: run all epochs

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("AdamW betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("AdamW eps must be > 0");
    if (precision != "f32" && precision != "f64") {
      throw ConfigError("precision must be f32 or f64, got " + precision);
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"clip_norm", c.clip_norm},
       {"seed", c.seed},
       {"precision", c.precision},
       {"max_steps", c.max_steps}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.seed = j.value("seed", d.seed);
  c.precision = j.value("precision", d.precision);
  c.max_steps = j.value("max_steps", d.max_steps);
}

/// Sum over masked rows of −log softmax(logits[i])[targets[i]]. Row i of
/// `targets` and `mask` refers to row i of `logits`.
template <std::floating_point T>
Tensor<T> masked_ce_sum(const Tensor<T>& logits, const std::vector<std::size_t>& targets,
                        const std::vector<bool>& mask) {
  if (logits.rank() != 2 || targets.size() != logits.dim(0) || mask.size() != logits.dim(0)) {
    throw DimensionError("masked CE: logits " + shape_str(logits.shape()) + " with " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::vector<std::size_t> rows, cols;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      rows.push_back(i);
      cols.push_back(targets[i]);
    }
  }
  if (rows.empty()) throw ContractError("masked CE: mask selects no positions");
  return scale(sum(pick(log_softmax(logits, 1), std::move(rows), std::move(cols))), T(-1));
}

/// Mean of the masked per-position cross-entropies.
template <std::floating_point T>
Tensor<T> masked_ce_loss(const Tensor<T>& logits, const std::vector<std::size_t>& targets,
                         const std::vector<bool>& mask) {
  const auto n = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  auto total = masked_ce_sum(logits, targets, mask);
  return scale(total, T(1) / static_cast<T>(n));
}

/// Aligned targets/mask for teacher forcing: row i is scored against the
/// token at position i+1 when that position belongs to the target.
template <std::floating_point T>
std::pair<std::vector<std::size_t>, std::vector<bool>> shifted_targets(const MultimodalInput<T>& input) {
  const std::size_t n = input.length();
  std::vector<std::size_t> targets(n, 0);
  std::vector<bool> mask(n, false);
  for (std::size_t p = 1; p < n; ++p) {
    if (input.answer_mask[p]) {
      targets[p - 1] = static_cast<std::size_t>(input.token_ids[p]);
      mask[p - 1] = true;
    }
  }
  return {std::move(targets), std::move(mask)};
}

/// Decoupled-decay Adam. Moments live per parameter in the parameter's
/// precision; tensors without a gradient are skipped.
template <std::floating_point T>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& config) : config_(config) {}

  void step(const NamedTensors<T>& params) {
    ++t_;
    const double lr = config_.lr;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (const auto& [name, tensor] : params) {
      if (!tensor.has_grad()) continue;
      auto& s = state_[name];
      if (s.m.empty()) {
        s.m.assign(tensor.size(), T(0));
        s.v.assign(tensor.size(), T(0));
      }
      if (s.m.size() != tensor.size()) throw ContractError("optimizer state shape drift on " + name);
      Tensor<T> p = tensor;
      auto w = p.mutable_data();
      auto g = tensor.grad();
      const T decay = static_cast<T>(1.0 - lr * config_.weight_decay);
      const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] *= decay;
        s.m[i] = b1 * s.m[i] + (T(1) - b1) * g[i];
        s.v[i] = b2 * s.v[i] + (T(1) - b2) * g[i] * g[i];
        const T m_hat = s.m[i] / static_cast<T>(bc1);
        const T v_hat = s.v[i] / static_cast<T>(bc2);
        w[i] -= static_cast<T>(lr) * m_hat / (std::sqrt(v_hat) + static_cast<T>(config_.eps));
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  TrainConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, Slot> state_;
};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
template <std::floating_point T>
double clip_grad_norm(const NamedTensors<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T coef = static_cast<T>(max_norm / (norm + 1e-6));
    for (const auto& [name, t] : params) {
      if (!t.has_grad()) continue;
      for (auto& g : t.grad_buffer()) g *= coef;
    }
  }
  return norm;
}

template <std::floating_point T>
struct TrainExample {
  std::string id;
  Tensor<T> volume;  // [1×D×H×W], preprocessed
  TokenSequence prompt;
  TokenSequence target;  // ends with EOS
};

struct LossReport {
  std::size_t step = 0;
  double loss = 0.0;
  std::size_t tokens = 0;
  double seconds = 0.0;
};

inline nlohmann::json to_json_row(const LossReport& r) {
  return {{"step", r.step}, {"loss", r.loss}, {"tokens", r.tokens}, {"seconds", r.seconds}};
}

/// Summed CE and token count over a batch, recorded on the active tape.
template <std::floating_point T>
std::pair<Tensor<T>, std::size_t> batch_ce_sum(const MultimodalModel<T>& model,
                                               const std::vector<const TrainExample<T>*>& batch) {
  std::optional<Tensor<T>> total;
  std::size_t tokens = 0;
  for (const auto* ex : batch) {
    auto image = model.encode(ex->volume);
    auto input = assemble_input(ex->prompt, image, ex->target, model.params(), model.config().lm);
    auto logits = lm_forward(input, model.params(), model.config().lm);
    auto [targets, mask] = shifted_targets(input);
    tokens += static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
    auto ce = masked_ce_sum(logits, targets, mask);
    total = total ? add(*total, ce) : ce;
  }
  return {*total, tokens};
}

/// Mean per-token CE over a set of examples, no gradients.
template <std::floating_point T>
double mean_ce(const MultimodalModel<T>& model, const std::vector<TrainExample<T>>& examples) {
  double loss = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : examples) {
    auto [ce, n] = batch_ce_sum<T>(model, {&ex});
    loss += static_cast<double>(ce.item());
    tokens += n;
  }
  return loss / static_cast<double>(tokens);
}

struct TrainHooks {
  std::function<void(const LossReport&)> on_step;
  std::function<void(std::size_t epoch)> on_epoch;
  std::function<bool(const LossReport&)> stop;  // true ends training after this step
};

/// Seeded minibatch AdamW over the trainable groups. When `out_dir` is set,
/// writes `loss.jsonl` and one checkpoint per epoch (`epoch_001`, ...);
/// `extra_meta` is merged into every checkpoint manifest.
template <std::floating_point T>
std::vector<LossReport> train_loop(MultimodalModel<T>& model,
                                   const std::vector<TrainExample<T>>& dataset,
                                   const TrainConfig& config,
                                   const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                   const TrainHooks& hooks = {},
                                   const nlohmann::json& extra_meta = nlohmann::json::object()) {
  config.validate();
  if (dataset.empty()) throw ContractError("train_loop: empty dataset");
  std::ofstream log;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    log.open(*out_dir / "loss.jsonl");
    if (!log) throw IoError("cannot write " + (*out_dir / "loss.jsonl").string());
  }
  auto trainable = model.params().trainable();
  AdamW<T> opt(config);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(dataset.size());
  std::vector<LossReport> reports;
  std::size_t step = 0;
  bool stopped = false;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      if (config.max_steps && step >= config.max_steps) break;
      std::vector<const TrainExample<T>*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        batch.push_back(&dataset[order[i]]);
      }
      ++step;
      LossReport r;
      r.step = step;
      try {
        Tape<T> tape;
        auto [total, tokens] = batch_ce_sum(model, batch);
        auto loss = scale(total, T(1) / static_cast<T>(tokens));
        model.params().zero_grad();
        tape.backward(loss);
        clip_grad_norm(trainable, config.clip_norm);
        opt.step(trainable);
        r.loss = static_cast<double>(loss.item());
        r.tokens = tokens;
      } catch (const NonFiniteError& e) {
        std::string ids;
        for (const auto* ex : batch) ids += (ids.empty() ? "" : ",") + ex->id;
        throw NonFiniteError("training diverged at epoch " + std::to_string(epoch) + " step " +
                             std::to_string(step) + " (batch: " + ids + "): " + e.what());
      }
      r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      reports.push_back(r);
      if (log) log << to_json_row(r).dump() << "\n" << std::flush;
      if (hooks.on_step) hooks.on_step(r);
      if (hooks.stop && hooks.stop(r)) {
        stopped = true;
        break;
      }
    }
    if (out_dir) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03zu", epoch);
      nlohmann::json meta = extra_meta;
      meta["train"] = config;
      meta["epoch"] = epoch;
      meta["step"] = step;
      model.save(*out_dir / name, meta);
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch);
    if (stopped || (config.max_steps && step >= config.max_steps)) break;
  }
  model.params().zero_grad();
  return reports;
}

/// Exact parameter counts by group.
struct ParamCounts {
  std::map<std::string, std::size_t> by_group;

  std::size_t trainable() const {
    std::size_t n = 0;
    for (const auto& [g, c] : by_group) {
      if (g != "lm_base") n += c;
    }
    return n;
  }
  std::size_t frozen() const {
    auto it = by_group.find("lm_base");
    return it == by_group.end() ? 0 : it->second;
  }
  std::size_t get(const std::string& g) const {
    auto it = by_group.find(g);
    return it == by_group.end() ? 0 : it->second;
  }
};

template <std::floating_point T>
ParamCounts param_count(const ParamStore<T>& store) {
  ParamCounts c;
  for (const char* g : {"vision", "projector", "lora", "lm_base"}) c.by_group[g] = 0;
  for (const auto& e : store.entries()) c.by_group[group_name(e.group)] += e.tensor.size();
  return c;
}

inline std::string human_count(std::size_t n) {
  char buf[32];
  if (n >= 1'000'000'000) {
    std::snprintf(buf, sizeof buf, "%.1fB", n / 1e9);
  } else if (n >= 1'000'000) {
    std::snprintf(buf, sizeof buf, "%.1fM", n / 1e6);
  } else if (n >= 1'000) {
    std::snprintf(buf, sizeof buf, "%.1fK", n / 1e3);
  } else {
    std::snprintf(buf, sizeof buf, "%zu", n);
  }
  return buf;
}

inline std::string format_param_counts(const ParamCounts& c) {
  std::string out;
  out += human_count(c.get("vision")) + " trainable parameters in vision encoder, ";
  out += human_count(c.get("projector")) + " in multimodal projector, and ";
  out += human_count(c.get("lora")) + " in LoRA";
  out += " (" + std::to_string(c.get("vision")) + " / " + std::to_string(c.get("projector")) +
         " / " + std::to_string(c.get("lora")) + "; trainable total " +
         std::to_string(c.trainable()) + ", frozen language model " + std::to_string(c.frozen()) +
         ")";
  return out;
}

}  // namespace vitlm
