#pragma once

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "vitlm/checkpoint.hpp"
#include "vitlm/tensor.hpp"

namespace vitlm {

/// Trainability split: the vision encoder, projector and LoRA adapters are
/// trained; the language model base stays frozen.
enum class ParamGroup { vision, projector, lora, lm_base };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::vision: return "vision";
    case ParamGroup::projector: return "projector";
    case ParamGroup::lora: return "lora";
    case ParamGroup::lm_base: return "lm_base";
  }
  return "?";
}

inline bool is_trainable(ParamGroup g) { return g != ParamGroup::lm_base; }

template <std::floating_point T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ParamGroup group;
    Tensor<T> tensor;
  };

  Tensor<T>& add(std::string name, ParamGroup group, Tensor<T> tensor) {
    if (index_.count(name)) throw ContractError("duplicate parameter " + name);
    tensor.set_requires_grad(is_trainable(group));
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), group, std::move(tensor)});
    return entries_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const { return entries_[position(name)].tensor; }
  Tensor<T>& get(const std::string& name) { return entries_[position(name)].tensor; }
  ParamGroup group(const std::string& name) const { return entries_[position(name)].group; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  NamedTensors<T> named() const {
    NamedTensors<T> out;
    for (const auto& e : entries_) out.emplace_back(e.name, e.tensor);
    return out;
  }

  NamedTensors<T> trainable() const {
    NamedTensors<T> out;
    for (const auto& e : entries_) {
      if (is_trainable(e.group)) out.emplace_back(e.name, e.tensor);
    }
    return out;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.clear_grad();
  }

 private:
  std::size_t position(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Seeded initializer. Draws in double so f32 and f64 models built from one
/// seed agree up to rounding.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <std::floating_point T>
  Tensor<T> normal(Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> data(numel(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng_));
    return Tensor<T>(std::move(shape), std::move(data));
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

template <std::floating_point T>
void add_linear(ParamStore<T>& store, Initializer& init, const std::string& name, ParamGroup group,
                std::size_t in, std::size_t out, bool bias = true) {
  store.add(name + ".weight", group, init.normal<T>({out, in}, 1.0 / std::sqrt(double(in))));
  if (bias) store.add(name + ".bias", group, Tensor<T>::zeros({out}));
}

template <std::floating_point T>
void add_layer_norm(ParamStore<T>& store, const std::string& name, ParamGroup group, std::size_t d) {
  store.add(name + ".gain", group, Tensor<T>::full({d}, T(1)));
  store.add(name + ".bias", group, Tensor<T>::zeros({d}));
}

}  // namespace vitlm
