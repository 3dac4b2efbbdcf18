#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "vitlm/ops.hpp"
#include "vitlm/params.hpp"

namespace vitlm {

/// Low-rank adapter settings. Targets name linear layers inside a block:
/// q, k, v, o (attention) and up, down (MLP).
struct LoraConfig {
  std::size_t rank = 8;
  double alpha = 16.0;
  std::vector<std::string> targets{"q", "v"};
};

/// ΔW = (alpha / rank) · B · A attached to a frozen weight [d_out × d_in].
template <std::floating_point T>
struct LoraAdapter {
  std::string target;
  Tensor<T> a;  // [rank × d_in]
  Tensor<T> b;  // [d_out × rank], zero at init
  std::size_t rank = 0;
  double alpha = 0.0;

  T scaling() const { return static_cast<T>(alpha / static_cast<double>(rank)); }
};

/// W + (α/r)·B·A as a new tensor; `base` is never written.
template <std::floating_point T>
Tensor<T> lora_apply(const Tensor<T>& base, const LoraAdapter<T>& adapter) {
  if (adapter.rank < 1) throw ConfigError("LoRA rank must be >= 1");
  if (base.rank() != 2 || adapter.a.rank() != 2 || adapter.b.rank() != 2 ||
      adapter.a.dim(0) != adapter.rank || adapter.b.dim(1) != adapter.rank ||
      adapter.a.dim(1) != base.dim(1) || adapter.b.dim(0) != base.dim(0)) {
    throw ConfigError("LoRA adapter " + adapter.target + " (A " + shape_str(adapter.a.shape()) +
                      ", B " + shape_str(adapter.b.shape()) + ", r=" +
                      std::to_string(adapter.rank) + ") does not fit weight " +
                      shape_str(base.shape()));
  }
  return add(base, scale(matmul(adapter.b, adapter.a), adapter.scaling()));
}

template <std::floating_point T>
void attach_lora(ParamStore<T>& store, Initializer& init, const std::string& linear,
                 const LoraConfig& cfg) {
  const auto& w = store.get(linear + ".weight");
  const std::size_t d_out = w.dim(0), d_in = w.dim(1);
  store.add(linear + ".lora_a", ParamGroup::lora,
            init.normal<T>({cfg.rank, d_in}, 1.0 / std::sqrt(double(d_in))));
  store.add(linear + ".lora_b", ParamGroup::lora, Tensor<T>::zeros({d_out, cfg.rank}));
}

template <std::floating_point T>
std::optional<LoraAdapter<T>> find_adapter(const ParamStore<T>& store, const std::string& linear,
                                           const LoraConfig& cfg) {
  if (!store.contains(linear + ".lora_a")) return std::nullopt;
  return LoraAdapter<T>{linear, store.get(linear + ".lora_a"), store.get(linear + ".lora_b"),
                        cfg.rank, cfg.alpha};
}

struct BlockSpec {
  std::size_t d_model = 0;
  std::size_t n_heads = 1;
  bool causal = false;
  const LoraConfig* lora = nullptr;  // null: no adapters anywhere in the block
  double ln_eps = 1e-5;
};

/// x·Wᵀ + b for the linear layer `name`, with its adapter folded in if present.
template <std::floating_point T>
Tensor<T> apply_linear(const Tensor<T>& x, const ParamStore<T>& store, const std::string& name,
                       const LoraConfig* lora) {
  Tensor<T> weight = store.get(name + ".weight");
  if (lora != nullptr) {
    if (auto adapter = find_adapter(store, name, *lora)) weight = lora_apply(weight, *adapter);
  }
  if (store.contains(name + ".bias")) {
    const Tensor<T>& bias = store.get(name + ".bias");
    return linear(x, weight, &bias);
  }
  return linear(x, weight);
}

template <std::floating_point T>
Tensor<T> apply_layer_norm(const Tensor<T>& x, const ParamStore<T>& store, const std::string& name,
                           double eps) {
  return layer_norm(x, store.get(name + ".gain"), store.get(name + ".bias"), static_cast<T>(eps));
}

/// Multi-head self-attention over rows of h [L × d].
template <std::floating_point T>
Tensor<T> self_attention(const Tensor<T>& h, const ParamStore<T>& store, const std::string& prefix,
                         const BlockSpec& spec) {
  const std::size_t dh = spec.d_model / spec.n_heads;
  auto q = apply_linear(h, store, prefix + ".q", spec.lora);
  auto k = apply_linear(h, store, prefix + ".k", spec.lora);
  auto v = apply_linear(h, store, prefix + ".v", spec.lora);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Tensor<T>> heads;
  heads.reserve(spec.n_heads);
  for (std::size_t hd = 0; hd < spec.n_heads; ++hd) {
    auto qh = slice(q, 1, hd * dh, dh);
    auto kh = slice(k, 1, hd * dh, dh);
    auto vh = slice(v, 1, hd * dh, dh);
    auto scores = scale(matmul_nt(qh, kh), inv_sqrt);
    auto probs = spec.causal ? causal_softmax(scores) : softmax(scores, 1);
    heads.push_back(matmul(probs, vh));
  }
  auto merged = spec.n_heads == 1 ? heads.front() : concat(heads, 1);
  return apply_linear(merged, store, prefix + ".o", spec.lora);
}

/// Pre-norm block: x + attn(ln1(x)), then + mlp(ln2(·)).
template <std::floating_point T>
Tensor<T> transformer_block(const Tensor<T>& x, const ParamStore<T>& store,
                            const std::string& prefix, const BlockSpec& spec) {
  auto attn = self_attention(apply_layer_norm(x, store, prefix + ".ln1", spec.ln_eps), store,
                             prefix + ".attn", spec);
  auto x1 = add(x, attn);
  auto h = apply_layer_norm(x1, store, prefix + ".ln2", spec.ln_eps);
  auto mlp = apply_linear(gelu(apply_linear(h, store, prefix + ".mlp.up", spec.lora)), store,
                          prefix + ".mlp.down", spec.lora);
  return add(x1, mlp);
}

template <std::floating_point T>
void add_transformer_block(ParamStore<T>& store, Initializer& init, const std::string& prefix,
                           ParamGroup group, std::size_t d, std::size_t mlp_mult) {
  add_layer_norm(store, prefix + ".ln1", group, d);
  for (const char* p : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) {
    add_linear(store, init, prefix + p, group, d, d);
  }
  add_layer_norm(store, prefix + ".ln2", group, d);
  add_linear(store, init, prefix + ".mlp.up", group, d, d * mlp_mult);
  add_linear(store, init, prefix + ".mlp.down", group, d * mlp_mult, d);
}

inline std::string lora_linear_name(const std::string& block_prefix, const std::string& target) {
  if (target == "q" || target == "k" || target == "v" || target == "o") {
    return block_prefix + ".attn." + target;
  }
  if (target == "up" || target == "down") return block_prefix + ".mlp." + target;
  throw ConfigError("unknown LoRA target '" + target + "' (expected q, k, v, o, up or down)");
}

}  // namespace vitlm
