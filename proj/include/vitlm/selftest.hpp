#pragma once

#include <chrono>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "vitlm/gradcheck.hpp"
#include "vitlm/trainer.hpp"

namespace vitlm::selftest {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

inline Vocab toy_vocab() {
  return Vocab::build({"describe the findings in the chest abdomen pelvis region .",
                       "there is a 10 15 20 mm nodule lesion cyst stone in the lung liver kidney bladder .",
                       "no abnormality detected . is there a ? options : ( a ) yes , ( b ) no",
                       "answer with the option letter . how many findings are"});
}

template <std::floating_point T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v));
}

template <std::floating_point T>
Tensor<T> random_volume(const VisionConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<T> v(cfg.input_shape[0] * cfg.input_shape[1] * cfg.input_shape[2]);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>({1, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]}, std::move(v));
}

/// Fills every LoRA B with small noise so adapters contribute to the output.
template <std::floating_point T>
void perturb_lora(ParamStore<T>& store, std::mt19937_64& rng, double stddev = 0.05) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& e : store.entries()) {
    if (e.group == ParamGroup::lora && e.name.ends_with(".lora_b")) {
      for (auto& x : e.tensor.mutable_data()) x = static_cast<T>(dist(rng));
    }
  }
}

template <std::floating_point T>
TokenSequence random_prompt(const Vocab& vocab, std::size_t len, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> word(Vocab::kNumSpecials, static_cast<int>(vocab.size()) - 1);
  TokenSequence s;
  for (std::size_t i = 0; i < len; ++i) s.ids.push_back(word(rng));
  const auto at = std::uniform_int_distribution<std::size_t>(0, len)(rng);
  s.ids.insert(s.ids.begin() + static_cast<std::ptrdiff_t>(at), Vocab::kImg);
  return s;
}

template <std::floating_point T>
TokenSequence random_target(const Vocab& vocab, std::size_t len, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> word(Vocab::kNumSpecials, static_cast<int>(vocab.size()) - 1);
  TokenSequence s;
  for (std::size_t i = 0; i + 1 < len; ++i) s.ids.push_back(word(rng));
  s.ids.push_back(Vocab::kEos);
  return s;
}

inline double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Central finite differences for every primitive and for the whole toy
/// vision + language stack in 64-bit. Frozen weights are checked too, by
/// temporarily marking them differentiable; LoRA B is perturbed away from
/// zero so the adapter paths carry gradient.
inline CheckResult gradient_suite(double tolerance = 1e-4, std::size_t samples_per_tensor = 4,
                                  std::uint64_t seed = 11) {
  using T = double;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  std::string worst_name;
  auto track = [&](const GradCheckResult& r, const std::string& prefix) {
    for (const auto& e : r.entries) {
      if (e.relative_error > worst) {
        worst = e.relative_error;
        worst_name = prefix + e.name;
      }
    }
  };
  auto param = [&](Shape s, double sd = 1.0) {
    auto t = detail::random_tensor<T>(std::move(s), rng, sd);
    t.set_requires_grad(true);
    return t;
  };

  {
    auto a = param({3, 5}), b = param({3, 5}), w = param({4, 5}), bias = param({4});
    auto m = param({5, 4}), sq = param({4, 4}), g = param({5}), lb = param({5});
    auto probe = detail::random_tensor<T>({3, 4}, rng, 1.0);
    auto probe5 = detail::random_tensor<T>({3, 5}, rng, 1.0);
    auto probe_sq = detail::random_tensor<T>({4, 4}, rng, 1.0);
    auto probe45 = detail::random_tensor<T>({4, 5}, rng, 1.0);
    std::vector<int> ids{2, 0, 2};
    struct Case {
      const char* name;
      std::function<Tensor<T>()> f;
      NamedTensors<T> p;
    };
    std::vector<Case> cases = {
        {"add", [&] { return sum(mul(add(a, b), probe5)); }, {{"a", a}, {"b", b}}},
        {"sub", [&] { return sum(mul(sub(a, b), probe5)); }, {{"a", a}, {"b", b}}},
        {"mul", [&] { return sum(mul(mul(a, b), probe5)); }, {{"a", a}, {"b", b}}},
        {"scale", [&] { return sum(mul(scale(a, 0.3), probe5)); }, {{"a", a}}},
        {"matmul", [&] { return sum(mul(matmul(a, m), probe)); }, {{"a", a}, {"m", m}}},
        {"matmul_nt", [&] { return sum(mul(matmul_nt(a, w), probe)); }, {{"a", a}, {"w", w}}},
        {"linear", [&] { return sum(mul(linear(a, w, &bias), probe)); }, {{"a", a}, {"w", w}, {"bias", bias}}},
        {"transpose", [&] { return sum(mul(transpose(m), probe45)); }, {{"m", m}}},
        {"reshape", [&] { return sum(mul(reshape(m, {4, 5}), transpose(m))); }, {{"m", m}}},
        {"concat", [&] { return sum(mul(concat<T>({a, b}, 1), concat<T>({probe5, probe5}, 1))); },
         {{"a", a}, {"b", b}}},
        {"slice", [&] { return sum(mul(slice(a, 1, 1, 4), probe)); }, {{"a", a}}},
        {"softmax", [&] { return sum(mul(softmax(a, 1), probe5)); }, {{"a", a}}},
        {"log_softmax", [&] { return sum(mul(log_softmax(a, 1), probe5)); }, {{"a", a}}},
        {"causal_softmax", [&] { return sum(mul(causal_softmax(sq), probe_sq)); }, {{"sq", sq}}},
        {"layer_norm", [&] { return sum(mul(layer_norm(a, g, lb, 1e-5), probe5)); },
         {{"a", a}, {"g", g}, {"lb", lb}}},
        {"gelu", [&] { return sum(mul(gelu(a), probe5)); }, {{"a", a}}},
        {"embedding_lookup",
         [&] { return sum(mul(embedding_lookup(a, std::span<const int>(ids)), probe5)); }, {{"a", a}}},
        {"pick", [&] { return sum(pick(a, {0, 2, 2}, {4, 1, 3})); }, {{"a", a}}},
        {"mean", [&] { return mean(mul(a, a)); }, {{"a", a}}},
    };
    for (auto& c : cases) track(check_gradients<T>(c.f, c.p), std::string(c.name) + ":");
  }

  {
    MultimodalModel<T> model(ModelConfig{}, detail::toy_vocab());
    detail::perturb_lora(model.params(), rng);
    std::vector<bool> saved;
    for (auto& e : model.params().entries()) {
      saved.push_back(e.tensor.requires_grad());
      e.tensor.set_requires_grad(true);
    }
    const auto volume = detail::random_volume<T>(model.config().vision, rng);
    const auto prompt = model.mrg_prompt("abdomen");
    const auto target = model.target("There is a 15 mm lesion in the liver.");
    auto loss = [&] {
      auto input = assemble_input(prompt, model.encode(volume), target, model.params(), model.config().lm);
      auto [t, m] = shifted_targets(input);
      return masked_ce_loss(lm_forward(input, model.params(), model.config().lm), t, m);
    };
    track(check_gradients<T>(loss, model.params().named(), 1e-5, samples_per_tensor, seed),
          "stack:");
    std::size_t i = 0;
    for (auto& e : model.params().entries()) e.tensor.set_requires_grad(saved[i++]);
  }

  CheckResult r{"gradient_suite", worst < tolerance, {}, detail::elapsed(t0)};
  char buf[256];
  std::snprintf(buf, sizeof buf, "max relative error %.3g (%s), tolerance %.0e", worst,
                worst_name.c_str(), tolerance);
  r.detail = buf;
  return r;
}

/// Base-only parameter view: the same tensors minus every LoRA factor.
template <std::floating_point T>
ParamStore<T> without_lora(const ParamStore<T>& store) {
  ParamStore<T> base;
  for (const auto& e : store.entries()) {
    if (e.group != ParamGroup::lora) {
      auto& t = base.add(e.name, e.group, e.tensor);
      t.set_requires_grad(e.tensor.requires_grad());
    }
  }
  return base;
}

/// Fresh adapters (B = 0) must leave every logit unchanged: bitwise in
/// 64-bit, within 1e-6 relative in 32-bit.
inline CheckResult lora_identity_check(std::size_t trials = 5, std::uint64_t seed = 13) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(seed);
  bool ok = true;
  double worst32 = 0.0;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    ModelConfig cfg;
    cfg.seed = seed + trial;
    {
      MultimodalModel<double> m(cfg, detail::toy_vocab());
      auto base = without_lora(m.params());
      auto vol = detail::random_volume<double>(m.config().vision, rng);
      auto prompt = detail::random_prompt<double>(m.vocab(), 6, rng);
      auto target = detail::random_target<double>(m.vocab(), 5, rng);
      auto img = m.encode(vol);
      auto adapted = m.logits(prompt, img, target);
      auto plain = lm_forward(assemble_input(prompt, img, target, base, m.config().lm), base, m.config().lm);
      ok = ok && bitwise_equal(adapted, plain);
    }
    {
      MultimodalModel<float> m(cfg, detail::toy_vocab());
      auto base = without_lora(m.params());
      auto vol = detail::random_volume<float>(m.config().vision, rng);
      auto prompt = detail::random_prompt<float>(m.vocab(), 6, rng);
      auto target = detail::random_target<float>(m.vocab(), 5, rng);
      auto img = m.encode(vol);
      auto adapted = m.logits(prompt, img, target);
      auto plain = lm_forward(assemble_input(prompt, img, target, base, m.config().lm), base, m.config().lm);
      for (std::size_t i = 0; i < adapted.size(); ++i) {
        const double a = adapted.data()[i], b = plain.data()[i];
        worst32 = std::max(worst32, std::abs(a - b) / std::max(1.0, std::abs(b)));
      }
    }
  }
  ok = ok && worst32 <= 1e-6;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu trials; 64-bit bitwise %s; 32-bit max rel diff %.3g", trials,
                ok ? "equal" : "check", worst32);
  return {"lora_identity", ok, buf, detail::elapsed(t0)};
}

/// Σ log P(target) must equal −(unreduced masked CE) on random inputs.
inline CheckResult duality_check(std::size_t cases = 100, double tolerance = 1e-6,
                                 std::uint64_t seed = 17) {
  using T = double;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  const std::size_t per_model = 10;
  for (std::size_t done = 0; done < cases;) {
    ModelConfig cfg;
    cfg.seed = seed + done;
    MultimodalModel<T> m(cfg, detail::toy_vocab());
    detail::perturb_lora(m.params(), rng);
    for (std::size_t k = 0; k < per_model && done < cases; ++k, ++done) {
      auto vol = detail::random_volume<T>(m.config().vision, rng);
      auto prompt = detail::random_prompt<T>(m.vocab(), std::uniform_int_distribution<std::size_t>(0, 12)(rng), rng);
      auto target = detail::random_target<T>(m.vocab(), std::uniform_int_distribution<std::size_t>(1, 10)(rng), rng);
      auto img = m.encode(vol);
      const double lp = m.log_prob(prompt, img, target).item();
      auto input = assemble_input(prompt, img, target, m.params(), m.config().lm);
      auto [t, mask] = shifted_targets(input);
      const double ce = masked_ce_sum(lm_forward(input, m.params(), m.config().lm), t, mask).item();
      worst = std::max(worst, std::abs(lp + ce));
    }
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu cases, max |logP + CE_sum| = %.3g", cases, worst);
  return {"duality", worst <= tolerance, buf, detail::elapsed(t0)};
}

inline std::vector<CheckResult> run_all() {
  return {gradient_suite(), lora_identity_check(), duality_check()};
}

}  // namespace vitlm::selftest
