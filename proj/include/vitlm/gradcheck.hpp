#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "vitlm/checkpoint.hpp"
#include "vitlm/tensor.hpp"

namespace vitlm {

struct GradCheckEntry {
  std::string name;
  std::size_t coordinates = 0;
  double relative_error = 0.0;  // ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-6)
};

struct GradCheckResult {
  std::vector<GradCheckEntry> entries;

  double max_relative_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.relative_error);
    return m;
  }
};

/// Compares tape gradients of `loss_fn` against central finite differences.
/// `loss_fn` must rebuild its graph from the current parameter values on
/// every call. When `samples_per_tensor` is nonzero only that many randomly
/// chosen coordinates of each tensor are perturbed.
template <std::floating_point T>
GradCheckResult check_gradients(const std::function<Tensor<T>()>& loss_fn,
                                NamedTensors<T> params, double step = 1e-5,
                                std::size_t samples_per_tensor = 0, std::uint64_t seed = 7) {
  for (auto& [name, p] : params) p.clear_grad();
  {
    Tape<T> tape;
    tape.backward(loss_fn());
  }
  std::mt19937_64 rng(seed);
  GradCheckResult result;
  for (auto& [name, p] : params) {
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (samples_per_tensor != 0 && samples_per_tensor < coords.size()) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(samples_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    auto values = p.mutable_data();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t c : coords) {
      const T saved = values[c];
      values[c] = saved + static_cast<T>(step);
      const double up = static_cast<double>(loss_fn().item());
      values[c] = saved - static_cast<T>(step);
      const double down = static_cast<double>(loss_fn().item());
      values[c] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = p.has_grad() ? static_cast<double>(p.grad()[c]) : 0.0;
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
    // The floor keeps round-off in vanishing gradients from reading as error.
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-6});
    GradCheckEntry e{name, coords.size(), std::sqrt(diff2) / denom};
    result.entries.push_back(std::move(e));
  }
  for (auto& [name, p] : params) p.clear_grad();
  return result;
}

}  // namespace vitlm
