#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitlm/tensor.hpp"

namespace vitlm {

using Dims3 = std::array<std::size_t, 3>;

/// A parsed scan: voxels in physical units laid out [D×H×W], W fastest.
struct Volume {
  Tensor<float> voxels;
  std::array<float, 3> spacing_mm{1.0f, 1.0f, 1.0f};  // (d, h, w)
  std::string source_id;

  Dims3 dims() const { return {voxels.dim(0), voxels.dim(1), voxels.dim(2)}; }
};

inline void validate_volume(const Volume& v) {
  if (!v.voxels.defined() || v.voxels.rank() != 3) {
    throw DimensionError("volume voxels must be a rank-3 tensor");
  }
  for (float s : v.spacing_mm) {
    if (!(s > 0.0f) || !std::isfinite(s)) throw ContractError("volume spacing must be positive");
  }
  detail::check_finite(v.voxels, "volume");
}

enum class ResampleMode { nearest, trilinear };

struct IntensityWindow {
  float low_hu = -1000.0f;
  float high_hu = 1000.0f;
};

struct PreprocessConfig {
  Dims3 target_shape{8, 32, 32};
  IntensityWindow window{};
  ResampleMode mode = ResampleMode::trilinear;

  void validate() const {
    for (auto n : target_shape) {
      if (n == 0) throw ConfigError("preprocess target shape must be positive");
    }
    if (!(window.high_hu > window.low_hu)) throw ConfigError("intensity window needs low < high");
  }
};

inline void to_json(nlohmann::json& j, const PreprocessConfig& c) {
  j = {{"shape", c.target_shape},
       {"window", {c.window.low_hu, c.window.high_hu}},
       {"resample", c.mode == ResampleMode::nearest ? "nearest" : "trilinear"}};
}

inline void from_json(const nlohmann::json& j, PreprocessConfig& c) {
  c.target_shape = j.value("shape", c.target_shape);
  if (j.contains("window")) {
    const auto w = j.at("window").get<std::array<float, 2>>();
    c.window = {w[0], w[1]};
  }
  const auto mode = j.value("resample", std::string("trilinear"));
  if (mode != "nearest" && mode != "trilinear") throw ConfigError("resample must be nearest or trilinear");
  c.mode = mode == "nearest" ? ResampleMode::nearest : ResampleMode::trilinear;
  c.validate();
}

namespace detail {

// Align-corners grid: output sample i sits at source coordinate
// i·(S−1)/(T−1). A single output sample sits at the source centre.
inline double source_coordinate(std::size_t i, std::size_t src, std::size_t dst) {
  if (dst == 1) return (static_cast<double>(src) - 1.0) / 2.0;
  return static_cast<double>(i) * (static_cast<double>(src) - 1.0) /
         (static_cast<double>(dst) - 1.0);
}

}  // namespace detail

/// Resamples onto `target` using the align-corners convention; spacing is
/// rescaled so the physical extent between corner voxels is preserved.
inline Volume resample_volume(const Volume& volume, const Dims3& target, ResampleMode mode) {
  for (auto t : target) {
    if (t == 0) throw ConfigError("resample target dimensions must be >= 1");
  }
  const Dims3 src = volume.dims();
  const auto in = volume.voxels.data();
  std::vector<float> out(target[0] * target[1] * target[2]);

  std::array<std::vector<double>, 3> coords;
  for (int a = 0; a < 3; ++a) {
    coords[a].resize(target[a]);
    for (std::size_t i = 0; i < target[a]; ++i) {
      coords[a][i] = detail::source_coordinate(i, src[a], target[a]);
    }
  }
  auto at = [&](std::size_t d, std::size_t h, std::size_t w) {
    return static_cast<double>(in[(d * src[1] + h) * src[2] + w]);
  };

  for (std::size_t d = 0; d < target[0]; ++d) {
    for (std::size_t h = 0; h < target[1]; ++h) {
      for (std::size_t w = 0; w < target[2]; ++w) {
        const double cd = coords[0][d], ch = coords[1][h], cw = coords[2][w];
        double value;
        if (mode == ResampleMode::nearest) {
          auto near = [](double c, std::size_t n) {
            return std::min(static_cast<std::size_t>(std::floor(c + 0.5)), n - 1);
          };
          value = at(near(cd, src[0]), near(ch, src[1]), near(cw, src[2]));
        } else {
          auto lo = [](double c, std::size_t n) {
            return std::min(static_cast<std::size_t>(std::floor(c)), n - 1);
          };
          const std::size_t d0 = lo(cd, src[0]), h0 = lo(ch, src[1]), w0 = lo(cw, src[2]);
          const std::size_t d1 = std::min(d0 + 1, src[0] - 1);
          const std::size_t h1 = std::min(h0 + 1, src[1] - 1);
          const std::size_t w1 = std::min(w0 + 1, src[2] - 1);
          const double fd = cd - d0, fh = ch - h0, fw = cw - w0;
          auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
          const double c00 = lerp(at(d0, h0, w0), at(d0, h0, w1), fw);
          const double c01 = lerp(at(d0, h1, w0), at(d0, h1, w1), fw);
          const double c10 = lerp(at(d1, h0, w0), at(d1, h0, w1), fw);
          const double c11 = lerp(at(d1, h1, w0), at(d1, h1, w1), fw);
          value = lerp(lerp(c00, c01, fh), lerp(c10, c11, fh), fd);
        }
        out[(d * target[1] + h) * target[2] + w] = static_cast<float>(value);
      }
    }
  }

  Volume result;
  result.voxels = Tensor<float>({target[0], target[1], target[2]}, std::move(out));
  result.source_id = volume.source_id;
  for (int a = 0; a < 3; ++a) {
    const double s = static_cast<double>(src[a]), t = static_cast<double>(target[a]);
    const double ratio = (src[a] > 1 && target[a] > 1) ? (s - 1.0) / (t - 1.0) : s / t;
    result.spacing_mm[a] = static_cast<float>(volume.spacing_mm[a] * ratio);
  }
  return result;
}

/// Clamps to the window and maps it affinely onto [-1, 1]. Output is
/// [1×D×H×W], the layout the vision encoder consumes.
template <std::floating_point T>
Tensor<T> normalize_intensity(const Volume& volume, const IntensityWindow& window) {
  if (!(window.low_hu < window.high_hu)) {
    throw ConfigError("intensity window needs low < high");
  }
  const double lo = window.low_hu, hi = window.high_hu;
  std::vector<T> out(volume.voxels.size());
  auto in = volume.voxels.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = std::clamp(static_cast<double>(in[i]), lo, hi);
    out[i] = static_cast<T>(2.0 * (v - lo) / (hi - lo) - 1.0);
  }
  const auto d = volume.dims();
  return Tensor<T>({1, d[0], d[1], d[2]}, std::move(out));
}

/// Resample (when needed) then normalize.
template <std::floating_point T>
Tensor<T> preprocess_volume(const Volume& volume, const PreprocessConfig& config) {
  if (volume.dims() == config.target_shape) return normalize_intensity<T>(volume, config.window);
  return normalize_intensity<T>(resample_volume(volume, config.target_shape, config.mode),
                                config.window);
}

}  // namespace vitlm
