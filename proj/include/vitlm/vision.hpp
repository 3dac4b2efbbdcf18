#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitlm/transformer.hpp"
#include "vitlm/volume.hpp"

namespace vitlm {

struct VisionConfig {
  Dims3 input_shape{8, 32, 32};
  Dims3 patch{4, 8, 8};
  std::size_t d_vis = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t mlp_mult = 4;
  Dims3 pool_stride{2, 2, 2};
  std::size_t d_lm = 128;

  Dims3 patch_grid() const {
    return {input_shape[0] / patch[0], input_shape[1] / patch[1], input_shape[2] / patch[2]};
  }
  Dims3 pooled_grid() const {
    auto g = patch_grid();
    return {g[0] / pool_stride[0], g[1] / pool_stride[1], g[2] / pool_stride[2]};
  }
  std::size_t patch_volume() const { return patch[0] * patch[1] * patch[2]; }
  std::size_t num_patches() const {
    auto g = patch_grid();
    return g[0] * g[1] * g[2];
  }
  std::size_t num_image_tokens() const {
    auto g = pooled_grid();
    return g[0] * g[1] * g[2];
  }

  void validate() const {
    static const char* axes[] = {"depth", "height", "width"};
    for (int a = 0; a < 3; ++a) {
      if (patch[a] == 0 || input_shape[a] % patch[a] != 0) {
        throw ConfigError(std::string("input ") + axes[a] + " " + std::to_string(input_shape[a]) +
                          " is not divisible by patch size " + std::to_string(patch[a]));
      }
      const std::size_t g = input_shape[a] / patch[a];
      if (pool_stride[a] == 0 || g % pool_stride[a] != 0) {
        throw ConfigError(std::string("token grid ") + axes[a] + " " + std::to_string(g) +
                          " is not divisible by pool stride " + std::to_string(pool_stride[a]));
      }
    }
    if (d_vis == 0 || n_heads == 0 || d_vis % n_heads != 0) {
      throw ConfigError("d_vis must be a positive multiple of n_heads");
    }
  }
};

inline void to_json(nlohmann::json& j, const VisionConfig& c) {
  j = {{"input_shape", c.input_shape}, {"patch", c.patch},     {"d_vis", c.d_vis},
       {"n_layers", c.n_layers},       {"n_heads", c.n_heads}, {"mlp_mult", c.mlp_mult},
       {"pool_stride", c.pool_stride}, {"d_lm", c.d_lm}};
}

inline void from_json(const nlohmann::json& j, VisionConfig& c) {
  VisionConfig d;
  c.input_shape = j.value("input_shape", d.input_shape);
  c.patch = j.value("patch", d.patch);
  c.d_vis = j.value("d_vis", d.d_vis);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.mlp_mult = j.value("mlp_mult", d.mlp_mult);
  c.pool_stride = j.value("pool_stride", d.pool_stride);
  c.d_lm = j.value("d_lm", d.d_lm);
}

/// Token rows plus the spatial layout they came from; rows are ordered
/// row-major over (d, h, w) of `grid`.
template <std::floating_point T>
struct VisionFeatures {
  Tensor<T> tokens;  // [N × width]
  Dims3 grid{};

  std::size_t count() const { return grid[0] * grid[1] * grid[2]; }
};

/// Image context handed to the language model, [N_img × d_lm].
template <std::floating_point T>
struct ImageContext {
  Tensor<T> tokens;
};

/// Cuts a [1×D×H×W] volume into non-overlapping patches, each flattened in
/// (d, h, w) order. No projection happens here.
template <std::floating_point T>
VisionFeatures<T> patchify(const Tensor<T>& volume, const Dims3& patch) {
  if (volume.rank() != 4 || volume.dim(0) != 1) {
    throw DimensionError("patchify expects a [1xDxHxW] volume, got " + shape_str(volume.shape()));
  }
  const Dims3 size{volume.dim(1), volume.dim(2), volume.dim(3)};
  static const char* axes[] = {"depth", "height", "width"};
  for (int a = 0; a < 3; ++a) {
    if (patch[a] == 0 || size[a] % patch[a] != 0) {
      throw ConfigError(std::string("volume ") + axes[a] + " " + std::to_string(size[a]) +
                        " is not divisible by patch size " + std::to_string(patch[a]));
    }
  }
  const Dims3 grid{size[0] / patch[0], size[1] / patch[1], size[2] / patch[2]};
  const std::size_t n = grid[0] * grid[1] * grid[2];
  const std::size_t p = patch[0] * patch[1] * patch[2];
  std::vector<T> out(n * p);
  auto in = volume.data();
  std::size_t row = 0;
  for (std::size_t gd = 0; gd < grid[0]; ++gd)
    for (std::size_t gh = 0; gh < grid[1]; ++gh)
      for (std::size_t gw = 0; gw < grid[2]; ++gw, ++row) {
        T* dst = out.data() + row * p;
        for (std::size_t d = 0; d < patch[0]; ++d)
          for (std::size_t h = 0; h < patch[1]; ++h) {
            const std::size_t z = gd * patch[0] + d, y = gh * patch[1] + h;
            const T* src = in.data() + (z * size[1] + y) * size[2] + gw * patch[2];
            std::copy_n(src, patch[2], dst);
            dst += patch[2];
          }
      }
  return {Tensor<T>({n, p}, std::move(out)), grid};
}

/// Linear patch embedding plus learned absolute positions.
template <std::floating_point T>
VisionFeatures<T> embed_patches(const VisionFeatures<T>& patches, const ParamStore<T>& store) {
  auto x = apply_linear(patches.tokens, store, "vision.patch_embed", nullptr);
  const auto& pos = store.get("vision.pos_embed");
  if (pos.dim(0) != x.dim(0)) {
    throw DimensionError("positional table has " + std::to_string(pos.dim(0)) + " rows for " +
                         std::to_string(x.dim(0)) + " patches");
  }
  return {add(x, pos), patches.grid};
}

/// Bidirectional pre-norm encoder blocks followed by a final layer norm.
template <std::floating_point T>
VisionFeatures<T> vit3d_forward(const VisionFeatures<T>& features, const VisionConfig& config,
                                const ParamStore<T>& store) {
  BlockSpec spec{config.d_vis, config.n_heads, false, nullptr};
  Tensor<T> x = features.tokens;
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    x = transformer_block(x, store, "vision.blocks." + std::to_string(i), spec);
  }
  return {apply_layer_norm(x, store, "vision.ln_final", spec.ln_eps), features.grid};
}

/// Constant [N_out × N_in] averaging matrix for one s_d×s_h×s_w window per
/// output token.
template <std::floating_point T>
Tensor<T> pooling_matrix(const Dims3& grid, const Dims3& stride) {
  static const char* axes[] = {"depth", "height", "width"};
  for (int a = 0; a < 3; ++a) {
    if (stride[a] == 0 || grid[a] % stride[a] != 0) {
      throw ConfigError(std::string("token grid ") + axes[a] + " " + std::to_string(grid[a]) +
                        " is not divisible by pool stride " + std::to_string(stride[a]));
    }
  }
  const Dims3 out{grid[0] / stride[0], grid[1] / stride[1], grid[2] / stride[2]};
  const std::size_t n_in = grid[0] * grid[1] * grid[2];
  const std::size_t n_out = out[0] * out[1] * out[2];
  const T w = T(1) / static_cast<T>(stride[0] * stride[1] * stride[2]);
  std::vector<T> m(n_out * n_in, T(0));
  for (std::size_t d = 0; d < grid[0]; ++d)
    for (std::size_t h = 0; h < grid[1]; ++h)
      for (std::size_t x = 0; x < grid[2]; ++x) {
        const std::size_t src = (d * grid[1] + h) * grid[2] + x;
        const std::size_t dst =
            ((d / stride[0]) * out[1] + h / stride[1]) * out[2] + x / stride[2];
        m[dst * n_in + src] = w;
      }
  return Tensor<T>({n_out, n_in}, std::move(m));
}

/// Mean-pools tokens over each stride window of the token grid.
template <std::floating_point T>
VisionFeatures<T> spatial_pool(const VisionFeatures<T>& features, const Dims3& stride) {
  if (features.tokens.dim(0) != features.count()) {
    throw DimensionError("token count does not match grid bookkeeping");
  }
  auto p = pooling_matrix<T>(features.grid, stride);
  const Dims3 out{features.grid[0] / stride[0], features.grid[1] / stride[1],
                  features.grid[2] / stride[2]};
  if (out == features.grid) return features;
  return {matmul(p, features.tokens), out};
}

/// Tokenwise two-layer MLP (d_vis → d_lm → d_lm, GELU between).
template <std::floating_point T>
ImageContext<T> project_to_lm(const VisionFeatures<T>& features, const ParamStore<T>& store) {
  const auto& w1 = store.get("projector.fc1.weight");
  if (features.tokens.dim(1) != w1.dim(1)) {
    throw DimensionError("projector expects width " + std::to_string(w1.dim(1)) + ", got " +
                         std::to_string(features.tokens.dim(1)));
  }
  auto h = gelu(apply_linear(features.tokens, store, "projector.fc1", nullptr));
  return {apply_linear(h, store, "projector.fc2", nullptr)};
}

/// Full image path: patchify → embed → encoder → pool → project.
template <std::floating_point T>
ImageContext<T> encode_image(const Tensor<T>& volume, const VisionConfig& config,
                             const ParamStore<T>& store) {
  auto features = vit3d_forward(embed_patches(patchify(volume, config.patch), store), config, store);
  return project_to_lm(spatial_pool(features, config.pool_stride), store);
}

template <std::floating_point T>
void init_vision_params(ParamStore<T>& store, Initializer& init, const VisionConfig& config) {
  config.validate();
  add_linear(store, init, "vision.patch_embed", ParamGroup::vision, config.patch_volume(),
             config.d_vis);
  store.add("vision.pos_embed", ParamGroup::vision,
            init.normal<T>({config.num_patches(), config.d_vis}, 0.1));
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    add_transformer_block(store, init, "vision.blocks." + std::to_string(i), ParamGroup::vision,
                          config.d_vis, config.mlp_mult);
  }
  add_layer_norm(store, "vision.ln_final", ParamGroup::vision, config.d_vis);
}

template <std::floating_point T>
void init_projector_params(ParamStore<T>& store, Initializer& init, const VisionConfig& config) {
  add_linear(store, init, "projector.fc1", ParamGroup::projector, config.d_vis, config.d_lm);
  add_linear(store, init, "projector.fc2", ParamGroup::projector, config.d_lm, config.d_lm);
}

}  // namespace vitlm
