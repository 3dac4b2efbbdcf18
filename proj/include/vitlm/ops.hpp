#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vitlm/tensor.hpp"

namespace vitlm {

namespace detail {

// Builds the output tensor, checks it, and records the backward rule when any
// input is tracked and a tape is active. `rule` receives the output tensor and
// reads its grad.
template <std::floating_point T, typename Rule>
Tensor<T> emit(const char* op, Shape shape, std::vector<T> data,
               std::vector<Tensor<T>> inputs, Rule rule) {
  bool track = false;
  if (Tape<T>::active() != nullptr) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  Tensor<T> out(std::move(shape), std::move(data), track);
  check_finite(out, op);
  if (track) {
    Tape<T>::active()->record(std::move(inputs), out,
                              [rule = std::move(rule), out]() mutable { rule(out); });
  }
  return out;
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// C[m×n] (+)= A[m×k] · B[k×n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (aip == T(0)) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[m×n] (+)= A[m×k] · B[n×k]ᵀ
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  std::vector<T> bt(k * n);  // Bᵀ so the inner loop runs contiguously
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, k, n, a, bt.data(), c);
}

// C[m×n] (+)= A[k×m]ᵀ · B[k×n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = ap[i];
      if (api == T(0)) continue;
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void require_matrix(const Tensor<T>& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return detail::emit<T>("add", a.shape(), std::move(out), {a, b},
                         [a, b](const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           if (a.requires_grad()) {
                             auto ga = a.grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (b.requires_grad()) {
                             auto gb = b.grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                           }
                         });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  return detail::emit<T>("sub", a.shape(), std::move(out), {a, b},
                         [a, b](const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           if (a.requires_grad()) {
                             auto ga = a.grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (b.requires_grad()) {
                             auto gb = b.grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           }
                         });
}

/// Elementwise product.
template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return detail::emit<T>("mul", a.shape(), std::move(out), {a, b},
                         [a, b](const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           auto da = a.data(), db = b.data();
                           if (a.requires_grad()) {
                             auto ga = a.grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * db[i];
                           }
                           if (b.requires_grad()) {
                             auto gb = b.grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * da[i];
                           }
                         });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * s;
  return detail::emit<T>("scale", a.shape(), std::move(out), {a},
                         [a, s](const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           auto ga = a.grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                         });
}

/// x[..×n] + b[n], broadcasting the bias over leading axes.
template <std::floating_point T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  const std::size_t n = x.shape().back();
  if (b.rank() != 1 || b.dim(0) != n) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += db[i % n];
  return detail::emit<T>("add_bias", x.shape(), std::move(out), {x, b},
                         [x, b, n](const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           if (x.requires_grad()) {
                             auto gx = x.grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           }
                           if (b.requires_grad()) {
                             auto gb = b.grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
                           }
                         });
}

template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  return detail::emit<T>("matmul", {m, n}, std::move(out), {a, b},
                         [a, b, m, k, n](const Tensor<T>& o) mutable {
                           const T* g = o.grad().data();
                           if (a.requires_grad()) {  // dA = dC · Bᵀ
                             detail::gemm_nt(m, n, k, g, b.data().data(), a.grad_buffer().data());
                           }
                           if (b.requires_grad()) {  // dB = Aᵀ · dC
                             detail::gemm_tn(k, m, n, a.data().data(), g, b.grad_buffer().data());
                           }
                         });
}

/// a[m×k] · b[n×k]ᵀ, the layout of a linear layer with weight [out×in].
template <std::floating_point T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) +
                         " · " + shape_str(b.shape()) + "ᵀ");
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data());
  return detail::emit<T>("matmul_nt", {m, n}, std::move(out), {a, b},
                         [a, b, m, k, n](const Tensor<T>& o) mutable {
                           const T* g = o.grad().data();
                           if (a.requires_grad()) {  // dA = dC · B
                             detail::gemm_nn(m, n, k, g, b.data().data(), a.grad_buffer().data());
                           }
                           if (b.requires_grad()) {  // dB = dCᵀ · A
                             detail::gemm_tn(n, m, k, g, a.data().data(), b.grad_buffer().data());
                           }
                         });
}

template <std::floating_point T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  auto da = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = da[i * n + j];
  return detail::emit<T>("transpose", {n, m}, std::move(out), {a},
                         [a, m, n](const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           auto ga = a.grad_buffer();
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                         });
}

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::emit<T>("reshape", std::move(shape), std::move(out), {a},
                         [a](const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           auto ga = a.grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         });
}

template <std::floating_point T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape shape = parts.front().shape();
  if (axis >= shape.size()) throw DimensionError("concat: axis out of range for " + shape_str(shape));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != shape[i]) {
        throw DimensionError("concat: shapes " + shape_str(shape) + " and " + shape_str(s) +
                             " differ off the concat axis");
      }
    }
    total += s[axis];
  }
  shape[axis] = total;
  const auto split = detail::split_at(shape, axis);
  std::vector<T> out(numel(shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * split.inner;
    auto dp = p.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(dp.begin() + o * w, w, out.begin() + o * split.n * split.inner + offset);
    }
    offset += w;
  }
  return detail::emit<T>("concat", shape, std::move(out), parts,
                         [parts, axis, split](const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           std::size_t offset = 0;
                           for (auto& p : parts) {
                             const std::size_t w = p.dim(axis) * split.inner;
                             if (p.requires_grad()) {
                               auto gp = p.grad_buffer();
                               for (std::size_t r = 0; r < split.outer; ++r) {
                                 const T* src = g.data() + r * split.n * split.inner + offset;
                                 T* dst = gp.data() + r * w;
                                 for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
                               }
                             }
                             offset += w;
                           }
                         });
}

/// Contiguous range [start, start+len) along `axis`.
template <std::floating_point T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  const auto split = detail::split_at(a.shape(), axis);
  if (len == 0 || start + len > split.n) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of bounds for " +
                         shape_str(a.shape()));
  }
  Shape shape = a.shape();
  shape[axis] = len;
  const std::size_t w = len * split.inner;
  const std::size_t row = split.n * split.inner;
  const std::size_t off = start * split.inner;
  std::vector<T> out(split.outer * w);
  auto da = a.data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(da.begin() + o * row + off, w, out.begin() + o * w);
  }
  return detail::emit<T>("slice", std::move(shape), std::move(out), {a},
                         [a, split, w, row, off](const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           auto ga = a.grad_buffer();
                           for (std::size_t r = 0; r < split.outer; ++r)
                             for (std::size_t i = 0; i < w; ++i) ga[r * row + off + i] += g[r * w + i];
                         });
}

/// Softmax along `axis`, max-subtracted.
template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = detail::split_at(x.shape(), axis);
  std::vector<T> out(x.size());
  auto dx = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T mx = dx[base];
      for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, dx[base + j * s.inner]);
      T z = T(0);
      for (std::size_t j = 0; j < s.n; ++j) {
        T e = std::exp(dx[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= z;
    }
  }
  return detail::emit<T>("softmax", x.shape(), std::move(out), {x},
                         [x, s](const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           auto y = o.data();
                           auto gx = x.grad_buffer();
                           for (std::size_t r = 0; r < s.outer; ++r) {
                             for (std::size_t in = 0; in < s.inner; ++in) {
                               const std::size_t base = r * s.n * s.inner + in;
                               T dot = T(0);
                               for (std::size_t j = 0; j < s.n; ++j) {
                                 dot += g[base + j * s.inner] * y[base + j * s.inner];
                               }
                               for (std::size_t j = 0; j < s.n; ++j) {
                                 const std::size_t idx = base + j * s.inner;
                                 gx[idx] += y[idx] * (g[idx] - dot);
                               }
                             }
                           }
                         });
}

template <std::floating_point T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = detail::split_at(x.shape(), axis);
  std::vector<T> out(x.size());
  auto dx = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T mx = dx[base];
      for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, dx[base + j * s.inner]);
      T z = T(0);
      for (std::size_t j = 0; j < s.n; ++j) z += std::exp(dx[base + j * s.inner] - mx);
      const T lz = std::log(z) + mx;
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] = dx[base + j * s.inner] - lz;
    }
  }
  return detail::emit<T>("log_softmax", x.shape(), std::move(out), {x},
                         [x, s](const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           auto y = o.data();
                           auto gx = x.grad_buffer();
                           for (std::size_t r = 0; r < s.outer; ++r) {
                             for (std::size_t in = 0; in < s.inner; ++in) {
                               const std::size_t base = r * s.n * s.inner + in;
                               T gsum = T(0);
                               for (std::size_t j = 0; j < s.n; ++j) gsum += g[base + j * s.inner];
                               for (std::size_t j = 0; j < s.n; ++j) {
                                 const std::size_t idx = base + j * s.inner;
                                 gx[idx] += g[idx] - std::exp(y[idx]) * gsum;
                               }
                             }
                           }
                         });
}

/// Row-wise softmax of a square score matrix where row i only sees columns
/// j <= i; masked entries are exactly zero.
template <std::floating_point T>
Tensor<T> causal_softmax(const Tensor<T>& x) {
  detail::require_matrix(x, "causal_softmax");
  const std::size_t n = x.dim(0);
  if (x.dim(1) != n) throw DimensionError("causal_softmax: expected square scores, got " + shape_str(x.shape()));
  std::vector<T> out(n * n, T(0));
  auto dx = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = dx.data() + i * n;
    T mx = row[0];
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
    T z = T(0);
    for (std::size_t j = 0; j <= i; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j <= i; ++j) out[i * n + j] /= z;
  }
  return detail::emit<T>("causal_softmax", x.shape(), std::move(out), {x},
                         [x, n](const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           auto y = o.data();
                           auto gx = x.grad_buffer();
                           for (std::size_t i = 0; i < n; ++i) {
                             T dot = T(0);
                             for (std::size_t j = 0; j <= i; ++j) dot += g[i * n + j] * y[i * n + j];
                             for (std::size_t j = 0; j <= i; ++j) {
                               gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                             }
                           }
                         });
}

/// Normalizes over the last axis: (x - mean) / sqrt(var + eps) * gain + bias.
template <std::floating_point T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t n = x.shape().back();
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(n) + " entries");
  }
  const std::size_t rows = x.size() / n;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  auto dx = x.data(), dg = gain.data(), db = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = dx.data() + r * n;
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= T(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xr[j] - mean) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * dg[j] + db[j];
    }
  }
  return detail::emit<T>(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, n, rows, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](const Tensor<T>& o) mutable {
        auto g = o.grad();
        auto dg = gain.data();
        if (gain.requires_grad()) {
          auto gg = gain.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % n] += g[i] * xhat[i];
        }
        if (bias.requires_grad()) {
          auto gb = bias.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
        }
        if (x.requires_grad()) {
          auto gx = x.grad_buffer();
          std::vector<T> dy(n);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dy = T(0), mean_dy_xhat = T(0);
            for (std::size_t j = 0; j < n; ++j) {
              dy[j] = g[r * n + j] * dg[j];
              mean_dy += dy[j];
              mean_dy_xhat += dy[j] * xhat[r * n + j];
            }
            mean_dy /= T(n);
            mean_dy_xhat /= T(n);
            for (std::size_t j = 0; j < n; ++j) {
              gx[r * n + j] += inv_std[r] * (dy[j] - mean_dy - xhat[r * n + j] * mean_dy_xhat);
            }
          }
        }
      });
}

/// Exact (erf) GELU.
template <std::floating_point T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  std::vector<T> out(x.size());
  auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(0.5) * dx[i] * (T(1) + std::erf(dx[i] * inv_sqrt2));
  }
  return detail::emit<T>("gelu", x.shape(), std::move(out), {x},
                         [x, inv_sqrt2](const Tensor<T>& o) mutable {
                           const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
                           auto g = o.grad();
                           auto dx = x.data();
                           auto gx = x.grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             const T v = dx[i];
                             const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                             const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
                             gx[i] += g[i] * (cdf + v * pdf);
                           }
                         });
}

/// Gathers table rows; backward scatters into the same rows.
template <std::floating_point T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids) {
  detail::require_matrix(table, "embedding_lookup");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id list");
  std::vector<T> out(ids.size() * d);
  auto dt = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw OutOfVocabularyError("embedding_lookup: id " + std::to_string(ids[i]) +
                                 " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(dt.begin() + static_cast<std::size_t>(ids[i]) * d, d, out.begin() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return detail::emit<T>("embedding_lookup", {ids.size(), d}, std::move(out), {table},
                         [table, d, idv = std::move(idv)](const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           auto gt = table.grad_buffer();
                           for (std::size_t i = 0; i < idv.size(); ++i) {
                             T* row = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                             for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                           }
                         });
}

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return detail::emit<T>("sum", {1}, {acc}, {x}, [x](const Tensor<T>& o) mutable {
    const T g = o.grad()[0];
    for (auto& gx : x.grad_buffer()) gx += g;
  });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.size()));
}

/// out[i] = x[rows[i], cols[i]] for a matrix x.
template <std::floating_point T>
Tensor<T> pick(const Tensor<T>& x, std::vector<std::size_t> rows, std::vector<std::size_t> cols) {
  detail::require_matrix(x, "pick");
  if (rows.size() != cols.size() || rows.empty()) {
    throw DimensionError("pick: need matching, nonempty row/col index lists");
  }
  const std::size_t n = x.dim(1);
  std::vector<T> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0) || cols[i] >= n) throw DimensionError("pick: index out of range");
    out[i] = x.data()[rows[i] * n + cols[i]];
  }
  const std::size_t count = rows.size();
  return detail::emit<T>("pick", {count}, std::move(out), {x},
                         [x, n, rows = std::move(rows), cols = std::move(cols)](
                             const Tensor<T>& o) mutable {
                           auto g = o.grad();
                           auto gx = x.grad_buffer();
                           for (std::size_t i = 0; i < rows.size(); ++i) gx[rows[i] * n + cols[i]] += g[i];
                         });
}

/// x · Wᵀ (+ b) for weight [out×in].
template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias = nullptr) {
  auto y = matmul_nt(x, weight);
  return bias ? add_bias(y, *bias) : y;
}

}  // namespace vitlm
