#pragma once

// Row-wise dense kernels shared by the full forward pass and incremental
// decoding. Every output row is computed by the same instruction sequence
// regardless of how many rows are processed together, so batched decoding
// and teacher-forced evaluation agree bit-for-bit.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <type_traits>
#include <vector>

namespace xcot::kernels {

namespace detail {

inline constexpr std::size_t kRowTile = 4;
inline constexpr std::size_t kColTile = 32;

// Accumulates a rows x cols tile of y (already holding its initial value)
// in ascending k order. R and C are compile-time for full tiles so the
// accumulators stay in registers; every element sees the same sequence of
// multiply-adds whatever the tile shape.
template <typename S, std::size_t R, std::size_t C>
inline void tile_fixed(S* __restrict y, const S* __restrict x, const S* __restrict w,
                       std::size_t k, std::size_t n, std::size_t ldx) {
  S acc[R][C];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < C; ++j) acc[r][j] = y[r * n + j];
  }
  for (std::size_t kk = 0; kk < k; ++kk) {
    const S* __restrict wk = w + kk * n;
    for (std::size_t r = 0; r < R; ++r) {
      const S xv = x[r * ldx + kk];
      for (std::size_t j = 0; j < C; ++j) acc[r][j] += xv * wk[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < C; ++j) y[r * n + j] = acc[r][j];
  }
}

template <typename S>
inline void tile_generic(S* __restrict y, const S* __restrict x, const S* __restrict w,
                         std::size_t rows, std::size_t cols, std::size_t k, std::size_t n,
                         std::size_t ldx) {
  for (std::size_t r = 0; r < rows; ++r) {
    S* __restrict yr = y + r * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const S xv = x[r * ldx + kk];
      const S* __restrict wk = w + kk * n;
      for (std::size_t j = 0; j < cols; ++j) yr[j] += xv * wk[j];
    }
  }
}

template <typename S, std::size_t R>
inline void row_block(S* __restrict y, const S* __restrict x, const S* __restrict w, std::size_t k,
                      std::size_t n) {
  std::size_t j = 0;
  for (; j + kColTile <= n; j += kColTile) tile_fixed<S, R, kColTile>(y + j, x, w + j, k, n, k);
  if (j < n) tile_generic(y + j, x, w + j, R, n - j, k, n, k);
}

template <typename S>
void accumulate_rows(S* __restrict y, const S* __restrict x, const S* __restrict w,
                     std::size_t rows, std::size_t k, std::size_t n) {
  std::size_t t = 0;
  for (; t + kRowTile <= rows; t += kRowTile) row_block<S, kRowTile>(y + t * n, x + t * k, w, k, n);
  for (; t < rows; ++t) row_block<S, 1>(y + t * n, x + t * k, w, k, n);
}

}  // namespace detail

/// y[t, :] = b + x[t, :] * W   (W is k x n row-major; b may be null)
template <typename S>
void matmul(S* __restrict y, const S* __restrict x, const S* __restrict w, const S* __restrict b,
            std::size_t rows, std::size_t k, std::size_t n) {
  for (std::size_t t = 0; t < rows; ++t) {
    S* __restrict yt = y + t * n;
    if (b) {
      for (std::size_t j = 0; j < n; ++j) yt[j] = b[j];
    } else {
      for (std::size_t j = 0; j < n; ++j) yt[j] = S(0);
    }
  }
  detail::accumulate_rows(y, x, w, rows, k, n);
}

/// y[t, :] += x[t, :] * W
template <typename S>
void matmul_accumulate(S* __restrict y, const S* __restrict x, const S* __restrict w,
                       std::size_t rows, std::size_t k, std::size_t n) {
  detail::accumulate_rows(y, x, w, rows, k, n);
}

template <typename S>
void transpose(S* __restrict out, const S* __restrict in, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
  }
}

/// dW += x^T dy, db += column sums of dy (db may be null).
template <typename S>
void matmul_weight_grad(S* __restrict dw, S* __restrict db, const S* __restrict x,
                        const S* __restrict dy, std::size_t rows, std::size_t k, std::size_t n) {
  thread_local std::vector<S> xt;
  xt.resize(rows * k);
  transpose(xt.data(), x, rows, k);
  detail::accumulate_rows(dw, xt.data(), dy, k, rows, n);
  if (db) {
    for (std::size_t t = 0; t < rows; ++t) {
      const S* __restrict dyt = dy + t * n;
      for (std::size_t c = 0; c < n; ++c) db[c] += dyt[c];
    }
  }
}

/// exp for float with a branch-free body the compiler can vectorize; other
/// scalar types use std::exp.
template <typename S>
inline S exp_fast(S x) {
  if constexpr (std::is_same_v<S, float>) {
    x = x < -87.0f ? -87.0f : x;
    x = x > 88.0f ? 88.0f : x;
    // Round to nearest through the 1.5 * 2^23 shifter (no libm call).
    const float shifted = x * 1.44269504088896341f + 12582912.0f;
    const float n = shifted - 12582912.0f;
    float r = x - n * 0.693359375f;
    r = r + n * 2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    const std::int32_t e = (std::bit_cast<std::int32_t>(shifted) - 0x4B400000 + 127) << 23;
    return p * std::bit_cast<float>(e);
  } else {
    return std::exp(x);
  }
}

template <typename S>
inline S tanh_fast(S u) {
  if constexpr (std::is_same_v<S, float>) {
    return 1.0f - 2.0f / (exp_fast(2.0f * u) + 1.0f);
  } else {
    return std::tanh(u);
  }
}

/// Sum with a fixed 16-lane association, independent of pointer alignment.
template <typename S>
inline S sum_fixed(const S* __restrict a, std::size_t n) {
  constexpr std::size_t kLanes = 16;
  S lanes[kLanes] = {};
  std::size_t j = 0;
  for (; j + kLanes <= n; j += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) lanes[l] += a[j + l];
  }
  for (std::size_t l = 0; j + l < n; ++l) lanes[l] += a[j + l];
  S total = 0;
  for (std::size_t l = 0; l < kLanes; ++l) total += lanes[l];
  return total;
}

/// Maximum of a non-empty array (exact, so association does not matter).
template <typename S>
inline S max_fixed(const S* __restrict a, std::size_t n) {
  constexpr std::size_t kLanes = 16;
  S lanes[kLanes];
  for (std::size_t l = 0; l < kLanes; ++l) lanes[l] = a[0];
  std::size_t j = 0;
  for (; j + kLanes <= n; j += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) lanes[l] = a[j + l] > lanes[l] ? a[j + l] : lanes[l];
  }
  for (std::size_t l = 0; j + l < n; ++l) lanes[l] = a[j + l] > lanes[l] ? a[j + l] : lanes[l];
  S m = lanes[0];
  for (std::size_t l = 1; l < kLanes; ++l) m = lanes[l] > m ? lanes[l] : m;
  return m;
}

/// Dot product with the same fixed association as sum_fixed.
template <typename S>
inline S dot_fixed(const S* __restrict a, const S* __restrict b, std::size_t n) {
  constexpr std::size_t kLanes = 16;
  S lanes[kLanes] = {};
  std::size_t j = 0;
  for (; j + kLanes <= n; j += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) lanes[l] += a[j + l] * b[j + l];
  }
  for (std::size_t l = 0; j + l < n; ++l) lanes[l] += a[j + l] * b[j + l];
  S total = 0;
  for (std::size_t l = 0; l < kLanes; ++l) total += lanes[l];
  return total;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row layer norm; stores mean and reciprocal std for the backward pass.
template <typename S>
void layernorm(S* __restrict out, S* __restrict mean, S* __restrict rstd, const S* __restrict x,
               const S* __restrict gain, const S* __restrict bias, std::size_t rows,
               std::size_t d) {
  for (std::size_t t = 0; t < rows; ++t) {
    const S* xt = x + t * d;
    S m = 0;
    for (std::size_t i = 0; i < d; ++i) m += xt[i];
    m /= static_cast<S>(d);
    S v = 0;
    for (std::size_t i = 0; i < d; ++i) {
      S c = xt[i] - m;
      v += c * c;
    }
    v /= static_cast<S>(d);
    S r = S(1) / std::sqrt(v + static_cast<S>(kLayerNormEps));
    S* ot = out + t * d;
    for (std::size_t i = 0; i < d; ++i) ot[i] = (xt[i] - m) * r * gain[i] + bias[i];
    mean[t] = m;
    rstd[t] = r;
  }
}

/// dx += LN backward; dgain/dbias accumulate.
template <typename S>
void layernorm_backward(S* __restrict dx, S* __restrict dgain, S* __restrict dbias,
                        const S* __restrict dout, const S* __restrict x, const S* __restrict gain,
                        const S* __restrict mean, const S* __restrict rstd, std::size_t rows,
                        std::size_t d) {
  for (std::size_t t = 0; t < rows; ++t) {
    const S* dot = dout + t * d;
    const S* xt = x + t * d;
    const S m = mean[t];
    const S r = rstd[t];
    S mean_dn = 0;
    S mean_dn_xhat = 0;
    for (std::size_t i = 0; i < d; ++i) {
      S xhat = (xt[i] - m) * r;
      S dn = gain[i] * dot[i];
      mean_dn += dn;
      mean_dn_xhat += dn * xhat;
      dbias[i] += dot[i];
      dgain[i] += xhat * dot[i];
    }
    mean_dn /= static_cast<S>(d);
    mean_dn_xhat /= static_cast<S>(d);
    S* dxt = dx + t * d;
    for (std::size_t i = 0; i < d; ++i) {
      S xhat = (xt[i] - m) * r;
      S dn = gain[i] * dot[i];
      dxt[i] += (dn - mean_dn - xhat * mean_dn_xhat) * r;
    }
  }
}

// tanh-approximated GELU
template <typename S>
inline S gelu(S x) {
  constexpr S kC = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  S u = kC * (x + static_cast<S>(0.044715) * x * x * x);
  return static_cast<S>(0.5) * x * (S(1) + tanh_fast(u));
}

template <typename S>
inline S gelu_grad(S x) {
  constexpr S kC = static_cast<S>(0.7978845608028654);
  S x2 = x * x;
  S u = kC * (x + static_cast<S>(0.044715) * x2 * x);
  S th = tanh_fast(u);
  S sech2 = S(1) - th * th;
  return static_cast<S>(0.5) * (S(1) + th) +
         static_cast<S>(0.5) * x * sech2 * kC * (S(1) + static_cast<S>(3 * 0.044715) * x2);
}

/// Causal attention for one query row over `len` keys/values. Keys are
/// stored transposed: element i of key j lives at kt[i * kt_stride + j].
/// `probs` receives the softmax weights (len entries).
template <typename S>
void attend_row(S* __restrict out, S* __restrict probs, const S* __restrict q,
                const S* __restrict kt, std::size_t kt_stride, const S* __restrict v,
                std::size_t v_stride, std::size_t len, std::size_t head_dim, S scale) {
  for (std::size_t j = 0; j < len; ++j) probs[j] = 0;
  for (std::size_t i = 0; i < head_dim; ++i) {
    const S qi = q[i];
    const S* __restrict row = kt + i * kt_stride;
    for (std::size_t j = 0; j < len; ++j) probs[j] += qi * row[j];
  }
  for (std::size_t j = 0; j < len; ++j) probs[j] *= scale;
  const S max_score = max_fixed(probs, len);
  for (std::size_t j = 0; j < len; ++j) probs[j] = exp_fast(probs[j] - max_score);
  const S inv = S(1) / sum_fixed(probs, len);
  for (std::size_t j = 0; j < len; ++j) probs[j] *= inv;
  for (std::size_t i = 0; i < head_dim; ++i) out[i] = 0;
  for (std::size_t j = 0; j < len; ++j) {
    const S p = probs[j];
    const S* __restrict vj = v + j * v_stride;
    for (std::size_t i = 0; i < head_dim; ++i) out[i] += p * vj[i];
  }
}

}  // namespace xcot::kernels
