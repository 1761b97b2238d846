// Copyright 2026 The hidden-transfer Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "htd/numerics/kernels.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace htd::kernels {
namespace {

constexpr std::size_t kLanes = 16;

template <typename T>
T reduce_lanes(std::array<T, kLanes>& acc) {
  for (std::size_t width = kLanes / 2; width > 0; width /= 2) {
    for (std::size_t l = 0; l < width; ++l) acc[l] = acc[l] + acc[l + width];
  }
  return acc[0];
}

template <typename T>
void gemm_scalar(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t lda,
                 const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  constexpr std::size_t kBlock = 64;
  std::array<T, kBlock> acc{};
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * lda;
    for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
      const std::size_t w = std::min(kBlock, n - j0);
      std::fill(acc.begin(), acc.begin() + w, T(0));
      for (std::size_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* brow = b + p * ldb + j0;
        for (std::size_t j = 0; j < w; ++j) acc[j] = std::fma(av, brow[j], acc[j]);
      }
      std::copy(acc.begin(), acc.begin() + w, c + i * ldc + j0);
    }
  }
}

#if defined(__AVX512F__)

// R rows x (4 vectors) register tile; columns past n are masked.
template <int R>
void tile_f32(std::size_t k, std::size_t n, const float* a, std::size_t lda, const float* b,
              std::size_t ldb, float* c, std::size_t ldc) {
  constexpr int V = 4;
  for (std::size_t j0 = 0; j0 < n; j0 += 16 * V) {
    __mmask16 mask[V];
    for (int v = 0; v < V; ++v) {
      const std::ptrdiff_t rem = static_cast<std::ptrdiff_t>(n) - static_cast<std::ptrdiff_t>(j0) - 16 * v;
      mask[v] = rem >= 16 ? __mmask16(0xFFFF) : rem <= 0 ? __mmask16(0) : __mmask16((1u << rem) - 1u);
    }
    __m512 acc[R][V];
    for (int r = 0; r < R; ++r)
      for (int v = 0; v < V; ++v) acc[r][v] = _mm512_setzero_ps();
    for (std::size_t p = 0; p < k; ++p) {
      const float* brow = b + p * ldb + j0;
      __m512 bv[V];
      for (int v = 0; v < V; ++v) bv[v] = _mm512_maskz_loadu_ps(mask[v], brow + 16 * v);
      for (int r = 0; r < R; ++r) {
        const __m512 av = _mm512_set1_ps(a[r * lda + p]);
        for (int v = 0; v < V; ++v) acc[r][v] = _mm512_fmadd_ps(av, bv[v], acc[r][v]);
      }
    }
    for (int r = 0; r < R; ++r)
      for (int v = 0; v < V; ++v) _mm512_mask_storeu_ps(c + r * ldc + j0 + 16 * v, mask[v], acc[r][v]);
  }
}

template <int R>
void tile_f64(std::size_t k, std::size_t n, const double* a, std::size_t lda, const double* b,
              std::size_t ldb, double* c, std::size_t ldc) {
  constexpr int V = 4;
  for (std::size_t j0 = 0; j0 < n; j0 += 8 * V) {
    __mmask8 mask[V];
    for (int v = 0; v < V; ++v) {
      const std::ptrdiff_t rem = static_cast<std::ptrdiff_t>(n) - static_cast<std::ptrdiff_t>(j0) - 8 * v;
      mask[v] = rem >= 8 ? __mmask8(0xFF) : rem <= 0 ? __mmask8(0) : __mmask8((1u << rem) - 1u);
    }
    __m512d acc[R][V];
    for (int r = 0; r < R; ++r)
      for (int v = 0; v < V; ++v) acc[r][v] = _mm512_setzero_pd();
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * ldb + j0;
      __m512d bv[V];
      for (int v = 0; v < V; ++v) bv[v] = _mm512_maskz_loadu_pd(mask[v], brow + 8 * v);
      for (int r = 0; r < R; ++r) {
        const __m512d av = _mm512_set1_pd(a[r * lda + p]);
        for (int v = 0; v < V; ++v) acc[r][v] = _mm512_fmadd_pd(av, bv[v], acc[r][v]);
      }
    }
    for (int r = 0; r < R; ++r)
      for (int v = 0; v < V; ++v) _mm512_mask_storeu_pd(c + r * ldc + j0 + 8 * v, mask[v], acc[r][v]);
  }
}

template <typename T, typename Tile>
void gemm_tiled(std::size_t m, const T* a, std::size_t lda, T* c, std::size_t ldc, Tile&& tile) {
  constexpr std::size_t kRows = 6;
  std::size_t i = 0;
  for (; i + kRows <= m; i += kRows) tile(std::integral_constant<int, 6>{}, a + i * lda, c + i * ldc);
  switch (m - i) {
    case 5: tile(std::integral_constant<int, 5>{}, a + i * lda, c + i * ldc); break;
    case 4: tile(std::integral_constant<int, 4>{}, a + i * lda, c + i * ldc); break;
    case 3: tile(std::integral_constant<int, 3>{}, a + i * lda, c + i * ldc); break;
    case 2: tile(std::integral_constant<int, 2>{}, a + i * lda, c + i * ldc); break;
    case 1: tile(std::integral_constant<int, 1>{}, a + i * lda, c + i * ldc); break;
    default: break;
  }
}

#endif

}  // namespace

template <>
void gemm<float>(std::size_t m, std::size_t k, std::size_t n, const float* a, std::size_t lda,
                 const float* b, std::size_t ldb, float* c, std::size_t ldc) {
#if defined(__AVX512F__)
  gemm_tiled(m, a, lda, c, ldc, [&](auto rows, const float* ap, float* cp) {
    tile_f32<decltype(rows)::value>(k, n, ap, lda, b, ldb, cp, ldc);
  });
#else
  gemm_scalar(m, k, n, a, lda, b, ldb, c, ldc);
#endif
}

template <>
void gemm<double>(std::size_t m, std::size_t k, std::size_t n, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc) {
#if defined(__AVX512F__)
  gemm_tiled(m, a, lda, c, ldc, [&](auto rows, const double* ap, double* cp) {
    tile_f64<decltype(rows)::value>(k, n, ap, lda, b, ldb, cp, ldc);
  });
#else
  gemm_scalar(m, k, n, a, lda, b, ldb, c, ldc);
#endif
}

template <typename T>
void transpose(std::size_t m, std::size_t n, const T* in, T* out) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < m; i0 += kBlock) {
    for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
      const std::size_t i1 = std::min(m, i0 + kBlock);
      const std::size_t j1 = std::min(n, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) out[j * m + i] = in[i * n + j];
    }
  }
}

template <typename T>
T dot(const T* x, const T* y, std::size_t n) {
  std::array<T, kLanes> acc{};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] = std::fma(x[i + l], y[i + l], acc[l]);
  }
  for (std::size_t l = 0; i + l < n; ++l) acc[l] = std::fma(x[i + l], y[i + l], acc[l]);
  return reduce_lanes(acc);
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

namespace {

// Range reduction to r in [-ln2/2, ln2/2], degree-5 polynomial for e^r - 1 - r,
// scale by 2^n. Inputs below kExpLo flush to zero. The vector path performs
// the same correctly rounded operations lane by lane.
constexpr float kExpLo = -87.33654f;
constexpr float kExpHi = 88.37626f;
constexpr float kLog2e = 1.44269504088896341f;
constexpr float kLn2Hi = 0.693359375f;
constexpr float kLn2Lo = -2.12194440e-4f;
constexpr float kP0 = 1.9875691500e-4f;
constexpr float kP1 = 1.3981999507e-3f;
constexpr float kP2 = 8.3334519073e-3f;
constexpr float kP3 = 4.1665795894e-2f;
constexpr float kP4 = 1.6666665459e-1f;
constexpr float kP5 = 5.0000001201e-1f;

float exp_scalar(float x) {
  if (x < kExpLo) return 0.0f;
  x = std::min(x, kExpHi);
  const float n = std::nearbyint(x * kLog2e);
  float r = std::fma(n, -kLn2Hi, x);
  r = std::fma(n, -kLn2Lo, r);
  float p = std::fma(kP0, r, kP1);
  p = std::fma(p, r, kP2);
  p = std::fma(p, r, kP3);
  p = std::fma(p, r, kP4);
  p = std::fma(p, r, kP5);
  float y = std::fma(p, r * r, r);
  y = y + 1.0f;
  return std::ldexp(y, static_cast<int>(n));
}

}  // namespace

template <>
void exp_inplace<float>(float* x, std::size_t n) {
  std::size_t i = 0;
#if defined(__AVX512F__)
  const __m512 lo = _mm512_set1_ps(kExpLo), hi = _mm512_set1_ps(kExpHi), log2e = _mm512_set1_ps(kLog2e);
  const __m512 c1 = _mm512_set1_ps(-kLn2Hi), c2 = _mm512_set1_ps(-kLn2Lo), one = _mm512_set1_ps(1.0f);
  for (; i < n; i += kLanes) {
    const __mmask16 m = i + kLanes <= n ? __mmask16(0xFFFF) : __mmask16((1u << (n - i)) - 1);
    __m512 v = _mm512_maskz_loadu_ps(m, x + i);
    const __mmask16 under = _mm512_cmp_ps_mask(v, lo, _CMP_LT_OQ);
    v = _mm512_min_ps(v, hi);
    const __m512 nn = _mm512_roundscale_ps(_mm512_mul_ps(v, log2e), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m512 r = _mm512_fmadd_ps(nn, c1, v);
    r = _mm512_fmadd_ps(nn, c2, r);
    __m512 p = _mm512_fmadd_ps(_mm512_set1_ps(kP0), r, _mm512_set1_ps(kP1));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(kP2));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(kP3));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(kP4));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(kP5));
    __m512 y = _mm512_fmadd_ps(p, _mm512_mul_ps(r, r), r);
    y = _mm512_add_ps(y, one);
    y = _mm512_scalef_ps(y, nn);
    y = _mm512_mask_mov_ps(y, under, _mm512_setzero_ps());
    _mm512_mask_storeu_ps(x + i, m, y);
  }
#endif
  for (; i < n; ++i) x[i] = exp_scalar(x[i]);
}

template <>
void exp_inplace<double>(double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = std::exp(x[i]);
}

float exp_reference(float x) { return exp_scalar(x); }

namespace {

// Shared tail of masked_softmax: `row` holds exp values with zeros at masked
// entries; `kept` lists the permitted values in column order.
template <typename T>
void normalize(T* row, std::size_t n, const T* kept, std::size_t count) {
  std::array<T, kLanes> acc{};
  for (std::size_t i = 0; i < count; ++i) acc[i % kLanes] += kept[i];
  const T total = reduce_lanes(acc);
  for (std::size_t j = 0; j < n; ++j) row[j] /= total;
}

template <typename T>
void masked_softmax_scalar(T* row, const std::uint8_t* allowed, std::size_t n, T scale) {
  T mx = std::numeric_limits<T>::lowest();
  for (std::size_t j = 0; j < n; ++j) {
    row[j] *= scale;
    if (allowed[j]) mx = std::max(mx, row[j]);
  }
  std::vector<T> kept;
  kept.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (allowed[j]) {
      T e = row[j] - mx;
      exp_inplace(&e, 1);
      row[j] = e;
      kept.push_back(e);
    } else {
      row[j] = T(0);
    }
  }
  normalize(row, n, kept.data(), kept.size());
}

}  // namespace

template <>
void masked_softmax<double>(double* row, const std::uint8_t* allowed, std::size_t n, double scale) {
  masked_softmax_scalar(row, allowed, n, scale);
}

template <>
void masked_softmax<float>(float* row, const std::uint8_t* allowed, std::size_t n, float scale) {
#if defined(__AVX512F__) && defined(__AVX512BW__) && defined(__AVX512VL__)
  thread_local std::vector<float> kept;
  kept.resize(n + kLanes);
  const __m512 sc = _mm512_set1_ps(scale);
  __m512 mxv = _mm512_set1_ps(std::numeric_limits<float>::lowest());
  auto tail_mask = [n](std::size_t i) {
    return i + kLanes <= n ? __mmask16(0xFFFF) : __mmask16((1u << (n - i)) - 1);
  };
  auto allowed_mask = [&](std::size_t i, __mmask16 m) {
    const __m128i b = _mm_maskz_loadu_epi8(m, allowed + i);
    return _mm_test_epi8_mask(b, b);
  };
  for (std::size_t i = 0; i < n; i += kLanes) {
    const __mmask16 m = tail_mask(i);
    const __m512 v = _mm512_mul_ps(_mm512_maskz_loadu_ps(m, row + i), sc);
    _mm512_mask_storeu_ps(row + i, m, v);
    mxv = _mm512_mask_max_ps(mxv, allowed_mask(i, m), mxv, v);
  }
  const float mx = _mm512_reduce_max_ps(mxv);
  const __m512 mxb = _mm512_set1_ps(mx);
  const __m512 neg_inf = _mm512_set1_ps(-std::numeric_limits<float>::infinity());
  for (std::size_t i = 0; i < n; i += kLanes) {
    const __mmask16 m = tail_mask(i);
    const __m512 v = _mm512_sub_ps(_mm512_maskz_loadu_ps(m, row + i), mxb);
    _mm512_mask_storeu_ps(row + i, m, _mm512_mask_mov_ps(neg_inf, allowed_mask(i, m), v));
  }
  exp_inplace(row, n);
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; i += kLanes) {
    const __mmask16 m = tail_mask(i);
    const __mmask16 a = allowed_mask(i, m);
    _mm512_mask_compressstoreu_ps(kept.data() + count, a, _mm512_maskz_loadu_ps(m, row + i));
    count += static_cast<std::size_t>(__builtin_popcount(a));
  }
  __m512 acc = _mm512_setzero_ps();
  for (std::size_t i = 0; i < count; i += kLanes) {
    const __mmask16 m = i + kLanes <= count ? __mmask16(0xFFFF) : __mmask16((1u << (count - i)) - 1);
    acc = _mm512_add_ps(acc, _mm512_maskz_loadu_ps(m, kept.data() + i));
  }
  std::array<float, kLanes> lanes;
  _mm512_storeu_ps(lanes.data(), acc);
  const __m512 total = _mm512_set1_ps(reduce_lanes(lanes));
  for (std::size_t i = 0; i < n; i += kLanes) {
    const __mmask16 m = tail_mask(i);
    _mm512_mask_storeu_ps(row + i, m, _mm512_div_ps(_mm512_maskz_loadu_ps(m, row + i), total));
  }
#else
  masked_softmax_scalar(row, allowed, n, scale);
#endif
}

void masked_softmax_reference(float* row, const std::uint8_t* allowed, std::size_t n, float scale) {
  masked_softmax_scalar(row, allowed, n, scale);
}

template void transpose<float>(std::size_t, std::size_t, const float*, float*);
template void transpose<double>(std::size_t, std::size_t, const double*, double*);
template float dot<float>(const float*, const float*, std::size_t);
template double dot<double>(const double*, const double*, std::size_t);
template void axpy<float>(float, const float*, float*, std::size_t);
template void axpy<double>(double, const double*, double*, std::size_t);

}  // namespace htd::kernels
