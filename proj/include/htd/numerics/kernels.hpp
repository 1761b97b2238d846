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

#pragma once

// Dense kernels with a fixed reduction order.
//
// Every output element is computed by the same sequence of fused
// multiply-adds no matter how many rows are processed together, which
// makes each row of a batched computation bit-identical to computing that
// row alone. Vectorized and scalar paths agree because fma is exactly
// rounded. Tree verification relies on this to reproduce autoregressive
// logits bit for bit.

#include <cstddef>
#include <cstdint>
#include <span>

namespace htd::kernels {

/// C[m x n] = A[m x k] * B[k x n]; row-major with leading dimensions.
/// Element (i, j) is fma-accumulated over p = 0..k-1 in increasing order.
template <typename T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t lda,
          const T* b, std::size_t ldb, T* c, std::size_t ldc);

/// out[n x m] = in[m x n]^T.
template <typename T>
void transpose(std::size_t m, std::size_t n, const T* in, T* out);

/// Dot product with a fixed 16-lane partial-sum layout and a fixed
/// pairwise lane reduction.
template <typename T>
T dot(const T* x, const T* y, std::size_t n);

/// y[i] = fma(alpha, x[i], y[i]).
template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n);

/// x[i] = exp(x[i]). The float version is a polynomial approximation
/// (within 2 ulp of the exact value) that flushes inputs below about -87.3
/// to zero and returns the same bits on the vector and scalar paths.
template <typename T>
void exp_inplace(T* x, std::size_t n);

/// The scalar path of exp_inplace<float>, for testing.
float exp_reference(float x);

/// In place: row = softmax(scale * row) over entries with allowed[j] != 0;
/// the others become exactly 0. The normalizer sums the permitted values
/// with lanes assigned by their rank among permitted entries, so the result
/// does not depend on how many masked entries are interleaved.
template <typename T>
void masked_softmax(T* row, const std::uint8_t* allowed, std::size_t n, T scale);

/// Scalar path of masked_softmax<float>, for testing.
void masked_softmax_reference(float* row, const std::uint8_t* allowed, std::size_t n, float scale);

}  // namespace htd::kernels
