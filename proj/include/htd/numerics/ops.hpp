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

// Differentiable operations over row-major 2-D tensors.
//
// All ops are row-wise (or, for matmul and attention, computed per output
// row with a fixed reduction order), so a row's result never depends on
// which other rows share the batch.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "htd/numerics/attn_mask.hpp"
#include "htd/numerics/tensor.hpp"

namespace htd {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// x[r, :] + bias for every row r.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> silu(const Tensor<T>& a);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

/// Per-row RMS normalization with a learned gain.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& weight, T eps);

/// Rotary position encoding applied per head from explicit position ids.
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::span<const std::int32_t> positions, std::size_t n_heads,
               double theta);

/// Constant keys/values that precede the current rows (a KV cache prefix).
template <typename T>
struct KeyValuePrefix {
  std::span<const T> keys;
  std::span<const T> values;
  std::size_t entries = 0;
};

/// Multi-head attention of q over [prefix | k] under an explicit mask.
/// Only permitted keys are visited, in ascending column order.
template <typename T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const KeyValuePrefix<T>& prefix, const AttnMask& mask,
                           std::size_t n_heads);

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids);

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts);

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);

/// Row softmax along the last axis, max-subtracted.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

/// Sum over rows of -log softmax(logits[r])[targets[r]].
template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const std::int32_t> targets);

enum class KlDirection {
  kTeacherFirst,  // sum t * (log t - log q): mass-covering, the distillation default
  kPseudoFirst,   // sum q * (log q - log t)
};

/// Sum over rows of KL between constant target distributions and
/// softmax(logits), in the requested direction. 0 * log 0 is taken as 0.
template <typename T>
Tensor<T> kl_to_target_sum(const Tensor<T>& logits, const Tensor<T>& target_probs,
                           KlDirection direction = KlDirection::kTeacherFirst);

// ---------------------------------------------------------------------------
// Plain (non-recording) helpers on single vectors.

template <typename T>
std::vector<T> softmax(std::span<const T> x);

/// Σ target·(log target − log approx); approx floored at 1e-12 before the log.
/// Throws UsageError unless both inputs are probability vectors (±1e-5).
template <typename T>
T kl_divergence(std::span<const T> target, std::span<const T> approx);

/// Index of the maximum; ties go to the lowest index.
template <typename T>
std::int32_t argmax_token(std::span<const T> logits);

/// The k best indices by value descending, ties by lowest index.
template <typename T>
std::vector<std::int32_t> top_k(std::span<const T> scores, std::size_t k);

}  // namespace htd
