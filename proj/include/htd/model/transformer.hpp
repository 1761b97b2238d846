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

#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "htd/model/checkpoint.hpp"
#include "htd/model/config.hpp"
#include "htd/model/kv_cache.hpp"
#include "htd/numerics/attn_mask.hpp"
#include "htd/numerics/tensor.hpp"

namespace htd {

template <typename T>
struct LayerWeights {
  Tensor<T> attention_norm;  // [1, d]
  Tensor<T> wq, wk, wv, wo;  // [d, d]
  Tensor<T> ffn_norm;        // [1, d]
  Tensor<T> w_gate, w_up;    // [d, f]
  Tensor<T> w_down;          // [f, d]
};

/// Weights are stored [in, out] and applied as x * W.
template <typename T>
struct ModelWeights {
  Tensor<T> tok_embeddings;  // [v, d]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> norm;    // [1, d]
  Tensor<T> output;  // [d, v]

  /// Stable (name, tensor) listing in checkpoint order.
  std::vector<std::pair<std::string, Tensor<T>>> named() const;
  std::size_t parameter_count() const;
  void set_trainable(bool on);
};

struct LayerRunOptions {
  /// Only the first `cache_rows` rows are appended to the cache; the rest
  /// (pseudo rows) are transient. Default: all rows.
  std::size_t cache_rows = std::numeric_limits<std::size_t>::max();
  /// Layer indices t whose state (after t blocks) should be returned.
  std::vector<std::size_t> taps;
};

template <typename T>
struct LayerRun {
  Tensor<T> hidden;
  std::map<std::size_t, Tensor<T>> taps;
};

template <typename T>
struct ForwardResult {
  Tensor<T> hidden;  // last-layer states, before the final norm
  Tensor<T> logits;
  std::map<std::size_t, Tensor<T>> taps;
};

/// Decoder-only transformer: pre-norm RMSNorm blocks, rotary attention over
/// explicit position ids, SwiGLU feed-forward, untied output head.
///
/// Layer index t names the residual stream after t blocks, so t = 0 is the
/// embedding output and t = n_layers feeds the final norm.
template <typename T>
class Transformer {
 public:
  Transformer(ModelConfig config, ModelWeights<T> weights);

  static Transformer init(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ModelWeights<T>& weights() const { return weights_; }
  ModelWeights<T>& mutable_weights() { return weights_; }

  KVCache<T> make_cache() const { return KVCache<T>(config_.n_layers, config_.d_model, config_.max_positions); }

  Tensor<T> embed(std::span<const std::int32_t> tokens, std::span<const std::int32_t> positions) const;

  /// Applies blocks [from, to). The mask spans cache.length(layer) + n key
  /// columns for each layer visited (n without a cache).
  LayerRun<T> run_layers(const Tensor<T>& h, std::size_t from, std::size_t to,
                         std::span<const std::int32_t> positions, const AttnMask& mask,
                         KVCache<T>* cache = nullptr, const LayerRunOptions& options = {}) const;

  Tensor<T> final_norm(const Tensor<T>& h) const;
  /// Vocabulary projection of already-normalized states (no bias).
  Tensor<T> lm_head(const Tensor<T>& normed) const;
  Tensor<T> logits(const Tensor<T>& h_last) const { return lm_head(final_norm(h_last)); }

  ForwardResult<T> forward(std::span<const std::int32_t> tokens, std::span<const std::int32_t> positions,
                           const AttnMask& mask, KVCache<T>* cache = nullptr,
                           const LayerRunOptions& options = {}) const;

  /// Plain causal forward over tokens at positions 0..n-1, no cache.
  ForwardResult<T> forward_causal(std::span<const std::int32_t> tokens) const;

  Checkpoint to_checkpoint() const;
  static Transformer from_checkpoint(const Checkpoint& ck);

 private:
  void check_positions(std::span<const std::int32_t> positions, std::size_t rows) const;

  ModelConfig config_;
  ModelWeights<T> weights_;
};

/// Positions 0..n-1.
std::vector<std::int32_t> iota_positions(std::size_t n, std::int32_t start = 0);

template <typename T>
Transformer<T> load_model(const std::filesystem::path& path) {
  return Transformer<T>::from_checkpoint(Checkpoint::load(path));
}

}  // namespace htd
