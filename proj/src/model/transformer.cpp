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

#include "htd/model/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "htd/numerics/error.hpp"
#include "htd/numerics/ops.hpp"

namespace htd {
namespace {

template <typename T>
Tensor<T> normal_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(rows * cols);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::matrix(rows, cols, std::move(v));
}

template <typename T>
Tensor<T> ones_row(std::size_t d) {
  return Tensor<T>::matrix(1, d, std::vector<T>(d, T(1)));
}

}  // namespace

std::vector<std::int32_t> iota_positions(std::size_t n, std::int32_t start) {
  std::vector<std::int32_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = start + static_cast<std::int32_t>(i);
  return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ModelWeights<T>::named() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("tok_embeddings.weight", tok_embeddings);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const auto& w = layers[l];
    out.emplace_back(p + "attention_norm.weight", w.attention_norm);
    out.emplace_back(p + "attention.wq.weight", w.wq);
    out.emplace_back(p + "attention.wk.weight", w.wk);
    out.emplace_back(p + "attention.wv.weight", w.wv);
    out.emplace_back(p + "attention.wo.weight", w.wo);
    out.emplace_back(p + "ffn_norm.weight", w.ffn_norm);
    out.emplace_back(p + "feed_forward.w_gate.weight", w.w_gate);
    out.emplace_back(p + "feed_forward.w_up.weight", w.w_up);
    out.emplace_back(p + "feed_forward.w_down.weight", w.w_down);
  }
  out.emplace_back("norm.weight", norm);
  out.emplace_back("output.weight", output);
  return out;
}

template <typename T>
std::size_t ModelWeights<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

template <typename T>
void ModelWeights<T>::set_trainable(bool on) {
  for (auto& [name, t] : named()) {
    auto copy = t;
    copy.set_requires_grad(on);
  }
}

template <typename T>
Transformer<T>::Transformer(ModelConfig config, ModelWeights<T> weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  if (weights_.layers.size() != config_.n_layers) throw ShapeError("model: layer count does not match config");
}

template <typename T>
Transformer<T> Transformer<T>::init(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model, f = config.ffn_dim, v = config.vocab_size;
  const double std = 0.02;
  const double out_std = std / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  std::mt19937_64 rng(config.seed);
  ModelWeights<T> w;
  w.tok_embeddings = normal_matrix<T>(v, d, std, rng);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights<T> lw;
    lw.attention_norm = ones_row<T>(d);
    lw.wq = normal_matrix<T>(d, d, std, rng);
    lw.wk = normal_matrix<T>(d, d, std, rng);
    lw.wv = normal_matrix<T>(d, d, std, rng);
    lw.wo = normal_matrix<T>(d, d, out_std, rng);
    lw.ffn_norm = ones_row<T>(d);
    lw.w_gate = normal_matrix<T>(d, f, std, rng);
    lw.w_up = normal_matrix<T>(d, f, std, rng);
    lw.w_down = normal_matrix<T>(f, d, out_std, rng);
    w.layers.push_back(std::move(lw));
  }
  w.norm = ones_row<T>(d);
  w.output = normal_matrix<T>(d, v, std, rng);
  return Transformer(config, std::move(w));
}

template <typename T>
void Transformer<T>::check_positions(std::span<const std::int32_t> positions, std::size_t rows) const {
  if (positions.size() != rows) {
    throw ShapeError("model: " + std::to_string(positions.size()) + " position ids for " + std::to_string(rows) +
                     " rows");
  }
  for (auto p : positions) {
    if (p < 0 || static_cast<std::size_t>(p) >= config_.max_positions) {
      throw UsageError("model: position id " + std::to_string(p) + " outside [0, " +
                       std::to_string(config_.max_positions) + ")");
    }
  }
}

template <typename T>
Tensor<T> Transformer<T>::embed(std::span<const std::int32_t> tokens, std::span<const std::int32_t> positions) const {
  check_positions(positions, tokens.size());
  for (auto t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
      throw UsageError("model: token id " + std::to_string(t) + " outside vocabulary");
    }
  }
  if (tokens.empty()) return Tensor<T>({0, config_.d_model});
  return embedding(weights_.tok_embeddings, tokens);
}

template <typename T>
LayerRun<T> Transformer<T>::run_layers(const Tensor<T>& h, std::size_t from, std::size_t to,
                                       std::span<const std::int32_t> positions, const AttnMask& mask,
                                       KVCache<T>* cache, const LayerRunOptions& options) const {
  if (from > to || to > config_.n_layers) {
    throw UsageError("run_layers: invalid layer range [" + std::to_string(from) + ", " + std::to_string(to) + ")");
  }
  const std::size_t n = h.rows(), d = config_.d_model;
  if (h.rank() != 2 || h.cols() != d) throw ShapeError("run_layers: hidden width mismatch");
  check_positions(positions, n);
  if (mask.rows() != n) throw ShapeError("run_layers: mask rows do not match hidden rows");
  mask.validate();
  const std::size_t cache_rows = std::min(options.cache_rows, n);
  if (cache) {
    if (cache->n_layers() != config_.n_layers || cache->d_model() != d) {
      throw ShapeError("run_layers: cache does not match model");
    }
    for (std::size_t l = from; l < to; ++l) {
      if (cache->length(l) + cache_rows > cache->capacity()) {
        throw CapacityError("run_layers: cache overflow at layer " + std::to_string(l));
      }
    }
  }

  LayerRun<T> run;
  auto tap = [&](std::size_t t, const Tensor<T>& state) {
    if (std::find(options.taps.begin(), options.taps.end(), t) != options.taps.end()) run.taps[t] = state;
  };
  const T eps = static_cast<T>(config_.norm_eps);
  Tensor<T> x = h;
  tap(from, x);
  for (std::size_t l = from; l < to; ++l) {
    const auto& w = weights_.layers[l];
    const std::size_t c = cache ? cache->length(l) : 0;
    if (mask.cols() != c + n) {
      throw ShapeError("run_layers: mask has " + std::to_string(mask.cols()) + " key columns, layer " +
                       std::to_string(l) + " needs " + std::to_string(c + n));
    }
    Tensor<T> a = rms_norm(x, w.attention_norm, eps);
    Tensor<T> q = rope(matmul(a, w.wq), positions, config_.n_heads, config_.rope_theta);
    Tensor<T> k = rope(matmul(a, w.wk), positions, config_.n_heads, config_.rope_theta);
    Tensor<T> v = matmul(a, w.wv);
    KeyValuePrefix<T> prefix;
    if (cache) prefix = {cache->keys(l), cache->values(l), c};
    Tensor<T> attn = masked_attention(q, k, v, prefix, mask, config_.n_heads);
    if (cache && cache_rows > 0) {
      cache->append(l, k.values().first(cache_rows * d), v.values().first(cache_rows * d),
                    positions.first(cache_rows));
    }
    x = add(x, matmul(attn, w.wo));
    Tensor<T> b = rms_norm(x, w.ffn_norm, eps);
    Tensor<T> gated = mul(silu(matmul(b, w.w_gate)), matmul(b, w.w_up));
    x = add(x, matmul(gated, w.w_down));
    tap(l + 1, x);
  }
  run.hidden = x;
  return run;
}

template <typename T>
Tensor<T> Transformer<T>::final_norm(const Tensor<T>& h) const {
  return rms_norm(h, weights_.norm, static_cast<T>(config_.norm_eps));
}

template <typename T>
Tensor<T> Transformer<T>::lm_head(const Tensor<T>& normed) const {
  if (normed.cols() != config_.d_model) throw ShapeError("lm_head: width mismatch");
  return matmul(normed, weights_.output);
}

template <typename T>
ForwardResult<T> Transformer<T>::forward(std::span<const std::int32_t> tokens, std::span<const std::int32_t> positions,
                                         const AttnMask& mask, KVCache<T>* cache,
                                         const LayerRunOptions& options) const {
  Tensor<T> h = embed(tokens, positions);
  auto run = run_layers(h, 0, config_.n_layers, positions, mask, cache, options);
  ForwardResult<T> out;
  out.logits = logits(run.hidden);
  out.hidden = std::move(run.hidden);
  out.taps = std::move(run.taps);
  return out;
}

template <typename T>
ForwardResult<T> Transformer<T>::forward_causal(std::span<const std::int32_t> tokens) const {
  auto pos = iota_positions(tokens.size());
  return forward(tokens, pos, AttnMask::causal(tokens.size()));
}

template <typename T>
Checkpoint Transformer<T>::to_checkpoint() const {
  Checkpoint ck;
  ck.add_text("model.config", config_.to_text());
  for (const auto& [name, t] : weights_.named()) ck.add_tensor(name, t);
  return ck;
}

template <typename T>
Transformer<T> Transformer<T>::from_checkpoint(const Checkpoint& ck) {
  const ModelConfig c = ModelConfig::from_text(ck.text("model.config"));
  const std::size_t d = c.d_model, f = c.ffn_dim, v = c.vocab_size;
  ModelWeights<T> w;
  w.tok_embeddings = ck.tensor<T>("tok_embeddings.weight", {v, d});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerWeights<T> lw;
    lw.attention_norm = ck.tensor<T>(p + "attention_norm.weight", {1, d});
    lw.wq = ck.tensor<T>(p + "attention.wq.weight", {d, d});
    lw.wk = ck.tensor<T>(p + "attention.wk.weight", {d, d});
    lw.wv = ck.tensor<T>(p + "attention.wv.weight", {d, d});
    lw.wo = ck.tensor<T>(p + "attention.wo.weight", {d, d});
    lw.ffn_norm = ck.tensor<T>(p + "ffn_norm.weight", {1, d});
    lw.w_gate = ck.tensor<T>(p + "feed_forward.w_gate.weight", {d, f});
    lw.w_up = ck.tensor<T>(p + "feed_forward.w_up.weight", {d, f});
    lw.w_down = ck.tensor<T>(p + "feed_forward.w_down.weight", {f, d});
    w.layers.push_back(std::move(lw));
  }
  w.norm = ck.tensor<T>("norm.weight", {1, d});
  w.output = ck.tensor<T>("output.weight", {d, v});
  return Transformer(c, std::move(w));
}

template struct ModelWeights<float>;
template struct ModelWeights<double>;
template class Transformer<float>;
template class Transformer<double>;

}  // namespace htd
