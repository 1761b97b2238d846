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

// Baseline draft heads: Medusa-style heads on the last-layer state and
// early-exit heads on intermediate layers. Both are pure add-ons to a
// frozen model and are distilled with the same KL objective as transfer.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "htd/model/checkpoint.hpp"
#include "htd/model/distill.hpp"
#include "htd/model/transformer.hpp"
#include "htd/numerics/tensor.hpp"

namespace htd {

/// Step i (1-based) maps a normalized last-layer state x to logits of
/// (x + SiLU(x W1 + b1)) Wout.
template <typename T>
struct MedusaHeads {
  std::size_t k = 0;
  std::vector<Tensor<T>> w1;   // [d, d]
  std::vector<Tensor<T>> b1;   // [1, d]
  std::vector<Tensor<T>> out;  // [d, v]
  std::uint64_t base_hash = 0;

  /// Zero residual branch and a copy of the model's output projection, so
  /// every head starts out repeating the base next-token distribution.
  static MedusaHeads init(const Transformer<T>& model, std::size_t k, std::uint64_t base_hash);

  std::vector<Tensor<T>> parameters(std::size_t step) const;
  /// Logits for rows of final-normed states.
  Tensor<T> apply(const Tensor<T>& normed, std::size_t step) const;

  Checkpoint to_checkpoint() const;
  static MedusaHeads from_checkpoint(const Checkpoint& ck);
  static MedusaHeads load(const std::filesystem::path& path, std::uint64_t expected_base_hash);
};

/// One linear head (with bias) per (layer t, step i) over the frozen final
/// norm of the layer-t state.
template <typename T>
struct ExitHeads {
  std::size_t k = 0;
  std::vector<std::size_t> layers;
  std::vector<Tensor<T>> weight;  // [d, v], index layer_index * k + step - 1
  std::vector<Tensor<T>> bias;    // [1, v]
  std::uint64_t base_hash = 0;

  static ExitHeads init(const Transformer<T>& model, std::vector<std::size_t> layers, std::size_t k,
                        std::uint64_t base_hash);

  std::size_t index(std::size_t layer, std::size_t step) const;
  std::vector<Tensor<T>> parameters(std::size_t layer, std::size_t step) const;
  /// Logits for rows of raw layer-`layer` states.
  Tensor<T> apply(const Transformer<T>& model, const Tensor<T>& h, std::size_t layer, std::size_t step) const;

  Checkpoint to_checkpoint() const;
  static ExitHeads from_checkpoint(const Checkpoint& ck);
  static ExitHeads load(const std::filesystem::path& path, std::uint64_t expected_base_hash);
};

/// Mean over q < n - step of KL(teacher[q + step] || head(state q)).
template <typename T>
Tensor<T> medusa_step_loss(const Transformer<T>& model, const MedusaHeads<T>& heads, std::size_t step,
                           const TeacherPass<T>& teacher, KlDirection direction);

template <typename T>
Tensor<T> exit_step_loss(const Transformer<T>& model, const ExitHeads<T>& heads, std::size_t layer,
                         std::size_t step, const TeacherPass<T>& teacher, KlDirection direction);

template <typename T>
DistillReport train_medusa(const Transformer<T>& model, std::span<const std::int32_t> train_tokens,
                           std::span<const std::int32_t> heldout_tokens, MedusaHeads<T>& heads,
                           const DistillHyper& hyper, const TrainLogger& log = {});

template <typename T>
DistillReport train_early_exit(const Transformer<T>& model, std::span<const std::int32_t> train_tokens,
                               std::span<const std::int32_t> heldout_tokens, ExitHeads<T>& heads,
                               const DistillHyper& hyper, const TrainLogger& log = {});

/// k draft distributions from one last-layer (pre-norm) state row.
template <typename T>
std::vector<std::vector<T>> medusa_draft_distributions(const Transformer<T>& model, const MedusaHeads<T>& heads,
                                                       std::span<const T> last_hidden);

/// k draft distributions from one layer-`layer` state row.
template <typename T>
std::vector<std::vector<T>> exit_draft_distributions(const Transformer<T>& model, const ExitHeads<T>& heads,
                                                     std::size_t layer, std::span<const T> hidden);

}  // namespace htd
