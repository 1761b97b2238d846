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

// Learned projections that turn intermediate hidden states into pseudo
// states for future positions, plus the forward pass that injects them.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "htd/model/checkpoint.hpp"
#include "htd/model/distill.hpp"
#include "htd/model/kv_cache.hpp"
#include "htd/model/transformer.hpp"
#include "htd/numerics/attn_mask.hpp"
#include "htd/numerics/ops.hpp"
#include "htd/numerics/tensor.hpp"

namespace htd {

/// Whether a step-i pseudo row may attend to the lower-step pseudo rows of
/// its own source at inference time.
enum class MaskMode { kNoMasked, kMasked };

/// Training-time visibility of a pseudo row for source s at step i:
/// kStandard sees real rows up to s+i-1, kMasked only up to s.
enum class TrainMask { kStandard, kMasked };

MaskMode parse_mask_mode(std::string_view text);
std::string to_string(MaskMode mode);
TrainMask parse_train_mask(std::string_view text);
std::string to_string(TrainMask mask);
KlDirection parse_kl_direction(std::string_view text);
std::string to_string(KlDirection direction);

struct TransferConfig {
  std::size_t k = 3;
  std::vector<std::size_t> layers{4, 5, 6};  // t_1 < ... < t_k
  MaskMode mask_mode = MaskMode::kNoMasked;
  bool bias = false;

  /// Steps are 1-based.
  std::size_t layer(std::size_t step) const { return layers.at(step - 1); }
  void validate(const ModelConfig& model) const;
};

/// Per-step d x d projections (applied as h * W) tied to one base model.
template <typename T>
struct TransferBundle {
  TransferConfig config;
  std::vector<Tensor<T>> weights;  // [d, d] per step
  std::vector<Tensor<T>> biases;   // [1, d] per step, empty unless config.bias
  std::uint64_t base_hash = 0;

  /// Identity plus N(0, noise^2) per entry; biases start at zero.
  static TransferBundle init(const TransferConfig& config, std::size_t d_model, std::uint64_t base_hash,
                             std::uint64_t seed, double noise = 0.01);

  /// Trainable leaves of one step.
  std::vector<Tensor<T>> parameters(std::size_t step) const;
  void set_trainable(bool on);

  Checkpoint to_checkpoint() const;
  static TransferBundle from_checkpoint(const Checkpoint& ck);
  /// Throws ArtifactError when the stored base hash differs from `expected_base_hash`.
  static TransferBundle load(const std::filesystem::path& path, std::uint64_t expected_base_hash);
  void check_base(std::uint64_t model_hash) const;
};

/// Content hash of a model's configuration and weights.
template <typename T>
std::uint64_t model_fingerprint(const Transformer<T>& model);

/// Row-wise h * W_step (+ bias) for layer-t_step states.
template <typename T>
Tensor<T> synthesize_pseudo(const Tensor<T>& h_rows, std::size_t step, const TransferBundle<T>& bundle);

/// Mask over n real rows followed by n pseudo rows (pseudo row n+s comes
/// from source s): real rows are plain causal; a pseudo row sees real rows
/// 0..min(s+step-1, n-1) (or only 0..s under kMasked) and itself.
AttnMask build_training_mask(std::size_t n, std::size_t step, TrainMask train_mask = TrainMask::kStandard);

// ---------------------------------------------------------------------------
// Training

/// Mean over q of KL between the teacher distribution at row q+step and
/// the pseudo distribution synthesized from source q, for q < n - step.
/// Pseudo rows attend to the teacher's cached keys as context.
template <typename T>
Tensor<T> transfer_step_loss(const Transformer<T>& model, const TransferBundle<T>& bundle, std::size_t step,
                             const TeacherPass<T>& teacher, TrainMask train_mask, KlDirection direction);

struct TransferTrainHyper : DistillHyper {
  TrainMask train_mask = TrainMask::kStandard;
};

struct TransferStepReport {
  std::size_t step = 0;
  double identity_heldout_kl = 0;  // with W exactly the identity
  double initial_heldout_kl = 0;   // at the actual initialization
  double final_heldout_kl = 0;
  std::vector<double> batch_losses;
};

struct TransferTrainReport {
  std::vector<TransferStepReport> steps;
  std::size_t updates = 0;
  std::size_t windows = 0;
};

/// Distills every listed step (all steps when empty) over one shared data
/// pass. Each step has its own optimizer and reads only its own W.
template <typename T>
TransferTrainReport transfer_train(const Transformer<T>& model, std::span<const std::int32_t> train_tokens,
                                   std::span<const std::int32_t> heldout_tokens, TransferBundle<T>& bundle,
                                   const TransferTrainHyper& hyper, std::vector<std::size_t> steps = {},
                                   const TrainLogger& log = {});

/// Mean per-term held-out KL for one step over up to `max_windows` windows.
template <typename T>
double heldout_transfer_kl(const Transformer<T>& model, const TransferBundle<T>& bundle, std::size_t step,
                           std::span<const std::int32_t> tokens, std::size_t context, std::size_t max_windows,
                           TrainMask train_mask, KlDirection direction);

// ---------------------------------------------------------------------------
// Inference

struct TransferForwardOptions {
  /// Real rows appended to the cache; pseudo rows are never cached.
  std::size_t cache_rows = std::numeric_limits<std::size_t>::max();
  /// Layers at which real and pseudo states are captured.
  std::vector<std::size_t> trace_layers;
};

template <typename T>
struct TransferForwardResult {
  Tensor<T> hidden;                       // real rows, last layer
  Tensor<T> logits;                       // real rows
  std::vector<Tensor<T>> pseudo_logits;   // per step: one row per source
  std::map<std::size_t, Tensor<T>> real_taps;
  std::vector<std::map<std::size_t, Tensor<T>>> pseudo_taps;  // per step
};

/// Forward over n real rows under `real_mask` (cache prefix + n columns).
/// At each layer t_i a step-i pseudo row is synthesized for every source
/// row at position(source) + i. A pseudo row sees what its source sees,
/// itself, and (kNoMasked) the lower-step pseudo rows of the same source.
/// Real rows never see pseudo rows, so their outputs match a plain forward.
template <typename T>
TransferForwardResult<T> transfer_forward(const Transformer<T>& model, const TransferBundle<T>& bundle,
                                          std::span<const std::int32_t> tokens,
                                          std::span<const std::int32_t> positions, const AttnMask& real_mask,
                                          std::span<const std::size_t> sources,
                                          std::type_identity_t<KVCache<T>>* cache,
                                          const TransferForwardOptions& options = {});

/// Appends `tokens` causally after the cache and returns the k draft
/// distributions of the last one (step i predicts the token i+1 positions
/// after it).
template <typename T>
std::vector<std::vector<T>> draft_distributions(const Transformer<T>& model, const TransferBundle<T>& bundle,
                                                std::span<const std::int32_t> tokens, KVCache<T>& cache);

}  // namespace htd
