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

// Self-distillation against a frozen model: the teacher pass and a shared
// training loop for add-on parameters (transfer projections, extra heads).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "htd/model/kv_cache.hpp"
#include "htd/model/transformer.hpp"
#include "htd/numerics/ops.hpp"
#include "htd/numerics/tensor.hpp"

namespace htd {

/// Frozen-model outputs over one window.
template <typename T>
struct TeacherPass {
  // Losses only read it (cache_rows = 0), but run_layers takes a mutable cache.
  mutable KVCache<T> cache;
  std::map<std::size_t, Tensor<T>> taps;
  Tensor<T> hidden;  // last-layer states
  Tensor<T> probs;   // next-token distributions per row
};

template <typename T>
TeacherPass<T> teacher_pass(const Transformer<T>& model, std::span<const std::int32_t> window,
                            const std::vector<std::size_t>& tap_layers);

/// Consecutive non-overlapping windows of `context` tokens.
std::vector<std::span<const std::int32_t>> token_windows(std::span<const std::int32_t> tokens,
                                                         std::size_t context);

struct DistillHyper {
  std::size_t epochs = 1;
  std::size_t context = 256;
  std::size_t batch = 8;
  double lr = 1e-3;
  std::size_t max_steps = 0;  // optimizer updates; 0 runs every window
  std::uint64_t seed = 0;
  KlDirection direction = KlDirection::kTeacherFirst;
  std::size_t eval_windows = 16;  // held-out windows for before/after KL
};

/// One independently optimized parameter group and its per-window loss.
template <typename T>
struct DistillTask {
  std::string name;
  std::vector<Tensor<T>> params;
  std::function<Tensor<T>(const TeacherPass<T>&)> loss;
};

struct DistillTaskReport {
  std::string name;
  double initial_heldout_kl = 0;
  double final_heldout_kl = 0;
  std::vector<double> batch_losses;
};

struct DistillReport {
  std::vector<DistillTaskReport> tasks;
  std::size_t updates = 0;
  std::size_t windows = 0;
};

using TrainLogger = std::function<void(std::size_t update, std::size_t total, const std::string& message)>;

/// Mean of `loss` over up to `max_windows` consecutive windows.
template <typename T>
double heldout_loss(const Transformer<T>& model, std::span<const std::int32_t> tokens, std::size_t context,
                    std::size_t max_windows, const std::vector<std::size_t>& tap_layers,
                    const std::function<Tensor<T>(const TeacherPass<T>&)>& loss);

/// One shuffled data pass per epoch; each window's teacher pass is shared
/// by every task, and each task has its own Adam state. Parameters are
/// frozen again on return.
template <typename T>
DistillReport distill_train(const Transformer<T>& model, std::span<const std::int32_t> train_tokens,
                            std::span<const std::int32_t> heldout_tokens, const DistillHyper& hyper,
                            std::vector<DistillTask<T>>& tasks, const std::vector<std::size_t>& tap_layers,
                            std::size_t min_context = 2, const TrainLogger& log = {});

}  // namespace htd
