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
#include <functional>
#include <span>
#include <vector>

#include "htd/model/transformer.hpp"

namespace htd {

struct PretrainHyper {
  std::size_t epochs = 2;
  std::size_t context = 256;
  std::size_t batch = 32;
  double lr = 1e-3;
  std::size_t warmup_steps = 20;
  double min_lr_ratio = 0.1;  // cosine decay floor, as a fraction of lr
  double grad_clip = 1.0;     // global norm; 0 disables
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;  // 0: run all epochs
  std::size_t min_corpus_bytes = 1'000'000;
};

struct PretrainReport {
  double initial_loss = 0;  // mean token loss of the first batch, before any update
  double final_loss = 0;    // mean over the last (up to) 10 batches
  std::size_t steps = 0;
  std::size_t tokens_seen = 0;
  std::vector<double> batch_losses;
};

using StepLogger = std::function<void(std::size_t step, std::size_t total, double loss)>;

/// Next-token cross-entropy training of every weight in `model`, in place.
/// Windows of context+1 tokens are visited in a seeded shuffled order per
/// epoch; a batch accumulates per-window gradients before one Adam step.
PretrainReport pretrain_base(Transformer<float>& model, std::span<const std::int32_t> train_tokens,
                             const PretrainHyper& hyper, const StepLogger& log = {});

/// Mean per-token cross entropy over consecutive windows (no training).
double evaluate_loss(const Transformer<float>& model, std::span<const std::int32_t> tokens, std::size_t context,
                     std::size_t max_windows);

}  // namespace htd
