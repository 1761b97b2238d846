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

// Flat run configuration shared by every command.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "htd/model/config.hpp"
#include "htd/model/pretrain.hpp"

namespace htd {

struct RunConfig {
  ModelConfig model;

  // data
  std::string corpus = "corpus";
  double heldout_fraction = 0.05;

  PretrainHyper pretrain;

  // transfer bundle
  std::size_t k = 3;
  std::vector<std::size_t> transfer_layers{4, 5, 6};
  std::string mask_mode = "no_masked";    // inference only: no_masked | masked
  std::string train_mask = "standard";    // training: standard | masked
  bool transfer_bias = false;
  std::string kl_direction = "teacher_first";  // teacher_first | pseudo_first

  // add-on training (transfer, medusa, early exit)
  std::size_t train_epochs = 1;
  std::size_t train_context = 256;
  std::size_t train_batch = 8;
  double train_lr = 1e-3;
  std::size_t train_max_steps = 0;
  std::vector<std::size_t> exit_layers{4, 5, 6};

  // decoding
  std::string tree_spec;  // path; empty selects the built-in (3,2,2) tree
  std::string decode_mode = "transfer_tree";
  std::size_t max_new_tokens = 128;
  std::string prompt_file;
  std::size_t bench_prompts = 100;
  std::size_t prompt_min_len = 16;
  std::size_t prompt_max_len = 64;

  // analysis
  std::size_t eval_sequences = 100;
  std::size_t eval_splits = 50;
  std::size_t eval_seeds = 5;
  std::vector<std::size_t> eval_topk{1, 3, 5, 10};
  std::size_t eval_context = 128;
  std::size_t eval_min_split = 32;
  std::size_t sweep_step = 1;
  std::vector<std::size_t> sweep_layers{1, 2, 3, 4, 5, 6, 7, 8};
  std::size_t sweep_fixed_layer = 4;
  std::size_t sweep_max_steps = 0;
  std::vector<std::size_t> bench_cache_lengths{0, 128, 256};
  std::vector<std::size_t> bench_widths{1, 2, 4, 8, 16};
  std::size_t bench_trials = 100;

  /// Every key with its effective value, in a fixed order.
  std::string to_text() const;
  /// Rejects unknown keys; omitted keys keep their defaults.
  static RunConfig from_text(const std::string& text);
  /// Applies HTD_<UPPERCASE_KEY> environment overrides.
  void apply_env(const char* const* environ_ptr);
  void validate() const;

  std::uint64_t hash() const;

  /// Subset of keys that determine an artifact, for reuse decisions.
  std::string base_recipe() const;
  std::string transfer_recipe() const;
  std::string heads_recipe() const;
};

inline constexpr const char* kEnvPrefix = "HTD_";

}  // namespace htd
