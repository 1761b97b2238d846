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

// Small models and comparison helpers shared by the unit tests.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "htd/model/corpus.hpp"
#include "htd/model/pretrain.hpp"
#include "htd/model/transformer.hpp"

namespace htd::testing {

inline ModelConfig tiny_config(std::size_t n_layers = 4, std::uint64_t seed = 3) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = 32;
  c.n_heads = 4;
  c.ffn_dim = 64;
  c.max_positions = 96;
  c.seed = seed;
  return c;
}

inline std::vector<std::int32_t> random_tokens(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int32_t> dist(0, 255);
  std::vector<std::int32_t> t(n);
  for (auto& x : t) x = dist(rng);
  return t;
}

template <typename T>
void expect_bit_identical(std::span<const T> a, std::span<const T> b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]) << "at " << i;
}

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

inline const Corpus& bundled_corpus() {
  static const Corpus corpus = load_corpus(HTD_CORPUS_DIR);
  return corpus;
}

/// A 4-layer model pretrained briefly on the bundled corpus, so its
/// next-token distributions carry real structure. Built once per binary.
inline const Transformer<float>& micro_base() {
  static const Transformer<float> model = [] {
    auto m = Transformer<float>::init(tiny_config());
    PretrainHyper h;
    h.context = 64;
    h.batch = 4;
    h.max_steps = 120;
    h.lr = 3e-3;
    h.warmup_steps = 5;
    pretrain_base(m, bundled_corpus().tokens, h);
    return m;
  }();
  return model;
}

}  // namespace htd::testing
