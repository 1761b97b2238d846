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

// Measurements over trained draft producers: top-K draft accuracy against
// greedy continuations, pseudo/real hidden-state similarity, transfer-layer
// sweeps, the mask ablation, and forward-time scaling with input width.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "htd/heads/heads.hpp"
#include "htd/model/transformer.hpp"
#include "htd/transfer/transfer.hpp"

namespace htd {

struct EvalOptions {
  std::size_t sequences = 100;
  std::size_t splits = 50;
  /// Tokens per sampled sequence; split points fall in [min_split, context).
  std::size_t context = 128;
  std::size_t min_split = 32;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  /// Greedy tokens recorded past each split (the first is the plain
  /// next-token choice, so drafts can be checked up to steps - 1).
  std::size_t steps = 3;
  /// Layers at which the teacher-forced greedy states are kept.
  std::vector<std::size_t> tap_layers;

  void validate(const ModelConfig& model) const;
};

/// One sampled sequence and its split points. For a split whose last
/// context token sits at row `sources[j]`, `greedy[j]` holds the frozen
/// model's next steps + 1 greedy tokens and `states[j][i][t]` the layer-t
/// state of greedy token i (0-based) when appended teacher-forced.
struct SplitSet {
  std::vector<std::int32_t> tokens;
  std::vector<std::size_t> sources;
  std::vector<std::vector<std::int32_t>> greedy;
  std::vector<std::vector<std::map<std::size_t, std::vector<float>>>> states;
};

/// Windows and split points drawn from `tokens` with mt19937_64(seed).
std::vector<SplitSet> sample_splits(const Transformer<float>& model, std::span<const std::int32_t> tokens,
                                    const EvalOptions& options, std::uint64_t seed);

/// Scores per source row and step: scores[j][i - 1] ranks the vocabulary
/// for the token i + 1 positions after sources[j].
using DraftScores = std::vector<std::vector<std::vector<float>>>;

struct DraftMethod {
  std::string name;
  std::size_t k = 0;
  std::function<DraftScores(std::span<const std::int32_t> tokens, std::span<const std::size_t> sources)> score;
};

DraftMethod transfer_method(const Transformer<float>& model, const TransferBundle<float>& bundle,
                            std::string name = "transfer");
DraftMethod medusa_method(const Transformer<float>& model, const MedusaHeads<float>& heads);
DraftMethod exit_method(const Transformer<float>& model, const ExitHeads<float>& heads, std::size_t layer);
/// Uniformly random scores: a top-K set hits with probability K / vocab.
DraftMethod random_method(std::size_t vocab, std::size_t k, std::uint64_t seed);

struct AccuracyCell {
  std::string method;
  std::size_t step = 0;
  std::size_t topk = 0;
  std::size_t hits = 0;
  std::size_t samples = 0;

  double rate() const { return samples ? static_cast<double>(hits) / static_cast<double>(samples) : 0.0; }
  /// Binomial standard error of rate().
  double std_error() const;
};

struct AccuracyReport {
  std::vector<AccuracyCell> cells;
  std::vector<std::uint64_t> seeds;
  std::size_t vocab = 0;

  const AccuracyCell& cell(const std::string& method, std::size_t step, std::size_t topk) const;
  std::string to_csv() const;
};

/// Rank of `token` under descending scores, ties to the lower id (the
/// order used by top_k).
std::size_t token_rank(std::span<const float> scores, std::int32_t token);

AccuracyReport eval_draft_accuracy(const Transformer<float>& model, std::span<const DraftMethod> methods,
                                   std::span<const std::int32_t> tokens, const EvalOptions& options,
                                   std::span<const std::size_t> topk);

struct SimilarityPoint {
  std::size_t step = 0;
  std::size_t layer = 0;
  double mean_cosine = 0;
  std::size_t samples = 0;
};

struct SimilarityTrace {
  std::vector<SimilarityPoint> points;

  const SimilarityPoint& at(std::size_t step, std::size_t layer) const;
  std::string to_csv() const;
};

double cosine_similarity(std::span<const float> a, std::span<const float> b);

/// Cosine between each step-i pseudo state and the real state of greedy
/// token i at every layer from t_i to the last.
SimilarityTrace cosine_trace(const Transformer<float>& model, const TransferBundle<float>& bundle,
                             std::span<const std::int32_t> tokens, EvalOptions options);

struct SweepRow {
  std::size_t layer = 0;
  double identity_heldout_kl = 0;
  double final_heldout_kl = 0;
  std::vector<AccuracyCell> accuracy;  // the swept step, one cell per top-K
};

struct SweepReport {
  std::size_t step = 0;
  std::size_t fixed_layer = 0;
  std::vector<SweepRow> rows;

  std::string to_csv() const;
};

struct SweepOptions {
  std::size_t step = 1;
  std::vector<std::size_t> layers;
  /// Step-1 layer when sweeping step 2.
  std::size_t fixed_layer = 0;
  MaskMode mask_mode = MaskMode::kNoMasked;
  bool bias = false;
  TransferTrainHyper hyper;
  std::uint64_t init_seed = 0;
};

/// Trains one bundle per candidate layer with identical hyperparameters
/// and seed, then scores the swept step.
SweepReport layer_sweep(const Transformer<float>& model, std::span<const std::int32_t> train_tokens,
                        std::span<const std::int32_t> heldout_tokens, const SweepOptions& sweep,
                        const EvalOptions& eval, std::span<const std::size_t> topk,
                        const TrainLogger& log = {});

struct AblationReport {
  AccuracyReport accuracy;  // methods "no_masked" and "masked"
  bool step1_bit_identical = false;

  std::string to_csv() const;
};

/// Scores one trained bundle under both inference masks.
AblationReport mask_ablation(const Transformer<float>& model, const TransferBundle<float>& bundle,
                             std::span<const std::int32_t> tokens, const EvalOptions& options,
                             std::span<const std::size_t> topk);

struct TimingRow {
  std::size_t cache_length = 0;
  std::size_t width = 0;
  double median_seconds = 0;
  double min_seconds = 0;
  std::size_t trials = 0;
};

struct TimingTable {
  std::vector<TimingRow> rows;

  const TimingRow& at(std::size_t cache_length, std::size_t width) const;
  /// median(width) / median(1) at a cache length.
  double width_ratio(std::size_t cache_length, std::size_t width) const;
  std::string to_csv() const;
};

/// Median wall time of one cached forward of `width` new tokens after
/// `cache_length` cached ones.
TimingTable forward_microbench(const Transformer<float>& model, std::span<const std::size_t> cache_lengths,
                               std::span<const std::size_t> widths, std::size_t trials, std::uint64_t seed = 0);

void write_report(const std::filesystem::path& path, const std::string& csv);

}  // namespace htd
