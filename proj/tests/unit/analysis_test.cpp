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

#include "htd/analysis/analysis.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "htd/numerics/ops.hpp"
#include "test_util.hpp"

namespace htd {
namespace {

using testing::bundled_corpus;
using testing::max_abs_diff;
using testing::micro_base;

std::span<const std::int32_t> heldout() {
  static const auto split = split_corpus(bundled_corpus().tokens, 0.05);
  return split.heldout;
}

EvalOptions small_eval(std::size_t sequences = 6, std::size_t splits = 8) {
  EvalOptions o;
  o.sequences = sequences;
  o.splits = splits;
  o.context = 48;
  o.min_split = 16;
  o.seeds = {11, 12};
  return o;
}

TransferBundle<float> bundle_at(std::vector<std::size_t> layers, std::uint64_t seed = 1, double noise = 0.01) {
  TransferConfig c;
  c.k = layers.size();
  c.layers = std::move(layers);
  return TransferBundle<float>::init(c, 32, model_fingerprint(micro_base()), seed, noise);
}

TEST(TokenRank, AgreesWithTopK) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> coarse(0, 5);  // many ties
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> scores(40);
    for (auto& s : scores) s = static_cast<float>(coarse(rng));
    const auto order = top_k<float>(scores, scores.size());
    for (std::size_t r = 0; r < order.size(); ++r) EXPECT_EQ(token_rank(scores, order[r]), r);
  }
  EXPECT_THROW(token_rank(std::vector<float>(3, 0.0f), 3), UsageError);
}

TEST(SampleSplits, GreedyContinuationsAndStatesMatchFullRecompute) {
  const auto& model = micro_base();
  auto opts = small_eval(3, 5);
  opts.tap_layers = {2, 4};
  const auto sets = sample_splits(model, heldout(), opts, 5);
  ASSERT_EQ(sets.size(), 3u);
  for (const auto& set : sets) {
    ASSERT_EQ(set.sources.size(), 5u);
    EXPECT_TRUE(std::is_sorted(set.sources.begin(), set.sources.end()));
    EXPECT_EQ(set.tokens.size(), set.sources.back() + 1);
    for (std::size_t j = 0; j < set.sources.size(); ++j) {
      const std::size_t s = set.sources[j];
      EXPECT_GE(s + 1, opts.min_split);
      EXPECT_LT(s + 1, opts.context);
      std::vector<std::int32_t> seq(set.tokens.begin(), set.tokens.begin() + static_cast<std::ptrdiff_t>(s + 1));
      ASSERT_EQ(set.greedy[j].size(), opts.steps + 1);
      for (std::size_t i = 0; i <= opts.steps; ++i) {
        LayerRunOptions taps;
        taps.taps = {2, 4};
        const auto out = model.forward(seq, iota_positions(seq.size()), AttnMask::causal(seq.size()), nullptr, taps);
        EXPECT_EQ(set.greedy[j][i], argmax_token<float>(out.logits.row(seq.size() - 1)));
        if (i > 0) {
          for (std::size_t t : {2u, 4u}) {
            EXPECT_LE(max_abs_diff<float>(set.states[j][i - 1].at(t), out.taps.at(t).row(seq.size() - 1)), 1e-5);
          }
        }
        seq.push_back(set.greedy[j][i]);
      }
    }
  }
  const auto again = sample_splits(model, heldout(), opts, 5);
  for (std::size_t q = 0; q < sets.size(); ++q) {
    EXPECT_EQ(again[q].tokens, sets[q].tokens);
    EXPECT_EQ(again[q].greedy, sets[q].greedy);
  }
}

TEST(SampleSplits, RejectsBadOptions) {
  const auto& model = micro_base();
  auto o = small_eval();
  o.context = 95;
  EXPECT_THROW(sample_splits(model, heldout(), o, 0), UsageError);
  o = small_eval();
  o.min_split = 48;
  EXPECT_THROW(sample_splits(model, heldout(), o, 0), UsageError);
  o = small_eval();
  EXPECT_THROW(sample_splits(model, heldout().first(20), o, 0), UsageError);
}

TEST(DraftAccuracy, ExhaustiveTopKAndMonotonicity) {
  const auto& model = micro_base();
  const auto bundle = bundle_at({1, 2, 3});
  const std::vector<DraftMethod> methods{transfer_method(model, bundle)};
  const std::vector<std::size_t> topk{1, 3, 10, 259};
  const auto report = eval_draft_accuracy(model, methods, heldout(), small_eval(), topk);
  EXPECT_EQ(report.cells.size(), 3u * topk.size());
  EXPECT_EQ(report.vocab, 259u);
  for (std::size_t step = 1; step <= 3; ++step) {
    double prev = 0;
    for (auto K : topk) {
      const auto& c = report.cell("transfer", step, K);
      EXPECT_EQ(c.samples, 2u * 6u * 8u);
      EXPECT_GE(c.rate(), prev);
      EXPECT_LE(c.rate(), 1.0);
      prev = c.rate();
    }
    EXPECT_EQ(report.cell("transfer", step, 259).rate(), 1.0);
  }
  const auto csv = report.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,step,topk,hits,samples,rate,std_error,chance");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 12);
}

TEST(DraftAccuracy, RandomControlSitsAtChance) {
  const auto& model = micro_base();
  const std::vector<DraftMethod> methods{random_method(259, 3, 7)};
  const std::vector<std::size_t> topk{1, 10, 50};
  const auto report = eval_draft_accuracy(model, methods, heldout(), small_eval(20, 30), topk);
  for (const auto& c : report.cells) {
    const double chance = static_cast<double>(c.topk) / 259.0;
    const double se = std::sqrt(chance * (1 - chance) / static_cast<double>(c.samples));
    EXPECT_LE(std::abs(c.rate() - chance), 3 * se) << "step " << c.step << " top-" << c.topk;
  }
}

TEST(DraftAccuracy, UntrainedMedusaHitsExactlyWhenTheTokenRepeats) {
  // A fresh Medusa head repeats the base next-token distribution, so its
  // step-1 top-1 draft is the first greedy token.
  const auto& model = micro_base();
  const auto heads = MedusaHeads<float>::init(model, 2, 0);
  const auto exits = ExitHeads<float>::init(model, {4}, 2, 0);
  const std::vector<DraftMethod> methods{medusa_method(model, heads), exit_method(model, exits, 4)};
  auto opts = small_eval();
  const std::vector<std::size_t> topk{1};
  const auto report = eval_draft_accuracy(model, methods, heldout(), opts, topk);
  opts.steps = 2;
  std::size_t repeats = 0, samples = 0;
  for (auto seed : opts.seeds) {
    for (const auto& set : sample_splits(model, heldout(), opts, seed)) {
      for (const auto& g : set.greedy) {
        repeats += g[1] == g[0] ? 1 : 0;
        ++samples;
      }
    }
  }
  EXPECT_EQ(report.cell("medusa", 1, 1).hits, repeats);
  EXPECT_EQ(report.cell("medusa", 1, 1).samples, samples);
  EXPECT_EQ(report.cell("early_exit_l4", 1, 1).hits, repeats);
  EXPECT_EQ(report.cell("early_exit_l4", 2, 1).hits, report.cell("medusa", 2, 1).hits);
  EXPECT_THROW(exit_method(model, exits, 3), UsageError);
}

TEST(CosineTrace, MatchesHandComputedSourceStateAtTheTransferLayer) {
  // With W = I the step-1 pseudo state at t_1 is the source's own state.
  const auto& model = micro_base();
  const auto bundle = bundle_at({2, 3}, 1, 0.0);
  auto opts = small_eval(4, 6);
  opts.seeds = {3};
  const auto trace = cosine_trace(model, bundle, heldout(), opts);
  ASSERT_EQ(trace.points.size(), 3u + 2u);
  EXPECT_EQ(trace.points.front().layer, 2u);
  EXPECT_EQ(trace.points.back().layer, 4u);
  for (const auto& p : trace.points) {
    EXPECT_GE(p.mean_cosine, -1.0);
    EXPECT_LE(p.mean_cosine, 1.0);
    EXPECT_EQ(p.samples, 24u);
  }
  opts.tap_layers = {2};
  opts.steps = 2;
  double sum = 0;
  std::size_t n = 0;
  for (const auto& set : sample_splits(model, heldout(), opts, 3)) {
    LayerRunOptions taps;
    taps.taps = {2};
    const auto out = model.forward(set.tokens, iota_positions(set.tokens.size()),
                                   AttnMask::causal(set.tokens.size()), nullptr, taps);
    for (std::size_t j = 0; j < set.sources.size(); ++j) {
      sum += cosine_similarity(out.taps.at(2).row(set.sources[j]), set.states[j][0].at(2));
      ++n;
    }
  }
  EXPECT_NEAR(trace.at(1, 2).mean_cosine, sum / static_cast<double>(n), 1e-9);
}

TEST(CosineTrace, SimilarityBasics) {
  const std::vector<float> a{1, 2, 3}, b{-1, -2, -3}, z{0, 0, 0};
  EXPECT_NEAR(cosine_similarity(a, a), 1.0, 1e-12);
  EXPECT_NEAR(cosine_similarity(a, b), -1.0, 1e-12);
  EXPECT_EQ(cosine_similarity(a, z), 0.0);
  EXPECT_THROW(cosine_similarity(a, std::vector<float>{1, 2}), ShapeError);
}

SweepOptions quick_sweep(std::size_t step, std::vector<std::size_t> layers, std::size_t fixed = 0) {
  SweepOptions s;
  s.step = step;
  s.layers = std::move(layers);
  s.fixed_layer = fixed;
  s.hyper.context = 32;
  s.hyper.batch = 2;
  s.hyper.max_steps = 4;
  s.hyper.eval_windows = 2;
  s.init_seed = 9;
  return s;
}

TEST(LayerSweep, SingleLayerLastLayerAndDeterminism) {
  const auto& model = micro_base();
  const auto split = split_corpus(bundled_corpus().tokens, 0.05);
  const std::vector<std::size_t> topk{1, 5};
  auto eval = small_eval(3, 5);
  eval.seeds = {1};
  const auto one = layer_sweep(model, split.train, split.heldout, quick_sweep(1, {4}), eval, topk);
  ASSERT_EQ(one.rows.size(), 1u);
  EXPECT_EQ(one.rows[0].layer, 4u);
  ASSERT_EQ(one.rows[0].accuracy.size(), 2u);
  EXPECT_EQ(one.rows[0].accuracy[0].samples, 15u);
  const auto again = layer_sweep(model, split.train, split.heldout, quick_sweep(1, {4}), eval, topk);
  EXPECT_EQ(again.to_csv(), one.to_csv());

  const auto step2 = layer_sweep(model, split.train, split.heldout, quick_sweep(2, {3, 4}, 2), eval, topk);
  ASSERT_EQ(step2.rows.size(), 2u);
  EXPECT_EQ(step2.fixed_layer, 2u);
  for (const auto& row : step2.rows) EXPECT_EQ(row.accuracy[0].step, 2u);
  const auto csv = step2.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 4);
}

TEST(LayerSweep, RejectsOutOfRangeLayers) {
  const auto& model = micro_base();
  const auto split = split_corpus(bundled_corpus().tokens, 0.05);
  const std::vector<std::size_t> topk{1};
  EXPECT_THROW(layer_sweep(model, split.train, split.heldout, quick_sweep(1, {5}), small_eval(), topk), UsageError);
  EXPECT_THROW(layer_sweep(model, split.train, split.heldout, quick_sweep(1, {0}), small_eval(), topk), UsageError);
  EXPECT_THROW(layer_sweep(model, split.train, split.heldout, quick_sweep(2, {2}, 2), small_eval(), topk),
               UsageError);
  EXPECT_THROW(layer_sweep(model, split.train, split.heldout, quick_sweep(3, {2}), small_eval(), topk), UsageError);
}

TEST(MaskAblation, StepOneIsIdenticalAcrossModes) {
  const auto& model = micro_base();
  const auto bundle = bundle_at({1, 2, 3}, 4, 0.05);
  const std::vector<std::size_t> topk{1, 5};
  const auto report = mask_ablation(model, bundle, heldout(), small_eval(), topk);
  EXPECT_TRUE(report.step1_bit_identical);
  for (auto K : topk) {
    EXPECT_EQ(report.accuracy.cell("no_masked", 1, K).hits, report.accuracy.cell("masked", 1, K).hits);
  }
  const auto csv = report.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 3 * 2);
  EXPECT_NE(csv.find("masked,3,5,"), std::string::npos);
}

TEST(Microbench, TableShapeAndSelfConsistency) {
  const auto& model = micro_base();
  const std::vector<std::size_t> caches{0, 16}, widths{1, 4};
  const auto table = forward_microbench(model, caches, widths, 5);
  ASSERT_EQ(table.rows.size(), 4u);
  for (const auto& r : table.rows) {
    EXPECT_GT(r.median_seconds, 0.0);
    EXPECT_LE(r.min_seconds, r.median_seconds);
    EXPECT_EQ(r.trials, 5u);
  }
  EXPECT_EQ(table.width_ratio(16, 1), 1.0);
  const auto csv = table.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  const std::vector<std::size_t> too_long{90}, wide{8};
  EXPECT_THROW(forward_microbench(model, too_long, wide, 1), UsageError);
}

TEST(Reports, WriteCreatesDirectories) {
  const auto dir = std::filesystem::temp_directory_path() / "htd_analysis_test";
  std::filesystem::remove_all(dir);
  write_report(dir / "sub" / "r.csv", "a,b\n1,2\n");
  std::ifstream in(dir / "sub" / "r.csv");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(text, "a,b\n1,2\n");
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace htd
