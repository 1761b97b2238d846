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

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "htd/numerics/ops.hpp"
#include "htd/treedec/treedec.hpp"
#include "test_util.hpp"

namespace htd {
namespace {

using testing::max_abs_diff;
using testing::micro_base;
using testing::random_tokens;

TransferConfig transfer_config(std::size_t k) {
  TransferConfig c;
  c.k = k;
  c.layers.clear();
  for (std::size_t i = 1; i <= k; ++i) c.layers.push_back(i);
  return c;
}

std::vector<float> one_hot(std::int32_t token, std::size_t vocab = 259) {
  std::vector<float> v(vocab, 0.0f);
  v[static_cast<std::size_t>(token)] = 1.0f;
  return v;
}

std::vector<std::int32_t> greedy_oracle(const Transformer<float>& model, std::vector<std::int32_t> seq,
                                        std::size_t steps) {
  std::vector<std::int32_t> out;
  for (std::size_t i = 0; i < steps; ++i) {
    auto logits = model.forward_causal(seq).logits;
    out.push_back(argmax_token<float>(logits.row(seq.size() - 1)));
    seq.push_back(out.back());
  }
  return out;
}

TEST(TreeSpecParse, HandBuiltExample) {
  const auto spec = parse_tree_spec("0\n1\n0,0\n");
  ASSERT_EQ(spec.draft_count(), 3u);
  EXPECT_EQ(spec.nodes[0].parent, -1);
  EXPECT_EQ(spec.nodes[1].depth, 1u);
  EXPECT_EQ(spec.nodes[2].depth, 1u);
  EXPECT_EQ(spec.nodes[3].depth, 2u);
  EXPECT_EQ(spec.nodes[3].parent, 1);
  EXPECT_EQ(spec.nodes[2].rank, 1u);
  EXPECT_EQ(spec.to_text(), "0\n1\n0,0\n");
}

TEST(TreeSpecParse, EmptyCommentsAndOrder) {
  EXPECT_EQ(parse_tree_spec("").draft_count(), 0u);
  EXPECT_EQ(parse_tree_spec("# nothing\n\n  \n").draft_count(), 0u);
  const auto spec = parse_tree_spec("0, 1  # deeper first\n0\n");
  ASSERT_EQ(spec.draft_count(), 2u);
  EXPECT_EQ(spec.path(2), (std::vector<std::size_t>{0, 1}));
}

TEST(TreeSpecParse, Errors) {
  EXPECT_THROW(parse_tree_spec("0,0\n"), UsageError);
  EXPECT_THROW(parse_tree_spec("0\n0\n"), UsageError);
  EXPECT_THROW(parse_tree_spec("0\nx\n"), UsageError);
  EXPECT_THROW(parse_tree_spec("0,\n"), UsageError);
  EXPECT_THROW(parse_tree_spec("-1\n"), UsageError);
}

TEST(TreeSpecParse, DefaultTreeShape) {
  const auto spec = default_tree_spec();
  EXPECT_EQ(spec.draft_count(), 21u);
  EXPECT_EQ(spec.max_depth(), 3u);
  std::vector<std::size_t> per_depth(4, 0);
  for (const auto& n : spec.nodes) ++per_depth[n.depth];
  EXPECT_EQ(per_depth, (std::vector<std::size_t>{1, 3, 6, 12}));
  for (std::size_t i = 1; i < spec.nodes.size(); ++i) {
    const auto& n = spec.nodes[i];
    ASSERT_LT(n.parent, static_cast<std::int32_t>(i));
    EXPECT_EQ(spec.nodes[static_cast<std::size_t>(n.parent)].depth + 1, n.depth);
  }
  EXPECT_EQ(parse_tree_spec(spec.to_text()).to_text(), spec.to_text());
}

TEST(BuildCandidates, SinglePathTakesArgmax) {
  std::vector<std::vector<float>> d{{0.1f, 0.5f, 0.4f}};
  const auto tree = build_candidates<float>(d, parse_tree_spec("0"), 7, 20);
  EXPECT_EQ(tree.tokens, (std::vector<std::int32_t>{7, 1}));
  EXPECT_EQ(tree.positions, (std::vector<std::int32_t>{20, 21}));
}

TEST(BuildCandidates, RanksMatchFullSortOracle) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<float>> d(2, std::vector<float>(50));
    for (auto& row : d) {
      for (auto& p : row) p = u(rng);
    }
    const auto tree = build_candidates<float>(d, parse_tree_spec("0\n1\n0,0\n1,2\n"), 0, 0);
    for (std::size_t step = 0; step < 2; ++step) {
      std::vector<std::int32_t> order(50);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return d[step][a] > d[step][b]; });
      if (step == 0) {
        EXPECT_EQ(tree.tokens[1], order[0]);
        EXPECT_EQ(tree.tokens[2], order[1]);
      } else {
        EXPECT_EQ(tree.tokens[3], order[0]);
        EXPECT_EQ(tree.tokens[4], order[2]);
      }
    }
  }
}

TEST(BuildCandidates, UniformTiesResolveToLowestIds) {
  std::vector<std::vector<float>> d{std::vector<float>(10, 0.1f)};
  const auto tree = build_candidates<float>(d, parse_tree_spec("0\n1\n2\n"), 5, 0);
  EXPECT_EQ(tree.tokens, (std::vector<std::int32_t>{5, 0, 1, 2}));
}

TEST(BuildCandidates, Errors) {
  std::vector<std::vector<float>> d{std::vector<float>(3, 0.3f)};
  EXPECT_THROW(build_candidates<float>(d, parse_tree_spec("3"), 0, 0), UsageError);
  EXPECT_THROW(build_candidates<float>(d, parse_tree_spec("0\n0,0"), 0, 0), UsageError);
}

TEST(FlattenTree, ChainIsCausalAndSiblingsAreIsolated) {
  DraftTree chain{parse_tree_spec("0\n0,0\n"), {1, 2, 3}, {4, 5, 6}};
  const auto flat = flatten_tree(chain, 4, 64);
  EXPECT_EQ(flat.mask, AttnMask::causal(3, 4));
  DraftTree fan{parse_tree_spec("0\n1\n"), {1, 2, 3}, {4, 5, 5}};
  const auto f = flatten_tree(fan, 2, 64);
  EXPECT_FALSE(f.mask.allowed(1, 2 + 2));
  EXPECT_FALSE(f.mask.allowed(2, 2 + 1));
  EXPECT_EQ(f.mask.permitted(2), (std::vector<std::size_t>{0, 1, 2, 4}));
  EXPECT_THROW(flatten_tree(chain, 4, 6), CapacityError);
}

DraftTree random_tree(std::mt19937_64& rng, std::int32_t root, std::int32_t root_pos) {
  // Random subset of the (3,2,2) tree, kept closed under parents.
  const auto full = default_tree_spec();
  std::bernoulli_distribution keep(0.6);
  std::vector<std::vector<std::size_t>> paths;
  std::vector<bool> kept(full.nodes.size(), false);
  kept[0] = true;
  std::string text;
  for (std::size_t i = 1; i < full.nodes.size(); ++i) {
    if (kept[static_cast<std::size_t>(full.nodes[i].parent)] && keep(rng)) {
      kept[i] = true;
      const auto p = full.path(i);
      for (std::size_t j = 0; j < p.size(); ++j) text += (j ? "," : "") + std::to_string(p[j]);
      text += "\n";
    }
  }
  std::vector<std::vector<float>> dists(3, std::vector<float>(259));
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& d : dists) {
    for (auto& p : d) p = u(rng);
  }
  return build_candidates<float>(dists, parse_tree_spec(text), root, root_pos);
}

TEST(FlattenTree, MatchesPerPathSequentialRecompute) {
  const auto& model = micro_base();
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto prefix = random_tokens(12, rng);
    const auto tree = random_tree(rng, 65, static_cast<std::int32_t>(prefix.size()));
    auto cache = model.make_cache();
    model.forward(prefix, iota_positions(prefix.size()), AttnMask::causal(prefix.size()), &cache);
    const auto flat = flatten_tree(tree, prefix.size(), model.config().max_positions);
    const auto out = model.forward(flat.tokens, flat.positions, flat.mask, &cache);
    for (std::size_t node = 0; node < tree.tokens.size(); ++node) {
      std::vector<std::int32_t> seq = prefix;
      std::vector<std::size_t> chain;
      for (auto a = static_cast<std::int32_t>(node); a >= 0; a = tree.spec.nodes[static_cast<std::size_t>(a)].parent) {
        chain.push_back(static_cast<std::size_t>(a));
      }
      for (auto it = chain.rbegin(); it != chain.rend(); ++it) seq.push_back(tree.tokens[*it]);
      const auto ref = model.forward_causal(seq).logits;
      EXPECT_LE(max_abs_diff(out.logits.row(node), ref.row(seq.size() - 1)), 1e-4) << "node " << node;
    }
  }
}

TEST(FlattenTree, NonAncestorsNeverInfluenceANode) {
  const auto& model = micro_base();
  std::mt19937_64 rng(9);
  const auto tree = random_tree(rng, 70, 0);
  const auto base = model.forward(tree.tokens, tree.positions, flatten_tree(tree, 0, 96).mask).logits;
  for (std::size_t changed = 1; changed < tree.tokens.size(); ++changed) {
    auto edited = tree;
    edited.tokens[changed] = (edited.tokens[changed] + 1) % 256;
    const auto logits = model.forward(edited.tokens, edited.positions, flatten_tree(edited, 0, 96).mask).logits;
    for (std::size_t node = 0; node < tree.tokens.size(); ++node) {
      bool descendant = false;
      for (auto a = static_cast<std::int32_t>(node); a >= 0; a = tree.spec.nodes[static_cast<std::size_t>(a)].parent) {
        descendant = descendant || static_cast<std::size_t>(a) == changed;
      }
      if (!descendant) testing::expect_bit_identical(logits.row(node), base.row(node));
    }
  }
}

// ---------------------------------------------------------------------------
// Verification

class Verify : public ::testing::Test {
 protected:
  void SetUp() override {
    std::mt19937_64 rng(21);
    prompt_ = random_tokens(10, rng);
    bundle_ = TransferBundle<float>::init(transfer_config(3), 32, 0, 1);
  }
  std::vector<std::int32_t> prompt_;
  TransferBundle<float> bundle_;
};

TEST_F(Verify, AllDraftsWrongGivesOneToken) {
  const auto& model = micro_base();
  DecodeSession<float> s(model, DecodeMode::kTransferTree, default_tree_spec(), &bundle_);
  const auto first = s.start(prompt_);
  auto seq = prompt_;
  seq.push_back(first);
  const auto truth = greedy_oracle(model, seq, 1);
  std::vector<std::vector<float>> wrong(3, one_hot((truth[0] + 1) % 256));
  for (auto& d : wrong) d[static_cast<std::size_t>(truth[0])] = -1.0f;  // keep it out of every rank
  const auto tree = build_candidates<float>(wrong, default_tree_spec(), s.root(), s.root_position());
  const auto outcome = s.verify_and_extend(tree);
  EXPECT_TRUE(outcome.accepted_nodes.empty());
  EXPECT_EQ(outcome.bonus, truth[0]);
  EXPECT_EQ(outcome.forwards, 1u);
  EXPECT_EQ(s.cache().length(), prompt_.size() + 1);
  EXPECT_EQ(s.root(), truth[0]);
}

TEST_F(Verify, CraftedDraftsAcceptTwoAndCacheMatchesRecompute) {
  const auto& model = micro_base();
  for (auto mode : {DecodeMode::kTransferTree, DecodeMode::kTransferTwoPass}) {
    DecodeSession<float> s(model, mode, default_tree_spec(), &bundle_);
    const auto first = s.start(prompt_);
    auto seq = prompt_;
    seq.push_back(first);
    const auto truth = greedy_oracle(model, seq, 3);
    // Steps 1 and 2 are right (at rank 1 for step 1); step 3 is wrong.
    std::vector<std::vector<float>> d{one_hot(truth[0]), one_hot(truth[1]), one_hot((truth[2] + 7) % 256)};
    d[0][(static_cast<std::size_t>(truth[0]) + 3) % 256] = 2.0f;
    d[2][static_cast<std::size_t>(truth[2])] = -1.0f;
    const auto tree = build_candidates<float>(d, default_tree_spec(), s.root(), s.root_position());
    const auto outcome = s.verify_and_extend(tree);
    ASSERT_EQ(outcome.accepted_tokens.size(), 2u);
    EXPECT_EQ(outcome.accepted_tokens[0], truth[0]);
    EXPECT_EQ(outcome.accepted_tokens[1], truth[1]);
    EXPECT_EQ(outcome.bonus, truth[2]);
    EXPECT_EQ(tree.spec.path(outcome.accepted_nodes[0]), (std::vector<std::size_t>{1}));
    EXPECT_EQ(outcome.forwards, mode == DecodeMode::kTransferTwoPass ? 2u : 1u);

    // The cache now holds prompt + first + two accepted tokens; compare
    // with a fresh prefill of exactly those tokens.
    std::vector<std::int32_t> committed = seq;
    committed.push_back(truth[0]);
    committed.push_back(truth[1]);
    EXPECT_EQ(s.history(), committed);
    auto fresh = model.make_cache();
    model.forward(committed, iota_positions(committed.size()), AttnMask::causal(committed.size()), &fresh);
    ASSERT_EQ(s.cache().length(), fresh.length());
    for (std::size_t l = 0; l < model.config().n_layers; ++l) {
      EXPECT_LE(max_abs_diff(s.cache().keys(l), fresh.keys(l)), 1e-5);
      EXPECT_LE(max_abs_diff(s.cache().values(l), fresh.values(l)), 1e-5);
      EXPECT_TRUE(std::equal(s.cache().positions(l).begin(), s.cache().positions(l).end(),
                             fresh.positions(l).begin()));
    }
    EXPECT_EQ(s.root_position(), static_cast<std::int32_t>(committed.size()));
  }
}

TEST_F(Verify, CombinedDraftsMatchTwoPassDrafts) {
  const auto& model = micro_base();
  DecodeSession<float> combined(model, DecodeMode::kTransferTree, default_tree_spec(), &bundle_);
  DecodeSession<float> two_pass(model, DecodeMode::kTransferTwoPass, default_tree_spec(), &bundle_);
  combined.start(prompt_);
  two_pass.start(prompt_);
  for (int round = 0; round < 12; ++round) {
    ASSERT_EQ(combined.root(), two_pass.root());
    ASSERT_EQ(combined.drafts().size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_LE(max_abs_diff<float>(combined.drafts()[i], two_pass.drafts()[i]), 1e-4) << "round " << round;
    }
    const auto a = combined.verify_and_extend(combined.next_tree());
    const auto b = two_pass.verify_and_extend(two_pass.next_tree());
    ASSERT_EQ(a.accepted_tokens, b.accepted_tokens);
  }
}

TEST(Decode, ZeroTokensDoesNothing) {
  const auto& model = micro_base();
  const std::vector<std::int32_t> prompt{1, 2, 3};
  const auto r = decode<float>(model, prompt, DecodeMode::kAutoregressive, TreeSpec{}, {0, true});
  EXPECT_TRUE(r.tokens.empty());
  EXPECT_EQ(r.stats.forwards, 0u);
}

TEST(Decode, RejectsBadSetups) {
  const auto& model = micro_base();
  const std::vector<std::int32_t> prompt{1, 2, 3};
  EXPECT_THROW(decode<float>(model, prompt, DecodeMode::kTransferTree, default_tree_spec(), {}), UsageError);
  EXPECT_THROW(decode<float>(model, std::vector<std::int32_t>{}, DecodeMode::kAutoregressive, TreeSpec{}, {}),
               UsageError);
  auto shallow = TransferBundle<float>::init(transfer_config(2), 32, 0, 1);
  EXPECT_THROW(decode<float>(model, prompt, DecodeMode::kTransferTree, default_tree_spec(), {}, &shallow),
               UsageError);
}

void expect_accounting(const DecodeResult& r) {
  std::size_t total = 0;
  for (auto e : r.stats.emissions) total += e;
  EXPECT_EQ(total, r.stats.emitted);
  EXPECT_EQ(r.stats.emitted, r.tokens.size());
  EXPECT_EQ(r.stats.emissions.size(), r.stats.forwards);
}

TEST(Decode, TreeModesAreLosslessOnRandomPrompts) {
  const auto& model = micro_base();
  const auto bundle = TransferBundle<float>::init(transfer_config(3), 32, 0, 2);
  const auto medusa = MedusaHeads<float>::init(model, 3, 0);
  std::mt19937_64 rng(33);
  std::uniform_int_distribution<std::size_t> len(4, 20);
  const DecodeOptions opts{40, false};
  std::size_t accepted = 0;
  for (int p = 0; p < 8; ++p) {
    const auto prompt = random_tokens(len(rng), rng);
    const auto ar = decode<float>(model, prompt, DecodeMode::kAutoregressive, TreeSpec{}, opts);
    ASSERT_EQ(ar.tokens.size(), 40u);
    EXPECT_EQ(ar.stats.forwards, 40u);
    expect_accounting(ar);
    for (auto mode : {DecodeMode::kTransferTree, DecodeMode::kTransferTwoPass, DecodeMode::kMedusaTree}) {
      const auto r = decode<float>(model, prompt, mode, default_tree_spec(), opts, &bundle, &medusa);
      EXPECT_EQ(r.tokens, ar.tokens) << to_string(mode) << " prompt " << p;
      expect_accounting(r);
      if (mode != DecodeMode::kTransferTwoPass) {
        EXPECT_LE(r.stats.forwards, ar.stats.forwards);
      }
      for (std::size_t a = 1; a < r.stats.acceptance_histogram.size(); ++a) {
        accepted += a * r.stats.acceptance_histogram[a];
      }
    }
  }
  EXPECT_GT(accepted, 0u);
}

TEST(Decode, ContextOverflowStopsCleanlyAndStaysLossless) {
  const auto& model = micro_base();
  const auto bundle = TransferBundle<float>::init(transfer_config(3), 32, 0, 2);
  std::mt19937_64 rng(34);
  const auto prompt = random_tokens(80, rng);
  const DecodeOptions opts{100, false};
  const auto ar = decode<float>(model, prompt, DecodeMode::kAutoregressive, TreeSpec{}, opts);
  EXPECT_TRUE(ar.stats.truncated);
  EXPECT_EQ(ar.tokens.size(), 96u - 80u + 1u);
  const auto tree = decode<float>(model, prompt, DecodeMode::kTransferTree, default_tree_spec(), opts, &bundle);
  EXPECT_TRUE(tree.stats.truncated);
  EXPECT_EQ(tree.tokens, ar.tokens);
  expect_accounting(tree);
}

TEST(Decode, StopsAfterEos) {
  const auto& model = micro_base();
  const std::vector<std::int32_t> prompt{72, 105};
  const auto free_run = decode<float>(model, prompt, DecodeMode::kAutoregressive, TreeSpec{}, {30, false});
  const auto r = decode<float>(model, prompt, DecodeMode::kAutoregressive, TreeSpec{}, {30, true});
  const auto eos = std::find(free_run.tokens.begin(), free_run.tokens.end(), kEosToken);
  const std::size_t expected =
      eos == free_run.tokens.end() ? 30 : static_cast<std::size_t>(eos - free_run.tokens.begin()) + 1;
  EXPECT_EQ(r.tokens.size(), expected);
}

TEST(DecodeStatsRecords, ContainsEveryField) {
  DecodeStats s;
  s.forwards = 4;
  s.emitted = 6;
  s.acceptance_histogram = {1, 2};
  const auto text = s.to_records();
  EXPECT_NE(text.find("forwards=4\n"), std::string::npos);
  EXPECT_NE(text.find("tokens_per_forward=1.5\n"), std::string::npos);
  EXPECT_NE(text.find("acceptance_histogram=1,2\n"), std::string::npos);
  EXPECT_NE(text.find("truncated=false\n"), std::string::npos);
}

}  // namespace
}  // namespace htd
