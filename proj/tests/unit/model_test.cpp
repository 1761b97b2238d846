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

#include <filesystem>
#include <fstream>
#include <random>

#include "htd/model/checkpoint.hpp"
#include "htd/model/corpus.hpp"
#include "htd/model/pretrain.hpp"
#include "htd/model/transformer.hpp"
#include "htd/numerics/ops.hpp"

namespace htd {
namespace {

ModelConfig tiny_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 32;
  c.n_heads = 4;
  c.ffn_dim = 64;
  c.max_positions = 64;
  c.seed = seed;
  return c;
}

std::vector<std::int32_t> random_tokens(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int32_t> dist(0, 255);
  std::vector<std::int32_t> t(n);
  for (auto& x : t) x = dist(rng);
  return t;
}

void expect_bit_identical(std::span<const float> a, std::span<const float> b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]) << "at " << i;
}

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
  float m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST(ModelConfig, RejectsIndivisibleHeads) {
  ModelConfig c;
  c.d_model = 10;
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), UsageError);
  EXPECT_THROW(Transformer<float>::init(c), UsageError);
}

TEST(ModelConfig, DefaultsMatchToyConfiguration) {
  ModelConfig c;
  EXPECT_EQ(c.n_layers, 8u);
  EXPECT_EQ(c.d_model, 256u);
  EXPECT_EQ(c.n_heads, 8u);
  EXPECT_EQ(c.vocab_size, 259u);
  EXPECT_EQ(c.max_positions, 512u);
}

TEST(ModelConfig, TextRoundTripAndUnknownKeys) {
  auto c = tiny_config(99);
  c.rope_theta = 12345.5;
  EXPECT_EQ(ModelConfig::from_text(c.to_text()), c);
  EXPECT_THROW(ModelConfig::from_text("n_layers=2\nbogus=1\n"), UsageError);
}

TEST(InitModel, ParameterCountMatchesClosedForm) {
  const auto c = tiny_config();
  auto m = Transformer<float>::init(c);
  const std::size_t d = 32, f = 64, v = 259, l = 3;
  // embeddings + per layer (two norms, four attention maps, three ffn maps) + final norm + head
  const std::size_t expected = v * d + l * (2 * d + 4 * d * d + 3 * d * f) + d + d * v;
  EXPECT_EQ(m.weights().parameter_count(), expected);
  EXPECT_EQ(c.parameter_count(), expected);
}

TEST(InitModel, SameSeedIsBitIdentical) {
  auto a = Transformer<float>::init(tiny_config(5));
  auto b = Transformer<float>::init(tiny_config(5));
  auto c = Transformer<float>::init(tiny_config(6));
  EXPECT_EQ(a.to_checkpoint().serialize(), b.to_checkpoint().serialize());
  EXPECT_NE(a.to_checkpoint().serialize(), c.to_checkpoint().serialize());
}

TEST(Embed, EmptyInputGivesEmptyOutput) {
  auto m = Transformer<float>::init(tiny_config());
  auto e = m.embed({}, {});
  EXPECT_EQ(e.rows(), 0u);
  EXPECT_EQ(e.numel(), 0u);
}

TEST(Embed, PositionIsNotAppliedInEmbedding) {
  auto m = Transformer<float>::init(tiny_config());
  std::vector<std::int32_t> tokens{7, 7}, pos{0, 9};
  auto e = m.embed(tokens, pos);
  expect_bit_identical(e.row(0), e.row(1));
}

TEST(Embed, MatchesTableLookup) {
  auto m = Transformer<float>::init(tiny_config());
  std::vector<std::int32_t> tokens{3, 258, 0}, pos{0, 1, 2};
  auto e = m.embed(tokens, pos);
  const auto& table = m.weights().tok_embeddings;
  for (std::size_t r = 0; r < tokens.size(); ++r) expect_bit_identical(e.row(r), table.row(tokens[r]));
}

TEST(Embed, RejectsOutOfRangeIds) {
  auto m = Transformer<float>::init(tiny_config());
  std::vector<std::int32_t> bad_token{259}, bad_pos{64}, ok{1}, zero{0};
  EXPECT_THROW(m.embed(bad_token, zero), UsageError);
  EXPECT_THROW(m.embed(ok, bad_pos), UsageError);
}

TEST(RunLayers, SegmentationIsBitIdentical) {
  auto m = Transformer<float>::init(tiny_config());
  std::mt19937_64 rng(1);
  auto tokens = random_tokens(20, rng);
  auto pos = iota_positions(20);
  auto mask = AttnMask::causal(20);
  auto h = m.embed(tokens, pos);
  auto full = m.run_layers(h, 0, 3, pos, mask).hidden;
  for (std::size_t t = 0; t <= 3; ++t) {
    auto lower = m.run_layers(h, 0, t, pos, mask).hidden;
    auto upper = m.run_layers(lower, t, 3, pos, mask).hidden;
    expect_bit_identical(full.values(), upper.values());
  }
}

TEST(RunLayers, TapsExposeIntermediateStates) {
  auto m = Transformer<float>::init(tiny_config());
  std::mt19937_64 rng(2);
  auto tokens = random_tokens(6, rng);
  auto pos = iota_positions(6);
  auto mask = AttnMask::causal(6);
  auto h = m.embed(tokens, pos);
  LayerRunOptions opts;
  opts.taps = {0, 2, 3};
  auto run = m.run_layers(h, 0, 3, pos, mask, nullptr, opts);
  ASSERT_EQ(run.taps.size(), 3u);
  expect_bit_identical(run.taps.at(0).values(), h.values());
  expect_bit_identical(run.taps.at(2).values(), m.run_layers(h, 0, 2, pos, mask).hidden.values());
  expect_bit_identical(run.taps.at(3).values(), run.hidden.values());
}

TEST(RunLayers, RejectsBadArguments) {
  auto m = Transformer<float>::init(tiny_config());
  auto pos = iota_positions(4);
  auto h = m.embed(std::vector<std::int32_t>{1, 2, 3, 4}, pos);
  EXPECT_THROW(m.run_layers(h, 2, 1, pos, AttnMask::causal(4)), UsageError);
  EXPECT_THROW(m.run_layers(h, 0, 4, pos, AttnMask::causal(4)), UsageError);
  EXPECT_THROW(m.run_layers(h, 0, 3, pos, AttnMask::causal(3)), ShapeError);
  auto cache = m.make_cache();
  EXPECT_THROW(m.run_layers(h, 0, 3, pos, AttnMask::causal(4, 2), &cache), ShapeError);
}

TEST(KVCacheForward, IncrementalMatchesFullRecompute) {
  auto m = Transformer<float>::init(tiny_config());
  std::mt19937_64 rng(4);
  auto tokens = random_tokens(24, rng);
  auto full = m.forward_causal(tokens);
  auto cache = m.make_cache();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::vector<std::int32_t> tok{tokens[i]}, pos{static_cast<std::int32_t>(i)};
    auto step = m.forward(tok, pos, AttnMask::causal(1, i), &cache);
    EXPECT_LE(max_abs_diff(step.logits.values(), full.logits.row(i)), 1e-5f);
    // Row-independent kernels make this exact as well.
    expect_bit_identical(step.logits.values(), full.logits.row(i));
  }
  EXPECT_EQ(cache.length(), tokens.size());
}

TEST(KVCacheForward, ChunkedPrefillMatches) {
  auto m = Transformer<float>::init(tiny_config());
  std::mt19937_64 rng(8);
  auto tokens = random_tokens(30, rng);
  auto full = m.forward_causal(tokens);
  auto cache = m.make_cache();
  std::size_t done = 0;
  for (std::size_t chunk : {7u, 1u, 13u, 9u}) {
    std::vector<std::int32_t> tok(tokens.begin() + done, tokens.begin() + done + chunk);
    auto step = m.forward(tok, iota_positions(chunk, static_cast<std::int32_t>(done)), AttnMask::causal(chunk, done),
                          &cache);
    for (std::size_t r = 0; r < chunk; ++r) expect_bit_identical(step.logits.row(r), full.logits.row(done + r));
    done += chunk;
  }
}

TEST(KVCacheForward, OverflowIsAnError) {
  auto c = tiny_config();
  c.max_positions = 8;
  auto m = Transformer<float>::init(c);
  auto cache = m.make_cache();
  std::vector<std::int32_t> tok(6, 1);
  m.forward(tok, iota_positions(6), AttnMask::causal(6), &cache);
  std::vector<std::int32_t> more{1, 2, 3};
  EXPECT_THROW(m.forward(more, std::vector<std::int32_t>{5, 6, 7}, AttnMask::causal(3, 6), &cache), CapacityError);
}

TEST(Attention, SelfOnlyRowReturnsItsValue) {
  std::mt19937_64 rng(6);
  std::normal_distribution<float> nd;
  auto make = [&] {
    std::vector<float> v(3 * 8);
    for (auto& x : v) x = nd(rng);
    return Tensor<float>::matrix(3, 8, v);
  };
  auto q = make(), k = make(), v = make();
  AttnMask mask = AttnMask::causal(3);
  mask.allow(2, 0, false);
  mask.allow(2, 1, false);
  auto out = masked_attention(q, k, v, KeyValuePrefix<float>{}, mask, 2);
  expect_bit_identical(out.row(2), v.row(2));
}

TEST(Attention, MaskedKeysAreNeverRead) {
  std::mt19937_64 rng(7);
  std::normal_distribution<float> nd;
  auto make = [&](std::size_t r) {
    std::vector<float> v(r * 8);
    for (auto& x : v) x = nd(rng);
    return v;
  };
  auto q = Tensor<float>::matrix(2, 8, make(2)), k = Tensor<float>::matrix(2, 8, make(2)),
       v = Tensor<float>::matrix(2, 8, make(2));
  auto pk = make(4), pv = make(4);
  AttnMask mask(2, 6);
  mask.allow_range(0, 0, 2);
  mask.allow(0, 4);
  mask.allow(1, 3);
  mask.allow(1, 5);
  auto before = masked_attention(q, k, v, KeyValuePrefix<float>{pk, pv, 4}, mask, 2);
  for (std::size_t e = 0; e < 8; ++e) pk[2 * 8 + e] = pv[2 * 8 + e] = 0.0f;
  auto after = masked_attention(q, k, v, KeyValuePrefix<float>{pk, pv, 4}, mask, 2);
  expect_bit_identical(before.values(), after.values());
}

TEST(Model, AppendedRowsLeaveRealRowsUnchanged) {
  auto m = Transformer<float>::init(tiny_config());
  std::mt19937_64 rng(9);
  auto tokens = random_tokens(12, rng);
  auto base = m.forward_causal(tokens);
  // Five extra rows that see everything; no real row sees them.
  auto extra = random_tokens(5, rng);
  std::vector<std::int32_t> all = tokens;
  all.insert(all.end(), extra.begin(), extra.end());
  std::vector<std::int32_t> pos = iota_positions(12);
  for (int i = 0; i < 5; ++i) pos.push_back(3 + i);
  AttnMask mask(17, 17);
  for (std::size_t r = 0; r < 12; ++r) mask.allow_range(r, 0, r + 1);
  for (std::size_t r = 12; r < 17; ++r) mask.allow_range(r, 0, r + 1);
  auto out = m.forward(all, pos, mask);
  for (std::size_t r = 0; r < 12; ++r) expect_bit_identical(out.logits.row(r), base.logits.row(r));
}

TEST(LmHead, ZeroStateGivesZeroLogitsAndMatchesMatmul) {
  auto m = Transformer<float>::init(tiny_config());
  auto zero = Tensor<float>({2, 32});
  auto logits = m.lm_head(zero);
  EXPECT_EQ(logits.rows(), 2u);
  for (float v : logits.values()) EXPECT_EQ(v, 0.0f);
  std::mt19937_64 rng(10);
  std::normal_distribution<float> nd;
  std::vector<float> hv(3 * 32);
  for (auto& x : hv) x = nd(rng);
  auto h = Tensor<float>::matrix(3, 32, hv);
  auto got = m.lm_head(h);
  const auto& w = m.weights().output;
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < 259; ++j) {
      double ref = 0;
      for (std::size_t e = 0; e < 32; ++e) ref += double(h.at(r, e)) * double(w.at(e, j));
      EXPECT_NEAR(got.at(r, j), ref, 1e-5);
    }
  }
}

TEST(KVCache, CompactKeepsSelectedEntriesInOrder) {
  KVCache<float> cache(2, 2, 8);
  for (std::size_t l = 0; l < 2; ++l) {
    std::vector<float> k{0, 0, 1, 1, 2, 2, 3, 3}, v{10, 10, 11, 11, 12, 12, 13, 13};
    std::vector<std::int32_t> p{0, 1, 2, 2};
    cache.append(l, k, v, p);
  }
  std::vector<std::size_t> keep{0, 1, 3};
  cache.compact(keep);
  EXPECT_EQ(cache.length(), 3u);
  EXPECT_EQ(std::vector<float>(cache.keys(1).begin(), cache.keys(1).end()), (std::vector<float>{0, 0, 1, 1, 3, 3}));
  EXPECT_EQ(std::vector<float>(cache.values(0).begin(), cache.values(0).end()),
            (std::vector<float>{10, 10, 11, 11, 13, 13}));
  EXPECT_EQ(cache.positions(0)[2], 2);
  std::vector<std::size_t> bad{1, 0};
  EXPECT_THROW(cache.compact(bad), UsageError);
  cache.truncate(1);
  EXPECT_EQ(cache.length(), 1u);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto m = Transformer<float>::init(tiny_config());
  auto bytes = m.to_checkpoint().serialize();
  auto back = Transformer<float>::from_checkpoint(Checkpoint::deserialize(bytes));
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(back.to_checkpoint().serialize(), bytes);
}

TEST(Checkpoint, HeaderLayout) {
  Checkpoint ck;
  ck.add_tensor("w", Shape{1, 2}, std::vector<float>{1.0f, -2.0f});
  auto b = ck.serialize();
  // magic, count, name length, name, rank, two u64 dims, dtype, 8 payload bytes
  ASSERT_EQ(b.size(), 4u + 4 + 4 + 1 + 4 + 16 + 1 + 8);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "HTC1");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[12], 'w');
  EXPECT_EQ(b[13], 2);
  EXPECT_EQ(b[17], 1);
  EXPECT_EQ(b[25], 2);
  EXPECT_EQ(b[33], 0);
}

TEST(Checkpoint, CorruptInputIsAnArtifactError) {
  Checkpoint ck;
  ck.add_tensor("w", Shape{2}, std::vector<float>{1.0f, 2.0f});
  ck.add_text("meta", "k=1\n");
  auto b = ck.serialize();
  auto truncated = b;
  truncated.resize(b.size() - 3);
  EXPECT_THROW(Checkpoint::deserialize(truncated), ArtifactError);
  auto bad_magic = b;
  bad_magic[0] = 'X';
  EXPECT_THROW(Checkpoint::deserialize(bad_magic), ArtifactError);
  auto back = Checkpoint::deserialize(b);
  EXPECT_EQ(back.text("meta"), "k=1\n");
  EXPECT_THROW(back.get("missing"), ArtifactError);
  EXPECT_THROW(back.tensor<float>("w", Shape{3}), ArtifactError);
}

TEST(Corpus, ByteCodecRoundTrip) {
  const std::string s = "caf\xc3\xa9 \x01\xff";
  auto t = encode_bytes(s);
  EXPECT_EQ(t.size(), s.size());
  EXPECT_EQ(t.back(), 255);
  EXPECT_EQ(decode_bytes(t), s);
  t.push_back(kEosToken);
  EXPECT_EQ(decode_bytes(t), s);
}

TEST(Corpus, LoadsTextFilesRecursivelyWithSeparators) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "htd_corpus_test";
  fs::remove_all(dir);
  fs::create_directories(dir / "sub");
  std::ofstream(dir / "b.txt") << "bb";
  std::ofstream(dir / "sub" / "a.txt") << "a";
  std::ofstream(dir / "skip.md") << "zzz";
  auto c = load_corpus(dir);
  EXPECT_EQ(c.files.size(), 2u);
  EXPECT_EQ(c.bytes, 3u);
  EXPECT_EQ(c.tokens, (std::vector<std::int32_t>{'b', 'b', kEosToken, 'a', kEosToken}));
  fs::remove_all(dir);
  EXPECT_THROW(load_corpus(dir), ArtifactError);
}

TEST(Corpus, SplitHoldsOutTail) {
  std::vector<std::int32_t> t(100);
  for (int i = 0; i < 100; ++i) t[i] = i;
  auto s = split_corpus(t, 0.05);
  EXPECT_EQ(s.train.size(), 95u);
  EXPECT_EQ(s.heldout.front(), 95);
}

class Pretrain : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { corpus_ = new Corpus(load_corpus(HTD_CORPUS_DIR)); }
  static void TearDownTestSuite() { delete corpus_; }
  static Corpus* corpus_;
};
Corpus* Pretrain::corpus_ = nullptr;

TEST_F(Pretrain, RejectsSmallCorpus) {
  auto m = Transformer<float>::init(tiny_config());
  std::vector<std::int32_t> small(1000, 65);
  EXPECT_THROW(pretrain_base(m, small, PretrainHyper{}), UsageError);
}

TEST_F(Pretrain, SameSeedGivesIdenticalCheckpointBytes) {
  PretrainHyper h;
  h.context = 32;
  h.batch = 2;
  h.max_steps = 3;
  auto a = Transformer<float>::init(tiny_config());
  auto b = Transformer<float>::init(tiny_config());
  pretrain_base(a, corpus_->tokens, h);
  pretrain_base(b, corpus_->tokens, h);
  EXPECT_EQ(a.to_checkpoint().serialize(), b.to_checkpoint().serialize());
  EXPECT_NE(a.to_checkpoint().serialize(), Transformer<float>::init(tiny_config()).to_checkpoint().serialize());
}

TEST_F(Pretrain, ShortRunReducesLossAndFreezesWeights) {
  PretrainHyper h;
  h.context = 48;
  h.batch = 4;
  h.max_steps = 40;
  h.lr = 3e-3;
  h.warmup_steps = 5;
  auto m = Transformer<float>::init(tiny_config());
  auto report = pretrain_base(m, corpus_->tokens, h);
  EXPECT_EQ(report.steps, 40u);
  EXPECT_NEAR(report.initial_loss, std::log(259.0), 0.2);
  EXPECT_LT(report.final_loss, 0.8 * report.initial_loss);
  for (const auto& [name, t] : m.weights().named()) {
    EXPECT_FALSE(t.requires_grad()) << name;
    EXPECT_FALSE(t.has_grad()) << name;
  }
}

}  // namespace
}  // namespace htd
