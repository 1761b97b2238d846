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

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "htd/cli/commands.hpp"
#include "htd/model/checkpoint.hpp"
#include "test_util.hpp"

namespace htd {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("htd_cli_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(RunConfigText, DefaultsRoundTrip) {
  const RunConfig defaults;
  const auto parsed = RunConfig::from_text(defaults.to_text());
  EXPECT_EQ(parsed.to_text(), defaults.to_text());
  EXPECT_EQ(parsed.hash(), defaults.hash());
  EXPECT_EQ(RunConfig::from_text("").hash(), defaults.hash());
  EXPECT_EQ(RunConfig::from_text("# only a comment\n\n").hash(), defaults.hash());
}

TEST(RunConfigText, UnknownKeyIsNamed) {
  try {
    RunConfig::from_text("k=3\nbogus_key=1\n");
    FAIL() << "expected UsageError";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("bogus_key"), std::string::npos);
  }
}

TEST(RunConfigText, RejectsInvalidValues) {
  EXPECT_THROW(RunConfig::from_text("k=5\n"), UsageError);
  EXPECT_THROW(RunConfig::from_text("transfer_layers=5,4,6\n"), UsageError);
  EXPECT_THROW(RunConfig::from_text("mask_mode=sometimes\n"), UsageError);
  EXPECT_THROW(RunConfig::from_text("decode_mode=beam\n"), UsageError);
  EXPECT_THROW(RunConfig::from_text("max_new_tokens=many\n"), UsageError);
}

TEST(RunConfigText, EnvironmentOverrides) {
  RunConfig c;
  const char* env[] = {"PATH=/bin", "HTD_K=2", "HTD_TRANSFER_LAYERS=3,5", "HTD_MASK_MODE=masked", nullptr};
  c.apply_env(env);
  EXPECT_EQ(c.k, 2u);
  EXPECT_EQ(c.transfer_layers, (std::vector<std::size_t>{3, 5}));
  EXPECT_EQ(c.mask_mode, "masked");
  RunConfig d;
  const char* bad[] = {"HTD_NOT_A_KEY=1", nullptr};
  EXPECT_THROW(d.apply_env(bad), UsageError);
}

TEST(RunConfigText, RecipesTrackOnlyTheirKeys) {
  RunConfig a, b;
  b.decode_mode = "autoregressive";
  b.mask_mode = "masked";
  b.eval_sequences = 3;
  EXPECT_EQ(a.base_recipe(), b.base_recipe());
  EXPECT_EQ(a.transfer_recipe(), b.transfer_recipe());
  EXPECT_EQ(a.heads_recipe(), b.heads_recipe());
  EXPECT_NE(a.hash(), b.hash());
  b.transfer_layers = {3, 5, 7};
  EXPECT_NE(a.transfer_recipe(), b.transfer_recipe());
  EXPECT_EQ(a.heads_recipe(), b.heads_recipe());
  b.pretrain.lr = 2e-3;
  EXPECT_NE(a.base_recipe(), b.base_recipe());
}

TEST(PromptFile, SkipsBlankLinesAndRejectsBadUtf8) {
  const auto dir = scratch("prompts");
  write_text(dir / "p.txt", "first prompt\r\n\n   \nsecond \xc3\xa9\n");
  EXPECT_EQ(read_prompt_file(dir / "p.txt"), (std::vector<std::string>{"first prompt", "second \xc3\xa9"}));
  write_text(dir / "empty.txt", "\n\n");
  EXPECT_TRUE(read_prompt_file(dir / "empty.txt").empty());
  write_text(dir / "bad.txt", "ok\nbad \xc3\x28\n");
  EXPECT_THROW(read_prompt_file(dir / "bad.txt"), UsageError);
  write_text(dir / "overlong.txt", "\xc0\xaf\n");
  EXPECT_THROW(read_prompt_file(dir / "overlong.txt"), UsageError);
  EXPECT_THROW(read_prompt_file(dir / "missing.txt"), UsageError);
  fs::remove_all(dir);
}

TEST(PromptSampling, LengthsAndDeterminism) {
  const auto& tokens = testing::bundled_corpus().tokens;
  const auto a = sample_prompts(tokens, 30, 16, 64, 5);
  const auto b = sample_prompts(tokens, 30, 16, 64, 5);
  EXPECT_EQ(a, b);
  for (const auto& p : a) {
    EXPECT_GE(p.size(), 16u);
    EXPECT_LE(p.size(), 64u);
  }
  EXPECT_THROW(sample_prompts(tokens, 1, 10, 5, 0), UsageError);
}

TEST(Bench, AutoregressiveAgainstItselfAndEmptyPrompts) {
  const auto& model = testing::micro_base();
  std::mt19937_64 rng(3);
  const std::vector<std::vector<std::int32_t>> prompts{testing::random_tokens(10, rng),
                                                       testing::random_tokens(20, rng)};
  const std::vector<DecodeMode> modes{DecodeMode::kAutoregressive};
  DecodeOptions options;
  options.max_new_tokens = 12;
  const auto table = run_bench(model, prompts, modes, TreeSpec{}, options, nullptr, nullptr);
  ASSERT_EQ(table.rows.size(), 1u);
  EXPECT_EQ(table.rows[0].forward_speedup, 1.0);
  EXPECT_EQ(table.rows[0].wall_speedup, 1.0);
  EXPECT_EQ(table.rows[0].emitted, table.rows[0].forwards);
  const auto empty = run_bench(model, {}, modes, TreeSpec{}, options, nullptr, nullptr);
  EXPECT_TRUE(empty.rows.empty());
  const auto csv = empty.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1);
}

// ---------------------------------------------------------------------------
// The htd binary

struct Run {
  int code = -1;
  std::string output;
};

Run run_htd(const std::string& args) {
  const std::string cmd = std::string(HTD_BINARY) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Binary : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = scratch("binary");
    write_text(dir_ / "tiny.cfg",
               "corpus=" HTD_CORPUS_DIR "\n"
               "n_layers=2\nd_model=16\nn_heads=2\nffn_dim=32\nmax_positions=128\n"
               "pretrain_context=32\npretrain_batch=2\npretrain_max_steps=3\n"
               "k=2\ntransfer_layers=1,2\nexit_layers=2\n"
               "train_context=32\ntrain_batch=2\ntrain_max_steps=2\n"
               "max_new_tokens=16\nbench_prompts=3\neval_context=64\neval_min_split=16\n");
    ASSERT_EQ(run_htd(args("pretrain")).code, 0);
    ASSERT_EQ(run_htd(args("train transfer")).code, 0);
    ASSERT_EQ(run_htd(args("train medusa")).code, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string args(const std::string& rest, const std::string& cfg = "tiny.cfg") {
    return "--config " + (dir_ / cfg).string() + " --out " + (dir_ / "out").string() + " " + rest;
  }

  static fs::path dir_;
};

fs::path Binary::dir_;

TEST_F(Binary, PrintsConfigHashAndReusesArtifacts) {
  const auto r = run_htd(args("pretrain"));
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.output.rfind("config_hash=", 0), 0u);
  EXPECT_NE(r.output.find("up to date"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "out" / "base.config"));
  EXPECT_TRUE(fs::exists(dir_ / "out" / "transfer.config"));
  // The stored config regenerates the same effective configuration.
  const auto copy = RunConfig::from_text(read_text(dir_ / "out" / "base.config"));
  EXPECT_EQ(copy.base_recipe(), RunConfig::from_text(read_text(dir_ / "tiny.cfg")).base_recipe());
}

TEST_F(Binary, GenerateIsLosslessAcrossModes) {
  ASSERT_EQ(run_htd(args("--mode autoregressive generate --prompt 'import os'")).code, 0);
  ASSERT_EQ(run_htd(args("--mode transfer_tree generate --prompt 'import os'")).code, 0);
  const auto ar = read_text(dir_ / "out" / "generate_autoregressive.txt");
  const auto tree = read_text(dir_ / "out" / "generate_transfer_tree.txt");
  EXPECT_FALSE(ar.empty());
  EXPECT_EQ(ar, tree);
  EXPECT_NE(read_text(dir_ / "out" / "generate_autoregressive.stats"),
            read_text(dir_ / "out" / "generate_transfer_tree.stats"));
}

TEST_F(Binary, BenchOnEmptyPromptFileWritesEmptyTable) {
  write_text(dir_ / "empty.txt", "\n");
  const auto r = run_htd(args("bench --prompt-file " + (dir_ / "empty.txt").string()));
  EXPECT_EQ(r.code, 0) << r.output;
  const auto csv = read_text(dir_ / "out" / "bench.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1);
}

TEST_F(Binary, BenchComparesAgainstAutoregressive) {
  const auto r = run_htd(args("--mode transfer_tree bench"));
  EXPECT_EQ(r.code, 0) << r.output;
  const auto csv = read_text(dir_ / "out" / "bench.csv");
  EXPECT_NE(csv.find("\nautoregressive,3,"), std::string::npos);
  EXPECT_NE(csv.find("\ntransfer_tree,3,"), std::string::npos);
  EXPECT_NE(csv.find(",1,1,0,"), std::string::npos);  // autoregressive speedups 1, mismatches 0
}

TEST_F(Binary, ExitCodes) {
  write_text(dir_ / "unknown.cfg", "colour=blue\n");
  const auto unknown = run_htd(args("pretrain", "unknown.cfg"));
  EXPECT_EQ(unknown.code, 1);
  EXPECT_NE(unknown.output.find("colour"), std::string::npos);

  EXPECT_EQ(run_htd(args("analyze everything")).code, 1);
  EXPECT_EQ(run_htd(args("train nothing")).code, 1);
  EXPECT_EQ(run_htd("").code, 1);

  // Early-exit heads were never trained here.
  EXPECT_EQ(run_htd(args("analyze accuracy")).code, 2);
  // A changed transfer recipe makes the stored bundle stale.
  write_text(dir_ / "stale.cfg", read_text(dir_ / "tiny.cfg") + "train_lr=0.002\n");
  const auto stale = run_htd(args("--mode transfer_tree generate --prompt x", "stale.cfg"));
  EXPECT_EQ(stale.code, 2);
  EXPECT_NE(stale.output.find("different configuration"), std::string::npos);
  const auto missing = run_htd("--out " + (dir_ / "nowhere").string() + " --config " +
                               (dir_ / "tiny.cfg").string() + " generate --prompt x");
  EXPECT_EQ(missing.code, 2);
}

TEST_F(Binary, SeedFlagChangesTheConfigHash) {
  const auto a = run_htd(args("--seed 1 bench --prompt-file " + (dir_ / "empty.txt").string()));
  const auto b = run_htd(args("--seed 2 bench --prompt-file " + (dir_ / "empty.txt").string()));
  EXPECT_NE(a.output.substr(0, a.output.find('\n')), b.output.substr(0, b.output.find('\n')));
}

}  // namespace
}  // namespace htd
