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

// htd: pretrain, train, generate, bench and analyze from one flat config.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "htd/cli/commands.hpp"
#include "htd/model/checkpoint.hpp"

extern char** environ;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string out = "artifacts";
};

htd::RunConfig resolve_config(const GlobalOptions& g) {
  htd::RunConfig config;
  if (!g.config_path.empty()) {
    const auto bytes = htd::read_file_bytes(g.config_path);
    config = htd::RunConfig::from_text(std::string(bytes.begin(), bytes.end()));
  }
  config.apply_env(environ);
  if (g.seed) config.model.seed = *g.seed;
  if (!g.mode.empty()) config.decode_mode = g.mode;
  config.validate();
  std::cout << "config_hash=" << htd::hash_hex(config.hash()) << "\n";
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hidden-transfer speculative decoding toolkit"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config_path, "key=value config file");
  app.add_option("--seed", g.seed, "overrides the config seed");
  app.add_option("--mode", g.mode, "decode mode: autoregressive, transfer_tree, transfer_two_pass, medusa_tree");
  app.add_option("--out", g.out, "artifact and report directory");
  app.fallthrough();

  auto* pretrain = app.add_subcommand("pretrain", "train the base model");

  std::string method;
  auto* train = app.add_subcommand("train", "distill a transfer bundle or a baseline head set");
  train->add_option("method", method, "transfer, medusa or early_exit")->required();

  std::string prompt;
  auto* generate = app.add_subcommand("generate", "continue a prompt with the configured decode mode");
  generate->add_option("--prompt", prompt, "prompt text (default: every line of prompt_file)");

  std::string prompt_file;
  auto* bench = app.add_subcommand("bench", "compare decode modes over a prompt set");
  bench->add_option("--prompt-file", prompt_file, "one prompt per line (default: held-out samples)");

  std::string which;
  auto* analyze = app.add_subcommand("analyze", "run one analysis and write its report");
  analyze->add_option("which", which, "accuracy, cosine, sweep, microbench or ablation")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? htd::kExitOk : htd::kExitUsage;
  }

  return htd::run_guarded(std::cerr, [&]() -> int {
    htd::RunConfig config = resolve_config(g);
    if (pretrain->parsed()) return htd::cmd_pretrain(config, g.out, std::cout);
    if (train->parsed()) return htd::cmd_train(method, config, g.out, std::cout);
    if (generate->parsed()) return htd::cmd_generate(config, g.out, prompt, std::cout);
    if (bench->parsed()) {
      if (!prompt_file.empty()) config.prompt_file = prompt_file;
      std::vector<htd::DecodeMode> modes;
      if (!g.mode.empty()) modes.push_back(htd::parse_decode_mode(g.mode));
      return htd::cmd_bench(config, g.out, modes, std::cout);
    }
    if (analyze->parsed()) return htd::cmd_analyze(which, config, g.out, std::cout);
    return htd::kExitUsage;
  });
}
