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

// Command implementations behind the `htd` binary. Each writes its outputs
// under `out` and returns the process exit code.

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "htd/cli/run_config.hpp"
#include "htd/heads/heads.hpp"
#include "htd/model/corpus.hpp"
#include "htd/numerics/error.hpp"
#include "htd/transfer/transfer.hpp"
#include "htd/treedec/treedec.hpp"

namespace htd {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitArtifact = 2;
inline constexpr int kExitNumeric = 3;

struct ArtifactPaths {
  std::filesystem::path dir;
  std::filesystem::path base() const { return dir / "base.htc"; }
  std::filesystem::path transfer() const { return dir / "transfer.htc"; }
  std::filesystem::path medusa() const { return dir / "medusa.htc"; }
  std::filesystem::path exit_heads() const { return dir / "exit.htc"; }
};

/// Corpus tokens split as configured, plus a content hash for recipes.
struct LoadedCorpus {
  CorpusSplit split;
  std::uint64_t hash = 0;
};
LoadedCorpus load_configured_corpus(const RunConfig& config);

/// True when `path` exists and its "recipe" text record equals `recipe`.
bool artifact_is_current(const std::filesystem::path& path, const std::string& recipe);

/// Writes `<path>.config` holding the effective configuration.
void write_config_copy(const std::filesystem::path& artifact, const RunConfig& config);

/// Base model from `paths.base()`; throws ArtifactError when it is missing
/// or was built from a different base recipe or corpus.
Transformer<float> load_base(const RunConfig& config, const ArtifactPaths& paths, const LoadedCorpus& corpus);
TransferBundle<float> load_transfer(const RunConfig& config, const ArtifactPaths& paths,
                                    const LoadedCorpus& corpus, const Transformer<float>& model);
MedusaHeads<float> load_medusa(const RunConfig& config, const ArtifactPaths& paths, const LoadedCorpus& corpus,
                               const Transformer<float>& model);
ExitHeads<float> load_exit_heads(const RunConfig& config, const ArtifactPaths& paths, const LoadedCorpus& corpus,
                                 const Transformer<float>& model);

/// The configured tree file, or the built-in (3,2,2) tree limited to depth k.
TreeSpec load_tree_spec(const RunConfig& config);

/// UTF-8 text, one prompt per line; blank lines are skipped.
std::vector<std::string> read_prompt_file(const std::filesystem::path& path);
/// `count` windows of held-out tokens with lengths in [min_len, max_len].
std::vector<std::vector<std::int32_t>> sample_prompts(std::span<const std::int32_t> tokens, std::size_t count,
                                                      std::size_t min_len, std::size_t max_len,
                                                      std::uint64_t seed);

struct BenchRow {
  std::string mode;
  std::size_t prompts = 0;
  std::size_t forwards = 0;
  std::size_t emitted = 0;
  double wall_seconds = 0;
  /// Prompts whose output differs from autoregressive decoding.
  std::size_t mismatches = 0;
  std::vector<std::size_t> acceptance_histogram;
  double forward_speedup = 0;  // autoregressive forwards / forwards
  double wall_speedup = 0;

  double tokens_per_forward() const {
    return forwards ? static_cast<double>(emitted) / static_cast<double>(forwards) : 0.0;
  }
};

struct BenchTable {
  std::vector<BenchRow> rows;

  const BenchRow& row(const std::string& mode) const;
  std::string to_csv() const;
  /// Aligned columns for the terminal.
  std::string to_text() const;
};

/// Decodes every prompt in every mode; autoregressive decoding always runs
/// first as the reference for speedups and mismatches.
BenchTable run_bench(const Transformer<float>& model, std::span<const std::vector<std::int32_t>> prompts,
                     std::span<const DecodeMode> modes, const TreeSpec& spec, const DecodeOptions& options,
                     const TransferBundle<float>* bundle, const MedusaHeads<float>* medusa);

int cmd_pretrain(const RunConfig& config, const std::filesystem::path& out, std::ostream& log);
/// method: transfer, medusa or early_exit.
int cmd_train(const std::string& method, const RunConfig& config, const std::filesystem::path& out,
              std::ostream& log);
/// Continues `prompt`, or every line of the configured prompt file when it
/// is empty.
int cmd_generate(const RunConfig& config, const std::filesystem::path& out, const std::string& prompt,
                 std::ostream& log);
/// `modes` empty compares every mode.
int cmd_bench(const RunConfig& config, const std::filesystem::path& out, std::vector<DecodeMode> modes,
              std::ostream& log);
/// which: accuracy, cosine, sweep, microbench or ablation.
int cmd_analyze(const std::string& which, const RunConfig& config, const std::filesystem::path& out,
                std::ostream& log);

/// Runs `fn`, mapping project exceptions to exit codes with a message on `err`.
template <typename Fn>
int run_guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ArtifactError& e) {
    err << "artifact error: " << e.what() << "\n";
    return kExitArtifact;
  } catch (const NumericError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const CapacityError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace htd
