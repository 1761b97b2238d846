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

#include "htd/cli/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>

#include "htd/analysis/analysis.hpp"
#include "htd/model/checkpoint.hpp"
#include "htd/model/pretrain.hpp"
#include "htd/model/transformer.hpp"
#include "htd/util/kv_text.hpp"

namespace htd {

LoadedCorpus load_configured_corpus(const RunConfig& config) {
  Corpus corpus = load_corpus(config.corpus);
  LoadedCorpus out;
  out.hash = fnv1a64({reinterpret_cast<const std::uint8_t*>(corpus.tokens.data()),
                      corpus.tokens.size() * sizeof(std::int32_t)});
  out.split = split_corpus(corpus.tokens, config.heldout_fraction);
  return out;
}

bool artifact_is_current(const std::filesystem::path& path, const std::string& recipe) {
  if (!std::filesystem::exists(path)) return false;
  try {
    const Checkpoint ck = Checkpoint::load(path);
    return ck.contains("recipe") && ck.text("recipe") == recipe;
  } catch (const ArtifactError&) {
    return false;
  }
}

void write_config_copy(const std::filesystem::path& artifact, const RunConfig& config) {
  auto path = artifact;
  path.replace_extension(".config");
  const std::string text = config.to_text();
  write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

namespace {

std::string with_corpus(const std::string& recipe, std::uint64_t corpus_hash) {
  return recipe + "corpus_hash=" + hash_hex(corpus_hash) + "\n";
}

std::string addon_recipe(const std::string& method, const RunConfig& config, std::uint64_t corpus_hash,
                         std::uint64_t base_hash) {
  const std::string keys = method == "transfer" ? config.transfer_recipe() : config.heads_recipe();
  return "method=" + method + "\n" + with_corpus(keys, corpus_hash) + "base_hash=" + hash_hex(base_hash) + "\n";
}

void require_current(const std::filesystem::path& path, const std::string& recipe, const std::string& remedy) {
  if (!std::filesystem::exists(path)) {
    throw ArtifactError("missing " + path.string() + "; run `" + remedy + "`");
  }
  if (!artifact_is_current(path, recipe)) {
    throw ArtifactError(path.string() + " was built from a different configuration; rerun `" + remedy + "`");
  }
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

TrainLogger progress_logger(std::ostream& log) {
  const auto start = std::chrono::steady_clock::now();
  return [&log, start](std::size_t update, std::size_t total, const std::string& message) {
    if (update % 10 == 0 || update + 1 == total) {
      log << "update " << update + 1 << "/" << total << " " << message << " elapsed "
          << static_cast<long long>(seconds_since(start)) << "s\n"
          << std::flush;
    }
  };
}

template <typename Hyper>
Hyper train_hyper(const RunConfig& config) {
  Hyper h;
  h.epochs = config.train_epochs;
  h.context = config.train_context;
  h.batch = config.train_batch;
  h.lr = config.train_lr;
  h.max_steps = config.train_max_steps;
  h.seed = config.model.seed;
  h.direction = parse_kl_direction(config.kl_direction);
  return h;
}

std::string distill_summary(const DistillReport& r) {
  std::ostringstream out;
  out << "updates=" << r.updates << "\nwindows=" << r.windows << "\n";
  for (const auto& t : r.tasks) {
    out << t.name << ".initial_heldout_kl=" << format_double(t.initial_heldout_kl) << "\n"
        << t.name << ".final_heldout_kl=" << format_double(t.final_heldout_kl) << "\n";
  }
  return out.str();
}

std::vector<std::uint64_t> eval_seeds(const RunConfig& config) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < config.eval_seeds; ++i) seeds.push_back(config.model.seed * 1000 + i);
  return seeds;
}

EvalOptions eval_options(const RunConfig& config) {
  EvalOptions o;
  o.sequences = config.eval_sequences;
  o.splits = config.eval_splits;
  o.context = config.eval_context;
  o.min_split = config.eval_min_split;
  o.seeds = eval_seeds(config);
  o.steps = config.k;
  return o;
}

// Summarizes the rows of `cells` for one top-K on the terminal.
void print_accuracy(std::ostream& log, const AccuracyReport& report, std::size_t topk) {
  for (const auto& c : report.cells) {
    if (c.topk != topk) continue;
    log << c.method << " step " << c.step << " top-" << topk << ": " << format_double(c.rate()) << " +- "
        << format_double(c.std_error()) << " (" << c.samples << " samples)\n";
  }
}

}  // namespace

int cmd_pretrain(const RunConfig& config, const std::filesystem::path& out, std::ostream& log) {
  const ArtifactPaths paths{out};
  std::filesystem::create_directories(out);
  const LoadedCorpus corpus = load_configured_corpus(config);
  const std::string recipe = with_corpus(config.base_recipe(), corpus.hash);
  if (artifact_is_current(paths.base(), recipe)) {
    log << "base checkpoint up to date: " << paths.base().string() << "\n";
    return kExitOk;
  }

  PretrainHyper hyper = config.pretrain;
  hyper.seed = config.model.seed;
  auto model = Transformer<float>::init(config.model);
  log << "pretraining " << model.weights().parameter_count() << " parameters on " << corpus.split.train.size()
      << " tokens\n";
  const auto start = std::chrono::steady_clock::now();
  const PretrainReport report =
      pretrain_base(model, corpus.split.train, hyper, [&](std::size_t step, std::size_t total, double loss) {
        if (step % 25 == 0 || step == total) {
          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
          log << "step " << step << "/" << total << " loss " << format_double(loss) << " elapsed "
              << static_cast<long long>(secs) << "s\n"
              << std::flush;
        }
      });
  const double heldout = evaluate_loss(model, corpus.split.heldout, hyper.context, 64);

  std::ostringstream summary;
  summary << "initial_loss=" << format_double(report.initial_loss) << "\n"
          << "final_loss=" << format_double(report.final_loss) << "\n"
          << "heldout_loss=" << format_double(heldout) << "\n"
          << "steps=" << report.steps << "\n"
          << "tokens_seen=" << report.tokens_seen << "\n";
  Checkpoint ck = model.to_checkpoint();
  ck.add_text("recipe", recipe);
  ck.add_text("pretrain.report", summary.str());
  ck.save(paths.base());
  write_config_copy(paths.base(), config);
  log << summary.str() << "wrote " << paths.base().string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Artifacts

Transformer<float> load_base(const RunConfig& config, const ArtifactPaths& paths, const LoadedCorpus& corpus) {
  require_current(paths.base(), with_corpus(config.base_recipe(), corpus.hash), "htd pretrain");
  return Transformer<float>::from_checkpoint(Checkpoint::load(paths.base()));
}

TransferBundle<float> load_transfer(const RunConfig& config, const ArtifactPaths& paths,
                                    const LoadedCorpus& corpus, const Transformer<float>& model) {
  const std::uint64_t base_hash = model_fingerprint(model);
  require_current(paths.transfer(), addon_recipe("transfer", config, corpus.hash, base_hash),
                  "htd train transfer");
  auto bundle = TransferBundle<float>::load(paths.transfer(), base_hash);
  bundle.config.mask_mode = parse_mask_mode(config.mask_mode);
  return bundle;
}

MedusaHeads<float> load_medusa(const RunConfig& config, const ArtifactPaths& paths, const LoadedCorpus& corpus,
                               const Transformer<float>& model) {
  const std::uint64_t base_hash = model_fingerprint(model);
  require_current(paths.medusa(), addon_recipe("medusa", config, corpus.hash, base_hash), "htd train medusa");
  return MedusaHeads<float>::load(paths.medusa(), base_hash);
}

ExitHeads<float> load_exit_heads(const RunConfig& config, const ArtifactPaths& paths, const LoadedCorpus& corpus,
                                 const Transformer<float>& model) {
  const std::uint64_t base_hash = model_fingerprint(model);
  require_current(paths.exit_heads(), addon_recipe("early_exit", config, corpus.hash, base_hash),
                  "htd train early_exit");
  return ExitHeads<float>::load(paths.exit_heads(), base_hash);
}

TreeSpec load_tree_spec(const RunConfig& config) {
  if (config.tree_spec.empty()) {
    // The built-in (3,2,2) tree, cut to the available draft steps.
    std::vector<std::size_t> branching{3, 2, 2};
    branching.resize(std::min(branching.size(), config.k));
    return tree_spec_from_branching(branching);
  }
  const auto bytes = read_file_bytes(config.tree_spec);
  return parse_tree_spec(std::string(bytes.begin(), bytes.end()));
}

// ---------------------------------------------------------------------------
// Prompts

namespace {

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c >> 5) == 0x6) {
      len = 2;
      cp = c & 0x1f;
    } else if ((c >> 4) == 0xe) {
      len = 3;
      cp = c & 0x0f;
    } else if ((c >> 3) == 0x1e) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > s.size()) return false;
    for (std::size_t j = 1; j < len; ++j) {
      const auto cc = static_cast<unsigned char>(s[i + j]);
      if ((cc >> 6) != 0x2) return false;
      cp = (cp << 6) | (cc & 0x3f);
    }
    // Overlong forms, surrogates and out-of-range code points.
    static constexpr std::uint32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < kMin[len] || cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) return false;
    i += len;
  }
  return true;
}

}  // namespace

std::vector<std::string> read_prompt_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw UsageError("prompt file " + path.string() + " does not exist");
  const auto bytes = read_file_bytes(path);
  const std::string text(bytes.begin(), bytes.end());
  std::vector<std::string> prompts;
  std::size_t line_no = 0, begin = 0;
  while (begin <= text.size()) {
    std::size_t end = text.find('\n', begin);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(begin, end - begin);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!valid_utf8(line)) {
      throw UsageError("prompt file " + path.string() + ": line " + std::to_string(line_no) + " is not UTF-8");
    }
    if (line.find_first_not_of(" \t") != std::string::npos) prompts.push_back(line);
    if (end == text.size()) break;
    begin = end + 1;
  }
  return prompts;
}

std::vector<std::vector<std::int32_t>> sample_prompts(std::span<const std::int32_t> tokens, std::size_t count,
                                                      std::size_t min_len, std::size_t max_len,
                                                      std::uint64_t seed) {
  if (min_len == 0 || min_len > max_len) throw UsageError("sample_prompts: empty length range");
  if (tokens.size() < max_len) throw UsageError("sample_prompts: too few tokens");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> length(min_len, max_len);
  std::vector<std::vector<std::int32_t>> prompts;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t n = length(rng);
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, tokens.size() - n)(rng);
    prompts.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                         tokens.begin() + static_cast<std::ptrdiff_t>(start + n));
  }
  return prompts;
}

// ---------------------------------------------------------------------------
// Bench

const BenchRow& BenchTable::row(const std::string& mode) const {
  for (const auto& r : rows) {
    if (r.mode == mode) return r;
  }
  throw UsageError("bench table: no row for " + mode);
}

namespace {

std::string join_histogram(const std::vector<std::size_t>& h) {
  std::string out;
  for (std::size_t i = 0; i < h.size(); ++i) out += (i ? ";" : "") + std::to_string(h[i]);
  return out;
}

}  // namespace

std::string BenchTable::to_csv() const {
  std::ostringstream out;
  out << "mode,prompts,forwards,emitted,tokens_per_forward,wall_seconds,forward_speedup,wall_speedup,mismatches,"
         "acceptance_histogram\n";
  for (const auto& r : rows) {
    out << r.mode << ',' << r.prompts << ',' << r.forwards << ',' << r.emitted << ','
        << format_double(r.tokens_per_forward()) << ',' << format_double(r.wall_seconds) << ','
        << format_double(r.forward_speedup) << ',' << format_double(r.wall_speedup) << ',' << r.mismatches << ','
        << join_histogram(r.acceptance_histogram) << '\n';
  }
  return out.str();
}

std::string BenchTable::to_text() const {
  std::ostringstream out;
  out << std::left << std::setw(20) << "mode" << std::right << std::setw(10) << "forwards" << std::setw(10)
      << "emitted" << std::setw(12) << "tok/fwd" << std::setw(12) << "wall(s)" << std::setw(12) << "fwd x"
      << std::setw(12) << "wall x" << std::setw(12) << "mismatch" << "\n";
  out << std::fixed;
  for (const auto& r : rows) {
    out << std::left << std::setw(20) << r.mode << std::right << std::setw(10) << r.forwards << std::setw(10)
        << r.emitted << std::setw(12) << std::setprecision(3) << r.tokens_per_forward() << std::setw(12)
        << std::setprecision(2) << r.wall_seconds << std::setw(11) << std::setprecision(2) << r.forward_speedup
        << "x" << std::setw(11) << r.wall_speedup << "x" << std::setw(12) << r.mismatches << "\n";
  }
  return out.str();
}

BenchTable run_bench(const Transformer<float>& model, std::span<const std::vector<std::int32_t>> prompts,
                     std::span<const DecodeMode> modes, const TreeSpec& spec, const DecodeOptions& options,
                     const TransferBundle<float>* bundle, const MedusaHeads<float>* medusa) {
  BenchTable table;
  if (prompts.empty()) return table;
  std::vector<DecodeMode> order{DecodeMode::kAutoregressive};
  for (auto m : modes) {
    if (std::find(order.begin(), order.end(), m) == order.end()) order.push_back(m);
  }
  std::vector<std::vector<std::int32_t>> reference;
  for (auto mode : order) {
    BenchRow row;
    row.mode = to_string(mode);
    row.prompts = prompts.size();
    for (std::size_t p = 0; p < prompts.size(); ++p) {
      const auto r = decode<float>(model, prompts[p], mode, spec, options, bundle, medusa);
      row.forwards += r.stats.forwards;
      row.emitted += r.stats.emitted;
      row.wall_seconds += r.stats.wall_seconds;
      if (row.acceptance_histogram.size() < r.stats.acceptance_histogram.size()) {
        row.acceptance_histogram.resize(r.stats.acceptance_histogram.size(), 0);
      }
      for (std::size_t a = 0; a < r.stats.acceptance_histogram.size(); ++a) {
        row.acceptance_histogram[a] += r.stats.acceptance_histogram[a];
      }
      if (mode == DecodeMode::kAutoregressive) {
        reference.push_back(r.tokens);
      } else if (r.tokens != reference[p]) {
        ++row.mismatches;
      }
    }
    table.rows.push_back(std::move(row));
  }
  const BenchRow& ar = table.rows.front();
  for (auto& row : table.rows) {
    row.forward_speedup = row.forwards ? static_cast<double>(ar.forwards) / static_cast<double>(row.forwards) : 0.0;
    row.wall_speedup = row.wall_seconds > 0 ? ar.wall_seconds / row.wall_seconds : 0.0;
  }
  return table;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_train(const std::string& method, const RunConfig& config, const std::filesystem::path& out,
              std::ostream& log) {
  if (method != "transfer" && method != "medusa" && method != "early_exit") {
    throw UsageError("train: unknown method '" + method + "' (expected transfer, medusa or early_exit)");
  }
  const ArtifactPaths paths{out};
  const LoadedCorpus corpus = load_configured_corpus(config);
  const auto model = load_base(config, paths, corpus);
  const std::uint64_t base_hash = model_fingerprint(model);
  const std::string recipe = addon_recipe(method, config, corpus.hash, base_hash);
  const auto path = method == "transfer" ? paths.transfer() : method == "medusa" ? paths.medusa()
                                                                                 : paths.exit_heads();
  if (artifact_is_current(path, recipe)) {
    log << method << " checkpoint up to date: " << path.string() << "\n";
    return kExitOk;
  }

  const auto start = std::chrono::steady_clock::now();
  Checkpoint ck;
  std::string summary;
  if (method == "transfer") {
    TransferConfig tc;
    tc.k = config.k;
    tc.layers = config.transfer_layers;
    tc.mask_mode = parse_mask_mode(config.mask_mode);
    tc.bias = config.transfer_bias;
    auto bundle = TransferBundle<float>::init(tc, model.config().d_model, base_hash, config.model.seed);
    auto hyper = train_hyper<TransferTrainHyper>(config);
    hyper.train_mask = parse_train_mask(config.train_mask);
    log << "training transfer steps at layers " << join_sizes(tc.layers) << "\n";
    const auto report =
        transfer_train(model, corpus.split.train, corpus.split.heldout, bundle, hyper, {}, progress_logger(log));
    std::ostringstream s;
    s << "updates=" << report.updates << "\nwindows=" << report.windows << "\n";
    for (const auto& st : report.steps) {
      s << "step" << st.step << ".identity_heldout_kl=" << format_double(st.identity_heldout_kl) << "\n"
        << "step" << st.step << ".initial_heldout_kl=" << format_double(st.initial_heldout_kl) << "\n"
        << "step" << st.step << ".final_heldout_kl=" << format_double(st.final_heldout_kl) << "\n";
    }
    summary = s.str();
    ck = bundle.to_checkpoint();
  } else if (method == "medusa") {
    auto heads = MedusaHeads<float>::init(model, config.k, base_hash);
    log << "training " << config.k << " medusa heads\n";
    const auto report = train_medusa(model, corpus.split.train, corpus.split.heldout, heads,
                                     train_hyper<DistillHyper>(config), progress_logger(log));
    summary = distill_summary(report);
    ck = heads.to_checkpoint();
  } else {
    auto heads = ExitHeads<float>::init(model, config.exit_layers, config.k, base_hash);
    log << "training early-exit heads at layers " << join_sizes(config.exit_layers) << "\n";
    const auto report = train_early_exit(model, corpus.split.train, corpus.split.heldout, heads,
                                         train_hyper<DistillHyper>(config), progress_logger(log));
    summary = distill_summary(report);
    ck = heads.to_checkpoint();
  }
  summary += "wall_seconds=" + format_double(seconds_since(start)) + "\n";
  ck.add_text("recipe", recipe);
  ck.add_text("train.report", summary);
  ck.save(path);
  write_config_copy(path, config);
  log << summary << "wrote " << path.string() << "\n";
  return kExitOk;
}

namespace {

struct DecodeArtifacts {
  std::optional<TransferBundle<float>> bundle;
  std::optional<MedusaHeads<float>> medusa;
};

DecodeArtifacts load_for_modes(const RunConfig& config, const ArtifactPaths& paths, const LoadedCorpus& corpus,
                               const Transformer<float>& model, std::span<const DecodeMode> modes) {
  DecodeArtifacts a;
  for (auto m : modes) {
    if ((m == DecodeMode::kTransferTree || m == DecodeMode::kTransferTwoPass) && !a.bundle) {
      a.bundle = load_transfer(config, paths, corpus, model);
    }
    if (m == DecodeMode::kMedusaTree && !a.medusa) a.medusa = load_medusa(config, paths, corpus, model);
  }
  return a;
}

DecodeOptions decode_options(const RunConfig& config) {
  DecodeOptions o;
  o.max_new_tokens = config.max_new_tokens;
  return o;
}

}  // namespace

int cmd_generate(const RunConfig& config, const std::filesystem::path& out, const std::string& prompt,
                 std::ostream& log) {
  std::vector<std::string> prompts;
  if (!prompt.empty()) {
    prompts.push_back(prompt);
  } else if (!config.prompt_file.empty()) {
    prompts = read_prompt_file(config.prompt_file);
  } else {
    throw UsageError("generate: pass --prompt or set prompt_file");
  }
  const DecodeMode mode = parse_decode_mode(config.decode_mode);
  const ArtifactPaths paths{out};
  const LoadedCorpus corpus = load_configured_corpus(config);
  const auto model = load_base(config, paths, corpus);
  const auto artifacts = load_for_modes(config, paths, corpus, model, std::span<const DecodeMode>(&mode, 1));
  const TreeSpec spec = load_tree_spec(config);

  std::ostringstream text, stats;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto tokens = encode_bytes(prompts[i]);
    const auto r = decode<float>(model, tokens, mode, spec, decode_options(config),
                                 artifacts.bundle ? &*artifacts.bundle : nullptr,
                                 artifacts.medusa ? &*artifacts.medusa : nullptr);
    const std::string continuation = decode_bytes(r.tokens);
    log << continuation << "\n";
    log << "forwards=" << r.stats.forwards << " emitted=" << r.stats.emitted
        << " tokens_per_forward=" << format_double(r.stats.tokens_per_forward()) << "\n";
    text << continuation << "\n";
    stats << "prompt=" << i << "\n" << r.stats.to_records() << "\n";
  }
  std::filesystem::create_directories(out);
  const std::string stem = "generate_" + to_string(mode);
  write_report(out / (stem + ".txt"), text.str());
  write_report(out / (stem + ".stats"), stats.str());
  write_config_copy(out / (stem + ".txt"), config);
  return kExitOk;
}

int cmd_bench(const RunConfig& config, const std::filesystem::path& out, std::vector<DecodeMode> modes,
              std::ostream& log) {
  if (modes.empty()) {
    modes = {DecodeMode::kAutoregressive, DecodeMode::kTransferTree, DecodeMode::kTransferTwoPass,
             DecodeMode::kMedusaTree};
  }
  const ArtifactPaths paths{out};
  std::vector<std::vector<std::int32_t>> prompts;
  BenchTable table;
  if (!config.prompt_file.empty()) {
    for (const auto& p : read_prompt_file(config.prompt_file)) prompts.push_back(encode_bytes(p));
  }
  if (config.prompt_file.empty() || !prompts.empty()) {
    const LoadedCorpus corpus = load_configured_corpus(config);
    const auto model = load_base(config, paths, corpus);
    if (config.prompt_file.empty()) {
      prompts = sample_prompts(corpus.split.heldout, config.bench_prompts, config.prompt_min_len,
                               config.prompt_max_len, config.model.seed);
    }
    const auto artifacts = load_for_modes(config, paths, corpus, model, modes);
    table = run_bench(model, prompts, modes, load_tree_spec(config), decode_options(config),
                      artifacts.bundle ? &*artifacts.bundle : nullptr,
                      artifacts.medusa ? &*artifacts.medusa : nullptr);
  }
  log << table.to_text();
  write_report(out / "bench.csv", table.to_csv());
  write_config_copy(out / "bench.csv", config);
  return kExitOk;
}

int cmd_analyze(const std::string& which, const RunConfig& config, const std::filesystem::path& out,
                std::ostream& log) {
  static const std::vector<std::string> kKinds{"accuracy", "cosine", "sweep", "microbench", "ablation"};
  if (std::find(kKinds.begin(), kKinds.end(), which) == kKinds.end()) {
    throw UsageError("analyze: unknown analysis '" + which +
                     "' (expected accuracy, cosine, sweep, microbench or ablation)");
  }
  const ArtifactPaths paths{out};
  const LoadedCorpus corpus = load_configured_corpus(config);
  const auto model = load_base(config, paths, corpus);
  const EvalOptions eval = eval_options(config);
  std::filesystem::path report_path;
  std::string csv;

  if (which == "accuracy") {
    const auto bundle = load_transfer(config, paths, corpus, model);
    const auto medusa = load_medusa(config, paths, corpus, model);
    const auto exits = load_exit_heads(config, paths, corpus, model);
    std::vector<DraftMethod> methods{transfer_method(model, bundle), medusa_method(model, medusa)};
    for (auto t : exits.layers) methods.push_back(exit_method(model, exits, t));
    methods.push_back(random_method(model.config().vocab_size, config.k, config.model.seed));
    const auto report = eval_draft_accuracy(model, methods, corpus.split.heldout, eval, config.eval_topk);
    print_accuracy(log, report, config.eval_topk.front());
    report_path = out / "accuracy.csv";
    csv = report.to_csv();
  } else if (which == "cosine") {
    const auto bundle = load_transfer(config, paths, corpus, model);
    const auto trace = cosine_trace(model, bundle, corpus.split.heldout, eval);
    for (const auto& p : trace.points) {
      log << "step " << p.step << " layer " << p.layer << " cosine " << format_double(p.mean_cosine) << "\n";
    }
    report_path = out / "cosine_transfer.csv";
    csv = trace.to_csv();
  } else if (which == "sweep") {
    SweepOptions sweep;
    sweep.step = config.sweep_step;
    sweep.layers = config.sweep_layers;
    sweep.fixed_layer = config.sweep_fixed_layer;
    sweep.mask_mode = parse_mask_mode(config.mask_mode);
    sweep.bias = config.transfer_bias;
    sweep.hyper = train_hyper<TransferTrainHyper>(config);
    sweep.hyper.train_mask = parse_train_mask(config.train_mask);
    sweep.hyper.max_steps = config.sweep_max_steps;
    sweep.init_seed = config.model.seed;
    const auto report = layer_sweep(model, corpus.split.train, corpus.split.heldout, sweep, eval,
                                    config.eval_topk, progress_logger(log));
    for (const auto& row : report.rows) {
      log << "layer " << row.layer << " step " << report.step << " top-" << row.accuracy.front().topk << " "
          << format_double(row.accuracy.front().rate()) << " heldout_kl " << format_double(row.final_heldout_kl)
          << "\n";
    }
    std::string name = "sweep_step" + std::to_string(report.step);
    if (report.step == 2) name += "_fixed" + std::to_string(report.fixed_layer);
    report_path = out / (name + ".csv");
    csv = report.to_csv();
  } else if (which == "microbench") {
    const auto table = forward_microbench(model, config.bench_cache_lengths, config.bench_widths,
                                          config.bench_trials, config.model.seed);
    const bool has_width1 =
        std::find(config.bench_widths.begin(), config.bench_widths.end(), 1u) != config.bench_widths.end();
    for (const auto& r : table.rows) {
      log << "cache " << r.cache_length << " width " << r.width << " median " << format_double(r.median_seconds)
          << "s";
      if (has_width1) log << " ratio " << format_double(table.width_ratio(r.cache_length, r.width));
      log << "\n";
    }
    report_path = out / "microbench.csv";
    csv = table.to_csv();
  } else {
    const auto bundle = load_transfer(config, paths, corpus, model);
    const auto report = mask_ablation(model, bundle, corpus.split.heldout, eval, config.eval_topk);
    print_accuracy(log, report.accuracy, config.eval_topk.front());
    log << "step1_bit_identical=" << (report.step1_bit_identical ? "true" : "false") << "\n";
    report_path = out / "ablation_transfer.csv";
    csv = report.to_csv();
  }
  write_report(report_path, csv);
  write_config_copy(report_path, config);
  log << "wrote " << report_path.string() << "\n";
  return kExitOk;
}

}  // namespace htd
