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

#include "htd/cli/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <cstring>
#include <sstream>

#include "htd/model/checkpoint.hpp"
#include "htd/numerics/error.hpp"
#include "htd/treedec/treedec.hpp"
#include "htd/util/kv_text.hpp"

namespace htd {
namespace {

enum Group : unsigned { kBase = 1, kTransfer = 2, kHeads = 4, kOther = 8 };

template <typename Config, typename Visitor>
void visit(Config& c, Visitor&& v) {
  v("n_layers", c.model.n_layers, kBase);
  v("d_model", c.model.d_model, kBase);
  v("n_heads", c.model.n_heads, kBase);
  v("vocab_size", c.model.vocab_size, kBase);
  v("max_positions", c.model.max_positions, kBase);
  v("ffn_dim", c.model.ffn_dim, kBase);
  v("rope_theta", c.model.rope_theta, kBase);
  v("norm_eps", c.model.norm_eps, kBase);
  v("seed", c.model.seed, kBase | kTransfer | kHeads);
  v("corpus", c.corpus, kOther);
  v("heldout_fraction", c.heldout_fraction, kBase | kTransfer | kHeads);
  v("pretrain_epochs", c.pretrain.epochs, kBase);
  v("pretrain_context", c.pretrain.context, kBase);
  v("pretrain_batch", c.pretrain.batch, kBase);
  v("pretrain_lr", c.pretrain.lr, kBase);
  v("pretrain_warmup_steps", c.pretrain.warmup_steps, kBase);
  v("pretrain_min_lr_ratio", c.pretrain.min_lr_ratio, kBase);
  v("pretrain_grad_clip", c.pretrain.grad_clip, kBase);
  v("pretrain_max_steps", c.pretrain.max_steps, kBase);
  v("k", c.k, kTransfer | kHeads);
  v("transfer_layers", c.transfer_layers, kTransfer);
  v("mask_mode", c.mask_mode, kOther);
  v("train_mask", c.train_mask, kTransfer);
  v("transfer_bias", c.transfer_bias, kTransfer);
  v("kl_direction", c.kl_direction, kTransfer | kHeads);
  v("train_epochs", c.train_epochs, kTransfer | kHeads);
  v("train_context", c.train_context, kTransfer | kHeads);
  v("train_batch", c.train_batch, kTransfer | kHeads);
  v("train_lr", c.train_lr, kTransfer | kHeads);
  v("train_max_steps", c.train_max_steps, kTransfer | kHeads);
  v("exit_layers", c.exit_layers, kHeads);
  v("tree_spec", c.tree_spec, kOther);
  v("decode_mode", c.decode_mode, kOther);
  v("max_new_tokens", c.max_new_tokens, kOther);
  v("prompt_file", c.prompt_file, kOther);
  v("bench_prompts", c.bench_prompts, kOther);
  v("prompt_min_len", c.prompt_min_len, kOther);
  v("prompt_max_len", c.prompt_max_len, kOther);
  v("eval_sequences", c.eval_sequences, kOther);
  v("eval_splits", c.eval_splits, kOther);
  v("eval_seeds", c.eval_seeds, kOther);
  v("eval_topk", c.eval_topk, kOther);
  v("eval_context", c.eval_context, kOther);
  v("eval_min_split", c.eval_min_split, kOther);
  v("sweep_step", c.sweep_step, kOther);
  v("sweep_layers", c.sweep_layers, kOther);
  v("sweep_fixed_layer", c.sweep_fixed_layer, kOther);
  v("sweep_max_steps", c.sweep_max_steps, kOther);
  v("bench_cache_lengths", c.bench_cache_lengths, kOther);
  v("bench_widths", c.bench_widths, kOther);
  v("bench_trials", c.bench_trials, kOther);
}

std::string format_value(std::size_t v) { return std::to_string(v); }
std::string format_value(double v) { return format_double(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }
std::string format_value(const std::vector<std::size_t>& v) { return join_sizes(v); }

std::string render(const RunConfig& c, unsigned groups) {
  std::ostringstream out;
  visit(c, [&](const char* key, const auto& field, unsigned g) {
    if (g & groups) out << key << "=" << format_value(field) << "\n";
  });
  return out.str();
}

std::string env_name(const char* key) {
  std::string name = kEnvPrefix;
  for (const char* p = key; *p; ++p) name += static_cast<char>(std::toupper(static_cast<unsigned char>(*p)));
  return name;
}

}  // namespace

std::string RunConfig::to_text() const { return render(*this, kBase | kTransfer | kHeads | kOther); }
std::string RunConfig::base_recipe() const { return render(*this, kBase); }
std::string RunConfig::transfer_recipe() const { return render(*this, kTransfer); }
std::string RunConfig::heads_recipe() const { return render(*this, kHeads); }

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig c;
  KvReader reader(parse_kv_text(text), "config");
  visit(c, [&](const char* key, auto& field, unsigned) { reader.read(key, field); });
  reader.finish();
  c.validate();
  return c;
}

void RunConfig::apply_env(const char* const* environ_ptr) {
  if (!environ_ptr) return;
  // Unknown HTD_* variables are rejected like unknown config keys.
  std::vector<std::string> known;
  visit(*this, [&](const char* key, auto&, unsigned) { known.push_back(env_name(key)); });
  KvPairs pairs;
  for (const char* const* e = environ_ptr; *e; ++e) {
    const std::string entry = *e;
    if (entry.rfind(kEnvPrefix, 0) != 0) continue;
    const auto eq = entry.find('=');
    const std::string name = entry.substr(0, eq);
    if (std::find(known.begin(), known.end(), name) == known.end()) {
      throw UsageError("environment: unknown override '" + name + "'");
    }
    pairs.emplace_back(name, eq == std::string::npos ? "" : entry.substr(eq + 1));
  }
  KvReader reader(std::move(pairs), "environment");
  visit(*this, [&](const char* key, auto& field, unsigned) { reader.read(env_name(key), field); });
  validate();
}

void RunConfig::validate() const {
  model.validate();
  auto fail = [](const std::string& what) { throw UsageError("config: " + what); };
  if (k < 1 || k > 4) fail("k must be in [1, 4]");
  if (transfer_layers.size() != k) fail("transfer_layers must list exactly k layers");
  for (std::size_t i = 0; i < transfer_layers.size(); ++i) {
    if (transfer_layers[i] > model.n_layers) fail("transfer layer exceeds n_layers");
    if (i > 0 && transfer_layers[i] <= transfer_layers[i - 1]) fail("transfer_layers must be strictly increasing");
  }
  for (auto l : exit_layers) {
    if (l > model.n_layers) fail("exit layer exceeds n_layers");
  }
  if (mask_mode != "no_masked" && mask_mode != "masked") fail("mask_mode must be no_masked or masked");
  if (train_mask != "standard" && train_mask != "masked") fail("train_mask must be standard or masked");
  if (kl_direction != "teacher_first" && kl_direction != "pseudo_first") {
    fail("kl_direction must be teacher_first or pseudo_first");
  }
  if (!(heldout_fraction > 0 && heldout_fraction < 1)) fail("heldout_fraction must be in (0, 1)");
  if (train_context < 2 || train_context > model.max_positions) fail("train_context out of range");
  if (train_batch == 0) fail("train_batch must be positive");
  if (prompt_min_len == 0 || prompt_min_len > prompt_max_len) fail("prompt length range is empty");
  if (eval_topk.empty()) fail("eval_topk must not be empty");
  if (sweep_step < 1 || sweep_step > 2) fail("sweep_step must be 1 or 2");
  if (eval_min_split == 0 || eval_min_split >= eval_context) fail("eval_min_split must be in [1, eval_context)");
  if (eval_context + k > model.max_positions) fail("eval_context + k exceeds max_positions");
  if (bench_trials == 0) fail("bench_trials must be positive");
  parse_decode_mode(decode_mode);
}

std::uint64_t RunConfig::hash() const {
  const std::string text = to_text();
  return fnv1a64({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace htd
