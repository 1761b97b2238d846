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

#include "htd/model/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "htd/numerics/adam.hpp"
#include "htd/numerics/error.hpp"
#include "htd/numerics/ops.hpp"

namespace htd {
namespace {

double schedule(const PretrainHyper& h, std::size_t step, std::size_t total) {
  if (h.warmup_steps > 0 && step < h.warmup_steps) return static_cast<double>(step + 1) / h.warmup_steps;
  if (total <= h.warmup_steps) return 1.0;
  const double progress = static_cast<double>(step - h.warmup_steps) / static_cast<double>(total - h.warmup_steps);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return h.min_lr_ratio + (1.0 - h.min_lr_ratio) * cosine;
}

void clip_gradients(std::vector<Tensor<float>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("pretrain: non-finite gradient norm");
  if (max_norm <= 0 || norm <= max_norm) return;
  const auto factor = static_cast<float>(max_norm / norm);
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (float& g : p.mutable_grad()) g *= factor;
  }
}

}  // namespace

PretrainReport pretrain_base(Transformer<float>& model, std::span<const std::int32_t> train_tokens,
                             const PretrainHyper& hyper, const StepLogger& log) {
  if (train_tokens.size() < hyper.min_corpus_bytes) {
    throw UsageError("pretrain: corpus has " + std::to_string(train_tokens.size()) + " tokens, need at least " +
                     std::to_string(hyper.min_corpus_bytes));
  }
  if (hyper.context == 0 || hyper.batch == 0 || hyper.epochs == 0) throw UsageError("pretrain: empty schedule");
  if (hyper.context > model.config().max_positions) throw UsageError("pretrain: context exceeds max_positions");
  const std::size_t ctx = hyper.context;
  const std::size_t windows = (train_tokens.size() - 1) / ctx;
  const std::size_t per_epoch = windows / hyper.batch;
  if (per_epoch == 0) throw UsageError("pretrain: corpus shorter than one batch");
  std::size_t total = per_epoch * hyper.epochs;
  if (hyper.max_steps > 0) total = std::min(total, hyper.max_steps);

  auto named = model.mutable_weights().named();
  std::vector<Tensor<float>> params;
  for (auto& [name, t] : named) params.push_back(t);
  for (auto& p : params) p.set_requires_grad(true);
  AdamOptimizer<float> opt(params, AdamHyper{hyper.lr, 0.9, 0.999, 1e-8});

  const AttnMask mask = AttnMask::causal(ctx);
  const auto positions = iota_positions(ctx);
  PretrainReport report;
  std::vector<std::size_t> order(windows);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < hyper.epochs && step < total; ++epoch) {
    for (std::size_t i = 0; i < windows; ++i) order[i] = i;
    std::mt19937_64 rng(hyper.seed * 1000003ULL + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < per_epoch && step < total; ++b, ++step) {
      opt.zero_grad();
      double batch_loss = 0;
      for (std::size_t s = 0; s < hyper.batch; ++s) {
        const std::size_t start = order[b * hyper.batch + s] * ctx;
        auto input = train_tokens.subspan(start, ctx);
        auto target = train_tokens.subspan(start + 1, ctx);
        Tensor<float> h = model.embed(input, positions);
        auto run = model.run_layers(h, 0, model.config().n_layers, positions, mask);
        Tensor<float> ce = cross_entropy_sum(model.logits(run.hidden), target);
        batch_loss += ce.item();
        backward(scale(ce, 1.0f / static_cast<float>(ctx * hyper.batch)));
      }
      batch_loss /= static_cast<double>(ctx * hyper.batch);
      if (!std::isfinite(batch_loss)) throw NumericError("pretrain: loss diverged at step " + std::to_string(step));
      if (step == 0) report.initial_loss = batch_loss;
      report.batch_losses.push_back(batch_loss);
      report.tokens_seen += ctx * hyper.batch;
      clip_gradients(params, hyper.grad_clip);
      opt.step(schedule(hyper, step, total));
      if (log) log(step, total, batch_loss);
    }
  }
  for (auto& p : params) {
    p.zero_grad();
    p.set_requires_grad(false);
  }
  report.steps = step;
  const std::size_t tail = std::min<std::size_t>(10, report.batch_losses.size());
  double acc = 0;
  for (std::size_t i = report.batch_losses.size() - tail; i < report.batch_losses.size(); ++i) {
    acc += report.batch_losses[i];
  }
  report.final_loss = tail ? acc / static_cast<double>(tail) : 0.0;
  return report;
}

double evaluate_loss(const Transformer<float>& model, std::span<const std::int32_t> tokens, std::size_t context,
                     std::size_t max_windows) {
  if (tokens.size() < 2) throw UsageError("evaluate_loss: need at least two tokens");
  context = std::min(context, tokens.size() - 1);
  const std::size_t windows = std::min(max_windows, (tokens.size() - 1) / context);
  double total = 0;
  for (std::size_t w = 0; w < windows; ++w) {
    auto input = tokens.subspan(w * context, context);
    auto target = tokens.subspan(w * context + 1, context);
    auto out = model.forward_causal(input);
    total += cross_entropy_sum(out.logits, target).item();
  }
  return total / static_cast<double>(windows * context);
}

}  // namespace htd
