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

#include "htd/model/distill.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "htd/numerics/adam.hpp"
#include "htd/numerics/error.hpp"
#include "htd/util/kv_text.hpp"

namespace htd {

template <typename T>
TeacherPass<T> teacher_pass(const Transformer<T>& model, std::span<const std::int32_t> window,
                            const std::vector<std::size_t>& tap_layers) {
  TeacherPass<T> t{model.make_cache(), {}, {}, {}};
  const auto positions = iota_positions(window.size());
  LayerRunOptions options;
  options.taps = tap_layers;
  auto out = model.forward(window, positions, AttnMask::causal(window.size()), &t.cache, options);
  t.taps = std::move(out.taps);
  t.hidden = out.hidden;
  t.probs = softmax_rows(out.logits);
  return t;
}

std::vector<std::span<const std::int32_t>> token_windows(std::span<const std::int32_t> tokens,
                                                         std::size_t context) {
  if (context == 0) throw UsageError("token_windows: context must be positive");
  std::vector<std::span<const std::int32_t>> out;
  for (std::size_t start = 0; start + context <= tokens.size(); start += context) {
    out.push_back(tokens.subspan(start, context));
  }
  return out;
}

template <typename T>
double heldout_loss(const Transformer<T>& model, std::span<const std::int32_t> tokens, std::size_t context,
                    std::size_t max_windows, const std::vector<std::size_t>& tap_layers,
                    const std::function<Tensor<T>(const TeacherPass<T>&)>& loss) {
  const auto windows = token_windows(tokens, context);
  const std::size_t count = std::min(windows.size(), max_windows);
  if (count == 0) throw UsageError("heldout_loss: no complete window");
  double total = 0;
  for (std::size_t w = 0; w < count; ++w) {
    total += static_cast<double>(loss(teacher_pass(model, windows[w], tap_layers)).item());
  }
  return total / static_cast<double>(count);
}

template <typename T>
DistillReport distill_train(const Transformer<T>& model, std::span<const std::int32_t> train_tokens,
                            std::span<const std::int32_t> heldout_tokens, const DistillHyper& hyper,
                            std::vector<DistillTask<T>>& tasks, const std::vector<std::size_t>& tap_layers,
                            std::size_t min_context, const TrainLogger& log) {
  if (hyper.batch == 0 || hyper.epochs == 0) throw UsageError("distill: empty schedule");
  if (hyper.context < min_context) {
    throw UsageError("distill: context " + std::to_string(hyper.context) + " shorter than " +
                     std::to_string(min_context));
  }
  if (hyper.context > model.config().max_positions) throw UsageError("distill: context exceeds max_positions");
  const auto windows = token_windows(train_tokens, hyper.context);
  const std::size_t per_epoch = windows.size() / hyper.batch;
  if (per_epoch == 0) throw UsageError("distill: corpus shorter than one batch");
  std::size_t total = per_epoch * hyper.epochs;
  if (hyper.max_steps > 0) total = std::min(total, hyper.max_steps);

  DistillReport report;
  for (const auto& task : tasks) {
    DistillTaskReport r;
    r.name = task.name;
    r.initial_heldout_kl =
        heldout_loss<T>(model, heldout_tokens, hyper.context, hyper.eval_windows, tap_layers, task.loss);
    report.tasks.push_back(std::move(r));
  }

  std::vector<AdamOptimizer<T>> optimizers;
  for (auto& task : tasks) {
    for (auto& p : task.params) p.set_requires_grad(true);
    optimizers.emplace_back(task.params, AdamHyper{hyper.lr, 0.9, 0.999, 1e-8});
  }

  std::vector<std::size_t> order(windows.size());
  std::size_t update = 0;
  for (std::size_t epoch = 0; epoch < hyper.epochs && update < total; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(hyper.seed * 1000003ULL + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < per_epoch && update < total; ++b, ++update) {
      for (auto& opt : optimizers) opt.zero_grad();
      std::vector<double> losses(tasks.size(), 0.0);
      for (std::size_t w = 0; w < hyper.batch; ++w) {
        const auto teacher = teacher_pass(model, windows[order[b * hyper.batch + w]], tap_layers);
        for (std::size_t j = 0; j < tasks.size(); ++j) {
          Tensor<T> loss = tasks[j].loss(teacher);
          losses[j] += static_cast<double>(loss.item());
          backward(scale(loss, static_cast<T>(1.0 / static_cast<double>(hyper.batch))));
        }
        ++report.windows;
      }
      std::ostringstream msg;
      for (std::size_t j = 0; j < tasks.size(); ++j) {
        const double mean = losses[j] / static_cast<double>(hyper.batch);
        if (!std::isfinite(mean)) {
          throw NumericError("distill: " + tasks[j].name + " loss diverged at update " + std::to_string(update));
        }
        report.tasks[j].batch_losses.push_back(mean);
        optimizers[j].step();
        msg << (j ? " " : "") << tasks[j].name << "=" << format_double(mean);
      }
      if (log) log(update, total, msg.str());
    }
  }
  report.updates = update;
  for (auto& task : tasks) {
    for (auto& p : task.params) {
      p.zero_grad();
      p.set_requires_grad(false);
    }
  }
  for (std::size_t j = 0; j < tasks.size(); ++j) {
    report.tasks[j].final_heldout_kl =
        heldout_loss<T>(model, heldout_tokens, hyper.context, hyper.eval_windows, tap_layers, tasks[j].loss);
  }
  return report;
}

#define HTD_INSTANTIATE(T)                                                                                         \
  template TeacherPass<T> teacher_pass(const Transformer<T>&, std::span<const std::int32_t>,                       \
                                       const std::vector<std::size_t>&);                                           \
  template double heldout_loss(const Transformer<T>&, std::span<const std::int32_t>, std::size_t, std::size_t,     \
                               const std::vector<std::size_t>&,                                                    \
                               const std::function<Tensor<T>(const TeacherPass<T>&)>&);                            \
  template DistillReport distill_train(const Transformer<T>&, std::span<const std::int32_t>,                       \
                                       std::span<const std::int32_t>, const DistillHyper&,                         \
                                       std::vector<DistillTask<T>>&, const std::vector<std::size_t>&, std::size_t, \
                                       const TrainLogger&);

HTD_INSTANTIATE(float)
HTD_INSTANTIATE(double)
#undef HTD_INSTANTIATE

}  // namespace htd
