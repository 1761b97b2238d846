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

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "htd/numerics/tensor.hpp"

namespace htd {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers for a list of parameters, plus the shared step counter.
template <typename T>
struct AdamState {
  AdamHyper hyper;
  std::vector<std::vector<T>> first;
  std::vector<std::vector<T>> second;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update. `grads[i]` may be empty (treated as zero
/// gradient); parameter and gradient lengths must otherwise match the
/// moment buffers, which are created on the first call.
template <typename T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads,
               AdamState<T>& state, double lr_scale = 1.0) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: params/grads count mismatch");
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.size(), T(0));
      state.second.emplace_back(p.size(), T(0));
    }
  }
  if (state.first.size() != params.size()) throw ShapeError("adam_step: state/params count mismatch");
  ++state.step;
  const auto& h = state.hyper;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  const double lr = h.lr * lr_scale;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto g = grads[i];
    auto& m = state.first[i];
    auto& v = state.second[i];
    if (m.size() != p.size() || (!g.empty() && g.size() != p.size())) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
      const double mj = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
      const double vj = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / bc1) / (std::sqrt(vj / bc2) + h.eps);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - update);
    }
  }
}

/// Adam over a fixed list of leaf tensors, reading their grad buffers.
template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor<T>> params, AdamHyper hyper) : params_(std::move(params)) {
    state_.hyper = hyper;
  }

  void step(double lr_scale = 1.0) {
    std::vector<std::span<T>> p;
    std::vector<std::span<const T>> g;
    for (auto& t : params_) {
      p.push_back(t.mutable_values());
      g.push_back(t.grad());
    }
    adam_step<T>(p, g, state_, lr_scale);
  }

  void zero_grad() {
    for (auto& t : params_) t.zero_grad();
  }

  const AdamState<T>& state() const { return state_; }
  std::vector<Tensor<T>>& params() { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamState<T> state_;
};

}  // namespace htd
