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

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "htd/numerics/error.hpp"

namespace htd {

/// Per-layer post-rotary keys and values of committed rows.
///
/// Layers fill independently during a segmented forward, so lengths are
/// tracked per layer; a session is consistent when all lengths agree.
template <typename T>
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t n_layers, std::size_t d_model, std::size_t capacity)
      : d_(d_model), capacity_(capacity), layers_(n_layers) {
    for (auto& l : layers_) {
      l.keys.reserve(capacity * d_model);
      l.values.reserve(capacity * d_model);
      l.positions.reserve(capacity);
    }
  }

  std::size_t n_layers() const { return layers_.size(); }
  std::size_t d_model() const { return d_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t length(std::size_t layer) const { return layers_.at(layer).positions.size(); }

  /// Common length across layers; throws if a forward left them uneven.
  std::size_t length() const {
    if (layers_.empty()) return 0;
    const std::size_t n = length(0);
    for (std::size_t l = 1; l < layers_.size(); ++l) {
      if (length(l) != n) throw UsageError("kv cache layers have uneven lengths");
    }
    return n;
  }

  std::span<const T> keys(std::size_t layer) const { return layers_.at(layer).keys; }
  std::span<const T> values(std::size_t layer) const { return layers_.at(layer).values; }
  std::span<const std::int32_t> positions(std::size_t layer) const { return layers_.at(layer).positions; }

  void append(std::size_t layer, std::span<const T> keys, std::span<const T> values,
              std::span<const std::int32_t> positions) {
    auto& l = layers_.at(layer);
    const std::size_t n = positions.size();
    if (keys.size() != n * d_ || values.size() != n * d_) throw ShapeError("kv cache append: row size mismatch");
    if (l.positions.size() + n > capacity_) {
      throw CapacityError("kv cache overflow: " + std::to_string(l.positions.size() + n) + " entries > capacity " +
                          std::to_string(capacity_));
    }
    l.keys.insert(l.keys.end(), keys.begin(), keys.end());
    l.values.insert(l.values.end(), values.begin(), values.end());
    l.positions.insert(l.positions.end(), positions.begin(), positions.end());
  }

  /// Keeps only the listed entries (strictly increasing indices) in every
  /// layer, shifting them down. Retained entries keep their positions.
  void compact(std::span<const std::size_t> keep) {
    for (std::size_t i = 1; i < keep.size(); ++i) {
      if (keep[i] <= keep[i - 1]) throw UsageError("kv cache compact: indices must be strictly increasing");
    }
    for (auto& l : layers_) {
      if (!keep.empty() && keep.back() >= l.positions.size()) {
        throw UsageError("kv cache compact: index out of range");
      }
      for (std::size_t dst = 0; dst < keep.size(); ++dst) {
        const std::size_t src = keep[dst];
        if (src != dst) {
          std::copy_n(l.keys.begin() + static_cast<std::ptrdiff_t>(src * d_), d_,
                      l.keys.begin() + static_cast<std::ptrdiff_t>(dst * d_));
          std::copy_n(l.values.begin() + static_cast<std::ptrdiff_t>(src * d_), d_,
                      l.values.begin() + static_cast<std::ptrdiff_t>(dst * d_));
          l.positions[dst] = l.positions[src];
        }
      }
      l.keys.resize(keep.size() * d_);
      l.values.resize(keep.size() * d_);
      l.positions.resize(keep.size());
    }
  }

  void truncate(std::size_t n) {
    for (auto& l : layers_) {
      if (n < l.positions.size()) {
        l.keys.resize(n * d_);
        l.values.resize(n * d_);
        l.positions.resize(n);
      }
    }
  }

  void clear() { truncate(0); }

 private:
  struct Layer {
    std::vector<T> keys;
    std::vector<T> values;
    std::vector<std::int32_t> positions;
  };

  std::size_t d_ = 0;
  std::size_t capacity_ = 0;
  std::vector<Layer> layers_;
};

}  // namespace htd
