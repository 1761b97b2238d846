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

#include <cstddef>
#include <cstdint>
#include <string>

namespace htd {

// Byte-level vocabulary: raw bytes 0..255 plus three control tokens.
inline constexpr std::int32_t kBosToken = 256;
inline constexpr std::int32_t kEosToken = 257;
inline constexpr std::int32_t kPadToken = 258;
inline constexpr std::size_t kByteVocab = 259;

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t d_model = 256;
  std::size_t n_heads = 8;
  std::size_t vocab_size = kByteVocab;
  std::size_t max_positions = 512;
  std::size_t ffn_dim = 512;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  std::uint64_t seed = 0;

  /// Throws UsageError describing the first violated constraint.
  void validate() const;

  std::size_t head_dim() const { return d_model / n_heads; }

  /// Closed-form trainable parameter count.
  std::size_t parameter_count() const;

  /// key=value lines; `from_text` rejects unknown keys.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace htd
