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

#include "htd/model/config.hpp"

#include <sstream>

#include "htd/numerics/error.hpp"
#include "htd/util/kv_text.hpp"

namespace htd {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw UsageError("model config: " + what); };
  if (n_layers == 0) fail("n_layers must be positive");
  if (d_model == 0 || n_heads == 0) fail("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (head_dim() % 2 != 0) fail("head dimension must be even for rotary encoding");
  if (vocab_size < kByteVocab) fail("vocab_size must cover the byte vocabulary (259)");
  if (max_positions == 0) fail("max_positions must be positive");
  if (ffn_dim == 0) fail("ffn_dim must be positive");
  if (!(rope_theta > 0) || !(norm_eps > 0)) fail("rope_theta and norm_eps must be positive");
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t d = d_model, f = ffn_dim, v = vocab_size;
  const std::size_t per_layer = 2 * d + 4 * d * d + 3 * d * f;
  return v * d + n_layers * per_layer + d + d * v;
}

std::string ModelConfig::to_text() const {
  std::ostringstream out;
  out << "n_layers=" << n_layers << "\n"
      << "d_model=" << d_model << "\n"
      << "n_heads=" << n_heads << "\n"
      << "vocab_size=" << vocab_size << "\n"
      << "max_positions=" << max_positions << "\n"
      << "ffn_dim=" << ffn_dim << "\n"
      << "rope_theta=" << format_double(rope_theta) << "\n"
      << "norm_eps=" << format_double(norm_eps) << "\n"
      << "seed=" << seed << "\n";
  return out.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  KvReader r(parse_kv_text(text), "model config");
  r.read("n_layers", c.n_layers);
  r.read("d_model", c.d_model);
  r.read("n_heads", c.n_heads);
  r.read("vocab_size", c.vocab_size);
  r.read("max_positions", c.max_positions);
  r.read("ffn_dim", c.ffn_dim);
  r.read("rope_theta", c.rope_theta);
  r.read("norm_eps", c.norm_eps);
  r.read("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

}  // namespace htd
