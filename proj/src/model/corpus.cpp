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

#include "htd/model/corpus.hpp"

#include <algorithm>

#include "htd/model/checkpoint.hpp"
#include "htd/model/config.hpp"
#include "htd/numerics/error.hpp"

namespace htd {

std::vector<std::int32_t> encode_bytes(std::string_view text) {
  std::vector<std::int32_t> out(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<unsigned char>(text[i]);
  return out;
}

std::string decode_bytes(std::span<const std::int32_t> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (auto t : tokens) {
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
  }
  return out;
}

Corpus load_corpus(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  Corpus c;
  if (fs::is_regular_file(root)) {
    c.files.push_back(root);
  } else if (fs::is_directory(root)) {
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
      if (entry.is_regular_file() && entry.path().extension() == ".txt") c.files.push_back(entry.path());
    }
    std::sort(c.files.begin(), c.files.end());
  } else {
    throw ArtifactError("corpus path not found: " + root.string());
  }
  if (c.files.empty()) throw ArtifactError("no .txt files under " + root.string());
  for (const auto& f : c.files) {
    auto bytes = read_file_bytes(f);
    c.bytes += bytes.size();
    c.tokens.insert(c.tokens.end(), bytes.begin(), bytes.end());
    c.tokens.push_back(kEosToken);
  }
  return c;
}

CorpusSplit split_corpus(std::span<const std::int32_t> tokens, double heldout_fraction) {
  if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) {
    throw UsageError("split_corpus: held-out fraction must be in (0, 1)");
  }
  const auto cut = tokens.size() - static_cast<std::size_t>(static_cast<double>(tokens.size()) * heldout_fraction);
  CorpusSplit s;
  s.train.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(cut));
  s.heldout.assign(tokens.begin() + static_cast<std::ptrdiff_t>(cut), tokens.end());
  return s;
}

}  // namespace htd
