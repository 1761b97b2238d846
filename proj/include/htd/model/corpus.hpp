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

// Plain-text corpus ingestion for the byte-level vocabulary.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace htd {

std::vector<std::int32_t> encode_bytes(std::string_view text);
/// Inverse of encode_bytes; control tokens are dropped.
std::string decode_bytes(std::span<const std::int32_t> tokens);

struct Corpus {
  std::vector<std::int32_t> tokens;
  std::vector<std::filesystem::path> files;
  std::size_t bytes = 0;
};

/// Reads `root` (a file, or every *.txt below a directory in sorted path
/// order), byte-tokenizes each file and appends EOS after it.
Corpus load_corpus(const std::filesystem::path& root);

struct CorpusSplit {
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> heldout;
};

/// Contiguous split: the trailing `heldout_fraction` of tokens is held out.
CorpusSplit split_corpus(std::span<const std::int32_t> tokens, double heldout_fraction = 0.05);

}  // namespace htd
