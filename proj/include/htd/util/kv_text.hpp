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

// Flat key=value text used for configs and checkpoint metadata records.

#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace htd {

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "64-bit size_t expected");

using KvPairs = std::vector<std::pair<std::string, std::string>>;

/// One `key=value` per line; blank lines and '#' comments are skipped.
/// Keys and values are trimmed. Duplicate keys: the last one wins.
KvPairs parse_kv_text(const std::string& text);

/// Shortest decimal string that round-trips the double.
std::string format_double(double v);

std::string join_sizes(const std::vector<std::size_t>& values);

/// Typed lookup over parsed pairs that remembers which keys were consumed.
class KvReader {
 public:
  KvReader(KvPairs pairs, std::string context) : pairs_(std::move(pairs)), context_(std::move(context)) {}

  bool has(const std::string& key) const;

  // Leave `out` untouched when the key is absent.
  void read(const std::string& key, std::size_t& out);
  void read(const std::string& key, std::int64_t& out);
  void read(const std::string& key, double& out);
  void read(const std::string& key, bool& out);
  void read(const std::string& key, std::string& out);
  void read(const std::string& key, std::vector<std::size_t>& out);

  /// Throws UsageError naming the first key that was never read.
  void finish() const;

 private:
  const std::string* find(const std::string& key);

  KvPairs pairs_;
  std::string context_;
  std::set<std::string> used_;
};

}  // namespace htd
