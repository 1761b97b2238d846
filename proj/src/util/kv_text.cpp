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

#include "htd/util/kv_text.hpp"

#include <charconv>
#include <sstream>

#include "htd/numerics/error.hpp"

namespace htd {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& text, const std::string& context) {
  Int value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw UsageError(context + ": key '" + key + "' expects an integer, got '" + text + "'");
  }
  return value;
}

}  // namespace

KvPairs parse_kv_text(const std::string& text) {
  KvPairs out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw UsageError("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    bool replaced = false;
    for (auto& [k, v] : out) {
      if (k == key) {
        v = value;
        replaced = true;
      }
    }
    if (!replaced) out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string join_sizes(const std::vector<std::size_t>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(values[i]);
  }
  return out;
}

bool KvReader::has(const std::string& key) const {
  for (const auto& [k, v] : pairs_) {
    if (k == key) return true;
  }
  return false;
}

const std::string* KvReader::find(const std::string& key) {
  for (const auto& [k, v] : pairs_) {
    if (k == key) {
      used_.insert(key);
      return &v;
    }
  }
  return nullptr;
}

void KvReader::read(const std::string& key, std::size_t& out) {
  if (const auto* v = find(key)) out = parse_int<std::size_t>(key, *v, context_);
}

void KvReader::read(const std::string& key, std::int64_t& out) {
  if (const auto* v = find(key)) out = parse_int<std::int64_t>(key, *v, context_);
}

void KvReader::read(const std::string& key, double& out) {
  const auto* v = find(key);
  if (!v) return;
  const char* end = v->data() + v->size();
  auto [ptr, ec] = std::from_chars(v->data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw UsageError(context_ + ": key '" + key + "' expects a number, got '" + *v + "'");
  }
}

void KvReader::read(const std::string& key, bool& out) {
  const auto* v = find(key);
  if (!v) return;
  if (*v == "true" || *v == "1") {
    out = true;
  } else if (*v == "false" || *v == "0") {
    out = false;
  } else {
    throw UsageError(context_ + ": key '" + key + "' expects true/false, got '" + *v + "'");
  }
}

void KvReader::read(const std::string& key, std::string& out) {
  if (const auto* v = find(key)) out = *v;
}

void KvReader::read(const std::string& key, std::vector<std::size_t>& out) {
  const auto* v = find(key);
  if (!v) return;
  out.clear();
  std::istringstream in(*v);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(parse_int<std::size_t>(key, item, context_));
  }
}

void KvReader::finish() const {
  for (const auto& [k, v] : pairs_) {
    if (!used_.count(k)) throw UsageError(context_ + ": unknown key '" + k + "'");
  }
}

}  // namespace htd
