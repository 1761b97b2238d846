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

// "HTC1" tensor container shared by every artifact in the project.
//
//   magic "HTC1" | u32 count | count x record
//   record: u32 name_len | name | u32 rank | rank x u64 dim | u8 dtype | payload
//
// All integers and payloads are little-endian. dtype 0 is f32; dtype 1 is
// raw bytes, used for key=value text metadata records.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "htd/numerics/tensor.hpp"

namespace htd {

enum class DType : std::uint8_t { kF32 = 0, kBytes = 1 };

struct CheckpointRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  DType dtype = DType::kF32;
  std::vector<float> f32;
  std::string bytes;
};

class Checkpoint {
 public:
  void add_tensor(const std::string& name, const Shape& shape, std::span<const float> values);

  template <typename T>
  void add_tensor(const std::string& name, const Tensor<T>& t) {
    std::vector<float> v(t.values().begin(), t.values().end());
    add_tensor(name, t.shape(), v);
  }

  void add_text(const std::string& name, const std::string& text);

  bool contains(const std::string& name) const;
  const CheckpointRecord& get(const std::string& name) const;

  /// Loads a f32 record as Tensor<T>, checking its shape.
  template <typename T>
  Tensor<T> tensor(const std::string& name, const Shape& expected) const {
    const auto& rec = get(name);
    check_tensor(rec, expected);
    return Tensor<T>(expected, std::vector<T>(rec.f32.begin(), rec.f32.end()));
  }

  std::string text(const std::string& name) const;

  const std::vector<CheckpointRecord>& records() const { return records_; }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  void add(CheckpointRecord rec);
  static void check_tensor(const CheckpointRecord& rec, const Shape& expected);

  std::vector<CheckpointRecord> records_;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::uint64_t file_hash(const std::filesystem::path& path);
std::string hash_hex(std::uint64_t hash);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename, so readers never see partial files.
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace htd
