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

#include "htd/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "htd/numerics/error.hpp"

namespace htd {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace {

constexpr char kMagic[4] = {'H', 'T', 'C', '1'};

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  template <typename U>
  U get() {
    U v;
    get_bytes(&v, sizeof(U));
    return v;
  }
  void get_bytes(void* dst, std::size_t n) {
    if (n > in_.size() - pos_) throw ArtifactError("checkpoint truncated at byte " + std::to_string(pos_));
    std::memcpy(dst, in_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::add(CheckpointRecord rec) {
  if (contains(rec.name)) throw UsageError("checkpoint: duplicate record '" + rec.name + "'");
  records_.push_back(std::move(rec));
}

void Checkpoint::add_tensor(const std::string& name, const Shape& shape, std::span<const float> values) {
  if (shape_numel(shape) != values.size()) throw ShapeError("checkpoint: data/shape mismatch for " + name);
  CheckpointRecord rec;
  rec.name = name;
  rec.dims.assign(shape.begin(), shape.end());
  rec.dtype = DType::kF32;
  rec.f32.assign(values.begin(), values.end());
  add(std::move(rec));
}

void Checkpoint::add_text(const std::string& name, const std::string& text) {
  CheckpointRecord rec;
  rec.name = name;
  rec.dims = {text.size()};
  rec.dtype = DType::kBytes;
  rec.bytes = text;
  add(std::move(rec));
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& r : records_) {
    if (r.name == name) return true;
  }
  return false;
}

const CheckpointRecord& Checkpoint::get(const std::string& name) const {
  for (const auto& r : records_) {
    if (r.name == name) return r;
  }
  throw ArtifactError("checkpoint has no record named '" + name + "'");
}

void Checkpoint::check_tensor(const CheckpointRecord& rec, const Shape& expected) {
  if (rec.dtype != DType::kF32) throw ArtifactError("record '" + rec.name + "' is not a f32 tensor");
  if (!std::equal(rec.dims.begin(), rec.dims.end(), expected.begin(), expected.end())) {
    std::vector<std::size_t> got(rec.dims.begin(), rec.dims.end());
    throw ArtifactError("record '" + rec.name + "' has shape " + shape_string(got) + ", expected " +
                        shape_string(expected));
  }
}

std::string Checkpoint::text(const std::string& name) const {
  const auto& rec = get(name);
  if (rec.dtype != DType::kBytes) throw ArtifactError("record '" + name + "' is not a text record");
  return rec.bytes;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put(static_cast<std::uint32_t>(records_.size()));
  for (const auto& r : records_) {
    w.put(static_cast<std::uint32_t>(r.name.size()));
    w.put_bytes(r.name.data(), r.name.size());
    w.put(static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) w.put(static_cast<std::uint64_t>(d));
    w.put(static_cast<std::uint8_t>(r.dtype));
    if (r.dtype == DType::kF32) {
      w.put_bytes(r.f32.data(), r.f32.size() * sizeof(float));
    } else {
      w.put_bytes(r.bytes.data(), r.bytes.size());
    }
  }
  return std::move(w.out);
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw ArtifactError("not an HTC1 checkpoint (bad magic)");
  Checkpoint ck;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord rec;
    rec.name.resize(r.get<std::uint32_t>());
    r.get_bytes(rec.name.data(), rec.name.size());
    const auto rank = r.get<std::uint32_t>();
    std::uint64_t numel = 1;
    for (std::uint32_t j = 0; j < rank; ++j) {
      rec.dims.push_back(r.get<std::uint64_t>());
      numel *= rec.dims.back();
    }
    const auto dtype = r.get<std::uint8_t>();
    if (dtype == 0) {
      rec.dtype = DType::kF32;
      if (numel > bytes.size()) throw ArtifactError("checkpoint record '" + rec.name + "' is truncated");
      rec.f32.resize(numel);
      r.get_bytes(rec.f32.data(), numel * sizeof(float));
    } else if (dtype == 1) {
      rec.dtype = DType::kBytes;
      if (numel > bytes.size()) throw ArtifactError("checkpoint record '" + rec.name + "' is truncated");
      rec.bytes.resize(numel);
      r.get_bytes(rec.bytes.data(), numel);
    } else {
      throw ArtifactError("checkpoint record '" + rec.name + "' has unknown dtype " + std::to_string(dtype));
    }
    ck.add(std::move(rec));
  }
  if (!r.done()) throw ArtifactError("checkpoint has trailing bytes");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t file_hash(const std::filesystem::path& path) { return fnv1a64(read_file_bytes(path)); }

std::string hash_hex(std::uint64_t hash) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << hash;
  return out.str();
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArtifactError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace htd
