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
#include <vector>

namespace htd {

/// Boolean attention mask: rows are queries, columns are keys.
///
/// Key columns are laid out as [cached entries | rows of the current
/// forward]; a query row r of the current forward is key column
/// `prefix() + r`. Training and tree masks are irregular, so there is no
/// triangular shortcut.
class AttnMask {
 public:
  AttnMask() = default;
  AttnMask(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), bits_(rows * cols, 0) {}

  /// Plain causal mask for `rows` new tokens after `prefix` cached entries.
  static AttnMask causal(std::size_t rows, std::size_t prefix = 0);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  /// Number of key columns that precede the current rows.
  std::size_t prefix() const { return cols_ - rows_; }

  bool allowed(std::size_t row, std::size_t col) const { return bits_[row * cols_ + col] != 0; }
  /// Raw 0/1 bytes of one row, `cols()` long.
  const std::uint8_t* row_bits(std::size_t row) const { return bits_.data() + row * cols_; }
  void allow(std::size_t row, std::size_t col, bool on = true) { bits_[row * cols_ + col] = on ? 1 : 0; }
  void allow_range(std::size_t row, std::size_t begin, std::size_t end);

  /// Permitted key columns of a row, ascending.
  std::vector<std::size_t> permitted(std::size_t row) const;

  /// Top-left block: first `rows` query rows over the prefix plus those rows.
  AttnMask leading(std::size_t rows) const;

  /// Throws UsageError unless every row permits itself.
  void validate() const;

  bool operator==(const AttnMask&) const = default;

  std::string to_string() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

}  // namespace htd
