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

#include "htd/numerics/attn_mask.hpp"

#include <algorithm>

#include "htd/numerics/error.hpp"

namespace htd {

AttnMask AttnMask::causal(std::size_t rows, std::size_t prefix) {
  AttnMask mask(rows, prefix + rows);
  for (std::size_t r = 0; r < rows; ++r) mask.allow_range(r, 0, prefix + r + 1);
  return mask;
}

void AttnMask::allow_range(std::size_t row, std::size_t begin, std::size_t end) {
  std::fill(bits_.begin() + static_cast<std::ptrdiff_t>(row * cols_ + begin),
            bits_.begin() + static_cast<std::ptrdiff_t>(row * cols_ + end), std::uint8_t{1});
}

std::vector<std::size_t> AttnMask::permitted(std::size_t row) const {
  std::vector<std::size_t> out;
  const std::uint8_t* r = bits_.data() + row * cols_;
  for (std::size_t c = 0; c < cols_; ++c) {
    if (r[c]) out.push_back(c);
  }
  return out;
}

AttnMask AttnMask::leading(std::size_t rows) const {
  if (rows > rows_) throw UsageError("leading(): more rows than the mask has");
  AttnMask out(rows, prefix() + rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(bits_.begin() + static_cast<std::ptrdiff_t>(r * cols_), out.cols_,
                out.bits_.begin() + static_cast<std::ptrdiff_t>(r * out.cols_));
  }
  return out;
}

void AttnMask::validate() const {
  if (cols_ < rows_) throw UsageError("attention mask has fewer key columns than query rows");
  for (std::size_t r = 0; r < rows_; ++r) {
    if (!allowed(r, prefix() + r)) {
      throw UsageError("attention mask row " + std::to_string(r) + " does not permit itself");
    }
  }
}

std::string AttnMask::to_string() const {
  std::string s;
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < cols_; ++c) s.push_back(allowed(r, c) ? '1' : '.');
    s.push_back('\n');
  }
  return s;
}

}  // namespace htd
