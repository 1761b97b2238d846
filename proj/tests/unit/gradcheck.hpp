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

// gtest assertion over the finite-difference oracle.

#include <gtest/gtest.h>

#include "finite_difference.hpp"

namespace htd::testing {

inline void expect_gradients_match(std::vector<Tensor<double>> inputs,
                                   const std::function<Tensor<double>()>& loss_fn,
                                   double tolerance = 1e-3) {
  auto r = gradient_check(std::move(inputs), loss_fn);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LE(r.max_rel_error, tolerance);
}

}  // namespace htd::testing
