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

// Greedy tree-attention speculative decoding: candidate trees built from
// draft distributions, flattened under an ancestor mask, verified in one
// forward against the frozen model, with cache rollback to the accepted path.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "htd/heads/heads.hpp"
#include "htd/model/kv_cache.hpp"
#include "htd/model/transformer.hpp"
#include "htd/numerics/attn_mask.hpp"
#include "htd/transfer/transfer.hpp"

namespace htd {

struct TreeNode {
  std::int32_t parent = -1;  // -1 only for the root
  std::size_t depth = 0;
  std::size_t rank = 0;  // which ranked candidate of its depth's distribution
};

/// Node 0 is the root (the last emitted token); the rest are in
/// topological order, sorted by depth and then by rank path.
struct TreeSpec {
  std::vector<TreeNode> nodes{TreeNode{}};

  std::size_t draft_count() const { return nodes.size() - 1; }
  std::size_t max_depth() const;
  /// Rank path from the root, e.g. {0, 1}.
  std::vector<std::size_t> path(std::size_t node) const;
  std::string to_text() const;
};

/// One node per line as a comma-separated rank path ("0", "0,1"); '#'
/// starts a comment. Duplicate paths and orphans are UsageErrors.
TreeSpec parse_tree_spec(std::string_view text);

/// Full tree with `branching[d]` children under every depth-d node.
TreeSpec tree_spec_from_branching(const std::vector<std::size_t>& branching);

/// The (3, 2, 2) tree: 3 + 6 + 12 = 21 draft nodes.
TreeSpec default_tree_spec();

struct DraftTree {
  TreeSpec spec;
  std::vector<std::int32_t> tokens;     // per node; tokens[0] is the root
  std::vector<std::int32_t> positions;  // root position + depth
};

/// Node at depth d with rank r takes the (r+1)-th most probable token of
/// step_dists[d-1] (ties to the lower id).
template <typename T>
DraftTree build_candidates(std::span<const std::vector<T>> step_dists, const TreeSpec& spec, std::int32_t root_token,
                           std::int32_t root_position);

struct FlatTree {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> positions;
  AttnMask mask;  // node rows over [cache | nodes]
};

/// Rows in node order; each row sees the whole cache, its ancestors and itself.
FlatTree flatten_tree(const DraftTree& tree, std::size_t cache_len, std::size_t max_positions);

enum class DecodeMode { kAutoregressive, kTransferTree, kTransferTwoPass, kMedusaTree };

DecodeMode parse_decode_mode(std::string_view text);
std::string to_string(DecodeMode mode);

struct DecodeStats {
  std::size_t forwards = 0;
  std::size_t emitted = 0;
  std::vector<std::size_t> acceptance_histogram;  // [accepted draft count] -> verification rounds
  std::vector<std::size_t> emissions;             // tokens committed by each forward (0 for drafting passes)
  double wall_seconds = 0;
  bool truncated = false;  // stopped early at the context limit

  double tokens_per_forward() const { return forwards ? static_cast<double>(emitted) / forwards : 0.0; }
  /// key=value lines.
  std::string to_records() const;
};

template <typename T>
struct VerifyOutcome {
  std::vector<std::size_t> accepted_nodes;  // root-connected path, root excluded
  std::vector<std::int32_t> accepted_tokens;
  std::int32_t bonus = 0;
  std::vector<std::vector<T>> next_drafts;
  std::size_t forwards = 1;
};

/// Decoding state: a cache holding every committed token except the
/// current root, plus the drafts for the next tree.
template <typename T>
class DecodeSession {
 public:
  DecodeSession(const Transformer<T>& model, DecodeMode mode, TreeSpec spec,
                const TransferBundle<T>* bundle = nullptr, const MedusaHeads<T>* medusa = nullptr);

  /// Prefills the prompt and returns the first generated token (the new root).
  std::int32_t start(std::span<const std::int32_t> prompt);

  /// The tree for the next round from the current drafts.
  DraftTree next_tree() const;

  /// One verification forward over `tree` (rooted at the current root),
  /// then cache compaction to the accepted path. The new root is the bonus.
  VerifyOutcome<T> verify_and_extend(const DraftTree& tree);

  /// Plain single-token step from the root; used when a tree would not fit.
  std::int32_t step_autoregressive();

  /// Whether the next tree round fits in the position/cache budget.
  bool tree_fits() const;
  bool root_fits() const;

  const KVCache<T>& cache() const { return cache_; }
  std::int32_t root() const { return root_; }
  std::int32_t root_position() const { return root_position_; }
  const std::vector<std::vector<T>>& drafts() const { return drafts_; }
  DecodeMode mode() const { return mode_; }
  const TreeSpec& spec() const { return spec_; }
  /// Model forwards issued so far.
  std::size_t forwards() const { return forwards_; }
  /// Committed tokens, in cache order.
  const std::vector<std::int32_t>& history() const { return history_; }

 private:
  std::vector<std::vector<T>> redraft_last();
  /// Positions past a source that its pseudo rows occupy.
  std::size_t pseudo_reach() const;

  const Transformer<T>& model_;
  DecodeMode mode_;
  TreeSpec spec_;
  const TransferBundle<T>* bundle_;
  const MedusaHeads<T>* medusa_;
  KVCache<T> cache_;
  std::int32_t root_ = 0;
  std::int32_t root_position_ = 0;
  std::vector<std::vector<T>> drafts_;
  std::vector<std::int32_t> history_;
  std::size_t forwards_ = 0;
};

struct DecodeOptions {
  std::size_t max_new_tokens = 128;
  bool stop_at_eos = true;
};

struct DecodeResult {
  std::vector<std::int32_t> tokens;  // generated tokens only
  DecodeStats stats;
};

template <typename T>
DecodeResult decode(const Transformer<T>& model, std::span<const std::int32_t> prompt, DecodeMode mode,
                    const TreeSpec& spec, const DecodeOptions& options, const TransferBundle<T>* bundle = nullptr,
                    const MedusaHeads<T>* medusa = nullptr);

}  // namespace htd
