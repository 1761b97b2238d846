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

#include "htd/treedec/treedec.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <map>
#include <sstream>

#include "htd/model/config.hpp"
#include "htd/numerics/error.hpp"
#include "htd/numerics/ops.hpp"
#include "htd/util/kv_text.hpp"

namespace htd {

// ---------------------------------------------------------------------------
// Tree specs

std::size_t TreeSpec::max_depth() const {
  std::size_t d = 0;
  for (const auto& n : nodes) d = std::max(d, n.depth);
  return d;
}

std::vector<std::size_t> TreeSpec::path(std::size_t node) const {
  std::vector<std::size_t> out;
  for (auto i = static_cast<std::int32_t>(node); i > 0; i = nodes.at(static_cast<std::size_t>(i)).parent) {
    out.push_back(nodes[static_cast<std::size_t>(i)].rank);
  }
  std::reverse(out.begin(), out.end());
  return out;
}

std::string TreeSpec::to_text() const {
  std::string out;
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    const auto p = path(i);
    for (std::size_t j = 0; j < p.size(); ++j) out += (j ? "," : "") + std::to_string(p[j]);
    out += "\n";
  }
  return out;
}

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

TreeSpec spec_from_paths(std::vector<std::vector<std::size_t>> paths) {
  std::sort(paths.begin(), paths.end(), [](const auto& a, const auto& b) {
    return a.size() != b.size() ? a.size() < b.size() : a < b;
  });
  TreeSpec spec;
  std::map<std::vector<std::size_t>, std::size_t> index{{{}, 0}};
  for (const auto& p : paths) {
    if (index.count(p)) throw UsageError("tree spec: duplicate path " + join_sizes(p));
    const std::vector<std::size_t> parent(p.begin(), p.end() - 1);
    const auto it = index.find(parent);
    if (it == index.end()) throw UsageError("tree spec: path " + join_sizes(p) + " has no parent node");
    spec.nodes.push_back({static_cast<std::int32_t>(it->second), p.size(), p.back()});
    index[p] = spec.nodes.size() - 1;
  }
  return spec;
}

}  // namespace

TreeSpec parse_tree_spec(std::string_view text) {
  std::vector<std::vector<std::size_t>> paths;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::size_t> path;
    while (true) {
      const auto comma = line.find(',');
      const std::string_view item = trim(line.substr(0, comma));
      std::size_t value = 0;
      const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), value);
      if (item.empty() || ec != std::errc() || ptr != item.data() + item.size()) {
        throw UsageError("tree spec line " + std::to_string(line_no) + ": malformed rank '" + std::string(item) + "'");
      }
      path.push_back(value);
      if (comma == std::string_view::npos) break;
      line = line.substr(comma + 1);
    }
    paths.push_back(std::move(path));
  }
  return spec_from_paths(std::move(paths));
}

TreeSpec tree_spec_from_branching(const std::vector<std::size_t>& branching) {
  std::vector<std::vector<std::size_t>> paths, frontier{{}};
  for (auto b : branching) {
    std::vector<std::vector<std::size_t>> next;
    for (const auto& p : frontier) {
      for (std::size_t r = 0; r < b; ++r) {
        auto child = p;
        child.push_back(r);
        paths.push_back(child);
        next.push_back(std::move(child));
      }
    }
    frontier = std::move(next);
  }
  return spec_from_paths(std::move(paths));
}

TreeSpec default_tree_spec() { return tree_spec_from_branching({3, 2, 2}); }

// ---------------------------------------------------------------------------
// Candidates and flattening

template <typename T>
DraftTree build_candidates(std::span<const std::vector<T>> step_dists, const TreeSpec& spec, std::int32_t root_token,
                           std::int32_t root_position) {
  const std::size_t depth = spec.max_depth();
  if (depth > step_dists.size()) {
    throw UsageError("build_candidates: tree depth " + std::to_string(depth) + " exceeds " +
                     std::to_string(step_dists.size()) + " draft steps");
  }
  std::vector<std::size_t> max_rank(depth + 1, 0);
  for (const auto& n : spec.nodes) max_rank[n.depth] = std::max(max_rank[n.depth], n.rank);
  std::vector<std::vector<std::int32_t>> ranked(depth + 1);
  for (std::size_t d = 1; d <= depth; ++d) {
    const auto& dist = step_dists[d - 1];
    if (max_rank[d] >= dist.size()) {
      throw UsageError("build_candidates: rank " + std::to_string(max_rank[d]) + " exceeds the vocabulary");
    }
    ranked[d] = top_k<T>(dist, max_rank[d] + 1);
  }
  DraftTree tree;
  tree.spec = spec;
  for (const auto& n : spec.nodes) {
    tree.tokens.push_back(n.depth == 0 ? root_token : ranked[n.depth][n.rank]);
    tree.positions.push_back(root_position + static_cast<std::int32_t>(n.depth));
  }
  return tree;
}

FlatTree flatten_tree(const DraftTree& tree, std::size_t cache_len, std::size_t max_positions) {
  const std::size_t n = tree.spec.nodes.size();
  if (tree.tokens.size() != n || tree.positions.size() != n) throw ShapeError("flatten_tree: tree arrays mismatch");
  for (auto p : tree.positions) {
    if (p < 0 || static_cast<std::size_t>(p) >= max_positions) {
      throw CapacityError("flatten_tree: position " + std::to_string(p) + " beyond the context");
    }
  }
  FlatTree flat{tree.tokens, tree.positions, AttnMask(n, cache_len + n)};
  for (std::size_t r = 0; r < n; ++r) {
    flat.mask.allow_range(r, 0, cache_len);
    for (auto a = static_cast<std::int32_t>(r); a >= 0; a = tree.spec.nodes[static_cast<std::size_t>(a)].parent) {
      flat.mask.allow(r, cache_len + static_cast<std::size_t>(a));
    }
  }
  return flat;
}

// ---------------------------------------------------------------------------
// Stats

DecodeMode parse_decode_mode(std::string_view text) {
  if (text == "autoregressive") return DecodeMode::kAutoregressive;
  if (text == "transfer_tree") return DecodeMode::kTransferTree;
  if (text == "transfer_two_pass") return DecodeMode::kTransferTwoPass;
  if (text == "medusa_tree") return DecodeMode::kMedusaTree;
  throw UsageError("unknown decode mode '" + std::string(text) + "'");
}

std::string to_string(DecodeMode mode) {
  switch (mode) {
    case DecodeMode::kAutoregressive: return "autoregressive";
    case DecodeMode::kTransferTree: return "transfer_tree";
    case DecodeMode::kTransferTwoPass: return "transfer_two_pass";
    case DecodeMode::kMedusaTree: return "medusa_tree";
  }
  return "?";
}

std::string DecodeStats::to_records() const {
  std::ostringstream out;
  out << "forwards=" << forwards << "\n"
      << "emitted=" << emitted << "\n"
      << "tokens_per_forward=" << format_double(tokens_per_forward()) << "\n"
      << "acceptance_histogram=" << join_sizes(acceptance_histogram) << "\n"
      << "wall_seconds=" << format_double(wall_seconds) << "\n"
      << "truncated=" << (truncated ? "true" : "false") << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Session

template <typename T>
DecodeSession<T>::DecodeSession(const Transformer<T>& model, DecodeMode mode, TreeSpec spec,
                                const TransferBundle<T>* bundle, const MedusaHeads<T>* medusa)
    : model_(model), mode_(mode), spec_(std::move(spec)), bundle_(bundle), medusa_(medusa),
      cache_(model.make_cache()) {
  const bool transfer = mode == DecodeMode::kTransferTree || mode == DecodeMode::kTransferTwoPass;
  if (transfer && !bundle_) throw UsageError("decode: mode " + to_string(mode) + " needs a transfer bundle");
  if (mode == DecodeMode::kMedusaTree && !medusa_) throw UsageError("decode: medusa_tree needs medusa heads");
  const std::size_t k = transfer ? bundle_->config.k : mode == DecodeMode::kMedusaTree ? medusa_->k : 0;
  if (mode != DecodeMode::kAutoregressive && spec_.max_depth() > k) {
    throw UsageError("decode: tree depth " + std::to_string(spec_.max_depth()) + " exceeds " + std::to_string(k) +
                     " draft steps");
  }
}

template <typename T>
std::size_t DecodeSession<T>::pseudo_reach() const {
  return (mode_ == DecodeMode::kTransferTree || mode_ == DecodeMode::kTransferTwoPass) ? bundle_->config.k : 0;
}

template <typename T>
std::int32_t DecodeSession<T>::start(std::span<const std::int32_t> prompt) {
  const std::size_t n = prompt.size();
  const std::size_t limit = model_.config().max_positions;
  if (n == 0) throw UsageError("decode: empty prompt");
  if (n > limit) throw UsageError("decode: prompt of " + std::to_string(n) + " tokens exceeds the context");
  cache_.clear();
  history_.assign(prompt.begin(), prompt.end());
  drafts_.clear();
  const auto positions = iota_positions(n);
  const AttnMask mask = AttnMask::causal(n);
  const bool can_draft = n - 1 + pseudo_reach() < limit;
  Tensor<T> logits;
  if (mode_ == DecodeMode::kTransferTree && can_draft) {
    const std::size_t source = n - 1;
    auto out = transfer_forward(model_, *bundle_, prompt, positions, mask, std::span<const std::size_t>(&source, 1),
                                &cache_);
    for (const auto& p : out.pseudo_logits) drafts_.push_back(softmax<T>(p.row(0)));
    logits = out.logits;
  } else {
    auto out = model_.forward(prompt, positions, mask, &cache_);
    if (mode_ == DecodeMode::kMedusaTree) drafts_ = medusa_draft_distributions(model_, *medusa_, out.hidden.row(n - 1));
    logits = out.logits;
  }
  ++forwards_;
  if (mode_ == DecodeMode::kTransferTwoPass && can_draft) drafts_ = redraft_last();
  root_ = argmax_token<T>(logits.row(n - 1));
  root_position_ = static_cast<std::int32_t>(n);
  return root_;
}

template <typename T>
std::vector<std::vector<T>> DecodeSession<T>::redraft_last() {
  // Re-run the newest cached token alone to synthesize its pseudo rows.
  const std::size_t len = cache_.length();
  const std::int32_t token = history_.back();
  const std::int32_t position = cache_.positions(0)[len - 1];
  cache_.truncate(len - 1);
  const std::size_t source = 0;
  auto out = transfer_forward(model_, *bundle_, std::span<const std::int32_t>(&token, 1),
                              std::span<const std::int32_t>(&position, 1), AttnMask::causal(1, len - 1),
                              std::span<const std::size_t>(&source, 1), &cache_);
  ++forwards_;
  std::vector<std::vector<T>> drafts;
  for (const auto& p : out.pseudo_logits) drafts.push_back(softmax<T>(p.row(0)));
  return drafts;
}

template <typename T>
bool DecodeSession<T>::root_fits() const {
  return static_cast<std::size_t>(root_position_) < model_.config().max_positions &&
         cache_.length() + 1 <= cache_.capacity();
}

template <typename T>
bool DecodeSession<T>::tree_fits() const {
  const std::size_t depth = std::min(spec_.max_depth(), drafts_.size());
  return static_cast<std::size_t>(root_position_) + depth + pseudo_reach() < model_.config().max_positions &&
         cache_.length() + spec_.nodes.size() <= cache_.capacity();
}

template <typename T>
DraftTree DecodeSession<T>::next_tree() const {
  if (drafts_.size() >= spec_.max_depth()) {
    return build_candidates<T>(drafts_, spec_, root_, root_position_);
  }
  TreeSpec shallow;
  for (std::size_t i = 1; i < spec_.nodes.size(); ++i) {
    if (spec_.nodes[i].depth <= drafts_.size()) shallow.nodes.push_back(spec_.nodes[i]);
  }
  return build_candidates<T>(drafts_, shallow, root_, root_position_);
}

template <typename T>
VerifyOutcome<T> DecodeSession<T>::verify_and_extend(const DraftTree& tree) {
  if (tree.tokens.empty() || tree.tokens[0] != root_ || tree.positions[0] != root_position_) {
    throw UsageError("verify: tree is not rooted at the session's root");
  }
  const std::size_t c = cache_.length();
  const std::size_t n = tree.tokens.size();
  const FlatTree flat = flatten_tree(tree, c, model_.config().max_positions);
  const auto& nodes = tree.spec.nodes;

  Tensor<T> logits, hidden;
  std::vector<Tensor<T>> pseudo;
  if (mode_ == DecodeMode::kTransferTree) {
    std::vector<std::size_t> sources(n);
    for (std::size_t i = 0; i < n; ++i) sources[i] = i;
    auto out = transfer_forward(model_, *bundle_, flat.tokens, flat.positions, flat.mask, sources, &cache_);
    logits = out.logits;
    pseudo = std::move(out.pseudo_logits);
  } else {
    auto out = model_.forward(flat.tokens, flat.positions, flat.mask, &cache_);
    logits = out.logits;
    hidden = out.hidden;
  }
  ++forwards_;

  VerifyOutcome<T> outcome;
  std::size_t cur = 0;
  while (true) {
    const std::int32_t truth = argmax_token<T>(logits.row(cur));
    std::size_t next = 0;
    for (std::size_t j = cur + 1; j < n && next == 0; ++j) {
      if (nodes[j].parent == static_cast<std::int32_t>(cur) && tree.tokens[j] == truth) next = j;
    }
    if (next == 0) {
      outcome.bonus = truth;
      break;
    }
    outcome.accepted_nodes.push_back(next);
    outcome.accepted_tokens.push_back(truth);
    cur = next;
  }

  std::vector<std::size_t> keep(c + 1);
  for (std::size_t i = 0; i <= c; ++i) keep[i] = i;
  for (auto a : outcome.accepted_nodes) keep.push_back(c + a);
  cache_.compact(keep);
  history_.push_back(root_);
  history_.insert(history_.end(), outcome.accepted_tokens.begin(), outcome.accepted_tokens.end());

  switch (mode_) {
    case DecodeMode::kTransferTree:
      for (const auto& p : pseudo) outcome.next_drafts.push_back(softmax<T>(p.row(cur)));
      break;
    case DecodeMode::kMedusaTree:
      outcome.next_drafts = medusa_draft_distributions(model_, *medusa_, hidden.row(cur));
      break;
    case DecodeMode::kTransferTwoPass:
      outcome.next_drafts = redraft_last();
      outcome.forwards = 2;
      break;
    case DecodeMode::kAutoregressive:
      break;
  }
  drafts_ = outcome.next_drafts;
  root_ = outcome.bonus;
  root_position_ = tree.positions[cur] + 1;
  return outcome;
}

template <typename T>
std::int32_t DecodeSession<T>::step_autoregressive() {
  const std::size_t c = cache_.length();
  auto out = model_.forward(std::span<const std::int32_t>(&root_, 1),
                            std::span<const std::int32_t>(&root_position_, 1), AttnMask::causal(1, c), &cache_);
  ++forwards_;
  history_.push_back(root_);
  drafts_.clear();
  root_ = argmax_token<T>(out.logits.row(0));
  ++root_position_;
  return root_;
}

// ---------------------------------------------------------------------------
// Driver

template <typename T>
DecodeResult decode(const Transformer<T>& model, std::span<const std::int32_t> prompt, DecodeMode mode,
                    const TreeSpec& spec, const DecodeOptions& options, const TransferBundle<T>* bundle,
                    const MedusaHeads<T>* medusa) {
  DecodeResult result;
  if (options.max_new_tokens == 0) return result;
  const auto start = std::chrono::steady_clock::now();
  DecodeSession<T> session(model, mode, spec, bundle, medusa);
  auto& stats = result.stats;
  bool done = false;
  std::size_t seen_forwards = 0;
  // Commits tokens in order, honoring the budget and EOS; returns how many.
  auto commit = [&](std::span<const std::int32_t> tokens) {
    std::size_t used = 0;
    for (auto t : tokens) {
      if (done) break;
      result.tokens.push_back(t);
      ++used;
      if (result.tokens.size() >= options.max_new_tokens || (options.stop_at_eos && t == kEosToken)) done = true;
    }
    return used;
  };
  // Tokens belong to the first forward since the last record; a two-pass
  // drafting forward emits nothing.
  auto record = [&](std::size_t emitted_now) {
    const std::size_t f = session.forwards();
    for (std::size_t i = seen_forwards; i < f; ++i) stats.emissions.push_back(i == seen_forwards ? emitted_now : 0);
    seen_forwards = f;
    stats.emitted += emitted_now;
  };

  std::int32_t first = session.start(prompt);
  record(commit(std::span<const std::int32_t>(&first, 1)));
  while (!done) {
    if (mode != DecodeMode::kAutoregressive && session.tree_fits()) {
      auto outcome = session.verify_and_extend(session.next_tree());
      const std::size_t a = outcome.accepted_tokens.size();
      if (stats.acceptance_histogram.size() <= a) stats.acceptance_histogram.resize(a + 1, 0);
      ++stats.acceptance_histogram[a];
      std::vector<std::int32_t> emitted = outcome.accepted_tokens;
      emitted.push_back(outcome.bonus);
      record(commit(emitted));
    } else if (session.root_fits()) {
      std::int32_t t = session.step_autoregressive();
      record(commit(std::span<const std::int32_t>(&t, 1)));
    } else {
      stats.truncated = true;
      break;
    }
  }
  stats.forwards = session.forwards();
  stats.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

#define HTD_INSTANTIATE(T)                                                                                       \
  template DraftTree build_candidates(std::span<const std::vector<T>>, const TreeSpec&, std::int32_t,            \
                                      std::int32_t);                                                             \
  template class DecodeSession<T>;                                                                               \
  template DecodeResult decode(const Transformer<T>&, std::span<const std::int32_t>, DecodeMode, const TreeSpec&, \
                               const DecodeOptions&, const TransferBundle<T>*, const MedusaHeads<T>*);

HTD_INSTANTIATE(float)
HTD_INSTANTIATE(double)
#undef HTD_INSTANTIATE

}  // namespace htd
