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

#include "htd/heads/heads.hpp"

#include <algorithm>
#include <sstream>
#include <string>

#include "htd/numerics/error.hpp"
#include "htd/numerics/ops.hpp"
#include "htd/util/kv_text.hpp"

namespace htd {
namespace {

void check_step(std::size_t step, std::size_t k, const char* what) {
  if (step < 1 || step > k) {
    throw UsageError(std::string(what) + ": step " + std::to_string(step) + " out of range 1.." + std::to_string(k));
  }
}

void check_hash(std::uint64_t stored, std::uint64_t expected, const char* what) {
  if (stored != expected) {
    throw ArtifactError(std::string(what) + " were trained against base " + hash_hex(stored) + ", not " +
                        hash_hex(expected));
  }
}

template <typename T>
Tensor<T> row_tensor(std::span<const T> row) {
  return Tensor<T>::matrix(1, row.size(), std::vector<T>(row.begin(), row.end()));
}

template <typename T>
Tensor<T> offset_kl(const Tensor<T>& logits, const TeacherPass<T>& teacher, std::size_t step,
                    KlDirection direction) {
  const std::size_t n = teacher.probs.rows();
  Tensor<T> target = slice_rows(teacher.probs, step, n);
  return scale(kl_to_target_sum(logits, target, direction), static_cast<T>(1.0 / static_cast<double>(n - step)));
}

}  // namespace

// ---------------------------------------------------------------------------
// Medusa

template <typename T>
MedusaHeads<T> MedusaHeads<T>::init(const Transformer<T>& model, std::size_t k, std::uint64_t base_hash) {
  if (k < 1 || k > 4) throw UsageError("medusa: k must be in [1, 4]");
  const std::size_t d = model.config().d_model;
  MedusaHeads h;
  h.k = k;
  h.base_hash = base_hash;
  for (std::size_t i = 0; i < k; ++i) {
    h.w1.push_back(Tensor<T>({d, d}));
    h.b1.push_back(Tensor<T>({1, d}));
    h.out.push_back(model.weights().output.clone());
  }
  return h;
}

template <typename T>
std::vector<Tensor<T>> MedusaHeads<T>::parameters(std::size_t step) const {
  check_step(step, k, "medusa");
  return {w1[step - 1], b1[step - 1], out[step - 1]};
}

template <typename T>
Tensor<T> MedusaHeads<T>::apply(const Tensor<T>& normed, std::size_t step) const {
  check_step(step, k, "medusa");
  if (normed.cols() != w1[step - 1].rows()) throw ShapeError("medusa: state width mismatch");
  Tensor<T> x = add(normed, silu(add_bias(matmul(normed, w1[step - 1]), b1[step - 1])));
  return matmul(x, out[step - 1]);
}

template <typename T>
Checkpoint MedusaHeads<T>::to_checkpoint() const {
  Checkpoint ck;
  ck.add_text("medusa.meta", "k=" + std::to_string(k) + "\nbase_hash=" + hash_hex(base_hash) + "\n");
  for (std::size_t i = 0; i < k; ++i) {
    const std::string p = "medusa.step" + std::to_string(i + 1);
    ck.add_tensor(p + ".w1.weight", w1[i]);
    ck.add_tensor(p + ".w1.bias", b1[i]);
    ck.add_tensor(p + ".out.weight", out[i]);
  }
  return ck;
}

template <typename T>
MedusaHeads<T> MedusaHeads<T>::from_checkpoint(const Checkpoint& ck) {
  MedusaHeads h;
  KvReader meta(parse_kv_text(ck.text("medusa.meta")), "medusa.meta");
  std::string hash;
  meta.read("k", h.k);
  meta.read("base_hash", hash);
  meta.finish();
  h.base_hash = std::stoull(hash, nullptr, 16);
  const auto& dims = ck.get("medusa.step1.out.weight").dims;
  if (dims.size() != 2) throw ArtifactError("medusa: malformed output projection");
  const std::size_t d = dims[0], v = dims[1];
  for (std::size_t i = 0; i < h.k; ++i) {
    const std::string p = "medusa.step" + std::to_string(i + 1);
    h.w1.push_back(ck.tensor<T>(p + ".w1.weight", {d, d}));
    h.b1.push_back(ck.tensor<T>(p + ".w1.bias", {1, d}));
    h.out.push_back(ck.tensor<T>(p + ".out.weight", {d, v}));
  }
  return h;
}

template <typename T>
MedusaHeads<T> MedusaHeads<T>::load(const std::filesystem::path& path, std::uint64_t expected_base_hash) {
  auto h = from_checkpoint(Checkpoint::load(path));
  check_hash(h.base_hash, expected_base_hash, "medusa heads");
  return h;
}

template <typename T>
Tensor<T> medusa_step_loss(const Transformer<T>& model, const MedusaHeads<T>& heads, std::size_t step,
                           const TeacherPass<T>& teacher, KlDirection direction) {
  check_step(step, heads.k, "medusa loss");
  const std::size_t n = teacher.hidden.rows();
  if (n < step + 1) throw UsageError("medusa loss: window shorter than step + 1");
  Tensor<T> normed = model.final_norm(slice_rows(teacher.hidden, 0, n - step));
  return offset_kl(heads.apply(normed, step), teacher, step, direction);
}

template <typename T>
DistillReport train_medusa(const Transformer<T>& model, std::span<const std::int32_t> train_tokens,
                           std::span<const std::int32_t> heldout_tokens, MedusaHeads<T>& heads,
                           const DistillHyper& hyper, const TrainLogger& log) {
  std::vector<DistillTask<T>> tasks;
  for (std::size_t s = 1; s <= heads.k; ++s) {
    auto loss = [&model, &heads, &hyper, s](const TeacherPass<T>& t) {
      return medusa_step_loss(model, heads, s, t, hyper.direction);
    };
    tasks.push_back({"medusa" + std::to_string(s), heads.parameters(s), loss});
  }
  return distill_train(model, train_tokens, heldout_tokens, hyper, tasks, {}, heads.k + 1, log);
}

template <typename T>
std::vector<std::vector<T>> medusa_draft_distributions(const Transformer<T>& model, const MedusaHeads<T>& heads,
                                                       std::span<const T> last_hidden) {
  Tensor<T> normed = model.final_norm(row_tensor(last_hidden));
  std::vector<std::vector<T>> out;
  for (std::size_t s = 1; s <= heads.k; ++s) out.push_back(softmax<T>(heads.apply(normed, s).values()));
  return out;
}

// ---------------------------------------------------------------------------
// Early exit

template <typename T>
ExitHeads<T> ExitHeads<T>::init(const Transformer<T>& model, std::vector<std::size_t> layers, std::size_t k,
                                std::uint64_t base_hash) {
  if (k < 1 || k > 4) throw UsageError("exit heads: k must be in [1, 4]");
  if (layers.empty()) throw UsageError("exit heads: no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] > model.config().n_layers) throw UsageError("exit heads: layer exceeds n_layers");
    if (i > 0 && layers[i] <= layers[i - 1]) throw UsageError("exit heads: layers must be strictly increasing");
  }
  ExitHeads h;
  h.k = k;
  h.layers = std::move(layers);
  h.base_hash = base_hash;
  const std::size_t v = model.config().vocab_size;
  for (std::size_t i = 0; i < h.layers.size() * k; ++i) {
    h.weight.push_back(model.weights().output.clone());
    h.bias.push_back(Tensor<T>({1, v}));
  }
  return h;
}

template <typename T>
std::size_t ExitHeads<T>::index(std::size_t layer, std::size_t step) const {
  check_step(step, k, "exit heads");
  const auto it = std::find(layers.begin(), layers.end(), layer);
  if (it == layers.end()) throw UsageError("exit heads: no head at layer " + std::to_string(layer));
  return static_cast<std::size_t>(it - layers.begin()) * k + step - 1;
}

template <typename T>
std::vector<Tensor<T>> ExitHeads<T>::parameters(std::size_t layer, std::size_t step) const {
  const std::size_t i = index(layer, step);
  return {weight[i], bias[i]};
}

template <typename T>
Tensor<T> ExitHeads<T>::apply(const Transformer<T>& model, const Tensor<T>& h, std::size_t layer,
                              std::size_t step) const {
  const std::size_t i = index(layer, step);
  return add_bias(matmul(model.final_norm(h), weight[i]), bias[i]);
}

template <typename T>
Checkpoint ExitHeads<T>::to_checkpoint() const {
  Checkpoint ck;
  std::ostringstream meta;
  meta << "k=" << k << "\nlayers=" << join_sizes(layers) << "\nbase_hash=" << hash_hex(base_hash) << "\n";
  ck.add_text("exit.meta", meta.str());
  for (auto layer : layers) {
    for (std::size_t s = 1; s <= k; ++s) {
      const std::size_t i = index(layer, s);
      const std::string p = "exit.l" + std::to_string(layer) + ".step" + std::to_string(s);
      ck.add_tensor(p + ".weight", weight[i]);
      ck.add_tensor(p + ".bias", bias[i]);
    }
  }
  return ck;
}

template <typename T>
ExitHeads<T> ExitHeads<T>::from_checkpoint(const Checkpoint& ck) {
  ExitHeads h;
  KvReader meta(parse_kv_text(ck.text("exit.meta")), "exit.meta");
  std::string hash;
  meta.read("k", h.k);
  meta.read("layers", h.layers);
  meta.read("base_hash", hash);
  meta.finish();
  h.base_hash = std::stoull(hash, nullptr, 16);
  if (h.layers.empty()) throw ArtifactError("exit heads: no layers recorded");
  const std::string first = "exit.l" + std::to_string(h.layers[0]) + ".step1.weight";
  const auto& dims = ck.get(first).dims;
  if (dims.size() != 2) throw ArtifactError("exit heads: malformed weight");
  const std::size_t d = dims[0], v = dims[1];
  for (auto layer : h.layers) {
    for (std::size_t s = 1; s <= h.k; ++s) {
      const std::string p = "exit.l" + std::to_string(layer) + ".step" + std::to_string(s);
      h.weight.push_back(ck.tensor<T>(p + ".weight", {d, v}));
      h.bias.push_back(ck.tensor<T>(p + ".bias", {1, v}));
    }
  }
  return h;
}

template <typename T>
ExitHeads<T> ExitHeads<T>::load(const std::filesystem::path& path, std::uint64_t expected_base_hash) {
  auto h = from_checkpoint(Checkpoint::load(path));
  check_hash(h.base_hash, expected_base_hash, "exit heads");
  return h;
}

template <typename T>
Tensor<T> exit_step_loss(const Transformer<T>& model, const ExitHeads<T>& heads, std::size_t layer,
                         std::size_t step, const TeacherPass<T>& teacher, KlDirection direction) {
  const std::size_t n = teacher.probs.rows();
  if (n < step + 1) throw UsageError("exit loss: window shorter than step + 1");
  const auto tap = teacher.taps.find(layer);
  if (tap == teacher.taps.end()) throw UsageError("exit loss: teacher pass lacks layer " + std::to_string(layer));
  return offset_kl(heads.apply(model, slice_rows(tap->second, 0, n - step), layer, step), teacher, step, direction);
}

template <typename T>
DistillReport train_early_exit(const Transformer<T>& model, std::span<const std::int32_t> train_tokens,
                               std::span<const std::int32_t> heldout_tokens, ExitHeads<T>& heads,
                               const DistillHyper& hyper, const TrainLogger& log) {
  std::vector<DistillTask<T>> tasks;
  for (auto layer : heads.layers) {
    for (std::size_t s = 1; s <= heads.k; ++s) {
      auto loss = [&model, &heads, &hyper, layer, s](const TeacherPass<T>& t) {
        return exit_step_loss(model, heads, layer, s, t, hyper.direction);
      };
      tasks.push_back({"exit" + std::to_string(layer) + "." + std::to_string(s), heads.parameters(layer, s), loss});
    }
  }
  return distill_train(model, train_tokens, heldout_tokens, hyper, tasks, heads.layers, heads.k + 1, log);
}

template <typename T>
std::vector<std::vector<T>> exit_draft_distributions(const Transformer<T>& model, const ExitHeads<T>& heads,
                                                     std::size_t layer, std::span<const T> hidden) {
  const Tensor<T> h = row_tensor(hidden);
  std::vector<std::vector<T>> out;
  for (std::size_t s = 1; s <= heads.k; ++s) out.push_back(softmax<T>(heads.apply(model, h, layer, s).values()));
  return out;
}

#define HTD_INSTANTIATE(T)                                                                                        \
  template struct MedusaHeads<T>;                                                                                 \
  template struct ExitHeads<T>;                                                                                   \
  template Tensor<T> medusa_step_loss(const Transformer<T>&, const MedusaHeads<T>&, std::size_t,                  \
                                      const TeacherPass<T>&, KlDirection);                                        \
  template Tensor<T> exit_step_loss(const Transformer<T>&, const ExitHeads<T>&, std::size_t, std::size_t,         \
                                    const TeacherPass<T>&, KlDirection);                                          \
  template DistillReport train_medusa(const Transformer<T>&, std::span<const std::int32_t>,                       \
                                      std::span<const std::int32_t>, MedusaHeads<T>&, const DistillHyper&,        \
                                      const TrainLogger&);                                                        \
  template DistillReport train_early_exit(const Transformer<T>&, std::span<const std::int32_t>,                   \
                                          std::span<const std::int32_t>, ExitHeads<T>&, const DistillHyper&,      \
                                          const TrainLogger&);                                                    \
  template std::vector<std::vector<T>> medusa_draft_distributions(const Transformer<T>&, const MedusaHeads<T>&,   \
                                                                  std::span<const T>);                            \
  template std::vector<std::vector<T>> exit_draft_distributions(const Transformer<T>&, const ExitHeads<T>&,       \
                                                                std::size_t, std::span<const T>);

HTD_INSTANTIATE(float)
HTD_INSTANTIATE(double)
#undef HTD_INSTANTIATE

}  // namespace htd
