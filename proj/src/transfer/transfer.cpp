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

#include "htd/transfer/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "htd/numerics/error.hpp"
#include "htd/util/kv_text.hpp"

namespace htd {

MaskMode parse_mask_mode(std::string_view text) {
  if (text == "no_masked") return MaskMode::kNoMasked;
  if (text == "masked") return MaskMode::kMasked;
  throw UsageError("unknown mask mode '" + std::string(text) + "'");
}

std::string to_string(MaskMode mode) { return mode == MaskMode::kNoMasked ? "no_masked" : "masked"; }

TrainMask parse_train_mask(std::string_view text) {
  if (text == "standard") return TrainMask::kStandard;
  if (text == "masked") return TrainMask::kMasked;
  throw UsageError("unknown training mask '" + std::string(text) + "'");
}

std::string to_string(TrainMask mask) { return mask == TrainMask::kStandard ? "standard" : "masked"; }

KlDirection parse_kl_direction(std::string_view text) {
  if (text == "teacher_first") return KlDirection::kTeacherFirst;
  if (text == "pseudo_first") return KlDirection::kPseudoFirst;
  throw UsageError("unknown kl direction '" + std::string(text) + "'");
}

std::string to_string(KlDirection direction) {
  return direction == KlDirection::kTeacherFirst ? "teacher_first" : "pseudo_first";
}

void TransferConfig::validate(const ModelConfig& model) const {
  if (k < 1 || k > 4) throw UsageError("transfer: k must be in [1, 4], got " + std::to_string(k));
  if (layers.size() != k) throw UsageError("transfer: expected " + std::to_string(k) + " layers");
  for (std::size_t i = 0; i < k; ++i) {
    // t = n_layers is accepted: pseudo rows then pass no further blocks.
    if (layers[i] > model.n_layers) {
      throw UsageError("transfer: layer " + std::to_string(layers[i]) + " exceeds n_layers");
    }
    if (i > 0 && layers[i] <= layers[i - 1]) throw UsageError("transfer: layers must be strictly increasing");
  }
}

// ---------------------------------------------------------------------------
// Bundle

template <typename T>
TransferBundle<T> TransferBundle<T>::init(const TransferConfig& config, std::size_t d_model,
                                          std::uint64_t base_hash, std::uint64_t seed, double noise) {
  TransferBundle b;
  b.config = config;
  b.base_hash = base_hash;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, noise);
  for (std::size_t i = 0; i < config.k; ++i) {
    std::vector<T> w(d_model * d_model);
    for (std::size_t r = 0; r < d_model; ++r) {
      for (std::size_t c = 0; c < d_model; ++c) {
        const double v = noise > 0 ? dist(rng) : 0.0;
        w[r * d_model + c] = static_cast<T>((r == c ? 1.0 : 0.0) + v);
      }
    }
    b.weights.push_back(Tensor<T>::matrix(d_model, d_model, std::move(w)));
    if (config.bias) b.biases.push_back(Tensor<T>({1, d_model}));
  }
  return b;
}

template <typename T>
std::vector<Tensor<T>> TransferBundle<T>::parameters(std::size_t step) const {
  if (step < 1 || step > config.k) throw UsageError("transfer: step " + std::to_string(step) + " out of range");
  std::vector<Tensor<T>> out{weights[step - 1]};
  if (config.bias) out.push_back(biases[step - 1]);
  return out;
}

template <typename T>
void TransferBundle<T>::set_trainable(bool on) {
  for (auto& w : weights) w.set_requires_grad(on);
  for (auto& b : biases) b.set_requires_grad(on);
}

template <typename T>
Checkpoint TransferBundle<T>::to_checkpoint() const {
  Checkpoint ck;
  std::ostringstream meta;
  meta << "k=" << config.k << "\n"
       << "layers=" << join_sizes(config.layers) << "\n"
       << "mask_mode=" << to_string(config.mask_mode) << "\n"
       << "bias=" << (config.bias ? "true" : "false") << "\n"
       << "base_hash=" << hash_hex(base_hash) << "\n";
  ck.add_text("transfer.meta", meta.str());
  for (std::size_t i = 0; i < config.k; ++i) {
    const std::string p = "transfer.step" + std::to_string(i + 1);
    ck.add_tensor(p + ".weight", weights[i]);
    if (config.bias) ck.add_tensor(p + ".bias", biases[i]);
  }
  return ck;
}

template <typename T>
TransferBundle<T> TransferBundle<T>::from_checkpoint(const Checkpoint& ck) {
  TransferBundle b;
  KvReader meta(parse_kv_text(ck.text("transfer.meta")), "transfer.meta");
  std::string mode = "no_masked", hash;
  meta.read("k", b.config.k);
  meta.read("layers", b.config.layers);
  meta.read("mask_mode", mode);
  meta.read("bias", b.config.bias);
  meta.read("base_hash", hash);
  meta.finish();
  b.config.mask_mode = parse_mask_mode(mode);
  b.base_hash = std::stoull(hash, nullptr, 16);
  const Shape& wshape = ck.get("transfer.step1.weight").dims;
  if (wshape.size() != 2 || wshape[0] != wshape[1]) throw ArtifactError("transfer: step 1 weight is not square");
  const std::size_t d = wshape[0];
  for (std::size_t i = 0; i < b.config.k; ++i) {
    const std::string p = "transfer.step" + std::to_string(i + 1);
    b.weights.push_back(ck.tensor<T>(p + ".weight", {d, d}));
    if (b.config.bias) b.biases.push_back(ck.tensor<T>(p + ".bias", {1, d}));
  }
  return b;
}

template <typename T>
void TransferBundle<T>::check_base(std::uint64_t model_hash) const {
  if (model_hash != base_hash) {
    throw ArtifactError("transfer bundle was trained against base " + hash_hex(base_hash) + ", not " +
                        hash_hex(model_hash));
  }
}

template <typename T>
TransferBundle<T> TransferBundle<T>::load(const std::filesystem::path& path, std::uint64_t expected_base_hash) {
  auto b = from_checkpoint(Checkpoint::load(path));
  b.check_base(expected_base_hash);
  return b;
}

template <typename T>
std::uint64_t model_fingerprint(const Transformer<T>& model) {
  const auto bytes = model.to_checkpoint().serialize();
  return fnv1a64(bytes);
}

template <typename T>
Tensor<T> synthesize_pseudo(const Tensor<T>& h_rows, std::size_t step, const TransferBundle<T>& bundle) {
  if (step < 1 || step > bundle.config.k) {
    throw UsageError("synthesize_pseudo: step " + std::to_string(step) + " out of range");
  }
  const auto& w = bundle.weights[step - 1];
  if (h_rows.rank() != 2 || h_rows.cols() != w.rows()) throw ShapeError("synthesize_pseudo: width mismatch");
  Tensor<T> out = matmul(h_rows, w);
  if (bundle.config.bias) out = add_bias(out, bundle.biases[step - 1]);
  return out;
}

AttnMask build_training_mask(std::size_t n, std::size_t step, TrainMask train_mask) {
  if (step < 1 || n < step + 1) {
    throw UsageError("build_training_mask: need n >= step + 1 (n=" + std::to_string(n) +
                     ", step=" + std::to_string(step) + ")");
  }
  AttnMask mask(2 * n, 2 * n);
  for (std::size_t r = 0; r < n; ++r) mask.allow_range(r, 0, r + 1);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t visible = train_mask == TrainMask::kStandard ? std::min(s + step, n) : s + 1;
    mask.allow_range(n + s, 0, visible);
    mask.allow(n + s, n + s);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Training

template <typename T>
Tensor<T> transfer_step_loss(const Transformer<T>& model, const TransferBundle<T>& bundle, std::size_t step,
                             const TeacherPass<T>& teacher, TrainMask train_mask, KlDirection direction) {
  const std::size_t n = teacher.probs.rows();
  if (step < 1 || step > bundle.config.k) throw UsageError("transfer loss: step out of range");
  if (n < step + 1) throw UsageError("transfer loss: window shorter than step + 1");
  const std::size_t layer = bundle.config.layer(step);
  const auto tap = teacher.taps.find(layer);
  if (tap == teacher.taps.end()) throw UsageError("transfer loss: teacher pass lacks layer " + std::to_string(layer));
  const std::size_t m = n - step;

  Tensor<T> pseudo = synthesize_pseudo(slice_rows(tap->second, 0, m), step, bundle);
  std::vector<std::int32_t> positions(m);
  AttnMask mask(m, n + m);
  for (std::size_t s = 0; s < m; ++s) {
    positions[s] = static_cast<std::int32_t>(s + step);
    mask.allow_range(s, 0, train_mask == TrainMask::kStandard ? s + step : s + 1);
    mask.allow(s, n + s);
  }
  LayerRunOptions options;
  options.cache_rows = 0;
  auto run = model.run_layers(pseudo, layer, model.config().n_layers, positions, mask, &teacher.cache, options);
  Tensor<T> logits = model.logits(run.hidden);
  Tensor<T> target = slice_rows(teacher.probs, step, n);
  return scale(kl_to_target_sum(logits, target, direction), static_cast<T>(1.0 / static_cast<double>(m)));
}

template <typename T>
double heldout_transfer_kl(const Transformer<T>& model, const TransferBundle<T>& bundle, std::size_t step,
                           std::span<const std::int32_t> tokens, std::size_t context, std::size_t max_windows,
                           TrainMask train_mask, KlDirection direction) {
  return heldout_loss<T>(model, tokens, context, max_windows, {bundle.config.layer(step)},
                         [&](const TeacherPass<T>& teacher) {
                           return transfer_step_loss(model, bundle, step, teacher, train_mask, direction);
                         });
}

template <typename T>
TransferTrainReport transfer_train(const Transformer<T>& model, std::span<const std::int32_t> train_tokens,
                                   std::span<const std::int32_t> heldout_tokens, TransferBundle<T>& bundle,
                                   const TransferTrainHyper& hyper, std::vector<std::size_t> steps,
                                   const TrainLogger& log) {
  bundle.config.validate(model.config());
  if (bundle.weights.empty() || bundle.weights[0].rows() != model.config().d_model) {
    throw ShapeError("transfer_train: bundle width does not match the model");
  }
  if (steps.empty()) {
    for (std::size_t i = 1; i <= bundle.config.k; ++i) steps.push_back(i);
  }
  std::vector<std::size_t> layers;
  std::vector<DistillTask<T>> tasks;
  for (auto s : steps) {
    if (s < 1 || s > bundle.config.k) throw UsageError("transfer_train: step out of range");
    layers.push_back(bundle.config.layer(s));
    auto loss = [&model, &bundle, &hyper, s](const TeacherPass<T>& t) {
      return transfer_step_loss(model, bundle, s, t, hyper.train_mask, hyper.direction);
    };
    tasks.push_back({"kl" + std::to_string(s), bundle.parameters(s), loss});
  }
  const std::size_t max_step = *std::max_element(steps.begin(), steps.end());
  if (hyper.context < max_step + 1) {
    throw UsageError("transfer_train: context too short for step " + std::to_string(max_step));
  }

  TransferTrainReport report;
  const auto identity = TransferBundle<T>::init(bundle.config, model.config().d_model, bundle.base_hash, 0, 0.0);
  std::vector<double> identity_kl;
  for (auto s : steps) {
    identity_kl.push_back(heldout_transfer_kl(model, identity, s, heldout_tokens, hyper.context, hyper.eval_windows,
                                              hyper.train_mask, hyper.direction));
  }
  const DistillReport d = distill_train(model, train_tokens, heldout_tokens, hyper, tasks, layers, max_step + 1, log);
  for (std::size_t j = 0; j < steps.size(); ++j) {
    TransferStepReport r;
    r.step = steps[j];
    r.identity_heldout_kl = identity_kl[j];
    r.initial_heldout_kl = d.tasks[j].initial_heldout_kl;
    r.final_heldout_kl = d.tasks[j].final_heldout_kl;
    r.batch_losses = d.tasks[j].batch_losses;
    report.steps.push_back(std::move(r));
  }
  report.updates = d.updates;
  report.windows = d.windows;
  return report;
}

// ---------------------------------------------------------------------------
// Inference

template <typename T>
TransferForwardResult<T> transfer_forward(const Transformer<T>& model, const TransferBundle<T>& bundle,
                                          std::span<const std::int32_t> tokens,
                                          std::span<const std::int32_t> positions, const AttnMask& real_mask,
                                          std::span<const std::size_t> sources,
                                          std::type_identity_t<KVCache<T>>* cache,
                                          const TransferForwardOptions& options) {
  const std::size_t n = tokens.size(), m = sources.size(), k = bundle.config.k;
  const std::size_t c = cache ? cache->length() : 0;
  const std::size_t n_layers = model.config().n_layers;
  if (positions.size() != n) throw ShapeError("transfer_forward: positions/tokens length mismatch");
  if (real_mask.rows() != n || real_mask.cols() != c + n) {
    throw ShapeError("transfer_forward: real mask must be " + std::to_string(n) + " x " + std::to_string(c + n));
  }
  for (auto s : sources) {
    if (s >= n) throw UsageError("transfer_forward: source row out of range");
  }
  if (!bundle.weights.empty() && bundle.weights[0].rows() != model.config().d_model) {
    throw ShapeError("transfer_forward: bundle width does not match the model");
  }

  std::vector<std::size_t> bounds{0};
  for (std::size_t i = 1; i <= k; ++i) bounds.push_back(bundle.config.layer(i));
  bounds.push_back(n_layers);

  TransferForwardResult<T> result;
  result.pseudo_taps.resize(k);
  std::vector<std::int32_t> pos(positions.begin(), positions.end());
  Tensor<T> x = model.embed(tokens, positions);
  for (std::size_t seg = 0; seg <= k; ++seg) {
    if (seg > 0) {
      Tensor<T> sourced = gather_rows(slice_rows(x, 0, n), sources);
      Tensor<T> pseudo = synthesize_pseudo(sourced, seg, bundle);
      std::vector<Tensor<T>> parts{x, pseudo};
      x = concat_rows<T>(parts);
      for (auto s : sources) pos.push_back(positions[s] + static_cast<std::int32_t>(seg));
    }
    const std::size_t rows = n + seg * m;
    AttnMask mask(rows, c + rows);
    for (std::size_t r = 0; r < n; ++r) {
      const std::uint8_t* bits = real_mask.row_bits(r);
      for (std::size_t col = 0; col < c + n; ++col) {
        if (bits[col]) mask.allow(r, col);
      }
    }
    for (std::size_t step = 1; step <= seg; ++step) {
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t row = n + (step - 1) * m + j;
        const std::uint8_t* bits = real_mask.row_bits(sources[j]);
        for (std::size_t col = 0; col < c + n; ++col) {
          if (bits[col]) mask.allow(row, col);
        }
        if (bundle.config.mask_mode == MaskMode::kNoMasked) {
          for (std::size_t lower = 1; lower < step; ++lower) mask.allow(row, c + n + (lower - 1) * m + j);
        }
        mask.allow(row, c + row);
      }
    }
    LayerRunOptions run_options;
    run_options.cache_rows = std::min(options.cache_rows, n);
    for (auto t : options.trace_layers) {
      if (t >= bounds[seg] && t <= bounds[seg + 1]) run_options.taps.push_back(t);
    }
    auto run = model.run_layers(x, bounds[seg], bounds[seg + 1], pos, mask, cache, run_options);
    x = run.hidden;
    for (auto& [layer, state] : run.taps) {
      result.real_taps[layer] = slice_rows(state, 0, n);
      for (std::size_t step = 1; step <= seg; ++step) {
        result.pseudo_taps[step - 1][layer] = slice_rows(state, n + (step - 1) * m, n + step * m);
      }
    }
  }
  Tensor<T> logits = model.logits(x);
  result.hidden = slice_rows(x, 0, n);
  result.logits = slice_rows(logits, 0, n);
  for (std::size_t step = 1; step <= k; ++step) {
    result.pseudo_logits.push_back(slice_rows(logits, n + (step - 1) * m, n + step * m));
  }
  return result;
}

template <typename T>
std::vector<std::vector<T>> draft_distributions(const Transformer<T>& model, const TransferBundle<T>& bundle,
                                                std::span<const std::int32_t> tokens, KVCache<T>& cache) {
  if (tokens.empty()) throw UsageError("draft_distributions: no tokens");
  const std::size_t c = cache.length();
  const auto positions = iota_positions(tokens.size(), static_cast<std::int32_t>(c));
  const std::size_t source = tokens.size() - 1;
  auto out = transfer_forward(model, bundle, tokens, positions, AttnMask::causal(tokens.size(), c),
                              std::span<const std::size_t>(&source, 1), &cache);
  std::vector<std::vector<T>> dists;
  for (const auto& logits : out.pseudo_logits) dists.push_back(softmax<T>(logits.row(0)));
  return dists;
}

#define HTD_INSTANTIATE(T)                                                                                      \
  template struct TransferBundle<T>;                                                                            \
  template std::uint64_t model_fingerprint(const Transformer<T>&);                                              \
  template Tensor<T> synthesize_pseudo(const Tensor<T>&, std::size_t, const TransferBundle<T>&);                \
  template Tensor<T> transfer_step_loss(const Transformer<T>&, const TransferBundle<T>&, std::size_t,           \
                                        const TeacherPass<T>&, TrainMask, KlDirection);                         \
  template double heldout_transfer_kl(const Transformer<T>&, const TransferBundle<T>&, std::size_t,             \
                                      std::span<const std::int32_t>, std::size_t, std::size_t, TrainMask,       \
                                      KlDirection);                                                             \
  template TransferTrainReport transfer_train(const Transformer<T>&, std::span<const std::int32_t>,             \
                                              std::span<const std::int32_t>, TransferBundle<T>&,                \
                                              const TransferTrainHyper&, std::vector<std::size_t>,              \
                                              const TrainLogger&);                                              \
  template TransferForwardResult<T> transfer_forward(const Transformer<T>&, const TransferBundle<T>&,           \
                                                     std::span<const std::int32_t>,                             \
                                                     std::span<const std::int32_t>, const AttnMask&,            \
                                                     std::span<const std::size_t>, KVCache<T>*,                 \
                                                     const TransferForwardOptions&);                            \
  template std::vector<std::vector<T>> draft_distributions(const Transformer<T>&, const TransferBundle<T>&,     \
                                                           std::span<const std::int32_t>, KVCache<T>&);

HTD_INSTANTIATE(float)
HTD_INSTANTIATE(double)
#undef HTD_INSTANTIATE

}  // namespace htd
