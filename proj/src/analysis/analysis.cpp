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

#include "htd/analysis/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#include "htd/model/checkpoint.hpp"
#include "htd/numerics/error.hpp"
#include "htd/numerics/ops.hpp"

namespace htd {

void EvalOptions::validate(const ModelConfig& model) const {
  if (sequences == 0 || splits == 0) throw UsageError("eval: sequences and splits must be positive");
  if (seeds.empty()) throw UsageError("eval: no seeds");
  if (min_split == 0 || min_split >= context) throw UsageError("eval: min_split must be in [1, context)");
  if (context + steps > model.max_positions) throw UsageError("eval: context + steps exceeds max_positions");
  for (auto t : tap_layers) {
    if (t > model.n_layers) throw UsageError("eval: tap layer " + std::to_string(t) + " out of range");
  }
}

std::vector<SplitSet> sample_splits(const Transformer<float>& model, std::span<const std::int32_t> tokens,
                                    const EvalOptions& options, std::uint64_t seed) {
  options.validate(model.config());
  if (tokens.size() < options.context) {
    throw UsageError("eval: " + std::to_string(tokens.size()) + " tokens, need at least " +
                     std::to_string(options.context));
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> start_dist(0, tokens.size() - options.context);
  LayerRunOptions taps;
  taps.taps = options.tap_layers;

  std::vector<SplitSet> sets(options.sequences);
  for (auto& set : sets) {
    const std::size_t start = start_dist(rng);
    // Prefix lengths p in [min_split, context), without replacement.
    std::vector<std::size_t> lengths(options.context - options.min_split);
    std::iota(lengths.begin(), lengths.end(), options.min_split);
    std::shuffle(lengths.begin(), lengths.end(), rng);
    lengths.resize(std::min(options.splits, lengths.size()));
    std::sort(lengths.begin(), lengths.end());
    for (auto p : lengths) set.sources.push_back(p - 1);
    set.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                      tokens.begin() + static_cast<std::ptrdiff_t>(start + set.sources.back() + 1));

    auto cache = model.make_cache();
    const auto prefill = model.forward(set.tokens, iota_positions(set.tokens.size()),
                                       AttnMask::causal(set.tokens.size()), &cache);
    for (auto s : set.sources) {
      auto rollout = cache;
      rollout.truncate(s + 1);
      std::vector<std::int32_t> greedy{argmax_token<float>(prefill.logits.row(s))};
      std::vector<std::map<std::size_t, std::vector<float>>> states;
      for (std::size_t i = 0; i < options.steps; ++i) {
        const std::int32_t pos = static_cast<std::int32_t>(s + 1 + i);
        const auto out = model.forward(std::span<const std::int32_t>(&greedy.back(), 1),
                                       std::span<const std::int32_t>(&pos, 1), AttnMask::causal(1, s + 1 + i),
                                       &rollout, taps);
        auto& layer_states = states.emplace_back();
        for (const auto& [t, h] : out.taps) layer_states[t].assign(h.values().begin(), h.values().end());
        greedy.push_back(argmax_token<float>(out.logits.row(0)));
      }
      set.greedy.push_back(std::move(greedy));
      set.states.push_back(std::move(states));
    }
  }
  return sets;
}

namespace {

DraftScores rows_to_scores(const std::vector<Tensor<float>>& per_step, std::size_t sources) {
  DraftScores out(sources);
  for (std::size_t j = 0; j < sources; ++j) {
    for (const auto& logits : per_step) {
      const auto row = logits.row(j);
      out[j].emplace_back(row.begin(), row.end());
    }
  }
  return out;
}

// Only rows up to the last source matter under a causal mask.
std::span<const std::int32_t> needed(std::span<const std::int32_t> tokens, std::span<const std::size_t> sources) {
  if (sources.empty()) throw UsageError("draft method: no sources");
  const std::size_t last = *std::max_element(sources.begin(), sources.end());
  if (last >= tokens.size()) throw UsageError("draft method: source out of range");
  return tokens.first(last + 1);
}

}  // namespace

DraftMethod transfer_method(const Transformer<float>& model, const TransferBundle<float>& bundle, std::string name) {
  DraftMethod m;
  m.name = std::move(name);
  m.k = bundle.config.k;
  m.score = [&model, &bundle](std::span<const std::int32_t> tokens, std::span<const std::size_t> sources) {
    const auto seq = needed(tokens, sources);
    const auto out = transfer_forward<float>(model, bundle, seq, iota_positions(seq.size()),
                                             AttnMask::causal(seq.size()), sources, nullptr);
    return rows_to_scores(out.pseudo_logits, sources.size());
  };
  return m;
}

DraftMethod medusa_method(const Transformer<float>& model, const MedusaHeads<float>& heads) {
  DraftMethod m;
  m.name = "medusa";
  m.k = heads.k;
  m.score = [&model, &heads](std::span<const std::int32_t> tokens, std::span<const std::size_t> sources) {
    const auto seq = needed(tokens, sources);
    const auto out = model.forward_causal(seq);
    const Tensor<float> normed = model.final_norm(gather_rows(out.hidden, sources));
    std::vector<Tensor<float>> per_step;
    for (std::size_t i = 1; i <= heads.k; ++i) per_step.push_back(heads.apply(normed, i));
    return rows_to_scores(per_step, sources.size());
  };
  return m;
}

DraftMethod exit_method(const Transformer<float>& model, const ExitHeads<float>& heads, std::size_t layer) {
  heads.index(layer, 1);  // rejects layers without heads
  DraftMethod m;
  m.name = "early_exit_l" + std::to_string(layer);
  m.k = heads.k;
  m.score = [&model, &heads, layer](std::span<const std::int32_t> tokens, std::span<const std::size_t> sources) {
    const auto seq = needed(tokens, sources);
    LayerRunOptions options;
    options.taps = {layer};
    const auto out = model.forward(seq, iota_positions(seq.size()), AttnMask::causal(seq.size()), nullptr, options);
    const Tensor<float> h = gather_rows(out.taps.at(layer), sources);
    std::vector<Tensor<float>> per_step;
    for (std::size_t i = 1; i <= heads.k; ++i) per_step.push_back(heads.apply(model, h, layer, i));
    return rows_to_scores(per_step, sources.size());
  };
  return m;
}

DraftMethod random_method(std::size_t vocab, std::size_t k, std::uint64_t seed) {
  DraftMethod m;
  m.name = "random";
  m.k = k;
  auto rng = std::make_shared<std::mt19937_64>(seed);
  m.score = [vocab, k, rng](std::span<const std::int32_t>, std::span<const std::size_t> sources) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    DraftScores out(sources.size(), std::vector<std::vector<float>>(k, std::vector<float>(vocab)));
    for (auto& per_source : out) {
      for (auto& row : per_source) {
        for (auto& v : row) v = u(*rng);
      }
    }
    return out;
  };
  return m;
}

double AccuracyCell::std_error() const {
  if (samples == 0) return 0.0;
  const double p = rate();
  return std::sqrt(p * (1.0 - p) / static_cast<double>(samples));
}

const AccuracyCell& AccuracyReport::cell(const std::string& method, std::size_t step, std::size_t topk) const {
  for (const auto& c : cells) {
    if (c.method == method && c.step == step && c.topk == topk) return c;
  }
  throw UsageError("accuracy report: no cell " + method + " step " + std::to_string(step) + " top-" +
                   std::to_string(topk));
}

std::string AccuracyReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "method,step,topk,hits,samples,rate,std_error,chance\n";
  for (const auto& c : cells) {
    out << c.method << ',' << c.step << ',' << c.topk << ',' << c.hits << ',' << c.samples << ',' << c.rate()
        << ',' << c.std_error() << ',' << static_cast<double>(c.topk) / static_cast<double>(vocab) << '\n';
  }
  return out.str();
}

std::size_t token_rank(std::span<const float> scores, std::int32_t token) {
  const auto t = static_cast<std::size_t>(token);
  if (t >= scores.size()) throw UsageError("token_rank: token outside the vocabulary");
  const float st = scores[t];
  std::size_t rank = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > st || (scores[j] == st && j < t)) ++rank;
  }
  return rank;
}

AccuracyReport eval_draft_accuracy(const Transformer<float>& model, std::span<const DraftMethod> methods,
                                   std::span<const std::int32_t> tokens, const EvalOptions& options,
                                   std::span<const std::size_t> topk) {
  if (methods.empty()) throw UsageError("eval: no methods");
  if (topk.empty()) throw UsageError("eval: no top-K values");
  EvalOptions opts = options;
  for (const auto& m : methods) opts.steps = std::max(opts.steps, m.k);
  opts.validate(model.config());

  AccuracyReport report;
  report.seeds = opts.seeds;
  report.vocab = model.config().vocab_size;
  for (const auto& m : methods) {
    for (std::size_t i = 1; i <= m.k; ++i) {
      for (auto K : topk) {
        if (K == 0) throw UsageError("eval: top-K must be positive");
        report.cells.push_back({m.name, i, K, 0, 0});
      }
    }
  }
  for (auto seed : opts.seeds) {
    const auto sets = sample_splits(model, tokens, opts, seed);
    std::size_t base = 0;
    for (const auto& m : methods) {
      for (const auto& set : sets) {
        const auto scores = m.score(set.tokens, set.sources);
        for (std::size_t j = 0; j < set.sources.size(); ++j) {
          for (std::size_t i = 1; i <= m.k; ++i) {
            const std::size_t rank = token_rank(scores[j][i - 1], set.greedy[j][i]);
            for (std::size_t q = 0; q < topk.size(); ++q) {
              auto& c = report.cells[base + (i - 1) * topk.size() + q];
              c.samples += 1;
              c.hits += rank < topk[q] ? 1 : 0;
            }
          }
        }
      }
      base += m.k * topk.size();
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Similarity

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

const SimilarityPoint& SimilarityTrace::at(std::size_t step, std::size_t layer) const {
  for (const auto& p : points) {
    if (p.step == step && p.layer == layer) return p;
  }
  throw UsageError("similarity trace: no point at step " + std::to_string(step) + " layer " +
                   std::to_string(layer));
}

std::string SimilarityTrace::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "step,layer,mean_cosine,samples\n";
  for (const auto& p : points) out << p.step << ',' << p.layer << ',' << p.mean_cosine << ',' << p.samples << '\n';
  return out.str();
}

SimilarityTrace cosine_trace(const Transformer<float>& model, const TransferBundle<float>& bundle,
                             std::span<const std::int32_t> tokens, EvalOptions options) {
  const std::size_t n_layers = model.config().n_layers;
  const std::size_t k = bundle.config.k;
  options.steps = std::max(options.steps, k);
  options.tap_layers.clear();
  for (std::size_t t = bundle.config.layer(1); t <= n_layers; ++t) options.tap_layers.push_back(t);

  SimilarityTrace trace;
  std::vector<double> sums;
  for (std::size_t i = 1; i <= k; ++i) {
    for (std::size_t t = bundle.config.layer(i); t <= n_layers; ++t) {
      trace.points.push_back({i, t, 0.0, 0});
      sums.push_back(0.0);
    }
  }
  TransferForwardOptions forward_options;
  forward_options.trace_layers = options.tap_layers;
  for (auto seed : options.seeds) {
    for (const auto& set : sample_splits(model, tokens, options, seed)) {
      const auto out = transfer_forward<float>(model, bundle, set.tokens, iota_positions(set.tokens.size()),
                                               AttnMask::causal(set.tokens.size()), set.sources, nullptr,
                                               forward_options);
      for (std::size_t p = 0; p < trace.points.size(); ++p) {
        auto& point = trace.points[p];
        const auto& pseudo = out.pseudo_taps[point.step - 1].at(point.layer);
        for (std::size_t j = 0; j < set.sources.size(); ++j) {
          sums[p] += cosine_similarity(pseudo.row(j), set.states[j][point.step - 1].at(point.layer));
          point.samples += 1;
        }
      }
    }
  }
  for (std::size_t p = 0; p < trace.points.size(); ++p) {
    auto& point = trace.points[p];
    point.mean_cosine = point.samples ? sums[p] / static_cast<double>(point.samples) : 0.0;
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Layer sweep

std::string SweepReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "step,layer,fixed_layer,topk,hits,samples,rate,std_error,identity_heldout_kl,final_heldout_kl\n";
  for (const auto& row : rows) {
    for (const auto& c : row.accuracy) {
      out << step << ',' << row.layer << ',' << fixed_layer << ',' << c.topk << ',' << c.hits << ',' << c.samples
          << ',' << c.rate() << ',' << c.std_error() << ',' << row.identity_heldout_kl << ','
          << row.final_heldout_kl << '\n';
    }
  }
  return out.str();
}

SweepReport layer_sweep(const Transformer<float>& model, std::span<const std::int32_t> train_tokens,
                        std::span<const std::int32_t> heldout_tokens, const SweepOptions& sweep,
                        const EvalOptions& eval, std::span<const std::size_t> topk, const TrainLogger& log) {
  const std::size_t n_layers = model.config().n_layers;
  if (sweep.step != 1 && sweep.step != 2) throw UsageError("layer sweep: step must be 1 or 2");
  if (sweep.layers.empty()) throw UsageError("layer sweep: no candidate layers");
  if (sweep.step == 2 && (sweep.fixed_layer < 1 || sweep.fixed_layer >= n_layers)) {
    throw UsageError("layer sweep: fixed step-1 layer out of range");
  }
  for (auto t : sweep.layers) {
    const std::size_t lowest = sweep.step == 2 ? sweep.fixed_layer + 1 : 1;
    if (t < lowest || t > n_layers) {
      throw UsageError("layer sweep: layer " + std::to_string(t) + " out of range [" + std::to_string(lowest) +
                       ", " + std::to_string(n_layers) + "]");
    }
  }
  const std::uint64_t base_hash = model_fingerprint(model);
  const std::size_t d = model.config().d_model;

  // Step 1 at the fixed layer is shared by every step-2 candidate.
  TransferBundle<float> lower;
  if (sweep.step == 2) {
    TransferConfig c;
    c.k = 1;
    c.layers = {sweep.fixed_layer};
    c.mask_mode = sweep.mask_mode;
    c.bias = sweep.bias;
    lower = TransferBundle<float>::init(c, d, base_hash, sweep.init_seed);
    transfer_train(model, train_tokens, heldout_tokens, lower, sweep.hyper, {}, log);
  }

  SweepReport report;
  report.step = sweep.step;
  report.fixed_layer = sweep.step == 2 ? sweep.fixed_layer : 0;
  for (auto t : sweep.layers) {
    TransferConfig c;
    c.k = sweep.step;
    c.layers = sweep.step == 2 ? std::vector<std::size_t>{sweep.fixed_layer, t} : std::vector<std::size_t>{t};
    c.mask_mode = sweep.mask_mode;
    c.bias = sweep.bias;
    auto bundle = TransferBundle<float>::init(c, d, base_hash, sweep.init_seed);
    if (sweep.step == 2) {
      bundle.weights[0] = lower.weights[0].clone();
      if (c.bias) bundle.biases[0] = lower.biases[0].clone();
    }
    const auto trained =
        transfer_train(model, train_tokens, heldout_tokens, bundle, sweep.hyper, {sweep.step}, log);
    SweepRow row;
    row.layer = t;
    for (const auto& s : trained.steps) {
      if (s.step == sweep.step) {
        row.identity_heldout_kl = s.identity_heldout_kl;
        row.final_heldout_kl = s.final_heldout_kl;
      }
    }
    const DraftMethod method = transfer_method(model, bundle, "layer" + std::to_string(t));
    const auto acc = eval_draft_accuracy(model, std::span<const DraftMethod>(&method, 1), heldout_tokens, eval, topk);
    for (const auto& cell : acc.cells) {
      if (cell.step == sweep.step) row.accuracy.push_back(cell);
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Mask ablation

std::string AblationReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "mask_mode,step,topk,hits,samples,rate,std_error,step1_bit_identical\n";
  for (const auto& c : accuracy.cells) {
    out << c.method << ',' << c.step << ',' << c.topk << ',' << c.hits << ',' << c.samples << ',' << c.rate() << ','
        << c.std_error() << ',' << (step1_bit_identical ? "true" : "false") << '\n';
  }
  return out.str();
}

AblationReport mask_ablation(const Transformer<float>& model, const TransferBundle<float>& bundle,
                             std::span<const std::int32_t> tokens, const EvalOptions& options,
                             std::span<const std::size_t> topk) {
  TransferBundle<float> open = bundle;
  open.config.mask_mode = MaskMode::kNoMasked;
  TransferBundle<float> masked = bundle;
  masked.config.mask_mode = MaskMode::kMasked;

  // eval_draft_accuracy scores every set with the first method before the
  // second, so a queue pairs their step-1 outputs.
  auto pending = std::make_shared<std::deque<std::vector<float>>>();
  auto identical = std::make_shared<bool>(true);
  std::vector<DraftMethod> methods{transfer_method(model, open, to_string(MaskMode::kNoMasked)),
                                   transfer_method(model, masked, to_string(MaskMode::kMasked))};
  auto open_score = methods[0].score;
  methods[0].score = [open_score, pending](std::span<const std::int32_t> t, std::span<const std::size_t> s) {
    auto scores = open_score(t, s);
    for (const auto& per_source : scores) pending->push_back(per_source[0]);
    return scores;
  };
  auto masked_score = methods[1].score;
  methods[1].score = [masked_score, pending, identical](std::span<const std::int32_t> t,
                                                        std::span<const std::size_t> s) {
    auto scores = masked_score(t, s);
    for (const auto& per_source : scores) {
      if (pending->empty()) throw UsageError("mask ablation: step-1 outputs out of step");
      if (pending->front() != per_source[0]) *identical = false;
      pending->pop_front();
    }
    return scores;
  };

  AblationReport report;
  report.accuracy = eval_draft_accuracy(model, methods, tokens, options, topk);
  report.step1_bit_identical = *identical && pending->empty();
  return report;
}

// ---------------------------------------------------------------------------
// Forward microbenchmark

const TimingRow& TimingTable::at(std::size_t cache_length, std::size_t width) const {
  for (const auto& r : rows) {
    if (r.cache_length == cache_length && r.width == width) return r;
  }
  throw UsageError("timing table: no row for cache " + std::to_string(cache_length) + " width " +
                   std::to_string(width));
}

double TimingTable::width_ratio(std::size_t cache_length, std::size_t width) const {
  return at(cache_length, width).median_seconds / at(cache_length, 1).median_seconds;
}

std::string TimingTable::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "cache_length,width,median_seconds,min_seconds,trials,ratio_vs_width1\n";
  for (const auto& r : rows) {
    out << r.cache_length << ',' << r.width << ',' << r.median_seconds << ',' << r.min_seconds << ',' << r.trials
        << ',';
    bool has_base = false;
    for (const auto& b : rows) has_base = has_base || (b.cache_length == r.cache_length && b.width == 1);
    if (has_base) out << width_ratio(r.cache_length, r.width);
    out << '\n';
  }
  return out.str();
}

TimingTable forward_microbench(const Transformer<float>& model, std::span<const std::size_t> cache_lengths,
                               std::span<const std::size_t> widths, std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw UsageError("microbench: trials must be positive");
  const std::size_t max_pos = model.config().max_positions;
  const auto vocab = static_cast<std::int32_t>(model.config().vocab_size);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> token(0, vocab - 1);
  constexpr std::size_t kWarmup = 3;

  TimingTable table;
  for (auto c : cache_lengths) {
    for (auto w : widths) {
      if (w == 0 || c + w > max_pos) {
        throw UsageError("microbench: cache " + std::to_string(c) + " + width " + std::to_string(w) +
                         " does not fit max_positions");
      }
    }
    std::vector<std::int32_t> prefix(c);
    for (auto& t : prefix) t = token(rng);
    auto cache = model.make_cache();
    if (c > 0) model.forward(prefix, iota_positions(c), AttnMask::causal(c), &cache);
    for (auto w : widths) {
      std::vector<std::int32_t> input(w);
      for (auto& t : input) t = token(rng);
      const auto positions = iota_positions(w, static_cast<std::int32_t>(c));
      const AttnMask mask = AttnMask::causal(w, c);
      std::vector<double> seconds;
      for (std::size_t trial = 0; trial < kWarmup + trials; ++trial) {
        const auto begin = std::chrono::steady_clock::now();
        model.forward(input, positions, mask, &cache);
        const auto end = std::chrono::steady_clock::now();
        cache.truncate(c);
        if (trial >= kWarmup) seconds.push_back(std::chrono::duration<double>(end - begin).count());
      }
      std::sort(seconds.begin(), seconds.end());
      const std::size_t n = seconds.size();
      const double median = n % 2 ? seconds[n / 2] : 0.5 * (seconds[n / 2 - 1] + seconds[n / 2]);
      table.rows.push_back({c, w, median, seconds.front(), n});
    }
  }
  return table;
}

void write_report(const std::filesystem::path& path, const std::string& csv) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()});
}

}  // namespace htd
