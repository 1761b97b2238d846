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

#include "htd/numerics/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "htd/numerics/kernels.hpp"

namespace htd {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (!t.defined() || t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " +
                     (t.defined() ? shape_string(t.shape()) : std::string("undefined")));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

// Grad buffer of a parent, or nullptr when it is frozen.
template <typename T>
T* grad_ptr(const NodePtr<T>& node) {
  return node->requires_grad ? node->grad_buffer().data() : nullptr;
}

template <typename T>
std::vector<T> log_softmax_row(const T* x, std::size_t n) {
  T mx = *std::max_element(x, x + n);
  T total = 0;
  for (std::size_t j = 0; j < n; ++j) total += std::exp(x[j] - mx);
  const T lse = mx + std::log(total);
  std::vector<T> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] - lse;
  return out;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  std::vector<T> out(m * n);
  kernels::gemm<T>(m, k, n, a.values().data(), k, b.values().data(), n, out.data(), n);
  NodePtr<T> an = a.node(), bn = b.node();
  return detail::make_result<T>({m, n}, std::move(out), "matmul", {&a, &b},
                                [an, bn, m, k, n](detail::Node<T>& self) {
    const T* g = self.grad.data();
    if (T* ga = grad_ptr(an)) {
      std::vector<T> bt(n * k), tmp(m * k);
      kernels::transpose<T>(k, n, bn->data->data(), bt.data());
      kernels::gemm<T>(m, n, k, g, n, bt.data(), k, tmp.data(), k);
      for (std::size_t i = 0; i < m * k; ++i) ga[i] += tmp[i];
    }
    if (T* gb = grad_ptr(bn)) {
      std::vector<T> at(k * m), tmp(k * n);
      kernels::transpose<T>(m, k, an->data->data(), at.data());
      kernels::gemm<T>(k, m, n, at.data(), m, g, n, tmp.data(), n);
      for (std::size_t i = 0; i < k * n; ++i) gb[i] += tmp[i];
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  NodePtr<T> an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), "add", {&a, &b},
                                [an, bn](detail::Node<T>& self) {
    for (const auto& p : {an, bn}) {
      if (T* gp = grad_ptr(p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) gp[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_matrix(x, "add_bias");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (bias.numel() != cols) throw ShapeError("add_bias: bias length does not match columns");
  std::vector<T> out(x.numel());
  auto xv = x.values(), bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] + bv[c];
  NodePtr<T> xn = x.node(), bn = bias.node();
  return detail::make_result<T>(x.shape(), std::move(out), "add_bias", {&x, &bias},
                                [xn, bn, rows, cols](detail::Node<T>& self) {
    const T* g = self.grad.data();
    if (T* gx = grad_ptr(xn)) {
      for (std::size_t i = 0; i < rows * cols; ++i) gx[i] += g[i];
    }
    if (T* gb = grad_ptr(bn)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  NodePtr<T> an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {&a, &b},
                                [an, bn](detail::Node<T>& self) {
    const T* g = self.grad.data();
    const T* ad = an->data->data();
    const T* bd = bn->data->data();
    if (T* ga = grad_ptr(an)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i] * bd[i];
    }
    if (T* gb = grad_ptr(bn)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += g[i] * ad[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (T& v : out) v *= factor;
  NodePtr<T> an = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {&a},
                                [an, factor](detail::Node<T>& self) {
    if (T* ga = grad_ptr(an)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * factor;
    }
  });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  auto av = a.values();
  // sigmoid(x) = 1 / (1 + exp(-x)), kept for the backward pass
  std::vector<T> sig(av.size());
  for (std::size_t i = 0; i < sig.size(); ++i) sig[i] = -av[i];
  kernels::exp_inplace(sig.data(), sig.size());
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < sig.size(); ++i) {
    sig[i] = T(1) / (T(1) + sig[i]);
    out[i] = av[i] * sig[i];
  }
  if (!a.requires_grad()) sig.clear();
  NodePtr<T> an = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), "silu", {&a},
                                [an, sig = std::move(sig)](detail::Node<T>& self) {
    if (T* ga = grad_ptr(an)) {
      const T* x = an->data->data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T s = sig[i];
        ga[i] += self.grad[i] * (s * (T(1) + x[i] * (T(1) - s)));
      }
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.values()) total += v;
  NodePtr<T> an = a.node();
  return detail::make_result<T>(Shape{}, {total}, "sum", {&a}, [an](detail::Node<T>& self) {
    if (T* ga = grad_ptr(an)) {
      for (std::size_t i = 0; i < an->data->size(); ++i) ga[i] += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& weight, T eps) {
  require_matrix(x, "rms_norm");
  const std::size_t rows = x.rows(), d = x.cols();
  if (weight.numel() != d) throw ShapeError("rms_norm: weight length does not match width");
  std::vector<T> out(x.numel());
  std::vector<T> inv(rows);
  const T* xv = x.values().data();
  const T* w = weight.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * d;
    const T ms = kernels::dot(xr, xr, d) / static_cast<T>(d);
    inv[r] = T(1) / std::sqrt(ms + eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xr[c] * inv[r] * w[c];
  }
  NodePtr<T> xn = x.node(), wn = weight.node();
  return detail::make_result<T>(x.shape(), std::move(out), "rms_norm", {&x, &weight},
                                [xn, wn, rows, d, inv = std::move(inv)](detail::Node<T>& self) {
    const T* g = self.grad.data();
    const T* xd = xn->data->data();
    const T* wd = wn->data->data();
    T* gx = grad_ptr(xn);
    T* gw = grad_ptr(wn);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = xd + r * d;
      const T* gr = g + r * d;
      if (gx) {
        T proj = 0;
        for (std::size_t c = 0; c < d; ++c) proj += gr[c] * wd[c] * xr[c];
        const T coef = inv[r] * inv[r] * inv[r] * proj / static_cast<T>(d);
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += inv[r] * wd[c] * gr[c] - xr[c] * coef;
      }
      if (gw) {
        for (std::size_t c = 0; c < d; ++c) gw[c] += gr[c] * xr[c] * inv[r];
      }
    }
  });
}

template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::span<const std::int32_t> positions, std::size_t n_heads,
               double theta) {
  require_matrix(x, "rope");
  const std::size_t rows = x.rows(), d = x.cols();
  if (positions.size() != rows) throw ShapeError("rope: one position id per row required");
  if (n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0) {
    throw ShapeError("rope: head dimension must be even");
  }
  const std::size_t hd = d / n_heads, half = hd / 2;
  std::vector<T> cs(rows * half), sn(rows * half);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double inv_freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double angle = static_cast<double>(positions[r]) * inv_freq;
      cs[r * half + i] = static_cast<T>(std::cos(angle));
      sn[r * half + i] = static_cast<T>(std::sin(angle));
    }
  }
  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t o = r * d + h * hd + 2 * i;
        const T c = cs[r * half + i], s = sn[r * half + i];
        out[o] = xv[o] * c - xv[o + 1] * s;
        out[o + 1] = xv[o] * s + xv[o + 1] * c;
      }
    }
  }
  NodePtr<T> xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), "rope", {&x},
                                [xn, rows, d, hd, half, n_heads, cs = std::move(cs),
                                 sn = std::move(sn)](detail::Node<T>& self) {
    T* gx = grad_ptr(xn);
    if (!gx) return;
    const T* g = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        for (std::size_t i = 0; i < half; ++i) {
          const std::size_t o = r * d + h * hd + 2 * i;
          const T c = cs[r * half + i], s = sn[r * half + i];
          gx[o] += g[o] * c + g[o + 1] * s;
          gx[o + 1] += -g[o] * s + g[o + 1] * c;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const KeyValuePrefix<T>& prefix, const AttnMask& mask,
                           std::size_t n_heads) {
  require_matrix(q, "attention");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t n = q.rows(), d = q.cols(), c = prefix.entries, cols = c + n;
  if (n_heads == 0 || d % n_heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (mask.rows() != n || mask.cols() != cols) {
    throw ShapeError("attention: mask is " + std::to_string(mask.rows()) + "x" +
                     std::to_string(mask.cols()) + ", expected " + std::to_string(n) + "x" +
                     std::to_string(cols));
  }
  if (prefix.keys.size() < c * d || prefix.values.size() < c * d) {
    throw ShapeError("attention: prefix buffers shorter than entries");
  }
  const std::size_t hd = d / n_heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(hd));

  // Keys and values of all columns, [prefix | current].
  std::vector<T> keys(cols * d), values(cols * d);
  std::copy_n(prefix.keys.begin(), c * d, keys.begin());
  std::copy_n(prefix.values.begin(), c * d, values.begin());
  std::copy(k.values().begin(), k.values().end(), keys.begin() + static_cast<std::ptrdiff_t>(c * d));
  std::copy(v.values().begin(), v.values().end(), values.begin() + static_cast<std::ptrdiff_t>(c * d));

  // Permitted keys of row r lie in [span_lo[r], span_hi[r]).
  std::vector<std::size_t> span_lo(n), span_hi(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* bits = mask.row_bits(r);
    const auto* first = std::find(bits, bits + cols, std::uint8_t{1});
    if (first == bits + cols) throw UsageError("attention: query row with no permitted keys");
    std::size_t last = cols;
    while (!bits[last - 1]) --last;
    span_lo[r] = static_cast<std::size_t>(first - bits);
    span_hi[r] = last;
  }

  // Dense probabilities [head][row][col]; masked entries are exactly zero.
  // Rows are processed in blocks restricted to the block's permitted column
  // span. Skipping zero-probability columns leaves every fma chain unchanged,
  // so a row's output never depends on its block.
  constexpr std::size_t kBlock = 32;
  std::vector<T> probs(n_heads * n * cols, T(0));
  std::vector<T> out(n * d, T(0));
  std::vector<T> kt(hd * cols);
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t e = 0; e < hd; ++e) kt[e * cols + j] = keys[j * d + h * hd + e];
    }
    T* ph = probs.data() + h * n * cols;
    for (std::size_t r0 = 0; r0 < n; r0 += kBlock) {
      const std::size_t r1 = std::min(n, r0 + kBlock);
      const std::size_t lo = *std::min_element(span_lo.begin() + r0, span_lo.begin() + r1);
      const std::size_t hi = *std::max_element(span_hi.begin() + r0, span_hi.begin() + r1);
      kernels::gemm(r1 - r0, hd, hi - lo, q.values().data() + r0 * d + h * hd, d, kt.data() + lo, cols,
                    ph + r0 * cols + lo, cols);
      for (std::size_t r = r0; r < r1; ++r) {
        T* row = ph + r * cols;
        std::fill(row + lo, row + span_lo[r], T(0));
        std::fill(row + span_hi[r], row + hi, T(0));
        kernels::masked_softmax(row + span_lo[r], mask.row_bits(r) + span_lo[r], span_hi[r] - span_lo[r],
                                scale_factor);
      }
      kernels::gemm(r1 - r0, hi - lo, hd, ph + r0 * cols + lo, cols, values.data() + lo * d + h * hd, d,
                    out.data() + r0 * d + h * hd, d);
    }
  }

  const bool recording = q.requires_grad() || k.requires_grad() || v.requires_grad();
  if (!recording) {
    keys.clear();
    values.clear();
    probs.clear();
  }
  NodePtr<T> qn = q.node(), kn = k.node(), vn = v.node();
  return detail::make_result<T>(
      {n, d}, std::move(out), "attention", {&q, &k, &v},
      [qn, kn, vn, n, d, c, cols, hd, n_heads, scale_factor, probs = std::move(probs), keys = std::move(keys),
       values = std::move(values), span_lo = std::move(span_lo),
       span_hi = std::move(span_hi)](detail::Node<T>& self) {
        const T* g = self.grad.data();
        const T* qd = qn->data->data();
        T* gq = grad_ptr(qn);
        T* gk = grad_ptr(kn);
        T* gv = grad_ptr(vn);
        std::vector<T> vt(hd * cols), dscore(kBlock * cols), block_t(cols * kBlock), tmp(cols * hd);
        // dst[r, :] += src[r, :] for `rows` rows of one head slice.
        auto accumulate = [&](T* dst, std::size_t rows, const T* src) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t e = 0; e < hd; ++e) dst[r * d + e] += src[r * hd + e];
          }
        };
        for (std::size_t h = 0; h < n_heads; ++h) {
          const T* ph = probs.data() + h * n * cols;
          for (std::size_t j = 0; j < cols; ++j) {
            for (std::size_t e = 0; e < hd; ++e) vt[e * cols + j] = values[j * d + h * hd + e];
          }
          for (std::size_t r0 = 0; r0 < n; r0 += kBlock) {
            const std::size_t rb = std::min(n, r0 + kBlock) - r0;
            const std::size_t lo = *std::min_element(span_lo.begin() + r0, span_lo.begin() + r0 + rb);
            const std::size_t hi = *std::max_element(span_hi.begin() + r0, span_hi.begin() + r0 + rb);
            const std::size_t w = hi - lo;
            const T* pb = ph + r0 * cols + lo;
            // dscore holds the block's columns [lo, hi) with leading dimension w.
            kernels::gemm(rb, hd, w, g + r0 * d + h * hd, d, vt.data() + lo, cols, dscore.data(), w);
            for (std::size_t r = 0; r < rb; ++r) {
              const T* p = pb + r * cols;
              T* ds = dscore.data() + r * w;
              T weighted = 0;
              for (std::size_t j = 0; j < w; ++j) weighted += p[j] * ds[j];
              for (std::size_t j = 0; j < w; ++j) ds[j] = p[j] * (ds[j] - weighted) * scale_factor;
            }
            if (gq) {
              kernels::gemm(rb, w, hd, dscore.data(), w, keys.data() + lo * d + h * hd, d, tmp.data(), hd);
              accumulate(gq + r0 * d + h * hd, rb, tmp.data());
            }
            // Gradients reach only the current rows' keys and values.
            const std::size_t klo = std::max(lo, c);
            if (hi <= klo) continue;
            const std::size_t kw = hi - klo;
            if (gk) {
              kernels::transpose(rb, w, dscore.data(), block_t.data());
              kernels::gemm(kw, rb, hd, block_t.data() + (klo - lo) * rb, rb, qd + r0 * d + h * hd, d, tmp.data(), hd);
              accumulate(gk + (klo - c) * d + h * hd, kw, tmp.data());
            }
            if (gv) {
              for (std::size_t r = 0; r < rb; ++r) {
                for (std::size_t j = 0; j < kw; ++j) block_t[j * rb + r] = pb[r * cols + (klo - lo) + j];
              }
              kernels::gemm(kw, rb, hd, block_t.data(), rb, g + r0 * d + h * hd, d, tmp.data(), hd);
              accumulate(gv + (klo - c) * d + h * hd, kw, tmp.data());
            }
          }
        }
      });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols(), n = ids.size();
  std::vector<T> out(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw UsageError("embedding: token id " + std::to_string(ids[r]) + " out of range");
    }
    auto src = table.row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  NodePtr<T> tn = table.node();
  std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
  return detail::make_result<T>({n, d}, std::move(out), "embedding", {&table},
                                [tn, d, ids = std::move(id_copy)](detail::Node<T>& self) {
    if (T* gt = grad_ptr(tn)) {
      for (std::size_t r = 0; r < ids.size(); ++r) {
        T* dst = gt + static_cast<std::size_t>(ids[r]) * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += self.grad[r * d + c];
      }
    }
  });
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != d) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  std::vector<T> out;
  out.reserve(rows * d);
  bool any = false;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    any = any || p.requires_grad();
    nodes.push_back(p.node());
  }
  Tensor<T> result = detail::make_result<T>({rows, d}, std::move(out), "concat_rows", {}, {});
  if (any) {
    auto& node = *result.node();
    node.requires_grad = true;
    node.parents = nodes;
    node.backward = [nodes](detail::Node<T>& self) {
      std::size_t off = 0;
      for (const auto& p : nodes) {
        const std::size_t len = p->data->size();
        if (T* gp = grad_ptr(p)) {
          for (std::size_t i = 0; i < len; ++i) gp[i] += self.grad[off + i];
        }
        off += len;
      }
    };
  }
  return result;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_rows");
  if (begin > end || end > x.rows()) throw ShapeError("slice_rows: range out of bounds");
  const std::size_t d = x.cols();
  std::vector<T> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin * d),
                     x.values().begin() + static_cast<std::ptrdiff_t>(end * d));
  NodePtr<T> xn = x.node();
  return detail::make_result<T>({end - begin, d}, std::move(out), "slice_rows", {&x},
                                [xn, begin, d](detail::Node<T>& self) {
    if (T* gx = grad_ptr(xn)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[begin * d + i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  require_matrix(x, "gather_rows");
  const std::size_t d = x.cols();
  std::vector<T> out(rows.size() * d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.rows()) throw ShapeError("gather_rows: row index out of range");
    auto src = x.row(rows[r]);
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  NodePtr<T> xn = x.node();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return detail::make_result<T>({rows.size(), d}, std::move(out), "gather_rows", {&x},
                                [xn, d, idx = std::move(idx)](detail::Node<T>& self) {
    if (T* gx = grad_ptr(xn)) {
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) gx[idx[r] * d + c] += self.grad[r * d + c];
    }
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t rows = x.rows(), n = x.cols();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    auto p = softmax<T>(x.values().subspan(r * n, n));
    std::copy(p.begin(), p.end(), out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  NodePtr<T> xn = x.node();
  std::vector<T> probs = out;
  return detail::make_result<T>(x.shape(), std::move(out), "softmax", {&x},
                                [xn, rows, n, probs = std::move(probs)](detail::Node<T>& self) {
    if (T* gx = grad_ptr(xn)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* p = probs.data() + r * n;
        const T* g = self.grad.data() + r * n;
        T inner = 0;
        for (std::size_t j = 0; j < n; ++j) inner += p[j] * g[j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += p[j] * (g[j] - inner);
      }
    }
  });
}

template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t rows = logits.rows(), n = logits.cols();
  if (targets.size() != rows) throw ShapeError("cross_entropy: one target per row required");
  T total = 0;
  std::vector<T> logp(rows * n);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= n) {
      throw UsageError("cross_entropy: target out of range");
    }
    auto lp = log_softmax_row(logits.values().data() + r * n, n);
    total -= lp[static_cast<std::size_t>(targets[r])];
    std::copy(lp.begin(), lp.end(), logp.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  NodePtr<T> ln = logits.node();
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return detail::make_result<T>(Shape{}, {total}, "cross_entropy", {&logits},
                                [ln, rows, n, logp = std::move(logp),
                                 tgt = std::move(tgt)](detail::Node<T>& self) {
    if (T* gl = grad_ptr(ln)) {
      const T g = self.grad[0];
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) gl[r * n + j] += g * std::exp(logp[r * n + j]);
        gl[r * n + static_cast<std::size_t>(tgt[r])] -= g;
      }
    }
  });
}

template <typename T>
Tensor<T> kl_to_target_sum(const Tensor<T>& logits, const Tensor<T>& target_probs,
                           KlDirection direction) {
  require_matrix(logits, "kl");
  require_same_shape(logits, target_probs, "kl");
  const std::size_t rows = logits.rows(), n = logits.cols();
  static constexpr T kFloor = T(1e-12);
  const T* tv = target_probs.values().data();
  std::vector<T> logp(rows * n);
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto lp = log_softmax_row(logits.values().data() + r * n, n);
    std::copy(lp.begin(), lp.end(), logp.begin() + static_cast<std::ptrdiff_t>(r * n));
    for (std::size_t j = 0; j < n; ++j) {
      const T t = tv[r * n + j];
      if (direction == KlDirection::kTeacherFirst) {
        if (t > 0) total += t * (std::log(t) - lp[j]);
      } else {
        const T p = std::exp(lp[j]);
        total += p * (lp[j] - std::log(std::max(t, kFloor)));
      }
    }
  }
  NodePtr<T> ln = logits.node();
  NodePtr<T> tn = target_probs.node();
  return detail::make_result<T>(Shape{}, {total}, "kl", {&logits},
                                [ln, tn, rows, n, direction, logp = std::move(logp)](detail::Node<T>& self) {
    T* gl = grad_ptr(ln);
    if (!gl) return;
    const T g = self.grad[0];
    const T* t = tn->data->data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* lp = logp.data() + r * n;
      const T* tr = t + r * n;
      if (direction == KlDirection::kTeacherFirst) {
        T mass = 0;
        for (std::size_t j = 0; j < n; ++j) mass += tr[j];
        for (std::size_t j = 0; j < n; ++j) gl[r * n + j] += g * (std::exp(lp[j]) * mass - tr[j]);
      } else {
        T expect = 0;
        for (std::size_t j = 0; j < n; ++j) {
          expect += std::exp(lp[j]) * (lp[j] - std::log(std::max(tr[j], kFloor)));
        }
        for (std::size_t j = 0; j < n; ++j) {
          const T u = lp[j] - std::log(std::max(tr[j], kFloor));
          gl[r * n + j] += g * std::exp(lp[j]) * (u - expect);
        }
      }
    }
  });
}

template <typename T>
std::vector<T> softmax(std::span<const T> x) {
  std::vector<T> out(x.size());
  if (x.empty()) return out;
  const T mx = *std::max_element(x.begin(), x.end());
  T total = 0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    out[j] = std::exp(x[j] - mx);
    total += out[j];
  }
  for (T& v : out) v /= total;
  return out;
}

template <typename T>
T kl_divergence(std::span<const T> target, std::span<const T> approx) {
  if (target.size() != approx.size()) throw ShapeError("kl_divergence: length mismatch");
  auto check = [](std::span<const T> p, const char* which) {
    T total = 0;
    for (T v : p) {
      if (!(v >= 0)) throw UsageError(std::string("kl_divergence: negative entry in ") + which);
      total += v;
    }
    if (std::abs(total - T(1)) > T(1e-5)) {
      throw UsageError(std::string("kl_divergence: ") + which + " is not normalized");
    }
  };
  check(target, "target");
  check(approx, "approx");
  T total = 0;
  for (std::size_t j = 0; j < target.size(); ++j) {
    if (target[j] == 0) continue;
    total += target[j] * (std::log(target[j]) - std::log(std::max(approx[j], T(1e-12))));
  }
  return total;
}

template <typename T>
std::int32_t argmax_token(std::span<const T> logits) {
  if (logits.empty()) throw UsageError("argmax_token: empty logits");
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j) {
    if (logits[j] > logits[best]) best = j;
  }
  return static_cast<std::int32_t>(best);
}

template <typename T>
std::vector<std::int32_t> top_k(std::span<const T> scores, std::size_t k) {
  std::vector<std::int32_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::int32_t a, std::int32_t b) {
                      const T sa = scores[static_cast<std::size_t>(a)];
                      const T sb = scores[static_cast<std::size_t>(b)];
                      return sa > sb || (sa == sb && a < b);
                    });
  idx.resize(k);
  return idx;
}

#define HTD_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> silu<T>(const Tensor<T>&);                                                  \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                   \
  template Tensor<T> rms_norm<T>(const Tensor<T>&, const Tensor<T>&, T);                         \
  template Tensor<T> rope<T>(const Tensor<T>&, std::span<const std::int32_t>, std::size_t, double); \
  template Tensor<T> masked_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                         const KeyValuePrefix<T>&, const AttnMask&, std::size_t); \
  template Tensor<T> embedding<T>(const Tensor<T>&, std::span<const std::int32_t>);              \
  template Tensor<T> concat_rows<T>(std::span<const Tensor<T>>);                                 \
  template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const std::size_t>);             \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                          \
  template Tensor<T> cross_entropy_sum<T>(const Tensor<T>&, std::span<const std::int32_t>);      \
  template Tensor<T> kl_to_target_sum<T>(const Tensor<T>&, const Tensor<T>&, KlDirection);       \
  template std::vector<T> softmax<T>(std::span<const T>);                                        \
  template T kl_divergence<T>(std::span<const T>, std::span<const T>);                           \
  template std::int32_t argmax_token<T>(std::span<const T>);                                     \
  template std::vector<std::int32_t> top_k<T>(std::span<const T>, std::size_t);

HTD_INSTANTIATE_OPS(float)
HTD_INSTANTIATE_OPS(double)

#undef HTD_INSTANTIATE_OPS

}  // namespace htd
