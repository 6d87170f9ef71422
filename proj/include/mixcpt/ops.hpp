// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable operations recorded on a Graph. Broadcasting is limited to
// exact shape matches and size-1 (scalar) operands.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mixcpt/error.hpp"
#include "mixcpt/graph.hpp"
#include "mixcpt/kernels.hpp"
#include "mixcpt/tensor.hpp"

namespace mixcpt {

using TokenId = std::uint32_t;

namespace detail {

template <Real T>
Graph<T>& same_graph(const Var<T>& a, const Var<T>& b) {
  if (&a.graph() != &b.graph()) throw GraphError("operands recorded on different graphs");
  return a.graph();
}

template <Real T>
void require_matrix(const Var<T>& v, const char* op) {
  if (v.value().rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(v.shape()));
  }
}

enum class Bcast { kSame, kRhsScalar, kLhsScalar };

template <Real T>
Bcast broadcast_kind(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::kSame;
  if (b.value().size() == 1) return Bcast::kRhsScalar;
  if (a.value().size() == 1) return Bcast::kLhsScalar;
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

// Adds `scale * g` into a parent gradient, summing when the parent is a
// broadcast scalar.
template <Real T>
void accumulate_into(Graph<T>& g, std::size_t parent, std::span<const T> grad, bool parent_is_scalar,
                     double scale = 1.0) {
  if (!g.needs_grad(parent)) return;
  auto pg = g.grad_of(parent);
  if (parent_is_scalar && grad.size() != 1) {
    double s = 0.0;
    for (auto v : grad) s += static_cast<double>(v);
    pg[0] = static_cast<T>(pg[0] + scale * s);
  } else {
    for (std::size_t i = 0; i < grad.size(); ++i) pg[i] = static_cast<T>(pg[i] + scale * grad[i]);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <Real T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  const auto kind = detail::broadcast_kind(a, b, "add");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(kind == detail::Bcast::kLhsScalar ? bv.shape() : av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = kind == detail::Bcast::kLhsScalar ? av[0] : av[i];
    const T y = kind == detail::Bcast::kRhsScalar ? bv[0] : bv[i];
    out[i] = x + y;
  }
  const auto ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib},
                  [ia, ib, kind](Graph<T>& gr, std::size_t self) {
                    auto go = gr.value(self).grad();
                    detail::accumulate_into(gr, ia, go, kind == detail::Bcast::kLhsScalar);
                    detail::accumulate_into(gr, ib, go, kind == detail::Bcast::kRhsScalar);
                  },
                  "add");
}

template <Real T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  const auto kind = detail::broadcast_kind(a, b, "sub");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(kind == detail::Bcast::kLhsScalar ? bv.shape() : av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = kind == detail::Bcast::kLhsScalar ? av[0] : av[i];
    const T y = kind == detail::Bcast::kRhsScalar ? bv[0] : bv[i];
    out[i] = x - y;
  }
  const auto ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib},
                  [ia, ib, kind](Graph<T>& gr, std::size_t self) {
                    auto go = gr.value(self).grad();
                    detail::accumulate_into(gr, ia, go, kind == detail::Bcast::kLhsScalar);
                    detail::accumulate_into(gr, ib, go, kind == detail::Bcast::kRhsScalar, -1.0);
                  },
                  "sub");
}

template <Real T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  const auto kind = detail::broadcast_kind(a, b, "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(kind == detail::Bcast::kLhsScalar ? bv.shape() : av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = kind == detail::Bcast::kLhsScalar ? av[0] : av[i];
    const T y = kind == detail::Bcast::kRhsScalar ? bv[0] : bv[i];
    out[i] = x * y;
  }
  const auto ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib},
                  [ia, ib, kind](Graph<T>& gr, std::size_t self) {
                    const auto& o = gr.value(self);
                    const auto& x = gr.value(ia);
                    const auto& y = gr.value(ib);
                    std::vector<T> ga(o.size()), gb(o.size());
                    for (std::size_t i = 0; i < o.size(); ++i) {
                      const T xv = kind == detail::Bcast::kLhsScalar ? x[0] : x[i];
                      const T yv = kind == detail::Bcast::kRhsScalar ? y[0] : y[i];
                      ga[i] = o.grad()[i] * yv;
                      gb[i] = o.grad()[i] * xv;
                    }
                    detail::accumulate_into<T>(gr, ia, ga, kind == detail::Bcast::kLhsScalar);
                    detail::accumulate_into<T>(gr, ib, gb, kind == detail::Bcast::kRhsScalar);
                  },
                  "mul");
}

template <Real T>
Var<T> scale(const Var<T>& a, double s) {
  auto& g = a.graph();
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = static_cast<T>(s * av[i]);
  const auto ia = a.id();
  return g.record(std::move(out), {ia},
                  [ia, s](Graph<T>& gr, std::size_t self) {
                    detail::accumulate_into(gr, ia, gr.value(self).grad(), false, s);
                  },
                  "scale");
}

template <Real T>
Var<T> sum(const Var<T>& a) {
  auto& g = a.graph();
  double s = 0.0;
  for (auto v : a.value().data()) s += static_cast<double>(v);
  const auto ia = a.id();
  return g.record(Tensor<T>::scalar(static_cast<T>(s)), {ia},
                  [ia](Graph<T>& gr, std::size_t self) {
                    const T go = gr.value(self).grad()[0];
                    auto pg = gr.grad_of(ia);
                    for (auto& v : pg) v += go;
                  },
                  "sum");
}

template <Real T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// GELU, tanh approximation.
template <Real T>
Var<T> gelu(const Var<T>& a) {
  auto& g = a.graph();
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = static_cast<T>(kernels::gelu(av[i]));
  const auto ia = a.id();
  return g.record(std::move(out), {ia},
                  [ia](Graph<T>& gr, std::size_t self) {
                    const auto go = gr.value(self).grad();
                    const auto& x = gr.value(ia);
                    auto pg = gr.grad_of(ia);
                    for (std::size_t i = 0; i < x.size(); ++i) {
                      pg[i] = static_cast<T>(pg[i] + go[i] * kernels::gelu_grad(x[i]));
                    }
                  },
                  "gelu");
}

/// log(1 + exp(x)); softplus(-z) = -log(sigmoid(z)).
template <Real T>
Var<T> softplus(const Var<T>& a) {
  auto& g = a.graph();
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = static_cast<T>(kernels::softplus(av[i]));
  const auto ia = a.id();
  return g.record(std::move(out), {ia},
                  [ia](Graph<T>& gr, std::size_t self) {
                    const auto go = gr.value(self).grad();
                    const auto& x = gr.value(ia);
                    auto pg = gr.grad_of(ia);
                    for (std::size_t i = 0; i < x.size(); ++i) {
                      pg[i] = static_cast<T>(pg[i] + go[i] * kernels::sigmoid(x[i]));
                    }
                  },
                  "softplus");
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row over the last axis, then applies gain and bias
/// (both rank-1 of length cols).
template <Real T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias) {
  auto& g = detail::same_graph(x, gain);
  detail::same_graph(x, bias);
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match last axis of " + shape_str(xv.shape()));
  }
  Tensor<T> out(xv.shape());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = xv.row(r);
    double mu = 0.0;
    for (auto v : row) mu += static_cast<double>(v);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (auto v : row) var += (static_cast<double>(v) - mu) * (static_cast<double>(v) - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_sigma)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (static_cast<double>(row[c]) - mu) * is;
      (*xhat)[r * d + c] = h;
      out.at(r, c) = static_cast<T>(h * gv[c] + bv[c]);
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return g.record(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, xhat, inv_sigma, rows, d](Graph<T>& gr, std::size_t self) {
        const auto go = gr.value(self).grad();
        const auto& gv = gr.value(ig);
        if (gr.needs_grad(ig) || gr.needs_grad(ib)) {
          std::vector<double> dg(d, 0.0), db(d, 0.0);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
              dg[c] += static_cast<double>(go[r * d + c]) * (*xhat)[r * d + c];
              db[c] += static_cast<double>(go[r * d + c]);
            }
          }
          if (gr.needs_grad(ig)) {
            auto pg = gr.grad_of(ig);
            for (std::size_t c = 0; c < d; ++c) pg[c] = static_cast<T>(pg[c] + dg[c]);
          }
          if (gr.needs_grad(ib)) {
            auto pb = gr.grad_of(ib);
            for (std::size_t c = 0; c < d; ++c) pb[c] = static_cast<T>(pb[c] + db[c]);
          }
        }
        if (gr.needs_grad(ix)) {
          auto px = gr.grad_of(ix);
          std::vector<double> dxhat(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              dxhat[c] = static_cast<double>(go[r * d + c]) * static_cast<double>(gv[c]);
              m1 += dxhat[c];
              m2 += dxhat[c] * (*xhat)[r * d + c];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            const double is = (*inv_sigma)[r];
            for (std::size_t c = 0; c < d; ++c) {
              const double dx = is * (dxhat[c] - m1 - (*xhat)[r * d + c] * m2);
              px[r * d + c] = static_cast<T>(px[r * d + c] + dx);
            }
          }
        }
      },
      "layer_norm");
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m x k] * b[k x n]
template <Real T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  Tensor<T> out({m, n});
  kernels::matmul_nn(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n, false);
  const auto ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib},
                  [ia, ib, m, k, n](Graph<T>& gr, std::size_t self) {
                    const T* go = gr.value(self).grad().data();
                    if (gr.needs_grad(ia)) {
                      kernels::matmul_nt(go, gr.value(ib).data().data(), gr.grad_of(ia).data(), m, n, k, true);
                    }
                    if (gr.needs_grad(ib)) {
                      kernels::matmul_tn(gr.value(ia).data().data(), go, gr.grad_of(ib).data(), m, k, n, true);
                    }
                  },
                  "matmul");
}

/// a[m x k] * b[n x k]^T
template <Real T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw ShapeError("matmul_nt: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + "^T");
  }
  Tensor<T> out({m, n});
  kernels::matmul_nt(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n, false);
  const auto ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib},
                  [ia, ib, m, k, n](Graph<T>& gr, std::size_t self) {
                    const T* go = gr.value(self).grad().data();
                    if (gr.needs_grad(ia)) {
                      kernels::matmul_nn(go, gr.value(ib).data().data(), gr.grad_of(ia).data(), m, n, k, true);
                    }
                    if (gr.needs_grad(ib)) {
                      // d(b) = go^T * a  -> [n x k]
                      kernels::matmul_tn(go, gr.value(ia).data().data(), gr.grad_of(ib).data(), m, n, k, true);
                    }
                  },
                  "matmul_nt");
}

// ---------------------------------------------------------------------------
// Indexing

/// Gathers rows of `table` for each id.
template <Real T>
Var<T> embedding(const Var<T>& table, std::span<const TokenId> ids) {
  auto& g = table.graph();
  detail::require_matrix(table, "embedding");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  Tensor<T> out({ids.size(), d});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[t]) + " >= table rows " + std::to_string(vocab));
    }
    auto src = table.value().row(ids[t]);
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  std::vector<TokenId> saved(ids.begin(), ids.end());
  const auto it = table.id();
  return g.record(std::move(out), {it},
                  [it, saved = std::move(saved), d](Graph<T>& gr, std::size_t self) {
                    const auto go = gr.value(self).grad();
                    auto pg = gr.grad_of(it);
                    for (std::size_t t = 0; t < saved.size(); ++t) {
                      for (std::size_t c = 0; c < d; ++c) pg[saved[t] * d + c] += go[t * d + c];
                    }
                  },
                  "embedding");
}

/// Rows [begin, begin + count) of a matrix.
template <Real T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t count) {
  auto& g = x.graph();
  detail::require_matrix(x, "slice_rows");
  const std::size_t d = x.shape()[1];
  if (count == 0 || begin + count > x.shape()[0]) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_str(x.shape()));
  }
  Tensor<T> out({count, d});
  auto src = x.value().data().subspan(begin * d, count * d);
  std::copy(src.begin(), src.end(), out.data().begin());
  const auto ix = x.id();
  return g.record(std::move(out), {ix},
                  [ix, begin, count, d](Graph<T>& gr, std::size_t self) {
                    const auto go = gr.value(self).grad();
                    auto pg = gr.grad_of(ix);
                    for (std::size_t i = 0; i < count * d; ++i) pg[begin * d + i] += go[i];
                  },
                  "slice_rows");
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head causal self-attention over q, k, v [T x d]; position t attends
/// to positions 0..t. Heads split the last axis into n_heads equal slices.
template <Real T>
Var<T> causal_self_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t n_heads) {
  auto& g = detail::same_graph(q, k);
  detail::same_graph(q, v);
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.value().rank() != 2) {
    throw ShapeError("attention: q/k/v shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                     shape_str(v.shape()) + " must be equal matrices");
  }
  const std::size_t len = q.shape()[0], d = q.shape()[1];
  if (n_heads == 0 || d % n_heads != 0) throw ShapeError("attention: width not divisible by head count");
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  // probs[h][t][j] for j <= t, stored as a dense len x len block per head.
  auto probs = std::make_shared<std::vector<double>>(n_heads * len * len, 0.0);
  Tensor<T> out({len, d});
  std::vector<double> scores(len), acc(dh);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t t = 0; t < len; ++t) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= t; ++j) {
        scores[j] = kernels::dot(qv.data().data() + t * d + off, kv.data().data() + j * d + off, dh) * inv_sqrt;
        mx = std::max(mx, scores[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        z += scores[j];
      }
      std::fill(acc.begin(), acc.end(), 0.0);
      double* prow = probs->data() + (h * len + t) * len;
      for (std::size_t j = 0; j <= t; ++j) {
        const double p = scores[j] / z;
        prow[j] = p;
        const T* vrow = vv.data().data() + j * d + off;
        for (std::size_t c = 0; c < dh; ++c) acc[c] += p * static_cast<double>(vrow[c]);
      }
      for (std::size_t c = 0; c < dh; ++c) out.at(t, off + c) = static_cast<T>(acc[c]);
    }
  }
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  return g.record(
      std::move(out), {iq, ik, iv},
      [iq, ik, iv, probs, len, d, dh, n_heads, inv_sqrt](Graph<T>& gr, std::size_t self) {
        const T* go = gr.value(self).grad().data();
        const T* qd = gr.value(iq).data().data();
        const T* kd = gr.value(ik).data().data();
        const T* vd = gr.value(iv).data().data();
        std::vector<double> dq(len * d, 0.0), dk(len * d, 0.0), dv(len * d, 0.0), dp(len);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t t = 0; t < len; ++t) {
            const double* prow = probs->data() + (h * len + t) * len;
            const T* gorow = go + t * d + off;
            double inner = 0.0;
            for (std::size_t j = 0; j <= t; ++j) {
              dp[j] = kernels::dot(gorow, vd + j * d + off, dh);
              inner += prow[j] * dp[j];
              for (std::size_t c = 0; c < dh; ++c) dv[j * d + off + c] += prow[j] * static_cast<double>(gorow[c]);
            }
            for (std::size_t j = 0; j <= t; ++j) {
              const double ds = prow[j] * (dp[j] - inner) * inv_sqrt;
              if (ds == 0.0) continue;
              for (std::size_t c = 0; c < dh; ++c) {
                dq[t * d + off + c] += ds * static_cast<double>(kd[j * d + off + c]);
                dk[j * d + off + c] += ds * static_cast<double>(qd[t * d + off + c]);
              }
            }
          }
        }
        auto flush = [&gr](std::size_t id, const std::vector<double>& src) {
          if (!gr.needs_grad(id)) return;
          auto pg = gr.grad_of(id);
          for (std::size_t i = 0; i < src.size(); ++i) pg[i] = static_cast<T>(pg[i] + src[i]);
        };
        flush(iq, dq);
        flush(ik, dk);
        flush(iv, dv);
      },
      "causal_self_attention");
}

// ---------------------------------------------------------------------------
// Softmax family and losses

template <Real T>
Var<T> row_softmax(const Var<T>& x) {
  auto& g = x.graph();
  Tensor<T> out = kernels::softmax_rows(x.value());
  const auto ix = x.id();
  return g.record(std::move(out), {ix},
                  [ix](Graph<T>& gr, std::size_t self) {
                    const auto& o = gr.value(self);
                    auto pg = gr.grad_of(ix);
                    const std::size_t cols = o.cols();
                    for (std::size_t r = 0; r < o.rows(); ++r) {
                      const T* p = o.data().data() + r * cols;
                      const T* go = o.grad().data() + r * cols;
                      double inner = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) inner += static_cast<double>(p[c]) * go[c];
                      for (std::size_t c = 0; c < cols; ++c) {
                        pg[r * cols + c] = static_cast<T>(pg[r * cols + c] + p[c] * (go[c] - inner));
                      }
                    }
                  },
                  "row_softmax");
}

template <Real T>
Var<T> row_log_softmax(const Var<T>& x) {
  auto& g = x.graph();
  Tensor<T> out = kernels::log_softmax_rows(x.value());
  const auto ix = x.id();
  return g.record(std::move(out), {ix},
                  [ix](Graph<T>& gr, std::size_t self) {
                    const auto& o = gr.value(self);
                    auto pg = gr.grad_of(ix);
                    const std::size_t cols = o.cols();
                    for (std::size_t r = 0; r < o.rows(); ++r) {
                      const T* ls = o.data().data() + r * cols;
                      const T* go = o.grad().data() + r * cols;
                      double gsum = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) gsum += go[c];
                      for (std::size_t c = 0; c < cols; ++c) {
                        pg[r * cols + c] =
                            static_cast<T>(pg[r * cols + c] + go[c] - std::exp(static_cast<double>(ls[c])) * gsum);
                      }
                    }
                  },
                  "row_log_softmax");
}

/// Mean over masked-in rows of -log softmax(logits[r])[targets[r]].
/// Masked-out rows contribute to neither value nor gradient and their
/// targets are not inspected.
template <Real T>
Var<T> cross_entropy_masked(const Var<T>& logits, std::span<const TokenId> targets,
                            std::span<const std::uint8_t> mask) {
  auto& g = logits.graph();
  const auto& lv = logits.value();
  const std::size_t rows = lv.rows(), vocab = lv.cols();
  if (targets.size() != rows || mask.size() != rows) {
    throw ShapeError("cross_entropy_masked: " + std::to_string(targets.size()) + " targets / " +
                     std::to_string(mask.size()) + " mask entries for logits " + shape_str(lv.shape()));
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] >= vocab) {
      throw IndexError("cross_entropy_masked: target " + std::to_string(targets[r]) + " >= vocab " +
                       std::to_string(vocab));
    }
    ++count;
  }
  if (count == 0) throw InputError("cross_entropy_masked: empty loss support (mask is all zero)");
  auto lse = std::make_shared<std::vector<double>>(rows, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    (*lse)[r] = kernels::log_sum_exp(lv.row(r));
    total += (*lse)[r] - static_cast<double>(lv.at(r, targets[r]));
  }
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<TokenId> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  const auto il = logits.id();
  return g.record(Tensor<T>::scalar(static_cast<T>(total * inv)), {il},
                  [il, lse, tg = std::move(tg), mk = std::move(mk), inv, vocab](Graph<T>& gr, std::size_t self) {
                    const double go = static_cast<double>(gr.value(self).grad()[0]) * inv;
                    const auto& lv = gr.value(il);
                    auto pg = gr.grad_of(il);
                    for (std::size_t r = 0; r < tg.size(); ++r) {
                      if (!mk[r]) continue;
                      for (std::size_t c = 0; c < vocab; ++c) {
                        double p = std::exp(static_cast<double>(lv.at(r, c)) - (*lse)[r]);
                        if (c == tg[r]) p -= 1.0;
                        pg[r * vocab + c] = static_cast<T>(pg[r * vocab + c] + go * p);
                      }
                    }
                  },
                  "cross_entropy_masked");
}

inline constexpr double kProbTolerance = 1e-6;

/// Mean over included rows of sum_w p(w) * (log p(w) - log_q(w)), with
/// 0 * log 0 = 0. Differentiable in both p and log_q. An empty row_mask
/// includes every row.
template <Real T>
Var<T> kl_divergence_rows(const Var<T>& p, const Var<T>& log_q, std::span<const std::uint8_t> row_mask = {}) {
  auto& g = detail::same_graph(p, log_q);
  const auto& pv = p.value();
  const auto& qv = log_q.value();
  if (pv.shape() != qv.shape()) {
    throw ShapeError("kl_divergence_rows: p " + shape_str(pv.shape()) + " vs log_q " + shape_str(qv.shape()));
  }
  const std::size_t rows = pv.rows(), cols = pv.cols();
  if (!row_mask.empty() && row_mask.size() != rows) {
    throw ShapeError("kl_divergence_rows: row mask length " + std::to_string(row_mask.size()) + " for " +
                     std::to_string(rows) + " rows");
  }
  std::vector<std::uint8_t> mk(rows, 1);
  if (!row_mask.empty()) mk.assign(row_mask.begin(), row_mask.end());
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mk[r]) continue;
    ++count;
    double row_sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double pw = pv.at(r, c);
      if (pw < -kProbTolerance) {
        throw DomainError("kl_divergence_rows: negative probability " + std::to_string(pw) + " at row " +
                          std::to_string(r));
      }
      if (pw <= 0.0) continue;
      row_sum += pw * (std::log(pw) - static_cast<double>(qv.at(r, c)));
    }
    total += row_sum;
  }
  if (count == 0) throw InputError("kl_divergence_rows: empty loss support (no rows selected)");
  const double inv = 1.0 / static_cast<double>(count);
  const auto ip = p.id(), iq = log_q.id();
  return g.record(Tensor<T>::scalar(static_cast<T>(total * inv)), {ip, iq},
                  [ip, iq, mk = std::move(mk), inv, cols](Graph<T>& gr, std::size_t self) {
                    const double go = static_cast<double>(gr.value(self).grad()[0]) * inv;
                    const auto& pv = gr.value(ip);
                    const auto& qv = gr.value(iq);
                    const bool want_p = gr.needs_grad(ip), want_q = gr.needs_grad(iq);
                    std::span<T> gp, gq;
                    if (want_p) gp = gr.grad_of(ip);
                    if (want_q) gq = gr.grad_of(iq);
                    for (std::size_t r = 0; r < mk.size(); ++r) {
                      if (!mk[r]) continue;
                      for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t i = r * cols + c;
                        const double pw = pv[i];
                        if (want_p) {
                          // d/dp [p log p] is unbounded at p = 0; the limit is
                          // dropped there because softmax upstream scales it by p.
                          const double lp = pw > 0.0 ? std::log(pw) : 0.0;
                          gp[i] = static_cast<T>(gp[i] + go * (lp + 1.0 - static_cast<double>(qv[i])));
                        }
                        if (want_q) gq[i] = static_cast<T>(gq[i] - go * pw);
                      }
                    }
                  },
                  "kl_divergence_rows");
}

}  // namespace mixcpt
