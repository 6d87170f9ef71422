// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

// Plain numeric kernels shared by the differentiable ops and by the
// no-gradient paths (teacher logits, scoring). Storage is T; every
// reduction accumulates in double.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <limits>
#include <span>
#include <vector>

#include "mixcpt/tensor.hpp"

namespace mixcpt::kernels {

/// Dot product with four interleaved double accumulators (fixed order).
template <Real T>
inline double dot(const T* a, const T* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    s1 += static_cast<double>(a[i + 1]) * static_cast<double>(b[i + 1]);
    s2 += static_cast<double>(a[i + 2]) * static_cast<double>(b[i + 2]);
    s3 += static_cast<double>(a[i + 3]) * static_cast<double>(b[i + 3]);
  }
  for (; i < n; ++i) s0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return (s0 + s1) + (s2 + s3);
}

namespace detail {

inline constexpr std::size_t kGemmRows = 4;
inline constexpr std::size_t kLane = 8;
inline constexpr std::size_t kGemmCols = 2 * kLane;
using Lane = double __attribute__((vector_size(kLane * sizeof(double))));

/// out[m x n] (+)= A * B where A(i, p) = a[i * a_rs + p * a_cs] and
/// B(p, j) = b[p * b_rs + j * b_cs]. Operands are packed into zero-padded
/// double panels; every output element is summed in double over p = 0..k-1
/// in increasing order, then added to out when accumulating. The blocking
/// therefore never changes the result.
template <Real T>
void gemm(const T* a, std::size_t a_rs, std::size_t a_cs, const T* b, std::size_t b_rs, std::size_t b_cs, T* out,
          std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  constexpr std::size_t MR = kGemmRows, NR = kGemmCols;
  if (m == 0 || n == 0) return;
  const std::size_t panels = (n + NR - 1) / NR;
  thread_local std::vector<double> bpack, apack;
  bpack.assign(panels * k * NR, 0.0);
  for (std::size_t jb = 0; jb < panels; ++jb) {
    double* dst = bpack.data() + jb * k * NR;
    const std::size_t cols = std::min(NR, n - jb * NR);
    for (std::size_t p = 0; p < k; ++p) {
      const T* src = b + p * b_rs + jb * NR * b_cs;
      for (std::size_t c = 0; c < cols; ++c) dst[p * NR + c] = static_cast<double>(src[c * b_cs]);
    }
  }
  apack.assign(k * MR, 0.0);
  for (std::size_t i0 = 0; i0 < m; i0 += MR) {
    const std::size_t rows = std::min(MR, m - i0);
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t r = 0; r < MR; ++r) {
        apack[p * MR + r] = r < rows ? static_cast<double>(a[(i0 + r) * a_rs + p * a_cs]) : 0.0;
      }
    }
    for (std::size_t jb = 0; jb < panels; ++jb) {
      const double* bp = bpack.data() + jb * k * NR;
      const double* ap = apack.data();
      Lane c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
      for (std::size_t p = 0; p < k; ++p) {
        Lane b0, b1;
        std::memcpy(&b0, bp + p * NR, sizeof(Lane));
        std::memcpy(&b1, bp + p * NR + kLane, sizeof(Lane));
        const double* av = ap + p * MR;
        c00 += av[0] * b0;
        c01 += av[0] * b1;
        c10 += av[1] * b0;
        c11 += av[1] * b1;
        c20 += av[2] * b0;
        c21 += av[2] * b1;
        c30 += av[3] * b0;
        c31 += av[3] * b1;
      }
      const Lane acc[MR][2] = {{c00, c01}, {c10, c11}, {c20, c21}, {c30, c31}};
      const std::size_t cols = std::min(NR, n - jb * NR);
      for (std::size_t r = 0; r < rows; ++r) {
        double sums[NR];
        std::memcpy(sums, acc[r], sizeof(sums));
        T* orow = out + (i0 + r) * n + jb * NR;
        if (accumulate) {
          for (std::size_t c = 0; c < cols; ++c) orow[c] = static_cast<T>(orow[c] + sums[c]);
        } else {
          for (std::size_t c = 0; c < cols; ++c) orow[c] = static_cast<T>(sums[c]);
        }
      }
    }
  }
}

}  // namespace detail

/// out[m x n] (+)= a[m x k] * b[k x n]
template <Real T>
void matmul_nn(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n,
               bool accumulate) {
  detail::gemm(a, k, 1, b, n, 1, out, m, k, n, accumulate);
}

/// out[m x n] (+)= a[m x k] * b[n x k]^T
template <Real T>
void matmul_nt(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n,
               bool accumulate) {
  detail::gemm(a, k, 1, b, 1, k, out, m, k, n, accumulate);
}

/// out[k x n] (+)= a[m x k]^T * b[m x n]
template <Real T>
void matmul_tn(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n,
               bool accumulate) {
  detail::gemm(a, 1, k, b, n, 1, out, k, m, n, accumulate);
}

/// Index of the row maximum; the lowest index wins ties.
template <Real T>
std::size_t argmax(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

template <Real T>
void softmax_row(std::span<const T> in, std::span<T> out) {
  const double mx = static_cast<double>(*std::max_element(in.begin(), in.end()));
  double sum = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) sum += std::exp(static_cast<double>(in[i]) - mx);
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = static_cast<T>(std::exp(static_cast<double>(in[i]) - mx) / sum);
  }
}

template <Real T>
double log_sum_exp(std::span<const T> in) {
  const double mx = static_cast<double>(*std::max_element(in.begin(), in.end()));
  double sum = 0.0;
  for (auto v : in) sum += std::exp(static_cast<double>(v) - mx);
  return mx + std::log(sum);
}

template <Real T>
void log_softmax_row(std::span<const T> in, std::span<T> out) {
  const double lse = log_sum_exp(in);
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = static_cast<T>(static_cast<double>(in[i]) - lse);
  }
}

template <Real T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) softmax_row<T>(x.row(r), out.row(r));
  return out;
}

template <Real T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) log_softmax_row<T>(x.row(r), out.row(r));
  return out;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

/// log(1 + e^x) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace mixcpt::kernels
