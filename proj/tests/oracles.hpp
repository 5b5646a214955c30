#pragma once

// Independent reference implementations used as test oracles. Written as
// plain loops over flat arrays; they share no code with the library.

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "abnn/tensor.hpp"

namespace abnn::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Scalar> v(numel(shape));
  for (auto& x : v) x = static_cast<Scalar>(u(rng));
  return Tensor(shape, std::move(v));
}

inline std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// out[n][f][i][j] = sum_c sum_u sum_v in[n][c][i*s+u-p][j*s+v-p] * k[f][c][u][v]
inline std::vector<double> naive_conv2d(const std::vector<double>& in, std::size_t N, std::size_t C, std::size_t H,
                                        std::size_t W, const std::vector<double>& k, std::size_t F, std::size_t kh,
                                        std::size_t kw, std::size_t stride, std::size_t pad, std::size_t& Ho,
                                        std::size_t& Wo) {
  Ho = (H + 2 * pad - kh) / stride + 1;
  Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(N * F * Ho * Wo, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long y = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long x = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (y < 0 || x < 0 || y >= static_cast<long>(H) || x >= static_cast<long>(W)) continue;
                acc += in[((n * C + c) * H + y) * W + x] * k[((f * C + c) * kh + u) * kw + v];
              }
          out[((n * F + f) * Ho + i) * Wo + j] = acc;
        }
  return out;
}

inline std::vector<double> naive_linear(const std::vector<double>& x, std::size_t N, std::size_t D,
                                        const std::vector<double>& w, std::size_t K, const std::vector<double>& b) {
  std::vector<double> out(N * K);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) {
      double acc = b[k];
      for (std::size_t d = 0; d < D; ++d) acc += x[n * D + d] * w[d * K + k];
      out[n * K + k] = acc;
    }
  return out;
}

// Mean of -log(exp(z_y) / sum exp(z)), summed directly without max-shift.
inline double direct_cross_entropy(const std::vector<double>& logits, std::size_t N, std::size_t K,
                                   const std::vector<int>& labels) {
  double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    double denom = 0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(logits[n * K + k]);
    total += -std::log(std::exp(logits[n * K + labels[n]]) / denom);
  }
  return total / static_cast<double>(N);
}

// Two-pass per-channel mean and population std of [N,C,H,W].
inline void two_pass_stats(const std::vector<double>& z, std::size_t N, std::size_t C, std::size_t HW, double eps,
                           std::vector<double>& mu, std::vector<double>& sigma) {
  mu.assign(C, 0.0);
  sigma.assign(C, 0.0);
  const double m = static_cast<double>(N * HW);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) mu[c] += z[(n * C + c) * HW + i];
    mu[c] /= m;
    double var = 0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) {
        const double d = z[(n * C + c) * HW + i] - mu[c];
        var += d * d;
      }
    sigma[c] = std::sqrt(var / m + eps);
  }
}

}  // namespace abnn::testing
