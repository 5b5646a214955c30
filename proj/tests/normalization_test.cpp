#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "abnn/normalization.hpp"
#include "abnn/ops.hpp"
#include "oracles.hpp"

namespace abnn {
namespace {

using testing::random_tensor;
using testing::to_vec;

constexpr double kEps = 1e-5;

double softplus_ref(double x) { return std::log1p(std::exp(x)); }

TEST(BNStats, ConstantChannelHasSqrtEpsSigma) {
  const auto s = compute_bn_stats(Tensor({4, 2, 3, 3}, Scalar(5)), kEps);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_DOUBLE_EQ(s.mu[c], 5.0);
    EXPECT_NEAR(s.sigma[c], std::sqrt(kEps), 1e-15);
  }
}

TEST(BNStats, TwoValues) {
  const auto s = compute_bn_stats(Tensor({2, 1, 1, 1}, std::vector<Scalar>{1, 3}), kEps);
  EXPECT_DOUBLE_EQ(s.mu[0], 2.0);
  EXPECT_NEAR(s.sigma[0], std::sqrt(1 + kEps), 1e-15);
}

TEST(BNStats, MatchesTwoPassOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t N = 1 + trial % 4, C = 1 + trial % 5, H = 2 + trial % 3;
    // Offset far from zero so a one-pass sum-of-squares formula would lose digits.
    auto z = random_tensor({N, C, H, H}, rng, 1e3, 1e3 + 2);
    std::vector<double> mu, sigma;
    testing::two_pass_stats(to_vec(z), N, C, H * H, kEps, mu, sigma);
    const auto s = compute_bn_stats(z, kEps);
    for (std::size_t c = 0; c < C; ++c) {
      EXPECT_NEAR(s.mu[c], mu[c], 1e-10);
      EXPECT_NEAR(s.sigma[c], sigma[c], 1e-10);
    }
  }
}

TEST(BNStats, RejectsNonPositiveEps) {
  EXPECT_THROW(compute_bn_stats(Tensor({2, 1, 1, 1}), 0), std::invalid_argument);
}

TEST(BatchNorm, StandardizesEachChannel) {
  std::mt19937_64 rng(12);
  BatchNormLayer bn("bn", 3);
  const auto y = bn.forward(random_tensor({8, 3, 4, 4}, rng, -3, 7));
  const auto s = compute_bn_stats(y, kEps);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(s.mu[c], 0.0, 1e-12);
    EXPECT_NEAR(s.sigma[c], 1.0, 1e-5);
  }
}

TEST(BatchNorm, ZeroGammaOutputsBeta) {
  std::mt19937_64 rng(13);
  BatchNormLayer bn("bn", 2);
  std::fill(bn.gamma().value().mutable_data().begin(), bn.gamma().value().mutable_data().end(), 0);
  bn.beta().value().mutable_data()[0] = 0.25;
  bn.beta().value().mutable_data()[1] = -4;
  const auto y = bn.forward(random_tensor({3, 2, 2, 2}, rng));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.at(i), (i / 4) % 2 == 0 ? 0.25 : -4.0);
}

TEST(BatchNorm, MatchesScalarOracle) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t N = 2 + trial % 3, C = 1 + trial % 4, HW = 9;
    BatchNormLayer bn("bn", C);
    auto gamma = random_tensor({C}, rng), beta = random_tensor({C}, rng);
    std::copy(gamma.data().begin(), gamma.data().end(), bn.gamma().value().mutable_data().begin());
    std::copy(beta.data().begin(), beta.data().end(), bn.beta().value().mutable_data().begin());
    const auto z = random_tensor({N, C, 3, 3}, rng, -2, 5);
    std::vector<double> mu, sigma;
    testing::two_pass_stats(to_vec(z), N, C, HW, kEps, mu, sigma);
    const auto y = bn.forward(z);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t k = (n * C + c) * HW + i;
          EXPECT_NEAR(y.at(k), gamma.at(c) * (z.at(k) - mu[c]) / sigma[c] + beta.at(c), 1e-10);
        }
  }
}

TEST(BatchNorm, RunningStatisticsFollowTheMovingAverage) {
  std::mt19937_64 rng(15);
  const double m = 0.1;
  BatchNormLayer bn("bn", 2, m);
  double run_mu = 0, run_var = 1;
  for (int step = 0; step < 5; ++step) {
    const auto z = random_tensor({4, 2, 2, 2}, rng, -1, 3);
    std::vector<double> mu, sigma;
    testing::two_pass_stats(to_vec(z), 4, 2, 4, kEps, mu, sigma);
    bn.forward(z);
    run_mu = (1 - m) * run_mu + m * mu[0];
    run_var = (1 - m) * run_var + m * (sigma[0] * sigma[0] - kEps);
  }
  EXPECT_NEAR(bn.running_stats().mu[0], run_mu, 1e-12);
  EXPECT_NEAR(bn.running_stats().sigma[0], std::sqrt(run_var + kEps), 1e-12);
}

TEST(BatchNorm, EvalModeUsesRunningStatisticsWithoutMutatingThem) {
  std::mt19937_64 rng(16);
  BatchNormLayer bn("bn", 2);
  bn.forward(random_tensor({4, 2, 3, 3}, rng));
  bn.set_mode(NormMode::kEval);
  const auto before = bn.running_stats();
  const auto z = random_tensor({3, 2, 3, 3}, rng, 4, 9);
  const auto y = bn.forward(z);
  EXPECT_EQ(bn.running_stats().mu, before.mu);
  EXPECT_EQ(bn.running_stats().sigma, before.sigma);
  for (std::size_t k = 0; k < z.numel(); ++k) {
    const std::size_t c = (k / 9) % 2;
    EXPECT_NEAR(y.at(k), (z.at(k) - before.mu[c]) / before.sigma[c], 1e-10);
  }
}

TEST(BatchNorm, RejectsChannelMismatch) {
  BatchNormLayer bn("bn", 3);
  EXPECT_THROW(bn.forward(Tensor({2, 2, 2, 2})), ShapeError);
  EXPECT_THROW(BatchNormLayer("bn", 3, 0), std::invalid_argument);
}

TEST(InverseSoftplus, RoundTrips) {
  for (double y : {1e-6, 0.5, 1.0, 30.0}) EXPECT_NEAR(softplus_ref(inverse_softplus(y)), y, 1e-12 * std::max(1.0, y));
  EXPECT_THROW(inverse_softplus(0), std::domain_error);
}

// Independent evaluation of the encoder's affine map on two-pass substitute statistics.
struct EncoderOracle {
  std::vector<double> mapped_mu, mapped_sigma, gamma, beta;
};

EncoderOracle encoder_oracle(const Tensor& z_s, const AdaINEncoder& enc) {
  const std::size_t N = z_s.dim(0), Cs = z_s.dim(1), HW = z_s.numel() / (N * Cs), Ct = enc.target_channels();
  std::vector<double> mu, sigma;
  testing::two_pass_stats(to_vec(z_s), N, Cs, HW, enc.eps(), mu, sigma);
  std::vector<double> features(mu);
  features.insert(features.end(), sigma.begin(), sigma.end());
  const auto w = to_vec(enc.weight().value()), b = to_vec(enc.bias().value());
  const auto e = testing::naive_linear(features, 1, 2 * Cs, w, 4 * Ct, b);
  EncoderOracle o;
  for (std::size_t c = 0; c < Ct; ++c) {
    o.mapped_mu.push_back(e[c]);
    o.mapped_sigma.push_back(softplus_ref(e[Ct + c]) + enc.eps());
    o.gamma.push_back(e[2 * Ct + c]);
    o.beta.push_back(e[3 * Ct + c]);
  }
  return o;
}

TEST(AdaINEncoder, DefaultInitialisationIsNearIdentity) {
  std::mt19937_64 rng(17);
  AdaINEncoder enc("enc", 3, 2, rng, 0);
  const auto out = enc.encode(random_tensor({4, 3, 2, 2}, rng));
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_NEAR(out.mapped_mu.at(c), 0.0, 1e-15);
    EXPECT_NEAR(out.mapped_sigma.at(c), 1.0, 1e-12);
    EXPECT_NEAR(out.gamma.at(c), 1.0, 1e-15);
    EXPECT_NEAR(out.beta.at(c), 0.0, 1e-15);
  }
}

TEST(AdaINEncoder, MatchesStatsPlusAffineComposition) {
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t Cs = 1 + trial % 4, Ct = 1 + trial % 3;
    AdaINEncoder enc("enc", Cs, Ct, rng, 0.5);
    const auto z_s = random_tensor({3, Cs, 3, 3}, rng, -2, 2);
    const auto o = encoder_oracle(z_s, enc);
    const auto p = adain_encode(z_s, enc);
    const auto full = enc.encode(z_s);
    for (std::size_t c = 0; c < Ct; ++c) {
      EXPECT_NEAR(p.gamma.at(c), o.gamma[c], 1e-10);
      EXPECT_NEAR(p.beta.at(c), o.beta[c], 1e-10);
      EXPECT_NEAR(full.mapped_mu.at(c), o.mapped_mu[c], 1e-10);
      EXPECT_NEAR(full.mapped_sigma.at(c), o.mapped_sigma[c], 1e-10);
      EXPECT_GT(full.mapped_sigma.at(c), 0.0);
    }
  }
}

TEST(AdaINEncoder, SetConstantIgnoresTheInput) {
  std::mt19937_64 rng(19);
  AdaINEncoder enc("enc", 2, 2, rng, 0.5);
  const std::vector<Scalar> mu{0.5, -1}, sigma{2, 0.1}, gamma{3, -1}, beta{0, 7};
  enc.set_constant(mu, sigma, gamma, beta);
  for (int trial = 0; trial < 3; ++trial) {
    const auto out = enc.encode(random_tensor({2, 2, 3, 3}, rng, -10, 10));
    for (std::size_t c = 0; c < 2; ++c) {
      EXPECT_NEAR(out.mapped_mu.at(c), mu[c], 1e-12);
      EXPECT_NEAR(out.mapped_sigma.at(c), sigma[c], 1e-12);
      EXPECT_NEAR(out.gamma.at(c), gamma[c], 1e-12);
      EXPECT_NEAR(out.beta.at(c), beta[c], 1e-12);
    }
  }
  EXPECT_THROW(enc.set_constant(std::vector<Scalar>{1}, sigma, gamma, beta), ShapeError);
}

TEST(AdaINEncoder, RejectsWrongSubstituteChannels) {
  std::mt19937_64 rng(20);
  AdaINEncoder enc("enc", 2, 2, rng);
  EXPECT_THROW(enc.encode(Tensor({1, 3, 2, 2})), ShapeError);
}

TEST(AdaptiveBN, MatchesScalarOracle) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t N = 2 + trial % 3, Cs = 1 + trial % 3, Ct = 1 + trial % 4, HW = 16;
    AdaptiveBNLayer layer(AdaINEncoder("enc", Cs, Ct, rng, 0.5));
    const auto z_t = random_tensor({N, Ct, 4, 4}, rng, -3, 3);
    const auto z_s = random_tensor({N, Cs, 4, 4}, rng, -1, 2);
    const auto o = encoder_oracle(z_s, layer.encoder());
    std::vector<double> mu_t, sigma_t;
    testing::two_pass_stats(to_vec(z_t), N, Ct, HW, layer.eps(), mu_t, sigma_t);
    const auto y = adaptive_bn_forward(z_t, z_s, layer);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < Ct; ++c)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t k = (n * Ct + c) * HW + i;
          const double aligned = o.mapped_sigma[c] * (z_t.at(k) - mu_t[c]) / sigma_t[c] + o.mapped_mu[c];
          EXPECT_NEAR(y.at(k), o.gamma[c] * aligned + o.beta[c], 1e-10);
        }
  }
}

TEST(AdaptiveBN, TargetStatisticsReproduceTheInput) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t C = 1 + trial % 5;
    AdaptiveBNLayer layer(AdaINEncoder("enc", 3, C, rng, 0.5));
    const auto z_t = random_tensor({4, C, 3, 3}, rng, -5, 5);
    const auto s = compute_bn_stats(z_t, layer.eps());
    layer.encoder().set_constant(s.mu, s.sigma, std::vector<Scalar>(C, 1), std::vector<Scalar>(C, 0));
    const auto y = layer.forward(z_t, random_tensor({4, 3, 3, 3}, rng));
    for (std::size_t k = 0; k < z_t.numel(); ++k) EXPECT_NEAR(y.at(k), z_t.at(k), 1e-6);
  }
}

TEST(AdaptiveBN, UnitStatisticsReduceToBatchNorm) {
  std::mt19937_64 rng(23);
  const std::size_t C = 3;
  AdaptiveBNLayer layer(AdaINEncoder("enc", 2, C, rng, 0.5));
  BatchNormLayer bn("bn", C);
  const auto gamma = random_tensor({C}, rng), beta = random_tensor({C}, rng);
  std::copy(gamma.data().begin(), gamma.data().end(), bn.gamma().value().mutable_data().begin());
  std::copy(beta.data().begin(), beta.data().end(), bn.beta().value().mutable_data().begin());
  layer.encoder().set_constant(std::vector<Scalar>(C, 0), std::vector<Scalar>(C, 1), gamma.data(), beta.data());
  const auto z = random_tensor({5, C, 3, 3}, rng, -2, 2);
  const auto a = layer.forward(z, random_tensor({5, 2, 3, 3}, rng));
  const auto b = bn.forward(z);
  for (std::size_t k = 0; k < z.numel(); ++k) EXPECT_NEAR(a.at(k), b.at(k), 1e-10);
}

TEST(AdaptiveBN, PermutingTheBatchPermutesTheOutput) {
  std::mt19937_64 rng(24);
  AdaptiveBNLayer layer(AdaINEncoder("enc", 2, 3, rng, 0.5));
  const std::size_t N = 5, per = 3 * 4;
  const auto z_t = random_tensor({N, 3, 2, 2}, rng), z_s = random_tensor({N, 2, 2, 2}, rng);
  std::vector<std::size_t> perm(N);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto permute = [&](const Tensor& t) {
    const std::size_t row = t.numel() / N;
    std::vector<Scalar> v(t.numel());
    for (std::size_t n = 0; n < N; ++n)
      std::copy_n(t.data().begin() + perm[n] * row, row, v.begin() + n * row);
    return Tensor(t.shape(), v);
  };
  const auto y = layer.forward(z_t, z_s);
  const auto yp = layer.forward(permute(z_t), permute(z_s));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < per; ++i) EXPECT_NEAR(yp.at(n * per + i), y.at(perm[n] * per + i), 1e-12);
}

TEST(AdaptiveBN, RejectsEncoderTargetMismatch) {
  std::mt19937_64 rng(25);
  AdaptiveBNLayer layer(AdaINEncoder("enc", 2, 3, rng));
  EXPECT_THROW(layer.forward(Tensor({2, 4, 2, 2}), Tensor({2, 2, 2, 2})), ShapeError);
}

}  // namespace
}  // namespace abnn
