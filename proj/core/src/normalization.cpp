#include "abnn/normalization.hpp"

#include <array>
#include <cmath>

#include "abnn/ops.hpp"

namespace abnn {

BNStats compute_bn_stats(const Tensor& z, Scalar eps) {
  NoGradGuard no_grad;
  if (!(eps > 0)) throw std::invalid_argument("compute_bn_stats: eps must be positive");
  auto mu = channel_mean(z);
  auto sigma = channel_std(z, eps);
  return BNStats{std::vector<Scalar>(mu.data().begin(), mu.data().end()),
                 std::vector<Scalar>(sigma.data().begin(), sigma.data().end()), eps};
}

BatchNormLayer::BatchNormLayer(std::string name, std::size_t channels, Scalar momentum, Scalar eps)
    : gamma_(name + ".gamma", Tensor(Shape{channels}, Scalar(1))),
      beta_(name + ".beta", Tensor(Shape{channels}, Scalar(0))),
      running_{std::vector<Scalar>(channels, Scalar(0)),
               std::vector<Scalar>(channels, std::sqrt(Scalar(1) + eps)), eps},
      momentum_(momentum) {
  if (!(momentum > 0 && momentum < 1)) throw std::invalid_argument("BatchNormLayer: momentum must be in (0,1)");
}

Tensor BatchNormLayer::forward(const Tensor& z) {
  if (z.rank() < 2 || z.dim(1) != channels()) {
    throw ShapeError("batch_norm: layer has " + std::to_string(channels()) + " channels, input " +
                     to_string(z.shape()));
  }
  const Scalar eps = running_.eps;
  if (mode_ == NormMode::kTrain) {
    const auto batch = compute_bn_stats(z, eps);
    for (std::size_t c = 0; c < channels(); ++c) {
      const Scalar run_var = running_.sigma[c] * running_.sigma[c] - eps;
      const Scalar batch_var = batch.sigma[c] * batch.sigma[c] - eps;
      running_.mu[c] = (1 - momentum_) * running_.mu[c] + momentum_ * batch.mu[c];
      running_.sigma[c] = std::sqrt((1 - momentum_) * run_var + momentum_ * batch_var + eps);
    }
    return channel_affine(standardize(z, eps), gamma_.value(), beta_.value());
  }
  // gamma * (z - mu) / sigma + beta == z * (gamma / sigma) + (beta - gamma * mu / sigma)
  const auto C = channels();
  std::vector<Scalar> inv_sigma(C), neg_mu_over_sigma(C);
  for (std::size_t c = 0; c < C; ++c) {
    inv_sigma[c] = Scalar(1) / running_.sigma[c];
    neg_mu_over_sigma[c] = -running_.mu[c] / running_.sigma[c];
  }
  const Tensor inv(Shape{C}, std::move(inv_sigma));
  const Tensor shift(Shape{C}, std::move(neg_mu_over_sigma));
  return channel_affine(z, mul(gamma_.value(), inv), add(beta_.value(), mul(gamma_.value(), shift)));
}

Tensor batch_norm_forward(const Tensor& z, BatchNormLayer& layer) { return layer.forward(z); }

Scalar inverse_softplus(Scalar y) {
  if (!(y > 0)) throw std::domain_error("inverse_softplus: argument must be positive");
  // log(exp(y) - 1) == y + log(1 - exp(-y))
  return y + std::log(-std::expm1(-y));
}

AdaINEncoder::AdaINEncoder(std::string name, std::size_t substitute_channels, std::size_t target_channels,
                           std::mt19937_64& rng, Scalar init_scale, Scalar eps)
    : substitute_channels_(substitute_channels), target_channels_(target_channels), eps_(eps) {
  if (substitute_channels == 0 || target_channels == 0) {
    throw std::invalid_argument("AdaINEncoder: channel counts must be positive");
  }
  const auto in = 2 * substitute_channels, out = 4 * target_channels;
  std::uniform_real_distribution<Scalar> u(-init_scale, init_scale);
  std::vector<Scalar> w(in * out);
  for (auto& v : w) v = u(rng);
  std::vector<Scalar> b(out, Scalar(0));
  const auto Ct = target_channels;
  const Scalar sigma_raw = inverse_softplus(Scalar(1) - eps);
  for (std::size_t c = 0; c < Ct; ++c) {
    b[Ct + c] = sigma_raw;
    b[2 * Ct + c] = Scalar(1);
  }
  weight_ = Parameter(name + ".encoder.weight", Tensor(Shape{in, out}, std::move(w)));
  bias_ = Parameter(name + ".encoder.bias", Tensor(Shape{out}, std::move(b)));
}

AdaINEncoder::Output AdaINEncoder::encode(const Tensor& z_s) const {
  if (z_s.rank() < 2 || z_s.dim(1) != substitute_channels_) {
    throw ShapeError("adain_encode: encoder expects " + std::to_string(substitute_channels_) +
                     " substitute channels, got " + to_string(z_s.shape()));
  }
  const std::array<Tensor, 2> stats{channel_mean(z_s), channel_std(z_s, eps_)};
  const auto features = reshape(concat(stats), Shape{1, 2 * substitute_channels_});
  const auto encoded = reshape(linear(features, weight_.value(), bias_.value()), Shape{4 * target_channels_});
  const auto Ct = target_channels_;
  return Output{slice(encoded, 0, Ct), add_scalar(softplus(slice(encoded, Ct, Ct)), eps_),
                slice(encoded, 2 * Ct, Ct), slice(encoded, 3 * Ct, Ct)};
}

void AdaINEncoder::set_constant(std::span<const Scalar> mapped_mu, std::span<const Scalar> mapped_sigma,
                                std::span<const Scalar> gamma, std::span<const Scalar> beta) {
  const auto Ct = target_channels_;
  if (mapped_mu.size() != Ct || mapped_sigma.size() != Ct || gamma.size() != Ct || beta.size() != Ct) {
    throw ShapeError("AdaINEncoder::set_constant: expected " + std::to_string(Ct) + " values per vector");
  }
  for (auto& v : weight_.value().mutable_data()) v = 0;
  auto b = bias_.value().mutable_data();
  for (std::size_t c = 0; c < Ct; ++c) {
    b[c] = mapped_mu[c];
    b[Ct + c] = inverse_softplus(mapped_sigma[c] - eps_);
    b[2 * Ct + c] = gamma[c];
    b[3 * Ct + c] = beta[c];
  }
}

AdaptiveParams adain_encode(const Tensor& z_s, const AdaINEncoder& encoder) {
  auto out = encoder.encode(z_s);
  return {out.gamma, out.beta};
}

Tensor AdaptiveBNLayer::forward(const Tensor& z_t, const Tensor& z_s) const {
  if (z_t.rank() < 2 || z_t.dim(1) != encoder_.target_channels()) {
    throw ShapeError("adaptive_bn: encoder emits " + std::to_string(encoder_.target_channels()) +
                     " target channels, input " + to_string(z_t.shape()));
  }
  const auto p = encoder_.encode(z_s);
  const auto aligned = channel_affine(standardize(z_t, eps_), p.mapped_sigma, p.mapped_mu);
  return channel_affine(aligned, p.gamma, p.beta);
}

Tensor adaptive_bn_forward(const Tensor& z_t, const Tensor& z_s, const AdaptiveBNLayer& layer) {
  return layer.forward(z_t, z_s);
}

}  // namespace abnn
