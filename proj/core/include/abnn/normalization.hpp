#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "abnn/tensor.hpp"

namespace abnn {

inline constexpr Scalar kDefaultBNEps = Scalar(1e-5);

/// Per-channel mean and standard deviation of a feature map.
/// sigma[c] = sqrt(population variance + eps).
struct BNStats {
  std::vector<Scalar> mu;
  std::vector<Scalar> sigma;
  Scalar eps = kDefaultBNEps;

  std::size_t channels() const { return mu.size(); }
};

/// Statistics of z[N,C,H,W] over batch and spatial positions.
BNStats compute_bn_stats(const Tensor& z, Scalar eps = kDefaultBNEps);

enum class NormMode { kTrain, kEval };

/// Standard batch normalization with learned per-channel scale and shift.
///
/// In train mode the current batch is standardized and the running mean and
/// (population) variance move by running = (1 - momentum) * running +
/// momentum * batch. Eval mode reads running statistics and mutates nothing.
class BatchNormLayer {
 public:
  BatchNormLayer() = default;
  BatchNormLayer(std::string name, std::size_t channels, Scalar momentum = Scalar(0.1),
                 Scalar eps = kDefaultBNEps);

  Tensor forward(const Tensor& z);

  std::size_t channels() const { return running_.channels(); }
  NormMode mode() const { return mode_; }
  void set_mode(NormMode m) { mode_ = m; }
  Scalar momentum() const { return momentum_; }
  Scalar eps() const { return running_.eps; }

  Parameter& gamma() { return gamma_; }
  Parameter& beta() { return beta_; }
  const Parameter& gamma() const { return gamma_; }
  const Parameter& beta() const { return beta_; }
  BNStats& running_stats() { return running_; }
  const BNStats& running_stats() const { return running_; }

  std::vector<Parameter*> parameters() { return {&gamma_, &beta_}; }

 private:
  Parameter gamma_;
  Parameter beta_;
  BNStats running_;
  Scalar momentum_ = Scalar(0.1);
  NormMode mode_ = NormMode::kTrain;
};

Tensor batch_norm_forward(const Tensor& z, BatchNormLayer& layer);

/// Learned affine map from substitute statistics [mu(z_s) || sigma(z_s)]
/// (length 2*C_s) to four per-target-channel vectors:
/// mapped mean, mapped std (softplus + eps, always positive), gamma_s, beta_s.
class AdaINEncoder {
 public:
  struct Output {
    Tensor mapped_mu;     // [C_t]
    Tensor mapped_sigma;  // [C_t]
    Tensor gamma;         // [C_t]
    Tensor beta;          // [C_t]
  };

  AdaINEncoder() = default;
  /// Weights ~ U(-init_scale, init_scale); bias chosen so that the initial
  /// output is close to mapped (mu, sigma) = (0, 1) and (gamma, beta) = (1, 0).
  AdaINEncoder(std::string name, std::size_t substitute_channels, std::size_t target_channels,
               std::mt19937_64& rng, Scalar init_scale = Scalar(1e-2), Scalar eps = kDefaultBNEps);

  Output encode(const Tensor& z_s) const;

  /// Zero weight and a bias producing exactly the given vectors.
  void set_constant(std::span<const Scalar> mapped_mu, std::span<const Scalar> mapped_sigma,
                    std::span<const Scalar> gamma, std::span<const Scalar> beta);

  std::size_t substitute_channels() const { return substitute_channels_; }
  std::size_t target_channels() const { return target_channels_; }
  Scalar eps() const { return eps_; }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }
  std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }

 private:
  Parameter weight_;  // [2*C_s, 4*C_t]
  Parameter bias_;    // [4*C_t]
  std::size_t substitute_channels_ = 0;
  std::size_t target_channels_ = 0;
  Scalar eps_ = kDefaultBNEps;
};

/// {gamma_s, beta_s} derived from substitute feature z_s.
struct AdaptiveParams {
  Tensor gamma;
  Tensor beta;
};
AdaptiveParams adain_encode(const Tensor& z_s, const AdaINEncoder& encoder);

/// Re-normalizes target features with substitute-derived statistics:
///   out = gamma_s * (sigma_s * (z_t - mu(z_t)) / sigma(z_t) + mu_s) + beta_s
/// where target statistics come from the current batch of z_t.
class AdaptiveBNLayer {
 public:
  AdaptiveBNLayer() = default;
  AdaptiveBNLayer(AdaINEncoder encoder, Scalar eps = kDefaultBNEps)
      : encoder_(std::move(encoder)), eps_(eps) {}

  Tensor forward(const Tensor& z_t, const Tensor& z_s) const;

  AdaINEncoder& encoder() { return encoder_; }
  const AdaINEncoder& encoder() const { return encoder_; }
  Scalar eps() const { return eps_; }
  std::vector<Parameter*> parameters() { return encoder_.parameters(); }

 private:
  AdaINEncoder encoder_;
  Scalar eps_ = kDefaultBNEps;
};

Tensor adaptive_bn_forward(const Tensor& z_t, const Tensor& z_s, const AdaptiveBNLayer& layer);

/// Inverse of softplus, used to place a desired positive value behind the
/// encoder's softplus head.
Scalar inverse_softplus(Scalar y);

}  // namespace abnn
