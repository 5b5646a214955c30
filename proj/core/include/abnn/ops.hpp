#pragma once

#include <cstdint>
#include <cstddef>
#include <span>
#include <vector>

#include "abnn/tensor.hpp"

namespace abnn {

// Elementwise and structural ops. No broadcasting: operands of binary ops must
// have identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar factor);
Tensor add_scalar(const Tensor& a, Scalar offset);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// Concatenates flattened operands into a 1-D tensor.
Tensor concat(std::span<const Tensor> parts);
/// Flat range [begin, begin + count) as a 1-D tensor.
Tensor slice(const Tensor& a, std::size_t begin, std::size_t count);
Tensor softplus(const Tensor& a);
Tensor sqrt(const Tensor& a);

Tensor relu(const Tensor& x);

/// While alive, every relu on this thread folds its on/off pattern into
/// signature(). Two evaluations with equal signatures lie in the same linear
/// piece of every relu they traversed.
class ActivationPatternProbe {
 public:
  ActivationPatternProbe();
  ~ActivationPatternProbe();
  ActivationPatternProbe(const ActivationPatternProbe&) = delete;
  ActivationPatternProbe& operator=(const ActivationPatternProbe&) = delete;

  std::uint64_t signature() const { return signature_; }
  void reset() { signature_ = 0xcbf29ce484222325ULL; }

 private:
  std::uint64_t signature_ = 0xcbf29ce484222325ULL;
  ActivationPatternProbe* previous_;
  friend Tensor relu(const Tensor& x);
};

/// Cross-correlation of x[N,C,H,W] with kernel[F,C,kh,kw].
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding);

/// input[N,D] * weight[D,K] + bias[K].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor global_avg_pool(const Tensor& x);
Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride);

/// Mean over the batch of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Per-sample cross-entropy values; not differentiable.
std::vector<Scalar> cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels);
std::vector<int> argmax_rows(const Tensor& logits);

// Per-channel ops over x[N,C,...]. Statistics reduce over every axis but 1.

/// Mean per channel, shape [C].
Tensor channel_mean(const Tensor& x);
/// sqrt(population variance + eps) per channel, shape [C].
Tensor channel_std(const Tensor& x, Scalar eps);
/// (x - mean_c) / sqrt(var_c + eps) using the batch statistics of x.
Tensor standardize(const Tensor& x, Scalar eps);
/// x * scale[c] + shift[c].
Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift);

}  // namespace abnn
