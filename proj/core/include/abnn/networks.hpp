#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "abnn/normalization.hpp"
#include "abnn/tensor.hpp"

namespace abnn {

struct ConvBlockSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  bool pool = false;  // 2x2 average pool after the activation

  bool operator==(const ConvBlockSpec&) const = default;
};

void validate_specs(std::span<const ConvBlockSpec> specs);

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Anything that maps an image batch [N,C,H,W] to logits [N,K] differentiably.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual Tensor forward(const Tensor& x) = 0;
  virtual std::size_t num_classes() const = 0;
  /// Parameters an optimizer may update.
  virtual std::vector<Parameter*> parameters() = 0;
  virtual void set_mode(NormMode) {}
};

/// Conv -> BatchNorm -> ReLU [-> pool] blocks followed by global average
/// pooling and a linear head. Serves as the substitute network and as the
/// undefended / adversarially trained baseline.
class BNNetwork : public Classifier {
 public:
  struct Features {
    Tensor logits;
    /// Input of each block's BN layer, i.e. the convolution output.
    std::vector<Tensor> block_features;
  };

  BNNetwork(std::string name, std::vector<ConvBlockSpec> specs, std::size_t in_channels,
            std::size_t num_classes, std::uint64_t seed);

  Tensor forward(const Tensor& x) override;
  Features forward_features(const Tensor& x);

  std::size_t num_classes() const override { return num_classes_; }
  std::vector<Parameter*> parameters() override;
  void set_mode(NormMode mode) override;

  const std::string& name() const { return name_; }
  const std::vector<ConvBlockSpec>& specs() const { return specs_; }
  std::size_t in_channels() const { return in_channels_; }
  std::size_t block_count() const { return specs_.size(); }
  BatchNormLayer& norm(std::size_t block) { return norms_.at(block); }
  Parameter& kernel(std::size_t block) { return kernels_.at(block); }

  std::vector<NamedTensor> state() const;
  void load_state(std::span<const NamedTensor> state);

 private:
  std::string name_;
  std::vector<ConvBlockSpec> specs_;
  std::size_t in_channels_;
  std::size_t num_classes_;
  std::vector<Parameter> kernels_;
  std::vector<BatchNormLayer> norms_;
  Parameter head_weight_;
  Parameter head_bias_;
};

using SubstituteModel = BNNetwork;
using PlainModel = BNNetwork;

/// Target network: every convolution block is followed by an adaptive BN
/// layer that consumes one substitute feature map.
class TargetModel {
 public:
  TargetModel(std::string name, std::vector<ConvBlockSpec> specs, std::vector<std::size_t> substitute_channels,
              std::size_t in_channels, std::size_t num_classes, std::uint64_t seed);

  /// `substitute_features[j]` feeds the adaptive BN layer of block j.
  Tensor forward(const Tensor& x, std::span<const Tensor> substitute_features);

  std::size_t num_classes() const { return num_classes_; }
  std::vector<Parameter*> parameters();
  const std::string& name() const { return name_; }
  const std::vector<ConvBlockSpec>& specs() const { return specs_; }
  std::size_t block_count() const { return specs_.size(); }
  AdaptiveBNLayer& adaptive_norm(std::size_t block) { return norms_.at(block); }
  Parameter& kernel(std::size_t block) { return kernels_.at(block); }

  std::vector<NamedTensor> state() const;
  void load_state(std::span<const NamedTensor> state);

 private:
  std::string name_;
  std::vector<ConvBlockSpec> specs_;
  std::size_t in_channels_;
  std::size_t num_classes_;
  std::vector<Parameter> kernels_;
  std::vector<AdaptiveBNLayer> norms_;
  Parameter head_weight_;
  Parameter head_bias_;
};

/// How an input gradient treats the substitute branch.
enum class InputGradient {
  kFullFramework,  // differentiate through substitute statistics too
  kTargetOnly,     // substitute features are constants
};

/// Frozen substitute plus trainable target. Both see the same raw input; each
/// target block j normalizes with statistics of substitute block block_map[j].
class ABNNModel : public Classifier {
 public:
  ABNNModel(TargetModel target, std::shared_ptr<SubstituteModel> substitute, std::vector<std::size_t> block_map);

  Tensor forward(const Tensor& x) override;
  std::size_t num_classes() const override { return target_.num_classes(); }
  /// Target and encoder parameters only.
  std::vector<Parameter*> parameters() override { return target_.parameters(); }

  TargetModel& target() { return target_; }
  SubstituteModel& substitute() { return *substitute_; }
  const std::vector<std::size_t>& block_map() const { return block_map_; }

  InputGradient input_gradient() const { return input_gradient_; }
  void set_input_gradient(InputGradient mode) { input_gradient_ = mode; }

 private:
  TargetModel target_;
  std::shared_ptr<SubstituteModel> substitute_;
  std::vector<std::size_t> block_map_;
  InputGradient input_gradient_ = InputGradient::kFullFramework;
};

/// Pairs blocks by index from the stem; when counts differ the substitute
/// blocks are sampled uniformly, result[j] = round(j * (S - 1) / (T - 1)).
std::vector<std::size_t> match_blocks(std::size_t substitute_blocks, std::size_t target_blocks);

std::shared_ptr<SubstituteModel> build_substitute(const std::vector<ConvBlockSpec>& specs, std::size_t num_classes,
                                                  std::uint64_t seed, std::size_t in_channels = 3);
PlainModel build_plain(std::string name, const std::vector<ConvBlockSpec>& specs, std::size_t num_classes,
                       std::uint64_t seed, std::size_t in_channels = 3);
TargetModel build_target(const std::vector<ConvBlockSpec>& specs, const std::vector<ConvBlockSpec>& substitute_specs,
                         std::size_t num_classes, std::uint64_t seed, std::size_t in_channels = 3);
ABNNModel build_abnn(const std::vector<ConvBlockSpec>& target_specs, std::shared_ptr<SubstituteModel> substitute,
                     std::size_t num_classes, std::uint64_t seed);

void freeze(BNNetwork& model);
bool assert_frozen(BNNetwork& model);

std::size_t parameter_count(Classifier& model);

}  // namespace abnn
