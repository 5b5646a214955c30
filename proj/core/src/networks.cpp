#include "abnn/networks.hpp"

#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>

#include "abnn/ops.hpp"
#include "abnn/passes.hpp"

namespace abnn {

namespace {

Parameter make_kernel(const std::string& name, std::size_t in, const ConvBlockSpec& spec, std::mt19937_64& rng) {
  const auto fan_in = in * spec.kernel * spec.kernel;
  const Scalar bound = std::sqrt(Scalar(6) / static_cast<Scalar>(fan_in));
  std::uniform_real_distribution<Scalar> u(-bound, bound);
  std::vector<Scalar> w(spec.out_channels * fan_in);
  for (auto& v : w) v = u(rng);
  return Parameter(name, Tensor(Shape{spec.out_channels, in, spec.kernel, spec.kernel}, std::move(w)));
}

std::pair<Parameter, Parameter> make_head(const std::string& name, std::size_t in, std::size_t classes,
                                          std::mt19937_64& rng) {
  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(in));
  std::uniform_real_distribution<Scalar> u(-bound, bound);
  std::vector<Scalar> w(in * classes);
  for (auto& v : w) v = u(rng);
  return {Parameter(name + ".head.weight", Tensor(Shape{in, classes}, std::move(w))),
          Parameter(name + ".head.bias", Tensor(Shape{classes}, Scalar(0)))};
}

Tensor conv(const Tensor& x, const Parameter& kernel, const ConvBlockSpec& spec) {
  return conv2d(x, kernel.value(), spec.stride, spec.kernel / 2);
}

Tensor finish_block(const Tensor& normalized, const ConvBlockSpec& spec) {
  auto h = relu(normalized);
  return spec.pool ? avg_pool2d(h, 2, 2) : h;
}

Tensor head(const Tensor& h, const Parameter& w, const Parameter& b) {
  return linear(global_avg_pool(h), w.value(), b.value());
}

void check_input(const Tensor& x, std::size_t in_channels, const std::string& name) {
  if (x.rank() != 4 || x.dim(1) != in_channels) {
    throw ShapeError(name + ": expected input [N," + std::to_string(in_channels) + ",H,W], got " +
                     to_string(x.shape()));
  }
}

Tensor vector_tensor(const std::vector<Scalar>& v) { return Tensor(Shape{v.size()}, v); }

class StateReader {
 public:
  explicit StateReader(std::span<const NamedTensor> state) {
    for (const auto& t : state) by_name_.emplace(t.name, &t.value);
  }
  const Tensor& get(const std::string& name, const Shape& shape) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    if (it->second->shape() != shape) {
      throw ShapeError("checkpoint: tensor '" + name + "' has shape " + to_string(it->second->shape()) +
                       ", expected " + to_string(shape));
    }
    return *it->second;
  }
  void into(Parameter& p) const {
    const auto& src = get(p.name(), p.value().shape());
    std::copy(src.data().begin(), src.data().end(), p.value().mutable_data().begin());
  }
  void into(std::vector<Scalar>& dst, const std::string& name) const {
    const auto& src = get(name, Shape{dst.size()});
    std::copy(src.data().begin(), src.data().end(), dst.begin());
  }

 private:
  std::map<std::string, const Tensor*> by_name_;
};

}  // namespace

void validate_specs(std::span<const ConvBlockSpec> specs) {
  if (specs.empty()) throw std::invalid_argument("network spec: at least one conv block is required");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    if (s.out_channels == 0 || s.kernel == 0 || s.stride == 0) {
      throw std::invalid_argument("network spec: block " + std::to_string(i) + " has a zero extent");
    }
  }
}

BNNetwork::BNNetwork(std::string name, std::vector<ConvBlockSpec> specs, std::size_t in_channels,
                     std::size_t num_classes, std::uint64_t seed)
    : name_(std::move(name)), specs_(std::move(specs)), in_channels_(in_channels), num_classes_(num_classes) {
  validate_specs(specs_);
  if (num_classes_ < 2) throw std::invalid_argument("BNNetwork: need at least two classes");
  std::mt19937_64 rng(seed);
  std::size_t in = in_channels_;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const auto prefix = name_ + ".block" + std::to_string(i);
    kernels_.push_back(make_kernel(prefix + ".conv", in, specs_[i], rng));
    norms_.emplace_back(prefix + ".bn", specs_[i].out_channels);
    in = specs_[i].out_channels;
  }
  std::tie(head_weight_, head_bias_) = make_head(name_, in, num_classes_, rng);
}

BNNetwork::Features BNNetwork::forward_features(const Tensor& x) {
  check_input(x, in_channels_, name_);
  note_forward_pass(name_);
  NetworkScope scope(&name_);
  Features out;
  Tensor h = x;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    auto z = conv(h, kernels_[i], specs_[i]);
    out.block_features.push_back(z);
    h = finish_block(norms_[i].forward(z), specs_[i]);
  }
  out.logits = head(h, head_weight_, head_bias_);
  return out;
}

Tensor BNNetwork::forward(const Tensor& x) { return forward_features(x).logits; }

std::vector<Parameter*> BNNetwork::parameters() {
  std::vector<Parameter*> out;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    out.push_back(&kernels_[i]);
    for (auto* p : norms_[i].parameters()) out.push_back(p);
  }
  out.push_back(&head_weight_);
  out.push_back(&head_bias_);
  return out;
}

void BNNetwork::set_mode(NormMode mode) {
  for (auto& n : norms_) n.set_mode(mode);
}

std::vector<NamedTensor> BNNetwork::state() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const auto& bn = norms_[i];
    out.push_back({kernels_[i].name(), kernels_[i].value().detach()});
    out.push_back({bn.gamma().name(), bn.gamma().value().detach()});
    out.push_back({bn.beta().name(), bn.beta().value().detach()});
    const auto prefix = name_ + ".block" + std::to_string(i) + ".bn";
    out.push_back({prefix + ".running_mu", vector_tensor(bn.running_stats().mu)});
    out.push_back({prefix + ".running_sigma", vector_tensor(bn.running_stats().sigma)});
  }
  out.push_back({head_weight_.name(), head_weight_.value().detach()});
  out.push_back({head_bias_.name(), head_bias_.value().detach()});
  return out;
}

void BNNetwork::load_state(std::span<const NamedTensor> state) {
  StateReader r(state);
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    auto& bn = norms_[i];
    r.into(kernels_[i]);
    r.into(bn.gamma());
    r.into(bn.beta());
    const auto prefix = name_ + ".block" + std::to_string(i) + ".bn";
    r.into(bn.running_stats().mu, prefix + ".running_mu");
    r.into(bn.running_stats().sigma, prefix + ".running_sigma");
  }
  r.into(head_weight_);
  r.into(head_bias_);
}

TargetModel::TargetModel(std::string name, std::vector<ConvBlockSpec> specs,
                         std::vector<std::size_t> substitute_channels, std::size_t in_channels,
                         std::size_t num_classes, std::uint64_t seed)
    : name_(std::move(name)), specs_(std::move(specs)), in_channels_(in_channels), num_classes_(num_classes) {
  validate_specs(specs_);
  if (substitute_channels.size() != specs_.size()) {
    throw std::invalid_argument("TargetModel: need one substitute channel count per target block");
  }
  if (num_classes_ < 2) throw std::invalid_argument("TargetModel: need at least two classes");
  std::mt19937_64 rng(seed);
  std::size_t in = in_channels_;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const auto prefix = name_ + ".block" + std::to_string(i);
    kernels_.push_back(make_kernel(prefix + ".conv", in, specs_[i], rng));
    norms_.emplace_back(AdaINEncoder(prefix + ".abn", substitute_channels[i], specs_[i].out_channels, rng));
    in = specs_[i].out_channels;
  }
  std::tie(head_weight_, head_bias_) = make_head(name_, in, num_classes_, rng);
}

Tensor TargetModel::forward(const Tensor& x, std::span<const Tensor> substitute_features) {
  check_input(x, in_channels_, name_);
  if (substitute_features.size() != specs_.size()) {
    throw ShapeError(name_ + ": " + std::to_string(substitute_features.size()) + " substitute features for " +
                     std::to_string(specs_.size()) + " blocks");
  }
  note_forward_pass(name_);
  NetworkScope scope(&name_);
  Tensor h = x;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    auto z = conv(h, kernels_[i], specs_[i]);
    h = finish_block(norms_[i].forward(z, substitute_features[i]), specs_[i]);
  }
  return head(h, head_weight_, head_bias_);
}

std::vector<Parameter*> TargetModel::parameters() {
  std::vector<Parameter*> out;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    out.push_back(&kernels_[i]);
    for (auto* p : norms_[i].parameters()) out.push_back(p);
  }
  out.push_back(&head_weight_);
  out.push_back(&head_bias_);
  return out;
}

std::vector<NamedTensor> TargetModel::state() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const auto& enc = norms_[i].encoder();
    out.push_back({kernels_[i].name(), kernels_[i].value().detach()});
    out.push_back({enc.weight().name(), enc.weight().value().detach()});
    out.push_back({enc.bias().name(), enc.bias().value().detach()});
  }
  out.push_back({head_weight_.name(), head_weight_.value().detach()});
  out.push_back({head_bias_.name(), head_bias_.value().detach()});
  return out;
}

void TargetModel::load_state(std::span<const NamedTensor> state) {
  StateReader r(state);
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    r.into(kernels_[i]);
    r.into(norms_[i].encoder().weight());
    r.into(norms_[i].encoder().bias());
  }
  r.into(head_weight_);
  r.into(head_bias_);
}

ABNNModel::ABNNModel(TargetModel target, std::shared_ptr<SubstituteModel> substitute,
                     std::vector<std::size_t> block_map)
    : target_(std::move(target)), substitute_(std::move(substitute)), block_map_(std::move(block_map)) {
  if (!substitute_) throw std::invalid_argument("ABNNModel: substitute is null");
  if (block_map_.size() != target_.block_count()) {
    throw std::invalid_argument("ABNNModel: block_map has " + std::to_string(block_map_.size()) +
                                " entries for " + std::to_string(target_.block_count()) + " target blocks");
  }
  for (std::size_t j = 0; j < block_map_.size(); ++j) {
    const auto s = block_map_[j];
    if (s >= substitute_->block_count()) {
      throw std::invalid_argument("ABNNModel: block_map[" + std::to_string(j) + "] = " + std::to_string(s) +
                                  " exceeds substitute depth");
    }
    if (substitute_->specs()[s].out_channels != target_.adaptive_norm(j).encoder().substitute_channels()) {
      throw std::invalid_argument("ABNNModel: encoder of target block " + std::to_string(j) +
                                  " does not match substitute block " + std::to_string(s));
    }
  }
}

Tensor ABNNModel::forward(const Tensor& x) {
  std::vector<Tensor> mapped;
  {
    const bool through_substitute =
        input_gradient_ == InputGradient::kFullFramework && grad_enabled() && x.requires_grad();
    std::optional<NoGradGuard> detach;
    if (!through_substitute) detach.emplace();
    substitute_->set_mode(NormMode::kEval);
    auto features = substitute_->forward_features(x).block_features;
    mapped.reserve(block_map_.size());
    for (auto s : block_map_) mapped.push_back(features[s]);
  }
  return target_.forward(x, mapped);
}

std::vector<std::size_t> match_blocks(std::size_t substitute_blocks, std::size_t target_blocks) {
  if (substitute_blocks == 0 || target_blocks == 0) throw std::invalid_argument("match_blocks: empty network");
  std::vector<std::size_t> map(target_blocks);
  if (target_blocks == 1) return map;
  for (std::size_t j = 0; j < target_blocks; ++j) {
    const double pos = static_cast<double>(j) * static_cast<double>(substitute_blocks - 1) /
                       static_cast<double>(target_blocks - 1);
    map[j] = static_cast<std::size_t>(std::lround(pos));
  }
  return map;
}

std::shared_ptr<SubstituteModel> build_substitute(const std::vector<ConvBlockSpec>& specs, std::size_t num_classes,
                                                  std::uint64_t seed, std::size_t in_channels) {
  return std::make_shared<SubstituteModel>("substitute", specs, in_channels, num_classes, seed);
}

PlainModel build_plain(std::string name, const std::vector<ConvBlockSpec>& specs, std::size_t num_classes,
                       std::uint64_t seed, std::size_t in_channels) {
  return PlainModel(std::move(name), specs, in_channels, num_classes, seed);
}

TargetModel build_target(const std::vector<ConvBlockSpec>& specs, const std::vector<ConvBlockSpec>& substitute_specs,
                         std::size_t num_classes, std::uint64_t seed, std::size_t in_channels) {
  validate_specs(substitute_specs);
  validate_specs(specs);
  const auto map = match_blocks(substitute_specs.size(), specs.size());
  std::vector<std::size_t> channels;
  for (auto s : map) channels.push_back(substitute_specs[s].out_channels);
  return TargetModel("target", specs, std::move(channels), in_channels, num_classes, seed);
}

ABNNModel build_abnn(const std::vector<ConvBlockSpec>& target_specs, std::shared_ptr<SubstituteModel> substitute,
                     std::size_t num_classes, std::uint64_t seed) {
  if (!substitute) throw std::invalid_argument("build_abnn: substitute is null");
  auto target = build_target(target_specs, substitute->specs(), num_classes, seed, substitute->in_channels());
  auto map = match_blocks(substitute->block_count(), target_specs.size());
  return ABNNModel(std::move(target), std::move(substitute), std::move(map));
}

void freeze(BNNetwork& model) {
  for (auto* p : model.parameters()) p->freeze();
}

bool assert_frozen(BNNetwork& model) {
  auto params = model.parameters();
  if (params.empty()) return false;
  for (auto* p : params) {
    if (!p->frozen()) return false;
  }
  return true;
}

std::size_t parameter_count(Classifier& model) {
  std::size_t n = 0;
  for (auto* p : model.parameters()) n += p->value().numel();
  return n;
}

}  // namespace abnn
