#include "abnn/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "abnn/ops.hpp"

namespace abnn {

void SGDConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("sgd: learning_rate must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("sgd: momentum must be in [0, 1)");
  if (epochs < 1) throw std::invalid_argument("sgd: epochs must be at least 1");
  if (!(clip_norm >= 0)) throw std::invalid_argument("sgd: clip_norm must be non-negative");
  if (batch_size < 2) throw std::invalid_argument("sgd: batch_size must be at least 2 for batch statistics");
}

SGD::SGD(std::vector<Parameter*> params, Scalar learning_rate, Scalar momentum, Scalar clip_norm)
    : params_(std::move(params)), learning_rate_(learning_rate), momentum_(momentum), clip_norm_(clip_norm) {
  for (auto* p : params_) {
    if (p->frozen()) throw FrozenParameterError("sgd: parameter '" + p->name() + "' is frozen");
    velocity_.emplace_back(p->value().numel(), Scalar(0));
  }
}

void SGD::zero_grad() {
  for (auto* p : params_) p->value().zero_grad();
}

void SGD::step() {
  Scalar sq = 0;
  for (auto* p : params_) {
    if (p->frozen()) throw FrozenParameterError("sgd: parameter '" + p->name() + "' is frozen");
    if (!p->value().has_grad()) continue;
    for (auto g : p->value().node()->grad) sq += g * g;
  }
  const Scalar norm = std::sqrt(sq);
  const Scalar factor = clip_norm_ > 0 && norm > clip_norm_ ? clip_norm_ / norm : Scalar(1);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto* p = params_[i];
    if (!p->value().has_grad()) continue;
    const auto& g = p->value().node()->grad;
    auto w = p->value().mutable_data();
    auto& v = velocity_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = momentum_ * v[k] + factor * g[k];
      w[k] -= learning_rate_ * v[k];
    }
  }
}

namespace {

// Runs `epochs` passes over shuffled minibatches. `step` returns the batch loss.
template <typename Step>
std::vector<Scalar> run_epochs(const DatasetContainer& data, const SGDConfig& cfg, Step&& step) {
  cfg.validate();
  if (data.size() < cfg.batch_size) {
    throw std::invalid_argument("train: dataset has " + std::to_string(data.size()) + " samples, fewer than one batch");
  }
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Scalar> losses;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    Scalar total = 0;
    std::size_t batches = 0;
    // Incomplete trailing batches are dropped so every step sees batch_size samples.
    for (std::size_t begin = 0; begin + cfg.batch_size <= order.size(); begin += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + begin, cfg.batch_size);
      total += step(data.images(idx), data.labels_of(idx));
      ++batches;
    }
    losses.push_back(total / static_cast<Scalar>(batches));
  }
  return losses;
}

Scalar clean_step(Classifier& model, SGD& opt, PassCounter& counter, const Tensor& x, const std::vector<int>& y) {
  opt.zero_grad();
  Scalar value;
  {
    PassCounterScope scope(counter);
    auto loss = softmax_cross_entropy(model.forward(x), y);
    value = loss.item();
    backward(loss);
    counter.end_step();
  }
  opt.step();
  return value;
}

}  // namespace

TrainResult pretrain_substitute(const DatasetContainer& data, SubstituteModel& model, const SGDConfig& cfg) {
  auto result = train_plain(data, model, cfg);
  freeze(model);
  model.set_mode(NormMode::kEval);
  return result;
}

TrainResult train_plain(const DatasetContainer& data, PlainModel& model, const SGDConfig& cfg) {
  TrainResult result;
  SGD opt(model.parameters(), cfg.learning_rate, cfg.momentum, cfg.clip_norm);
  model.set_mode(NormMode::kTrain);
  result.epoch_losses = run_epochs(data, cfg, [&](const Tensor& x, const std::vector<int>& y) {
    return clean_step(model, opt, result.passes, x, y);
  });
  model.set_mode(NormMode::kEval);
  return result;
}

TrainResult train_target(const DatasetContainer& data, ABNNModel& model, const SGDConfig& cfg) {
  if (!assert_frozen(model.substitute())) {
    throw std::logic_error("train_target: substitute must be frozen before target training");
  }
  TrainResult result;
  SGD opt(model.parameters(), cfg.learning_rate, cfg.momentum, cfg.clip_norm);
  const auto attacks_before = attack_invocations();
  result.epoch_losses = run_epochs(data, cfg, [&](const Tensor& x, const std::vector<int>& y) {
    return clean_step(model, opt, result.passes, x, y);
  });
  result.attack_calls = attack_invocations() - attacks_before;
  if (result.attack_calls != 0) throw std::logic_error("train_target: an attack ran during clean training");
  return result;
}

TrainResult train_pgd_at(const DatasetContainer& data, PlainModel& model, const SGDConfig& cfg, const PGDConfig& pgd) {
  if (pgd.t_max < 1) throw std::invalid_argument("train_pgd_at: t_max must be at least 1");
  TrainResult result;
  SGD opt(model.parameters(), cfg.learning_rate, cfg.momentum, cfg.clip_norm);
  const auto attacks_before = attack_invocations();
  std::uint64_t step_index = 0;
  result.epoch_losses = run_epochs(data, cfg, [&](const Tensor& x, const std::vector<int>& y) {
    auto attack = pgd;
    attack.seed = pgd.seed + step_index++;
    opt.zero_grad();
    Scalar value;
    {
      PassCounterScope scope(result.passes);
      model.set_mode(NormMode::kEval);
      const auto x_adv = pgd_perturb(model, x, y, attack);
      model.set_mode(NormMode::kTrain);
      auto loss = softmax_cross_entropy(model.forward(x_adv), y);
      value = loss.item();
      backward(loss);
      result.passes.end_step();
    }
    opt.step();
    return value;
  });
  model.set_mode(NormMode::kEval);
  result.attack_calls = attack_invocations() - attacks_before;
  return result;
}

std::uint64_t cost_no_defense() { return 2; }
std::uint64_t cost_abnn() { return 3; }

std::uint64_t cost_pgd_at(int t_max) {
  if (t_max < 1) throw std::invalid_argument("cost_pgd_at: t_max must be at least 1");
  return 2 * (static_cast<std::uint64_t>(t_max) + 1);
}

std::uint64_t cost_oudefend(int t_max) { return 2 * cost_pgd_at(t_max); }

double cost_ratio(int t_max) {
  return static_cast<double>(cost_pgd_at(t_max)) / static_cast<double>(cost_abnn());
}

double passes_per_step(const PassCounter& counter) {
  if (counter.steps() == 0) return 0;
  return static_cast<double>(counter.total_passes()) / static_cast<double>(counter.steps());
}

bool verify_cost_model(const PassCounter& counter, std::uint64_t predicted) {
  return counter.steps() > 0 && counter.min_step_passes() == predicted && counter.max_step_passes() == predicted &&
         counter.total_passes() == predicted * counter.steps();
}

}  // namespace abnn
