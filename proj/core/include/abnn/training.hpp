#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "abnn/attacks.hpp"
#include "abnn/data.hpp"
#include "abnn/networks.hpp"
#include "abnn/passes.hpp"

namespace abnn {

struct SGDConfig {
  Scalar learning_rate = Scalar(0.05);
  Scalar momentum = Scalar(0.9);
  int epochs = 5;
  std::size_t batch_size = 64;
  /// Largest global L2 norm of a gradient step; 0 disables clipping.
  Scalar clip_norm = Scalar(1);
  std::uint64_t seed = 0;

  void validate() const;
};

/// Stochastic gradient descent with heavy-ball momentum. When clip_norm > 0
/// the gradient of all parameters together is rescaled to at most that L2
/// norm before it enters the velocity.
class SGD {
 public:
  /// Throws FrozenParameterError if any parameter is frozen.
  SGD(std::vector<Parameter*> params, Scalar learning_rate, Scalar momentum, Scalar clip_norm = 0);

  void zero_grad();
  /// Throws FrozenParameterError if a parameter was frozen after construction.
  void step();

 private:
  std::vector<Parameter*> params_;
  std::vector<std::vector<Scalar>> velocity_;
  Scalar learning_rate_;
  Scalar momentum_;
  Scalar clip_norm_;
};

struct TrainResult {
  PassCounter passes;
  std::vector<Scalar> epoch_losses;  // mean training loss per epoch
  std::uint64_t attack_calls = 0;    // attacks generated while training
};

/// Clean training of the substitute on its own task; frozen on return.
TrainResult pretrain_substitute(const DatasetContainer& data, SubstituteModel& model, const SGDConfig& cfg);

/// Clean training of a plain BN network (the undefended baseline).
TrainResult train_plain(const DatasetContainer& data, PlainModel& model, const SGDConfig& cfg);

/// Clean training of the ABNN target and encoders. Refuses to run unless the
/// substitute is frozen; fails if any attack is generated along the way.
TrainResult train_target(const DatasetContainer& data, ABNNModel& model, const SGDConfig& cfg);

/// Madry-style adversarial training: each step trains on a PGD batch
/// generated against the current model (in eval mode).
TrainResult train_pgd_at(const DatasetContainer& data, PlainModel& model, const SGDConfig& cfg, const PGDConfig& pgd);

// Training cost per step in units of one network pass N.

/// One forward and one backward pass of a single network.
std::uint64_t cost_no_defense();
/// Substitute forward + target forward + target backward.
std::uint64_t cost_abnn();
/// t_max attack iterations and one training step, each forward + backward.
std::uint64_t cost_pgd_at(int t_max);
/// PGD-AT with every pass doubled by a feature-denoising network.
std::uint64_t cost_oudefend(int t_max);
/// cost_pgd_at / cost_abnn = 2(t_max + 1) / 3.
double cost_ratio(int t_max);

/// Measured passes per step; 0 when no step was recorded.
double passes_per_step(const PassCounter& counter);

/// True iff the counter recorded at least one step and every step cost exactly
/// `predicted` passes.
bool verify_cost_model(const PassCounter& counter, std::uint64_t predicted);

}  // namespace abnn
