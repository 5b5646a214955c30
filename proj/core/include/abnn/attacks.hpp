#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "abnn/data.hpp"
#include "abnn/networks.hpp"

namespace abnn {

/// L-infinity projected gradient ascent on the classification loss.
struct PGDConfig {
  Scalar epsilon = Scalar(8) / 255;
  Scalar step_size = Scalar(2.5) * (Scalar(8) / 255) / 5;
  int t_max = 5;
  bool random_start = true;
  std::uint64_t seed = 0;

  /// step_size = 2.5 * epsilon / t_max.
  static PGDConfig standard(Scalar epsilon, int t_max, bool random_start = true, std::uint64_t seed = 0);
  void validate() const;
};

/// Axis-aligned pixel rectangle [top, top + height) x [left, left + width).
struct Rect {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  bool contains(std::size_t y, std::size_t x) const {
    return y >= top && y < top + height && x >= left && x < left + width;
  }
  bool operator==(const Rect&) const = default;
};

/// Rectangular occlusion attack: grid search for the placement, then PGD on
/// the rectangle's pixels constrained only to [0, 1].
struct ROAConfig {
  Scalar area_fraction = Scalar(0.10);
  std::size_t rect_height = 0;  // 0: derive from area_fraction
  std::size_t rect_width = 0;
  std::size_t search_stride = 2;
  Scalar fill_value = Scalar(0.5);
  Scalar step_size = Scalar(0.1);
  int t_max = 5;

  void validate() const;
};

/// Rectangle extents with area closest to `area_fraction * H * W`; ties go to
/// the most square shape. Throws if nothing fits.
std::pair<std::size_t, std::size_t> rectangle_for_area(std::size_t height, std::size_t width, Scalar area_fraction);

struct AdversarialExample {
  Tensor x_adv;
  Tensor x_clean;
  std::vector<bool> success;  // prediction differs from the label after the attack
  Scalar loss_before = 0;     // mean cross-entropy on x_clean
  Scalar loss_after = 0;      // mean cross-entropy on x_adv
  std::vector<Rect> regions;  // ROA only: the rectangle chosen per sample
};

AdversarialExample pgd_attack(Classifier& model, const Tensor& x, std::span<const int> y, const PGDConfig& cfg);
/// The perturbed batch only: exactly t_max forward and t_max backward passes,
/// no diagnostic evaluations.
Tensor pgd_perturb(Classifier& model, const Tensor& x, std::span<const int> y, const PGDConfig& cfg);
AdversarialExample roa_attack(Classifier& model, const Tensor& x, std::span<const int> y, const ROAConfig& cfg);

/// Phase-one score of every grid placement: per-sample loss when the whole
/// batch has that rectangle filled with `fill_value`. Returns placements in
/// row-major grid order and scores[placement][sample].
struct PlacementScores {
  std::vector<Rect> placements;
  std::vector<std::vector<Scalar>> scores;
};
PlacementScores score_placements(Classifier& model, const Tensor& x, std::span<const int> y, const ROAConfig& cfg);

struct NoAttack {};
using AttackSpec = std::variant<NoAttack, PGDConfig, ROAConfig>;

/// Accuracy on `data` after attacking each batch against the full model.
/// PGD seeds are offset by the batch index so batches differ but runs repeat.
Scalar evaluate_under_attack(Classifier& model, const DatasetContainer& data, const AttackSpec& attack,
                             std::size_t batch_size = 100);

/// Attack every batch of `data` and collect the adversarial images.
DatasetContainer generate_adversarial(Classifier& model, const DatasetContainer& data, const AttackSpec& attack,
                                      std::size_t batch_size = 100);

/// Number of attack invocations on this thread so far; lets callers prove a
/// code path ran no attack.
std::uint64_t attack_invocations();

}  // namespace abnn
