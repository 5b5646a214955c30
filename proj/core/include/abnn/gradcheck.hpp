#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "abnn/tensor.hpp"

namespace abnn {

struct GradCheckResult {
  Scalar max_relative_error = 0;
  std::size_t worst_index = 0;
  Scalar analytic = 0;
  Scalar numeric = 0;
  std::size_t checked = 0;
  /// Coordinates whose +-h probes crossed a relu kink. Central differences
  /// are not a valid oracle there, so they are excluded from the maximum.
  std::size_t skipped = 0;
};

/// Compares the autodiff gradient of `f` at `at` with central differences of
/// step `h`. Relative error per element is |a - n| / max(|a|, |n|, 1e-8).
/// `f` must build a fresh graph on each call.
GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& at,
                                  Scalar h = Scalar(1e-5));

/// Same comparison for the gradient `loss()` accumulates into `param`, which
/// is perturbed in place and restored.
GradCheckResult finite_diff_check(const std::function<Tensor()>& loss, Parameter& param, Scalar h = Scalar(1e-5));

struct GradCheckCase {
  std::string name;  // "<operation>/<argument>"
  std::size_t trials = 0;
  Scalar max_relative_error = 0;
  std::uint64_t worst_seed = 0;
  Scalar worst_analytic = 0;
  Scalar worst_numeric = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

/// Runs every differentiable operation, the network forwards and the ABNN
/// composite (input and parameter gradients, both attack modes) on `trials`
/// random instances each, seeded from `seed`.
std::vector<GradCheckCase> run_gradcheck_suite(std::size_t trials, std::uint64_t seed, Scalar h = Scalar(1e-5));

}  // namespace abnn
