#include "abnn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "abnn/ops.hpp"

namespace abnn {

namespace {

// Shared central-difference loop. `eval` returns the loss at the current
// contents of `values`.
template <typename Eval>
GradCheckResult compare(std::span<const Scalar> analytic, std::span<Scalar> values, Scalar h, Eval&& eval) {
  if (!(h > 0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  GradCheckResult result;
  NoGradGuard no_grad;
  ActivationPatternProbe probe;
  (void)eval();
  const auto base = probe.signature();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Scalar original = values[i];
    values[i] = original + h;
    probe.reset();
    const Scalar up = eval();
    const bool up_same = probe.signature() == base;
    values[i] = original - h;
    probe.reset();
    const Scalar down = eval();
    const bool down_same = probe.signature() == base;
    values[i] = original;
    if (!up_same || !down_same) {
      ++result.skipped;
      continue;
    }

    const Scalar numeric = (up - down) / (2 * h);
    const Scalar denom = std::max({std::abs(analytic[i]), std::abs(numeric), Scalar(1e-8)});
    const Scalar err = std::abs(analytic[i] - numeric) / denom;
    if (result.checked == 0 || err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_index = i;
      result.analytic = analytic[i];
      result.numeric = numeric;
    }
    ++result.checked;
  }
  return result;
}

}  // namespace

GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& at, Scalar h) {
  Tensor x(at.shape(), std::vector<Scalar>(at.data().begin(), at.data().end()), true);
  backward(f(x));
  const auto analytic = x.grad();

  Tensor probe(at.shape(), std::vector<Scalar>(at.data().begin(), at.data().end()));
  return compare(analytic, probe.mutable_data(), h, [&] { return f(probe).item(); });
}

GradCheckResult finite_diff_check(const std::function<Tensor()>& loss, Parameter& param, Scalar h) {
  param.value().zero_grad();
  backward(loss());
  const auto analytic = param.value().grad();
  param.value().zero_grad();
  return compare(analytic, param.value().mutable_data(), h, [&] { return loss().item(); });
}

}  // namespace abnn
