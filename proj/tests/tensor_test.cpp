#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "abnn/gradcheck.hpp"
#include "abnn/ops.hpp"
#include "oracles.hpp"

namespace abnn {
namespace {

using testing::random_tensor;
using testing::to_vec;

TEST(Tensor, ShapeProductMatchesElementCount) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.data().size(), 24u);
  EXPECT_THROW(Tensor({2, 3}, std::vector<Scalar>(5)), ShapeError);
}

TEST(Tensor, GradHasValueShape) {
  Tensor x({2, 2}, std::vector<Scalar>{1, 2, 3, 4}, true);
  backward(sum(mul(x, x)));
  ASSERT_TRUE(x.has_grad());
  EXPECT_EQ(x.grad().size(), x.numel());
}

TEST(Tensor, NonFiniteResultIsAnError) {
  Tensor x({2}, std::vector<Scalar>{-1, 4});
  EXPECT_THROW(sqrt(x), NumericError);
  Tensor big({1}, std::vector<Scalar>{std::numeric_limits<Scalar>::max()});
  EXPECT_THROW(add(big, big), NumericError);
}

TEST(Tensor, BinaryOpsRejectShapeMismatch) {
  EXPECT_THROW(add(Tensor({2, 3}), Tensor({3, 2})), ShapeError);
  EXPECT_THROW(mul(Tensor({2}), Tensor({3})), ShapeError);
}

TEST(Conv2d, IdentityKernelCopiesInput) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({1, 1, 3, 3}, rng);
  auto y = conv2d(x, Tensor({1, 1, 1, 1}, Scalar(1)), 1, 0);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(to_vec(y), to_vec(x));
}

TEST(Conv2d, ZeroKernelGivesZeros) {
  std::mt19937_64 rng(2);
  auto y = conv2d(random_tensor({2, 3, 5, 5}, rng), Tensor({4, 3, 3, 3}), 1, 1);
  for (auto v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesNaiveLoops) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 3, 8, 8}, rng);
  auto k = random_tensor({4, 3, 3, 3}, rng);
  for (std::size_t stride : {1, 2}) {
    for (std::size_t pad : {0, 1, 2}) {
      std::size_t Ho = 0, Wo = 0;
      const auto expected = testing::naive_conv2d(to_vec(x), 2, 3, 8, 8, to_vec(k), 4, 3, 3, stride, pad, Ho, Wo);
      const auto y = conv2d(x, k, stride, pad);
      ASSERT_EQ(y.shape(), (Shape{2, 4, Ho, Wo}));
      for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y.at(i), expected[i], 1e-10);
    }
  }
}

TEST(Conv2d, RejectsChannelMismatchAndEmptyOutput) {
  EXPECT_THROW(conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 3, 3, 3}), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(Tensor({1, 1, 2, 2}), Tensor({1, 1, 3, 3}), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(Tensor({1, 1, 4, 4}), Tensor({1, 1, 3, 3}), 0, 0), ShapeError);
}

TEST(Linear, IdentityWeightZeroBiasIsIdentity) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({3, 4}, rng);
  std::vector<Scalar> eye(16, 0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1;
  auto y = linear(x, Tensor({4, 4}, eye), Tensor({4}));
  EXPECT_EQ(to_vec(y), to_vec(x));
}

TEST(Linear, ZeroWeightGivesBiasRows) {
  std::mt19937_64 rng(5);
  auto b = random_tensor({3}, rng);
  auto y = linear(random_tensor({4, 2}, rng), Tensor({2, 3}), b);
  for (std::size_t n = 0; n < 4; ++n) {
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(y.at(n * 3 + k), b.at(k));
  }
}

TEST(Linear, MatchesNaiveDotProducts) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t N = 1 + trial % 5, D = 2 + trial % 7, K = 1 + trial % 4;
    auto x = random_tensor({N, D}, rng), w = random_tensor({D, K}, rng), b = random_tensor({K}, rng);
    const auto expected = testing::naive_linear(to_vec(x), N, D, to_vec(w), K, to_vec(b));
    const auto y = linear(x, w, b);
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y.at(i), expected[i], 1e-10);
  }
}

TEST(Linear, RejectsInnerDimensionMismatch) {
  EXPECT_THROW(linear(Tensor({2, 3}), Tensor({4, 2}), Tensor({2})), ShapeError);
  EXPECT_THROW(linear(Tensor({2, 3}), Tensor({3, 2}), Tensor({3})), ShapeError);
}

TEST(Relu, ClampsNegativesAndZero) {
  auto y = relu(Tensor({3}, std::vector<Scalar>{-1, 0, 2}));
  EXPECT_EQ(to_vec(y), (std::vector<double>{0, 0, 2}));
}

TEST(Relu, SubgradientAtZeroIsZero) {
  Tensor x({3}, std::vector<Scalar>{-1, 0, 2}, true);
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad(), (std::vector<Scalar>{0, 0, 1}));
}

TEST(Pooling, GlobalAverageOfConstantMap) {
  auto y = global_avg_pool(Tensor({2, 3, 4, 5}, Scalar(1.25)));
  EXPECT_EQ(y.shape(), (Shape{2, 3}));
  for (auto v : y.data()) EXPECT_DOUBLE_EQ(v, 1.25);
}

TEST(Pooling, AveragePoolTwoByTwo) {
  auto y = avg_pool2d(Tensor({1, 1, 2, 2}, std::vector<Scalar>{1, 2, 3, 4}), 2, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 2.5);
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  auto loss = softmax_cross_entropy(Tensor({4, 10}, Scalar(0.7)), std::vector<int>{0, 3, 9, 5});
  EXPECT_NEAR(loss.item(), std::log(10.0), 1e-12);
  EXPECT_NEAR(loss.item(), 2.302585, 1e-6);
}

TEST(CrossEntropy, DecreasesWithCorrectMargin) {
  double previous = std::numeric_limits<double>::infinity();
  for (double margin : {1.0, 10.0, 100.0}) {
    auto loss = softmax_cross_entropy(Tensor({1, 3}, std::vector<Scalar>{0, margin, 0}), std::vector<int>{1});
    EXPECT_LT(loss.item(), previous);
    EXPECT_GE(loss.item(), 0.0);
    previous = loss.item();
  }
  EXPECT_LT(previous, 1e-40);
}

TEST(CrossEntropy, MatchesDirectFormula) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t N = 1 + trial % 6, K = 2 + trial % 9;
    auto logits = random_tensor({N, K}, rng, -5, 5);
    std::vector<int> labels(N);
    for (auto& l : labels) l = static_cast<int>(rng() % K);
    EXPECT_NEAR(softmax_cross_entropy(logits, labels).item(),
                testing::direct_cross_entropy(to_vec(logits), N, K, labels), 1e-10);
  }
}

TEST(CrossEntropy, StableForHugeLogits) {
  auto loss = softmax_cross_entropy(Tensor({1, 2}, std::vector<Scalar>{1000, -1000}), std::vector<int>{1});
  EXPECT_NEAR(loss.item(), 2000.0, 1e-9);
}

TEST(CrossEntropy, RejectsOutOfRangeLabel) {
  EXPECT_THROW(softmax_cross_entropy(Tensor({2, 3}), std::vector<int>{0, 3}), std::out_of_range);
  EXPECT_THROW(softmax_cross_entropy(Tensor({2, 3}), std::vector<int>{-1, 0}), std::out_of_range);
}

TEST(Backward, QuadraticGradient) {
  Tensor x({3}, std::vector<Scalar>{1, 2, 3}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad(), (std::vector<Scalar>{2, 4, 6}));
}

TEST(Backward, IndependentParameterGetsZero) {
  Parameter p("p", Tensor({2}, std::vector<Scalar>{1, 1}));
  Tensor x({2}, std::vector<Scalar>{3, 4}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(p.value().grad(), (std::vector<Scalar>{0, 0}));
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor x({2}, std::vector<Scalar>{1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), ShapeError);
}

TEST(Backward, GradientsAccumulateAcrossCalls) {
  Tensor x({2}, std::vector<Scalar>{1, -2}, true);
  backward(sum(mul(x, x)));
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad(), (std::vector<Scalar>{4, -8}));
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, ScalingTheLossScalesEveryGradient) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    Parameter k("k", random_tensor({3, 2, 3, 3}, rng));
    Parameter w("w", random_tensor({3, 4}, rng));
    Parameter b("b", random_tensor({4}, rng));
    const auto x = random_tensor({2, 2, 5, 5}, rng);
    const std::vector<int> y{1, 3};
    auto loss = [&] {
      return softmax_cross_entropy(linear(global_avg_pool(relu(conv2d(x, k.value(), 1, 1))), w.value(), b.value()), y);
    };
    backward(loss());
    const auto gk = k.value().grad(), gw = w.value().grad(), gb = b.value().grad();
    for (auto* p : {&k, &w, &b}) p->value().zero_grad();
    const double a = 1 + static_cast<double>(seed) * 0.37;
    backward(scale(loss(), a));
    auto expect_scaled = [&](const std::vector<Scalar>& base, const std::vector<Scalar>& scaled) {
      for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(scaled[i], a * base[i], 1e-12 * std::max(1.0, std::abs(a * base[i])));
    };
    expect_scaled(gk, k.value().grad());
    expect_scaled(gw, w.value().grad());
    expect_scaled(gb, b.value().grad());

    // Passing the factor as the backward seed is equivalent.
    for (auto* p : {&k, &w, &b}) p->value().zero_grad();
    backward(loss(), a);
    expect_scaled(gw, w.value().grad());
  }
}

TEST(Backward, FrozenParametersNeverReceiveGradients) {
  std::mt19937_64 rng(8);
  Parameter k("k", random_tensor({2, 1, 3, 3}, rng));
  Parameter w("w", random_tensor({2, 3}, rng));
  Parameter b("b", random_tensor({3}, rng));
  k.freeze();
  b.freeze();
  Tensor x = random_tensor({2, 1, 4, 4}, rng);
  x.set_requires_grad(true);
  // The frozen kernel sits between the input and the loss; the input still gets a gradient.
  backward(softmax_cross_entropy(linear(global_avg_pool(relu(conv2d(x, k.value(), 1, 1))), w.value(), b.value()),
                                 std::vector<int>{0, 2}));
  EXPECT_FALSE(k.value().has_grad());
  EXPECT_FALSE(b.value().has_grad());
  EXPECT_TRUE(w.value().has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x({2}, std::vector<Scalar>{1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    y = sum(mul(x, x));
  }
  EXPECT_TRUE(grad_enabled());
  backward(y);
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, TraceNamesTraversedNetworks) {
  const std::string a = "a", b = "b";
  Tensor x({2}, std::vector<Scalar>{1, 2}, true);
  Tensor h, out;
  {
    NetworkScope s(&a);
    h = scale(x, 2);
  }
  {
    NetworkScope s(&b);
    out = sum(mul(h, h));
  }
  const auto trace = backward(out);
  EXPECT_EQ(trace.networks, (std::vector<std::string>{"b", "a"}));
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A deliberately wrong backward: value x^2, gradient claimed as x.
  auto f = [](const Tensor& x) {
    std::vector<Scalar> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.at(i) * x.at(i);
    auto y = detail::make_result(x.shape(), std::move(v), {x}, [](detail::Node& self) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.inputs[0]->value[i];
    });
    return sum(y);
  };
  const auto r = finite_diff_check(f, Tensor({3}, std::vector<Scalar>{1, 2, 3}));
  EXPECT_NEAR(r.max_relative_error, 0.5, 1e-6);
}

TEST(GradCheck, RejectsNonPositiveStep) {
  auto f = [](const Tensor& x) { return sum(x); };
  EXPECT_THROW(finite_diff_check(f, Tensor({2}), 0), std::invalid_argument);
}

TEST(GradCheck, SkipsProbesThatCrossAReluKink) {
  auto f = [](const Tensor& x) { return sum(relu(x)); };
  const auto r = finite_diff_check(f, Tensor({3}, std::vector<Scalar>{1e-7, 0.5, -0.5}));
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.checked, 2u);
  EXPECT_LT(r.max_relative_error, 1e-8);
}

// A subset of the full suite; the acceptance test runs 100 trials per case.
TEST(GradCheck, EveryOperationMatchesFiniteDifferences) {
  for (const auto& c : run_gradcheck_suite(10, 12345)) {
    EXPECT_LT(c.max_relative_error, 1e-4) << c.name << " worst seed " << c.worst_seed;
    EXPECT_GT(c.checked, 0u) << c.name;
  }
}

}  // namespace
}  // namespace abnn
