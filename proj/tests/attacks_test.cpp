#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "abnn/attacks.hpp"
#include "abnn/ops.hpp"
#include "abnn/training.hpp"
#include "oracles.hpp"

namespace abnn {
namespace {

using testing::random_tensor;
using testing::to_vec;

// logits = [0, w . x + b] over the flattened image: a logistic model.
class LogisticModel : public Classifier {
 public:
  LogisticModel(std::vector<Scalar> w, Scalar b) : w_(std::move(w)), b_(b) {}
  Tensor forward(const Tensor& x) override {
    const std::size_t N = x.dim(0), D = x.numel() / N;
    std::vector<Scalar> weight(2 * D, 0);
    for (std::size_t d = 0; d < D; ++d) weight[d * 2 + 1] = w_[d];
    return linear(reshape(x, Shape{N, D}), Tensor({D, 2}, weight), Tensor({2}, std::vector<Scalar>{0, b_}));
  }
  std::size_t num_classes() const override { return 2; }
  std::vector<Parameter*> parameters() override { return {}; }

 private:
  std::vector<Scalar> w_;
  Scalar b_;
};

// A small undefended network trained on a synthetic blob task, shared across tests.
struct TrainedToy {
  DatasetContainer train, test;
  PlainModel model = build_plain("toy", {{8, 3, 1, true}, {16, 3, 1, true}}, 2, 3, 3);

  TrainedToy() {
    SyntheticSpec spec;
    spec.height = spec.width = 16;
    spec.blob_radius = 3;
    spec.samples = 512;
    train = gen_synthetic(spec, 1);
    spec.samples = 512;
    test = gen_synthetic(spec, 2);
    SGDConfig sgd;
    sgd.epochs = 6;
    sgd.batch_size = 32;
    train_plain(train, model, sgd);
  }
};

TrainedToy& toy() {
  static TrainedToy t;
  return t;
}

Tensor first_images(const DatasetContainer& d, std::size_t n, std::vector<int>& labels) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  labels = d.labels_of(idx);
  return d.images(idx);
}

TEST(PGD, ClosedFormLogisticStep) {
  std::mt19937_64 rng(41);
  const std::size_t D = 2 * 3 * 3;
  std::vector<Scalar> w(D);
  for (auto& v : w) v = std::uniform_real_distribution<Scalar>(-1, 1)(rng);
  w[4] = 0;  // no gradient, no movement
  LogisticModel model(w, 0.3);
  const auto x = random_tensor({4, 2, 3, 3}, rng, 0, 1);
  const std::vector<int> y{0, 1, 1, 0};
  PGDConfig cfg;
  cfg.t_max = 1;
  cfg.random_start = false;
  cfg.step_size = cfg.epsilon;
  const auto adv = pgd_attack(model, x, y, cfg);
  for (std::size_t n = 0; n < 4; ++n) {
    // d loss / d x = (sigmoid(s) - y) w; the sigmoid factor lies in (0, 1) so only y decides the sign.
    const double dir = y[n] == 0 ? 1 : -1;
    for (std::size_t d = 0; d < D; ++d) {
      const std::size_t k = n * D + d;
      const double s = w[d] > 0 ? dir : (w[d] < 0 ? -dir : 0);
      EXPECT_EQ(adv.x_adv.at(k), std::clamp(x.at(k) + cfg.epsilon * s, 0.0, 1.0));
    }
  }
  EXPECT_GT(adv.loss_after, adv.loss_before);
}

TEST(PGD, ZeroBudgetLeavesInputUnchanged) {
  std::vector<int> y;
  const auto x = first_images(toy().test, 50, y);
  auto cfg = PGDConfig::standard(0, 5, true, 3);
  EXPECT_EQ(to_vec(pgd_attack(toy().model, x, y, cfg).x_adv), to_vec(x));
}

TEST(PGD, ZeroIterationsWithoutRandomStartLeavesInputUnchanged) {
  std::vector<int> y;
  const auto x = first_images(toy().test, 50, y);
  auto cfg = PGDConfig::standard(8.0 / 255, 0, false);
  EXPECT_EQ(to_vec(pgd_attack(toy().model, x, y, cfg).x_adv), to_vec(x));
}

TEST(PGD, StaysInsideBallAndPixelRange) {
  std::vector<int> y;
  const auto x = first_images(toy().test, 100, y);
  for (double eps : {1.0 / 255, 8.0 / 255, 0.3}) {
    for (int t : {1, 5, 10}) {
      const auto adv = pgd_attack(toy().model, x, y, PGDConfig::standard(eps, t, true, 7));
      for (std::size_t k = 0; k < x.numel(); ++k) {
        const double v = adv.x_adv.at(k);
        ASSERT_LE(std::abs(v - x.at(k)), eps + 1e-9);
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
    }
  }
}

TEST(PGD, SameSeedSameExamples) {
  std::vector<int> y;
  const auto x = first_images(toy().test, 40, y);
  const auto cfg = PGDConfig::standard(8.0 / 255, 5, true, 11);
  EXPECT_EQ(to_vec(pgd_attack(toy().model, x, y, cfg).x_adv), to_vec(pgd_attack(toy().model, x, y, cfg).x_adv));
  auto other = cfg;
  other.seed = 12;
  EXPECT_NE(to_vec(pgd_attack(toy().model, x, y, other).x_adv), to_vec(pgd_attack(toy().model, x, y, cfg).x_adv));
}

TEST(PGD, LeavesModelParametersUntouched) {
  std::vector<int> y;
  const auto x = first_images(toy().test, 20, y);
  for (auto* p : toy().model.parameters()) p->value().zero_grad();
  pgd_attack(toy().model, x, y, PGDConfig::standard(8.0 / 255, 3));
  for (auto* p : toy().model.parameters()) {
    EXPECT_FALSE(p->value().has_grad()) << p->name();
    EXPECT_TRUE(p->value().requires_grad()) << p->name();
  }
}

TEST(PGD, RejectsInvalidConfigAndInputs) {
  std::vector<int> y;
  const auto x = first_images(toy().test, 4, y);
  auto bad = PGDConfig::standard(8.0 / 255, 5);
  bad.epsilon = -0.1;
  EXPECT_THROW(pgd_attack(toy().model, x, y, bad), std::invalid_argument);
  bad = PGDConfig::standard(8.0 / 255, -1);
  EXPECT_THROW(pgd_attack(toy().model, x, y, bad), std::invalid_argument);
  EXPECT_THROW(pgd_attack(toy().model, add_scalar(x, 2), y, PGDConfig::standard(0.1, 1)), std::invalid_argument);
}

TEST(PGD, StandardStepIsTwoAndAHalfBudgetsOverIterations) {
  const auto cfg = PGDConfig::standard(8.0 / 255, 5);
  EXPECT_DOUBLE_EQ(cfg.step_size, 2.5 * (8.0 / 255) / 5);
  const PGDConfig defaults;
  EXPECT_DOUBLE_EQ(defaults.epsilon, 8.0 / 255);
  EXPECT_EQ(defaults.t_max, 5);
  EXPECT_DOUBLE_EQ(defaults.step_size, cfg.step_size);
}

TEST(PGD, AttackedAccuracyDoesNotExceedCleanAccuracy) {
  auto& t = toy();
  ASSERT_GE(t.test.size(), 500u);
  const auto clean = evaluate_under_attack(t.model, t.test, NoAttack{});
  const auto attacked = evaluate_under_attack(t.model, t.test, PGDConfig::standard(8.0 / 255, 5));
  EXPECT_GT(clean, 0.9);
  EXPECT_LE(attacked, clean);
  EXPECT_EQ(evaluate_under_attack(t.model, t.test, PGDConfig::standard(0, 5)), clean);
}

TEST(PGD, MeanLossGrowsWithBudget) {
  auto& t = toy();
  t.model.set_mode(NormMode::kEval);
  std::vector<int> y;
  const auto x = first_images(t.test, 512, y);
  double previous = -1;
  for (double k : {0.0, 2.0, 4.0, 8.0}) {
    const auto adv = pgd_attack(t.model, x, y, PGDConfig::standard(k / 255, 5, true, 5));
    EXPECT_GE(adv.loss_after, previous) << "epsilon " << k << "/255";
    previous = adv.loss_after;
  }
}

TEST(PGD, MemorizedTrainingDataIsClassifiedPerfectly) {
  auto& t = toy();
  EXPECT_EQ(evaluate_under_attack(t.model, t.train, NoAttack{}), 1.0);
}

TEST(ROA, RectangleAreaIsClosestToTenPercent) {
  EXPECT_EQ(rectangle_for_area(32, 32, 0.10), (std::pair<std::size_t, std::size_t>{10, 10}));
  EXPECT_EQ(rectangle_for_area(16, 16, 0.10), (std::pair<std::size_t, std::size_t>{5, 5}));
  // Non-square image: the chosen area stays within one row or column of the target.
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{24, 40}, {17, 31}, {8, 64}}) {
    const auto [rh, rw] = rectangle_for_area(h, w, 0.10);
    EXPECT_LE(std::abs(static_cast<double>(rh * rw) - 0.10 * h * w), static_cast<double>(std::min(h, w)));
    EXPECT_LE(rh, h);
    EXPECT_LE(rw, w);
  }
  EXPECT_THROW(rectangle_for_area(16, 16, 0), std::invalid_argument);
}

TEST(ROA, ChangesOnlyTheReportedRectangle) {
  std::vector<int> y;
  const auto x = first_images(toy().test, 30, y);
  const auto adv = roa_attack(toy().model, x, y, ROAConfig{});
  ASSERT_EQ(adv.regions.size(), 30u);
  const std::size_t C = 3, H = 16, W = 16;
  for (std::size_t n = 0; n < 30; ++n) {
    EXPECT_EQ(adv.regions[n].height * adv.regions[n].width, 25u);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          const std::size_t k = ((n * C + c) * H + i) * W + j;
          const double v = adv.x_adv.at(k);
          if (!adv.regions[n].contains(i, j)) {
            ASSERT_EQ(v, x.at(k));
          } else {
            ASSERT_GE(v, 0.0);
            ASSERT_LE(v, 1.0);
          }
        }
  }
}

TEST(ROA, ChosenPlacementMaximisesTheGrayFillLoss) {
  auto& model = toy().model;
  model.set_mode(NormMode::kEval);
  std::vector<int> y;
  const auto x = first_images(toy().test, 20, y);
  const ROAConfig cfg;
  const auto adv = roa_attack(model, x, y, cfg);
  // Re-score every stride-2 placement independently of the attack's bookkeeping.
  const std::size_t N = 20, C = 3, H = 16, W = 16, rh = 5, rw = 5;
  std::vector<std::vector<double>> best(N);
  std::vector<double> best_loss(N, -1), chosen_loss(N, -1);
  for (std::size_t top = 0; top + rh <= H; top += 2)
    for (std::size_t left = 0; left + rw <= W; left += 2) {
      auto v = to_vec(x);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = top; i < top + rh; ++i)
            for (std::size_t j = left; j < left + rw; ++j) v[((n * C + c) * H + i) * W + j] = 0.5;
      Tensor logits;
      {
        NoGradGuard g;
        logits = model.forward(Tensor(x.shape(), std::vector<Scalar>(v.begin(), v.end())));
      }
      std::vector<double> lv = to_vec(logits);
      for (std::size_t n = 0; n < N; ++n) {
        const double loss = testing::direct_cross_entropy({lv.begin() + n * 2, lv.begin() + n * 2 + 2}, 1, 2, {y[n]});
        best_loss[n] = std::max(best_loss[n], loss);
        if (adv.regions[n] == Rect{top, left, rh, rw}) chosen_loss[n] = loss;
      }
    }
  for (std::size_t n = 0; n < N; ++n) {
    ASSERT_GE(chosen_loss[n], 0.0) << "placement off the grid for sample " << n;
    EXPECT_NEAR(chosen_loss[n], best_loss[n], 1e-9 * std::max(1.0, best_loss[n]));
  }
}

TEST(ROA, RejectsOversizedRectangle) {
  std::vector<int> y;
  const auto x = first_images(toy().test, 2, y);
  ROAConfig cfg;
  cfg.rect_height = 17;
  cfg.rect_width = 2;
  EXPECT_THROW(roa_attack(toy().model, x, y, cfg), std::invalid_argument);
}

TEST(ROA, IsDeterministic) {
  std::vector<int> y;
  const auto x = first_images(toy().test, 10, y);
  EXPECT_EQ(to_vec(roa_attack(toy().model, x, y, ROAConfig{}).x_adv),
            to_vec(roa_attack(toy().model, x, y, ROAConfig{}).x_adv));
}

TEST(Attacks, InvocationsAreCounted) {
  std::vector<int> y;
  const auto x = first_images(toy().test, 4, y);
  const auto before = attack_invocations();
  pgd_attack(toy().model, x, y, PGDConfig::standard(0.01, 1));
  roa_attack(toy().model, x, y, ROAConfig{});
  EXPECT_EQ(attack_invocations() - before, 2u);
}

TEST(Attacks, GeneratedDatasetKeepsLabelsAndShape) {
  auto& t = toy();
  const auto adv = generate_adversarial(t.model, t.test.subset(0, 64), PGDConfig::standard(8.0 / 255, 2), 32);
  EXPECT_EQ(adv.labels, t.test.subset(0, 64).labels);
  EXPECT_EQ(adv.pixels.size(), 64 * t.test.image_size());
  EXPECT_NO_THROW(adv.validate());
}

}  // namespace
}  // namespace abnn
