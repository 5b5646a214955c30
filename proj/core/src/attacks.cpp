#include "abnn/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "abnn/ops.hpp"

namespace abnn {

namespace {

thread_local std::uint64_t t_attack_invocations = 0;

// Turns off gradient accumulation into model parameters for the duration of
// an attack; only the input gradient is needed.
class SuspendParameterGrads {
 public:
  explicit SuspendParameterGrads(Classifier& model) {
    for (auto* p : model.parameters()) {
      saved_.emplace_back(p, p->value().requires_grad());
      p->value().set_requires_grad(false);
    }
  }
  ~SuspendParameterGrads() {
    for (auto& [p, flag] : saved_) p->value().set_requires_grad(flag);
  }
  SuspendParameterGrads(const SuspendParameterGrads&) = delete;
  SuspendParameterGrads& operator=(const SuspendParameterGrads&) = delete;

 private:
  std::vector<std::pair<Parameter*, bool>> saved_;
};

void check_image_batch(const Tensor& x, std::span<const int> y, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + to_string(x.shape()));
  if (y.size() != x.dim(0)) throw ShapeError(std::string(op) + ": label count does not match batch");
  for (auto v : x.data()) {
    if (!(v >= 0 && v <= 1)) throw std::invalid_argument(std::string(op) + ": input outside [0, 1]");
  }
}

Scalar sign(Scalar v) { return v > 0 ? Scalar(1) : (v < 0 ? Scalar(-1) : Scalar(0)); }

// Input gradient of the mean cross-entropy at `x`.
std::vector<Scalar> input_gradient(Classifier& model, const Shape& shape, const std::vector<Scalar>& x,
                                   std::span<const int> y) {
  Tensor xv(shape, x, true);
  backward(softmax_cross_entropy(model.forward(xv), y));
  auto g = xv.grad();
  for (auto v : g) {
    if (!std::isfinite(v)) throw NumericError("attack: non-finite input gradient");
  }
  return g;
}

struct Outcome {
  Scalar loss;
  std::vector<bool> wrong;
};

Outcome evaluate(Classifier& model, const Tensor& x, std::span<const int> y) {
  NoGradGuard no_grad;
  auto logits = model.forward(x);
  auto pred = argmax_rows(logits);
  Outcome o{softmax_cross_entropy(logits, y).item(), std::vector<bool>(y.size())};
  for (std::size_t i = 0; i < y.size(); ++i) o.wrong[i] = pred[i] != y[i];
  return o;
}

}  // namespace

PGDConfig PGDConfig::standard(Scalar epsilon, int t_max, bool random_start, std::uint64_t seed) {
  PGDConfig c;
  c.epsilon = epsilon;
  c.t_max = t_max;
  c.step_size = t_max > 0 ? Scalar(2.5) * epsilon / static_cast<Scalar>(t_max) : epsilon;
  c.random_start = random_start;
  c.seed = seed;
  return c;
}

void PGDConfig::validate() const {
  if (!(epsilon >= 0 && epsilon < 1)) throw std::invalid_argument("pgd: epsilon must be in [0, 1)");
  if (!(step_size >= 0)) throw std::invalid_argument("pgd: step_size must be non-negative");
  if (t_max < 0) throw std::invalid_argument("pgd: t_max must be non-negative");
}

void ROAConfig::validate() const {
  if (!(area_fraction > 0 && area_fraction <= 1)) throw std::invalid_argument("roa: area_fraction must be in (0, 1]");
  if (search_stride == 0) throw std::invalid_argument("roa: search_stride must be positive");
  if (!(fill_value >= 0 && fill_value <= 1)) throw std::invalid_argument("roa: fill_value must be in [0, 1]");
  if (!(step_size >= 0)) throw std::invalid_argument("roa: step_size must be non-negative");
  if (t_max < 0) throw std::invalid_argument("roa: t_max must be non-negative");
  if ((rect_height == 0) != (rect_width == 0)) throw std::invalid_argument("roa: give both rectangle extents or neither");
}

std::pair<std::size_t, std::size_t> rectangle_for_area(std::size_t height, std::size_t width, Scalar area_fraction) {
  if (height == 0 || width == 0) throw std::invalid_argument("roa: empty image");
  if (!(area_fraction > 0 && area_fraction <= 1)) throw std::invalid_argument("roa: area_fraction must be in (0, 1]");
  const Scalar target = area_fraction * static_cast<Scalar>(height * width);
  const Scalar tolerance = static_cast<Scalar>(std::min(height, width));
  std::pair<std::size_t, std::size_t> best{0, 0};
  std::size_t best_skew = std::numeric_limits<std::size_t>::max();
  Scalar best_err = std::numeric_limits<Scalar>::infinity();
  for (std::size_t h = 1; h <= height; ++h) {
    for (std::size_t w = 1; w <= width; ++w) {
      const Scalar err = std::abs(static_cast<Scalar>(h * w) - target);
      if (err > tolerance) continue;
      const std::size_t skew = h > w ? h - w : w - h;
      // Strict comparisons keep the first hit, so h <= w wins exact ties.
      if (skew < best_skew || (skew == best_skew && err < best_err)) {
        best = {h, w};
        best_skew = skew;
        best_err = err;
      }
    }
  }
  if (best.first == 0) throw std::invalid_argument("roa: no rectangle fits the requested area");
  return best;
}

Tensor pgd_perturb(Classifier& model, const Tensor& x, std::span<const int> y, const PGDConfig& cfg) {
  ++t_attack_invocations;
  cfg.validate();
  check_image_batch(x, y, "pgd_attack");
  SuspendParameterGrads suspend(model);

  const auto clean = std::vector<Scalar>(x.data().begin(), x.data().end());
  std::vector<Scalar> adv = clean;
  if (cfg.random_start && cfg.epsilon > 0) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<Scalar> u(-cfg.epsilon, cfg.epsilon);
    for (auto& v : adv) v = std::clamp(v + u(rng), Scalar(0), Scalar(1));
  }
  for (int t = 0; t < cfg.t_max; ++t) {
    const auto g = input_gradient(model, x.shape(), adv, y);
    for (std::size_t i = 0; i < adv.size(); ++i) {
      const Scalar stepped = adv[i] + cfg.step_size * sign(g[i]);
      adv[i] = std::clamp(std::clamp(stepped, clean[i] - cfg.epsilon, clean[i] + cfg.epsilon), Scalar(0), Scalar(1));
    }
  }
  return Tensor(x.shape(), std::move(adv));
}

AdversarialExample pgd_attack(Classifier& model, const Tensor& x, std::span<const int> y, const PGDConfig& cfg) {
  AdversarialExample out;
  out.x_adv = pgd_perturb(model, x, y, cfg);
  out.x_clean = x.detach();
  out.loss_before = evaluate(model, out.x_clean, y).loss;
  auto after = evaluate(model, out.x_adv, y);
  out.loss_after = after.loss;
  out.success = std::move(after.wrong);
  return out;
}

PlacementScores score_placements(Classifier& model, const Tensor& x, std::span<const int> y, const ROAConfig& cfg) {
  cfg.validate();
  check_image_batch(x, y, "roa_attack");
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto [rh, rw] = cfg.rect_height ? std::pair{cfg.rect_height, cfg.rect_width} : rectangle_for_area(H, W, cfg.area_fraction);
  if (rh > H || rw > W) throw std::invalid_argument("roa_attack: rectangle larger than image");

  PlacementScores out;
  NoGradGuard no_grad;
  for (std::size_t top = 0; top + rh <= H; top += cfg.search_stride) {
    for (std::size_t left = 0; left + rw <= W; left += cfg.search_stride) {
      const Rect r{top, left, rh, rw};
      std::vector<Scalar> filled(x.data().begin(), x.data().end());
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t i = top; i < top + rh; ++i) {
            std::fill_n(filled.begin() + static_cast<std::ptrdiff_t>(((n * C + c) * H + i) * W + left), rw,
                        cfg.fill_value);
          }
        }
      }
      auto logits = model.forward(Tensor(x.shape(), std::move(filled)));
      out.placements.push_back(r);
      out.scores.push_back(cross_entropy_per_sample(logits, y));
    }
  }
  return out;
}

AdversarialExample roa_attack(Classifier& model, const Tensor& x, std::span<const int> y, const ROAConfig& cfg) {
  ++t_attack_invocations;
  const auto scores = score_placements(model, x, y, cfg);
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);

  std::vector<Rect> chosen(N);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t best = 0;
    for (std::size_t p = 1; p < scores.placements.size(); ++p) {
      if (scores.scores[p][n] > scores.scores[best][n]) best = p;
    }
    chosen[n] = scores.placements[best];
  }

  // Flat indices of each sample's rectangle pixels.
  std::vector<std::size_t> inside;
  for (std::size_t n = 0; n < N; ++n) {
    const auto& r = chosen[n];
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = r.top; i < r.top + r.height; ++i) {
        for (std::size_t j = r.left; j < r.left + r.width; ++j) inside.push_back(((n * C + c) * H + i) * W + j);
      }
    }
  }

  SuspendParameterGrads suspend(model);
  std::vector<Scalar> adv(x.data().begin(), x.data().end());
  for (auto k : inside) adv[k] = cfg.fill_value;
  for (int t = 0; t < cfg.t_max; ++t) {
    const auto g = input_gradient(model, x.shape(), adv, y);
    for (auto k : inside) adv[k] = std::clamp(adv[k] + cfg.step_size * sign(g[k]), Scalar(0), Scalar(1));
  }

  AdversarialExample out;
  out.x_clean = x.detach();
  out.x_adv = Tensor(x.shape(), std::move(adv));
  out.regions = std::move(chosen);
  out.loss_before = evaluate(model, out.x_clean, y).loss;
  auto after = evaluate(model, out.x_adv, y);
  out.loss_after = after.loss;
  out.success = std::move(after.wrong);
  return out;
}

namespace {

Tensor attack_batch(Classifier& model, const Tensor& x, std::span<const int> y, const AttackSpec& attack,
                    std::size_t batch_index) {
  if (const auto* pgd = std::get_if<PGDConfig>(&attack)) {
    auto cfg = *pgd;
    cfg.seed = pgd->seed + batch_index;
    return pgd_perturb(model, x, y, cfg);
  }
  if (const auto* roa = std::get_if<ROAConfig>(&attack)) return roa_attack(model, x, y, *roa).x_adv;
  return x;
}

template <typename F>
void for_batches(const DatasetContainer& data, std::size_t batch_size, F&& f) {
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch_size must be positive");
  std::size_t b = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size, ++b) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - begin));
    std::iota(idx.begin(), idx.end(), begin);
    f(b, idx);
  }
}

}  // namespace

Scalar evaluate_under_attack(Classifier& model, const DatasetContainer& data, const AttackSpec& attack,
                             std::size_t batch_size) {
  model.set_mode(NormMode::kEval);
  std::size_t correct = 0;
  for_batches(data, batch_size, [&](std::size_t b, const std::vector<std::size_t>& idx) {
    const auto x = data.images(idx);
    const auto y = data.labels_of(idx);
    const auto x_eval = attack_batch(model, x, y, attack, b);
    NoGradGuard no_grad;
    const auto pred = argmax_rows(model.forward(x_eval));
    for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
  });
  return static_cast<Scalar>(correct) / static_cast<Scalar>(data.size());
}

DatasetContainer generate_adversarial(Classifier& model, const DatasetContainer& data, const AttackSpec& attack,
                                      std::size_t batch_size) {
  model.set_mode(NormMode::kEval);
  DatasetContainer out = data;
  out.source = data.source + (std::holds_alternative<PGDConfig>(attack)   ? "+pgd"
                              : std::holds_alternative<ROAConfig>(attack) ? "+roa"
                                                                          : "");
  const auto sz = data.image_size();
  for_batches(data, batch_size, [&](std::size_t b, const std::vector<std::size_t>& idx) {
    const auto x_adv = attack_batch(model, data.images(idx), data.labels_of(idx), attack, b);
    std::copy(x_adv.data().begin(), x_adv.data().end(),
              out.pixels.begin() + static_cast<std::ptrdiff_t>(idx.front() * sz));
  });
  return out;
}

std::uint64_t attack_invocations() { return t_attack_invocations; }

}  // namespace abnn
