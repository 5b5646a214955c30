#include <algorithm>
#include <cmath>
#include <random>

#include "abnn/gradcheck.hpp"
#include "abnn/networks.hpp"
#include "abnn/normalization.hpp"
#include "abnn/ops.hpp"

namespace abnn {

namespace {

using Rng = std::mt19937_64;

Tensor uniform(const Shape& shape, Rng& rng, Scalar lo = -1, Scalar hi = 1) {
  std::uniform_real_distribution<Scalar> u(lo, hi);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<Scalar> v(n);
  for (auto& x : v) x = u(rng);
  return Tensor(shape, std::move(v));
}

// Values in [lo, hi] with random sign: keeps relu inputs off the kink.
Tensor away_from_zero(const Shape& shape, Rng& rng, Scalar lo, Scalar hi) {
  auto t = uniform(shape, rng, lo, hi);
  std::bernoulli_distribution flip(0.5);
  for (auto& x : t.mutable_data()) x = flip(rng) ? -x : x;
  return t;
}

// Random linear functional of an op's output: a well-conditioned scalar loss.
Tensor weighted_sum(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

struct Trial {
  std::function<GradCheckResult(Rng&, Scalar)> run;
  std::string name;
};

// Checks the gradient of w . op(x) with respect to x.
Trial unary(std::string name, std::function<Shape(Rng&)> shape, std::function<Tensor(const Shape&, Rng&)> at,
            std::function<Tensor(const Tensor&)> op) {
  return {[=](Rng& rng, Scalar h) {
            const auto s = shape(rng);
            const auto x = at(s, rng);
            Tensor w;
            {
              NoGradGuard ng;
              w = uniform(op(x).shape(), rng);
            }
            return finite_diff_check([&](const Tensor& t) { return weighted_sum(op(t), w); }, x, h);
          },
          std::move(name)};
}

Shape small4(Rng& rng) { return {pick(rng, 2, 3), pick(rng, 1, 3), pick(rng, 3, 5), pick(rng, 3, 5)}; }
Shape small2(Rng& rng) { return {pick(rng, 2, 4), pick(rng, 2, 5)}; }

Tensor plain_at(const Shape& s, Rng& rng) { return uniform(s, rng); }

std::vector<ConvBlockSpec> tiny_blocks(std::initializer_list<std::size_t> channels) {
  std::vector<ConvBlockSpec> out;
  for (auto c : channels) out.push_back({c, 3, 1, out.size() == 0});
  return out;
}

std::vector<Trial> all_trials() {
  std::vector<Trial> t;

  // Elementwise and structural.
  t.push_back(unary("add/a", small2, plain_at, [](const Tensor& x) {
    return add(x, Tensor(x.shape(), Scalar(0.3)));
  }));
  t.push_back({[](Rng& rng, Scalar h) {
                 const auto s = small2(rng);
                 const auto a = uniform(s, rng), b = uniform(s, rng), w = uniform(s, rng);
                 return finite_diff_check([&](const Tensor& x) { return weighted_sum(sub(a, x), w); }, b, h);
               },
               "sub/b"});
  t.push_back({[](Rng& rng, Scalar h) {
                 const auto s = small2(rng);
                 const auto a = uniform(s, rng), b = uniform(s, rng), w = uniform(s, rng);
                 return finite_diff_check([&](const Tensor& x) { return weighted_sum(mul(x, b), w); }, a, h);
               },
               "mul/a"});
  t.push_back({[](Rng& rng, Scalar h) {
                 const auto s = small2(rng);
                 const auto a = uniform(s, rng), w = uniform(s, rng);
                 // Same tensor on both sides: both accumulation paths meet.
                 return finite_diff_check([&](const Tensor& x) { return weighted_sum(mul(x, x), w); }, a, h);
               },
               "mul/self"});
  t.push_back(unary("scale", small2, plain_at, [](const Tensor& x) { return scale(x, Scalar(-1.7)); }));
  t.push_back(unary("add_scalar", small2, plain_at, [](const Tensor& x) { return add_scalar(x, Scalar(0.4)); }));
  t.push_back(unary("sum", small2, plain_at, [](const Tensor& x) {
    auto s = sum(x);
    return mul(s, s);
  }));
  t.push_back(unary("mean", small4, plain_at, [](const Tensor& x) {
    auto m = mean(x);
    return mul(m, m);
  }));
  t.push_back(unary("reshape", small4, plain_at, [](const Tensor& x) {
    return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
  }));
  t.push_back({[](Rng& rng, Scalar h) {
                 const auto a = uniform({pick(rng, 2, 6)}, rng), b = uniform({pick(rng, 2, 6)}, rng);
                 const auto w = uniform({a.numel() + b.numel()}, rng);
                 return finite_diff_check(
                     [&](const Tensor& x) {
                       const Tensor parts[] = {b, x, x};
                       auto c = concat(parts);
                       return weighted_sum(slice(c, 0, a.numel() + b.numel()), w);
                     },
                     a, h);
               },
               "concat+slice"});
  t.push_back(unary("softplus", small2, [](const Shape& s, Rng& r) { return uniform(s, r, -3, 3); },
                    [](const Tensor& x) { return softplus(x); }));
  t.push_back(unary("sqrt", small2, [](const Shape& s, Rng& r) { return uniform(s, r, Scalar(0.5), 2); },
                    [](const Tensor& x) { return sqrt(x); }));
  t.push_back(unary("relu", small4, [](const Shape& s, Rng& r) { return away_from_zero(s, r, Scalar(0.05), 1); },
                    [](const Tensor& x) { return relu(x); }));

  // Convolution and linear.
  t.push_back({[](Rng& rng, Scalar h) {
                 const std::size_t C = pick(rng, 1, 3), F = pick(rng, 1, 3), k = 2 * pick(rng, 0, 1) + 1;
                 const std::size_t stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
                 const auto x = uniform({pick(rng, 1, 2), C, pick(rng, 4, 6), pick(rng, 4, 6)}, rng);
                 const auto kernel = uniform({F, C, k, k}, rng);
                 Tensor w;
                 {
                   NoGradGuard ng;
                   w = uniform(conv2d(x, kernel, stride, pad).shape(), rng);
                 }
                 return finite_diff_check(
                     [&](const Tensor& v) { return weighted_sum(conv2d(v, kernel, stride, pad), w); }, x, h);
               },
               "conv2d/input"});
  t.push_back({[](Rng& rng, Scalar h) {
                 const std::size_t C = pick(rng, 1, 3), F = pick(rng, 1, 3), k = 2 * pick(rng, 0, 1) + 1;
                 const std::size_t stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
                 const auto x = uniform({pick(rng, 1, 2), C, pick(rng, 4, 6), pick(rng, 4, 6)}, rng);
                 const auto kernel = uniform({F, C, k, k}, rng);
                 Tensor w;
                 {
                   NoGradGuard ng;
                   w = uniform(conv2d(x, kernel, stride, pad).shape(), rng);
                 }
                 return finite_diff_check(
                     [&](const Tensor& v) { return weighted_sum(conv2d(x, v, stride, pad), w); }, kernel, h);
               },
               "conv2d/kernel"});
  for (int arg = 0; arg < 3; ++arg) {
    static const char* names[] = {"linear/input", "linear/weight", "linear/bias"};
    t.push_back({[arg](Rng& rng, Scalar h) {
                   const std::size_t N = pick(rng, 1, 4), D = pick(rng, 1, 5), K = pick(rng, 1, 4);
                   Tensor args[] = {uniform({N, D}, rng), uniform({D, K}, rng), uniform({K}, rng)};
                   const auto w = uniform({N, K}, rng);
                   return finite_diff_check(
                       [&](const Tensor& v) {
                         Tensor a[] = {args[0], args[1], args[2]};
                         a[arg] = v;
                         return weighted_sum(linear(a[0], a[1], a[2]), w);
                       },
                       args[arg], h);
                 },
                 names[arg]});
  }
  t.push_back(unary("global_avg_pool", small4, plain_at, [](const Tensor& x) { return global_avg_pool(x); }));
  t.push_back(unary("avg_pool2d/2x2", small4, plain_at, [](const Tensor& x) { return avg_pool2d(x, 2, 2); }));
  t.push_back(unary("avg_pool2d/3x3s1", small4, plain_at, [](const Tensor& x) { return avg_pool2d(x, 3, 1); }));
  t.push_back({[](Rng& rng, Scalar h) {
                 const std::size_t N = pick(rng, 1, 5), K = pick(rng, 2, 6);
                 const auto logits = uniform({N, K}, rng, -3, 3);
                 std::vector<int> labels(N);
                 for (auto& l : labels) l = static_cast<int>(pick(rng, 0, K - 1));
                 return finite_diff_check([&](const Tensor& v) { return softmax_cross_entropy(v, labels); }, logits,
                                          h);
               },
               "softmax_cross_entropy"});

  // Channel statistics.
  t.push_back(unary("channel_mean", small4, plain_at, [](const Tensor& x) { return channel_mean(x); }));
  t.push_back(unary("channel_std", small4, plain_at, [](const Tensor& x) { return channel_std(x, kDefaultBNEps); }));
  t.push_back(unary("standardize", small4, plain_at, [](const Tensor& x) { return standardize(x, kDefaultBNEps); }));
  for (int arg = 0; arg < 3; ++arg) {
    static const char* names[] = {"channel_affine/x", "channel_affine/scale", "channel_affine/shift"};
    t.push_back({[arg](Rng& rng, Scalar h) {
                   const auto s = small4(rng);
                   Tensor args[] = {uniform(s, rng), uniform({s[1]}, rng), uniform({s[1]}, rng)};
                   const auto w = uniform(s, rng);
                   return finite_diff_check(
                       [&](const Tensor& v) {
                         Tensor a[] = {args[0], args[1], args[2]};
                         a[arg] = v;
                         return weighted_sum(channel_affine(a[0], a[1], a[2]), w);
                       },
                       args[arg], h);
                 },
                 names[arg]});
  }

  // Normalization layers.
  for (int arg = 0; arg < 3; ++arg) {
    static const char* names[] = {"batch_norm/z", "batch_norm/gamma", "batch_norm/beta"};
    t.push_back({[arg](Rng& rng, Scalar h) {
                   const auto s = small4(rng);
                   BatchNormLayer layer("bn", s[1]);
                   {
                     auto g = layer.gamma().value().mutable_data();
                     std::uniform_real_distribution<Scalar> u(Scalar(0.5), Scalar(1.5));
                     for (auto& v : g) v = u(rng);
                     for (auto& v : layer.beta().value().mutable_data()) v = u(rng) - 1;
                   }
                   const auto z = uniform(s, rng), w = uniform(s, rng);
                   if (arg == 0) {
                     return finite_diff_check([&](const Tensor& v) { return weighted_sum(layer.forward(v), w); }, z, h);
                   }
                   auto& p = arg == 1 ? layer.gamma() : layer.beta();
                   return finite_diff_check([&] { return weighted_sum(layer.forward(z), w); }, p, h);
                 },
                 names[arg]});
  }
  t.push_back({[](Rng& rng, Scalar h) {
                 const auto s = small4(rng);
                 BatchNormLayer layer("bn", s[1]);
                 (void)layer.forward(uniform(s, rng));  // moves the running statistics
                 layer.set_mode(NormMode::kEval);
                 const auto z = uniform(s, rng), w = uniform(s, rng);
                 return finite_diff_check([&](const Tensor& v) { return weighted_sum(layer.forward(v), w); }, z, h);
               },
               "batch_norm/z-eval"});
  for (int arg = 0; arg < 4; ++arg) {
    static const char* names[] = {"adaptive_bn/z_t", "adaptive_bn/z_s", "adaptive_bn/encoder_weight",
                                  "adaptive_bn/encoder_bias"};
    t.push_back({[arg](Rng& rng, Scalar h) {
                   const std::size_t N = pick(rng, 2, 3), Ct = pick(rng, 1, 3), Cs = pick(rng, 1, 3);
                   const std::size_t H = pick(rng, 2, 4), W = pick(rng, 2, 4);
                   AdaptiveBNLayer layer(AdaINEncoder("enc", Cs, Ct, rng, Scalar(0.5)));
                   const auto zt = uniform({N, Ct, H, W}, rng), zs = uniform({N, Cs, H, W}, rng);
                   const auto w = uniform({N, Ct, H, W}, rng);
                   switch (arg) {
                     case 0:
                       return finite_diff_check(
                           [&](const Tensor& v) { return weighted_sum(layer.forward(v, zs), w); }, zt, h);
                     case 1:
                       return finite_diff_check(
                           [&](const Tensor& v) { return weighted_sum(layer.forward(zt, v), w); }, zs, h);
                     case 2:
                       return finite_diff_check([&] { return weighted_sum(layer.forward(zt, zs), w); },
                                                layer.encoder().weight(), h);
                     default:
                       return finite_diff_check([&] { return weighted_sum(layer.forward(zt, zs), w); },
                                                layer.encoder().bias(), h);
                   }
                 },
                 names[arg]});
  }

  // Networks.
  t.push_back({[](Rng& rng, Scalar h) {
                 auto net = build_plain("plain", tiny_blocks({3, 4}), 3, rng(), 2);
                 const auto x = uniform({3, 2, 6, 6}, rng, 0, 1);
                 const std::vector<int> y{0, 1, 2};
                 return finite_diff_check([&](const Tensor& v) { return softmax_cross_entropy(net.forward(v), y); },
                                          x, h);
               },
               "bn_network/input"});
  t.push_back({[](Rng& rng, Scalar h) {
                 auto net = build_plain("plain", tiny_blocks({3, 4}), 3, rng(), 2);
                 const auto x = uniform({3, 2, 6, 6}, rng, 0, 1);
                 const auto w = uniform({3, 3}, rng);
                 return finite_diff_check([&] { return weighted_sum(net.forward(x), w); }, net.kernel(1), h);
               },
               "bn_network/kernel"});
  for (int mode = 0; mode < 4; ++mode) {
    static const char* names[] = {"abnn/input-full", "abnn/input-target-only", "abnn/target-kernel",
                                  "abnn/encoder-weight"};
    t.push_back({[mode](Rng& rng, Scalar h) {
                   auto sub = build_substitute(tiny_blocks({2, 3, 3}), 2, rng(), 2);
                   (void)sub->forward(uniform({4, 2, 6, 6}, rng, 0, 1));  // non-trivial running statistics
                   freeze(*sub);
                   sub->set_mode(NormMode::kEval);
                   auto model = build_abnn(tiny_blocks({3, 4}), sub, 3, rng());
                   // Larger encoder weights than the default make the substitute path matter.
                   for (std::size_t b = 0; b < model.target().block_count(); ++b) {
                     for (auto& v : model.target().adaptive_norm(b).encoder().weight().value().mutable_data()) {
                       v = std::uniform_real_distribution<Scalar>(Scalar(-0.5), Scalar(0.5))(rng);
                     }
                   }
                   model.set_input_gradient(mode == 1 ? InputGradient::kTargetOnly : InputGradient::kFullFramework);
                   const auto x = uniform({3, 2, 6, 6}, rng, 0, 1);
                   const std::vector<int> y{1, 2, 0};
                   auto loss = [&](const Tensor& v) { return softmax_cross_entropy(model.forward(v), y); };
                   if (mode == 0) return finite_diff_check(loss, x, h);
                   if (mode == 1) {
                     // Oracle: the target alone, fed substitute features of the unperturbed input.
                     std::vector<Tensor> features;
                     {
                       NoGradGuard ng;
                       const auto all = sub->forward_features(x).block_features;
                       for (auto j : model.block_map()) features.push_back(all[j]);
                     }
                     const auto analytic = [&] {
                       Tensor xv(x.shape(), std::vector<Scalar>(x.data().begin(), x.data().end()), true);
                       backward(loss(xv));
                       return xv.grad();
                     }();
                     auto r = finite_diff_check(
                         [&](const Tensor& v) { return softmax_cross_entropy(model.target().forward(v, features), y); },
                         x, h);
                     // The oracle's own analytic gradient must equal the model's target-only gradient.
                     Tensor xo(x.shape(), std::vector<Scalar>(x.data().begin(), x.data().end()), true);
                     backward(softmax_cross_entropy(model.target().forward(xo, features), y));
                     const auto oracle = xo.grad();
                     for (std::size_t i = 0; i < oracle.size(); ++i) {
                       const Scalar d = std::abs(oracle[i] - analytic[i]) /
                                        std::max({std::abs(oracle[i]), std::abs(analytic[i]), Scalar(1e-8)});
                       r.max_relative_error = std::max(r.max_relative_error, d);
                     }
                     return r;
                   }
                   // Parameter gradients use a linear functional of the logits: softmax makes some
                   // entries so small that central differences cannot resolve them.
                   const auto w = uniform({3, 3}, rng);
                   auto& p = mode == 2 ? model.target().kernel(0) : model.target().adaptive_norm(1).encoder().weight();
                   return finite_diff_check([&] { return weighted_sum(model.forward(x), w); }, p, h);
                 },
                 names[mode]});
  }
  return t;
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(std::size_t trials, std::uint64_t seed, Scalar h) {
  std::vector<GradCheckCase> out;
  const auto all = all_trials();
  for (std::size_t c = 0; c < all.size(); ++c) {
    GradCheckCase gc;
    gc.name = all[c].name;
    for (std::size_t i = 0; i < trials; ++i) {
      const std::uint64_t trial_seed = seed * 1000003ULL + c * 7919ULL + i;
      Rng rng(trial_seed);
      const auto r = all[c].run(rng, h);
      if (gc.trials == 0 || r.max_relative_error > gc.max_relative_error) {
        gc.max_relative_error = r.max_relative_error;
        gc.worst_seed = trial_seed;
        gc.worst_analytic = r.analytic;
        gc.worst_numeric = r.numeric;
      }
      gc.checked += r.checked;
      gc.skipped += r.skipped;
      ++gc.trials;
    }
    out.push_back(std::move(gc));
  }
  return out;
}

}  // namespace abnn
