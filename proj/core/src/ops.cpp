#include "abnn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace abnn {

using detail::make_result;
using detail::Node;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

// Returns the gradient buffer of input `i` or nullptr when it takes no gradient.
Scalar* grad_of(Node& self, std::size_t i) {
  auto& in = *self.inputs[i];
  return in.tracked() ? in.grad_buffer().data() : nullptr;
}

struct ChannelLayout {
  std::size_t batch;
  std::size_t channels;
  std::size_t inner;
  std::size_t count() const { return batch * inner; }
};

ChannelLayout channel_layout(const Tensor& x, const char* op) {
  if (x.rank() < 2) throw ShapeError(std::string(op) + ": expected [N,C,...], got " + to_string(x.shape()));
  ChannelLayout l{x.dim(0), x.dim(1), 1};
  for (std::size_t i = 2; i < x.rank(); ++i) l.inner *= x.dim(i);
  if (l.count() == 0) throw ShapeError(std::string(op) + ": empty tensor " + to_string(x.shape()));
  return l;
}

template <typename F>
void for_channel(const ChannelLayout& l, std::size_t c, F&& f) {
  for (std::size_t n = 0; n < l.batch; ++n) {
    std::size_t base = (n * l.channels + c) * l.inner;
    for (std::size_t i = 0; i < l.inner; ++i) f(base + i);
  }
}

void im2col(const Scalar* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo,
            Scalar* col) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        Scalar* row = col + ((c * kh + i) * kw + j) * P;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          auto ih = static_cast<std::ptrdiff_t>(oh * stride + i) - static_cast<std::ptrdiff_t>(pad);
          Scalar* out = row + oh * Wo;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(out, out + Wo, Scalar(0));
            continue;
          }
          const Scalar* src = x + (c * H + static_cast<std::size_t>(ih)) * W;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            auto iw = static_cast<std::ptrdiff_t>(ow * stride + j) - static_cast<std::ptrdiff_t>(pad);
            out[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) ? Scalar(0)
                                                                       : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

void col2im_add(const Scalar* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo,
                Scalar* x) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const Scalar* row = col + ((c * kh + i) * kw + j) * P;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          auto ih = static_cast<std::ptrdiff_t>(oh * stride + i) - static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          Scalar* dst = x + (c * H + static_cast<std::size_t>(ih)) * W;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            auto iw = static_cast<std::ptrdiff_t>(ow * stride + j) - static_cast<std::ptrdiff_t>(pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(W)) dst[iw] += row[oh * Wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<Scalar> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<Scalar> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (auto* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<Scalar> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (auto* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, Scalar factor) {
  std::vector<Scalar> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
    }
  });
}

Tensor add_scalar(const Tensor& a, Scalar offset) {
  std::vector<Scalar> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += offset;
  return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sum(const Tensor& a) {
  Scalar s = std::accumulate(a.data().begin(), a.data().end(), Scalar(0));
  return make_result(Shape{}, {s}, {a}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      const auto n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  std::vector<Scalar> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor concat(std::span<const Tensor> parts) {
  std::vector<Scalar> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  const auto total = out.size();
  return make_result(Shape{total}, std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                     [offsets](Node& self) {
                       for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                         if (auto* g = grad_of(self, k)) {
                           const auto n = self.inputs[k]->value.size();
                           for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offsets[k] + i];
                         }
                       }
                     });
}

Tensor slice(const Tensor& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.numel()) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") exceeds " + std::to_string(a.numel()) + " elements");
  }
  std::vector<Scalar> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin),
                          a.data().begin() + static_cast<std::ptrdiff_t>(begin + count));
  return make_result(Shape{count}, std::move(out), {a}, [begin](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin + i] += self.grad[i];
    }
  });
}

Tensor softplus(const Tensor& a) {
  std::vector<Scalar> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x[i] > 0 ? x[i] + std::log1p(std::exp(-x[i])) : std::log1p(std::exp(x[i]));
  }
  return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      const auto& x = self.inputs[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] / (Scalar(1) + std::exp(-x[i]));
      }
    }
  });
}

Tensor sqrt(const Tensor& a) {
  std::vector<Scalar> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (x[i] < 0) throw NumericError("sqrt: negative operand");
    out[i] = std::sqrt(x[i]);
  }
  return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] * Scalar(0.5) / self.value[i];
      }
    }
  });
}

namespace {
thread_local ActivationPatternProbe* t_pattern_probe = nullptr;
}

ActivationPatternProbe::ActivationPatternProbe() : previous_(t_pattern_probe) { t_pattern_probe = this; }
ActivationPatternProbe::~ActivationPatternProbe() { t_pattern_probe = previous_; }

Tensor relu(const Tensor& x) {
  std::vector<Scalar> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0 ? v[i] : Scalar(0);
  if (auto* probe = t_pattern_probe) {
    auto h = probe->signature_;
    for (std::size_t i = 0; i < out.size(); ++i) h = (h ^ static_cast<std::uint64_t>(v[i] > 0)) * 0x100000001b3ULL;
    probe->signature_ = h;
  }
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      const auto& v = self.inputs[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (v[i] > 0) g[i] += self.grad[i];
      }
    }
  });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw ShapeError("conv2d: expected input [N,C,H,W] and kernel [F,C,kh,kw], got " +
                     to_string(input.shape()) + " and " + to_string(kernel.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const auto F = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != C) {
    throw ShapeError("conv2d: input has " + std::to_string(C) + " channels but kernel expects " +
                     std::to_string(kernel.dim(1)));
  }
  if (H + 2 * padding < kh || W + 2 * padding < kw) {
    throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) + " larger than padded input " +
                     to_string(input.shape()));
  }
  const auto Ho = (H + 2 * padding - kh) / stride + 1;
  const auto Wo = (W + 2 * padding - kw) / stride + 1;
  const auto R = C * kh * kw, P = Ho * Wo;

  std::vector<Scalar> out(N * F * P, Scalar(0));
  std::vector<Scalar> col(R * P);
  const Scalar* x = input.data().data();
  const Scalar* k = kernel.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    im2col(x + n * C * H * W, C, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
    Scalar* o = out.data() + n * F * P;
    for (std::size_t f = 0; f < F; ++f) {
      Scalar* orow = o + f * P;
      for (std::size_t r = 0; r < R; ++r) {
        const Scalar kv = k[f * R + r];
        const Scalar* crow = col.data() + r * P;
        for (std::size_t p = 0; p < P; ++p) orow[p] += kv * crow[p];
      }
    }
  }

  return make_result(
      Shape{N, F, Ho, Wo}, std::move(out), {input, kernel},
      [=](Node& self) {
        Scalar* gx = grad_of(self, 0);
        Scalar* gk = grad_of(self, 1);
        const auto& xv = self.inputs[0]->value;
        const auto& kv = self.inputs[1]->value;
        std::vector<Scalar> col(R * P), dcol;
        if (gx) dcol.resize(R * P);
        for (std::size_t n = 0; n < N; ++n) {
          const Scalar* g = self.grad.data() + n * F * P;
          if (gk) {
            im2col(xv.data() + n * C * H * W, C, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
            for (std::size_t f = 0; f < F; ++f) {
              const Scalar* grow = g + f * P;
              for (std::size_t r = 0; r < R; ++r) {
                const Scalar* crow = col.data() + r * P;
                Scalar acc = 0;
                for (std::size_t p = 0; p < P; ++p) acc += grow[p] * crow[p];
                gk[f * R + r] += acc;
              }
            }
          }
          if (gx) {
            std::fill(dcol.begin(), dcol.end(), Scalar(0));
            for (std::size_t f = 0; f < F; ++f) {
              const Scalar* grow = g + f * P;
              for (std::size_t r = 0; r < R; ++r) {
                const Scalar w = kv[f * R + r];
                Scalar* drow = dcol.data() + r * P;
                for (std::size_t p = 0; p < P; ++p) drow[p] += w * grow[p];
              }
            }
            col2im_add(dcol.data(), C, H, W, kh, kw, stride, padding, Ho, Wo, gx + n * C * H * W);
          }
        }
      });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1) {
    throw ShapeError("linear: expected input [N,D], weight [D,K], bias [K], got " +
                     to_string(input.shape()) + ", " + to_string(weight.shape()) + ", " +
                     to_string(bias.shape()));
  }
  const auto N = input.dim(0), D = input.dim(1), K = weight.dim(1);
  if (weight.dim(0) != D || bias.dim(0) != K) {
    throw ShapeError("linear: dimension mismatch " + to_string(input.shape()) + " x " +
                     to_string(weight.shape()) + " + " + to_string(bias.shape()));
  }
  std::vector<Scalar> out(N * K);
  auto x = input.data(), w = weight.data(), b = bias.data();
  for (std::size_t n = 0; n < N; ++n) {
    Scalar* row = out.data() + n * K;
    std::copy(b.begin(), b.end(), row);
    for (std::size_t d = 0; d < D; ++d) {
      const Scalar xv = x[n * D + d];
      for (std::size_t k = 0; k < K; ++k) row[k] += xv * w[d * K + k];
    }
  }
  return make_result(Shape{N, K}, std::move(out), {input, weight, bias}, [=](Node& self) {
    const auto& x = self.inputs[0]->value;
    const auto& w = self.inputs[1]->value;
    const auto& g = self.grad;
    if (auto* gx = grad_of(self, 0)) {
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t d = 0; d < D; ++d) {
          Scalar acc = 0;
          for (std::size_t k = 0; k < K; ++k) acc += g[n * K + k] * w[d * K + k];
          gx[n * D + d] += acc;
        }
      }
    }
    if (auto* gw = grad_of(self, 1)) {
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t d = 0; d < D; ++d) {
          const Scalar xv = x[n * D + d];
          for (std::size_t k = 0; k < K; ++k) gw[d * K + k] += xv * g[n * K + k];
        }
      }
    }
    if (auto* gb = grad_of(self, 2)) {
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < K; ++k) gb[k] += g[n * K + k];
      }
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: expected [N,C,H,W], got " + to_string(x.shape()));
  const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  std::vector<Scalar> out(N * C);
  auto v = x.data();
  for (std::size_t i = 0; i < N * C; ++i) {
    Scalar s = 0;
    for (std::size_t j = 0; j < HW; ++j) s += v[i * HW + j];
    out[i] = s / static_cast<Scalar>(HW);
  }
  return make_result(Shape{N, C}, std::move(out), {x}, [=](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      const Scalar inv = Scalar(1) / static_cast<Scalar>(HW);
      for (std::size_t i = 0; i < N * C; ++i) {
        for (std::size_t j = 0; j < HW; ++j) g[i * HW + j] += self.grad[i] * inv;
      }
    }
  });
}

Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d: expected [N,C,H,W], got " + to_string(x.shape()));
  if (kernel == 0 || stride == 0) throw ShapeError("avg_pool2d: kernel and stride must be positive");
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < kernel || W < kernel) {
    throw ShapeError("avg_pool2d: window " + std::to_string(kernel) + " larger than input " +
                     to_string(x.shape()));
  }
  const auto Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  const Scalar inv = Scalar(1) / static_cast<Scalar>(kernel * kernel);
  std::vector<Scalar> out(N * C * Ho * Wo);
  auto v = x.data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const Scalar* src = v.data() + nc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        Scalar s = 0;
        for (std::size_t i = 0; i < kernel; ++i) {
          for (std::size_t j = 0; j < kernel; ++j) s += src[(oh * stride + i) * W + ow * stride + j];
        }
        out[(nc * Ho + oh) * Wo + ow] = s * inv;
      }
    }
  }
  return make_result(Shape{N, C, Ho, Wo}, std::move(out), {x}, [=](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        Scalar* dst = g + nc * H * W;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const Scalar gv = self.grad[(nc * Ho + oh) * Wo + ow] * inv;
            for (std::size_t i = 0; i < kernel; ++i) {
              for (std::size_t j = 0; j < kernel; ++j) dst[(oh * stride + i) * W + ow * stride + j] += gv;
            }
          }
        }
      }
    }
  });
}

namespace {

void check_labels(const Tensor& logits, std::span<const int> labels, const char* op) {
  if (logits.rank() != 2) throw ShapeError(std::string(op) + ": expected logits [N,K], got " + to_string(logits.shape()));
  if (labels.size() != logits.dim(0)) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(logits.dim(0)) + " rows");
  }
  const auto K = static_cast<int>(logits.dim(1));
  for (int y : labels) {
    if (y < 0 || y >= K) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(y) + " outside [0, " +
                              std::to_string(K) + ")");
    }
  }
}

// Row-wise softmax probabilities and -log p[label].
void softmax_rows(std::span<const Scalar> z, std::size_t N, std::size_t K, std::span<const int> labels,
                  std::vector<Scalar>& prob, std::vector<Scalar>& nll) {
  prob.resize(N * K);
  nll.resize(N);
  for (std::size_t n = 0; n < N; ++n) {
    const Scalar* row = z.data() + n * K;
    const Scalar m = *std::max_element(row, row + K);
    Scalar denom = 0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(row[k] - m);
    const Scalar log_denom = std::log(denom);
    for (std::size_t k = 0; k < K; ++k) prob[n * K + k] = std::exp(row[k] - m - log_denom);
    nll[n] = -(row[labels[n]] - m - log_denom);
  }
}

}  // namespace

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels, "softmax_cross_entropy");
  const auto N = logits.dim(0), K = logits.dim(1);
  if (N == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  std::vector<Scalar> prob, nll;
  softmax_rows(logits.data(), N, K, labels, prob, nll);
  const Scalar loss = std::accumulate(nll.begin(), nll.end(), Scalar(0)) / static_cast<Scalar>(N);
  std::vector<int> y(labels.begin(), labels.end());
  return make_result(Shape{}, {loss}, {logits},
                     [N, K, prob = std::move(prob), y = std::move(y)](Node& self) {
                       if (auto* g = grad_of(self, 0)) {
                         const Scalar s = self.grad[0] / static_cast<Scalar>(N);
                         for (std::size_t n = 0; n < N; ++n) {
                           for (std::size_t k = 0; k < K; ++k) {
                             const Scalar onehot = static_cast<int>(k) == y[n] ? Scalar(1) : Scalar(0);
                             g[n * K + k] += s * (prob[n * K + k] - onehot);
                           }
                         }
                       }
                     });
}

std::vector<Scalar> cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels, "cross_entropy_per_sample");
  std::vector<Scalar> prob, nll;
  softmax_rows(logits.data(), logits.dim(0), logits.dim(1), labels, prob, nll);
  return nll;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows: expected [N,K], got " + to_string(logits.shape()));
  const auto N = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(N);
  auto z = logits.data();
  for (std::size_t n = 0; n < N; ++n) {
    out[n] = static_cast<int>(std::max_element(z.begin() + static_cast<std::ptrdiff_t>(n * K),
                                               z.begin() + static_cast<std::ptrdiff_t>((n + 1) * K)) -
                              (z.begin() + static_cast<std::ptrdiff_t>(n * K)));
  }
  return out;
}

Tensor channel_mean(const Tensor& x) {
  const auto l = channel_layout(x, "channel_mean");
  std::vector<Scalar> mu(l.channels, Scalar(0));
  auto v = x.data();
  for (std::size_t c = 0; c < l.channels; ++c) {
    Scalar s = 0;
    for_channel(l, c, [&](std::size_t i) { s += v[i]; });
    mu[c] = s / static_cast<Scalar>(l.count());
  }
  return make_result(Shape{l.channels}, std::move(mu), {x}, [l](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t c = 0; c < l.channels; ++c) {
        const Scalar gv = self.grad[c] / static_cast<Scalar>(l.count());
        for_channel(l, c, [&](std::size_t i) { g[i] += gv; });
      }
    }
  });
}

Tensor channel_std(const Tensor& x, Scalar eps) {
  const auto l = channel_layout(x, "channel_std");
  std::vector<Scalar> sigma(l.channels);
  auto v = x.data();
  for (std::size_t c = 0; c < l.channels; ++c) {
    Scalar s = 0;
    for_channel(l, c, [&](std::size_t i) { s += v[i]; });
    const Scalar m = s / static_cast<Scalar>(l.count());
    Scalar ss = 0;
    for_channel(l, c, [&](std::size_t i) { ss += (v[i] - m) * (v[i] - m); });
    sigma[c] = std::sqrt(ss / static_cast<Scalar>(l.count()) + eps);
  }
  return make_result(Shape{l.channels}, std::move(sigma), {x}, [l](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      const auto& v = self.inputs[0]->value;
      const Scalar M = static_cast<Scalar>(l.count());
      for (std::size_t c = 0; c < l.channels; ++c) {
        Scalar s = 0;
        for_channel(l, c, [&](std::size_t i) { s += v[i]; });
        const Scalar m = s / M;
        const Scalar k = self.grad[c] / (M * self.value[c]);
        for_channel(l, c, [&](std::size_t i) { g[i] += k * (v[i] - m); });
      }
    }
  });
}

Tensor standardize(const Tensor& x, Scalar eps) {
  const auto l = channel_layout(x, "standardize");
  std::vector<Scalar> out(x.numel());
  std::vector<Scalar> inv_sigma(l.channels);
  auto v = x.data();
  const Scalar M = static_cast<Scalar>(l.count());
  for (std::size_t c = 0; c < l.channels; ++c) {
    Scalar s = 0;
    for_channel(l, c, [&](std::size_t i) { s += v[i]; });
    const Scalar m = s / M;
    Scalar ss = 0;
    for_channel(l, c, [&](std::size_t i) { ss += (v[i] - m) * (v[i] - m); });
    inv_sigma[c] = Scalar(1) / std::sqrt(ss / M + eps);
    for_channel(l, c, [&](std::size_t i) { out[i] = (v[i] - m) * inv_sigma[c]; });
  }
  return make_result(x.shape(), std::move(out), {x}, [l, M, inv_sigma = std::move(inv_sigma)](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      const auto& y = self.value;
      const auto& gy = self.grad;
      for (std::size_t c = 0; c < l.channels; ++c) {
        Scalar sg = 0, sgy = 0;
        for_channel(l, c, [&](std::size_t i) {
          sg += gy[i];
          sgy += gy[i] * y[i];
        });
        const Scalar mg = sg / M, mgy = sgy / M;
        for_channel(l, c, [&](std::size_t i) { g[i] += inv_sigma[c] * (gy[i] - mg - y[i] * mgy); });
      }
    }
  });
}

Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift) {
  const auto l = channel_layout(x, "channel_affine");
  if (scale.numel() != l.channels || shift.numel() != l.channels) {
    throw ShapeError("channel_affine: " + std::to_string(l.channels) + " channels but scale " +
                     to_string(scale.shape()) + " and shift " + to_string(shift.shape()));
  }
  std::vector<Scalar> out(x.numel());
  auto v = x.data(), a = scale.data(), b = shift.data();
  for (std::size_t c = 0; c < l.channels; ++c) {
    for_channel(l, c, [&](std::size_t i) { out[i] = v[i] * a[c] + b[c]; });
  }
  return make_result(x.shape(), std::move(out), {x, scale, shift}, [l](Node& self) {
    const auto& v = self.inputs[0]->value;
    const auto& a = self.inputs[1]->value;
    const auto& gy = self.grad;
    Scalar* gx = grad_of(self, 0);
    Scalar* ga = grad_of(self, 1);
    Scalar* gb = grad_of(self, 2);
    for (std::size_t c = 0; c < l.channels; ++c) {
      Scalar sa = 0, sb = 0;
      for_channel(l, c, [&](std::size_t i) {
        if (gx) gx[i] += gy[i] * a[c];
        sa += gy[i] * v[i];
        sb += gy[i];
      });
      if (ga) ga[c] += sa;
      if (gb) gb[c] += sb;
    }
  });
}

}  // namespace abnn
