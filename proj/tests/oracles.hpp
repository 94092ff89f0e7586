#pragma once

#include <cmath>
#include <vector>

#include "diffender/localizer.hpp"

namespace diffender::testing {

// Population std of every k x k window with reflect padding, by explicit loops.
inline double uniformity_oracle(const torch::Tensor& img, int k) {
  auto a = img.to(torch::kDouble).contiguous();
  auto acc = a.accessor<double, 2>();
  const int h = static_cast<int>(a.size(0)), w = static_cast<int>(a.size(1)), r = k / 2;
  auto reflect = [](int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  double total = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0, s2 = 0.0;
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          const double v = acc[reflect(y + dy, h)][reflect(x + dx, w)];
          s += v;
          s2 += v * v;
        }
      }
      const double n = k * k;
      const double var = std::max(0.0, s2 / n - (s / n) * (s / n));
      total += std::sqrt(var);
    }
  }
  return total / (h * w);
}

// Two-layer toy network on [B,2,4,4]: f1 = W1 x (1x1 conv), f2 = tanh(W2 f1).
struct ToyNet {
  torch::Tensor w1 = torch::tensor({{0.5, -1.0}, {1.5, 0.25}, {-0.75, 0.6}}, torch::kDouble);  // [3,2]
  torch::Tensor w2 = torch::tensor({{1.0, 0.2, -0.4}, {0.3, -0.8, 0.9}}, torch::kDouble);     // [2,3]

  std::vector<torch::Tensor> operator()(const torch::Tensor& x) const {
    auto f1 = torch::einsum("oc,bchw->bohw", {w1, x});
    auto f2 = torch::tanh(torch::einsum("oc,bchw->bohw", {w2, f1}));
    return {f1, f2};
  }
};

inline double perceptual_oracle(const torch::Tensor& xr, const torch::Tensor& x) {
  ToyNet net;
  auto fa = net(xr);
  auto fb = net(x);
  double total = 0.0;
  const auto b = x.size(0);
  for (std::size_t l = 0; l < fa.size(); ++l) {
    auto a = fa[l].contiguous();
    auto c = fb[l].contiguous();
    auto aa = a.accessor<double, 4>();
    auto cc = c.accessor<double, 4>();
    const auto ch = a.size(1), h = a.size(2), w = a.size(3);
    for (int64_t i = 0; i < b; ++i) {
      double layer = 0.0;
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t xx = 0; xx < w; ++xx) {
          double na = 0.0, nc = 0.0;
          for (int64_t k = 0; k < ch; ++k) {
            na += aa[i][k][y][xx] * aa[i][k][y][xx];
            nc += cc[i][k][y][xx] * cc[i][k][y][xx];
          }
          na = std::sqrt(na + 1e-20);
          nc = std::sqrt(nc + 1e-20);
          for (int64_t k = 0; k < ch; ++k) {
            const double d = aa[i][k][y][xx] / na - cc[i][k][y][xx] / nc;
            layer += d * d;
          }
        }
      }
      total += layer / static_cast<double>(h * w);
    }
  }
  return total / static_cast<double>(b);
}

/// Brute-force binary dilation by the disk dy^2 + dx^2 <= r^2, zero outside.
inline torch::Tensor dilate_oracle(const torch::Tensor& mask, int radius) {
  auto m = (mask > 0.5).contiguous();
  auto in = m.accessor<bool, 2>();
  const auto h = m.size(0), w = m.size(1);
  auto out = torch::zeros({h, w});
  auto acc = out.accessor<float, 2>();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int dy = -radius; dy <= radius && acc[y][x] == 0; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          const auto yy = y + dy, xx = x + dx;
          if (dy * dy + dx * dx <= radius * radius && yy >= 0 && yy < h && xx >= 0 && xx < w && in[yy][xx]) {
            acc[y][x] = 1;
            break;
          }
        }
      }
    }
  }
  return out;
}

inline bool subset(const torch::Tensor& a, const torch::Tensor& b) {
  return !((a > 0.5) & (b <= 0.5)).any().item<bool>();
}

struct MorphologyCounts {
  int masks = 0;
  int monotone_failures = 0;
  int superset_failures = 0;
};

/// Random masks of mixed density: binarize(theta2) within binarize(theta1)
/// for theta1 <= theta2, and refine_mask containing its blurred,
/// re-thresholded input.
inline MorphologyCounts morphology_properties(int count, Seed seed) {
  auto gen = make_generator(seed);
  LocalizerConfig cfg;
  MorphologyCounts out;
  for (int i = 0; i < count; ++i) {
    const auto h = torch::randint(4, 40, {1}, gen).item<int64_t>();
    const auto w = torch::randint(4, 40, {1}, gen).item<int64_t>();
    auto d = torch::rand({h, w}, gen);
    auto ths = torch::rand({2}, gen) * 0.98 + 0.01;
    const double t1 = std::min(ths[0].item<double>(), ths[1].item<double>());
    const double t2 = std::max(ths[0].item<double>(), ths[1].item<double>());
    if (!subset(binarize(d, t2, BinarizeMode::hard), binarize(d, t1, BinarizeMode::hard))) {
      ++out.monotone_failures;
    }
    const double density = torch::rand({1}, gen).item<double>();
    auto raw = (torch::rand({h, w}, gen) < density).to(torch::kFloat);
    auto smoothed = (gaussian_blur(raw, cfg.gauss_size, cfg.gauss_sigma) > 0.5).to(torch::kFloat);
    if (!subset(smoothed, refine_mask(raw, cfg))) {
      ++out.superset_failures;
    }
    ++out.masks;
  }
  return out;
}

}  // namespace diffender::testing
