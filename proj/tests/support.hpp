#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "diffender/diffusion.hpp"

namespace diffender::testing {

/// eps = scale * x_t; ignores the prompt entirely.
class PromptBlindPredictor final : public NoisePredictor {
 public:
  explicit PromptBlindPredictor(double scale = 0.1, std::int64_t dim = 8) : scale_(scale), dim_(dim) {}
  torch::Tensor predict_noise(const torch::Tensor& x_t, const torch::Tensor&, const torch::Tensor&) const override {
    return scale_ * x_t;
  }
  std::int64_t embed_dim() const override { return dim_; }

 private:
  double scale_;
  std::int64_t dim_;
};

/// Returns a fixed noise tensor regardless of its inputs.
class OraclePredictor final : public NoisePredictor {
 public:
  explicit OraclePredictor(torch::Tensor noise, std::int64_t dim = 8) : noise_(std::move(noise)), dim_(dim) {}
  torch::Tensor predict_noise(const torch::Tensor& x_t, const torch::Tensor&, const torch::Tensor&) const override {
    return noise_.expand_as(x_t);
  }
  std::int64_t embed_dim() const override { return dim_; }

 private:
  torch::Tensor noise_;
  std::int64_t dim_;
};

/// eps = 0.1 x_t + tanh(x_t) * mean(tokens): prompt-dependent and smooth.
class PromptMixPredictor final : public NoisePredictor {
 public:
  explicit PromptMixPredictor(std::int64_t dim = 8) : dim_(dim) {}
  torch::Tensor predict_noise(const torch::Tensor& x_t, const torch::Tensor&,
                              const torch::Tensor& tokens) const override {
    auto g = tokens.mean({1, 2}).view({-1, 1, 1, 1});
    return 0.1 * x_t + torch::tanh(x_t) * g;
  }
  std::int64_t embed_dim() const override { return dim_; }

 private:
  std::int64_t dim_;
};

struct GradCheck {
  double max_rel_err = 0.0;
  int probes = 0;
};

/// Central finite differences against autograd at `probes` random coordinates,
/// float64 throughout.
inline GradCheck finite_difference_check(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                         const torch::Tensor& x0, int probes = 20, double h = 1e-6,
                                         std::uint64_t seed = 7) {
  auto x = x0.to(torch::kDouble).detach().clone().requires_grad_(true);
  auto y = f(x);
  auto grad = torch::autograd::grad({y}, {x})[0].detach();
  auto gen = torch::make_generator<at::CPUGeneratorImpl>(seed);
  auto flat = x.detach().flatten();
  GradCheck out;
  for (int i = 0; i < probes; ++i) {
    const auto idx = torch::randint(flat.numel(), {1}, gen).item<std::int64_t>();
    auto xp = flat.clone();
    auto xm = flat.clone();
    xp[idx] += h;
    xm[idx] -= h;
    torch::NoGradGuard ng;
    const double fp = f(xp.view_as(x)).item<double>();
    const double fm = f(xm.view_as(x)).item<double>();
    const double numeric = (fp - fm) / (2 * h);
    const double analytic = grad.flatten()[idx].item<double>();
    const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    out.max_rel_err = std::max(out.max_rel_err, std::abs(numeric - analytic) / scale);
    ++out.probes;
  }
  return out;
}

}  // namespace diffender::testing
