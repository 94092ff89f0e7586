#include "diffender/localizer.hpp"

#include <cmath>

namespace diffender {

void LocalizerConfig::validate() const {
  require(m >= 1, "localizer: m must be >= 1");
  require(t_star > 0.0 && t_star < 1.0, "localizer: t_star must lie in (0,1)");
  require(theta > 0.0 && theta < 1.0, "localizer: theta must lie in (0,1)");
  require(gauss_size >= 1 && gauss_size % 2 == 1, "localizer: Gaussian kernel size must be odd");
  require(gauss_sigma > 0.0, "localizer: Gaussian sigma must be positive");
  require(dilate_radius >= 0 && dilate_iters >= 0, "localizer: negative dilation");
  require(soft_tau > 0.0, "localizer: soft_tau must be positive");
  require(diff_floor >= 0.0, "localizer: diff_floor must be >= 0");
}

namespace {

/// [H,W] -> [1,1,H,W]; [B,H,W] -> [B,1,H,W]. Returns whether the input was unbatched.
std::pair<torch::Tensor, bool> to_nchw(const torch::Tensor& mask) {
  require(mask.dim() == 2 || mask.dim() == 3, "mask must be [H,W] or [B,H,W]");
  const bool single = mask.dim() == 2;
  return {(single ? mask.unsqueeze(0) : mask).unsqueeze(1), single};
}

torch::Tensor from_nchw(const torch::Tensor& x, bool single) {
  auto out = x.squeeze(1);
  return single ? out.squeeze(0) : out;
}

}  // namespace

torch::Tensor aap_difference_values(const torch::Tensor& images, const torch::Tensor& prompt,
                                    const LocalizerConfig& cfg, const NoisePredictor& model,
                                    const NoiseSchedule& sched, const std::vector<Seed>& seeds) {
  cfg.validate();
  require(images.dim() == 4, "aap_difference expects a batch [B,C,H,W]");
  const auto b = images.size(0), h = images.size(2), w = images.size(3);
  require(static_cast<std::int64_t>(seeds.size()) == b, "aap_difference: one seed per image");
  require(prompt.dim() == 2 || (prompt.dim() == 3 && prompt.size(0) == b), "prompt must be [n,d] or [B,n,d]");

  auto x0 = lift_to_model(images.to(torch::kFloat));
  std::vector<torch::Tensor> per_image;
  for (std::int64_t i = 0; i < b; ++i) {
    auto gen = make_generator(seeds[static_cast<std::size_t>(i)]);
    per_image.push_back(torch::randn({cfg.m, 3, h, w}, gen, torch::kFloat));
  }
  auto noise = torch::stack(per_image, 1).reshape({cfg.m * b, 3, h, w});  // repeat-major
  const int t = sched.step_for_ratio(cfg.t_star);
  auto x_t = forward_diffuse(x0.repeat({cfg.m, 1, 1, 1}), t, noise, sched);

  auto tok = prompt.to(torch::kFloat);
  tok = tok.dim() == 2 ? tok.unsqueeze(0).expand({b, tok.size(0), tok.size(1)}) : tok;
  tok = tok.repeat({cfg.m, 1, 1});
  auto tokens = torch::cat({tok, torch::zeros_like(tok)}, 0);
  auto both = predict_x0_one_step(torch::cat({x_t, x_t}, 0), t, tokens, model, sched);
  auto x_a = both.slice(0, 0, cfg.m * b);
  auto x_b = both.slice(0, cfg.m * b);
  return (x_a - x_b).abs().sum(1).reshape({cfg.m, b, h, w}).mean(0);
}

DiffMap aap_difference(const torch::Tensor& x_adv, const torch::Tensor& prompt, const LocalizerConfig& cfg,
                       const NoisePredictor& model, const NoiseSchedule& sched, Seed seed) {
  require(x_adv.dim() == 3, "aap_difference expects one image [C,H,W]");
  return {aap_difference_values(x_adv.unsqueeze(0), prompt, cfg, model, sched, {seed}).squeeze(0),
          Normalization::raw};
}

torch::Tensor normalize_diff_values(const torch::Tensor& raw, double floor) {
  auto [x, single] = to_nchw(raw);
  auto flat = x.flatten(1);
  auto q = torch::quantile(flat, 0.99, /*dim=*/1, /*keepdim=*/true);
  auto scale = floor > 0.0 ? q.clamp_min(floor) : q;
  auto positive = scale > 0;
  auto out = torch::where(positive, flat / torch::where(positive, scale, torch::ones_like(scale)), flat);
  return from_nchw(out.clamp(0.0, 1.0).reshape(x.sizes()), single);
}

DiffMap normalize_diff(const DiffMap& d, double floor) {
  require(d.normalization == Normalization::raw, "normalize_diff expects a raw map");
  return {normalize_diff_values(d.values, floor), Normalization::percentile};
}

torch::Tensor binarize(const torch::Tensor& d, double theta, BinarizeMode mode, double tau) {
  require(theta > 0.0 && theta < 1.0, "binarize: theta must lie in (0,1)");
  require(tau > 0.0, "binarize: tau must be positive");
  if (mode == BinarizeMode::soft) {
    return torch::sigmoid((d - theta) / tau);
  }
  auto hard = (d > theta).to(d.scalar_type());
  if (!d.requires_grad()) {
    return hard;
  }
  auto soft = torch::sigmoid((d - theta) / tau);
  return hard + (soft - soft.detach());
}

torch::Tensor gaussian_kernel(int size, double sigma) {
  require(size >= 1 && size % 2 == 1, "Gaussian kernel size must be odd");
  require(sigma > 0.0, "Gaussian sigma must be positive");
  auto r = torch::arange(size, torch::kDouble) - (size / 2);
  auto g = torch::exp(-(r * r) / (2.0 * sigma * sigma));
  auto k = torch::outer(g, g);
  return k / k.sum();
}

torch::Tensor gaussian_blur(const torch::Tensor& mask, int size, double sigma) {
  auto [x, single] = to_nchw(mask);
  auto k = gaussian_kernel(size, sigma).to(x.scalar_type()).view({1, 1, size, size});
  return from_nchw(torch::conv2d(x, k, {}, 1, size / 2), single);
}

torch::Tensor disk_kernel(int radius) {
  require(radius >= 0, "disk radius must be >= 0");
  const int s = 2 * radius + 1;
  auto k = torch::zeros({s, s});
  auto acc = k.accessor<float, 2>();
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dy * dy + dx * dx <= radius * radius) {
        acc[dy + radius][dx + radius] = 1.0F;
      }
    }
  }
  return k;
}

torch::Tensor dilate(const torch::Tensor& mask, int radius, int iters) {
  auto [x, single] = to_nchw(mask);
  const int s = 2 * radius + 1;
  auto k = disk_kernel(radius).to(x.scalar_type()).view({1, 1, s, s});
  auto out = (x > 0.5).to(x.scalar_type());
  for (int i = 0; i < iters; ++i) {
    out = (torch::conv2d(out, k, {}, 1, radius) > 0.5).to(x.scalar_type());
  }
  return from_nchw(out, single);
}

torch::Tensor soft_dilate(const torch::Tensor& mask, int radius, int iters) {
  auto [x, single] = to_nchw(mask);
  const auto h = x.size(2), w = x.size(3);
  for (int it = 0; it < iters; ++it) {
    auto padded = torch::constant_pad_nd(x, {radius, radius, radius, radius}, 0.0);
    std::vector<torch::Tensor> shifted;
    for (int dy = -radius; dy <= radius; ++dy) {
      for (int dx = -radius; dx <= radius; ++dx) {
        if (dy * dy + dx * dx <= radius * radius) {
          shifted.push_back(padded.slice(2, radius + dy, radius + dy + h).slice(3, radius + dx, radius + dx + w));
        }
      }
    }
    x = std::get<0>(torch::stack(shifted, 0).max(0));
  }
  return from_nchw(x, single);
}

torch::Tensor refine_mask(const torch::Tensor& raw, const LocalizerConfig& cfg) {
  auto smoothed = (gaussian_blur(raw.to(torch::kFloat), cfg.gauss_size, cfg.gauss_sigma) > 0.5).to(torch::kFloat);
  return dilate(smoothed, cfg.dilate_radius, cfg.dilate_iters);
}

torch::Tensor refine_mask_soft(const torch::Tensor& soft, const LocalizerConfig& cfg) {
  auto smoothed = torch::sigmoid((gaussian_blur(soft, cfg.gauss_size, cfg.gauss_sigma) - 0.5) / cfg.soft_tau);
  return soft_dilate(smoothed, cfg.dilate_radius, cfg.dilate_iters);
}

Localization localize_batch(const torch::Tensor& images, const torch::Tensor& prompt, const LocalizerConfig& cfg,
                            const NoisePredictor& model, const NoiseSchedule& sched,
                            const std::vector<Seed>& seeds) {
  torch::NoGradGuard no_grad;
  auto raw = aap_difference_values(images, prompt, cfg, model, sched, seeds);
  auto norm = normalize_diff_values(raw, cfg.diff_floor);
  auto mask = refine_mask(binarize(norm, cfg.theta, BinarizeMode::hard), cfg);
  return {mask, mask.mean({1, 2}), {norm, Normalization::percentile}};
}

Localization localize(const torch::Tensor& x_adv, const torch::Tensor& prompt, const LocalizerConfig& cfg,
                      const NoisePredictor& model, const NoiseSchedule& sched, Seed seed) {
  require(x_adv.dim() == 3, "localize expects one image [C,H,W]");
  auto loc = localize_batch(x_adv.unsqueeze(0), prompt, cfg, model, sched, {seed});
  return {loc.mask.squeeze(0), loc.area_fraction.squeeze(0), {loc.diff.values.squeeze(0), loc.diff.normalization}};
}

torch::Tensor localize_ste(const torch::Tensor& images, const torch::Tensor& prompt, const LocalizerConfig& cfg,
                           const NoisePredictor& model, const NoiseSchedule& sched,
                           const std::vector<Seed>& seeds) {
  auto norm = normalize_diff_values(aap_difference_values(images, prompt, cfg, model, sched, seeds), cfg.diff_floor);
  auto hard = refine_mask(binarize(norm.detach(), cfg.theta, BinarizeMode::hard), cfg);
  auto soft = refine_mask_soft(binarize(norm, cfg.theta, BinarizeMode::soft, cfg.soft_tau), cfg);
  return hard + (soft - soft.detach());
}

}  // namespace diffender
