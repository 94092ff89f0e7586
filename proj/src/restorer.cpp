#include "diffender/restorer.hpp"

#include <chrono>

namespace diffender {
namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

Seed image_seed(Seed base, std::int64_t index) {
  return derive_seed(derive_seed(base, 101), static_cast<std::uint64_t>(index));
}

torch::Tensor restore_batch(const torch::Tensor& images, const torch::Tensor& masks, const torch::Tensor& prompt,
                            const NoisePredictor& model, const NoiseSchedule& sched, int steps,
                            const std::vector<Seed>& seeds) {
  require(steps >= 1, "restore: steps must be >= 1");
  require(images.dim() == 4 && masks.dim() == 3 && masks.size(0) == images.size(0),
          "restore: images [B,C,H,W] with masks [B,H,W]");
  const auto channels = images.size(1);
  auto x = images.to(torch::kFloat);
  auto generated = inpaint_seeded(lift_to_model(x), masks, prompt, steps, model, sched, seeds);
  auto projected = project_from_model(generated, channels);
  return torch::where((masks > 0.5).unsqueeze(1), projected, x);
}

torch::Tensor restore(const torch::Tensor& x_adv, const torch::Tensor& mask, const torch::Tensor& prompt,
                      const NoisePredictor& model, const NoiseSchedule& sched, int steps, Seed seed) {
  if (x_adv.dim() == 3) {
    require(mask.dim() == 2, "restore: mask must be [H,W]");
    return restore_batch(x_adv.unsqueeze(0), mask.unsqueeze(0), prompt, model, sched, steps, {seed}).squeeze(0);
  }
  std::vector<Seed> seeds;
  for (std::int64_t i = 0; i < x_adv.size(0); ++i) {
    seeds.push_back(image_seed(seed, i));
  }
  return restore_batch(x_adv, mask, prompt, model, sched, steps, seeds);
}

std::vector<DefenseOutput> defend_batch(const torch::Tensor& images, const DefensePrompts& prompts,
                                        const LocalizerConfig& loc_cfg, const RestorerConfig& res_cfg,
                                        const NoisePredictor& model, const NoiseSchedule& sched,
                                        const std::vector<Seed>& seeds) {
  require(res_cfg.gate_area >= 0.0 && res_cfg.gate_area < 1.0, "defend: gate_area must lie in [0,1)");
  require(images.dim() == 4, "defend_batch expects [B,C,H,W]");
  const auto b = images.size(0);
  require(static_cast<std::int64_t>(seeds.size()) == b, "defend_batch: one seed per image");
  torch::NoGradGuard no_grad;

  std::vector<Seed> loc_seeds, res_seeds;
  for (auto s : seeds) {
    loc_seeds.push_back(derive_seed(s, 1));
    res_seeds.push_back(derive_seed(s, 2));
  }
  auto start = std::chrono::steady_clock::now();
  auto loc = localize_batch(images, prompts.localize, loc_cfg, model, sched, loc_seeds);
  const double loc_time = seconds_since(start) / static_cast<double>(b);

  std::vector<std::int64_t> gated_idx;
  for (std::int64_t i = 0; i < b; ++i) {
    if (loc.area_fraction[i].item<double>() >= res_cfg.gate_area) {
      gated_idx.push_back(i);
    }
  }
  std::vector<DefenseOutput> out(static_cast<std::size_t>(b));
  for (std::int64_t i = 0; i < b; ++i) {
    auto& o = out[static_cast<std::size_t>(i)];
    o.restored = images[i];
    o.mask = loc.mask[i];
    o.diff = loc.diff.values[i];
    o.area_fraction = loc.area_fraction[i].item<double>();
    o.timings["localize"] = loc_time;
    o.timings["restore"] = 0.0;
  }
  if (!gated_idx.empty()) {
    auto idx = torch::tensor(gated_idx, torch::kLong);
    std::vector<Seed> sub_seeds;
    for (auto i : gated_idx) {
      sub_seeds.push_back(res_seeds[static_cast<std::size_t>(i)]);
    }
    start = std::chrono::steady_clock::now();
    auto restored = restore_batch(images.index_select(0, idx), loc.mask.index_select(0, idx), prompts.restore,
                                  model, sched, res_cfg.steps, sub_seeds);
    const double res_time = seconds_since(start) / static_cast<double>(gated_idx.size());
    for (std::size_t k = 0; k < gated_idx.size(); ++k) {
      auto& o = out[static_cast<std::size_t>(gated_idx[k])];
      o.restored = restored[static_cast<std::int64_t>(k)].to(images.scalar_type());
      o.gated = true;
      o.timings["restore"] = res_time;
    }
  }
  return out;
}

DefenseOutput defend(const torch::Tensor& x, const DefensePrompts& prompts, const LocalizerConfig& loc_cfg,
                     const RestorerConfig& res_cfg, const NoisePredictor& model, const NoiseSchedule& sched,
                     Seed seed) {
  require(x.dim() == 3, "defend expects one image [C,H,W]");
  return defend_batch(x.unsqueeze(0), prompts, loc_cfg, res_cfg, model, sched, {seed}).front();
}

}  // namespace diffender
