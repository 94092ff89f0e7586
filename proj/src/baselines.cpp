#include "diffender/baselines.hpp"

#include <cmath>

#include "diffender/image_io.hpp"

namespace diffender {

torch::Tensor baseline_jpeg(const torch::Tensor& x, int quality) {
  require(quality >= 1 && quality <= 100, "baseline_jpeg: quality must lie in [1,100]");
  if (x.dim() == 3) {
    return jpeg_round_trip(x, quality).to(x.scalar_type());
  }
  require(x.dim() == 4, "baseline_jpeg expects [C,H,W] or [B,C,H,W]");
  std::vector<torch::Tensor> out;
  for (std::int64_t i = 0; i < x.size(0); ++i) {
    out.push_back(jpeg_round_trip(x[i], quality));
  }
  return torch::stack(out, 0).to(x.scalar_type());
}

torch::Tensor baseline_smoothing(const torch::Tensor& x, int window) {
  require(window >= 1 && window % 2 == 1, "baseline_smoothing: window must be odd");
  auto b = as_batch(x);
  const auto n = b.size(0), c = b.size(1), h = b.size(2), w = b.size(3);
  const int r = window / 2;
  auto planes = b.reshape({n * c, 1, h, w});
  auto padded = r > 0 ? torch::replication_pad2d(planes, {r, r, r, r}) : planes;
  auto windows = torch::nn::functional::unfold(padded, torch::nn::functional::UnfoldFuncOptions({window, window}));
  auto med = std::get<0>(windows.median(1)).reshape({n, c, h, w});
  return x.dim() == 3 ? med.squeeze(0) : med;
}

torch::Tensor baseline_purify_batch(const torch::Tensor& images, double t_star, const NoisePredictor& model,
                                    const NoiseSchedule& sched, int steps, const std::vector<Seed>& seeds) {
  require(images.dim() == 4, "baseline_purify expects [B,C,H,W]");
  require(static_cast<std::int64_t>(seeds.size()) == images.size(0), "baseline_purify: one seed per image");
  require(steps >= 1, "baseline_purify: steps must be >= 1");
  torch::NoGradGuard no_grad;
  const int t = sched.step_for_ratio(t_star);
  const auto channels = images.size(1);
  auto x0 = lift_to_model(images.to(torch::kFloat));
  std::vector<torch::Tensor> noise;
  std::vector<Seed> reverse_seeds;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    auto gen = make_generator(derive_seed(seeds[i], 3));
    noise.push_back(torch::randn({3, x0.size(2), x0.size(3)}, gen, torch::kFloat));
    reverse_seeds.push_back(derive_seed(seeds[i], 4));
  }
  auto x_t = forward_diffuse(x0, t, torch::stack(noise, 0), sched);
  const int n = std::max(1, static_cast<int>(std::ceil(static_cast<double>(steps) * (t + 1) / sched.steps())));
  auto empty = torch::zeros({1, model.embed_dim()});
  auto out = reverse_from(x_t, t, empty, n, model, sched, reverse_seeds);
  return project_from_model(out, channels).to(images.scalar_type());
}

torch::Tensor baseline_purify(const torch::Tensor& x, double t_star, const NoisePredictor& model,
                              const NoiseSchedule& sched, int steps, Seed seed) {
  require(x.dim() == 3, "baseline_purify expects one image [C,H,W]");
  return baseline_purify_batch(x.unsqueeze(0), t_star, model, sched, steps, {seed}).squeeze(0);
}

namespace {

/// Forward value of `defended`, identity gradient to `batch`.
torch::Tensor bpda_identity(const torch::Tensor& batch, const torch::Tensor& defended) {
  return defended.detach() + (batch - batch.detach());
}

}  // namespace

torch::Tensor JpegDefense::apply(const torch::Tensor& batch, const std::vector<Seed>&) const {
  return baseline_jpeg(batch.detach(), quality_);
}

torch::Tensor JpegDefense::surrogate(const torch::Tensor& batch, const std::vector<Seed>& seeds, int) const {
  return bpda_identity(batch, apply(batch, seeds));
}

torch::Tensor SmoothingDefense::apply(const torch::Tensor& batch, const std::vector<Seed>&) const {
  torch::NoGradGuard no_grad;
  return baseline_smoothing(batch.detach(), window_);
}

torch::Tensor SmoothingDefense::surrogate(const torch::Tensor& batch, const std::vector<Seed>& seeds, int) const {
  return bpda_identity(batch, apply(batch, seeds));
}

torch::Tensor PurifyDefense::apply(const torch::Tensor& batch, const std::vector<Seed>& seeds) const {
  return baseline_purify_batch(batch.detach(), t_star_, model_, sched_, steps_, seeds);
}

torch::Tensor PurifyDefense::surrogate(const torch::Tensor& batch, const std::vector<Seed>& seeds,
                                       int restore_steps) const {
  return bpda_identity(batch, baseline_purify_batch(batch.detach(), t_star_, model_, sched_, restore_steps, seeds));
}

std::vector<DefenseOutput> DiffenderDefense::run(const torch::Tensor& batch, const std::vector<Seed>& seeds) const {
  return defend_batch(batch.detach(), prompts_, loc_cfg_, res_cfg_, model_, sched_, seeds);
}

torch::Tensor DiffenderDefense::apply(const torch::Tensor& batch, const std::vector<Seed>& seeds) const {
  auto outs = run(batch, seeds);
  std::vector<torch::Tensor> restored;
  for (auto& o : outs) {
    restored.push_back(o.restored);
  }
  return torch::stack(restored, 0);
}

torch::Tensor DiffenderDefense::surrogate(const torch::Tensor& batch, const std::vector<Seed>& seeds,
                                          int restore_steps) const {
  require(batch.dim() == 4 && static_cast<std::int64_t>(seeds.size()) == batch.size(0),
          "surrogate: [B,C,H,W] with one seed per image");
  std::vector<Seed> loc_seeds, res_seeds;
  for (auto s : seeds) {
    loc_seeds.push_back(derive_seed(s, 1));
    res_seeds.push_back(derive_seed(s, 2));
  }
  auto mask = localize_ste(batch, prompts_.localize, loc_cfg_, model_, sched_, loc_seeds);  // [B,H,W]
  auto hard = mask.detach();
  auto gate = (hard.mean({1, 2}) >= res_cfg_.gate_area);

  auto restored = batch.detach().clone();
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < batch.size(0); ++i) {
    if (gate[i].item<bool>()) {
      idx.push_back(i);
    }
  }
  if (!idx.empty()) {
    torch::NoGradGuard no_grad;
    auto sel = torch::tensor(idx, torch::kLong);
    std::vector<Seed> sub;
    for (auto i : idx) {
      sub.push_back(res_seeds[static_cast<std::size_t>(i)]);
    }
    auto r = restore_batch(batch.detach().index_select(0, sel), hard.index_select(0, sel), prompts_.restore, model_,
                           sched_, restore_steps, sub);
    restored.index_copy_(0, sel, r.to(restored.scalar_type()));
  }
  auto m = (mask * gate.to(mask.scalar_type()).view({-1, 1, 1})).unsqueeze(1);
  return m * bpda_identity(batch, restored) + (1.0 - m) * batch;
}

}  // namespace diffender
