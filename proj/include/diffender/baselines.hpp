#pragma once

#include <memory>
#include <string>
#include <vector>

#include "diffender/attacker.hpp"
#include "diffender/restorer.hpp"

namespace diffender {

/// JPEG encode/decode at `quality` in [1,100]; [C,H,W] or batches.
torch::Tensor baseline_jpeg(const torch::Tensor& x, int quality);

/// Per-channel median filter with an odd window, replicate border; [C,H,W] or batches.
torch::Tensor baseline_smoothing(const torch::Tensor& x, int window);

/// Forward-diffuse to round(t_star (T-1)), then denoise with the empty
/// prompt. `steps` is the reverse budget over the full chain; the purify
/// chain uses max(1, ceil(steps (t+1) / T)) of them.
torch::Tensor baseline_purify(const torch::Tensor& x, double t_star, const NoisePredictor& model,
                              const NoiseSchedule& sched, int steps, Seed seed);
torch::Tensor baseline_purify_batch(const torch::Tensor& images, double t_star, const NoisePredictor& model,
                                    const NoiseSchedule& sched, int steps, const std::vector<Seed>& seeds);

/// JPEG defense; BPDA backward is the identity.
class JpegDefense final : public Defense {
 public:
  explicit JpegDefense(int quality) : quality_(quality) {}
  std::string name() const override { return "jpeg"; }
  torch::Tensor apply(const torch::Tensor& batch, const std::vector<Seed>& seeds) const override;
  torch::Tensor surrogate(const torch::Tensor& batch, const std::vector<Seed>& seeds, int) const override;

 private:
  int quality_;
};

/// Median smoothing; BPDA backward is the identity.
class SmoothingDefense final : public Defense {
 public:
  explicit SmoothingDefense(int window) : window_(window) {}
  std::string name() const override { return "smoothing"; }
  torch::Tensor apply(const torch::Tensor& batch, const std::vector<Seed>& seeds) const override;
  torch::Tensor surrogate(const torch::Tensor& batch, const std::vector<Seed>& seeds, int) const override;

 private:
  int window_;
};

/// Diffusion purification; BPDA backward is the identity.
class PurifyDefense final : public Defense {
 public:
  PurifyDefense(const NoisePredictor& model, const NoiseSchedule& sched, double t_star, int steps)
      : model_(model), sched_(sched), t_star_(t_star), steps_(steps) {}
  std::string name() const override { return "purify"; }
  torch::Tensor apply(const torch::Tensor& batch, const std::vector<Seed>& seeds) const override;
  torch::Tensor surrogate(const torch::Tensor& batch, const std::vector<Seed>& seeds, int restore_steps) const override;

 private:
  const NoisePredictor& model_;
  const NoiseSchedule& sched_;
  double t_star_;
  int steps_;
};

/// Localize + gated inpainting. The surrogate keeps the hard mask in the
/// forward pass with the soft-mask gradient (straight-through) and treats
/// restoration as the identity in the backward pass.
class DiffenderDefense final : public Defense {
 public:
  DiffenderDefense(const NoisePredictor& model, const NoiseSchedule& sched, DefensePrompts prompts,
                   LocalizerConfig loc_cfg, RestorerConfig res_cfg)
      : model_(model), sched_(sched), prompts_(std::move(prompts)), loc_cfg_(loc_cfg), res_cfg_(res_cfg) {}
  std::string name() const override { return "diffender"; }
  torch::Tensor apply(const torch::Tensor& batch, const std::vector<Seed>& seeds) const override;
  torch::Tensor surrogate(const torch::Tensor& batch, const std::vector<Seed>& seeds, int restore_steps) const override;
  /// Full outputs (masks, gating, timings) for reporting.
  std::vector<DefenseOutput> run(const torch::Tensor& batch, const std::vector<Seed>& seeds) const;

 private:
  const NoisePredictor& model_;
  const NoiseSchedule& sched_;
  DefensePrompts prompts_;
  LocalizerConfig loc_cfg_;
  RestorerConfig res_cfg_;
};

}  // namespace diffender
