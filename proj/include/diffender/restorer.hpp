#pragma once

#include <map>
#include <string>
#include <vector>

#include "diffender/localizer.hpp"

namespace diffender {

struct RestorerConfig {
  int steps = 250;            ///< reverse-diffusion steps of the inpainting pass
  double gate_area = 0.005;   ///< restore only when the mask covers at least this fraction
};

/// Localization prompt and restoration prompt, each [n,d].
struct DefensePrompts {
  torch::Tensor localize;
  torch::Tensor restore;
};

struct DefenseOutput {
  torch::Tensor restored;
  torch::Tensor mask;
  torch::Tensor diff;
  double area_fraction = 0.0;
  bool gated = false;
  std::map<std::string, double> timings;  ///< "localize", "restore" in seconds
};

/// Inpaints the masked region with `prompt`; grayscale images go through the
/// model as replicated RGB. Pixels outside the mask are returned unchanged.
/// Accepts [C,H,W] with [H,W] mask or batches with [B,H,W] masks; a batch
/// takes one seed per image.
torch::Tensor restore(const torch::Tensor& x_adv, const torch::Tensor& mask, const torch::Tensor& prompt,
                      const NoisePredictor& model, const NoiseSchedule& sched, int steps, Seed seed);
torch::Tensor restore_batch(const torch::Tensor& images, const torch::Tensor& masks, const torch::Tensor& prompt,
                            const NoisePredictor& model, const NoiseSchedule& sched, int steps,
                            const std::vector<Seed>& seeds);

/// Localize, then restore when the refined mask area reaches the gate.
DefenseOutput defend(const torch::Tensor& x, const DefensePrompts& prompts, const LocalizerConfig& loc_cfg,
                     const RestorerConfig& res_cfg, const NoisePredictor& model, const NoiseSchedule& sched,
                     Seed seed);

/// Batched defend; output i equals defend(images[i], ..., seeds[i]).
std::vector<DefenseOutput> defend_batch(const torch::Tensor& images, const DefensePrompts& prompts,
                                        const LocalizerConfig& loc_cfg, const RestorerConfig& res_cfg,
                                        const NoisePredictor& model, const NoiseSchedule& sched,
                                        const std::vector<Seed>& seeds);

/// Seed of image `index` in an evaluation run with base seed `base`.
Seed image_seed(Seed base, std::int64_t index);

}  // namespace diffender
