#pragma once

#include <vector>

#include "diffender/diffusion.hpp"

namespace diffender {

enum class Normalization { raw, percentile };

/// Per-pixel prompt-vs-empty disagreement, [H,W] or batched [B,H,W].
struct DiffMap {
  torch::Tensor values;
  Normalization normalization = Normalization::raw;
};

struct LocalizerConfig {
  int m = 3;               ///< repeated one-step denoisings
  double t_star = 0.5;     ///< noise ratio of the shared x_t
  double theta = 0.5;      ///< binarize threshold on the normalized map
  int gauss_size = 5;
  double gauss_sigma = 1.5;
  int dilate_radius = 2;
  int dilate_iters = 1;
  double soft_tau = 0.05;  ///< sigmoid temperature of the soft mask
  /// Lower bound on the normalization scale. 0 keeps pure percentile scaling.
  double diff_floor = 0.0;

  void validate() const;
};

enum class BinarizeMode { hard, soft };

/// Sum over channels of |x_a - x_b|, averaged over cfg.m repeats, where x_a
/// and x_b are one-step x0 predictions from the same x_t under `prompt` and
/// the all-zero prompt. Batched inputs take one seed per image; the result
/// for an image depends only on the image and its seed. Differentiable in
/// `prompt` and the image when grad mode is on.
torch::Tensor aap_difference_values(const torch::Tensor& images, const torch::Tensor& prompt,
                                    const LocalizerConfig& cfg, const NoisePredictor& model,
                                    const NoiseSchedule& sched, const std::vector<Seed>& seeds);

DiffMap aap_difference(const torch::Tensor& x_adv, const torch::Tensor& prompt, const LocalizerConfig& cfg,
                       const NoisePredictor& model, const NoiseSchedule& sched, Seed seed);

/// Divide each map by max(99th percentile, floor) when positive, then clip to [0,1].
torch::Tensor normalize_diff_values(const torch::Tensor& raw, double floor = 0.0);
DiffMap normalize_diff(const DiffMap& d, double floor = 0.0);

/// hard: 1 where d > theta. soft: sigmoid((d - theta) / tau). In hard mode a
/// `d` that requires grad gets the soft gradient (straight-through).
torch::Tensor binarize(const torch::Tensor& d, double theta, BinarizeMode mode, double tau = 0.05);

/// Normalized odd-sized Gaussian kernel [size,size].
torch::Tensor gaussian_kernel(int size, double sigma);
/// Zero-padded same-size Gaussian blur of [H,W] or [B,H,W] maps.
torch::Tensor gaussian_blur(const torch::Tensor& mask, int size, double sigma);
/// Disk offsets with dy^2 + dx^2 <= r^2 as a [2r+1,2r+1] 0/1 kernel.
torch::Tensor disk_kernel(int radius);
/// Binary dilation by the disk, `iters` times.
torch::Tensor dilate(const torch::Tensor& mask, int radius, int iters);
/// Max over disk-shifted copies, the differentiable counterpart of dilate.
torch::Tensor soft_dilate(const torch::Tensor& mask, int radius, int iters);

/// Blur, re-threshold at 0.5, dilate. Hard in, hard out.
torch::Tensor refine_mask(const torch::Tensor& raw, const LocalizerConfig& cfg);
/// Smooth analogue of refine_mask on a soft mask.
torch::Tensor refine_mask_soft(const torch::Tensor& soft, const LocalizerConfig& cfg);

struct Localization {
  torch::Tensor mask;            ///< refined hard mask, [H,W] or [B,H,W]
  torch::Tensor area_fraction;   ///< mean of each mask, scalar or [B]
  DiffMap diff;                  ///< normalized difference map
};

Localization localize(const torch::Tensor& x_adv, const torch::Tensor& prompt, const LocalizerConfig& cfg,
                      const NoisePredictor& model, const NoiseSchedule& sched, Seed seed);
Localization localize_batch(const torch::Tensor& images, const torch::Tensor& prompt, const LocalizerConfig& cfg,
                            const NoisePredictor& model, const NoiseSchedule& sched, const std::vector<Seed>& seeds);

/// Hard mask with a straight-through soft gradient, for attacks and tuning:
/// forward equals localize's refined mask, backward follows refine_mask_soft.
torch::Tensor localize_ste(const torch::Tensor& images, const torch::Tensor& prompt, const LocalizerConfig& cfg,
                           const NoisePredictor& model, const NoiseSchedule& sched, const std::vector<Seed>& seeds);

}  // namespace diffender
