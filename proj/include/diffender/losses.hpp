#pragma once

#include <functional>
#include <vector>

#include "diffender/classifier.hpp"

namespace diffender {

/// Mean per-pixel binary cross-entropy of a soft mask against a hard mask.
/// The soft mask is clamped to [1e-6, 1 - 1e-6].
torch::Tensor loss_ce(const torch::Tensor& mask, const torch::Tensor& mask_soft);

/// Mean absolute difference.
torch::Tensor loss_l1(const torch::Tensor& x_r, const torch::Tensor& x);

using FeatureFn = std::function<std::vector<torch::Tensor>(const torch::Tensor&)>;

/// sum_l mean_{h,w} || n(f_l(x_r)) - n(f_l(x)) ||^2 with channel-unit-normalized
/// features n(f) = f / sqrt(sum_c f^2 + 1e-20). Batches are averaged.
torch::Tensor perceptual_distance(const torch::Tensor& x_r, const torch::Tensor& x, const FeatureFn& features);
/// Uses every declared tap of the classifier, uniform layer weights.
torch::Tensor perceptual_distance(const torch::Tensor& x_r, const torch::Tensor& x, const Classifier& clf);

/// Mean over pixels of the population standard deviation of each k x k
/// window (reflect padding). Single-channel [H,W], [1,H,W] or [B,1,H,W].
torch::Tensor local_uniformity(const torch::Tensor& image, int k);

/// Mean SSIM with a 7x7 Gaussian window (sigma 1.5), valid region only,
/// C1 = 0.01^2, C2 = 0.03^2. Single-channel images as for local_uniformity.
torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b);

/// alpha * local_uniformity(I_r, k) + beta * (1 - ssim(I, I_r)).
torch::Tensor loss_tnc(const torch::Tensor& image, const torch::Tensor& restored, double alpha, double beta, int k);

/// Sobel gradient magnitude (replicate padding) of a single-channel image.
torch::Tensor sobel_magnitude(const torch::Tensor& image);
/// Binary edge map: magnitude above 0.2 of the image's own maximum. Flat
/// images (maximum below 1e-5) have no edges.
torch::Tensor sobel_edges(const torch::Tensor& image);
/// sigmoid((magnitude / max - 0.2) / tau); zero on flat images.
torch::Tensor soft_edges(const torch::Tensor& image, double tau = 0.05);

/// 1 - (2 sum(A B) + eps) / (sum A + sum B + eps), eps = 1e-6; batches averaged.
torch::Tensor dice_loss(const torch::Tensor& a, const torch::Tensor& b);

/// gamma * dice(E(I), E(I_r)) + delta * dice(1 - E(I), 1 - E(I_r)). E(I) is a
/// constant; E(I_r) is the hard edge map with the soft-edge gradient.
torch::Tensor loss_ie(const torch::Tensor& image, const torch::Tensor& restored, double gamma, double delta);
/// The same loss with soft edges in the forward pass as well.
torch::Tensor loss_ie_soft(const torch::Tensor& image, const torch::Tensor& restored, double gamma, double delta);

}  // namespace diffender
