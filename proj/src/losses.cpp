#include "diffender/losses.hpp"

#include "diffender/localizer.hpp"

namespace diffender {
namespace {

void same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  require(a.sizes() == b.sizes(), std::string(what) + ": shape mismatch");
}

/// Single-channel input as [B,1,H,W].
torch::Tensor gray_batch(const torch::Tensor& image) {
  switch (image.dim()) {
    case 2:
      return image.unsqueeze(0).unsqueeze(0);
    case 3:
      require(image.size(0) == 1, "expected a single-channel image");
      return image.unsqueeze(0);
    case 4:
      require(image.size(1) == 1, "expected single-channel images");
      return image;
    default:
      throw ContractError("expected [H,W], [1,H,W] or [B,1,H,W]");
  }
}

torch::Tensor safe_sqrt(const torch::Tensor& v) {
  auto positive = v > 0;
  return torch::where(positive, torch::sqrt(torch::where(positive, v, torch::ones_like(v))),
                      torch::zeros_like(v));
}

}  // namespace

torch::Tensor loss_ce(const torch::Tensor& mask, const torch::Tensor& mask_soft) {
  same_shape(mask, mask_soft, "loss_ce");
  auto p = mask_soft.clamp(1e-6, 1.0 - 1e-6);
  auto m = mask.to(p.scalar_type());
  return -(m * torch::log(p) + (1.0 - m) * torch::log(1.0 - p)).mean();
}

torch::Tensor loss_l1(const torch::Tensor& x_r, const torch::Tensor& x) {
  same_shape(x_r, x, "loss_l1");
  return (x_r - x).abs().mean();
}

torch::Tensor perceptual_distance(const torch::Tensor& x_r, const torch::Tensor& x, const FeatureFn& features) {
  same_shape(x_r, x, "perceptual_distance");
  auto fr = features(as_batch(x_r));
  auto fc = features(as_batch(x));
  require(fr.size() == fc.size(), "perceptual_distance: feature count mismatch");
  auto total = torch::zeros({}, x_r.options());
  for (std::size_t l = 0; l < fr.size(); ++l) {
    auto norm = [](const torch::Tensor& f) { return f / torch::sqrt(f.pow(2).sum(1, true) + 1e-20); };
    auto d = (norm(fr[l]) - norm(fc[l])).pow(2).sum(1);  // [B,H,W]
    total = total + d.mean({1, 2}).mean();
  }
  return total;
}

torch::Tensor perceptual_distance(const torch::Tensor& x_r, const torch::Tensor& x, const Classifier& clf) {
  return perceptual_distance(x_r, x, [&clf](const torch::Tensor& b) { return clf.all_features(b); });
}

torch::Tensor local_uniformity(const torch::Tensor& image, int k) {
  require(k >= 1 && k % 2 == 1, "local_uniformity: k must be odd");
  auto x = gray_batch(image);
  const int r = k / 2;
  require(x.size(2) > r && x.size(3) > r, "local_uniformity: image smaller than the window");
  auto padded = torch::reflection_pad2d(x, {r, r, r, r});
  auto windows = torch::nn::functional::unfold(padded, torch::nn::functional::UnfoldFuncOptions({k, k}));
  auto mu = windows.mean(1, true);
  auto var = (windows - mu).pow(2).mean(1);
  return safe_sqrt(var).mean();
}

torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b) {
  same_shape(a, b, "ssim");
  auto x = gray_batch(a);
  auto y = gray_batch(b);
  require(x.size(2) >= 7 && x.size(3) >= 7, "ssim: image smaller than the 7x7 window");
  auto w = gaussian_kernel(7, 1.5).to(x.scalar_type()).view({1, 1, 7, 7});
  auto filt = [&w](const torch::Tensor& t) { return torch::conv2d(t, w); };
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  auto mx = filt(x), my = filt(y);
  auto sxx = filt(x * x) - mx * mx;
  auto syy = filt(y * y) - my * my;
  auto sxy = filt(x * y) - mx * my;
  auto map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  return map.mean();
}

torch::Tensor loss_tnc(const torch::Tensor& image, const torch::Tensor& restored, double alpha, double beta, int k) {
  require(alpha >= 0.0 && beta >= 0.0, "loss_tnc: weights must be >= 0");
  auto out = torch::zeros({}, restored.options());
  if (alpha != 0.0) {
    out = out + alpha * local_uniformity(restored, k);
  }
  if (beta != 0.0) {
    out = out + beta * (1.0 - ssim(image, restored));
  }
  return out;
}

// Peak gradient magnitude below which an image counts as flat (float rounding
// on constant images leaves residues around 1e-7).
constexpr double kFlatPeak = 1e-5;

torch::Tensor sobel_magnitude(const torch::Tensor& image) {
  auto x = gray_batch(image);
  auto kx = torch::tensor({-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0}, x.options()).view({1, 1, 3, 3});
  auto ky = kx.transpose(2, 3).contiguous();
  auto padded = torch::replication_pad2d(x, {1, 1, 1, 1});
  auto gx = torch::conv2d(padded, kx);
  auto gy = torch::conv2d(padded, ky);
  auto mag = safe_sqrt(gx * gx + gy * gy);
  return image.dim() == 2 ? mag.squeeze(0).squeeze(0) : (image.dim() == 3 ? mag.squeeze(0) : mag);
}

torch::Tensor sobel_edges(const torch::Tensor& image) {
  torch::NoGradGuard no_grad;
  auto mag = sobel_magnitude(image);
  auto peak = mag.flatten(mag.dim() == 4 ? 1 : 0).amax(-1);
  if (mag.dim() == 4) {
    peak = peak.view({-1, 1, 1, 1});
  }
  return ((mag > 0.2 * peak) & (peak > kFlatPeak)).to(image.scalar_type());
}

torch::Tensor soft_edges(const torch::Tensor& image, double tau) {
  auto mag = sobel_magnitude(image);
  auto peak = mag.flatten(mag.dim() == 4 ? 1 : 0).amax(-1);
  if (mag.dim() == 4) {
    peak = peak.view({-1, 1, 1, 1});
  }
  auto flat = peak <= kFlatPeak;
  auto safe_peak = torch::where(flat, torch::ones_like(peak), peak);
  auto soft = torch::sigmoid((mag / safe_peak - 0.2) / tau);
  return torch::where(flat, torch::zeros_like(soft), soft);
}

torch::Tensor dice_loss(const torch::Tensor& a, const torch::Tensor& b) {
  same_shape(a, b, "dice_loss");
  const double eps = 1e-6;
  auto x = a.dim() == 4 ? a.flatten(1) : a.reshape({1, -1});
  auto y = b.dim() == 4 ? b.flatten(1) : b.reshape({1, -1});
  auto dice = (2.0 * (x * y).sum(1) + eps) / (x.sum(1) + y.sum(1) + eps);
  return (1.0 - dice).mean();
}

namespace {

torch::Tensor ie_terms(const torch::Tensor& e_clean, const torch::Tensor& e_rest, double gamma, double delta) {
  require(gamma >= 0.0 && delta >= 0.0, "loss_ie: weights must be >= 0");
  auto out = torch::zeros({}, e_rest.options());
  if (gamma != 0.0) {
    out = out + gamma * dice_loss(e_clean, e_rest);
  }
  if (delta != 0.0) {
    out = out + delta * dice_loss(1.0 - e_clean, 1.0 - e_rest);
  }
  return out;
}

}  // namespace

torch::Tensor loss_ie(const torch::Tensor& image, const torch::Tensor& restored, double gamma, double delta) {
  same_shape(image, restored, "loss_ie");
  auto e_clean = sobel_edges(image.detach());
  auto hard = sobel_edges(restored.detach());
  auto e_rest = hard;
  if (restored.requires_grad()) {
    auto soft = soft_edges(restored);
    e_rest = hard + (soft - soft.detach());
  }
  return ie_terms(e_clean, e_rest, gamma, delta);
}

torch::Tensor loss_ie_soft(const torch::Tensor& image, const torch::Tensor& restored, double gamma, double delta) {
  same_shape(image, restored, "loss_ie");
  return ie_terms(sobel_edges(image.detach()), soft_edges(restored), gamma, delta);
}

}  // namespace diffender
