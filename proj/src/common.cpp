#include "diffender/common.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <cstdio>
#include <limits>

namespace diffender {

torch::Generator make_generator(Seed seed) {
  return at::detail::createCPUGenerator(seed);
}

Seed derive_seed(Seed base, std::uint64_t stream) {
  // splitmix64 over the pair
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

torch::Tensor as_batch(const torch::Tensor& image) {
  if (image.dim() == 3) {
    return image.unsqueeze(0);
  }
  require(image.dim() == 4, "expected an image [C,H,W] or batch [B,C,H,W]");
  return image;
}

torch::Tensor as_mask_batch(const torch::Tensor& mask) {
  if (mask.dim() == 2) {
    return mask.unsqueeze(0);
  }
  require(mask.dim() == 3, "expected a mask [H,W] or batch [B,H,W]");
  return mask;
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  require(a.sizes() == b.sizes(), "psnr: shape mismatch");
  const double mse = (a.to(torch::kDouble) - b.to(torch::kDouble)).pow(2).mean().item<double>();
  if (mse <= 0.0) {
    return std::numeric_limits<double>::infinity();
  }
  return 10.0 * std::log10(1.0 / mse);
}

double mask_iou(const torch::Tensor& a, const torch::Tensor& b) {
  require(a.sizes() == b.sizes(), "mask_iou: shape mismatch");
  auto pa = a > 0.5;
  auto pb = b > 0.5;
  const double inter = (pa & pb).sum().item<double>();
  const double uni = (pa | pb).sum().item<double>();
  return uni == 0.0 ? 1.0 : inter / uni;
}

}  // namespace diffender
