#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <torch/torch.h>

/// Shared vocabulary for the whole library.
///
/// Images are float tensors laid out [C,H,W] with values in [0,1]; batches are
/// [B,C,H,W]. Masks are [H,W] (batched [B,H,W]); hard masks hold exactly 0 or 1.
namespace diffender {

using Seed = std::uint64_t;

/// Violated precondition of an operation (bad shape, out-of-range argument).
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Malformed or missing user input (dataset directory, manifest).
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// On-disk container that cannot be decoded (version, corruption).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid experiment configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A checkpoint or cache the caller referenced does not exist. A special
/// case of a configuration error.
struct MissingArtifactError : ConfigError {
  using ConfigError::ConfigError;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) {
    throw ContractError(message);
  }
}

/// A fresh CPU generator; every stochastic routine takes one of these (or a
/// seed) explicitly so results never depend on global RNG state.
torch::Generator make_generator(Seed seed);

/// Derive an independent stream seed from a base seed and a stream id.
Seed derive_seed(Seed base, std::uint64_t stream);

/// Promote [C,H,W] to [1,C,H,W]; batches pass through.
torch::Tensor as_batch(const torch::Tensor& image);

/// Promote [H,W] to [1,H,W]; batched masks pass through.
torch::Tensor as_mask_batch(const torch::Tensor& mask);

/// 64-bit FNV-1a, used for config hashes and cache keys.
std::uint64_t fnv1a(const std::string& bytes);
std::string hex64(std::uint64_t value);

/// Peak signal-to-noise ratio for [0,1] images.
double psnr(const torch::Tensor& a, const torch::Tensor& b);

/// Intersection over union of two hard masks (1 when both are empty).
double mask_iou(const torch::Tensor& a, const torch::Tensor& b);

}  // namespace diffender
