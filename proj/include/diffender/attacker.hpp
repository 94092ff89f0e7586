#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "diffender/classifier.hpp"

namespace diffender {

enum class AttackKind { advp, lavan, ir_cold, bpda_advp };
enum class LocationPolicy { random_fixed, random_per_restart };

std::string to_string(AttackKind kind);
AttackKind attack_kind_from_string(const std::string& name);
std::string to_string(LocationPolicy policy);
LocationPolicy location_policy_from_string(const std::string& name);

struct AttackSpec {
  AttackKind kind = AttackKind::advp;
  double patch_fraction = 0.05;
  int iterations = 100;
  double step_size = 0.05;
  LocationPolicy location_policy = LocationPolicy::random_fixed;
  int restarts = 1;
  Seed seed = 0;
  /// BPDA only: restoration steps of the defense surrogate inside the loop.
  int surrogate_steps = 10;

  void validate() const;
  /// Stable hex digest of every field; part of attack cache keys.
  std::string hash() const;
};

struct AttackResult {
  torch::Tensor x_adv;    ///< [C,H,W]
  torch::Tensor gt_mask;  ///< [H,W] hard
  bool success = false;
  std::int64_t queries = 0;
};

/// A preprocessing defense in front of the classifier.
class Defense {
 public:
  virtual ~Defense() = default;
  virtual std::string name() const = 0;
  /// The defended images; seeds[i] drives any randomness for image i.
  virtual torch::Tensor apply(const torch::Tensor& batch, const std::vector<Seed>& seeds) const = 0;
  /// Differentiable stand-in used by adaptive attacks: same forward as
  /// apply (up to cheaper internal settings), approximate backward.
  virtual torch::Tensor surrogate(const torch::Tensor& batch, const std::vector<Seed>& seeds,
                                  int restore_steps) const = 0;
};

class IdentityDefense final : public Defense {
 public:
  std::string name() const override { return "none"; }
  torch::Tensor apply(const torch::Tensor& batch, const std::vector<Seed>&) const override { return batch; }
  torch::Tensor surrogate(const torch::Tensor& batch, const std::vector<Seed>&, int) const override { return batch; }
};

/// Side lengths (h, w) of a patch covering `fraction` of an H x W image with
/// aspect ratio h/w = `aspect`, at least 1 pixel each.
std::pair<std::int64_t, std::int64_t> patch_shape(double fraction, std::int64_t height, std::int64_t width,
                                                  double aspect = 1.0);

/// Square patch, signed-gradient ascent on cross-entropy.
AttackResult advp_attack(const torch::Tensor& x, std::int64_t label, const Classifier& clf, const AttackSpec& spec);
/// Restarts with relocation, margin loss (max other logit - true logit).
AttackResult lavan_attack(const torch::Tensor& x, std::int64_t label, const Classifier& clf, const AttackSpec& spec);
/// Cold rectangle (intensity v in [0, 0.2]) found by random search over grid
/// location, aspect and v.
AttackResult ir_cold_patch_attack(const torch::Tensor& x_ir, std::int64_t label, const Classifier& clf,
                                  const AttackSpec& spec);
/// AdvP through the defense surrogate; success judged on the true defense.
AttackResult bpda_adaptive_attack(const torch::Tensor& x, std::int64_t label, const Classifier& clf,
                                  const Defense& defense, const AttackSpec& spec);

/// Batched driver behind every attack. Image i uses seed derive_seed(spec.seed, i + index_offset),
/// so results do not depend on how a set is split into batches.
std::vector<AttackResult> run_attack(const torch::Tensor& images, const std::vector<std::int64_t>& labels,
                                     const Classifier& clf, const AttackSpec& spec,
                                     const Defense* defense = nullptr, std::int64_t index_offset = 0);

/// Attack results persisted per (attack spec, dataset key).
std::filesystem::path attack_cache_path(const std::filesystem::path& dir, const AttackSpec& spec,
                                        const std::string& dataset_key);
void save_attack_cache(const std::vector<AttackResult>& results, const AttackSpec& spec,
                       const std::string& dataset_key, const std::filesystem::path& path);
/// Reads the first `count` results (all when count < 0); throws
/// MissingArtifactError when absent and FormatError when the key differs or
/// the cache is too short.
std::vector<AttackResult> load_attack_cache(const std::filesystem::path& path, const AttackSpec& spec,
                                            const std::string& dataset_key, std::int64_t count = -1);

}  // namespace diffender
