#pragma once

#include <optional>
#include <string>
#include <vector>

#include "diffender/checkpoint.hpp"
#include "diffender/classifier.hpp"
#include "diffender/localizer.hpp"
#include "diffender/restorer.hpp"

namespace diffender {

/// Localization and restoration prompts, each [n,d], plus an optional frozen
/// domain token [1,d] appended to both.
struct LearnablePrompts {
  torch::Tensor v_l;
  torch::Tensor v_r;
  std::optional<torch::Tensor> idc;

  std::int64_t count() const { return v_l.size(0); }
  std::int64_t dim() const { return v_l.size(1); }

  torch::Tensor localize_prompt() const;
  torch::Tensor restore_prompt() const;
  DefensePrompts defense_prompts() const { return {localize_prompt(), restore_prompt()}; }

  /// All-zero prompts (the empty prompt).
  static LearnablePrompts zeros(std::int64_t n, std::int64_t d);
  /// Gaussian entries with the given std; deterministic in the seed.
  static LearnablePrompts random(std::int64_t n, std::int64_t d, double stddev, Seed seed);

  Checkpoint to_checkpoint() const;
  static LearnablePrompts from_checkpoint(const Checkpoint& ckpt);
};

struct TuneConfig {
  int shots = 8;
  int steps = 200;
  double learn_rate = 1e-2;
  double alpha = 0.4;
  double beta = 0.6;
  double gamma = 0.7;
  double delta = 0.3;
  int k = 3;                 ///< uniformity window
  bool infrared = false;     ///< add the TNC and IE terms
  Seed seed = 0;
  int unroll_steps = 5;      ///< truncated restoration unroll
  double ce_weight = 1.0;

  void validate() const;
};

struct FewShotItem {
  torch::Tensor x_clean;  ///< [C,H,W]
  torch::Tensor x_adv;    ///< [C,H,W]
  torch::Tensor gt_mask;  ///< [H,W]
};

struct LossTerms {
  torch::Tensor ce, l1, perceptual, tnc, ie, total;
};

/// The tuning objective on a set of items. Differentiable in the prompts.
/// Noise draws come from `seed`, so a fixed seed gives a fixed objective.
LossTerms prompt_tuning_loss(const std::vector<FewShotItem>& items, const LearnablePrompts& prompts,
                             const TuneConfig& cfg, const LocalizerConfig& loc_cfg, const NoisePredictor& model,
                             const NoiseSchedule& sched, const Classifier& clf, Seed seed);

/// Differentiable masked resampling with a soft mask over `steps` strided
/// timesteps; used inside the tuning objective.
torch::Tensor soft_inpaint(const torch::Tensor& images, const torch::Tensor& soft_mask, const torch::Tensor& prompt,
                           int steps, const NoisePredictor& model, const NoiseSchedule& sched, Seed seed);

struct TuneResult {
  LearnablePrompts prompts;
  std::vector<double> trajectory;  ///< training objective per step
  double initial_loss = 0.0;       ///< objective at the evaluation seed before tuning
  double final_loss = 0.0;         ///< same seed, after tuning
};

/// Adam over v_l and v_r only; the model, classifier and domain token stay fixed.
TuneResult tune_prompts(const std::vector<FewShotItem>& fewshot, const LearnablePrompts& prompts,
                        const TuneConfig& cfg, const LocalizerConfig& loc_cfg, const NoisePredictor& model,
                        const NoiseSchedule& sched, const Classifier& clf);

/// Word sequences with one empty-string slot for the learned token.
std::vector<std::vector<std::string>> default_idc_templates();

struct IdcResult {
  torch::Tensor token;  ///< [1,d]
  std::vector<double> trajectory;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Textual inversion: fit the slot vector of `templates` to `images` under the
/// frozen denoiser's noise-prediction objective.
IdcResult learn_idc_token(const std::vector<torch::Tensor>& images,
                          const std::vector<std::vector<std::string>>& templates, const DenoiserModel& model,
                          const NoiseSchedule& sched, int steps, Seed seed, double learn_rate = 5e-3);

/// Token checkpoints (kind idc_token).
Checkpoint idc_to_checkpoint(const torch::Tensor& token);
torch::Tensor idc_from_checkpoint(const Checkpoint& ckpt);

/// Loss trajectory as "step,loss" CSV.
void write_trajectory_csv(const std::vector<double>& trajectory, const std::filesystem::path& path);

}  // namespace diffender
