#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "diffender/checkpoint.hpp"
#include "diffender/common.hpp"
#include "diffender/data_io.hpp"

namespace diffender {

enum class ScheduleKind { linear };

/// Discrete-time noise schedule: beta[t] and alpha_bar[t] = prod_{s<=t}(1 - beta[s]).
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> betas, double t_star);

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(static_cast<std::size_t>(t)); }
  double alpha_bar(int t) const { return alpha_bars_.at(static_cast<std::size_t>(t)); }
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  /// Default noise ratio in (0,1).
  double t_star() const { return t_star_; }
  /// round(ratio * (T - 1)).
  int step_for_ratio(double ratio) const;

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
  double t_star_;
};

/// Linear beta from 1e-4 to 0.02 over T >= 2 steps.
NoiseSchedule make_schedule(int steps, ScheduleKind kind = ScheduleKind::linear, double t_star = 0.5);

/// A token matrix [n,d] in the model's word-embedding space.
struct PromptEmbedding {
  torch::Tensor tokens;

  PromptEmbedding() = default;
  explicit PromptEmbedding(torch::Tensor t);

  std::int64_t count() const { return tokens.size(0); }
  std::int64_t dim() const { return tokens.size(1); }

  /// The empty prompt: n zero tokens.
  static PromptEmbedding empty(std::int64_t n, std::int64_t d);
  /// This prompt followed by extra rows (for example a frozen domain token).
  PromptEmbedding appended(const torch::Tensor& rows) const;
  /// [B,n,d] view repeated over a batch.
  torch::Tensor batched(std::int64_t batch) const;
};

/// The conditional noise predictor eps_theta(x_t, t, c(tokens)).
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  /// x_t: [B,3,H,W]; t: [B] int64; tokens: [B,L,d]. Differentiable in x_t and tokens.
  virtual torch::Tensor predict_noise(const torch::Tensor& x_t, const torch::Tensor& t,
                                      const torch::Tensor& tokens) const = 0;
  virtual std::int64_t embed_dim() const = 0;
};

struct DenoiserConfig {
  int base_channels = 16;
  int embed_dim = 128;
  int max_tokens = 17;
  int image_size = 32;
  std::vector<std::string> vocabulary;
};

class UNetImpl;

/// Small U-Net with cross-attention to encoded prompt tokens, plus a word
/// embedding table used for training captions and template prompts.
class DenoiserModel final : public NoisePredictor {
 public:
  DenoiserModel(const DenoiserConfig& config, Seed seed);

  torch::Tensor predict_noise(const torch::Tensor& x_t, const torch::Tensor& t,
                              const torch::Tensor& tokens) const override;
  std::int64_t embed_dim() const override { return config_.embed_dim; }

  const DenoiserConfig& config() const { return config_; }

  /// Embedding row of a vocabulary word; throws ContractError if unknown.
  torch::Tensor word(const std::string& w) const;
  /// Caption tokens: one embedding row per word, zero-padded to max_tokens.
  /// A slot (empty string) is filled with `slot_vector` when provided.
  torch::Tensor caption(const std::vector<std::string>& words,
                        const std::optional<torch::Tensor>& slot_vector = std::nullopt) const;

  torch::nn::Module& module();
  const torch::nn::Module& module() const;
  /// Embedding std of the vocabulary, used to size random prompt inits.
  double token_std() const;

  Checkpoint to_checkpoint() const;
  static DenoiserModel from_checkpoint(const Checkpoint& ckpt);

  /// Sum of all parameters in double precision (frozen-weight checks).
  double checksum() const;

 private:
  DenoiserConfig config_;
  std::shared_ptr<UNetImpl> net_;
  std::map<std::string, std::int64_t> word_index_;
};

/// sqrt(ab[t]) x0 + sqrt(1 - ab[t]) noise.
torch::Tensor forward_diffuse(const torch::Tensor& x0, int t, const torch::Tensor& noise,
                              const NoiseSchedule& sched);

/// (x_t - sqrt(1-ab[t]) eps) / sqrt(ab[t]) for a known noise estimate, clipped to [-0.5, 1.5].
torch::Tensor x0_from_noise(const torch::Tensor& x_t, int t, const torch::Tensor& eps,
                            const NoiseSchedule& sched);

/// One-step x0 estimate; x_t may be an image or a batch, tokens [n,d] or [B,n,d].
torch::Tensor predict_x0_one_step(const torch::Tensor& x_t, int t, const torch::Tensor& tokens,
                                  const NoisePredictor& model, const NoiseSchedule& sched);

/// Evenly spaced descending timesteps from `from_t` to 0, `steps` entries
/// (all of them when steps > from_t).
std::vector<int> strided_timesteps(int from_t, int steps);

/// One reverse step t -> s given the clipped x0 estimate. s < 0 returns x0.
torch::Tensor posterior_step(const torch::Tensor& x_t, const torch::Tensor& x0, int t, int s,
                             const NoiseSchedule& sched, const torch::Tensor& noise);

/// Ancestral sampling over `steps` strided timesteps, starting from mid-gray
/// diffused to step T-1.
/// The first draw from the seed's generator is the starting noise.
/// tokens: [n,d] for one sample, [B,n,d] for a batch. Output clipped to [0,1].
torch::Tensor sample(const torch::Tensor& tokens, int steps, const NoisePredictor& model,
                     const NoiseSchedule& sched, Seed seed, std::int64_t channels = 3,
                     std::int64_t size = 32);

/// Masked resampling: at every step the known region (mask = 0) is replaced
/// by the original noised to the current level; the result is composited so
/// pixels outside the mask equal `x` exactly. x: [3,H,W] or [B,3,H,W];
/// mask: hard [H,W] or [B,H,W].
torch::Tensor inpaint(const torch::Tensor& x, const torch::Tensor& mask, const torch::Tensor& tokens,
                      int steps, const NoisePredictor& model, const NoiseSchedule& sched, Seed seed);

/// Batched inpaint with one seed per image; image i matches
/// inpaint(x[i], mask[i], ..., seeds[i]).
torch::Tensor inpaint_seeded(const torch::Tensor& x, const torch::Tensor& mask, const torch::Tensor& tokens,
                             int steps, const NoisePredictor& model, const NoiseSchedule& sched,
                             const std::vector<Seed>& seeds);

/// Ancestral reverse chain from x_t at step `from_t` down to 0 over `steps`
/// strided timesteps, one seed per image. Output clipped to [0,1].
torch::Tensor reverse_from(const torch::Tensor& x_t, int from_t, const torch::Tensor& tokens, int steps,
                           const NoisePredictor& model, const NoiseSchedule& sched, const std::vector<Seed>& seeds);

/// Replicate grayscale to the model's 3 channels; RGB passes through.
torch::Tensor lift_to_model(const torch::Tensor& batch);
/// Back to `channels` (mean over RGB for grayscale).
torch::Tensor project_from_model(const torch::Tensor& batch, std::int64_t channels);

struct DiffusionTrainConfig {
  int epochs = 12;
  int batch_size = 64;
  double learn_rate = 2e-3;
  double caption_dropout = 0.2;   ///< fraction of items trained with the empty prompt
  double sticker_fraction = 0.0;  ///< items given a random-noise sticker and a "with a sticker" caption
  int max_steps = -1;             ///< optional cap on optimizer steps (< 0: none)
  std::vector<std::string> class_names;
};

struct TrainedDiffusion {
  DenoiserModel model;
  double initial_loss = 0.0;  ///< loss on a fixed held batch before training
  double final_loss = 0.0;    ///< same batch, after training
  std::vector<double> epoch_losses;  ///< mean training loss per epoch
};

/// Standard eps-prediction MSE training. Items are captioned
/// "a {photo|picture|rendering} of a <class>" from their labels.
TrainedDiffusion train_diffusion(const Dataset& dataset, const DiffusionTrainConfig& train,
                                 const DenoiserConfig& model_config, Seed seed);

/// Vocabulary covering caption words, template words and the given classes.
std::vector<std::string> default_vocabulary(const std::vector<std::string>& class_names);

}  // namespace diffender
