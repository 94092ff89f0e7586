#include "diffender/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "diffender/unet.hpp"

namespace diffender {

// ---------------------------------------------------------------- schedule

NoiseSchedule::NoiseSchedule(std::vector<double> betas, double t_star)
    : betas_(std::move(betas)), t_star_(t_star) {
  require(betas_.size() >= 2, "noise schedule needs at least 2 steps");
  require(t_star_ > 0.0 && t_star_ < 1.0, "t_star must lie in (0,1)");
  double prod = 1.0;
  for (double b : betas_) {
    require(b > 0.0 && b < 1.0, "beta must lie in (0,1)");
    prod *= 1.0 - b;
    alpha_bars_.push_back(prod);
  }
}

int NoiseSchedule::step_for_ratio(double ratio) const {
  require(ratio >= 0.0 && ratio <= 1.0, "noise ratio must lie in [0,1]");
  return static_cast<int>(std::lround(ratio * (steps() - 1)));
}

NoiseSchedule make_schedule(int steps, ScheduleKind kind, double t_star) {
  require(steps >= 2, "make_schedule: T must be >= 2");
  require(kind == ScheduleKind::linear, "make_schedule: unsupported schedule");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    betas[static_cast<std::size_t>(i)] = 1e-4 + (0.02 - 1e-4) * i / (steps - 1);
  }
  return NoiseSchedule(std::move(betas), t_star);
}

// ---------------------------------------------------------------- prompts

PromptEmbedding::PromptEmbedding(torch::Tensor t) : tokens(std::move(t)) {
  require(tokens.dim() == 2, "prompt tokens must be [n,d]");
  require(torch::isfinite(tokens).all().item<bool>(), "prompt tokens must be finite");
}

PromptEmbedding PromptEmbedding::empty(std::int64_t n, std::int64_t d) {
  return PromptEmbedding(torch::zeros({n, d}));
}

PromptEmbedding PromptEmbedding::appended(const torch::Tensor& rows) const {
  return PromptEmbedding(torch::cat({tokens, rows.reshape({-1, dim()}).to(tokens.dtype())}, 0));
}

torch::Tensor PromptEmbedding::batched(std::int64_t batch) const {
  return tokens.unsqueeze(0).expand({batch, count(), dim()});
}

// ---------------------------------------------------------------- model

std::vector<std::string> default_vocabulary(const std::vector<std::string>& class_names) {
  std::vector<std::string> v = {"a", "photo", "picture", "rendering", "of", "in", "the", "style"};
  v.insert(v.end(), class_names.begin(), class_names.end());
  v.push_back("with");
  v.push_back("sticker");
  return v;
}

DenoiserModel::DenoiserModel(const DenoiserConfig& config, Seed seed) : config_(config) {
  require(config_.base_channels >= 4 && config_.base_channels % 4 == 0, "base_channels must be a multiple of 4");
  require(config_.embed_dim >= 2, "embed_dim too small");
  require(!config_.vocabulary.empty(), "vocabulary must not be empty");
  for (std::size_t i = 0; i < config_.vocabulary.size(); ++i) {
    word_index_[config_.vocabulary[i]] = static_cast<std::int64_t>(i);
  }
  // Module initialisers draw from the global generator.
  torch::manual_seed(seed);
  net_ = std::make_shared<UNetImpl>(config_.base_channels, config_.embed_dim,
                                    static_cast<int>(config_.vocabulary.size()));
  {
    torch::NoGradGuard no_grad;
    net_->vocab->weight.normal_(0.0, 1.0);
  }
  net_->eval();
  // Inference-only by default; train_diffusion re-enables gradients.
  for (auto& p : net_->parameters()) {
    p.set_requires_grad(false);
  }
}

torch::Tensor DenoiserModel::predict_noise(const torch::Tensor& x_t, const torch::Tensor& t,
                                           const torch::Tensor& tokens) const {
  require(x_t.dim() == 4 && x_t.size(1) == 3, "denoiser expects [B,3,H,W]");
  require(tokens.dim() == 3 && tokens.size(0) == x_t.size(0), "tokens must be [B,L,d]");
  require(tokens.size(1) <= config_.max_tokens, "too many prompt tokens");
  return net_->forward(x_t, t, tokens);
}

torch::Tensor DenoiserModel::word(const std::string& w) const {
  auto it = word_index_.find(w);
  require(it != word_index_.end(), "unknown vocabulary word: " + w);
  return net_->vocab->weight[it->second].detach();
}

torch::Tensor DenoiserModel::caption(const std::vector<std::string>& words,
                                     const std::optional<torch::Tensor>& slot_vector) const {
  require(static_cast<int>(words.size()) <= config_.max_tokens, "caption longer than token capacity");
  std::vector<torch::Tensor> rows;
  for (const auto& w : words) {
    if (w.empty()) {
      require(slot_vector.has_value(), "caption has a slot but no slot vector");
      rows.push_back(slot_vector->reshape({config_.embed_dim}).to(torch::kFloat));
    } else {
      rows.push_back(word(w));
    }
  }
  const auto pad = config_.max_tokens - static_cast<std::int64_t>(words.size());
  if (pad > 0) {
    rows.push_back(torch::zeros({pad, config_.embed_dim}));
  }
  std::vector<torch::Tensor> shaped;
  for (auto& r : rows) {
    shaped.push_back(r.dim() == 1 ? r.unsqueeze(0) : r);
  }
  return torch::cat(shaped, 0);
}

torch::nn::Module& DenoiserModel::module() { return *net_; }
const torch::nn::Module& DenoiserModel::module() const { return *net_; }

double DenoiserModel::token_std() const {
  return net_->vocab->weight.detach().std().item<double>();
}

Checkpoint DenoiserModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.kind = CheckpointKind::diffusion;
  ckpt.metadata["base_channels"] = std::to_string(config_.base_channels);
  ckpt.metadata["embed_dim"] = std::to_string(config_.embed_dim);
  ckpt.metadata["max_tokens"] = std::to_string(config_.max_tokens);
  ckpt.metadata["image_size"] = std::to_string(config_.image_size);
  std::string vocab;
  for (const auto& w : config_.vocabulary) {
    vocab += (vocab.empty() ? "" : " ") + w;
  }
  ckpt.metadata["vocabulary"] = vocab;
  store_module(*net_, ckpt);
  return ckpt;
}

DenoiserModel DenoiserModel::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != CheckpointKind::diffusion) {
    throw FormatError("expected a diffusion checkpoint");
  }
  DenoiserConfig config;
  try {
    config.base_channels = std::stoi(ckpt.metadata.at("base_channels"));
    config.embed_dim = std::stoi(ckpt.metadata.at("embed_dim"));
    config.max_tokens = std::stoi(ckpt.metadata.at("max_tokens"));
    config.image_size = std::stoi(ckpt.metadata.at("image_size"));
    std::istringstream words(ckpt.metadata.at("vocabulary"));
    for (std::string w; words >> w;) {
      config.vocabulary.push_back(w);
    }
  } catch (const std::exception& e) {
    throw FormatError(std::string("diffusion checkpoint metadata: ") + e.what());
  }
  DenoiserModel model(config, 0);
  restore_module(*model.net_, ckpt);
  return model;
}

double DenoiserModel::checksum() const {
  double sum = 0.0;
  for (const auto& p : net_->parameters()) {
    auto d = p.detach().to(torch::kDouble);
    sum += d.sum().item<double>() + d.pow(2).sum().item<double>();
  }
  return sum;
}

// ---------------------------------------------------------------- sampling primitives

torch::Tensor forward_diffuse(const torch::Tensor& x0, int t, const torch::Tensor& noise,
                              const NoiseSchedule& sched) {
  require(t >= 0 && t < sched.steps(), "forward_diffuse: t out of range");
  require(x0.sizes() == noise.sizes(), "forward_diffuse: noise shape must match x0");
  const double ab = sched.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

torch::Tensor x0_from_noise(const torch::Tensor& x_t, int t, const torch::Tensor& eps,
                            const NoiseSchedule& sched) {
  require(t >= 0 && t < sched.steps(), "x0_from_noise: t out of range");
  const double ab = sched.alpha_bar(t);
  return ((x_t - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab)).clamp(-0.5, 1.5);
}

torch::Tensor predict_x0_one_step(const torch::Tensor& x_t, int t, const torch::Tensor& tokens,
                                  const NoisePredictor& model, const NoiseSchedule& sched) {
  require(t >= 0 && t < sched.steps(), "predict_x0_one_step: t out of range");
  auto batch = as_batch(x_t);
  const auto b = batch.size(0);
  auto toks = tokens.dim() == 2 ? tokens.unsqueeze(0).expand({b, tokens.size(0), tokens.size(1)}) : tokens;
  auto steps = torch::full({b}, t, torch::kLong);
  auto eps = model.predict_noise(batch, steps, toks).to(batch.dtype());
  auto x0 = x0_from_noise(batch, t, eps, sched);
  return x_t.dim() == 3 ? x0.squeeze(0) : x0;
}

std::vector<int> strided_timesteps(int from_t, int steps) {
  require(from_t >= 0, "strided_timesteps: negative start");
  require(steps >= 1, "strided_timesteps: steps must be >= 1");
  std::vector<int> out;
  if (steps > from_t) {
    for (int t = from_t; t >= 0; --t) {
      out.push_back(t);
    }
    return out;
  }
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    const int t = static_cast<int>(std::lround(from_t * (1.0 - frac)));
    if (out.empty() || t != out.back()) {
      out.push_back(t);
    }
  }
  return out;
}

torch::Tensor posterior_step(const torch::Tensor& x_t, const torch::Tensor& x0, int t, int s,
                             const NoiseSchedule& sched, const torch::Tensor& noise) {
  if (s < 0) {
    return x0;
  }
  require(s < t, "posterior_step: s must precede t");
  const double ab_t = sched.alpha_bar(t);
  const double ab_s = sched.alpha_bar(s);
  const double alpha_ts = ab_t / ab_s;
  const double beta_ts = 1.0 - alpha_ts;
  const double coef_x0 = std::sqrt(ab_s) * beta_ts / (1.0 - ab_t);
  const double coef_xt = std::sqrt(alpha_ts) * (1.0 - ab_s) / (1.0 - ab_t);
  const double var = beta_ts * (1.0 - ab_s) / (1.0 - ab_t);
  return coef_x0 * x0 + coef_xt * x_t + std::sqrt(var) * noise;
}

namespace {

/// Gaussian draws from one generator for the whole batch, or from one
/// generator per image so each image's result is independent of the batch.
class NoiseSource {
 public:
  explicit NoiseSource(std::vector<torch::Generator> gens) : gens_(std::move(gens)) {}

  torch::Tensor draw(at::IntArrayRef sizes) {
    if (gens_.size() == 1) {
      return torch::randn(sizes, gens_[0], torch::kFloat);
    }
    require(static_cast<std::int64_t>(gens_.size()) == sizes[0], "one generator per image");
    std::vector<torch::Tensor> parts;
    for (auto& g : gens_) {
      parts.push_back(torch::randn(sizes.slice(1), g, torch::kFloat));
    }
    return torch::stack(parts, 0);
  }

 private:
  std::vector<torch::Generator> gens_;
};

struct KnownRegion {
  torch::Tensor image;  // [B,3,H,W]
  torch::Tensor keep;   // bool [B,1,H,W], true where the original is known
  NoiseSource noise;
};

torch::Tensor reverse_loop(torch::Tensor x, const torch::Tensor& tokens, const std::vector<int>& ts,
                           const NoisePredictor& model, const NoiseSchedule& sched, NoiseSource& gen,
                           KnownRegion* known) {
  torch::NoGradGuard no_grad;
  const auto b = x.size(0);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int s = i + 1 < ts.size() ? ts[i + 1] : -1;
    if (known != nullptr) {
      auto noise = known->noise.draw(known->image.sizes());
      x = torch::where(known->keep, forward_diffuse(known->image, t, noise, sched), x);
    }
    auto eps = model.predict_noise(x, torch::full({b}, t, torch::kLong), tokens);
    auto x0 = x0_from_noise(x, t, eps, sched).clamp(0.0, 1.0);
    if (s >= 0) {
      x = posterior_step(x, x0, t, s, sched, gen.draw(x.sizes()));
    } else {
      x = x0;
    }
  }
  return x.clamp(0.0, 1.0);
}

// The schedule keeps alpha_bar[T-1] near 0.08, so the chain starts from the
// forward marginal of a mid-gray image rather than from pure noise.
torch::Tensor terminal_state(const torch::Tensor& noise, const NoiseSchedule& sched) {
  return forward_diffuse(torch::full_like(noise, 0.5), sched.steps() - 1, noise, sched);
}

torch::Tensor batch_tokens(const torch::Tensor& tokens, std::int64_t batch) {
  if (tokens.dim() == 2) {
    return tokens.unsqueeze(0).expand({batch, tokens.size(0), tokens.size(1)});
  }
  require(tokens.dim() == 3 && tokens.size(0) == batch, "tokens must be [n,d] or [B,n,d]");
  return tokens;
}

}  // namespace

torch::Tensor sample(const torch::Tensor& tokens, int steps, const NoisePredictor& model,
                     const NoiseSchedule& sched, Seed seed, std::int64_t channels, std::int64_t size) {
  require(steps >= 1, "sample: steps must be >= 1");
  const std::int64_t b = tokens.dim() == 3 ? tokens.size(0) : 1;
  NoiseSource gen({make_generator(seed)});
  auto x = terminal_state(gen.draw({b, 3, size, size}), sched);
  auto out = reverse_loop(x, batch_tokens(tokens, b), strided_timesteps(sched.steps() - 1, steps), model,
                          sched, gen, nullptr);
  out = project_from_model(out, channels);
  return tokens.dim() == 3 ? out : out.squeeze(0);
}

namespace {

torch::Tensor inpaint_impl(const torch::Tensor& x, const torch::Tensor& mask, const torch::Tensor& tokens,
                           int steps, const NoisePredictor& model, const NoiseSchedule& sched,
                           std::vector<torch::Generator> gens, std::vector<torch::Generator> known_gens) {
  require(steps >= 1, "inpaint: steps must be >= 1");
  auto batch = as_batch(x).to(torch::kFloat);
  auto masks = as_mask_batch(mask);
  require(batch.size(1) == 3, "inpaint expects 3-channel model-space images");
  require(masks.size(0) == batch.size(0) && masks.size(1) == batch.size(2) && masks.size(2) == batch.size(3),
          "inpaint: mask shape must match the image");
  auto region = (masks > 0.5).unsqueeze(1);  // [B,1,H,W], true = regenerate
  if (!region.any().item<bool>()) {
    return x.clone();
  }
  const auto b = batch.size(0);
  NoiseSource gen(std::move(gens));
  KnownRegion known{batch, region.logical_not(), NoiseSource(std::move(known_gens))};
  auto noise = terminal_state(gen.draw(batch.sizes()), sched);
  auto generated = reverse_loop(noise, batch_tokens(tokens, b), strided_timesteps(sched.steps() - 1, steps),
                                model, sched, gen, &known);
  auto out = torch::where(region, generated, batch);
  return x.dim() == 3 ? out.squeeze(0) : out;
}

}  // namespace

torch::Tensor inpaint(const torch::Tensor& x, const torch::Tensor& mask, const torch::Tensor& tokens,
                      int steps, const NoisePredictor& model, const NoiseSchedule& sched, Seed seed) {
  return inpaint_impl(x, mask, tokens, steps, model, sched, {make_generator(seed)},
                      {make_generator(derive_seed(seed, 7))});
}

torch::Tensor inpaint_seeded(const torch::Tensor& x, const torch::Tensor& mask, const torch::Tensor& tokens,
                             int steps, const NoisePredictor& model, const NoiseSchedule& sched,
                             const std::vector<Seed>& seeds) {
  require(x.dim() == 4 && static_cast<std::int64_t>(seeds.size()) == x.size(0), "inpaint: one seed per image");
  std::vector<torch::Generator> gens, known;
  for (auto s : seeds) {
    gens.push_back(make_generator(s));
    known.push_back(make_generator(derive_seed(s, 7)));
  }
  return inpaint_impl(x, mask, tokens, steps, model, sched, std::move(gens), std::move(known));
}

torch::Tensor reverse_from(const torch::Tensor& x_t, int from_t, const torch::Tensor& tokens, int steps,
                           const NoisePredictor& model, const NoiseSchedule& sched, const std::vector<Seed>& seeds) {
  require(x_t.dim() == 4 && x_t.size(1) == 3, "reverse_from expects [B,3,H,W]");
  require(from_t >= 0 && from_t < sched.steps(), "reverse_from: t out of range");
  require(static_cast<std::int64_t>(seeds.size()) == x_t.size(0), "reverse_from: one seed per image");
  std::vector<torch::Generator> gens;
  for (auto s : seeds) {
    gens.push_back(make_generator(s));
  }
  NoiseSource gen(std::move(gens));
  return reverse_loop(x_t.to(torch::kFloat), batch_tokens(tokens, x_t.size(0)), strided_timesteps(from_t, steps),
                      model, sched, gen, nullptr);
}

torch::Tensor lift_to_model(const torch::Tensor& batch) {
  auto b = as_batch(batch);
  if (b.size(1) == 3) {
    return b;
  }
  require(b.size(1) == 1, "expected 1 or 3 channels");
  return b.expand({b.size(0), 3, b.size(2), b.size(3)}).contiguous();
}

torch::Tensor project_from_model(const torch::Tensor& batch, std::int64_t channels) {
  if (channels == 3) {
    return batch;
  }
  require(channels == 1, "expected 1 or 3 channels");
  return batch.mean(1, /*keepdim=*/true);
}

// ---------------------------------------------------------------- training

namespace {

struct CaptionIds {
  torch::Tensor ids;   // [B,8]
  torch::Tensor keep;  // [B,8,1], 0 for dropped captions and unused suffix words
};

// "a <photo|picture|rendering> of a <class>", plus "with a sticker" for
// items carrying a pasted sticker.
CaptionIds caption_ids(const torch::Tensor& labels, const torch::Tensor& sticker, std::int64_t class_offset,
                       std::int64_t sticker_id, double dropout, torch::Generator& gen) {
  const auto b = labels.size(0);
  auto kinds = torch::randint(1, 4, {b}, gen, torch::kLong);
  auto a_id = torch::zeros({b}, torch::kLong);
  auto of_id = torch::full({b}, 4, torch::kLong);
  auto with_id = torch::full({b}, sticker_id - 1, torch::kLong);
  auto st_id = torch::full({b}, sticker_id, torch::kLong);
  auto keep = (torch::rand({b}, gen) >= dropout).to(torch::kFloat).view({b, 1, 1});
  auto suffix = sticker.to(torch::kFloat).view({b, 1, 1}).expand({b, 3, 1});
  auto words = torch::cat({torch::ones({b, 5, 1}), suffix}, 1);
  return {torch::stack({a_id, kinds, of_id, a_id, labels + class_offset, with_id, a_id, st_id}, 1), keep * words};
}

// Pastes a rectangle of per-pixel noise (uniform or binary) covering 2-8% of
// the image onto the flagged items.
torch::Tensor paste_stickers(const torch::Tensor& x0, const torch::Tensor& sticker, torch::Generator& gen) {
  auto out = x0.clone();
  const auto b = x0.size(0), c = x0.size(1), h = x0.size(2), w = x0.size(3);
  auto area = torch::rand({b}, gen) * 0.06 + 0.02;
  auto aspect = torch::rand({b}, gen) + 0.5;
  auto pos = torch::rand({b, 2}, gen);
  auto binary = torch::rand({b}, gen) < 0.5;
  auto tex = torch::rand({b, c, h, w}, gen);
  for (std::int64_t i = 0; i < b; ++i) {
    if (!sticker[i].item<bool>()) {
      continue;
    }
    const double a = area[i].item<double>() * static_cast<double>(h * w);
    const double r = aspect[i].item<double>();
    const auto ph = std::clamp<std::int64_t>(std::lround(std::sqrt(a / r)), 2, h);
    const auto pw = std::clamp<std::int64_t>(std::lround(std::sqrt(a * r)), 2, w);
    const auto top = static_cast<std::int64_t>(pos[i][0].item<double>() * static_cast<double>(h - ph + 1));
    const auto left = static_cast<std::int64_t>(pos[i][1].item<double>() * static_cast<double>(w - pw + 1));
    auto patch = tex[i].slice(1, 0, ph).slice(2, 0, pw);
    if (binary[i].item<bool>()) {
      patch = (patch > 0.5).to(torch::kFloat);
    }
    out[i].slice(1, top, top + ph).slice(2, left, left + pw).copy_(patch);
  }
  return out;
}

torch::Tensor embed_caption(UNetImpl& net, const CaptionIds& c, const DenoiserConfig& config) {
  const auto b = c.ids.size(0);
  auto emb = net.vocab->forward(c.ids) * c.keep;
  auto pad = torch::zeros({b, config.max_tokens - c.ids.size(1), config.embed_dim});
  return torch::cat({emb, pad}, 1);
}

torch::Tensor eps_loss(UNetImpl& net, const torch::Tensor& alpha_bars, const torch::Tensor& x0,
                       const torch::Tensor& tokens, const torch::Tensor& t, const torch::Tensor& noise) {
  auto ab = alpha_bars.index_select(0, t).view({-1, 1, 1, 1});
  auto x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * noise;
  return torch::mse_loss(net.forward(x_t, t, tokens), noise);
}

}  // namespace

TrainedDiffusion train_diffusion(const Dataset& dataset, const DiffusionTrainConfig& train,
                                 const DenoiserConfig& model_config, Seed seed) {
  require(!dataset.empty(), "train_diffusion: empty dataset");
  require(dataset.channels() == 3, "train_diffusion expects 3-channel images (lift grayscale first)");
  require(train.epochs >= 0 && train.batch_size >= 1, "train_diffusion: bad epochs/batch size");
  require(!train.class_names.empty(), "train_diffusion: class names required for captions");
  require(model_config.max_tokens >= 8, "train_diffusion: token capacity must fit captions");
  require(train.sticker_fraction >= 0.0 && train.sticker_fraction <= 1.0, "train_diffusion: bad sticker fraction");

  DenoiserConfig config = model_config;
  if (config.vocabulary.empty()) {
    config.vocabulary = default_vocabulary(train.class_names);
  }
  const std::int64_t class_offset = 8;
  const auto sticker_id = class_offset + static_cast<std::int64_t>(train.class_names.size()) + 1;
  require(static_cast<std::int64_t>(config.vocabulary.size()) > sticker_id && config.vocabulary[4] == "of" &&
              config.vocabulary[static_cast<std::size_t>(sticker_id)] == "sticker",
          "train_diffusion: vocabulary must follow default_vocabulary layout");

  TrainedDiffusion result{DenoiserModel(config, seed), 0.0, 0.0, {}};
  auto& net = static_cast<UNetImpl&>(result.model.module());
  const auto sched = make_schedule(250);
  const auto alpha_bars = torch::tensor(sched.alpha_bars(), torch::kDouble).to(torch::kFloat);
  auto gen = make_generator(derive_seed(seed, 1));
  const auto& images = dataset.images();
  auto labels = dataset.label_tensor();
  const auto n = static_cast<std::int64_t>(dataset.size());

  // Fixed evaluation batch for the recorded initial/final loss.
  auto eval_gen = make_generator(derive_seed(seed, 2));
  const std::int64_t eval_n = 64;
  auto eval_idx = torch::arange(eval_n, torch::kLong).remainder(n);
  auto eval_x = images.index_select(0, eval_idx);
  auto eval_caps = caption_ids(labels.index_select(0, eval_idx), torch::zeros({eval_n}, torch::kBool), class_offset,
                               sticker_id, 0.0, eval_gen);
  auto eval_t = torch::randint(0, sched.steps(), {eval_n}, eval_gen, torch::kLong);
  auto eval_noise = torch::randn(eval_x.sizes(), eval_gen, torch::kFloat);
  auto evaluate = [&]() {
    torch::NoGradGuard no_grad;
    return eps_loss(net, alpha_bars, eval_x, embed_caption(net, eval_caps, config), eval_t, eval_noise)
        .item<double>();
  };
  result.initial_loss = evaluate();

  for (auto& p : net.parameters()) {
    p.set_requires_grad(true);
  }
  net.train();
  torch::optim::Adam opt(net.parameters(), torch::optim::AdamOptions(train.learn_rate));
  const std::int64_t per_epoch = (n + train.batch_size - 1) / train.batch_size;
  const std::int64_t total = train.max_steps >= 0 ? std::min<std::int64_t>(train.max_steps, per_epoch * train.epochs)
                                                  : per_epoch * train.epochs;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < train.epochs && step < total; ++epoch) {
    auto perm = torch::randperm(n, gen, torch::kLong);
    double sum = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t start = 0; start < n && step < total; start += train.batch_size, ++step) {
      // cosine decay to 10% of the base rate
      const double progress = static_cast<double>(step) / static_cast<double>(std::max<std::int64_t>(1, total));
      const double lr = train.learn_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
      for (auto& group : opt.param_groups()) {
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
      }
      auto idx = perm.slice(0, start, std::min(n, start + train.batch_size));
      auto sticker = torch::rand({idx.size(0)}, gen) < train.sticker_fraction;
      auto x0 = paste_stickers(images.index_select(0, idx), sticker, gen);
      auto caps = caption_ids(labels.index_select(0, idx), sticker, class_offset, sticker_id, train.caption_dropout,
                              gen);
      auto t = torch::randint(0, sched.steps(), {idx.size(0)}, gen, torch::kLong);
      auto noise = torch::randn(x0.sizes(), gen, torch::kFloat);
      auto loss = eps_loss(net, alpha_bars, x0, embed_caption(net, caps, config), t, noise);
      sum += loss.item<double>();
      ++batches;
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
    result.epoch_losses.push_back(sum / static_cast<double>(std::max<std::int64_t>(1, batches)));
  }
  net.eval();
  for (auto& p : net.parameters()) {
    p.set_requires_grad(false);
    p.mutable_grad() = torch::Tensor();
  }
  result.final_loss = evaluate();
  return result;
}

}  // namespace diffender
