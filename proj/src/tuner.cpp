#include "diffender/tuner.hpp"

#include <fstream>

#include "diffender/losses.hpp"

namespace diffender {

// ---------------------------------------------------------------- prompts

torch::Tensor LearnablePrompts::localize_prompt() const {
  return idc ? torch::cat({v_l, idc->to(v_l.dtype()).reshape({1, dim()})}, 0) : v_l;
}

torch::Tensor LearnablePrompts::restore_prompt() const {
  return idc ? torch::cat({v_r, idc->to(v_r.dtype()).reshape({1, dim()})}, 0) : v_r;
}

LearnablePrompts LearnablePrompts::zeros(std::int64_t n, std::int64_t d) {
  require(n >= 1 && d >= 1, "prompts need n, d >= 1");
  return {torch::zeros({n, d}), torch::zeros({n, d}), std::nullopt};
}

LearnablePrompts LearnablePrompts::random(std::int64_t n, std::int64_t d, double stddev, Seed seed) {
  require(n >= 1 && d >= 1, "prompts need n, d >= 1");
  auto gen = make_generator(seed);
  auto l = torch::randn({n, d}, gen, torch::kFloat) * stddev;
  auto r = torch::randn({n, d}, gen, torch::kFloat) * stddev;
  return {l, r, std::nullopt};
}

Checkpoint LearnablePrompts::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.kind = CheckpointKind::prompts;
  ckpt.arrays["v_l"] = v_l.detach().to(torch::kFloat).contiguous();
  ckpt.arrays["v_r"] = v_r.detach().to(torch::kFloat).contiguous();
  if (idc) {
    ckpt.arrays["idc"] = idc->detach().to(torch::kFloat).reshape({1, dim()}).contiguous();
  }
  ckpt.metadata["n"] = std::to_string(count());
  ckpt.metadata["d"] = std::to_string(dim());
  return ckpt;
}

LearnablePrompts LearnablePrompts::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != CheckpointKind::prompts) {
    throw FormatError("expected a prompts checkpoint");
  }
  auto find = [&](const char* name) {
    auto it = ckpt.arrays.find(name);
    if (it == ckpt.arrays.end()) {
      throw FormatError(std::string("prompts checkpoint lacks ") + name);
    }
    return it->second;
  };
  LearnablePrompts p{find("v_l"), find("v_r"), std::nullopt};
  if (ckpt.arrays.count("idc") != 0) {
    p.idc = ckpt.arrays.at("idc");
  }
  if (p.v_l.dim() != 2 || p.v_l.sizes() != p.v_r.sizes()) {
    throw FormatError("prompts checkpoint: v_l and v_r must be matching [n,d]");
  }
  return p;
}

void TuneConfig::validate() const {
  require(shots >= 1, "tune: shots must be >= 1");
  require(steps >= 0, "tune: steps must be >= 0");
  require(learn_rate > 0.0, "tune: learn_rate must be positive");
  require(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0 && delta >= 0.0, "tune: loss weights must be >= 0");
  require(k >= 3 && k % 2 == 1, "tune: k must be odd and >= 3");
  require(unroll_steps >= 1, "tune: unroll_steps must be >= 1");
}

// ---------------------------------------------------------------- objective

torch::Tensor soft_inpaint(const torch::Tensor& images, const torch::Tensor& soft_mask, const torch::Tensor& prompt,
                           int steps, const NoisePredictor& model, const NoiseSchedule& sched, Seed seed) {
  require(images.dim() == 4 && soft_mask.dim() == 3 && soft_mask.size(0) == images.size(0),
          "soft_inpaint: images [B,C,H,W] with masks [B,H,W]");
  const auto b = images.size(0);
  auto x0 = lift_to_model(images.to(torch::kFloat));
  auto m = soft_mask.to(torch::kFloat).unsqueeze(1);
  auto gen = make_generator(seed);
  auto known_gen = make_generator(derive_seed(seed, 7));
  auto tokens = prompt.dim() == 2 ? prompt.unsqueeze(0).expand({b, prompt.size(0), prompt.size(1)}) : prompt;
  auto x = torch::randn(x0.sizes(), gen, torch::kFloat);
  auto ts = strided_timesteps(sched.steps() - 1, steps);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int s = i + 1 < ts.size() ? ts[i + 1] : -1;
    auto known = forward_diffuse(x0, t, torch::randn(x0.sizes(), known_gen, torch::kFloat), sched);
    x = m * x + (1.0 - m) * known;
    auto eps = model.predict_noise(x, torch::full({b}, t, torch::kLong), tokens);
    auto x0_hat = x0_from_noise(x, t, eps, sched).clamp(0.0, 1.0);
    x = s >= 0 ? posterior_step(x, x0_hat, t, s, sched, torch::randn(x.sizes(), gen, torch::kFloat)) : x0_hat;
  }
  auto out = m * x.clamp(0.0, 1.0) + (1.0 - m) * x0;
  return project_from_model(out, images.size(1));
}

LossTerms prompt_tuning_loss(const std::vector<FewShotItem>& items, const LearnablePrompts& prompts,
                             const TuneConfig& cfg, const LocalizerConfig& loc_cfg, const NoisePredictor& model,
                             const NoiseSchedule& sched, const Classifier& clf, Seed seed) {
  require(!items.empty(), "prompt tuning needs at least one item");
  std::vector<torch::Tensor> clean, adv, gt;
  std::vector<Seed> seeds;
  for (std::size_t i = 0; i < items.size(); ++i) {
    clean.push_back(items[i].x_clean.to(torch::kFloat));
    adv.push_back(items[i].x_adv.to(torch::kFloat));
    gt.push_back(items[i].gt_mask.to(torch::kFloat));
    seeds.push_back(derive_seed(seed, 10 + i));
  }
  auto xc = torch::stack(clean, 0);
  auto xa = torch::stack(adv, 0);
  auto m = torch::stack(gt, 0);

  auto norm = normalize_diff_values(
      aap_difference_values(xa, prompts.localize_prompt(), loc_cfg, model, sched, seeds), loc_cfg.diff_floor);
  auto soft = binarize(norm, loc_cfg.theta, BinarizeMode::soft, loc_cfg.soft_tau);
  LossTerms terms;
  terms.ce = loss_ce(m, soft);
  auto region = refine_mask_soft(soft, loc_cfg);
  auto x_r = soft_inpaint(xa, region, prompts.restore_prompt(), cfg.unroll_steps, model, sched, derive_seed(seed, 3));
  terms.l1 = loss_l1(x_r, xc);
  terms.perceptual = perceptual_distance(x_r, xc, clf);
  terms.total = cfg.ce_weight * terms.ce + terms.l1 + terms.perceptual;
  if (cfg.infrared) {
    terms.tnc = loss_tnc(xc, x_r, cfg.alpha, cfg.beta, cfg.k);
    terms.ie = loss_ie(xc, x_r, cfg.gamma, cfg.delta);
    terms.total = terms.total + terms.tnc + terms.ie;
  } else {
    terms.tnc = torch::zeros({});
    terms.ie = torch::zeros({});
  }
  return terms;
}

TuneResult tune_prompts(const std::vector<FewShotItem>& fewshot, const LearnablePrompts& prompts,
                        const TuneConfig& cfg, const LocalizerConfig& loc_cfg, const NoisePredictor& model,
                        const NoiseSchedule& sched, const Classifier& clf) {
  cfg.validate();
  loc_cfg.validate();
  require(!fewshot.empty(), "tune_prompts: empty few-shot set");
  require(static_cast<int>(fewshot.size()) == cfg.shots, "tune_prompts: few-shot size must equal shots");
  const Seed eval_seed = derive_seed(cfg.seed, 0xE7A1);
  auto eval = [&](const LearnablePrompts& p) {
    torch::NoGradGuard no_grad;
    return prompt_tuning_loss(fewshot, p, cfg, loc_cfg, model, sched, clf, eval_seed).total.item<double>();
  };

  TuneResult result;
  result.prompts = {prompts.v_l.detach().clone(), prompts.v_r.detach().clone(), prompts.idc};
  result.initial_loss = eval(result.prompts);
  if (cfg.steps == 0) {
    result.final_loss = result.initial_loss;
    return result;
  }
  auto v_l = result.prompts.v_l.to(torch::kFloat).requires_grad_(true);
  auto v_r = result.prompts.v_r.to(torch::kFloat).requires_grad_(true);
  std::optional<torch::Tensor> idc;
  if (prompts.idc) {
    idc = prompts.idc->detach();
  }
  torch::optim::Adam opt({v_l, v_r}, torch::optim::AdamOptions(cfg.learn_rate));
  for (int step = 0; step < cfg.steps; ++step) {
    LearnablePrompts cur{v_l, v_r, idc};
    auto terms = prompt_tuning_loss(fewshot, cur, cfg, loc_cfg, model, sched, clf,
                                    derive_seed(cfg.seed, static_cast<std::uint64_t>(step + 1)));
    opt.zero_grad();
    terms.total.backward();
    opt.step();
    result.trajectory.push_back(terms.total.item<double>());
  }
  result.prompts = {v_l.detach().clone(), v_r.detach().clone(), idc};
  result.final_loss = eval(result.prompts);
  return result;
}

// ---------------------------------------------------------------- domain token

std::vector<std::vector<std::string>> default_idc_templates() {
  return {{"a", "rendering", "in", "the", "style", "of", ""},
          {"a", "picture", "in", "the", "style", "of", ""},
          {"a", "photo", "in", "the", "style", "of", ""}};
}

namespace {

torch::Tensor idc_loss(const DenoiserModel& model, const NoiseSchedule& sched, const torch::Tensor& x0,
                       const std::vector<std::vector<std::string>>& templates, const std::vector<std::int64_t>& which,
                       const torch::Tensor& v, const torch::Tensor& t, const torch::Tensor& noise) {
  auto ab = torch::tensor(sched.alpha_bars(), torch::kDouble).to(torch::kFloat).index_select(0, t).view({-1, 1, 1, 1});
  auto x_t = ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise;
  std::vector<torch::Tensor> toks;
  for (auto j : which) {
    toks.push_back(model.caption(templates[static_cast<std::size_t>(j)], v));
  }
  auto eps = model.predict_noise(x_t, t, torch::stack(toks, 0));
  return (eps - noise).pow(2).mean();
}

}  // namespace

IdcResult learn_idc_token(const std::vector<torch::Tensor>& images,
                          const std::vector<std::vector<std::string>>& templates, const DenoiserModel& model,
                          const NoiseSchedule& sched, int steps, Seed seed, double learn_rate) {
  require(!images.empty(), "learn_idc_token: no images");
  require(!templates.empty(), "learn_idc_token: no templates");
  require(steps >= 0, "learn_idc_token: steps must be >= 0");
  for (const auto& tpl : templates) {
    require(std::count(tpl.begin(), tpl.end(), std::string()) == 1, "each template needs exactly one slot");
  }
  std::vector<torch::Tensor> lifted;
  for (const auto& im : images) {
    lifted.push_back(lift_to_model(im.to(torch::kFloat)).squeeze(0));
  }
  auto x0 = torch::stack(lifted, 0);
  const auto n = x0.size(0);
  const auto n_tpl = static_cast<std::int64_t>(templates.size());

  auto gen = make_generator(seed);
  auto v = (torch::randn({model.embed_dim()}, gen, torch::kFloat) * model.token_std());

  // Fixed evaluation draws: every image under every template.
  auto eval_gen = make_generator(derive_seed(seed, 1));
  std::vector<std::int64_t> eval_which;
  for (std::int64_t j = 0; j < n_tpl; ++j) {
    for (std::int64_t i = 0; i < n; ++i) {
      eval_which.push_back(j);
    }
  }
  auto eval_x0 = x0.repeat({n_tpl, 1, 1, 1});
  auto eval_t = torch::randint(sched.steps(), {n * n_tpl}, eval_gen, torch::kLong);
  auto eval_noise = torch::randn(eval_x0.sizes(), eval_gen, torch::kFloat);
  auto eval = [&](const torch::Tensor& token) {
    torch::NoGradGuard no_grad;
    return idc_loss(model, sched, eval_x0, templates, eval_which, token, eval_t, eval_noise).item<double>();
  };

  IdcResult result;
  result.initial_loss = eval(v);
  v.requires_grad_(true);
  torch::optim::Adam opt({v}, torch::optim::AdamOptions(learn_rate));
  auto train_gen = make_generator(derive_seed(seed, 2));
  for (int step = 0; step < steps; ++step) {
    auto t = torch::randint(sched.steps(), {n}, train_gen, torch::kLong);
    auto noise = torch::randn(x0.sizes(), train_gen, torch::kFloat);
    auto pick = torch::randint(n_tpl, {n}, train_gen, torch::kLong);
    std::vector<std::int64_t> which(pick.data_ptr<std::int64_t>(), pick.data_ptr<std::int64_t>() + n);
    auto loss = idc_loss(model, sched, x0, templates, which, v, t, noise);
    opt.zero_grad();
    loss.backward();
    opt.step();
    result.trajectory.push_back(loss.item<double>());
  }
  result.token = v.detach().reshape({1, model.embed_dim()}).clone();
  result.final_loss = eval(result.token);
  return result;
}

Checkpoint idc_to_checkpoint(const torch::Tensor& token) {
  require(token.dim() == 2 && token.size(0) == 1, "domain token must be [1,d]");
  Checkpoint ckpt;
  ckpt.kind = CheckpointKind::idc_token;
  ckpt.arrays["token"] = token.detach().to(torch::kFloat).contiguous();
  return ckpt;
}

torch::Tensor idc_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != CheckpointKind::idc_token || ckpt.arrays.count("token") == 0) {
    throw FormatError("expected an idc_token checkpoint");
  }
  return ckpt.arrays.at("token");
}

void write_trajectory_csv(const std::vector<double>& trajectory, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, trajectory[i]);
    out << buf;
  }
}

}  // namespace diffender
