#include "diffender/attacker.hpp"

#include <cmath>
#include <cstdio>
#include <random>

#include "diffender/checkpoint.hpp"

namespace diffender {

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::advp:
      return "advp";
    case AttackKind::lavan:
      return "lavan";
    case AttackKind::ir_cold:
      return "ir_cold";
    case AttackKind::bpda_advp:
      return "bpda_advp";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& name) {
  for (auto k : {AttackKind::advp, AttackKind::lavan, AttackKind::ir_cold, AttackKind::bpda_advp}) {
    if (to_string(k) == name) {
      return k;
    }
  }
  throw ConfigError("unknown attack kind: " + name);
}

std::string to_string(LocationPolicy policy) {
  return policy == LocationPolicy::random_fixed ? "random_fixed" : "random_per_restart";
}

LocationPolicy location_policy_from_string(const std::string& name) {
  if (name == "random_fixed") {
    return LocationPolicy::random_fixed;
  }
  if (name == "random_per_restart") {
    return LocationPolicy::random_per_restart;
  }
  throw ConfigError("unknown location policy: " + name);
}

void AttackSpec::validate() const {
  require(patch_fraction > 0.0 && patch_fraction <= 0.25, "attack: patch_fraction must lie in (0, 0.25]");
  require(iterations >= 1, "attack: iterations must be >= 1");
  require(step_size >= 0.0, "attack: step_size must be >= 0");
  require(restarts >= 1, "attack: restarts must be >= 1");
  require(surrogate_steps >= 1, "attack: surrogate_steps must be >= 1");
}

std::string AttackSpec::hash() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "kind=%s;frac=%.17g;iters=%d;step=%.17g;loc=%s;restarts=%d;seed=%llu;surr=%d",
                to_string(kind).c_str(), patch_fraction, iterations, step_size, to_string(location_policy).c_str(),
                restarts, static_cast<unsigned long long>(seed), surrogate_steps);
  return hex64(fnv1a(buf));
}

std::pair<std::int64_t, std::int64_t> patch_shape(double fraction, std::int64_t height, std::int64_t width,
                                                  double aspect) {
  require(fraction > 0.0 && fraction <= 1.0, "patch fraction must lie in (0,1]");
  require(aspect > 0.0, "patch aspect must be positive");
  const double area = fraction * static_cast<double>(height * width);
  auto h = std::max<std::int64_t>(1, std::llround(std::sqrt(area * aspect)));
  h = std::min(h, height);
  auto w = std::max<std::int64_t>(1, std::llround(area / static_cast<double>(h)));
  w = std::min(w, width);
  return {h, w};
}

namespace {

constexpr std::int64_t kChunk = 64;

struct Placement {
  std::int64_t y, x, h, w;
};

Placement random_placement(std::mt19937_64& rng, std::int64_t height, std::int64_t width, std::int64_t h,
                           std::int64_t w) {
  std::uniform_int_distribution<std::int64_t> dy(0, height - h), dx(0, width - w);
  const auto y = dy(rng);
  const auto x = dx(rng);
  return {y, x, h, w};
}

torch::Tensor placement_mask(const Placement& p, std::int64_t height, std::int64_t width) {
  auto m = torch::zeros({height, width});
  m.slice(0, p.y, p.y + p.h).slice(1, p.x, p.x + p.w).fill_(1.0);
  return m;
}

/// True logit minus the best other logit, per row.
torch::Tensor true_margin(const torch::Tensor& logits, const torch::Tensor& labels) {
  auto true_logit = logits.gather(1, labels.unsqueeze(1)).squeeze(1);
  auto others = logits.scatter(1, labels.unsqueeze(1), -std::numeric_limits<float>::infinity());
  return true_logit - std::get<0>(others.max(1));
}

/// Evaluate the real pipeline: per-image margin (negative = fooled).
torch::Tensor evaluate_margin(const torch::Tensor& x_adv, const torch::Tensor& labels, const Classifier& clf,
                              const Defense* defense, const std::vector<Seed>& seeds) {
  torch::NoGradGuard no_grad;
  auto input = defense != nullptr ? defense->apply(x_adv, seeds) : x_adv;
  return true_margin(clf.logits(input), labels);
}

std::vector<AttackResult> gradient_attack_chunk(const torch::Tensor& images, const torch::Tensor& labels,
                                                const Classifier& clf, const AttackSpec& spec, const Defense* defense,
                                                std::int64_t first_index) {
  const auto b = images.size(0), height = images.size(2), width = images.size(3);
  const auto [ph, pw] = patch_shape(spec.patch_fraction, height, width);
  std::vector<std::mt19937_64> rngs;
  std::vector<Seed> eval_seeds;
  for (std::int64_t i = 0; i < b; ++i) {
    const Seed s = derive_seed(spec.seed, static_cast<std::uint64_t>(first_index + i));
    rngs.emplace_back(s);
    eval_seeds.push_back(derive_seed(s, 1));
  }
  std::vector<AttackResult> best(static_cast<std::size_t>(b));
  auto best_margin = torch::full({b}, std::numeric_limits<float>::infinity());
  std::vector<Placement> places(static_cast<std::size_t>(b));
  const bool margin_loss = spec.kind == AttackKind::lavan;

  for (int r = 0; r < spec.restarts; ++r) {
    std::vector<torch::Tensor> masks;
    for (std::int64_t i = 0; i < b; ++i) {
      auto& p = places[static_cast<std::size_t>(i)];
      if (r == 0 || spec.location_policy == LocationPolicy::random_per_restart) {
        p = random_placement(rngs[static_cast<std::size_t>(i)], height, width, ph, pw);
      }
      masks.push_back(placement_mask(p, height, width));
    }
    auto mask = torch::stack(masks, 0);
    auto region = (mask > 0.5).unsqueeze(1);
    auto patch = images.clone();
    for (int it = 0; it < spec.iterations; ++it) {
      auto p = patch.detach().requires_grad_(true);
      auto x_adv = torch::where(region, p, images);
      torch::Tensor input = x_adv;
      if (defense != nullptr) {
        std::vector<Seed> seeds;
        for (std::int64_t i = 0; i < b; ++i) {
          seeds.push_back(derive_seed(eval_seeds[static_cast<std::size_t>(i)],
                                      static_cast<std::uint64_t>(2 + it + r * spec.iterations)));
        }
        input = defense->surrogate(x_adv, seeds, spec.surrogate_steps);
      }
      auto logits = clf.logits(input);
      auto loss = margin_loss ? (-true_margin(logits, labels)).sum()
                              : torch::nn::functional::cross_entropy(
                                    logits, labels,
                                    torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kSum));
      auto grad = torch::autograd::grad({loss}, {p})[0];
      torch::NoGradGuard no_grad;
      patch = (p.detach() + spec.step_size * grad.sign()).clamp(0.0, 1.0);
    }
    auto x_adv = torch::where(region, patch, images);
    auto margin = evaluate_margin(x_adv, labels, clf, defense, eval_seeds);
    for (std::int64_t i = 0; i < b; ++i) {
      auto& res = best[static_cast<std::size_t>(i)];
      res.queries += spec.iterations + 1;
      const float m = margin[i].item<float>();
      if (r == 0 || (!res.success && m < best_margin[i].item<float>())) {
        res.x_adv = x_adv[i].clone();
        res.gt_mask = mask[i].clone();
        res.success = m < 0.0F;
        best_margin[i] = m;
      }
    }
  }
  return best;
}

std::vector<AttackResult> cold_patch_chunk(const torch::Tensor& images, const torch::Tensor& labels,
                                           const Classifier& clf, const AttackSpec& spec, std::int64_t first_index) {
  torch::NoGradGuard no_grad;
  require(images.size(1) == 1, "ir_cold_patch_attack expects 1-channel images");
  const auto height = images.size(2), width = images.size(3);
  const double aspects[] = {1.0 / 3.0, 0.5, 1.0, 2.0, 3.0};
  const std::int64_t grid = 2;
  std::vector<AttackResult> out;
  for (std::int64_t i = 0; i < images.size(0); ++i) {
    std::mt19937_64 rng(derive_seed(spec.seed, static_cast<std::uint64_t>(first_index + i)));
    std::uniform_int_distribution<int> pick_aspect(0, 4);
    std::uniform_real_distribution<double> pick_v(0.0, 0.2);
    std::vector<torch::Tensor> trials, masks;
    for (int k = 0; k < spec.iterations; ++k) {
      const auto [h, w] = patch_shape(spec.patch_fraction, height, width, aspects[pick_aspect(rng)]);
      std::uniform_int_distribution<std::int64_t> gy(0, (height - h) / grid), gx(0, (width - w) / grid);
      const auto y = gy(rng) * grid;
      const auto x = gx(rng) * grid;
      const auto v = static_cast<float>(pick_v(rng));
      auto m = placement_mask({y, x, h, w}, height, width);
      trials.push_back(torch::where(m.unsqueeze(0) > 0.5, torch::full_like(images[i], v), images[i]));
      masks.push_back(m);
    }
    auto batch = torch::stack(trials, 0);
    auto margins = true_margin(clf.logits(batch), labels[i].expand({batch.size(0)}));
    auto fooled = (margins < 0).nonzero();
    const auto pick = fooled.size(0) > 0 ? fooled[0][0].item<std::int64_t>() : margins.argmin().item<std::int64_t>();
    AttackResult res;
    res.x_adv = trials[static_cast<std::size_t>(pick)];
    res.gt_mask = masks[static_cast<std::size_t>(pick)];
    res.success = margins[pick].item<float>() < 0.0F;
    res.queries = spec.iterations;
    out.push_back(std::move(res));
  }
  return out;
}

}  // namespace

std::vector<AttackResult> run_attack(const torch::Tensor& images, const std::vector<std::int64_t>& labels,
                                     const Classifier& clf, const AttackSpec& spec, const Defense* defense,
                                     std::int64_t index_offset) {
  spec.validate();
  require(images.dim() == 4 && images.size(0) == static_cast<std::int64_t>(labels.size()),
          "run_attack: images [B,C,H,W] with one label each");
  auto label_t = torch::tensor(labels, torch::kLong);
  auto x = images.to(torch::kFloat);
  std::vector<AttackResult> out;
  for (std::int64_t s = 0; s < x.size(0); s += kChunk) {
    const auto e = std::min(x.size(0), s + kChunk);
    auto part = spec.kind == AttackKind::ir_cold
                    ? cold_patch_chunk(x.slice(0, s, e), label_t.slice(0, s, e), clf, spec, index_offset + s)
                    : gradient_attack_chunk(x.slice(0, s, e), label_t.slice(0, s, e), clf, spec,
                                            spec.kind == AttackKind::bpda_advp ? defense : nullptr, index_offset + s);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

AttackResult advp_attack(const torch::Tensor& x, std::int64_t label, const Classifier& clf, const AttackSpec& spec) {
  auto s = spec;
  s.kind = AttackKind::advp;
  return run_attack(x.unsqueeze(0), {label}, clf, s).front();
}

AttackResult lavan_attack(const torch::Tensor& x, std::int64_t label, const Classifier& clf, const AttackSpec& spec) {
  auto s = spec;
  s.kind = AttackKind::lavan;
  return run_attack(x.unsqueeze(0), {label}, clf, s).front();
}

AttackResult ir_cold_patch_attack(const torch::Tensor& x_ir, std::int64_t label, const Classifier& clf,
                                  const AttackSpec& spec) {
  require(x_ir.dim() == 3 && x_ir.size(0) == 1, "ir_cold_patch_attack expects [1,H,W]");
  auto s = spec;
  s.kind = AttackKind::ir_cold;
  return run_attack(x_ir.unsqueeze(0), {label}, clf, s).front();
}

AttackResult bpda_adaptive_attack(const torch::Tensor& x, std::int64_t label, const Classifier& clf,
                                  const Defense& defense, const AttackSpec& spec) {
  auto s = spec;
  s.kind = AttackKind::bpda_advp;
  return run_attack(x.unsqueeze(0), {label}, clf, s, &defense).front();
}

std::filesystem::path attack_cache_path(const std::filesystem::path& dir, const AttackSpec& spec,
                                        const std::string& dataset_key) {
  return dir / (to_string(spec.kind) + "-" + spec.hash() + "-" + dataset_key + ".ckpt");
}

void save_attack_cache(const std::vector<AttackResult>& results, const AttackSpec& spec,
                       const std::string& dataset_key, const std::filesystem::path& path) {
  require(!results.empty(), "save_attack_cache: nothing to save");
  std::vector<torch::Tensor> xs, masks;
  std::vector<std::uint8_t> success;
  std::vector<std::int64_t> queries;
  for (const auto& r : results) {
    xs.push_back(r.x_adv.to(torch::kFloat));
    masks.push_back(r.gt_mask.to(torch::kUInt8));
    success.push_back(r.success ? 1 : 0);
    queries.push_back(r.queries);
  }
  Checkpoint ckpt;
  ckpt.kind = CheckpointKind::attack_cache;
  ckpt.arrays["x_adv"] = torch::stack(xs, 0).contiguous();
  ckpt.arrays["gt_mask"] = torch::stack(masks, 0).contiguous();
  ckpt.arrays["success"] = torch::tensor(std::vector<std::int64_t>(success.begin(), success.end())).to(torch::kUInt8);
  ckpt.arrays["queries"] = torch::tensor(queries, torch::kLong);
  ckpt.metadata["spec_hash"] = spec.hash();
  ckpt.metadata["attack"] = to_string(spec.kind);
  ckpt.metadata["dataset_key"] = dataset_key;
  ckpt.metadata["count"] = std::to_string(results.size());
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  save_checkpoint(ckpt, path);
}

std::vector<AttackResult> load_attack_cache(const std::filesystem::path& path, const AttackSpec& spec,
                                            const std::string& dataset_key, std::int64_t count) {
  auto ckpt = load_checkpoint(path);
  if (ckpt.kind != CheckpointKind::attack_cache) {
    throw FormatError("not an attack cache: " + path.string());
  }
  if (ckpt.metadata["spec_hash"] != spec.hash() || ckpt.metadata["dataset_key"] != dataset_key) {
    throw FormatError("attack cache key mismatch: " + path.string());
  }
  const auto& xs = ckpt.arrays.at("x_adv");
  const auto n = count < 0 ? xs.size(0) : count;
  if (n > xs.size(0)) {
    throw FormatError("attack cache holds fewer results than requested: " + path.string());
  }
  std::vector<AttackResult> out;
  for (std::int64_t i = 0; i < n; ++i) {
    AttackResult r;
    r.x_adv = xs[i].clone();
    r.gt_mask = ckpt.arrays.at("gt_mask")[i].to(torch::kFloat);
    r.success = ckpt.arrays.at("success")[i].item<std::uint8_t>() != 0;
    r.queries = ckpt.arrays.at("queries")[i].item<std::int64_t>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace diffender
