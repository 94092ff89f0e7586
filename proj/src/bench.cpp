#include "diffender/bench.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "diffender/image_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace diffender {

std::string to_string(DefenseKind kind) {
  switch (kind) {
    case DefenseKind::none:
      return "none";
    case DefenseKind::diffender:
      return "diffender";
    case DefenseKind::jpeg:
      return "jpeg";
    case DefenseKind::smoothing:
      return "smoothing";
    case DefenseKind::purify:
      return "purify";
  }
  return "?";
}

DefenseKind defense_kind_from_string(const std::string& name) {
  for (auto k : {DefenseKind::none, DefenseKind::diffender, DefenseKind::jpeg, DefenseKind::smoothing,
                 DefenseKind::purify}) {
    if (to_string(k) == name) {
      return k;
    }
  }
  throw ConfigError("unknown defense: " + name);
}

namespace {

json attack_json(const AttackSpec& a) {
  return {{"kind", to_string(a.kind)},     {"patch_fraction", a.patch_fraction},
          {"iterations", a.iterations},    {"step_size", a.step_size},
          {"location_policy", to_string(a.location_policy)}, {"restarts", a.restarts},
          {"seed", a.seed},                {"surrogate_steps", a.surrogate_steps}};
}

json localizer_json(const LocalizerConfig& c) {
  return {{"m", c.m},
          {"t_star", c.t_star},
          {"theta", c.theta},
          {"gauss_size", c.gauss_size},
          {"gauss_sigma", c.gauss_sigma},
          {"dilate_radius", c.dilate_radius},
          {"dilate_iters", c.dilate_iters},
          {"soft_tau", c.soft_tau},
          {"diff_floor", c.diff_floor}};
}

json restorer_json(const RestorerConfig& c) { return {{"steps", c.steps}, {"gate_area", c.gate_area}}; }

json baselines_json(const BaselineConfig& c) {
  return {{"jpeg_quality", c.jpeg_quality},
          {"smoothing_window", c.smoothing_window},
          {"purify_t_star", c.purify_t_star},
          {"purify_steps", c.purify_steps}};
}

json defense_json(const ExperimentConfig& c) {
  json j{{"defense", to_string(c.defense)}};
  switch (c.defense) {
    case DefenseKind::diffender:
      j["localizer"] = localizer_json(c.localizer);
      j["restorer"] = restorer_json(c.restorer);
      j["prompts"] = c.prompts_ckpt.string();
      j["diffusion"] = c.diffusion_ckpt.string();
      break;
    case DefenseKind::jpeg:
      j["jpeg_quality"] = c.baselines.jpeg_quality;
      break;
    case DefenseKind::smoothing:
      j["smoothing_window"] = c.baselines.smoothing_window;
      break;
    case DefenseKind::purify:
      j["purify_t_star"] = c.baselines.purify_t_star;
      j["purify_steps"] = c.baselines.purify_steps;
      j["diffusion"] = c.diffusion_ckpt.string();
      break;
    case DefenseKind::none:
      break;
  }
  return j;
}

std::string tensor_bytes(const torch::Tensor& t) {
  auto c = t.contiguous().cpu();
  return std::string(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size());
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

constexpr std::int64_t kEvalChunk = 64;

}  // namespace

std::string ExperimentConfig::canonical() const {
  json j{{"eval_dir", eval_dir.string()},
         {"classifier", classifier_ckpt.string()},
         {"attack", attack_json(attack)},
         {"defense", defense_json(*this)},
         {"prompt_tokens", prompt_tokens},
         {"num_eval_images", num_eval_images},
         {"seed", seed}};
  return j.dump();
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a(canonical())); }

std::unique_ptr<Defense> make_defense(const ExperimentConfig& cfg, const EvalContext& ctx) {
  auto need_model = [&]() {
    if (ctx.model == nullptr || ctx.sched == nullptr) {
      throw MissingArtifactError("defense '" + to_string(cfg.defense) + "' needs a diffusion model");
    }
  };
  switch (cfg.defense) {
    case DefenseKind::none:
      return std::make_unique<IdentityDefense>();
    case DefenseKind::jpeg:
      return std::make_unique<JpegDefense>(cfg.baselines.jpeg_quality);
    case DefenseKind::smoothing:
      return std::make_unique<SmoothingDefense>(cfg.baselines.smoothing_window);
    case DefenseKind::purify:
      need_model();
      return std::make_unique<PurifyDefense>(*ctx.model, *ctx.sched, cfg.baselines.purify_t_star,
                                             cfg.baselines.purify_steps);
    case DefenseKind::diffender:
      need_model();
      return std::make_unique<DiffenderDefense>(*ctx.model, *ctx.sched, ctx.prompts.defense_prompts(), cfg.localizer,
                                                cfg.restorer);
  }
  throw ConfigError("unhandled defense");
}

std::vector<std::int64_t> correctly_classified(const Dataset& pool, const Classifier& clf, std::int64_t count) {
  std::vector<std::int64_t> idx;
  if (pool.empty()) {
    return idx;
  }
  auto pred = predict_labels(clf, pool.images());
  for (std::int64_t i = 0; i < pred.size(0) && static_cast<std::int64_t>(idx.size()) < count; ++i) {
    if (pred[i].item<std::int64_t>() == pool.labels()[static_cast<std::size_t>(i)]) {
      idx.push_back(i);
    }
  }
  return idx;
}

std::vector<FewShotItem> make_fewshot(const Dataset& pool, const Classifier& clf, const AttackSpec& spec, int shots) {
  require(shots >= 1, "make_fewshot: shots must be >= 1");
  auto idx = correctly_classified(pool, clf, static_cast<std::int64_t>(pool.size()));
  if (static_cast<int>(idx.size()) < shots) {
    throw ConfigError("not enough correctly classified images for the requested shots");
  }
  std::vector<std::int64_t> tail(idx.end() - shots, idx.end());
  auto subset = pool.select(tail);
  auto results = run_attack(subset.images(), subset.labels(), clf, spec, nullptr, std::int64_t{1} << 20);
  std::vector<FewShotItem> items;
  for (int i = 0; i < shots; ++i) {
    items.push_back({subset.image(static_cast<std::size_t>(i)).to(torch::kFloat), results[static_cast<std::size_t>(i)].x_adv,
                     results[static_cast<std::size_t>(i)].gt_mask});
  }
  return items;
}

Dataset with_infrared_copies(const Dataset& train, double fraction) {
  require(fraction >= 0.0 && fraction <= 1.0, "with_infrared_copies: fraction must lie in [0,1]");
  const auto n = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(train.size())));
  if (n == 0) {
    return train;
  }
  auto ir = to_infrared_proxy(train.slice(0, n));
  auto labels = train.labels();
  labels.insert(labels.end(), ir.labels().begin(), ir.labels().end());
  auto names = train.names();
  if (!names.empty()) {
    for (std::size_t i = 0; i < n; ++i) {
      names.push_back(names[i] + ":ir");
    }
  }
  return Dataset(torch::cat({train.images(), lift_to_model(ir.images())}, 0), labels, train.split(), names);
}

std::string eval_set_key(const Dataset& subset, const Classifier& clf, const ExperimentConfig& cfg) {
  std::string blob = tensor_bytes(subset.images().to(torch::kFloat));
  blob += tensor_bytes(subset.label_tensor());
  char buf[64];
  std::snprintf(buf, sizeof buf, "|clf=%.17g", clf.checksum());
  blob += buf;
  if (cfg.attack.kind == AttackKind::bpda_advp) {
    blob += "|" + defense_json(cfg).dump();
  }
  return hex64(fnv1a(blob));
}

EvalOutputs evaluate_defense_detailed(const ExperimentConfig& cfg, const EvalContext& ctx) {
  if (ctx.pool == nullptr || ctx.clf == nullptr) {
    throw ConfigError("evaluation needs an image pool and a classifier");
  }
  if (cfg.num_eval_images < 1) {
    throw ConfigError("num_eval_images must be >= 1");
  }
  const auto total_start = std::chrono::steady_clock::now();
  const auto& clf = *ctx.clf;
  auto idx = correctly_classified(*ctx.pool, clf, cfg.num_eval_images);
  if (idx.empty()) {
    throw ConfigError("no correctly classified images in the evaluation pool");
  }
  auto subset = ctx.pool->select(idx);
  const auto n = static_cast<std::int64_t>(subset.size());
  auto defense = make_defense(cfg, ctx);

  EvalOutputs out;
  auto& report = out.report;
  report.experiment = cfg.name;
  report.defense = to_string(cfg.defense);
  report.attack = to_string(cfg.attack.kind);
  report.config_hash = cfg.hash();

  // Attacks, paired across defenses through the cache.
  auto start = std::chrono::steady_clock::now();
  const auto key = eval_set_key(subset, clf, cfg);
  const bool adaptive = cfg.attack.kind == AttackKind::bpda_advp;
  fs::path cache;
  if (!cfg.cache_dir.empty()) {
    cache = attack_cache_path(cfg.cache_dir, cfg.attack, key);
  }
  bool cached = false;
  if (!cache.empty() && fs::exists(cache)) {
    try {
      out.attacks = load_attack_cache(cache, cfg.attack, key, n);
      cached = true;
    } catch (const FormatError&) {
      cached = false;
    }
  }
  if (!cached) {
    out.attacks = run_attack(subset.images(), subset.labels(), clf, cfg.attack, adaptive ? defense.get() : nullptr);
    if (!cache.empty()) {
      save_attack_cache(out.attacks, cfg.attack, key, cache);
    }
  }
  report.stage_seconds["attack"] = seconds_since(start);

  std::vector<torch::Tensor> adv_list;
  for (const auto& a : out.attacks) {
    adv_list.push_back(a.x_adv);
  }
  auto x_adv = torch::stack(adv_list, 0);
  auto x_clean = subset.images().to(torch::kFloat);

  auto* diffender = dynamic_cast<DiffenderDefense*>(defense.get());
  auto run_defense = [&](const torch::Tensor& batch, Seed base, std::vector<DefenseOutput>* outputs) {
    std::vector<torch::Tensor> parts;
    for (std::int64_t s = 0; s < batch.size(0); s += kEvalChunk) {
      const auto e = std::min(batch.size(0), s + kEvalChunk);
      std::vector<Seed> seeds;
      for (std::int64_t i = s; i < e; ++i) {
        seeds.push_back(image_seed(base, i));
      }
      auto chunk = batch.slice(0, s, e);
      if (diffender != nullptr) {
        auto outs = diffender->run(chunk, seeds);
        for (auto& o : outs) {
          parts.push_back(o.restored.unsqueeze(0));
          if (outputs != nullptr) {
            outputs->push_back(std::move(o));
          }
        }
      } else {
        parts.push_back(defense->apply(chunk, seeds));
      }
    }
    return torch::cat(parts, 0);
  };

  start = std::chrono::steady_clock::now();
  std::vector<DefenseOutput> clean_outputs;
  auto defended_clean = run_defense(x_clean, derive_seed(cfg.seed, 1), &clean_outputs);
  report.stage_seconds["defense_clean"] = seconds_since(start);
  start = std::chrono::steady_clock::now();
  out.defended_adv = run_defense(x_adv, cfg.seed, &out.diffender_outputs);
  report.stage_seconds["defense_adv"] = seconds_since(start);
  if (diffender != nullptr) {
    double loc = 0.0, res = 0.0;
    for (const auto* outs : {&clean_outputs, &out.diffender_outputs}) {
      for (const auto& o : *outs) {
        loc += o.timings.at("localize");
        res += o.timings.at("restore");
      }
    }
    report.stage_seconds["localize"] = loc;
    report.stage_seconds["restore"] = res;
  }

  auto clean_pred = predict_labels(clf, defended_clean);
  auto robust_pred = predict_labels(clf, out.defended_adv);
  std::int64_t clean_ok = 0, robust_ok = 0;
  double iou_sum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    ImageRow row;
    row.index = idx[static_cast<std::size_t>(i)];
    row.label = subset.labels()[static_cast<std::size_t>(i)];
    row.clean_pred = clean_pred[i].item<std::int64_t>();
    row.robust_pred = robust_pred[i].item<std::int64_t>();
    row.attack_success = row.robust_pred != row.label;
    clean_ok += row.clean_pred == row.label ? 1 : 0;
    robust_ok += row.robust_pred == row.label ? 1 : 0;
    if (diffender != nullptr) {
      const auto& o = out.diffender_outputs[static_cast<std::size_t>(i)];
      row.gated = o.gated;
      row.mask_area = o.area_fraction;
      row.mask_iou = mask_iou(o.mask, out.attacks[static_cast<std::size_t>(i)].gt_mask);
      iou_sum += row.mask_iou;
    } else {
      row.mask_iou = std::numeric_limits<double>::quiet_NaN();
    }
    report.rows.push_back(row);
  }
  report.clean_acc = static_cast<double>(clean_ok) / static_cast<double>(n);
  report.robust_acc = static_cast<double>(robust_ok) / static_cast<double>(n);
  report.asr = 1.0 - report.robust_acc;
  report.mean_iou = diffender != nullptr ? iou_sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  report.runtime_s = seconds_since(total_start);
  return out;
}

DefenseReport evaluate_defense(const ExperimentConfig& cfg, const EvalContext& ctx) {
  return evaluate_defense_detailed(cfg, ctx).report;
}

namespace {

struct LoadedArtifacts {
  Dataset pool;
  std::optional<Classifier> clf;
  std::optional<DenoiserModel> model;
  NoiseSchedule sched = make_schedule(250);
  LearnablePrompts prompts;
};

bool needs_model(const std::vector<DefenseKind>& defenses) {
  for (auto d : defenses) {
    if (d == DefenseKind::diffender || d == DefenseKind::purify) {
      return true;
    }
  }
  return false;
}

LoadedArtifacts load_artifacts(const ExperimentConfig& cfg, bool with_model) {
  LoadedArtifacts a;
  if (cfg.eval_dir.empty()) {
    throw ConfigError("eval_dir is required");
  }
  if (!fs::exists(cfg.eval_dir)) {
    throw MissingArtifactError("evaluation dataset not found: " + cfg.eval_dir.string());
  }
  a.pool = load_dataset(cfg.eval_dir, Split::test);
  if (cfg.classifier_ckpt.empty()) {
    throw ConfigError("classifier checkpoint is required");
  }
  a.clf = Classifier::from_checkpoint(load_checkpoint(cfg.classifier_ckpt));
  std::int64_t d = 128;
  if (with_model) {
    if (cfg.diffusion_ckpt.empty()) {
      throw ConfigError("diffusion checkpoint is required for the configured defenses");
    }
    a.model = DenoiserModel::from_checkpoint(load_checkpoint(cfg.diffusion_ckpt));
    d = a.model->embed_dim();
  }
  a.prompts = cfg.prompts_ckpt.empty() ? LearnablePrompts::zeros(cfg.prompt_tokens, d)
                                       : LearnablePrompts::from_checkpoint(load_checkpoint(cfg.prompts_ckpt));
  return a;
}

EvalContext context_of(const LoadedArtifacts& a) {
  EvalContext ctx;
  ctx.pool = &a.pool;
  ctx.clf = &*a.clf;
  ctx.model = a.model ? &*a.model : nullptr;
  ctx.sched = &a.sched;
  ctx.prompts = a.prompts;
  return ctx;
}

}  // namespace

DefenseReport evaluate_defense(const ExperimentConfig& cfg) {
  auto art = load_artifacts(cfg, needs_model({cfg.defense}));
  return evaluate_defense(cfg, context_of(art));
}

// ---------------------------------------------------------------- suite config

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) {
    throw ConfigError(where + ": expected an object");
  }
  std::vector<std::string> unknown;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (allowed.count(it.key()) == 0) {
      unknown.push_back(it.key());
    }
  }
  if (!unknown.empty()) {
    std::string msg = where + ": unknown keys:";
    for (const auto& k : unknown) {
      msg += " " + k;
    }
    throw ConfigError(msg);
  }
}

template <typename T>
void read(const json& j, const char* key, T& target) {
  if (j.contains(key)) {
    try {
      target = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
  }
}

fs::path resolve(const json& j, const char* key, const fs::path& base) {
  std::string s;
  read(j, key, s);
  if (s.empty()) {
    return {};
  }
  fs::path p(s);
  return p.is_absolute() || base.empty() ? p : base / p;
}

AttackSpec parse_attack(const json& j, std::string& label) {
  check_keys(j, {"label", "kind", "patch_fraction", "iterations", "step_size", "location_policy", "restarts", "seed",
                 "surrogate_steps"},
             "attack");
  AttackSpec a;
  std::string kind = "advp", policy = "random_fixed";
  read(j, "kind", kind);
  a.kind = attack_kind_from_string(kind);
  read(j, "location_policy", policy);
  a.location_policy = location_policy_from_string(policy);
  read(j, "patch_fraction", a.patch_fraction);
  read(j, "iterations", a.iterations);
  read(j, "step_size", a.step_size);
  read(j, "restarts", a.restarts);
  read(j, "seed", a.seed);
  read(j, "surrogate_steps", a.surrogate_steps);
  label = kind;
  read(j, "label", label);
  try {
    a.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return a;
}

}  // namespace

SuiteConfig parse_suite_config(const std::string& json_text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("suite config is not valid JSON: ") + e.what());
  }
  check_keys(j, {"name", "eval_dir", "diffusion", "classifier", "prompts", "cache_dir", "out_dir", "num_eval_images",
                 "seed", "prompt_tokens", "localizer", "restorer", "baselines", "defenses", "attacks", "figures",
                 "thresholds"},
             "suite");
  SuiteConfig s;
  auto& b = s.base;
  read(j, "name", b.name);
  b.eval_dir = resolve(j, "eval_dir", base_dir);
  b.diffusion_ckpt = resolve(j, "diffusion", base_dir);
  b.classifier_ckpt = resolve(j, "classifier", base_dir);
  b.prompts_ckpt = resolve(j, "prompts", base_dir);
  b.cache_dir = resolve(j, "cache_dir", base_dir);
  s.out_dir = resolve(j, "out_dir", base_dir);
  if (s.out_dir.empty()) {
    s.out_dir = base_dir.empty() ? fs::path("suite_out") : base_dir / "suite_out";
  }
  read(j, "num_eval_images", b.num_eval_images);
  read(j, "seed", b.seed);
  read(j, "prompt_tokens", b.prompt_tokens);
  read(j, "figures", s.figures);
  if (j.contains("localizer")) {
    const auto& l = j["localizer"];
    check_keys(l, {"m", "t_star", "theta", "gauss_size", "gauss_sigma", "dilate_radius", "dilate_iters", "soft_tau",
                   "diff_floor"},
               "localizer");
    read(l, "m", b.localizer.m);
    read(l, "t_star", b.localizer.t_star);
    read(l, "theta", b.localizer.theta);
    read(l, "gauss_size", b.localizer.gauss_size);
    read(l, "gauss_sigma", b.localizer.gauss_sigma);
    read(l, "dilate_radius", b.localizer.dilate_radius);
    read(l, "dilate_iters", b.localizer.dilate_iters);
    read(l, "soft_tau", b.localizer.soft_tau);
    read(l, "diff_floor", b.localizer.diff_floor);
  }
  if (j.contains("restorer")) {
    const auto& r = j["restorer"];
    check_keys(r, {"steps", "gate_area"}, "restorer");
    read(r, "steps", b.restorer.steps);
    read(r, "gate_area", b.restorer.gate_area);
  }
  if (j.contains("baselines")) {
    const auto& r = j["baselines"];
    check_keys(r, {"jpeg_quality", "smoothing_window", "purify_t_star", "purify_steps"}, "baselines");
    read(r, "jpeg_quality", b.baselines.jpeg_quality);
    read(r, "smoothing_window", b.baselines.smoothing_window);
    read(r, "purify_t_star", b.baselines.purify_t_star);
    read(r, "purify_steps", b.baselines.purify_steps);
  }
  if (j.contains("defenses")) {
    if (!j["defenses"].is_array()) {
      throw ConfigError("defenses must be a list");
    }
    for (const auto& d : j["defenses"]) {
      if (!d.is_string()) {
        throw ConfigError("defense names must be strings");
      }
      s.defenses.push_back(defense_kind_from_string(d.get<std::string>()));
    }
  }
  if (j.contains("attacks")) {
    if (!j["attacks"].is_array()) {
      throw ConfigError("attacks must be a list");
    }
    for (const auto& a : j["attacks"]) {
      std::string label;
      auto spec = parse_attack(a, label);
      s.attacks.emplace_back(label, spec);
    }
  }
  if (j.contains("thresholds")) {
    for (const auto& t : j["thresholds"]) {
      check_keys(t, {"defense", "attack", "metric", "min", "max"}, "threshold");
      Threshold th;
      read(t, "defense", th.defense);
      read(t, "attack", th.attack);
      read(t, "metric", th.metric);
      if (t.contains("min")) {
        th.min = t["min"].get<double>();
      }
      if (t.contains("max")) {
        th.max = t["max"].get<double>();
      }
      if (th.metric != "clean_acc" && th.metric != "robust_acc" && th.metric != "asr" && th.metric != "mean_iou") {
        throw ConfigError("unknown threshold metric: " + th.metric);
      }
      s.thresholds.push_back(th);
    }
  }
  try {
    b.localizer.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  if (b.num_eval_images < 1) {
    throw ConfigError("num_eval_images must be >= 1");
  }
  return s;
}

SuiteConfig load_suite_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw MissingArtifactError("cannot read suite config " + path.string());
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_suite_config(ss.str(), path.parent_path());
}

// ---------------------------------------------------------------- suite runs

SuiteResult run_experiment_suite(const SuiteConfig& suite, const EvalContext& ctx) {
  SuiteResult result;
  fs::create_directories(suite.out_dir / "reports");
  fs::create_directories(suite.out_dir / "figures");
  for (const auto& [label, spec] : suite.attacks) {
    for (auto defense : suite.defenses) {
      auto cfg = suite.base;
      cfg.defense = defense;
      cfg.attack = spec;
      auto outs = evaluate_defense_detailed(cfg, ctx);
      outs.report.attack = label;
      const auto stem = to_string(defense) + "-" + label;
      write_report(outs.report, suite.out_dir / "reports" / (stem + ".json"), ReportFormat::json);
      write_report(outs.report, suite.out_dir / "reports" / (stem + ".csv"), ReportFormat::csv);
      if (defense == DefenseKind::diffender) {
        const auto count = std::min<std::size_t>(static_cast<std::size_t>(std::max(0, suite.figures)),
                                                 outs.diffender_outputs.size());
        for (std::size_t i = 0; i < count; ++i) {
          const auto& o = outs.diffender_outputs[i];
          write_quadriptych(outs.attacks[i].x_adv, o.diff, o.mask, o.restored,
                            suite.out_dir / "figures" / (stem + "-" + std::to_string(i) + ".png"));
        }
      }
      result.reports.push_back(std::move(outs.report));
    }
  }
  write_reports_csv(result.reports, suite.out_dir / "combined.csv");
  result.table = render_summary_table(result.reports);
  {
    std::ofstream md(suite.out_dir / "summary.md");
    md << result.table;
  }
  for (const auto& th : suite.thresholds) {
    const DefenseReport* found = nullptr;
    for (const auto& r : result.reports) {
      if (r.defense == th.defense && r.attack == th.attack) {
        found = &r;
      }
    }
    if (found == nullptr) {
      result.threshold_failures.push_back("no result for " + th.defense + " x " + th.attack);
      continue;
    }
    const double v = th.metric == "clean_acc"    ? found->clean_acc
                     : th.metric == "robust_acc" ? found->robust_acc
                     : th.metric == "asr"        ? found->asr
                                                 : found->mean_iou;
    char buf[256];
    if (th.min && !(v >= *th.min)) {
      std::snprintf(buf, sizeof buf, "%s x %s: %s = %.6f below %.6f", th.defense.c_str(), th.attack.c_str(),
                    th.metric.c_str(), v, *th.min);
      result.threshold_failures.emplace_back(buf);
    }
    if (th.max && !(v <= *th.max)) {
      std::snprintf(buf, sizeof buf, "%s x %s: %s = %.6f above %.6f", th.defense.c_str(), th.attack.c_str(),
                    th.metric.c_str(), v, *th.max);
      result.threshold_failures.emplace_back(buf);
    }
  }
  return result;
}

SuiteResult run_experiment_suite(const SuiteConfig& suite) {
  if (suite.defenses.empty() || suite.attacks.empty()) {
    return run_experiment_suite(suite, EvalContext{});
  }
  auto art = load_artifacts(suite.base, needs_model(suite.defenses));
  return run_experiment_suite(suite, context_of(art));
}

bool same_results(const DefenseReport& a, const DefenseReport& b) {
  auto same = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
  if (a.experiment != b.experiment || a.defense != b.defense || a.attack != b.attack ||
      a.config_hash != b.config_hash || !same(a.clean_acc, b.clean_acc) || !same(a.robust_acc, b.robust_acc) ||
      !same(a.asr, b.asr) || !same(a.mean_iou, b.mean_iou) || a.rows.size() != b.rows.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    const auto& x = a.rows[i];
    const auto& y = b.rows[i];
    if (x.index != y.index || x.label != y.label || x.clean_pred != y.clean_pred || x.robust_pred != y.robust_pred ||
        x.attack_success != y.attack_success || x.gated != y.gated || !same(x.mask_iou, y.mask_iou) ||
        !same(x.mask_area, y.mask_area)) {
      return false;
    }
  }
  return true;
}

}  // namespace diffender
