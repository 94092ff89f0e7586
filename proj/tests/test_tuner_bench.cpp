#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "diffender/bench.hpp"
#include "diffender/desk_data.hpp"
#include "diffender/tuner.hpp"
#include "support.hpp"

using namespace diffender;
using diffender::testing::PromptBlindPredictor;
using diffender::testing::PromptMixPredictor;
namespace fs = std::filesystem;

namespace {

// Two classes separated by mean brightness.
Dataset brightness_pool(std::size_t n, Seed seed) {
  auto gen = make_generator(seed);
  auto labels = torch::randint(2, {static_cast<std::int64_t>(n)}, gen);
  auto base = 0.25 + 0.5 * labels.to(torch::kFloat).view({-1, 1, 1, 1});
  auto images = (base + 0.1 * torch::rand({static_cast<std::int64_t>(n), 3, 16, 16}, gen) - 0.05).clamp(0, 1);
  std::vector<std::int64_t> lab(labels.data_ptr<std::int64_t>(), labels.data_ptr<std::int64_t>() + n);
  return Dataset(images, lab, Split::test);
}

struct Fixture {
  Dataset pool = brightness_pool(24, 1);
  Classifier clf = [this] {
    ClassifierTrainConfig tc;
    tc.epochs = 4;
    tc.width = 8;
    tc.batch_size = 32;
    return train_classifier(brightness_pool(256, 2), pool, tc, 3);
  }();
  PromptBlindPredictor model;
  NoiseSchedule sched = make_schedule(50);

  EvalContext ctx() const {
    EvalContext c;
    c.pool = &pool;
    c.clf = &clf;
    c.model = &model;
    c.sched = &sched;
    c.prompts = LearnablePrompts::zeros(4, 8);
    return c;
  }

  ExperimentConfig config(DefenseKind defense) const {
    ExperimentConfig cfg;
    cfg.defense = defense;
    cfg.num_eval_images = 6;
    cfg.prompt_tokens = 4;
    cfg.attack.iterations = 10;
    cfg.attack.step_size = 0.05;
    cfg.attack.patch_fraction = 0.1;
    cfg.restorer.steps = 5;
    cfg.baselines.purify_steps = 5;
    return cfg;
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("diffender_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

DenoiserConfig tiny_denoiser() {
  DenoiserConfig c;
  c.base_channels = 8;
  c.embed_dim = 16;
  c.max_tokens = 8;
  c.image_size = 16;
  c.vocabulary = default_vocabulary(desk_class_names());
  return c;
}

}  // namespace

TEST(Prompts, DefaultsAndCheckpointShape) {
  TuneConfig tc;
  EXPECT_EQ(tc.shots, 8);
  EXPECT_DOUBLE_EQ(tc.alpha, 0.4);
  EXPECT_DOUBLE_EQ(tc.beta, 0.6);
  EXPECT_DOUBLE_EQ(tc.gamma, 0.7);
  EXPECT_DOUBLE_EQ(tc.delta, 0.3);
  EXPECT_EQ(ExperimentConfig{}.prompt_tokens, 16);
  auto p = LearnablePrompts::random(16, 128, 0.1, 4);
  auto back = LearnablePrompts::from_checkpoint(p.to_checkpoint());
  EXPECT_EQ(back.v_l.sizes(), (std::vector<std::int64_t>{16, 128}));
  EXPECT_TRUE(torch::equal(back.v_l, p.v_l));
  EXPECT_TRUE(torch::equal(back.v_r, p.v_r));
  EXPECT_FALSE(back.idc.has_value());
}

TEST(Prompts, DomainTokenAppendedToBoth) {
  auto p = LearnablePrompts::zeros(4, 8);
  p.idc = torch::ones({1, 8});
  EXPECT_EQ(p.localize_prompt().size(0), 5);
  EXPECT_EQ(p.restore_prompt().size(0), 5);
  auto back = LearnablePrompts::from_checkpoint(p.to_checkpoint());
  ASSERT_TRUE(back.idc.has_value());
  EXPECT_TRUE(torch::equal(*back.idc, *p.idc));
}

TEST(Tune, ZeroStepsReturnsPromptsUnchanged) {
  const auto& f = fixture();
  PromptMixPredictor model;
  auto x = f.pool.image(0);
  auto mask = torch::zeros({16, 16});
  mask.slice(0, 4, 8).slice(1, 4, 8).fill_(1);
  std::vector<FewShotItem> items{{x, x, mask}};
  TuneConfig tc;
  tc.steps = 0;
  tc.shots = 1;
  auto init = LearnablePrompts::random(4, 8, 0.1, 5);
  auto r = tune_prompts(items, init, tc, LocalizerConfig{}, model, f.sched, f.clf);
  EXPECT_TRUE(torch::equal(r.prompts.v_l, init.v_l));
  EXPECT_TRUE(torch::equal(r.prompts.v_r, init.v_r));
  EXPECT_TRUE(r.trajectory.empty());
}

TEST(Tune, ObjectiveFixedBySeedAndDifferentiableInPrompts) {
  const auto& f = fixture();
  PromptMixPredictor model;
  auto x = f.pool.image(1);
  auto mask = torch::zeros({16, 16});
  mask.slice(0, 4, 8).slice(1, 4, 8).fill_(1);
  std::vector<FewShotItem> items{{x, x, mask}};
  TuneConfig tc;
  tc.unroll_steps = 2;
  tc.infrared = false;
  auto p = LearnablePrompts::random(4, 8, 0.5, 6);
  p.v_l.requires_grad_(true);
  p.v_r.requires_grad_(true);
  auto a = prompt_tuning_loss(items, p, tc, LocalizerConfig{}, model, f.sched, f.clf, 9);
  auto b = prompt_tuning_loss(items, p, tc, LocalizerConfig{}, model, f.sched, f.clf, 9);
  EXPECT_EQ(a.total.item<double>(), b.total.item<double>());
  auto grads = torch::autograd::grad({a.total}, {p.v_l, p.v_r});
  EXPECT_GT(grads[0].abs().sum().item<double>(), 0.0);
  EXPECT_GT(grads[1].abs().sum().item<double>(), 0.0);
}

TEST(Tune, ConfigValidation) {
  TuneConfig tc;
  tc.steps = -1;
  EXPECT_THROW(tc.validate(), ContractError);
}

TEST(Idc, ZeroStepsReturnsInitialTokenOfOneRow) {
  DenoiserModel model(tiny_denoiser(), 1);
  auto sched = make_schedule(50);
  std::vector<torch::Tensor> images{torch::rand({3, 16, 16}, make_generator(2))};
  auto a = learn_idc_token(images, default_idc_templates(), model, sched, 0, 3);
  auto b = learn_idc_token(images, default_idc_templates(), model, sched, 0, 3);
  EXPECT_EQ(a.token.sizes(), (std::vector<std::int64_t>{1, 16}));
  EXPECT_TRUE(torch::equal(a.token, b.token));
  EXPECT_TRUE(a.trajectory.empty());
  EXPECT_TRUE(torch::equal(idc_from_checkpoint(idc_to_checkpoint(a.token)), a.token));
}

TEST(Idc, TemplatesHaveOneSlot) {
  for (const auto& t : default_idc_templates()) {
    EXPECT_EQ(std::count(t.begin(), t.end(), std::string()), 1);
  }
}

TEST(Bench, DefenseNamesAndUnknownName) {
  for (auto k : {DefenseKind::none, DefenseKind::diffender, DefenseKind::jpeg, DefenseKind::smoothing,
                 DefenseKind::purify}) {
    EXPECT_EQ(defense_kind_from_string(to_string(k)), k);
  }
  try {
    defense_kind_from_string("magic");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
}

TEST(Bench, UndefendedRobustAccuracyIsOneMinusSuccess) {
  const auto& f = fixture();
  auto out = evaluate_defense_detailed(f.config(DefenseKind::none), f.ctx());
  const auto& r = out.report;
  ASSERT_EQ(r.rows.size(), 6u);
  double success = 0;
  for (const auto& a : out.attacks) {
    success += a.success ? 1.0 : 0.0;
  }
  EXPECT_DOUBLE_EQ(r.robust_acc, 1.0 - success / 6.0);
  EXPECT_DOUBLE_EQ(r.asr, 1.0 - r.robust_acc);
  EXPECT_DOUBLE_EQ(r.clean_acc, 1.0);
  EXPECT_TRUE(std::isnan(r.mean_iou));
}

TEST(Bench, DiffenderWithPromptBlindModelEqualsNone) {
  const auto& f = fixture();
  auto none = evaluate_defense(f.config(DefenseKind::none), f.ctx());
  auto diff = evaluate_defense_detailed(f.config(DefenseKind::diffender), f.ctx());
  EXPECT_DOUBLE_EQ(diff.report.robust_acc, none.robust_acc);
  EXPECT_DOUBLE_EQ(diff.report.clean_acc, none.clean_acc);
  for (const auto& o : diff.diffender_outputs) {
    EXPECT_FALSE(o.gated);
  }
  EXPECT_LE(none.robust_acc, diff.report.robust_acc);
}

TEST(Bench, CacheServesExactlyRequestedCount) {
  const auto& f = fixture();
  auto cfg = f.config(DefenseKind::none);
  cfg.cache_dir = fresh_dir("bench_cache");
  cfg.num_eval_images = 8;
  auto first = evaluate_defense(cfg, f.ctx());
  cfg.num_eval_images = 5;
  auto second = evaluate_defense(cfg, f.ctx());
  EXPECT_EQ(second.rows.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(second.rows[i].attack_success, first.rows[i].attack_success);
  }
  EXPECT_EQ(second.stage_seconds.count("attack"), 1u);
}

TEST(Bench, RepeatedRunsGiveSameResults) {
  const auto& f = fixture();
  auto cfg = f.config(DefenseKind::jpeg);
  auto a = evaluate_defense(cfg, f.ctx());
  auto b = evaluate_defense(cfg, f.ctx());
  EXPECT_TRUE(same_results(a, b));
  b.robust_acc += 0.1;
  EXPECT_FALSE(same_results(a, b));
  EXPECT_EQ(a.config_hash, cfg.hash());
  auto other = cfg;
  other.seed = 1;
  EXPECT_NE(other.hash(), cfg.hash());
}

TEST(Bench, MissingModelIsMissingArtifact) {
  const auto& f = fixture();
  auto ctx = f.ctx();
  ctx.model = nullptr;
  EXPECT_THROW(make_defense(f.config(DefenseKind::diffender), ctx), MissingArtifactError);
  EXPECT_NO_THROW(make_defense(f.config(DefenseKind::jpeg), ctx));
  auto cfg = f.config(DefenseKind::none);
  cfg.eval_dir = fresh_dir("bench_absent") / "nothing";
  EXPECT_THROW(evaluate_defense(cfg), MissingArtifactError);
}

TEST(Suite, UnknownKeysListedTogether) {
  try {
    parse_suite_config(R"({"name":"x","bogus":1,"defenses":["none"],"other":2})");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bogus"), std::string::npos);
    EXPECT_NE(msg.find("other"), std::string::npos);
  }
  EXPECT_THROW(parse_suite_config(R"({"defenses":["magic"]})"), ConfigError);
  EXPECT_THROW(parse_suite_config("{not json"), ConfigError);
  EXPECT_THROW(load_suite_config(fresh_dir("suite_absent") / "s.json"), MissingArtifactError);
}

TEST(Suite, ParsesGridAndResolvesPaths) {
  auto s = parse_suite_config(R"({
    "eval_dir": "data/test", "num_eval_images": 32, "seed": 5,
    "localizer": {"m": 2, "t_star": 0.4},
    "defenses": ["none", "jpeg"],
    "attacks": [{"label": "advp", "kind": "advp", "iterations": 50}],
    "thresholds": [{"defense": "jpeg", "attack": "advp", "metric": "robust_acc", "min": 0.1}]
  })",
                              "/base");
  EXPECT_EQ(s.base.eval_dir, fs::path("/base/data/test"));
  EXPECT_EQ(s.out_dir, fs::path("/base/suite_out"));
  EXPECT_EQ(s.base.num_eval_images, 32);
  EXPECT_EQ(s.base.localizer.m, 2);
  ASSERT_EQ(s.defenses.size(), 2u);
  ASSERT_EQ(s.attacks.size(), 1u);
  EXPECT_EQ(s.attacks[0].second.iterations, 50);
  ASSERT_EQ(s.thresholds.size(), 1u);
  EXPECT_DOUBLE_EQ(*s.thresholds[0].min, 0.1);
  EXPECT_THROW(parse_suite_config(R"({"thresholds":[{"defense":"none","attack":"a","metric":"speed"}]})"),
               ConfigError);
}

TEST(Suite, EmptyGridWritesHeaderOnly) {
  SuiteConfig s;
  s.out_dir = fresh_dir("suite_empty");
  auto r = run_experiment_suite(s);
  EXPECT_TRUE(r.reports.empty());
  std::ifstream in(s.out_dir / "combined.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kReportCsvHeader);
}

TEST(Suite, ThreeDefensesOneAttackGiveThreeRows) {
  const auto& f = fixture();
  SuiteConfig s;
  s.base = f.config(DefenseKind::none);
  s.defenses = {DefenseKind::none, DefenseKind::jpeg, DefenseKind::diffender};
  s.attacks = {{"advp", s.base.attack}};
  s.out_dir = fresh_dir("suite_grid");
  s.figures = 1;
  s.thresholds.push_back(Threshold{"none", "advp", "robust_acc", std::nullopt, -1.0});
  auto r = run_experiment_suite(s, f.ctx());
  ASSERT_EQ(r.reports.size(), 3u);
  EXPECT_EQ(read_reports_csv(s.out_dir / "combined.csv").size(), 3u);
  EXPECT_TRUE(fs::exists(s.out_dir / "reports" / "jpeg-advp.json"));
  EXPECT_TRUE(fs::exists(s.out_dir / "summary.md"));
  EXPECT_TRUE(fs::exists(s.out_dir / "figures" / "diffender-advp-0.png"));
  EXPECT_EQ(r.threshold_failures.size(), 1u);
}

TEST(Bench, InfraredCopiesAppendLiftedProxiesWithLabelsAndNames) {
  auto base = brightness_pool(10, 40);
  std::vector<std::string> names;
  for (int i = 0; i < 10; ++i) {
    names.push_back("img" + std::to_string(i));
  }
  Dataset train(base.images(), base.labels(), Split::train, names);
  auto mixed = with_infrared_copies(train, 0.3);
  ASSERT_EQ(mixed.size(), 13u);
  EXPECT_EQ(mixed.names()[10], "img0:ir");
  EXPECT_EQ(mixed.labels()[12], train.labels()[2]);
  auto proxy = to_infrared_proxy(train.image(1));
  EXPECT_TRUE(torch::equal(mixed.image(11), proxy.expand({3, -1, -1})));
  EXPECT_EQ(with_infrared_copies(train, 0.0).size(), 10u);
}
