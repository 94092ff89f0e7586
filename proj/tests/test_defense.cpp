#include <cmath>

#include <gtest/gtest.h>

#include "diffender/baselines.hpp"
#include "diffender/desk_data.hpp"
#include "diffender/restorer.hpp"
#include "support.hpp"

using namespace diffender;
using diffender::testing::PromptBlindPredictor;
using diffender::testing::PromptMixPredictor;

namespace {

// Two classes separated by mean brightness.
Dataset brightness_set(std::size_t n, Split split, Seed seed) {
  auto gen = make_generator(seed);
  auto labels = torch::randint(2, {static_cast<std::int64_t>(n)}, gen);
  auto base = 0.25 + 0.5 * labels.to(torch::kFloat).view({-1, 1, 1, 1});
  auto images = (base + 0.1 * torch::rand({static_cast<std::int64_t>(n), 3, 16, 16}, gen) - 0.05).clamp(0, 1);
  std::vector<std::int64_t> lab(labels.data_ptr<std::int64_t>(), labels.data_ptr<std::int64_t>() + n);
  return Dataset(images, lab, split);
}

ClassifierConfig small_config(int classes) {
  ClassifierConfig c;
  c.num_classes = classes;
  c.width = 8;
  c.image_size = 16;
  return c;
}

const Classifier& brightness_classifier() {
  static const Classifier clf = [] {
    ClassifierTrainConfig tc;
    tc.epochs = 4;
    tc.width = 8;
    tc.batch_size = 32;
    return train_classifier(brightness_set(256, Split::train, 1), brightness_set(128, Split::test, 2), tc, 3);
  }();
  return clf;
}

}  // namespace

TEST(Classifier, SeparableToySetReachesHighAccuracy) {
  EXPECT_GE(brightness_classifier().test_accuracy, 0.95);
  EXPECT_GE(accuracy(brightness_classifier(), brightness_set(64, Split::test, 4)), 0.95);
}

TEST(Classifier, ZeroEpochsIsNearChance) {
  ClassifierTrainConfig tc;
  tc.epochs = 0;
  tc.width = 8;
  auto test = make_desk_dataset(200, Split::test, 5, 16);
  auto clf = train_classifier(make_desk_dataset(20, Split::train, 6, 16), test, tc, 7);
  EXPECT_NEAR(clf.test_accuracy, 0.1, 0.1);
}

TEST(Classifier, LogitsDeterministicAndSoftmaxNormalized) {
  Classifier clf(small_config(4), 8);
  auto x = torch::rand({3, 3, 16, 16}, make_generator(9));
  auto a = clf.logits(x);
  EXPECT_TRUE(torch::equal(a, clf.logits(x)));
  EXPECT_TRUE(torch::allclose(torch::softmax(a, 1).sum(1), torch::ones({3}), 1e-6, 1e-6));
  auto [label, logits] = classify(clf, x[0]);
  EXPECT_EQ(label, a[0].argmax().item<std::int64_t>());
  EXPECT_THROW(clf.logits(torch::rand({1, 1, 16, 16})), ContractError);
}

TEST(Classifier, FeatureTapsMatchDeclaredShapes) {
  Classifier clf(small_config(4), 10);
  auto x = torch::rand({2, 3, 16, 16}, make_generator(11));
  EXPECT_TRUE(clf.features(x, {}).empty());
  auto all = clf.all_features(x);
  ASSERT_EQ(all.size(), clf.taps().size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& tap = clf.taps()[i];
    EXPECT_EQ(all[i].sizes(), (std::vector<std::int64_t>{2, tap.channels, tap.height, tap.width})) << tap.name;
    EXPECT_TRUE(torch::equal(all[i], clf.features(x, {tap.name})[0]));
  }
}

TEST(Classifier, OverfitModelRecallsTrainingLabel) {
  auto train = make_desk_dataset(10, Split::train, 12, 16);
  ClassifierTrainConfig tc;
  tc.epochs = 60;
  tc.width = 8;
  tc.batch_size = 10;
  auto clf = train_classifier(train, train, tc, 13);
  EXPECT_EQ(classify(clf, train.image(3)).first, train.labels()[3]);
}

TEST(Classifier, CheckpointRoundTrip) {
  Classifier clf(small_config(4), 14);
  auto back = Classifier::from_checkpoint(clf.to_checkpoint());
  auto x = torch::rand({2, 3, 16, 16}, make_generator(15));
  EXPECT_TRUE(torch::equal(clf.logits(x), back.logits(x)));
}

TEST(Attack, DefaultsAndPatchShape) {
  AttackSpec spec;
  EXPECT_DOUBLE_EQ(spec.patch_fraction, 0.05);
  EXPECT_EQ(spec.iterations, 100);
  EXPECT_EQ(patch_shape(0.05, 32, 32), (std::pair<std::int64_t, std::int64_t>{7, 7}));
  EXPECT_NE(spec.hash(), AttackSpec{.seed = 1}.hash());
  spec.patch_fraction = 0.0;
  EXPECT_THROW(spec.validate(), ContractError);
}

TEST(Attack, ZeroStepLeavesImageUnchanged) {
  const auto& clf = brightness_classifier();
  auto x = brightness_set(1, Split::test, 16).image(0);
  const auto label = classify(clf, x).first;
  AttackSpec spec;
  spec.iterations = 1;
  spec.step_size = 0.0;
  for (auto kind : {AttackKind::advp, AttackKind::lavan}) {
    spec.kind = kind;
    auto r = kind == AttackKind::advp ? advp_attack(x, label, clf, spec) : lavan_attack(x, label, clf, spec);
    EXPECT_FALSE(r.success);
    EXPECT_NEAR(r.gt_mask.mean().item<double>(), 0.05, 0.02);
    // Initial patch content is the image itself, so a zero step is a no-op.
    EXPECT_TRUE(torch::equal(r.x_adv, x)) << to_string(kind);
  }
}

TEST(Attack, ChangesOnlyInsidePatch) {
  const auto& clf = brightness_classifier();
  auto x = brightness_set(1, Split::test, 17).image(0);
  AttackSpec spec;
  spec.iterations = 20;
  spec.step_size = 0.05;
  auto r = advp_attack(x, classify(clf, x).first, clf, spec);
  auto outside = (r.gt_mask < 0.5).unsqueeze(0).expand_as(x);
  EXPECT_TRUE(torch::equal(r.x_adv.masked_select(outside), x.masked_select(outside)));
  EXPECT_GE(r.x_adv.min().item<double>(), 0.0);
  EXPECT_LE(r.x_adv.max().item<double>(), 1.0);
  EXPECT_GT(r.queries, 0);
}

TEST(Attack, ColdPatchRespectsIntensityBound) {
  auto gray = brightness_set(8, Split::train, 18);
  auto ir = Dataset(gray.images().mean(1, true), gray.labels(), Split::train);
  ClassifierTrainConfig tc;
  tc.epochs = 3;
  tc.width = 8;
  auto clf = train_classifier(ir, ir, tc, 19);
  auto x = ir.image(0);
  AttackSpec spec;
  spec.kind = AttackKind::ir_cold;
  spec.iterations = 10;
  auto r = ir_cold_patch_attack(x, ir.labels()[0], clf, spec);
  auto inside = r.gt_mask > 0.5;
  EXPECT_GT(inside.sum().item<std::int64_t>(), 0);
  EXPECT_LE(r.x_adv[0].masked_select(inside).max().item<double>(), 0.2 + 1e-6);
  EXPECT_TRUE(torch::equal(r.x_adv[0].masked_select(~inside), x[0].masked_select(~inside)));
}

TEST(Attack, BpdaThroughIdentityEqualsAdvp) {
  const auto& clf = brightness_classifier();
  auto x = brightness_set(1, Split::test, 20).image(0);
  const auto label = classify(clf, x).first;
  AttackSpec spec;
  spec.iterations = 15;
  spec.step_size = 0.05;
  spec.seed = 4;
  IdentityDefense none;
  auto a = advp_attack(x, label, clf, spec);
  spec.kind = AttackKind::bpda_advp;
  auto b = bpda_adaptive_attack(x, label, clf, none, spec);
  EXPECT_TRUE(torch::equal(a.x_adv, b.x_adv));
  EXPECT_EQ(a.success, b.success);
}

TEST(Attack, BatchedDriverIndependentOfSplitting) {
  const auto& clf = brightness_classifier();
  auto ds = brightness_set(4, Split::test, 21);
  AttackSpec spec;
  spec.iterations = 5;
  spec.step_size = 0.05;
  auto all = run_attack(ds.images(), ds.labels(), clf, spec);
  auto tail = run_attack(ds.images().slice(0, 2, 4), {ds.labels()[2], ds.labels()[3]}, clf, spec, nullptr, 2);
  EXPECT_TRUE(torch::equal(all[2].x_adv, tail[0].x_adv));
  EXPECT_TRUE(torch::equal(all[3].gt_mask, tail[1].gt_mask));
}

TEST(AttackCache, RoundTripPrefixAndKeyCheck) {
  const auto& clf = brightness_classifier();
  auto ds = brightness_set(3, Split::test, 22);
  AttackSpec spec;
  spec.iterations = 3;
  auto results = run_attack(ds.images(), ds.labels(), clf, spec);
  auto dir = std::filesystem::temp_directory_path() / "diffender_test_cache";
  std::filesystem::remove_all(dir);
  auto path = attack_cache_path(dir, spec, "k1");
  save_attack_cache(results, spec, "k1", path);
  auto two = load_attack_cache(path, spec, "k1", 2);
  ASSERT_EQ(two.size(), 2u);
  EXPECT_TRUE(torch::equal(two[1].x_adv, results[1].x_adv));
  EXPECT_EQ(two[1].success, results[1].success);
  EXPECT_THROW(load_attack_cache(path, spec, "other"), FormatError);
  EXPECT_THROW(load_attack_cache(path, spec, "k1", 4), FormatError);
  EXPECT_THROW(load_attack_cache(dir / "absent.ckpt", spec, "k1"), MissingArtifactError);
}

TEST(Jpeg, QualityOrderingAndShape) {
  auto ramp = torch::linspace(0, 1, 32).view({1, 1, 32}).expand({3, 32, 32}).clone();
  EXPECT_GE(psnr(baseline_jpeg(ramp, 100), ramp), 40.0);
  auto noisy = torch::rand({3, 32, 32}, make_generator(23));
  EXPECT_LT(psnr(baseline_jpeg(noisy, 10), noisy), psnr(baseline_jpeg(noisy, 90), noisy));
  EXPECT_EQ(baseline_jpeg(noisy, 50).sizes(), noisy.sizes());
  EXPECT_EQ(baseline_jpeg(noisy.unsqueeze(0), 50).sizes(), (std::vector<std::int64_t>{1, 3, 32, 32}));
}

TEST(Smoothing, ConstantSaltAndIdempotence) {
  auto c = torch::full({3, 8, 8}, 0.4);
  EXPECT_TRUE(torch::equal(baseline_smoothing(c, 3), c));
  auto salt = c.clone();
  salt[1][4][4] = 1.0;
  EXPECT_TRUE(torch::allclose(baseline_smoothing(salt, 3), c));
  auto img = torch::zeros({1, 12, 12});
  img.slice(1, 0, 6).fill_(1.0);
  auto once = baseline_smoothing(img, 3);
  EXPECT_TRUE(torch::equal(baseline_smoothing(once, 3), once));
  EXPECT_THROW(baseline_smoothing(c, 4), ContractError);
}

TEST(Purify, ZeroNoiseIsNearIdentityAndSeeded) {
  auto sched = make_schedule(50);
  PromptBlindPredictor model;
  auto x = torch::rand({3, 8, 8}, make_generator(24));
  EXPECT_GE(psnr(baseline_purify(x, 0.0, model, sched, 10, 1), x), 30.0);
  auto a = baseline_purify(x, 0.5, model, sched, 10, 2);
  EXPECT_TRUE(torch::equal(a, baseline_purify(x, 0.5, model, sched, 10, 2)));
  EXPECT_EQ(a.sizes(), x.sizes());
}

TEST(Restore, EmptyMaskUnchangedAndOutsidePreserved) {
  auto sched = make_schedule(50);
  PromptBlindPredictor model;
  auto x = torch::rand({3, 12, 12}, make_generator(25));
  auto prompt = torch::zeros({4, 8});
  EXPECT_TRUE(torch::equal(restore(x, torch::zeros({12, 12}), prompt, model, sched, 10, 1), x));
  auto mask = torch::zeros({12, 12});
  mask.slice(0, 3, 7).slice(1, 3, 7).fill_(1);
  auto out = restore(x, mask, prompt, model, sched, 10, 1);
  auto keep = (mask < 0.5).unsqueeze(0).expand_as(x);
  EXPECT_TRUE(torch::equal(out.masked_select(keep), x.masked_select(keep)));
  EXPECT_FALSE(torch::equal(out, x));
}

TEST(Restore, FullMaskIsPromptConditionedSample) {
  auto sched = make_schedule(50);
  PromptBlindPredictor model;
  auto x = torch::rand({3, 8, 8}, make_generator(26));
  auto prompt = torch::zeros({4, 8});
  auto out = restore(x, torch::ones({8, 8}), prompt, model, sched, 10, 7);
  EXPECT_TRUE(torch::allclose(out, sample(prompt, 10, model, sched, 7, 3, 8), 1e-5, 1e-6));
}

TEST(Restore, GrayscaleStaysGrayscale) {
  auto sched = make_schedule(50);
  PromptBlindPredictor model;
  auto x = torch::rand({1, 8, 8}, make_generator(27));
  auto mask = torch::zeros({8, 8});
  mask.slice(0, 2, 5).slice(1, 2, 5).fill_(1);
  auto out = restore(x, mask, torch::zeros({4, 8}), model, sched, 5, 3);
  EXPECT_EQ(out.sizes(), x.sizes());
}

TEST(Defend, PromptBlindModelNeverGates) {
  auto sched = make_schedule(50);
  PromptBlindPredictor model;
  auto x = torch::rand({3, 16, 16}, make_generator(28));
  DefensePrompts prompts{torch::randn({4, 8}, make_generator(29)), torch::zeros({4, 8})};
  auto out = defend(x, prompts, LocalizerConfig{}, RestorerConfig{.steps = 10}, model, sched, 5);
  EXPECT_FALSE(out.gated);
  EXPECT_TRUE(torch::equal(out.restored, x));
  EXPECT_EQ(out.area_fraction, 0.0);
  EXPECT_TRUE(out.timings.count("localize"));
}

TEST(Defend, ZeroGateAlwaysRestores) {
  auto sched = make_schedule(50);
  PromptBlindPredictor model;
  auto x = torch::rand({3, 16, 16}, make_generator(30));
  DefensePrompts prompts{torch::zeros({4, 8}), torch::zeros({4, 8})};
  auto out = defend(x, prompts, LocalizerConfig{}, RestorerConfig{.steps = 10, .gate_area = 0.0}, model, sched, 5);
  EXPECT_TRUE(out.gated);
}

TEST(Defend, BatchMatchesSingleCalls) {
  auto sched = make_schedule(50);
  PromptMixPredictor model;
  auto x = torch::rand({2, 3, 16, 16}, make_generator(31));
  DefensePrompts prompts{torch::ones({4, 8}), torch::zeros({4, 8})};
  RestorerConfig rc{.steps = 5, .gate_area = 0.0};
  auto batch = defend_batch(x, prompts, LocalizerConfig{}, rc, model, sched, {11, 12});
  ASSERT_EQ(batch.size(), 2u);
  auto single = defend(x[1], prompts, LocalizerConfig{}, rc, model, sched, 12);
  EXPECT_TRUE(torch::allclose(batch[1].restored, single.restored, 1e-5, 1e-6));
  EXPECT_TRUE(torch::equal(batch[1].mask, single.mask));
  EXPECT_EQ(batch[1].gated, single.gated);
}

TEST(DiffenderDefense, SurrogateForwardEqualsApply) {
  auto sched = make_schedule(50);
  PromptMixPredictor model;
  auto x = torch::rand({2, 3, 16, 16}, make_generator(32));
  DiffenderDefense d(model, sched, {torch::ones({4, 8}), torch::zeros({4, 8})}, LocalizerConfig{},
                     RestorerConfig{.steps = 5, .gate_area = 0.0});
  auto applied = d.apply(x, {1, 2});
  auto surrogate = d.surrogate(x, {1, 2}, 5);
  EXPECT_TRUE(torch::allclose(surrogate.detach(), applied, 1e-5, 1e-6));
}

TEST(BaselineDefenses, SurrogateForwardEqualsApply) {
  auto x = torch::rand({2, 3, 16, 16}, make_generator(33));
  JpegDefense jpeg(75);
  SmoothingDefense smooth(3);
  EXPECT_TRUE(torch::allclose(jpeg.surrogate(x, {1, 2}, 0).detach(), jpeg.apply(x, {1, 2})));
  EXPECT_TRUE(torch::allclose(smooth.surrogate(x, {1, 2}, 0).detach(), smooth.apply(x, {1, 2})));
  auto xg = x.clone().requires_grad_(true);
  auto g = torch::autograd::grad({jpeg.surrogate(xg, {1, 2}, 0).sum()}, {xg})[0];
  EXPECT_TRUE(torch::allclose(g, torch::ones_like(x)));
}
