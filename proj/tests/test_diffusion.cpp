#include <cmath>

#include <gtest/gtest.h>

#include "diffender/desk_data.hpp"
#include "diffender/diffusion.hpp"
#include "support.hpp"

using namespace diffender;
using diffender::testing::OraclePredictor;
using diffender::testing::PromptBlindPredictor;

namespace {

// Independent cumulative product of the linear schedule.
std::vector<double> alpha_bar_oracle(int steps) {
  std::vector<double> out;
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    const double beta = 1e-4 + (0.02 - 1e-4) * t / (steps - 1);
    prod *= 1.0 - beta;
    out.push_back(prod);
  }
  return out;
}

class ZeroPredictor final : public NoisePredictor {
 public:
  torch::Tensor predict_noise(const torch::Tensor& x_t, const torch::Tensor&, const torch::Tensor&) const override {
    return torch::zeros_like(x_t);
  }
  std::int64_t embed_dim() const override { return 8; }
};

DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.base_channels = 8;
  c.embed_dim = 16;
  c.max_tokens = 8;
  c.image_size = 16;
  c.vocabulary = default_vocabulary(desk_class_names());
  return c;
}

}  // namespace

TEST(Schedule, TwoStepsByHand) {
  auto s = make_schedule(2);
  EXPECT_DOUBLE_EQ(s.beta(0), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(1), 0.02);
  EXPECT_NEAR(s.alpha_bar(0), 0.9999, 1e-15);
  EXPECT_NEAR(s.alpha_bar(1), 0.9999 * 0.98, 1e-15);
}

TEST(Schedule, TwoHundredFiftyStepsMatchOracle) {
  auto s = make_schedule(250);
  auto oracle = alpha_bar_oracle(250);
  for (int t = 0; t < 250; ++t) {
    EXPECT_NEAR(s.alpha_bar(t), oracle[t], 1e-12);
    if (t > 0) {
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    }
  }
  // The linear schedule over 250 steps bottoms out near 0.08.
  EXPECT_NEAR(s.alpha_bar(249), 0.0797, 5e-4);
}

TEST(Schedule, SingleStepIsContractError) {
  EXPECT_THROW(make_schedule(1), ContractError);
}

TEST(Schedule, RatioToStep) {
  auto s = make_schedule(250);
  EXPECT_EQ(s.step_for_ratio(0.0), 0);
  EXPECT_EQ(s.step_for_ratio(0.5), 125);
  EXPECT_EQ(s.step_for_ratio(1.0), 249);
  EXPECT_DOUBLE_EQ(s.t_star(), 0.5);
}

TEST(ForwardDiffuse, NearIdentityAtStepZero) {
  auto s = make_schedule(250);
  auto x0 = torch::rand({3, 8, 8}, make_generator(1));
  auto xt = forward_diffuse(x0, 0, torch::zeros_like(x0), s);
  EXPECT_TRUE(torch::allclose(xt, x0 * std::sqrt(0.9999), 0, 1e-6));
}

TEST(ForwardDiffuse, ZeroSignalIsScaledNoise) {
  auto s = make_schedule(250);
  auto eps = torch::randn({3, 8, 8}, make_generator(2));
  auto xt = forward_diffuse(torch::zeros_like(eps), 100, eps, s);
  EXPECT_TRUE(torch::allclose(xt, std::sqrt(1 - s.alpha_bar(100)) * eps, 0, 1e-6));
}

TEST(ForwardDiffuse, MidpointCoefficientsMatchOracle) {
  auto s = make_schedule(250);
  const int t = 125;
  const double ab = alpha_bar_oracle(250)[t];
  auto x0 = torch::full({1, 2, 2}, 1.0, torch::kDouble);
  auto eps = torch::full({1, 2, 2}, 1.0, torch::kDouble);
  EXPECT_NEAR(forward_diffuse(x0, t, torch::zeros_like(eps), s)[0][0][0].item<double>(), std::sqrt(ab), 1e-12);
  EXPECT_NEAR(forward_diffuse(torch::zeros_like(x0), t, eps, s)[0][0][0].item<double>(), std::sqrt(1 - ab), 1e-12);
}

TEST(OneStep, OracleNoiseInvertsForwardDiffusion) {
  auto s = make_schedule(250);
  auto x0 = torch::rand({2, 3, 8, 8}, make_generator(3));
  auto eps = torch::randn({2, 3, 8, 8}, make_generator(4));
  for (int t : {0, 60, 125, 249}) {
    auto xt = forward_diffuse(x0, t, eps, s);
    OraclePredictor oracle(eps);
    auto x0_hat = predict_x0_one_step(xt, t, torch::zeros({4, 8}), oracle, s);
    EXPECT_LE((x0_hat - x0).abs().max().item<double>(), 1e-5) << "t=" << t;
  }
}

TEST(OneStep, ZeroPredictorDividesBySqrtAlphaBar) {
  auto s = make_schedule(250);
  auto xt = torch::rand({3, 8, 8}, make_generator(5)) * 0.8;
  ZeroPredictor zero;
  auto x0_hat = predict_x0_one_step(xt, 100, torch::zeros({4, 8}), zero, s);
  auto expected = (xt / std::sqrt(s.alpha_bar(100))).clamp(-0.5, 1.5);
  EXPECT_TRUE(torch::allclose(x0_hat, expected, 1e-6, 1e-6));
}

TEST(StridedTimesteps, EvenlySpacedAndDescending) {
  EXPECT_EQ(strided_timesteps(249, 1), std::vector<int>{249});
  auto ts = strided_timesteps(249, 10);
  ASSERT_EQ(ts.size(), 10u);
  EXPECT_EQ(ts.front(), 249);
  EXPECT_EQ(ts.back(), 0);
  for (std::size_t i = 1; i < ts.size(); ++i) {
    EXPECT_LT(ts[i], ts[i - 1]);
  }
  EXPECT_EQ(strided_timesteps(5, 100).size(), 6u);
}

TEST(Sample, DeterministicInSeedAndSeedSensitive) {
  auto s = make_schedule(50);
  PromptBlindPredictor model;
  auto tokens = torch::zeros({4, 8});
  auto a = sample(tokens, 10, model, s, 11, 3, 8);
  auto b = sample(tokens, 10, model, s, 11, 3, 8);
  auto c = sample(tokens, 10, model, s, 12, 3, 8);
  EXPECT_TRUE(torch::equal(a, b));
  EXPECT_GT((a != c).to(torch::kFloat).mean().item<double>(), 0.01);
  EXPECT_GE(a.min().item<double>(), 0.0);
  EXPECT_LE(a.max().item<double>(), 1.0);
}

TEST(Sample, SingleStepIsOneStepPredictionAtFinalStep) {
  auto s = make_schedule(50);
  PromptBlindPredictor model;
  auto tokens = torch::zeros({4, 8});
  const Seed seed = 13;
  auto out = sample(tokens, 1, model, s, seed, 3, 8);
  // Reconstruct the starting state from the same generator draw.
  auto gen = make_generator(seed);
  auto noise = torch::randn({1, 3, 8, 8}, gen);
  auto x_T = forward_diffuse(torch::full_like(noise, 0.5), s.steps() - 1, noise, s);
  auto expected = predict_x0_one_step(x_T, s.steps() - 1, tokens, model, s).clamp(0, 1)[0];
  EXPECT_TRUE(torch::allclose(out, expected, 1e-5, 1e-6));
}

TEST(Inpaint, EmptyMaskReturnsInputExactly) {
  auto s = make_schedule(50);
  PromptBlindPredictor model;
  auto x = torch::rand({3, 8, 8}, make_generator(14));
  auto out = inpaint(x, torch::zeros({8, 8}), torch::zeros({4, 8}), 10, model, s, 3);
  EXPECT_TRUE(torch::equal(out, x));
}

TEST(Inpaint, FullMaskEqualsSample) {
  auto s = make_schedule(50);
  PromptBlindPredictor model;
  auto x = torch::rand({3, 8, 8}, make_generator(15));
  auto tokens = torch::zeros({4, 8});
  auto out = inpaint(x, torch::ones({8, 8}), tokens, 10, model, s, 21);
  auto ref = sample(tokens, 10, model, s, 21, 3, 8);
  EXPECT_TRUE(torch::allclose(out, ref, 1e-5, 1e-6));
}

TEST(Inpaint, OutsideMaskBitEqualAndInsideInRange) {
  auto s = make_schedule(50);
  PromptBlindPredictor model;
  auto x = torch::rand({2, 3, 8, 8}, make_generator(16));
  auto mask = torch::zeros({2, 8, 8});
  mask.slice(1, 2, 5).slice(2, 3, 6).fill_(1);
  auto out = inpaint(x, mask, torch::zeros({4, 8}), 10, model, s, 5);
  auto keep = (mask == 0).unsqueeze(1).expand_as(x);
  EXPECT_TRUE(torch::equal(out.masked_select(keep), x.masked_select(keep)));
  EXPECT_GE(out.min().item<double>(), 0.0);
  EXPECT_LE(out.max().item<double>(), 1.0);
}

TEST(Inpaint, SeededBatchMatchesSingleCalls) {
  auto s = make_schedule(50);
  PromptBlindPredictor model;
  auto x = torch::rand({2, 3, 8, 8}, make_generator(17));
  auto mask = torch::zeros({2, 8, 8});
  mask.slice(1, 1, 6).slice(2, 1, 6).fill_(1);
  auto tokens = torch::zeros({4, 8});
  auto batch = inpaint_seeded(x, mask, tokens, 8, model, s, {31, 32});
  EXPECT_TRUE(torch::allclose(batch[0], inpaint(x[0], mask[0], tokens, 8, model, s, 31), 1e-6, 1e-7));
  EXPECT_TRUE(torch::allclose(batch[1], inpaint(x[1], mask[1], tokens, 8, model, s, 32), 1e-6, 1e-7));
}

TEST(Channels, LiftAndProject) {
  auto g = torch::rand({2, 1, 4, 4}, make_generator(18));
  auto rgb = lift_to_model(g);
  EXPECT_EQ(rgb.size(1), 3);
  EXPECT_TRUE(torch::allclose(project_from_model(rgb, 1), g));
  EXPECT_TRUE(torch::equal(lift_to_model(rgb), rgb));
}

TEST(Prompt, EmptyAppendAndBatch) {
  auto e = PromptEmbedding::empty(16, 128);
  EXPECT_EQ(e.count(), 16);
  EXPECT_EQ(e.tokens.abs().sum().item<double>(), 0.0);
  auto p = e.appended(torch::ones({1, 128}));
  EXPECT_EQ(p.count(), 17);
  EXPECT_EQ(p.batched(3).sizes(), (std::vector<std::int64_t>{3, 17, 128}));
}

TEST(Denoiser, CheckpointRoundTripPreservesPredictions) {
  DenoiserModel m(tiny_config(), 3);
  auto back = DenoiserModel::from_checkpoint(m.to_checkpoint());
  auto x = torch::rand({1, 3, 16, 16}, make_generator(19));
  auto t = torch::full({1}, 40, torch::kLong);
  auto tok = m.caption({"a", "photo", "of", "a", desk_class_names()[0]}).unsqueeze(0);
  torch::NoGradGuard ng;
  EXPECT_TRUE(torch::equal(m.predict_noise(x, t, tok), back.predict_noise(x, t, tok)));
  EXPECT_EQ(m.checksum(), back.checksum());
  EXPECT_THROW(m.word("not-a-word"), ContractError);
}

TEST(TrainDiffusion, ZeroEpochsRecordsInitialLossOnly) {
  auto ds = make_desk_dataset(16, Split::train, 1, 16);
  DiffusionTrainConfig tc;
  tc.epochs = 0;
  tc.class_names = desk_class_names();
  auto r = train_diffusion(ds, tc, tiny_config(), 2);
  EXPECT_GT(r.initial_loss, 0.0);
  EXPECT_TRUE(r.epoch_losses.empty());
  EXPECT_DOUBLE_EQ(r.final_loss, r.initial_loss);
  DenoiserModel fresh(tiny_config(), 2);
  EXPECT_EQ(r.model.checksum(), fresh.checksum());
}

TEST(TrainDiffusion, OverfitsSingleImage) {
  auto ds = make_desk_dataset(1, Split::train, 2, 16);
  DiffusionTrainConfig tc;
  tc.epochs = 200;
  tc.batch_size = 1;
  tc.caption_dropout = 0.0;
  tc.class_names = desk_class_names();
  auto r = train_diffusion(ds, tc, tiny_config(), 3);
  EXPECT_LE(r.final_loss, 0.5 * r.initial_loss);
}
