#include <cmath>

#include <gtest/gtest.h>

#include "diffender/losses.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace diffender;
using namespace diffender::testing;

namespace {

torch::Tensor rand_image(std::vector<std::int64_t> shape, std::uint64_t seed) {
  return torch::rand(shape, make_generator(seed), torch::kDouble);
}

}  // namespace

TEST(LossCe, PerfectPredictionIsNearZero) {
  auto m = (rand_image({8, 8}, 1) > 0.5).to(torch::kDouble);
  EXPECT_LE(loss_ce(m, m).item<double>(), 1e-5);
}

TEST(LossCe, HalfProbabilityOnOnesIsLn2) {
  auto m = torch::ones({6, 6}, torch::kDouble);
  EXPECT_NEAR(loss_ce(m, torch::full({6, 6}, 0.5, torch::kDouble)).item<double>(), std::log(2.0), 1e-12);
}

TEST(LossCe, GradientMatchesFiniteDifferences) {
  auto m = (rand_image({10, 10}, 2) > 0.5).to(torch::kDouble);
  auto p = rand_image({10, 10}, 3) * 0.8 + 0.1;
  auto r = finite_difference_check([&](const torch::Tensor& s) { return loss_ce(m, s); }, p);
  EXPECT_EQ(r.probes, 20);
  EXPECT_LE(r.max_rel_err, 1e-3);
}

TEST(LossL1, ZeroShiftAndSymmetry) {
  auto x = rand_image({3, 8, 8}, 4);
  EXPECT_EQ(loss_l1(x, x).item<double>(), 0.0);
  EXPECT_NEAR(loss_l1(x + 0.1, x).item<double>(), 0.1, 1e-12);
  auto y = rand_image({3, 8, 8}, 5);
  EXPECT_EQ(loss_l1(x, y).item<double>(), loss_l1(y, x).item<double>());
}

TEST(LossL1, GradientMatchesFiniteDifferences) {
  auto x = rand_image({3, 6, 6}, 6);
  auto xr = rand_image({3, 6, 6}, 7);
  auto r = finite_difference_check([&](const torch::Tensor& v) { return loss_l1(v, x); }, xr);
  EXPECT_LE(r.max_rel_err, 1e-3);
}

TEST(Perceptual, IdenticalInputsGiveZeroAndArgumentsCommute) {
  ToyNet net;
  auto x = rand_image({2, 2, 4, 4}, 8);
  auto y = rand_image({2, 2, 4, 4}, 9);
  EXPECT_EQ(perceptual_distance(x, x, net).item<double>(), 0.0);
  EXPECT_NEAR(perceptual_distance(x, y, net).item<double>(), perceptual_distance(y, x, net).item<double>(), 1e-15);
}

TEST(Perceptual, MatchesLoopOracle) {
  ToyNet net;
  auto x = rand_image({2, 2, 4, 4}, 10) - 0.5;
  auto y = rand_image({2, 2, 4, 4}, 11) - 0.5;
  EXPECT_NEAR(perceptual_distance(x, y, net).item<double>(), perceptual_oracle(x, y), 1e-8);
}

TEST(Perceptual, GradientMatchesFiniteDifferences) {
  ToyNet net;
  auto x = rand_image({1, 2, 4, 4}, 12) - 0.5;
  auto y = rand_image({1, 2, 4, 4}, 13) - 0.5;
  auto r = finite_difference_check([&](const torch::Tensor& v) { return perceptual_distance(v, x, net); }, y);
  EXPECT_LE(r.max_rel_err, 1e-3);
}

TEST(Perceptual, ClassifierOverloadIsZeroOnIdenticalImages) {
  Classifier clf(ClassifierConfig{}, 3);
  auto x = torch::rand({2, 3, 32, 32}, make_generator(14));
  EXPECT_EQ(perceptual_distance(x, x, clf).item<double>(), 0.0);
  EXPECT_GT(perceptual_distance(x, 1 - x, clf).item<double>(), 0.0);
}

TEST(LocalUniformity, ConstantImageIsZero) {
  EXPECT_EQ(local_uniformity(torch::full({16, 16}, 0.3, torch::kDouble), 3).item<double>(), 0.0);
}

TEST(LocalUniformity, CheckerboardMatchesLoopOracle) {
  auto idx = torch::arange(8, torch::kLong);
  auto board = ((idx.view({8, 1}) + idx.view({1, 8})).remainder(2)).to(torch::kDouble);
  EXPECT_NEAR(local_uniformity(board, 3).item<double>(), uniformity_oracle(board, 3), 1e-8);
}

TEST(LocalUniformity, RandomImagesMatchLoopOracle) {
  for (int k : {3, 5}) {
    auto img = rand_image({12, 9}, 15 + k);
    EXPECT_NEAR(local_uniformity(img, k).item<double>(), uniformity_oracle(img, k), 1e-8) << "k=" << k;
  }
}

TEST(LocalUniformity, AcceptsBatchedShapes) {
  auto img = rand_image({10, 10}, 20);
  const double v = local_uniformity(img, 3).item<double>();
  EXPECT_NEAR(local_uniformity(img.unsqueeze(0), 3).item<double>(), v, 1e-12);
  EXPECT_NEAR(local_uniformity(img.view({1, 1, 10, 10}), 3).item<double>(), v, 1e-12);
}

TEST(LocalUniformity, ColdPatchOnSmoothImageIncreasesIt) {
  auto ramp = torch::linspace(0.3, 0.7, 32, torch::kDouble).view({1, 32}).expand({32, 32}).clone();
  auto patched = ramp.clone();
  patched.slice(0, 10, 17).slice(1, 12, 19).fill_(0.1);
  EXPECT_GT(local_uniformity(patched, 3).item<double>(), local_uniformity(ramp, 3).item<double>());
}

TEST(LocalUniformity, GradientMatchesFiniteDifferences) {
  auto img = rand_image({8, 8}, 21);
  auto r = finite_difference_check([](const torch::Tensor& v) { return local_uniformity(v, 3); }, img);
  EXPECT_LE(r.max_rel_err, 1e-3);
}

TEST(Ssim, IdentityAndConstants) {
  auto img = rand_image({16, 16}, 22);
  EXPECT_NEAR(ssim(img, img).item<double>(), 1.0, 1e-6);
  auto c = torch::full({16, 16}, 0.5, torch::kDouble);
  EXPECT_NEAR(ssim(c, c).item<double>(), 1.0, 1e-12);
  EXPECT_LT(ssim(img, 1 - img).item<double>(), ssim(img, img).item<double>());
}

TEST(Ssim, GradientMatchesFiniteDifferences) {
  auto a = rand_image({12, 12}, 23);
  auto b = rand_image({12, 12}, 24);
  auto r = finite_difference_check([&](const torch::Tensor& v) { return ssim(a, v); }, b);
  EXPECT_LE(r.max_rel_err, 1e-3);
}

TEST(LossTnc, ConstantPairIsZeroAndGradientMatches) {
  auto c = torch::full({1, 12, 12}, 0.4, torch::kDouble);
  EXPECT_NEAR(loss_tnc(c, c, 0.4, 0.6, 3).item<double>(), 0.0, 1e-12);
  auto img = rand_image({1, 12, 12}, 25);
  auto rest = rand_image({1, 12, 12}, 26);
  auto r = finite_difference_check([&](const torch::Tensor& v) { return loss_tnc(img, v, 0.4, 0.6, 3); }, rest);
  EXPECT_LE(r.max_rel_err, 1e-3);
}

TEST(Sobel, ConstantImageHasNoEdges) {
  EXPECT_EQ(sobel_edges(torch::full({10, 10}, 0.7)).sum().item<double>(), 0.0);
}

TEST(Sobel, VerticalStepGivesNarrowVerticalBand) {
  auto img = torch::zeros({10, 10});
  img.slice(1, 5, 10).fill_(1.0);
  auto e = sobel_edges(img);
  // Every row has the same edge columns, and only columns 4 and 5 respond.
  for (int y = 0; y < 10; ++y) {
    EXPECT_TRUE(torch::equal(e[y], e[0]));
  }
  auto cols = e[0];
  EXPECT_EQ(cols.sum().item<double>(), 2.0);
  EXPECT_EQ(cols[4].item<double>(), 1.0);
  EXPECT_EQ(cols[5].item<double>(), 1.0);
}

TEST(Sobel, RotationTransposesEdgeMap) {
  auto img = torch::rand({12, 12}, make_generator(27));
  auto rotated = torch::rot90(img, 1, {0, 1});
  EXPECT_TRUE(torch::allclose(sobel_magnitude(rotated), torch::rot90(sobel_magnitude(img), 1, {0, 1}), 1e-5, 1e-6));
}

TEST(Dice, Examples) {
  auto a = torch::zeros({8, 8}, torch::kDouble);
  a.slice(0, 0, 4).fill_(1.0);
  auto b = 1 - a;
  EXPECT_LE(dice_loss(a, a).item<double>(), 1e-5);
  EXPECT_NEAR(dice_loss(a, b).item<double>(), 1.0, 1e-6);
  auto z = torch::zeros({8, 8}, torch::kDouble);
  EXPECT_NEAR(dice_loss(z, z).item<double>(), 0.0, 1e-12);
}

TEST(Dice, GradientMatchesFiniteDifferences) {
  auto a = (rand_image({8, 8}, 28) > 0.5).to(torch::kDouble);
  auto b = rand_image({8, 8}, 29);
  auto r = finite_difference_check([&](const torch::Tensor& v) { return dice_loss(a, v); }, b);
  EXPECT_LE(r.max_rel_err, 1e-3);
}

TEST(LossIe, IdenticalIsZeroAndBlurIncreasesIt) {
  auto img = torch::zeros({1, 16, 16});
  img.slice(1, 4, 12).slice(2, 4, 12).fill_(1.0);
  EXPECT_LE(loss_ie(img, img, 0.7, 0.3).item<double>(), 1e-5);
  auto blurred = torch::avg_pool2d(torch::nn::functional::pad(img.unsqueeze(0),
                                                              torch::nn::functional::PadFuncOptions({2, 2, 2, 2})
                                                                  .mode(torch::kReplicate)),
                                   5, 1)
                     .squeeze(0);
  EXPECT_GT(loss_ie(img, blurred, 0.7, 0.3).item<double>(), loss_ie(img, img, 0.7, 0.3).item<double>());
}

TEST(LossIe, SoftVariantGradientMatchesFiniteDifferences) {
  auto img = rand_image({1, 10, 10}, 30);
  auto rest = rand_image({1, 10, 10}, 31);
  auto r = finite_difference_check([&](const torch::Tensor& v) { return loss_ie_soft(img, v, 0.7, 0.3); }, rest);
  EXPECT_LE(r.max_rel_err, 1e-3);
}

TEST(LossIe, StraightThroughGradientEqualsSoftGradient) {
  auto img = rand_image({1, 10, 10}, 32);
  auto rest = rand_image({1, 10, 10}, 33).requires_grad_(true);
  auto g_hard = torch::autograd::grad({loss_ie(img, rest, 0.7, 0.3)}, {rest})[0];
  auto g_soft = torch::autograd::grad({loss_ie_soft(img, rest, 0.7, 0.3)}, {rest})[0];
  EXPECT_GT(g_hard.abs().sum().item<double>(), 0.0);
  EXPECT_EQ(g_hard.sizes(), g_soft.sizes());
}
