#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "diffender/checkpoint.hpp"
#include "diffender/data_io.hpp"

namespace diffender {

/// Declared feature tap: activation after a block's ReLU, before pooling.
struct FeatureTap {
  std::string name;
  std::int64_t channels, height, width;
};

struct ClassifierConfig {
  int in_channels = 3;
  int num_classes = 10;
  int width = 16;
  int image_size = 32;
};

class ConvNetImpl;

/// Four conv blocks + global pooling + linear head. Serves as the attack
/// target and as the feature backbone of the perceptual distance.
class Classifier {
 public:
  Classifier(const ClassifierConfig& config, Seed seed);

  /// [B,C,H,W] -> [B,num_classes]; differentiable in the input.
  torch::Tensor logits(const torch::Tensor& batch) const;
  /// Raw activations at the named taps, in the requested order.
  std::vector<torch::Tensor> features(const torch::Tensor& batch, const std::vector<std::string>& layers) const;
  std::vector<torch::Tensor> all_features(const torch::Tensor& batch) const;

  const std::vector<FeatureTap>& taps() const { return taps_; }
  const ClassifierConfig& config() const { return config_; }

  double train_accuracy = 0.0;
  double test_accuracy = 0.0;

  Checkpoint to_checkpoint() const;
  static Classifier from_checkpoint(const Checkpoint& ckpt);
  double checksum() const;

  torch::nn::Module& module();

 private:
  void check_input(const torch::Tensor& batch) const;

  ClassifierConfig config_;
  std::shared_ptr<ConvNetImpl> net_;
  std::vector<FeatureTap> taps_;
};

/// Argmax label and logits of one image [C,H,W].
std::pair<std::int64_t, torch::Tensor> classify(const Classifier& clf, const torch::Tensor& image);

/// Argmax labels of a batch.
torch::Tensor predict_labels(const Classifier& clf, const torch::Tensor& batch, std::int64_t chunk = 256);

/// Fraction of `data` classified correctly.
double accuracy(const Classifier& clf, const Dataset& data);

std::vector<torch::Tensor> features(const Classifier& clf, const torch::Tensor& image,
                                    const std::vector<std::string>& layers);

struct ClassifierTrainConfig {
  int epochs = 6;
  int batch_size = 64;
  double learn_rate = 2e-3;
  int width = 16;
};

/// Cross-entropy training with Adam; records train and test accuracy.
Classifier train_classifier(const Dataset& train, const Dataset& test, const ClassifierTrainConfig& config,
                            Seed seed);

}  // namespace diffender
