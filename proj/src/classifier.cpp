#include "diffender/classifier.hpp"

#include <algorithm>

namespace nn = torch::nn;

namespace diffender {

class ConvNetImpl : public nn::Module {
 public:
  ConvNetImpl(int in_channels, int width, int num_classes) {
    const int widths[4] = {width, 2 * width, 4 * width, 4 * width};
    int in = in_channels;
    for (int i = 0; i < 4; ++i) {
      convs_.push_back(register_module("conv" + std::to_string(i + 1),
                                       nn::Conv2d(nn::Conv2dOptions(in, widths[i], 3).padding(1))));
      in = widths[i];
    }
    head_ = register_module("head", nn::Linear(in, num_classes));
  }

  /// Returns the logits; fills `taps` with the four block activations when given.
  torch::Tensor forward(const torch::Tensor& x, std::vector<torch::Tensor>* taps) {
    auto h = x - 0.5;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = torch::relu(convs_[i]->forward(h));
      if (taps != nullptr) {
        taps->push_back(h);
      }
      if (i + 1 < convs_.size()) {
        h = torch::max_pool2d(h, 2);
      }
    }
    return head_->forward(h.mean({2, 3}));
  }

 private:
  std::vector<nn::Conv2d> convs_;
  nn::Linear head_{nullptr};
};

Classifier::Classifier(const ClassifierConfig& config, Seed seed) : config_(config) {
  require(config_.in_channels == 1 || config_.in_channels == 3, "classifier input must have 1 or 3 channels");
  require(config_.num_classes >= 2, "classifier needs at least 2 classes");
  require(config_.image_size % 8 == 0, "classifier image size must be a multiple of 8");
  torch::manual_seed(seed);
  net_ = std::make_shared<ConvNetImpl>(config_.in_channels, config_.width, config_.num_classes);
  net_->eval();
  for (auto& p : net_->parameters()) {
    p.set_requires_grad(false);
  }
  const std::int64_t s = config_.image_size, w = config_.width;
  taps_ = {{"block1", w, s, s}, {"block2", 2 * w, s / 2, s / 2}, {"block3", 4 * w, s / 4, s / 4},
           {"block4", 4 * w, s / 8, s / 8}};
}

void Classifier::check_input(const torch::Tensor& batch) const {
  require(batch.dim() == 4 && batch.size(1) == config_.in_channels && batch.size(2) == config_.image_size &&
              batch.size(3) == config_.image_size,
          "classifier input shape mismatch");
}

torch::Tensor Classifier::logits(const torch::Tensor& batch) const {
  check_input(batch);
  return net_->forward(batch.to(torch::kFloat), nullptr);
}

std::vector<torch::Tensor> Classifier::all_features(const torch::Tensor& batch) const {
  check_input(batch);
  std::vector<torch::Tensor> taps;
  net_->forward(batch, &taps);
  return taps;
}

std::vector<torch::Tensor> Classifier::features(const torch::Tensor& batch,
                                                const std::vector<std::string>& layers) const {
  std::vector<std::size_t> wanted;
  for (const auto& name : layers) {
    auto it = std::find_if(taps_.begin(), taps_.end(), [&](const FeatureTap& t) { return t.name == name; });
    require(it != taps_.end(), "unknown feature tap: " + name);
    wanted.push_back(static_cast<std::size_t>(it - taps_.begin()));
  }
  if (wanted.empty()) {
    return {};
  }
  auto taps = all_features(batch);
  std::vector<torch::Tensor> out;
  for (auto i : wanted) {
    out.push_back(taps[i]);
  }
  return out;
}

Checkpoint Classifier::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.kind = CheckpointKind::classifier;
  ckpt.metadata["in_channels"] = std::to_string(config_.in_channels);
  ckpt.metadata["num_classes"] = std::to_string(config_.num_classes);
  ckpt.metadata["width"] = std::to_string(config_.width);
  ckpt.metadata["image_size"] = std::to_string(config_.image_size);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", train_accuracy);
  ckpt.metadata["train_accuracy"] = buf;
  std::snprintf(buf, sizeof buf, "%.17g", test_accuracy);
  ckpt.metadata["test_accuracy"] = buf;
  store_module(*net_, ckpt);
  return ckpt;
}

Classifier Classifier::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != CheckpointKind::classifier) {
    throw FormatError("expected a classifier checkpoint");
  }
  ClassifierConfig config;
  double train_acc = 0.0, test_acc = 0.0;
  try {
    config.in_channels = std::stoi(ckpt.metadata.at("in_channels"));
    config.num_classes = std::stoi(ckpt.metadata.at("num_classes"));
    config.width = std::stoi(ckpt.metadata.at("width"));
    config.image_size = std::stoi(ckpt.metadata.at("image_size"));
    train_acc = std::stod(ckpt.metadata.at("train_accuracy"));
    test_acc = std::stod(ckpt.metadata.at("test_accuracy"));
  } catch (const std::exception& e) {
    throw FormatError(std::string("classifier checkpoint metadata: ") + e.what());
  }
  Classifier clf(config, 0);
  restore_module(*clf.net_, ckpt);
  clf.train_accuracy = train_acc;
  clf.test_accuracy = test_acc;
  return clf;
}

double Classifier::checksum() const {
  double sum = 0.0;
  for (const auto& p : net_->parameters()) {
    auto d = p.detach().to(torch::kDouble);
    sum += d.sum().item<double>() + d.pow(2).sum().item<double>();
  }
  return sum;
}

torch::nn::Module& Classifier::module() { return *net_; }

std::pair<std::int64_t, torch::Tensor> classify(const Classifier& clf, const torch::Tensor& image) {
  require(image.dim() == 3, "classify expects one image [C,H,W]");
  torch::NoGradGuard no_grad;
  auto logits = clf.logits(image.unsqueeze(0)).squeeze(0);
  return {logits.argmax().item<std::int64_t>(), logits};
}

torch::Tensor predict_labels(const Classifier& clf, const torch::Tensor& batch, std::int64_t chunk) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (std::int64_t s = 0; s < batch.size(0); s += chunk) {
    parts.push_back(clf.logits(batch.slice(0, s, std::min(batch.size(0), s + chunk))).argmax(1));
  }
  return parts.empty() ? torch::empty({0}, torch::kLong) : torch::cat(parts);
}

double accuracy(const Classifier& clf, const Dataset& data) {
  if (data.empty()) {
    return 0.0;
  }
  auto pred = predict_labels(clf, data.images());
  return pred.eq(data.label_tensor()).to(torch::kDouble).mean().item<double>();
}

std::vector<torch::Tensor> features(const Classifier& clf, const torch::Tensor& image,
                                    const std::vector<std::string>& layers) {
  torch::NoGradGuard no_grad;
  auto out = clf.features(as_batch(image), layers);
  if (image.dim() == 3) {
    for (auto& f : out) {
      f = f.squeeze(0);
    }
  }
  return out;
}

Classifier train_classifier(const Dataset& train, const Dataset& test, const ClassifierTrainConfig& config,
                            Seed seed) {
  require(!train.empty(), "train_classifier: empty dataset");
  require(config.epochs >= 0, "train_classifier: negative epochs");
  const auto max_label = *std::max_element(train.labels().begin(), train.labels().end());
  ClassifierConfig cc;
  cc.in_channels = static_cast<int>(train.channels());
  cc.num_classes = std::max<int>(2, static_cast<int>(max_label) + 1);
  cc.width = config.width;
  cc.image_size = static_cast<int>(train.height());
  Classifier clf(cc, seed);
  auto& net = clf.module();
  for (auto& p : net.parameters()) {
    p.set_requires_grad(true);
  }
  net.train();
  torch::optim::Adam opt(net.parameters(), torch::optim::AdamOptions(config.learn_rate));
  auto gen = make_generator(derive_seed(seed, 3));
  const auto n = static_cast<std::int64_t>(train.size());
  auto labels = train.label_tensor();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    auto perm = torch::randperm(n, gen, torch::kLong);
    for (std::int64_t s = 0; s < n; s += config.batch_size) {
      auto idx = perm.slice(0, s, std::min(n, s + config.batch_size));
      auto loss = torch::cross_entropy_loss(clf.logits(train.images().index_select(0, idx)),
                                            labels.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  net.eval();
  for (auto& p : net.parameters()) {
    p.set_requires_grad(false);
    p.mutable_grad() = torch::Tensor();
  }
  clf.train_accuracy = accuracy(clf, train);
  clf.test_accuracy = test.empty() ? 0.0 : accuracy(clf, test);
  return clf;
}

}  // namespace diffender
