#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "diffender/common.hpp"

namespace diffender {

enum class Split { train, test };

std::string to_string(Split split);

/// An immutable labelled image set. All images share one shape.
class Dataset {
 public:
  Dataset() = default;
  /// images: [N,C,H,W] in [0,1]; labels: N class ids.
  Dataset(torch::Tensor images, std::vector<std::int64_t> labels, Split split,
          std::vector<std::string> names = {});

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  std::int64_t channels() const;
  std::int64_t height() const;
  std::int64_t width() const;
  Split split() const { return split_; }

  const torch::Tensor& images() const { return images_; }
  torch::Tensor image(std::size_t index) const { return images_[static_cast<std::int64_t>(index)]; }
  const std::vector<std::int64_t>& labels() const { return labels_; }
  torch::Tensor label_tensor() const;
  const std::vector<std::string>& names() const { return names_; }

  /// Items [begin, begin+count) as a new dataset.
  Dataset slice(std::size_t begin, std::size_t count) const;
  /// Items at the given indices, in that order.
  Dataset select(const std::vector<std::int64_t>& indices) const;

 private:
  torch::Tensor images_ = torch::empty({0, 0, 0, 0});
  std::vector<std::int64_t> labels_;
  Split split_ = Split::train;
  std::vector<std::string> names_;
};

/// Reads `<dir>/manifest.csv` ("relative_path,label" per line) and the listed
/// PNG images. Items are ordered by filename. Throws InputError on a missing
/// manifest, a missing file, or mixed image shapes.
Dataset load_dataset(const std::filesystem::path& dir, Split split);

/// Writes the images as 8-bit PNGs plus a manifest that load_dataset reads back.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

/// Grayscale stand-in for thermal imagery: Rec.601 luminance, 3x3 box blur
/// (replicate border), then contrast compression 0.5 + 0.7 (v - 0.5).
/// Accepts [3,H,W] or [B,3,H,W]; returns one channel.
torch::Tensor to_infrared_proxy(const torch::Tensor& rgb);

Dataset to_infrared_proxy(const Dataset& rgb);

}  // namespace diffender
