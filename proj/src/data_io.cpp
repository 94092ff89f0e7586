#include "diffender/data_io.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "diffender/image_io.hpp"

namespace fs = std::filesystem;

namespace diffender {

std::string to_string(Split split) {
  return split == Split::train ? "train" : "test";
}

Dataset::Dataset(torch::Tensor images, std::vector<std::int64_t> labels, Split split,
                 std::vector<std::string> names)
    : images_(std::move(images)), labels_(std::move(labels)), split_(split), names_(std::move(names)) {
  require(images_.dim() == 4, "Dataset images must be [N,C,H,W]");
  require(images_.size(0) == static_cast<std::int64_t>(labels_.size()),
          "Dataset: image and label counts differ");
  require(names_.empty() || names_.size() == labels_.size(), "Dataset: name count differs");
  for (auto label : labels_) {
    require(label >= 0, "Dataset: negative label");
  }
}

std::int64_t Dataset::channels() const { return images_.size(1); }
std::int64_t Dataset::height() const { return images_.size(2); }
std::int64_t Dataset::width() const { return images_.size(3); }

torch::Tensor Dataset::label_tensor() const {
  return torch::tensor(labels_, torch::kLong);
}

Dataset Dataset::slice(std::size_t begin, std::size_t count) const {
  require(begin + count <= size(), "Dataset::slice out of range");
  std::vector<std::int64_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) {
    idx[i] = static_cast<std::int64_t>(begin + i);
  }
  return select(idx);
}

Dataset Dataset::select(const std::vector<std::int64_t>& indices) const {
  std::vector<std::int64_t> labels;
  std::vector<std::string> names;
  labels.reserve(indices.size());
  for (auto i : indices) {
    require(i >= 0 && static_cast<std::size_t>(i) < size(), "Dataset::select out of range");
    labels.push_back(labels_[static_cast<std::size_t>(i)]);
    if (!names_.empty()) {
      names.push_back(names_[static_cast<std::size_t>(i)]);
    }
  }
  auto images = indices.empty()
                    ? torch::empty({0, images_.size(1), images_.size(2), images_.size(3)})
                    : images_.index_select(0, torch::tensor(indices, torch::kLong));
  return Dataset(images, std::move(labels), split_, std::move(names));
}

Dataset load_dataset(const fs::path& dir, Split split) {
  const fs::path manifest = dir / "manifest.csv";
  std::ifstream in(manifest);
  if (!in) {
    throw InputError("missing manifest: " + manifest.string());
  }
  std::vector<std::pair<std::string, std::int64_t>> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.empty()) {
      continue;
    }
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) {
      throw InputError(manifest.string() + ":" + std::to_string(line_no) + ": expected path,label");
    }
    std::int64_t label = 0;
    try {
      std::size_t used = 0;
      label = std::stoll(line.substr(comma + 1), &used);
      if (used != line.size() - comma - 1 || label < 0) {
        throw std::invalid_argument("label");
      }
    } catch (const std::exception&) {
      throw InputError(manifest.string() + ":" + std::to_string(line_no) + ": bad label");
    }
    entries.emplace_back(line.substr(0, comma), label);
  }
  std::sort(entries.begin(), entries.end());

  std::vector<torch::Tensor> images;
  std::vector<std::int64_t> labels;
  std::vector<std::string> names;
  for (const auto& [name, label] : entries) {
    const fs::path file = dir / name;
    if (!fs::exists(file)) {
      throw InputError("manifest references missing file: " + file.string());
    }
    auto image = read_png(file);
    if (!images.empty() && image.sizes() != images.front().sizes()) {
      throw InputError("inconsistent image size: " + file.string());
    }
    images.push_back(image);
    labels.push_back(label);
    names.push_back(name);
  }
  auto stacked = images.empty() ? torch::empty({0, 0, 0, 0}) : torch::stack(images);
  return Dataset(stacked, std::move(labels), split, std::move(names));
}

void save_dataset(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir);
  std::ostringstream manifest;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%06zu.png", i);
    write_png(dataset.image(i), dir / name);
    manifest << name << ',' << dataset.labels()[i] << '\n';
  }
  std::ofstream out(dir / "manifest.csv");
  if (!out) {
    throw IoError("cannot write manifest in " + dir.string());
  }
  out << manifest.str();
}

torch::Tensor to_infrared_proxy(const torch::Tensor& rgb) {
  const bool single = rgb.dim() == 3;
  auto batch = as_batch(rgb);
  require(batch.size(1) == 3, "to_infrared_proxy expects a 3-channel image");
  auto r = batch.select(1, 0);
  auto g = batch.select(1, 1);
  auto b = batch.select(1, 2);
  auto luma = (0.299 * r + 0.587 * g + 0.114 * b).unsqueeze(1);
  auto padded = torch::nn::functional::pad(
      luma, torch::nn::functional::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
  auto blurred = torch::avg_pool2d(padded, 3, 1);
  auto out = (0.5 + 0.7 * (blurred - 0.5)).clamp(0.0, 1.0);
  return single ? out.squeeze(0) : out;
}

Dataset to_infrared_proxy(const Dataset& rgb) {
  return Dataset(to_infrared_proxy(rgb.images()), rgb.labels(), rgb.split(), rgb.names());
}

}  // namespace diffender
