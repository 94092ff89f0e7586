#include "diffender/image_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace diffender {
namespace {

cv::Mat to_mat8(const torch::Tensor& image) {
  require(image.dim() == 3, "expected [C,H,W]");
  const auto channels = image.size(0);
  require(channels == 1 || channels == 3, "expected 1 or 3 channels");
  auto hwc = (image.detach().to(torch::kFloat).clamp(0.0, 1.0) * 255.0)
                 .round()
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  const int h = static_cast<int>(hwc.size(0));
  const int w = static_cast<int>(hwc.size(1));
  cv::Mat mat(h, w, channels == 3 ? CV_8UC3 : CV_8UC1, hwc.data_ptr<std::uint8_t>());
  cv::Mat out = mat.clone();
  if (channels == 3) {
    cv::cvtColor(out, out, cv::COLOR_RGB2BGR);
  }
  return out;
}

torch::Tensor from_mat8(cv::Mat mat) {
  if (mat.channels() == 3) {
    cv::cvtColor(mat, mat, cv::COLOR_BGR2RGB);
  } else if (mat.channels() == 4) {
    cv::cvtColor(mat, mat, cv::COLOR_BGRA2RGB);
  }
  if (!mat.isContinuous()) {
    mat = mat.clone();
  }
  auto t = torch::from_blob(mat.data, {mat.rows, mat.cols, mat.channels()}, torch::kUInt8)
               .permute({2, 0, 1})
               .to(torch::kFloat)
               .div(255.0)
               .contiguous();
  return t;
}

void write_mat(const cv::Mat& mat, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  if (!cv::imwrite(path.string(), mat)) {
    throw IoError("cannot write image " + path.string());
  }
}

cv::Mat zoomed(const cv::Mat& mat, int zoom) {
  cv::Mat out;
  cv::resize(mat, out, cv::Size(), zoom, zoom, cv::INTER_NEAREST);
  if (out.channels() == 1) {
    cv::cvtColor(out, out, cv::COLOR_GRAY2BGR);
  }
  return out;
}

cv::Mat heatmap_mat(const torch::Tensor& map) {
  auto m = map.detach().to(torch::kFloat);
  const float peak = m.max().item<float>();
  auto scaled = peak > 0 ? m / peak : m;
  cv::Mat gray = to_mat8(scaled.unsqueeze(0));
  cv::Mat colored;
  cv::applyColorMap(gray, colored, cv::COLORMAP_JET);
  return colored;
}

}  // namespace

torch::Tensor read_png(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) {
    throw InputError("cannot read image " + path.string());
  }
  require(mat.depth() == CV_8U, "only 8-bit images are supported: " + path.string());
  return from_mat8(mat);
}

void write_png(const torch::Tensor& image, const std::filesystem::path& path) {
  write_mat(to_mat8(image), path);
}

void write_mask_png(const torch::Tensor& mask, const std::filesystem::path& path) {
  require(mask.dim() == 2, "mask must be [H,W]");
  write_mat(to_mat8((mask > 0.5).to(torch::kFloat).unsqueeze(0)), path);
}

void write_heatmap_png(const torch::Tensor& map, const std::filesystem::path& path) {
  require(map.dim() == 2, "map must be [H,W]");
  write_mat(heatmap_mat(map), path);
}

void write_quadriptych(const torch::Tensor& input, const torch::Tensor& diff,
                       const torch::Tensor& mask, const torch::Tensor& restored,
                       const std::filesystem::path& path, int zoom) {
  std::vector<cv::Mat> panels = {
      zoomed(to_mat8(input), zoom),
      zoomed(heatmap_mat(diff), zoom),
      zoomed(to_mat8((mask > 0.5).to(torch::kFloat).unsqueeze(0)), zoom),
      zoomed(to_mat8(restored), zoom),
  };
  cv::Mat row;
  cv::hconcat(panels, row);
  write_mat(row, path);
}

std::vector<unsigned char> encode_image(const torch::Tensor& image, const std::string& ext,
                                        const std::vector<int>& params) {
  std::vector<unsigned char> bytes;
  if (!cv::imencode(ext, to_mat8(image), bytes, params)) {
    throw IoError("cannot encode image as " + ext);
  }
  return bytes;
}

torch::Tensor decode_image(const std::vector<unsigned char>& bytes, int channels) {
  cv::Mat mat = cv::imdecode(bytes, channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (mat.empty()) {
    throw FormatError("cannot decode image bytes");
  }
  return from_mat8(mat);
}

torch::Tensor jpeg_round_trip(const torch::Tensor& image, int quality) {
  require(quality >= 1 && quality <= 100, "JPEG quality must lie in [1,100]");
  auto bytes = encode_image(image, ".jpg", {cv::IMWRITE_JPEG_QUALITY, quality});
  return decode_image(bytes, static_cast<int>(image.size(0)));
}

}  // namespace diffender
