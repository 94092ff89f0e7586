#include "diffender/desk_data.hpp"

#include <array>
#include <cmath>
#include <random>

namespace diffender {
namespace {

struct Rgb {
  double r, g, b;
  double luma() const { return 0.299 * r + 0.587 * g + 0.114 * b; }
};

// Membership test for shape `cls` at offset (u, v) from its centre, scale s.
bool inside(int cls, double u, double v, double s) {
  const double h = s / 2.0;
  const double r = std::hypot(u, v);
  switch (cls) {
    case 0: return r <= h;
    case 1: return std::max(std::abs(u), std::abs(v)) <= 0.85 * h;
    case 2: {
      // upward triangle, base at v = +0.8h, apex at v = -h
      if (v < -h || v > 0.8 * h) return false;
      const double half_width = (v + h) / (1.8 * h) * h;
      return std::abs(u) <= half_width;
    }
    case 3: return (std::abs(u) <= s / 6 && std::abs(v) <= h) || (std::abs(v) <= s / 6 && std::abs(u) <= h);
    case 4: return r <= h && r >= 0.5 * h;
    case 5: return std::abs(u) <= 1.2 * h && std::abs(v) <= s / 6;
    case 6: return std::abs(v) <= 1.2 * h && std::abs(u) <= s / 6;
    case 7: return std::abs(u) + std::abs(v) <= h;
    case 8: return std::hypot(u - s / 3, v) <= s / 5 || std::hypot(u + s / 3, v) <= s / 5;
    case 9: {
      const double w = s / 6 * std::sqrt(2.0);
      return std::max(std::abs(u), std::abs(v)) <= 0.85 * h &&
             (std::abs(u - v) <= w || std::abs(u + v) <= w);
    }
    default: return false;
  }
}

}  // namespace

const std::vector<std::string>& desk_class_names() {
  static const std::vector<std::string> names = {"disk", "square", "triangle", "plus", "ring",
                                                 "hbar", "vbar",   "diamond",  "dots", "cross"};
  return names;
}

Dataset make_desk_dataset(std::size_t count, Split split, Seed seed, int size) {
  require(size >= 8, "desk images must be at least 8x8");
  std::mt19937_64 rng(derive_seed(seed, split == Split::train ? 1 : 2));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int classes = static_cast<int>(desk_class_names().size());
  auto images = torch::empty({static_cast<std::int64_t>(count), 3, size, size});
  auto acc = images.accessor<float, 4>();
  std::vector<std::int64_t> labels(count);
  constexpr int kSuper = 3;

  for (std::size_t n = 0; n < count; ++n) {
    const int cls = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
    labels[n] = cls;
    Rgb bg0{unit(rng), unit(rng), unit(rng)};
    Rgb bg1{unit(rng), unit(rng), unit(rng)};
    // pull background colours together so the gradient stays gentle
    bg1 = {0.6 * bg0.r + 0.4 * bg1.r, 0.6 * bg0.g + 0.4 * bg1.g, 0.6 * bg0.b + 0.4 * bg1.b};
    Rgb fg{};
    const double bg_luma = 0.5 * (bg0.luma() + bg1.luma());
    do {
      fg = {unit(rng), unit(rng), unit(rng)};
    } while (std::abs(fg.luma() - bg_luma) < 0.3);
    const double angle = 2.0 * M_PI * unit(rng);
    const double dx = std::cos(angle), dy = std::sin(angle);
    const double scale = size * (0.36 + 0.16 * unit(rng));
    const double cx = size / 2.0 + (unit(rng) - 0.5) * size * 0.2;
    const double cy = size / 2.0 + (unit(rng) - 0.5) * size * 0.2;

    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double gx = (x + 0.5) / size - 0.5, gy = (y + 0.5) / size - 0.5;
        const double w = std::clamp(0.5 + (gx * dx + gy * dy), 0.0, 1.0);
        Rgb bg{(1 - w) * bg0.r + w * bg1.r, (1 - w) * bg0.g + w * bg1.g, (1 - w) * bg0.b + w * bg1.b};
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            const double px = x + (sx + 0.5) / kSuper, py = y + (sy + 0.5) / kSuper;
            hits += inside(cls, px - cx, py - cy, scale) ? 1 : 0;
          }
        }
        const double a = static_cast<double>(hits) / (kSuper * kSuper);
        acc[n][0][y][x] = static_cast<float>((1 - a) * bg.r + a * fg.r);
        acc[n][1][y][x] = static_cast<float>((1 - a) * bg.g + a * fg.g);
        acc[n][2][y][x] = static_cast<float>((1 - a) * bg.b + a * fg.b);
      }
    }
  }
  return Dataset(images, std::move(labels), split);
}

}  // namespace diffender
