#pragma once

// Training samples and the synthetic shapes dataset: bright axis-aligned
// rectangles (class 0) and ellipses (class 1) on dim noise, with ground truth
// boxes matching the painted extent exactly.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "detection.hpp"
#include "errors.hpp"
#include "feature_map.hpp"

namespace dfft {

struct GtBox {
  Box box;
  int cls = 0;
};

struct Sample {
  FeatureMap image;  // [1, S, S, 3], values in [0, 1]
  std::vector<GtBox> gts;
  std::string id;
};

namespace detail {

inline double pair_iou(const Box& a, const Box& b) { return iou(a, b); }

}  // namespace detail

inline std::vector<Sample> synth_dataset(int n, int image_size, std::uint64_t seed = 0) {
  if (n < 1) throw ConfigError("dataset needs at least one sample");
  if (image_size < 64) throw ConfigError("synthetic images must be at least 64 pixels");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  auto s = static_cast<std::int64_t>(image_size);

  for (int idx = 0; idx < n; ++idx) {
    // one private stream per sample keeps any prefix of the set stable
    std::mt19937_64 rng(seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(idx + 1));
    std::uniform_real_distribution<double> bg(0.0, 0.35);
    std::uniform_real_distribution<double> fg(0.45, 1.0);
    std::uniform_int_distribution<int> count_d(1, 4);
    std::uniform_int_distribution<int> side_d(24, 72);
    std::uniform_int_distribution<int> kind_d(0, 1);

    std::vector<double> pix(static_cast<std::size_t>(s * s * 3));
    for (auto& p : pix) p = bg(rng);

    Sample sample;
    sample.id = "synth-" + std::to_string(idx);
    int want = count_d(rng);
    for (int sh = 0; sh < want; ++sh) {
      int kind = kind_d(rng);
      double col[3] = {fg(rng), fg(rng), fg(rng)};
      bool placed = false;
      for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
        int w = side_d(rng), h = side_d(rng);
        if (w + 2 > image_size || h + 2 > image_size) continue;
        std::uniform_int_distribution<int> x_d(1, image_size - w - 1);
        std::uniform_int_distribution<int> y_d(1, image_size - h - 1);
        int x0 = x_d(rng), y0 = y_d(rng);
        Box cand{static_cast<double>(x0), static_cast<double>(y0),
                 static_cast<double>(x0 + w), static_cast<double>(y0 + h)};
        bool clash = false;
        for (const auto& g : sample.gts)
          if (detail::pair_iou(cand, g.box) > 0.05) clash = true;
        if (clash) continue;

        if (kind == 0) {
          for (int py = y0; py < y0 + h; ++py)
            for (int px = x0; px < x0 + w; ++px)
              for (int c = 0; c < 3; ++c)
                pix[static_cast<std::size_t>((py * s + px) * 3 + c)] = col[c];
          sample.gts.push_back(GtBox{cand, 0});
        } else {
          double cx = x0 + w / 2.0, cy = y0 + h / 2.0;
          double rx = w / 2.0, ry = h / 2.0;
          int min_x = image_size, min_y = image_size, max_x = -1, max_y = -1;
          for (int py = y0; py < y0 + h; ++py)
            for (int px = x0; px < x0 + w; ++px) {
              double dx = (px + 0.5 - cx) / rx, dy = (py + 0.5 - cy) / ry;
              if (dx * dx + dy * dy > 1.0) continue;
              for (int c = 0; c < 3; ++c)
                pix[static_cast<std::size_t>((py * s + px) * 3 + c)] = col[c];
              min_x = std::min(min_x, px);
              min_y = std::min(min_y, py);
              max_x = std::max(max_x, px);
              max_y = std::max(max_y, py);
            }
          if (max_x < 0) continue;  // sides of at least 24 always paint, kept for safety
          Box extent{static_cast<double>(min_x), static_cast<double>(min_y),
                     static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)};
          sample.gts.push_back(GtBox{extent, 1});
        }
        placed = true;
      }
    }
    sample.image = FeatureMap(Tensor::from({1, s, s, 3}, std::move(pix)), 1);
    out.push_back(std::move(sample));
  }
  return out;
}

}  // namespace dfft
