#pragma once

// COCO-format dataset loading: JSON annotations plus an image directory.
// Images are scaled to fit a square canvas divisible by 64 and padded with
// zeros; boxes are scaled along and clipped.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "errors.hpp"
#include "image_io.hpp"

namespace dfft {

namespace detail {

// Nearest-neighbor resize of an interleaved 8-bit image.
inline Image resize_nearest(const Image& in, int out_w, int out_h) {
  Image out;
  out.w = out_w;
  out.h = out_h;
  out.c = in.c;
  out.pix.resize(static_cast<std::size_t>(out_w) * static_cast<std::size_t>(out_h) *
                 static_cast<std::size_t>(in.c));
  for (int y = 0; y < out_h; ++y) {
    int sy = std::min(in.h - 1, static_cast<int>((y + 0.5) * in.h / out_h));
    for (int x = 0; x < out_w; ++x) {
      int sx = std::min(in.w - 1, static_cast<int>((x + 0.5) * in.w / out_w));
      for (int ch = 0; ch < in.c; ++ch)
        out.pix[static_cast<std::size_t>((y * out_w + x) * in.c + ch)] =
            in.pix[static_cast<std::size_t>((sy * in.w + sx) * in.c + ch)];
    }
  }
  return out;
}

}  // namespace detail

// Scale so the longer side hits image_size, pad bottom/right with zeros.
// Returns the [1, S, S, 3] map and the scale that was applied.
inline FeatureMap letterbox_image(const Image& img, int image_size, double& scale_out) {
  if (image_size < 64 || image_size % 64 != 0)
    throw ConfigError("target image size must be a positive multiple of 64");
  double scale = static_cast<double>(image_size) / std::max(img.w, img.h);
  int new_w = std::max(1, static_cast<int>(std::lround(img.w * scale)));
  int new_h = std::max(1, static_cast<int>(std::lround(img.h * scale)));
  new_w = std::min(new_w, image_size);
  new_h = std::min(new_h, image_size);
  Image scaled = detail::resize_nearest(img, new_w, new_h);
  auto s = static_cast<std::int64_t>(image_size);
  std::vector<double> pix(static_cast<std::size_t>(s * s * 3), 0.0);
  for (int y = 0; y < new_h; ++y)
    for (int x = 0; x < new_w; ++x)
      for (int c = 0; c < 3; ++c) {
        int sc = scaled.c == 1 ? 0 : c;
        pix[static_cast<std::size_t>((y * s + x) * 3 + c)] =
            scaled.pix[static_cast<std::size_t>((y * new_w + x) * scaled.c + sc)] / 255.0;
      }
  scale_out = scale;
  return FeatureMap(Tensor::from({1, s, s, 3}, std::move(pix)), 1);
}

// category ids are remapped to contiguous class indices in ascending id order
struct CocoDataset {
  std::vector<Sample> samples;
  std::vector<std::int64_t> category_ids;  // class index -> original id
};

inline CocoDataset load_coco(const std::string& images_dir, const std::string& ann_path,
                             int image_size) {
  std::ifstream in(ann_path);
  if (!in) throw IoError("cannot open annotations " + ann_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("annotations: ") + e.what());
  }
  if (!j.contains("images") || !j.contains("annotations"))
    throw ParseError("annotations lack images or annotations arrays");

  CocoDataset out;
  std::map<std::int64_t, int> cat_to_cls;
  if (j.contains("categories"))
    for (const auto& c : j.at("categories")) out.category_ids.push_back(c.at("id").get<std::int64_t>());
  std::sort(out.category_ids.begin(), out.category_ids.end());
  for (std::size_t i = 0; i < out.category_ids.size(); ++i)
    cat_to_cls[out.category_ids[i]] = static_cast<int>(i);

  struct ImgRec {
    std::string file;
    std::vector<GtBox> gts;
  };
  std::map<std::int64_t, ImgRec> imgs;
  std::vector<std::int64_t> order;
  for (const auto& im : j.at("images")) {
    auto id = im.at("id").get<std::int64_t>();
    imgs[id].file = im.at("file_name").get<std::string>();
    order.push_back(id);
  }
  for (const auto& a : j.at("annotations")) {
    if (a.contains("iscrowd") && a.at("iscrowd").get<int>() != 0) continue;
    auto id = a.at("image_id").get<std::int64_t>();
    auto it = imgs.find(id);
    if (it == imgs.end())
      throw ParseError("annotation references unknown image " + std::to_string(id));
    auto bb = a.at("bbox").get<std::vector<double>>();
    if (bb.size() != 4) throw ParseError("bbox must have 4 entries");
    if (bb[2] <= 0.0 || bb[3] <= 0.0) continue;
    int cls = 0;
    if (a.contains("category_id")) {
      auto c = cat_to_cls.find(a.at("category_id").get<std::int64_t>());
      if (c == cat_to_cls.end())
        throw ParseError("annotation uses unknown category for image " + std::to_string(id));
      cls = c->second;
    }
    it->second.gts.push_back(GtBox{Box{bb[0], bb[1], bb[0] + bb[2], bb[1] + bb[3]}, cls});
  }

  for (auto id : order) {
    const auto& rec = imgs.at(id);
    std::string path = images_dir + "/" + rec.file;
    Image img;
    try {
      img = read_image(path);
    } catch (const std::exception& e) {
      throw IoError("image " + std::to_string(id) + " (" + rec.file + "): " + e.what());
    }
    Sample s;
    s.id = std::to_string(id);
    double scale = 1.0;
    s.image = letterbox_image(img, image_size, scale);
    double lim = static_cast<double>(image_size);
    for (const auto& g : rec.gts) {
      Box b{g.box.x1 * scale, g.box.y1 * scale, g.box.x2 * scale, g.box.y2 * scale};
      b = clip_box(b, lim, lim);
      if (b.w() <= 0.0 || b.h() <= 0.0) continue;
      s.gts.push_back(GtBox{b, g.cls});
    }
    out.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace dfft
