#pragma once

// Full detector pipeline: normalization, backbone -> aggregation -> task
// encoding -> per-anchor predictions, plus decoded inference output.

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "backbone.hpp"
#include "config.hpp"
#include "detection.hpp"
#include "encoders.hpp"
#include "feature_map.hpp"
#include "param_store.hpp"

namespace dfft {

struct ModelOut {
  BackboneOutput features;
  FeatureMap s_sae;
  FeatureMap t_cls;
  FeatureMap t_reg;
  HeadOut head;
};

// Map raw [0,1] pixel values onto the training input range. Pure value
// transform, the input never carries gradients.
inline FeatureMap normalize_images(const FeatureMap& raw, double mean, double std_dev) {
  std::vector<double> v = raw.data.data();
  for (auto& x : v) x = (x - mean) / std_dev;
  return FeatureMap(Tensor::from(raw.data.shape(), std::move(v)), raw.stride);
}

inline ModelOut forward_model(const FeatureMap& image, const ModelConfig& cfg, ParamStore& ps) {
  ModelOut out;
  out.features = forward_backbone(image, cfg.backbone, ps);
  out.s_sae = sae(out.features, cfg.encoders, ps);
  auto tasks = tae(out.s_sae, cfg.encoders, ps);
  out.t_cls = std::move(tasks.first);
  out.t_reg = std::move(tasks.second);
  out.head = predict(out.t_cls, out.t_reg, cfg.head.num_classes,
                     static_cast<int>(cfg.head.anchor_sizes.size()), ps);
  return out;
}

// One throwaway forward at the configured input size registers every
// parameter, then the store is locked.
inline void build_params(const ModelConfig& cfg, ParamStore& ps) {
  cfg.validate();
  ps.set_grad_enabled(false);
  std::int64_t s = cfg.train.image_size;
  FeatureMap zero(Tensor::zeros({1, s, s, 3}), 1);
  forward_model(zero, cfg, ps);
  ps.set_grad_enabled(true);
  ps.freeze();
}

inline AnchorSet anchors_for(const ModelConfig& cfg) {
  std::int64_t f = cfg.train.image_size / 32;
  return generate_anchors(f, f, 32, cfg.head.anchor_sizes);
}

// Decode one image's predictions into final detections. Runs without any
// gradient graph; image must be [1, S, S, 3] raw [0,1] pixels at the size the
// model was built for.
inline std::vector<Detection> detect(const FeatureMap& raw, const ModelConfig& cfg,
                                     ParamStore& ps, const AnchorSet& anchors) {
  if (raw.batch() != 1) throw ShapeError("detect expects a single image");
  bool was = ps.grad_enabled();
  ps.set_grad_enabled(false);
  ModelOut out;
  try {
    out = forward_model(normalize_images(raw, cfg.train.norm_mean, cfg.train.norm_std), cfg, ps);
  } catch (...) {
    ps.set_grad_enabled(was);
    throw;
  }
  ps.set_grad_enabled(was);

  const auto& logits = out.head.cls_logits.data();
  const auto& deltas = out.head.deltas.data();
  auto rows = out.head.cls_logits.dim(0);
  auto ncls = out.head.cls_logits.dim(1);
  if (rows != static_cast<std::int64_t>(anchors.anchors.size()))
    throw ShapeError("anchor count does not match prediction rows");

  double img_w = static_cast<double>(raw.width());
  double img_h = static_cast<double>(raw.height());
  std::vector<Detection> cands;
  for (std::int64_t a = 0; a < rows; ++a) {
    std::array<double, 4> d{deltas[static_cast<std::size_t>(a * 4 + 0)],
                            deltas[static_cast<std::size_t>(a * 4 + 1)],
                            deltas[static_cast<std::size_t>(a * 4 + 2)],
                            deltas[static_cast<std::size_t>(a * 4 + 3)]};
    Box decoded;
    bool have_box = false;
    for (std::int64_t c = 0; c < ncls; ++c) {
      double z = logits[static_cast<std::size_t>(a * ncls + c)];
      double score = 1.0 / (1.0 + std::exp(-z));
      if (score < cfg.head.score_thresh) continue;
      if (!have_box) {
        decoded = clip_box(decode_box(anchors.anchors[static_cast<std::size_t>(a)], d), img_w,
                           img_h);
        have_box = true;
      }
      cands.push_back(Detection{decoded, static_cast<int>(c), score});
    }
  }
  return nms(cands, cfg.head.nms_iou, cfg.head.score_thresh, cfg.head.max_dets);
}

}  // namespace dfft
