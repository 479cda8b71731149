#pragma once

// Single-level dense detection on the stride 32 grid: square anchors at five
// sizes per cell, center-distance matching with a fixed positive budget per
// ground-truth box, focal and generalized-overlap losses, and class-wise
// greedy suppression at inference.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "errors.hpp"
#include "feature_map.hpp"
#include "param_store.hpp"
#include "primitives.hpp"
#include "tensor.hpp"

namespace dfft {

struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double w() const { return x2 - x1; }
  double h() const { return y2 - y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  double area() const { return std::max(0.0, w()) * std::max(0.0, h()); }
};

inline double iou(const Box& a, const Box& b) {
  double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  double inter = std::max(0.0, iw) * std::max(0.0, ih);
  double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

// Overlap score extended to disjoint boxes: the plain overlap minus the share
// of the enclosing box not covered by the union. Falls in (-1, 1].
inline double giou(const Box& a, const Box& b) {
  double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  double inter = std::max(0.0, iw) * std::max(0.0, ih);
  double uni = a.area() + b.area() - inter;
  double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  double enc = ew * eh;
  double v = uni <= 0.0 ? 0.0 : inter / uni;
  if (enc <= 0.0) return v;
  return v - (enc - uni) / enc;
}

inline Box clip_box(const Box& b, double img_w, double img_h) {
  Box out;
  out.x1 = std::clamp(b.x1, 0.0, img_w);
  out.y1 = std::clamp(b.y1, 0.0, img_h);
  out.x2 = std::clamp(b.x2, 0.0, img_w);
  out.y2 = std::clamp(b.y2, 0.0, img_h);
  return out;
}

struct AnchorSet {
  std::vector<Box> anchors;
  std::vector<double> sizes;
  int K = 0;  // anchors per cell
  std::int64_t feat_h = 0, feat_w = 0;
  int stride = 32;
};

// Square anchors centered on every feature cell, one per size, cell-major in
// row-major cell order with sizes innermost.
inline AnchorSet generate_anchors(std::int64_t feat_h, std::int64_t feat_w, int stride = 32,
                                  std::vector<double> sizes = {32, 64, 128, 256, 512}) {
  if (feat_h < 1 || feat_w < 1)
    throw ConfigError("anchor grid must be at least 1x1, got " + std::to_string(feat_h) + "x" +
                      std::to_string(feat_w));
  if (sizes.empty()) throw ConfigError("anchor size list is empty");
  if (stride < 1) throw ConfigError("anchor stride must be positive");
  AnchorSet out;
  out.sizes = std::move(sizes);
  out.K = static_cast<int>(out.sizes.size());
  out.feat_h = feat_h;
  out.feat_w = feat_w;
  out.stride = stride;
  out.anchors.reserve(static_cast<std::size_t>(feat_h * feat_w) * out.sizes.size());
  for (std::int64_t i = 0; i < feat_h; ++i)
    for (std::int64_t j = 0; j < feat_w; ++j) {
      double cx = (static_cast<double>(j) + 0.5) * stride;
      double cy = (static_cast<double>(i) + 0.5) * stride;
      for (double s : out.sizes)
        out.anchors.push_back(Box{cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2});
    }
  return out;
}

// Center-offset, log-size parameterization of gt relative to anchor.
inline std::array<double, 4> encode_deltas(const Box& anchor, const Box& gt) {
  if (anchor.w() <= 0.0 || anchor.h() <= 0.0)
    throw ValueError("anchor has non-positive size");
  if (gt.w() <= 0.0 || gt.h() <= 0.0) throw ValueError("box has non-positive size");
  return {(gt.cx() - anchor.cx()) / anchor.w(), (gt.cy() - anchor.cy()) / anchor.h(),
          std::log(gt.w() / anchor.w()), std::log(gt.h() / anchor.h())};
}

inline Box decode_box(const Box& anchor, const std::array<double, 4>& d) {
  if (anchor.w() <= 0.0 || anchor.h() <= 0.0)
    throw ValueError("anchor has non-positive size");
  double cx = anchor.cx() + d[0] * anchor.w();
  double cy = anchor.cy() + d[1] * anchor.h();
  double w = anchor.w() * std::exp(d[2]);
  double h = anchor.h() * std::exp(d[3]);
  return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

struct MatchAssignment {
  static constexpr int kNegative = -1;
  static constexpr int kIgnore = -2;
  std::vector<int> label;       // gt index, kNegative or kIgnore
  std::vector<int> pre_filter;  // assignment before the overlap-based ignores
};

// Every gt claims its k nearest anchors by center distance, walking all
// (gt, anchor) pairs in global distance order so contested anchors go to the
// nearer gt (smaller gt index on exact ties) and each gt still fills its
// budget from the nearest anchors left. Tie-breaking among equidistant
// anchors uses the anchor geometry, keeping the result stable under anchor
// list permutation. Negatives overlapping any gt too much are ignored, as are
// positives overlapping their own gt too little.
inline MatchAssignment uniform_match(const AnchorSet& anchors, const std::vector<Box>& gts,
                                     int k = 4, double iou_neg_ignore = 0.7,
                                     double iou_pos_min = 0.15) {
  const auto& A = anchors.anchors;
  if (k < 1) throw ConfigError("positive budget must be at least 1");
  if (static_cast<std::size_t>(k) > A.size())
    throw ConfigError("positive budget " + std::to_string(k) + " exceeds " +
                      std::to_string(A.size()) + " anchors");
  MatchAssignment out;
  out.pre_filter.assign(A.size(), MatchAssignment::kNegative);
  if (!gts.empty()) {
    struct Pair {
      double d2, area, cx, cy;
      int g;
      std::size_t a;
    };
    std::vector<Pair> pairs;
    pairs.reserve(gts.size() * A.size());
    for (int g = 0; g < static_cast<int>(gts.size()); ++g)
      for (std::size_t a = 0; a < A.size(); ++a) {
        double dx = gts[static_cast<std::size_t>(g)].cx() - A[a].cx();
        double dy = gts[static_cast<std::size_t>(g)].cy() - A[a].cy();
        pairs.push_back(Pair{dx * dx + dy * dy, A[a].area(), A[a].cx(), A[a].cy(), g, a});
      }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& p, const Pair& q) {
      return std::tie(p.d2, p.g, p.area, p.cx, p.cy, p.a) <
             std::tie(q.d2, q.g, q.area, q.cx, q.cy, q.a);
    });
    std::vector<int> need(gts.size(), k);
    for (const auto& p : pairs) {
      if (need[static_cast<std::size_t>(p.g)] > 0 &&
          out.pre_filter[p.a] == MatchAssignment::kNegative) {
        out.pre_filter[p.a] = p.g;
        --need[static_cast<std::size_t>(p.g)];
      }
    }
  }
  out.label = out.pre_filter;
  for (std::size_t a = 0; a < A.size(); ++a) {
    if (out.label[a] == MatchAssignment::kNegative) {
      for (const auto& g : gts)
        if (iou(A[a], g) > iou_neg_ignore) {
          out.label[a] = MatchAssignment::kIgnore;
          break;
        }
    } else if (out.label[a] >= 0) {
      if (iou(A[a], gts[static_cast<std::size_t>(out.label[a])]) < iou_pos_min)
        out.label[a] = MatchAssignment::kIgnore;
    }
  }
  return out;
}

// Per-element focal binary cross-entropy over sigmoid scores, summed and
// normalized by the number of target ones (at least 1). Rows for ignored
// anchors must be filtered out by the caller.
inline Tensor focal_loss(const Tensor& logits, const Tensor& targets, double alpha = 0.25,
                         double gamma = 2.0) {
  if (logits.shape() != targets.shape())
    throw ShapeError("focal loss shapes differ: " + shape_str(logits.shape()) + " vs " +
                     shape_str(targets.shape()));
  double ones = 0.0;
  for (double t : targets.data()) ones += t;
  auto p = sigmoid_t(logits);
  auto one = Tensor::full(logits.shape(), 1.0);
  auto pos = mul(targets, mul(pow_const(sub(one, p), gamma), log_guard(p)));
  auto neg = mul(sub(one, targets), mul(pow_const(p, gamma), log_guard(sub(one, p))));
  auto total = add(mul_scalar(pos, -alpha), mul_scalar(neg, -(1.0 - alpha)));
  return mul_scalar(sum_all(total), 1.0 / std::max(1.0, ones));
}

// Mean of (1 - generalized overlap) between decoded boxes and their gts.
// deltas is [P, 4] and stays on the graph; anchors and gts are constants.
inline Tensor giou_loss(const Tensor& deltas, const std::vector<Box>& anchors,
                        const std::vector<Box>& gts) {
  if (deltas.ndim() != 2 || deltas.dim(1) != 4)
    throw ShapeError("deltas must be [n, 4], got " + shape_str(deltas.shape()));
  auto P = deltas.dim(0);
  if (static_cast<std::size_t>(P) != anchors.size() || anchors.size() != gts.size())
    throw ShapeError("deltas, anchors and gts must agree in count");
  if (P == 0) throw ValueError("no positive boxes to score");
  std::vector<double> acx(static_cast<std::size_t>(P)), acy(acx.size()), aw(acx.size()),
      ah(acx.size());
  std::vector<double> bx1(acx.size()), by1(acx.size()), bx2(acx.size()), by2(acx.size()),
      barea(acx.size());
  for (std::size_t i = 0; i < acx.size(); ++i) {
    if (anchors[i].w() <= 0.0 || anchors[i].h() <= 0.0)
      throw ValueError("anchor has non-positive size");
    acx[i] = anchors[i].cx();
    acy[i] = anchors[i].cy();
    aw[i] = anchors[i].w();
    ah[i] = anchors[i].h();
    bx1[i] = gts[i].x1;
    by1[i] = gts[i].y1;
    bx2[i] = gts[i].x2;
    by2[i] = gts[i].y2;
    barea[i] = gts[i].area();
  }
  Shape col = {P, 1};
  auto c = [&](const std::vector<double>& v) { return Tensor::from(col, v); };
  auto tx = slice_last(deltas, 0, 1), ty = slice_last(deltas, 1, 2);
  auto tw = slice_last(deltas, 2, 3), th = slice_last(deltas, 3, 4);
  auto pcx = add(c(acx), mul(c(aw), tx));
  auto pcy = add(c(acy), mul(c(ah), ty));
  auto pw = mul(c(aw), exp_t(tw));
  auto ph = mul(c(ah), exp_t(th));
  auto px1 = sub(pcx, mul_scalar(pw, 0.5)), px2 = add(pcx, mul_scalar(pw, 0.5));
  auto py1 = sub(pcy, mul_scalar(ph, 0.5)), py2 = add(pcy, mul_scalar(ph, 0.5));
  auto iw = clamp_min(sub(minimum(px2, c(bx2)), maximum(px1, c(bx1))), 0.0);
  auto ih = clamp_min(sub(minimum(py2, c(by2)), maximum(py1, c(by1))), 0.0);
  auto inter = mul(iw, ih);
  auto uni = sub(add(mul(pw, ph), c(barea)), inter);
  auto ew = sub(maximum(px2, c(bx2)), minimum(px1, c(bx1)));
  auto eh = sub(maximum(py2, c(by2)), minimum(py1, c(by1)));
  auto enc = mul(ew, eh);
  auto g = sub(div(inter, uni), div(sub(enc, uni), enc));
  return mean_all(sub(Tensor::full(g.shape(), 1.0), g));
}

struct HeadOut {
  Tensor cls_logits;  // [cells*K, num_classes]
  Tensor deltas;      // [cells*K, 4]
};

// One linear map per task on top of the aligned features; rows follow the
// anchor ordering (cell-major, sizes innermost).
inline HeadOut predict(const FeatureMap& t_cls, const FeatureMap& t_reg, int num_classes, int K,
                       ParamStore& ps, const std::string& prefix = "head") {
  if (num_classes < 1) throw ConfigError("need at least one class");
  if (K < 1) throw ConfigError("need at least one anchor per cell");
  if (t_cls.batch() != t_reg.batch() || t_cls.height() != t_reg.height() ||
      t_cls.width() != t_reg.width())
    throw ShapeError("task features disagree spatially: " + shape_str(t_cls.data.shape()) +
                     " vs " + shape_str(t_reg.data.shape()));
  std::int64_t rows = t_cls.batch() * t_cls.height() * t_cls.width();
  auto cls = detail::dense(detail::flat_rows(t_cls), t_cls.channels(),
                           static_cast<std::int64_t>(K) * num_classes, ps, prefix + ".cls");
  auto reg = detail::dense(detail::flat_rows(t_reg), t_reg.channels(),
                           static_cast<std::int64_t>(K) * 4, ps, prefix + ".reg");
  return HeadOut{reshape(cls, {rows * K, num_classes}), reshape(reg, {rows * K, 4})};
}

struct Detection {
  Box box;
  int cls = 0;
  double score = 0.0;
};

// Class-wise greedy suppression by descending score, then a global score sort
// capped at max_dets. Ordering is made deterministic by breaking score ties
// on class and geometry.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh = 0.6,
                                  double score_thresh = 0.05, int max_dets = 100) {
  std::vector<Detection> cand;
  for (const auto& d : dets)
    if (d.score >= score_thresh) cand.push_back(d);
  auto order = [](const Detection& a, const Detection& b) {
    return std::tie(b.score, a.cls, a.box.x1, a.box.y1, a.box.x2, a.box.y2) <
           std::tie(a.score, b.cls, b.box.x1, b.box.y1, b.box.x2, b.box.y2);
  };
  std::sort(cand.begin(), cand.end(), order);
  std::vector<Detection> kept;
  std::vector<bool> dead(cand.size(), false);
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (dead[i]) continue;
    kept.push_back(cand[i]);
    for (std::size_t j = i + 1; j < cand.size(); ++j)
      if (!dead[j] && cand[j].cls == cand[i].cls && iou(cand[j].box, cand[i].box) > iou_thresh)
        dead[j] = true;
  }
  std::sort(kept.begin(), kept.end(), order);
  if (kept.size() > static_cast<std::size_t>(max_dets)) kept.resize(static_cast<std::size_t>(max_dets));
  return kept;
}

}  // namespace dfft
