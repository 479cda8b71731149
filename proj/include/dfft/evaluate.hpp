#pragma once

// Average-precision evaluation over IoU thresholds 0.50:0.05:0.95 with
// 101-point interpolation, matched greedily per class by descending score.

#include <algorithm>
#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "data.hpp"
#include "detection.hpp"
#include "model.hpp"

namespace dfft {

struct ApMetrics {
  double ap = 0.0;    // mean over classes and all 10 thresholds
  double ap50 = 0.0;  // threshold 0.50 only
  double ap75 = 0.0;
  std::vector<double> per_class;  // mean over thresholds; -1 for classes with no gt
};

namespace detail {

struct EvalDet {
  int image;
  Detection det;
};

// AP for one class at one IoU threshold. dets must already be filtered to the
// class; gts_per_image holds this class's boxes for every image.
inline double ap_single(std::vector<EvalDet> dets,
                        const std::vector<std::vector<Box>>& gts_per_image, double thresh,
                        std::int64_t npos) {
  if (npos == 0) return -1.0;
  std::sort(dets.begin(), dets.end(), [](const EvalDet& a, const EvalDet& b) {
    return std::tie(b.det.score, a.image, a.det.box.x1, a.det.box.y1) <
           std::tie(a.det.score, b.image, b.det.box.x1, b.det.box.y1);
  });
  std::vector<std::vector<bool>> used(gts_per_image.size());
  for (std::size_t i = 0; i < gts_per_image.size(); ++i)
    used[i].assign(gts_per_image[i].size(), false);

  std::vector<double> prec, rec;
  std::int64_t tp = 0, fp = 0;
  for (const auto& d : dets) {
    const auto& gts = gts_per_image[static_cast<std::size_t>(d.image)];
    int best = -1;
    double best_iou = thresh;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[static_cast<std::size_t>(d.image)][g]) continue;
      double v = iou(d.det.box, gts[g]);
      if (v >= best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(d.image)][static_cast<std::size_t>(best)] = true;
      ++tp;
    } else {
      ++fp;
    }
    prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(npos));
  }

  // precision envelope sampled at recalls 0.00, 0.01, ..., 1.00
  double ap = 0.0;
  std::size_t k = prec.size();
  std::vector<double> env(prec);
  for (std::size_t i = k; i-- > 1;) env[i - 1] = std::max(env[i - 1], env[i]);
  std::size_t j = 0;
  for (int r = 0; r <= 100; ++r) {
    double want = r / 100.0;
    while (j < k && rec[j] < want) ++j;
    if (j < k) ap += env[j];
  }
  return ap / 101.0;
}

}  // namespace detail

inline ApMetrics ap_metrics(const std::vector<std::vector<Detection>>& dets_per_image,
                            const std::vector<std::vector<GtBox>>& gts_per_image,
                            int num_classes) {
  if (dets_per_image.size() != gts_per_image.size())
    throw ShapeError("detection and ground-truth image counts differ");
  if (num_classes < 1) throw ConfigError("need at least one class");

  ApMetrics out;
  out.per_class.assign(static_cast<std::size_t>(num_classes), -1.0);
  double sum_all = 0.0, sum_50 = 0.0, sum_75 = 0.0;
  int counted = 0;

  for (int cls = 0; cls < num_classes; ++cls) {
    std::vector<detail::EvalDet> dets;
    std::vector<std::vector<Box>> gts(gts_per_image.size());
    std::int64_t npos = 0;
    for (std::size_t i = 0; i < gts_per_image.size(); ++i) {
      for (const auto& g : gts_per_image[i])
        if (g.cls == cls) {
          gts[i].push_back(g.box);
          ++npos;
        }
      for (const auto& d : dets_per_image[i])
        if (d.cls == cls) dets.push_back(detail::EvalDet{static_cast<int>(i), d});
    }
    if (npos == 0) continue;

    double mean_cls = 0.0;
    for (int ti = 0; ti < 10; ++ti) {
      double thresh = 0.5 + 0.05 * ti;
      double ap = detail::ap_single(dets, gts, thresh, npos);
      mean_cls += ap;
      if (ti == 0) sum_50 += ap;
      if (ti == 5) sum_75 += ap;
    }
    mean_cls /= 10.0;
    out.per_class[static_cast<std::size_t>(cls)] = mean_cls;
    sum_all += mean_cls;
    ++counted;
  }
  if (counted > 0) {
    out.ap = sum_all / counted;
    out.ap50 = sum_50 / counted;
    out.ap75 = sum_75 / counted;
  }
  return out;
}

// Run the detector over a dataset and score it.
inline ApMetrics evaluate_model(const std::vector<Sample>& data, const ModelConfig& cfg,
                                ParamStore& ps, const AnchorSet& anchors) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GtBox>> gts;
  dets.reserve(data.size());
  gts.reserve(data.size());
  for (const auto& s : data) {
    dets.push_back(detect(s.image, cfg, ps, anchors));
    gts.push_back(s.gts);
  }
  return ap_metrics(dets, gts, cfg.head.num_classes);
}

}  // namespace dfft
