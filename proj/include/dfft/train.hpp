#pragma once

// Training loop: shuffled mini-batches, focal + GIoU objective over matched
// anchors, AdamW with step-decayed learning rate, per-epoch checkpointing and
// a CSV log. Epoch streams are seeded from (seed, epoch) so a resumed run
// replays the exact same batches.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "detection.hpp"
#include "evaluate.hpp"
#include "model.hpp"
#include "optim.hpp"

namespace dfft {

// base lr decays by 10x at each milestone ceil(fraction * epochs)
inline double lr_for_epoch(const TrainConfig& tc, int epoch) {
  double lr = tc.lr;
  for (double f : tc.lr_steps) {
    int milestone = static_cast<int>(std::ceil(f * tc.epochs));
    if (epoch >= milestone) lr *= 0.1;
  }
  return lr;
}

namespace detail {

inline std::string fmt_fixed(double v, int prec) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

inline std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline Sample hflip_sample(const Sample& s) {
  auto S = s.image.width();
  const auto& src = s.image.data.data();
  std::vector<double> dst(src.size());
  for (std::int64_t y = 0; y < s.image.height(); ++y)
    for (std::int64_t x = 0; x < S; ++x)
      for (std::int64_t c = 0; c < 3; ++c)
        dst[static_cast<std::size_t>((y * S + x) * 3 + c)] =
            src[static_cast<std::size_t>((y * S + (S - 1 - x)) * 3 + c)];
  Sample out;
  out.id = s.id;
  out.image = FeatureMap(Tensor::from(s.image.data.shape(), std::move(dst)), 1);
  double lim = static_cast<double>(S);
  for (const auto& g : s.gts)
    out.gts.push_back(GtBox{Box{lim - g.box.x2, g.box.y1, lim - g.box.x1, g.box.y2}, g.cls});
  return out;
}

}  // namespace detail

struct LossBundle {
  Tensor total, cls, reg;
  std::int64_t positives = 0;
};

// Joint objective over one batch. Classification rows are every non-ignored
// anchor across the batch with one-hot class targets; regression covers the
// positive rows only.
inline LossBundle batch_loss(const HeadOut& head, const AnchorSet& anchors,
                             const std::vector<const std::vector<GtBox>*>& gts_per_image,
                             const HeadConfig& hc) {
  auto A = static_cast<std::int64_t>(anchors.anchors.size());
  auto B = static_cast<std::int64_t>(gts_per_image.size());
  auto ncls = head.cls_logits.dim(1);
  if (head.cls_logits.dim(0) != B * A)
    throw ShapeError("prediction rows do not cover the batch: " +
                     shape_str(head.cls_logits.shape()));

  std::vector<std::int64_t> keep, pos_rows;
  std::vector<double> tvals;
  std::vector<Box> pos_anchors, pos_gts;
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& gts = *gts_per_image[static_cast<std::size_t>(b)];
    std::vector<Box> boxes;
    boxes.reserve(gts.size());
    for (const auto& g : gts) boxes.push_back(g.box);
    auto match = uniform_match(anchors, boxes, hc.k, hc.neg_ignore_iou, hc.pos_min_iou);
    for (std::int64_t a = 0; a < A; ++a) {
      int lab = match.label[static_cast<std::size_t>(a)];
      if (lab == MatchAssignment::kIgnore) continue;
      keep.push_back(b * A + a);
      for (std::int64_t c = 0; c < ncls; ++c)
        tvals.push_back(lab >= 0 && gts[static_cast<std::size_t>(lab)].cls == c ? 1.0 : 0.0);
      if (lab >= 0) {
        pos_rows.push_back(b * A + a);
        pos_anchors.push_back(anchors.anchors[static_cast<std::size_t>(a)]);
        pos_gts.push_back(boxes[static_cast<std::size_t>(lab)]);
      }
    }
  }

  LossBundle out;
  out.positives = static_cast<std::int64_t>(pos_rows.size());
  auto targets =
      Tensor::from({static_cast<std::int64_t>(keep.size()), ncls}, std::move(tvals));
  out.cls = focal_loss(take_rows(head.cls_logits, keep), targets, hc.focal_alpha,
                       hc.focal_gamma);
  out.reg = pos_rows.empty()
                ? Tensor::scalar(0.0)
                : giou_loss(take_rows(head.deltas, pos_rows), pos_anchors, pos_gts);
  out.total = add(mul_scalar(out.cls, hc.cls_weight), mul_scalar(out.reg, hc.reg_weight));
  return out;
}

struct TrainOptions {
  std::string out_dir = ".";
  std::string resume;  // checkpoint to continue from, empty starts fresh
  int stop_after = 0;  // pause after this epoch when positive, resumable later
  bool verbose = false;
};

struct TrainResult {
  std::string csv_path, ckpt_path;
  int epochs_run = 0;
  double final_ap50 = -1.0;
  std::int64_t steps = 0;
  std::vector<std::string> csv_rows;
  std::vector<std::string> untouched;  // params that never saw a nonzero gradient
};

inline TrainResult train_detector(const ModelConfig& cfg, const std::vector<Sample>& data,
                                  const TrainOptions& topt) {
  cfg.validate();
  if (data.empty()) throw ConfigError("training set is empty");
  for (const auto& s : data)
    if (s.image.height() != cfg.train.image_size || s.image.width() != cfg.train.image_size)
      throw ShapeError("sample " + s.id + " is " + std::to_string(s.image.height()) + "x" +
                       std::to_string(s.image.width()) + ", model expects " +
                       std::to_string(cfg.train.image_size));

  std::filesystem::create_directories(topt.out_dir);
  TrainResult res;
  res.csv_path = topt.out_dir + "/train_log.csv";
  res.ckpt_path = topt.out_dir + "/ckpt.dfft";

  ParamStore ps(cfg.train.seed);
  build_params(cfg, ps);
  AdamW opt;
  opt.weight_decay = cfg.train.weight_decay;
  int start_epoch = 0;
  if (!topt.resume.empty()) {
    auto header = load_checkpoint(topt.resume, ps, opt);
    start_epoch = header.epoch;
  }

  std::string cfg_json = canonical_config(cfg);
  auto anchors = anchors_for(cfg);
  const auto& tc = cfg.train;

  std::ofstream csv;
  if (start_epoch == 0) {
    csv.open(res.csv_path, std::ios::trunc);
    csv << "epoch,mean_loss,cls_loss,reg_loss,lr,ap50\n";
  } else {
    csv.open(res.csv_path, std::ios::app);
  }
  if (!csv) throw IoError("cannot write log " + res.csv_path);

  int last_epoch = tc.epochs;
  if (topt.stop_after > 0) last_epoch = std::min(last_epoch, topt.stop_after);

  for (int epoch = start_epoch + 1; epoch <= last_epoch; ++epoch) {
    double lr = lr_for_epoch(tc, epoch);
    std::mt19937_64 erng(tc.seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), erng);
    std::vector<bool> flip(data.size(), false);
    if (tc.hflip) {
      std::bernoulli_distribution coin(0.5);
      for (auto&& f : flip) f = coin(erng);
    }

    double sum_total = 0.0, sum_cls = 0.0, sum_reg = 0.0;
    int batches = 0;
    auto S = static_cast<std::int64_t>(tc.image_size);

    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(tc.batch_size)) {
      std::size_t hi = std::min(order.size(), at + static_cast<std::size_t>(tc.batch_size));
      auto B = static_cast<std::int64_t>(hi - at);
      std::vector<double> vals(static_cast<std::size_t>(B * S * S * 3));
      std::vector<Sample> flipped;
      flipped.reserve(hi - at);
      std::vector<const std::vector<GtBox>*> gts;
      for (std::size_t i = at; i < hi; ++i) {
        const Sample* s = &data[order[i]];
        if (flip[order[i]]) {
          flipped.push_back(detail::hflip_sample(*s));
          s = &flipped.back();
        }
        const auto& src = s->image.data.data();
        double* dst = vals.data() + static_cast<std::ptrdiff_t>(i - at) * S * S * 3;
        for (std::size_t p = 0; p < src.size(); ++p)
          dst[p] = (src[p] - tc.norm_mean) / tc.norm_std;
        gts.push_back(&s->gts);
      }

      FeatureMap batch(Tensor::from({B, S, S, 3}, std::move(vals)), 1);
      auto out = forward_model(batch, cfg, ps);
      auto loss = batch_loss(out.head, anchors, gts, cfg.head);

      double total_v = loss.total.item();
      if (!std::isfinite(total_v)) {
        std::string where = "epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(opt.t + 1);
        std::string hint = epoch > start_epoch + 1
                               ? "last good checkpoint: " + res.ckpt_path
                               : "no checkpoint was written yet";
        throw ValueError("loss became non-finite at " + where + "; " + hint);
      }
      sum_total += total_v;
      sum_cls += loss.cls.item();
      sum_reg += loss.reg.item();
      ++batches;

      ps.zero_grad();
      loss.total.backward();
      opt.clip_gradients(ps, tc.clip_norm);
      opt.step(ps, lr);
      ++res.steps;
    }

    bool eval_now = (tc.eval_every > 0 && epoch % tc.eval_every == 0) || epoch == tc.epochs;
    std::string ap50;
    if (eval_now) {
      auto m = evaluate_model(data, cfg, ps, anchors);
      res.final_ap50 = m.ap50;
      ap50 = detail::fmt_fixed(m.ap50, 6);
    }

    std::string row = std::to_string(epoch) + "," + detail::fmt_fixed(sum_total / batches, 6) +
                      "," + detail::fmt_fixed(sum_cls / batches, 6) + "," +
                      detail::fmt_fixed(sum_reg / batches, 6) + "," + detail::fmt_g(lr) + "," +
                      ap50;
    csv << row << "\n";
    csv.flush();
    res.csv_rows.push_back(row);
    if (topt.verbose) std::fprintf(stderr, "%s\n", row.c_str());

    save_checkpoint(res.ckpt_path, cfg_json, ps, opt, epoch);
    res.epochs_run = epoch;
  }
  res.untouched = untouched_params(ps);
  return res;
}

}  // namespace dfft
