#pragma once

// Whole-model configuration: architecture, head and training settings, JSON
// loading with strict key checking, and a canonical serialization echoed into
// checkpoints.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "backbone.hpp"
#include "encoders.hpp"
#include "errors.hpp"

namespace dfft {

struct HeadConfig {
  std::vector<double> anchor_sizes = {32, 64, 128, 256, 512};
  int k = 4;
  int num_classes = 0;
  double cls_weight = 1.0;
  double reg_weight = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double nms_iou = 0.6;
  double score_thresh = 0.05;
  int max_dets = 100;
  double neg_ignore_iou = 0.7;
  double pos_min_iou = 0.15;

  void validate() const {
    if (num_classes < 1) throw ConfigError("head.num_classes must be at least 1");
    if (focal_alpha <= 0.0 || focal_alpha >= 1.0)
      throw ConfigError("head.focal_alpha must be in (0, 1)");
    if (focal_gamma < 0.0) throw ConfigError("head.focal_gamma must be non-negative");
    if (anchor_sizes.empty()) throw ConfigError("head.anchor_sizes is empty");
    for (double s : anchor_sizes)
      if (s <= 0.0) throw ConfigError("head.anchor_sizes must be positive");
    if (k < 1) throw ConfigError("head.k must be at least 1");
    if (cls_weight < 0.0 || reg_weight < 0.0)
      throw ConfigError("head loss weights must be non-negative");
    if (nms_iou <= 0.0 || nms_iou >= 1.0) throw ConfigError("head.nms_iou must be in (0, 1)");
    if (score_thresh < 0.0 || score_thresh >= 1.0)
      throw ConfigError("head.score_thresh must be in [0, 1)");
    if (max_dets < 1) throw ConfigError("head.max_dets must be at least 1");
    if (neg_ignore_iou <= 0.0 || neg_ignore_iou > 1.0)
      throw ConfigError("head.neg_ignore_iou must be in (0, 1]");
    if (pos_min_iou < 0.0 || pos_min_iou >= 1.0)
      throw ConfigError("head.pos_min_iou must be in [0, 1)");
  }
};

struct TrainConfig {
  int epochs = 12;
  int batch_size = 2;
  double lr = 1e-4;
  double weight_decay = 0.05;
  std::vector<double> lr_steps = {0.67, 0.89};
  std::uint64_t seed = 0;
  double clip_norm = 1.0;
  int image_size = 128;
  double norm_mean = 0.5;
  double norm_std = 0.5;
  bool hflip = false;
  int eval_every = 0;  // 0 evaluates on the final epoch only

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
    if (lr < 0.0) throw ConfigError("train.lr must be non-negative");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
    double prev = 0.0;
    for (double f : lr_steps) {
      if (f <= prev || f >= 1.0)
        throw ConfigError("train.lr_steps must be ascending fractions in (0, 1)");
      prev = f;
    }
    if (clip_norm < 0.0) throw ConfigError("train.clip_norm must be non-negative");
    if (image_size < 64) throw ConfigError("train.image_size must be at least 64");
    if (norm_std <= 0.0) throw ConfigError("train.norm_std must be positive");
    if (eval_every < 0) throw ConfigError("train.eval_every must be non-negative");
  }
};

struct ModelConfig {
  BackboneConfig backbone;
  EncoderConfig encoders;
  HeadConfig head;
  TrainConfig train;

  ModelConfig() {
    backbone.stages = {DotStageConfig{1, 32, 2, 4}, DotStageConfig{1, 64, 2, 4},
                       DotStageConfig{2, 128, 4, 4}, DotStageConfig{1, 256, 8, 2}};
    backbone.ffn_ratio = 4.0;
  }

  void validate() const {
    backbone.validate();
    encoders.validate();
    head.validate();
    train.validate();
    if (train.image_size % 64 != 0)
      throw ConfigError("train.image_size " + std::to_string(train.image_size) +
                        " must be divisible by 64");
    for (int i = 0; i < 4; ++i) {
      std::int64_t need = (8LL << i) * backbone.stages[static_cast<std::size_t>(i)].window_size;
      if (train.image_size % need != 0)
        throw ConfigError("train.image_size " + std::to_string(train.image_size) +
                          " not divisible by " + std::to_string(need) +
                          " (stage " + std::to_string(i + 1) + " stride times window)");
    }
  }
};

namespace detail {

inline void expect_keys(const nlohmann::json& j, const std::string& ctx,
                        std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(ctx + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed)
      if (item.key() == k) ok = true;
    if (!ok) throw ConfigError("unknown key \"" + item.key() + "\" in " + ctx);
  }
}

template <typename T>
void read_field(const nlohmann::json& j, const std::string& ctx, const char* key, T& into) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(ctx + "." + key + " has the wrong type");
  }
}

template <typename T>
std::array<T, 4> read_stage_array(const nlohmann::json& j, const std::string& ctx,
                                  const char* key, std::array<T, 4> fallback) {
  if (!j.contains(key)) return fallback;
  std::vector<T> v;
  try {
    v = j.at(key).get<std::vector<T>>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(ctx + "." + key + " has the wrong type");
  }
  if (v.size() != 4) throw ConfigError(ctx + "." + key + " must list all 4 stages");
  return {v[0], v[1], v[2], v[3]};
}

}  // namespace detail

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  detail::expect_keys(j, "config", {"num_classes", "backbone", "encoders", "head", "train"});
  if (!j.contains("num_classes")) throw ConfigError("config.num_classes is required");
  detail::read_field(j, "config", "num_classes", cfg.head.num_classes);

  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    detail::expect_keys(b, "backbone",
                        {"channels", "sa_blocks", "heads", "window_sizes", "ffn_ratio"});
    std::array<std::int64_t, 4> ch, df_ch;
    std::array<int, 4> bl, hd, wn, df_bl, df_hd, df_wn;
    for (int i = 0; i < 4; ++i) {
      auto s = static_cast<std::size_t>(i);
      df_ch[s] = cfg.backbone.stages[s].channels;
      df_bl[s] = cfg.backbone.stages[s].num_sa_blocks;
      df_hd[s] = cfg.backbone.stages[s].num_heads;
      df_wn[s] = cfg.backbone.stages[s].window_size;
    }
    ch = detail::read_stage_array(b, "backbone", "channels", df_ch);
    bl = detail::read_stage_array(b, "backbone", "sa_blocks", df_bl);
    hd = detail::read_stage_array(b, "backbone", "heads", df_hd);
    wn = detail::read_stage_array(b, "backbone", "window_sizes", df_wn);
    for (int i = 0; i < 4; ++i) {
      auto s = static_cast<std::size_t>(i);
      cfg.backbone.stages[s] = DotStageConfig{bl[s], ch[s], hd[s], wn[s]};
    }
    detail::read_field(b, "backbone", "ffn_ratio", cfg.backbone.ffn_ratio);
  }

  if (j.contains("encoders")) {
    const auto& e = j.at("encoders");
    detail::expect_keys(e, "encoders",
                        {"sae_width", "tae_width", "group_blocks", "global_blocks", "sae_heads",
                         "group_heads", "global_heads", "ffn_ratio"});
    detail::read_field(e, "encoders", "sae_width", cfg.encoders.sae_width);
    detail::read_field(e, "encoders", "tae_width", cfg.encoders.tae_width);
    detail::read_field(e, "encoders", "group_blocks", cfg.encoders.num_group_blocks);
    detail::read_field(e, "encoders", "global_blocks", cfg.encoders.num_global_blocks);
    detail::read_field(e, "encoders", "sae_heads", cfg.encoders.sae_heads);
    detail::read_field(e, "encoders", "group_heads", cfg.encoders.group_heads);
    detail::read_field(e, "encoders", "global_heads", cfg.encoders.global_heads);
    detail::read_field(e, "encoders", "ffn_ratio", cfg.encoders.ffn_ratio);
  }

  if (j.contains("head")) {
    const auto& h = j.at("head");
    detail::expect_keys(h, "head",
                        {"anchor_sizes", "k", "cls_weight", "reg_weight", "focal_alpha",
                         "focal_gamma", "nms_iou", "score_thresh", "max_dets", "neg_ignore_iou",
                         "pos_min_iou"});
    detail::read_field(h, "head", "anchor_sizes", cfg.head.anchor_sizes);
    detail::read_field(h, "head", "k", cfg.head.k);
    detail::read_field(h, "head", "cls_weight", cfg.head.cls_weight);
    detail::read_field(h, "head", "reg_weight", cfg.head.reg_weight);
    detail::read_field(h, "head", "focal_alpha", cfg.head.focal_alpha);
    detail::read_field(h, "head", "focal_gamma", cfg.head.focal_gamma);
    detail::read_field(h, "head", "nms_iou", cfg.head.nms_iou);
    detail::read_field(h, "head", "score_thresh", cfg.head.score_thresh);
    detail::read_field(h, "head", "max_dets", cfg.head.max_dets);
    detail::read_field(h, "head", "neg_ignore_iou", cfg.head.neg_ignore_iou);
    detail::read_field(h, "head", "pos_min_iou", cfg.head.pos_min_iou);
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::expect_keys(t, "train",
                        {"epochs", "batch_size", "lr", "weight_decay", "lr_steps", "seed",
                         "clip_norm", "image_size", "norm_mean", "norm_std", "hflip",
                         "eval_every"});
    detail::read_field(t, "train", "epochs", cfg.train.epochs);
    detail::read_field(t, "train", "batch_size", cfg.train.batch_size);
    detail::read_field(t, "train", "lr", cfg.train.lr);
    detail::read_field(t, "train", "weight_decay", cfg.train.weight_decay);
    detail::read_field(t, "train", "lr_steps", cfg.train.lr_steps);
    detail::read_field(t, "train", "seed", cfg.train.seed);
    detail::read_field(t, "train", "clip_norm", cfg.train.clip_norm);
    detail::read_field(t, "train", "image_size", cfg.train.image_size);
    detail::read_field(t, "train", "norm_mean", cfg.train.norm_mean);
    detail::read_field(t, "train", "norm_std", cfg.train.norm_std);
    detail::read_field(t, "train", "hflip", cfg.train.hflip);
    detail::read_field(t, "train", "eval_every", cfg.train.eval_every);
  }

  cfg.validate();
  return cfg;
}

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["num_classes"] = cfg.head.num_classes;
  auto& b = j["backbone"];
  for (int i = 0; i < 4; ++i) {
    auto s = static_cast<std::size_t>(i);
    b["channels"].push_back(cfg.backbone.stages[s].channels);
    b["sa_blocks"].push_back(cfg.backbone.stages[s].num_sa_blocks);
    b["heads"].push_back(cfg.backbone.stages[s].num_heads);
    b["window_sizes"].push_back(cfg.backbone.stages[s].window_size);
  }
  b["ffn_ratio"] = cfg.backbone.ffn_ratio;
  auto& e = j["encoders"];
  e["sae_width"] = cfg.encoders.sae_width;
  e["tae_width"] = cfg.encoders.tae_width;
  e["group_blocks"] = cfg.encoders.num_group_blocks;
  e["global_blocks"] = cfg.encoders.num_global_blocks;
  e["sae_heads"] = cfg.encoders.sae_heads;
  e["group_heads"] = cfg.encoders.group_heads;
  e["global_heads"] = cfg.encoders.global_heads;
  e["ffn_ratio"] = cfg.encoders.ffn_ratio;
  auto& h = j["head"];
  h["anchor_sizes"] = cfg.head.anchor_sizes;
  h["k"] = cfg.head.k;
  h["cls_weight"] = cfg.head.cls_weight;
  h["reg_weight"] = cfg.head.reg_weight;
  h["focal_alpha"] = cfg.head.focal_alpha;
  h["focal_gamma"] = cfg.head.focal_gamma;
  h["nms_iou"] = cfg.head.nms_iou;
  h["score_thresh"] = cfg.head.score_thresh;
  h["max_dets"] = cfg.head.max_dets;
  h["neg_ignore_iou"] = cfg.head.neg_ignore_iou;
  h["pos_min_iou"] = cfg.head.pos_min_iou;
  auto& t = j["train"];
  t["epochs"] = cfg.train.epochs;
  t["batch_size"] = cfg.train.batch_size;
  t["lr"] = cfg.train.lr;
  t["weight_decay"] = cfg.train.weight_decay;
  t["lr_steps"] = cfg.train.lr_steps;
  t["seed"] = cfg.train.seed;
  t["clip_norm"] = cfg.train.clip_norm;
  t["image_size"] = cfg.train.image_size;
  t["norm_mean"] = cfg.train.norm_mean;
  t["norm_std"] = cfg.train.norm_std;
  t["hflip"] = cfg.train.hflip;
  t["eval_every"] = cfg.train.eval_every;
  return j;
}

// Sorted keys and fixed number formatting make this string stable.
inline std::string canonical_config(const ModelConfig& cfg) { return config_to_json(cfg).dump(); }

inline ModelConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(e.what());
  }
  return config_from_json(j);
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

}  // namespace dfft
