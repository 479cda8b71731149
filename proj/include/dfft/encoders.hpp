#pragma once

// Prediction neck. The scale aggregation encoder folds the four backbone maps
// into one stride 32 stream, walking down the pyramid and pulling the coarsest
// level back up. The task alignment encoder widens that stream, runs stacked
// group channel-wise attention, and emits a classification half plus a
// regression branch re-expanded to full width.

#include <cstdint>
#include <string>
#include <utility>

#include "backbone.hpp"
#include "errors.hpp"
#include "feature_map.hpp"
#include "param_store.hpp"
#include "primitives.hpp"

namespace dfft {

struct EncoderConfig {
  std::int64_t sae_width = 256;
  std::int64_t tae_width = 512;
  int num_group_blocks = 2;
  int num_global_blocks = 1;
  int sae_heads = 8;
  int group_heads = 8;
  int global_heads = 8;
  double ffn_ratio = 4.0;

  void validate() const {
    if (sae_width < 1 || tae_width < 1) throw ConfigError("encoder widths must be positive");
    if (tae_width % 2 != 0)
      throw ConfigError("task encoder width must split into two equal groups, got " +
                        std::to_string(tae_width));
    if (num_group_blocks < 1) throw ConfigError("need at least one group attention block");
    if (num_global_blocks < 1) throw ConfigError("need at least one global attention block");
    if (sae_heads < 1 || group_heads < 1 || global_heads < 1)
      throw ConfigError("head counts must be positive");
    if (sae_width % sae_heads != 0)
      throw ConfigError("aggregation width " + std::to_string(sae_width) +
                        " not divisible by " + std::to_string(sae_heads) + " heads");
    if (tae_width % group_heads != 0)
      throw ConfigError("task width " + std::to_string(tae_width) + " not divisible by " +
                        std::to_string(group_heads) + " heads");
    if ((tae_width / 2) % global_heads != 0)
      throw ConfigError("branch width " + std::to_string(tae_width / 2) +
                        " not divisible by " + std::to_string(global_heads) + " heads");
    if (ffn_ratio <= 0.0) throw ConfigError("ffn_ratio must be positive");
  }
};

namespace detail {

// 1x1 projection of a map to a new width.
inline FeatureMap project_map(const FeatureMap& x, std::int64_t c_out, ParamStore& ps,
                              const std::string& prefix) {
  auto rows = dense(flat_rows(x), x.channels(), c_out, ps, prefix);
  return FeatureMap(reshape(rows, {x.batch(), x.height(), x.width(), c_out}), x.stride);
}

// Channel-wise attention block that widens its stream: the residual path and
// the attention output are each projected from the input width to c_out, then
// an FFN runs at the new width.
inline FeatureMap widening_gca(const FeatureMap& x, std::int64_t c_out, const AttentionConfig& cfg,
                               ParamStore& ps, const std::string& prefix) {
  std::int64_t B = x.batch(), N = x.height() * x.width(), ci = x.channels();
  if (ci % cfg.num_heads != 0)
    throw ConfigError("channels " + std::to_string(ci) + " not divisible by " +
                      std::to_string(cfg.num_heads) + " heads");
  auto rows = flat_rows(x);
  auto xn = pre_norm(rows, ci, ps, prefix);
  auto mixed = xca_core(xn, B, N, ci, cfg.num_heads, ps, prefix);
  auto y = add(dense(rows, ci, c_out, ps, prefix + ".skip"),
               dense(mixed, ci, c_out, ps, prefix + ".out"));
  y = ffn_rows(y, c_out, cfg.ffn_ratio, ps, prefix + ".ffn");
  return FeatureMap(reshape(y, {B, x.height(), x.width(), c_out}), x.stride);
}

}  // namespace detail

// Scale aggregation over the backbone pyramid. Levels enter through learned
// 1x1 projections; the stream is pooled to meet each coarser level and mixed
// by a channel-wise attention block after every addition.
inline FeatureMap sae(const BackboneOutput& f_dot, const EncoderConfig& cfg, ParamStore& ps,
                      const std::string& prefix = "sae") {
  cfg.validate();
  for (int i = 0; i < 4; ++i) {
    int want = 8 << i;
    if (f_dot.f_dot[i].stride != want)
      throw ShapeError("aggregation level " + std::to_string(i + 1) + " has stride " +
                       std::to_string(f_dot.f_dot[i].stride) + ", expected " +
                       std::to_string(want));
  }
  std::int64_t D = cfg.sae_width;
  AttentionConfig att;
  att.num_heads = cfg.sae_heads;
  att.ffn_ratio = cfg.ffn_ratio;
  const auto& m = f_dot.f_dot;
  auto s = detail::project_map(m[0], D, ps, prefix + ".proj1");
  auto d1 = downsample2x(s, D, ps, prefix + ".down1");
  auto p2 = detail::project_map(m[1], D, ps, prefix + ".proj2");
  s = gca(FeatureMap(add(d1.data, p2.data), d1.stride), att, ps, prefix + ".block1");
  auto d2 = downsample2x(s, D, ps, prefix + ".down2");
  auto p3 = detail::project_map(m[2], D, ps, prefix + ".proj3");
  s = gca(FeatureMap(add(d2.data, p3.data), d2.stride), att, ps, prefix + ".block2");
  auto u4 = upsample2x(m[3], D, ps, prefix + ".up4");
  s = gca(FeatureMap(add(s.data, u4.data), s.stride), att, ps, prefix + ".block3");
  return s;
}

// Task alignment. The aggregated stream is widened once, passed through
// stacked group attention blocks whose halves are rejoined between blocks,
// and split by the last one. The first half is the classification feature;
// the second runs through its own global attention branch whose final block
// widens it back to the full task width.
inline std::pair<FeatureMap, FeatureMap> tae(const FeatureMap& s_sae, const EncoderConfig& cfg,
                                             ParamStore& ps, const std::string& prefix = "tae") {
  cfg.validate();
  if (s_sae.stride != 32)
    throw ShapeError("task encoder input has stride " + std::to_string(s_sae.stride) +
                     ", expected 32");
  std::int64_t T = cfg.tae_width;
  AttentionConfig gatt;
  gatt.num_heads = cfg.group_heads;
  gatt.ffn_ratio = cfg.ffn_ratio;
  AttentionConfig oatt;
  oatt.num_heads = cfg.global_heads;
  oatt.ffn_ratio = cfg.ffn_ratio;
  auto x = detail::project_map(s_sae, T, ps, prefix + ".expand");
  std::pair<FeatureMap, FeatureMap> halves;
  for (int j = 0; j < cfg.num_group_blocks; ++j) {
    halves = group_ca(x, gatt, ps, prefix + ".group" + std::to_string(j));
    if (j + 1 < cfg.num_group_blocks) x = concat_groups(halves.first, halves.second);
  }
  auto t_cls = halves.first;
  auto y = halves.second;
  for (int j = 0; j + 1 < cfg.num_global_blocks; ++j)
    y = gca(y, oatt, ps, prefix + ".global" + std::to_string(j));
  y = detail::widening_gca(y, T, oatt, ps,
                           prefix + ".global" + std::to_string(cfg.num_global_blocks - 1));
  return {t_cls, y};
}

}  // namespace dfft
