#pragma once

// Four-stage detection backbone. Each stage runs a stack of window
// self-attention blocks capped by one channel-wise attention block, and the
// stages are stitched together by semantic-augmented attention: the coarser
// map is upsampled, added to the finer one, and re-mixed channel-wise. The
// augmented map is then pooled back down to the stage's width before the next
// stage consumes it. Outputs land at strides 8, 16, 32, 64 with the four
// configured widths.

#include <array>
#include <cstdint>
#include <string>

#include "errors.hpp"
#include "feature_map.hpp"
#include "param_store.hpp"
#include "primitives.hpp"

namespace dfft {

struct DotStageConfig {
  int num_sa_blocks = 1;
  std::int64_t channels = 32;
  int num_heads = 1;
  int window_size = 4;
};

struct BackboneConfig {
  std::array<DotStageConfig, 4> stages;
  double ffn_ratio = 4.0;

  void validate() const {
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& s = stages[i];
      if (s.num_sa_blocks < 1)
        throw ConfigError("stage " + std::to_string(i + 1) + " needs at least one sa block");
      if (s.channels < 1 || s.num_heads < 1 || s.window_size < 1)
        throw ConfigError("stage " + std::to_string(i + 1) + " has a non-positive field");
      if (s.channels % s.num_heads != 0)
        throw ConfigError("stage " + std::to_string(i + 1) + " channels " +
                          std::to_string(s.channels) + " not divisible by " +
                          std::to_string(s.num_heads) + " heads");
      if (i > 0 && stages[i - 1].channels > s.channels)
        throw ConfigError("stage widths must be non-decreasing");
    }
    if (ffn_ratio <= 0.0) throw ConfigError("ffn_ratio must be positive");
  }
};

struct BackboneOutput {
  std::array<FeatureMap, 4> f_dot;  // strides 8, 16, 32, 64
};

// Node identities captured during a forward pass so tests can assert the
// wiring, not just the shapes.
struct SaaRecord {
  const Node* cur = nullptr;
  const Node* prev = nullptr;
};

struct BackboneTrace {
  std::array<const Node*, 4> block_out = {};   // the four dot block outputs
  std::array<const Node*, 3> saa_out = {};     // augmented maps after each saa
  std::array<const Node*, 2> recovered = {};   // pooled-back carries into stages 3 and 4
  std::array<SaaRecord, 3> saa_inputs = {};
};

inline FeatureMap dot_block(FeatureMap x, const DotStageConfig& cfg, double ffn_ratio,
                            ParamStore& ps, const std::string& prefix) {
  AttentionConfig att;
  att.num_heads = cfg.num_heads;
  att.window_size = cfg.window_size;
  att.ffn_ratio = ffn_ratio;
  for (int j = 0; j < cfg.num_sa_blocks; ++j) {
    std::string sp = prefix + ".sa" + std::to_string(j);
    x = w_msa(x, att, j % 2 == 1, ps, sp);
    x = ffn(x, ffn_ratio, ps, sp + ".ffn");
  }
  return gca(x, att, ps, prefix + ".gca");
}

inline FeatureMap saa(const FeatureMap& f_cur, const FeatureMap& f_prev, int num_heads,
                      double ffn_ratio, ParamStore& ps, const std::string& prefix,
                      SaaRecord* rec = nullptr) {
  if (f_cur.stride != 2 * f_prev.stride)
    throw ShapeError("saa expects the coarse stride to be twice the fine one, got " +
                     std::to_string(f_cur.stride) + " vs " + std::to_string(f_prev.stride));
  if (rec) {
    rec->cur = f_cur.data.node().get();
    rec->prev = f_prev.data.node().get();
  }
  auto up = upsample2x(f_cur, f_prev.channels(), ps, prefix + ".up");
  FeatureMap sum(add(up.data, f_prev.data), f_prev.stride);
  AttentionConfig att;
  att.num_heads = num_heads;
  att.ffn_ratio = ffn_ratio;
  return gca(sum, att, ps, prefix + ".gca");
}

inline BackboneOutput forward_backbone(const FeatureMap& image, const BackboneConfig& cfg,
                                       ParamStore& ps, const std::string& prefix = "backbone",
                                       BackboneTrace* trace = nullptr) {
  cfg.validate();
  std::int64_t H = image.height(), W = image.width();
  for (std::size_t i = 0; i < 4; ++i) {
    std::int64_t need = (8LL << i) * cfg.stages[i].window_size;
    if (H % need != 0)
      throw DimensionError("height " + std::to_string(H) + " not divisible by " +
                           std::to_string(need) + " (stage " + std::to_string(i + 1) + ")");
    if (W % need != 0)
      throw DimensionError("width " + std::to_string(W) + " not divisible by " +
                           std::to_string(need) + " (stage " + std::to_string(i + 1) + ")");
  }

  auto c = [&](int i) { return cfg.stages[static_cast<std::size_t>(i - 1)].channels; };
  auto stage = [&](int i) -> const DotStageConfig& { return cfg.stages[static_cast<std::size_t>(i - 1)]; };
  auto heads = [&](int i) { return cfg.stages[static_cast<std::size_t>(i - 1)].num_heads; };

  auto f1 = dot_block(patch_embed(image, c(1), ps, prefix + ".embed"), stage(1), cfg.ffn_ratio, ps,
                      prefix + ".stage1");
  auto f2 = dot_block(patch_merge(f1, c(2), ps, prefix + ".merge"), stage(2), cfg.ffn_ratio, ps,
                      prefix + ".stage2");
  SaaRecord* r0 = trace ? &trace->saa_inputs[0] : nullptr;
  auto t2 = saa(f2, f1, heads(1), cfg.ffn_ratio, ps, prefix + ".saa2", r0);

  auto g2 = downsample2x(t2, c(2), ps, prefix + ".recover2");
  auto f3 = dot_block(downsample2x(g2, c(3), ps, prefix + ".reduce3"), stage(3), cfg.ffn_ratio, ps,
                      prefix + ".stage3");
  SaaRecord* r1 = trace ? &trace->saa_inputs[1] : nullptr;
  auto t3 = saa(f3, g2, heads(2), cfg.ffn_ratio, ps, prefix + ".saa3", r1);

  auto g3 = downsample2x(t3, c(3), ps, prefix + ".recover3");
  auto f4 = dot_block(downsample2x(g3, c(4), ps, prefix + ".reduce4"), stage(4), cfg.ffn_ratio, ps,
                      prefix + ".stage4");
  SaaRecord* r2 = trace ? &trace->saa_inputs[2] : nullptr;
  auto t4 = saa(f4, g3, heads(3), cfg.ffn_ratio, ps, prefix + ".saa4", r2);

  if (trace) {
    trace->block_out = {f1.data.node().get(), f2.data.node().get(), f3.data.node().get(),
                        f4.data.node().get()};
    trace->saa_out = {t2.data.node().get(), t3.data.node().get(), t4.data.node().get()};
    trace->recovered = {g2.data.node().get(), g3.data.node().get()};
  }
  return BackboneOutput{{t2, t3, t4, f4}};
}

}  // namespace dfft
