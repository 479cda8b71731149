#pragma once

// Neural building blocks over FeatureMaps: patch embedding and merging, 2x
// resampling, FFN, shifted-window self-attention, and channel-wise
// (cross-covariance) attention in global and two-group forms.
//
// Layout conventions used by the gathers below:
//   patch_embed flattens each 8x8x3 patch as (py, px, c) row-major.
//   patch_merge concatenates the 2x2 neighborhood as (dy, dx, c).
//   Heads are merged back in head-major channel order.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "feature_map.hpp"
#include "param_store.hpp"
#include "tensor.hpp"

namespace dfft {

struct AttentionConfig {
  int num_heads = 1;
  int window_size = 1;  // w_msa only
  double ffn_ratio = 4.0;
};

namespace detail {

using IndexVec = std::shared_ptr<std::vector<std::int64_t>>;

inline IndexVec make_index(std::size_t n) {
  auto v = std::make_shared<std::vector<std::int64_t>>();
  v->reserve(n);
  return v;
}

inline Tensor flat_rows(const FeatureMap& x) {
  return reshape(x.data, {x.batch() * x.height() * x.width(), x.channels()});
}

inline Tensor pre_norm(const Tensor& rows, std::int64_t c, ParamStore& ps,
                       const std::string& prefix) {
  auto g = ps.get(prefix + ".ln.g", {c}, Init::kOnes);
  auto b = ps.get(prefix + ".ln.b", {c}, Init::kZeros);
  return layernorm_last(rows, g, b);
}

inline Tensor dense(const Tensor& rows, std::int64_t in, std::int64_t out, ParamStore& ps,
                    const std::string& prefix) {
  auto w = ps.get(prefix + ".w", {in, out}, Init::kTruncNormal);
  auto b = ps.get(prefix + ".b", {out}, Init::kZeros);
  return linear(rows, w, b);
}

// Pre-norm residual MLP on [rows, c].
inline Tensor ffn_rows(const Tensor& rows, std::int64_t c, double ratio, ParamStore& ps,
                       const std::string& prefix) {
  auto hidden = static_cast<std::int64_t>(std::llround(ratio * static_cast<double>(c)));
  if (hidden < 1) throw ConfigError("ffn hidden width must be at least 1");
  auto h = gelu(dense(pre_norm(rows, c, ps, prefix), c, hidden, ps, prefix + ".fc1"));
  return add(rows, dense(h, hidden, c, ps, prefix + ".fc2"));
}

// Slice one of q/k/v out of a fused projection [groups, tokens, 3c] and split
// heads at the same time, giving [groups*heads, tokens, c/heads].
inline Tensor qkv_heads(const Tensor& qkv, std::int64_t groups, std::int64_t tokens,
                        std::int64_t c, std::int64_t heads, std::int64_t which) {
  std::int64_t d = c / heads;
  auto idx = make_index(static_cast<std::size_t>(groups * heads * tokens * d));
  for (std::int64_t g = 0; g < groups; ++g)
    for (std::int64_t hh = 0; hh < heads; ++hh)
      for (std::int64_t t = 0; t < tokens; ++t)
        for (std::int64_t j = 0; j < d; ++j)
          idx->push_back((g * tokens + t) * 3 * c + which * c + hh * d + j);
  return gather(qkv, idx, {groups * heads, tokens, d});
}

// Inverse of the head split: [groups*heads, tokens, d] -> [groups*tokens, c].
inline Tensor merge_heads(const Tensor& x, std::int64_t groups, std::int64_t tokens,
                          std::int64_t c, std::int64_t heads) {
  std::int64_t d = c / heads;
  auto idx = make_index(static_cast<std::size_t>(groups * tokens * c));
  for (std::int64_t g = 0; g < groups; ++g)
    for (std::int64_t t = 0; t < tokens; ++t)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        std::int64_t hh = ch / d, j = ch % d;
        idx->push_back(((g * heads + hh) * tokens + t) * d + j);
      }
  return gather(x, idx, {groups * tokens, c});
}

// Cross-covariance attention core on pre-normalized rows [groups*tokens, c].
// Columns of q and k are unit-normalized over tokens, the d x d channel map
// is softmaxed per row at a learned per-head temperature, and values are
// mixed through its transpose.
inline Tensor xca_core(const Tensor& xn, std::int64_t groups, std::int64_t tokens, std::int64_t c,
                       std::int64_t heads, ParamStore& ps, const std::string& prefix) {
  auto qkv = dense(xn, c, 3 * c, ps, prefix + ".qkv");
  auto q = qkv_heads(qkv, groups, tokens, c, heads, 0);
  auto k = qkv_heads(qkv, groups, tokens, c, heads, 1);
  auto v = qkv_heads(qkv, groups, tokens, c, heads, 2);
  auto qn = normalize_tokens(q);
  auto kn = normalize_tokens(k);
  auto logits = bmm(qn, kn, true, false);  // [groups*heads, d, d]
  std::int64_t d = c / heads;
  auto tau = exp_t(ps.get(prefix + ".log_tau", {heads}, Init::kZeros));
  auto tidx = make_index(static_cast<std::size_t>(groups * heads * d * d));
  for (std::int64_t g = 0; g < groups; ++g)
    for (std::int64_t hh = 0; hh < heads; ++hh)
      for (std::int64_t e = 0; e < d * d; ++e) tidx->push_back(hh);
  auto tau_big = gather(tau, tidx, {groups * heads, d, d});
  auto attn = softmax_last(mul(logits, tau_big));
  auto out = bmm(v, attn, false, true);  // [groups*heads, tokens, d]
  return merge_heads(out, groups, tokens, c, heads);
}

}  // namespace detail

inline FeatureMap patch_embed(const FeatureMap& image, std::int64_t c1, ParamStore& ps,
                              const std::string& prefix) {
  if (image.channels() != 3)
    throw ShapeError("patch_embed expects 3 input channels, got " +
                     std::to_string(image.channels()));
  if (image.height() % 8 != 0)
    throw DimensionError("height " + std::to_string(image.height()) + " not divisible by 8");
  if (image.width() % 8 != 0)
    throw DimensionError("width " + std::to_string(image.width()) + " not divisible by 8");
  std::int64_t B = image.batch(), H = image.height(), W = image.width();
  std::int64_t Ho = H / 8, Wo = W / 8;
  auto idx = detail::make_index(static_cast<std::size_t>(B * Ho * Wo * 192));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t x = 0; x < Wo; ++x)
        for (std::int64_t py = 0; py < 8; ++py)
          for (std::int64_t px = 0; px < 8; ++px)
            for (std::int64_t ch = 0; ch < 3; ++ch)
              idx->push_back(((b * H + y * 8 + py) * W + x * 8 + px) * 3 + ch);
  auto patches = gather(image.data, idx, {B * Ho * Wo, 192});
  auto out = detail::dense(patches, 192, c1, ps, prefix);
  return FeatureMap(reshape(out, {B, Ho, Wo, c1}), image.stride * 8);
}

inline FeatureMap patch_merge(const FeatureMap& x, std::int64_t c_out, ParamStore& ps,
                              const std::string& prefix) {
  if (x.height() % 2 != 0)
    throw DimensionError("height " + std::to_string(x.height()) + " not divisible by 2");
  if (x.width() % 2 != 0)
    throw DimensionError("width " + std::to_string(x.width()) + " not divisible by 2");
  std::int64_t B = x.batch(), H = x.height(), W = x.width(), C = x.channels();
  std::int64_t Ho = H / 2, Wo = W / 2;
  auto idx = detail::make_index(static_cast<std::size_t>(B * Ho * Wo * 4 * C));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t xx = 0; xx < Wo; ++xx)
        for (std::int64_t dy = 0; dy < 2; ++dy)
          for (std::int64_t dx = 0; dx < 2; ++dx)
            for (std::int64_t ch = 0; ch < C; ++ch)
              idx->push_back(((b * H + y * 2 + dy) * W + xx * 2 + dx) * C + ch);
  auto grouped = gather(x.data, idx, {B * Ho * Wo, 4 * C});
  auto out = detail::dense(grouped, 4 * C, c_out, ps, prefix);
  return FeatureMap(reshape(out, {B, Ho, Wo, c_out}), x.stride * 2);
}

inline FeatureMap upsample2x(const FeatureMap& x, std::int64_t c_out, ParamStore& ps,
                             const std::string& prefix) {
  std::int64_t B = x.batch(), H = x.height(), W = x.width(), C = x.channels();
  std::int64_t Ho = H * 2, Wo = W * 2;
  auto idx = detail::make_index(static_cast<std::size_t>(B * Ho * Wo * C));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t xx = 0; xx < Wo; ++xx)
        for (std::int64_t ch = 0; ch < C; ++ch)
          idx->push_back(((b * H + y / 2) * W + xx / 2) * C + ch);
  auto up = gather(x.data, idx, {B * Ho * Wo, C});
  auto out = detail::dense(up, C, c_out, ps, prefix);
  if (x.stride % 2 != 0) throw ValueError("upsample2x would produce a fractional stride");
  return FeatureMap(reshape(out, {B, Ho, Wo, c_out}), x.stride / 2);
}

inline FeatureMap downsample2x(const FeatureMap& x, std::int64_t c_out, ParamStore& ps,
                               const std::string& prefix) {
  if (x.height() % 2 != 0)
    throw DimensionError("height " + std::to_string(x.height()) + " not divisible by 2");
  if (x.width() % 2 != 0)
    throw DimensionError("width " + std::to_string(x.width()) + " not divisible by 2");
  auto pooled = avgpool2x2(x.data);
  std::int64_t B = x.batch(), C = x.channels();
  std::int64_t Ho = x.height() / 2, Wo = x.width() / 2;
  auto rows = reshape(pooled, {B * Ho * Wo, C});
  auto out = detail::dense(rows, C, c_out, ps, prefix);
  return FeatureMap(reshape(out, {B, Ho, Wo, c_out}), x.stride * 2);
}

inline FeatureMap ffn(const FeatureMap& x, double ratio, ParamStore& ps,
                      const std::string& prefix) {
  auto rows = detail::flat_rows(x);
  auto out = detail::ffn_rows(rows, x.channels(), ratio, ps, prefix);
  return FeatureMap(reshape(out, x.data.shape()), x.stride);
}

// Window self-attention. shifted=true rolls the map by floor(M/2) in both
// axes first, masks attention between pairs that were not neighbors before
// the roll, and rolls back after.
inline FeatureMap w_msa(const FeatureMap& x, const AttentionConfig& cfg, bool shifted,
                        ParamStore& ps, const std::string& prefix) {
  std::int64_t B = x.batch(), H = x.height(), W = x.width(), C = x.channels();
  std::int64_t M = cfg.window_size, heads = cfg.num_heads;
  if (M > H || M > W)
    throw ConfigError("window size " + std::to_string(M) + " exceeds feature map " +
                      std::to_string(H) + "x" + std::to_string(W));
  if (H % M != 0)
    throw DimensionError("height " + std::to_string(H) + " not divisible by window " +
                         std::to_string(M));
  if (W % M != 0)
    throw DimensionError("width " + std::to_string(W) + " not divisible by window " +
                         std::to_string(M));
  if (C % heads != 0)
    throw ConfigError("channels " + std::to_string(C) + " not divisible by " +
                      std::to_string(heads) + " heads");
  std::int64_t s = shifted ? M / 2 : 0;
  std::int64_t nWy = H / M, nWx = W / M, n = M * M, NW = B * nWy * nWx, d = C / heads;

  auto rows = detail::flat_rows(x);
  auto xn = detail::pre_norm(rows, C, ps, prefix);

  // roll + window partition in one gather
  auto pidx = detail::make_index(static_cast<std::size_t>(B * H * W * C));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t wy = 0; wy < nWy; ++wy)
      for (std::int64_t wx = 0; wx < nWx; ++wx)
        for (std::int64_t my = 0; my < M; ++my)
          for (std::int64_t mx = 0; mx < M; ++mx) {
            std::int64_t sy = (wy * M + my + s) % H;
            std::int64_t sx = (wx * M + mx + s) % W;
            for (std::int64_t ch = 0; ch < C; ++ch)
              pidx->push_back(((b * H + sy) * W + sx) * C + ch);
          }
  auto windows = gather(xn, pidx, {NW * n, C});

  auto qkv = detail::dense(windows, C, 3 * C, ps, prefix + ".qkv");
  auto q = detail::qkv_heads(qkv, NW, n, C, heads, 0);
  auto k = detail::qkv_heads(qkv, NW, n, C, heads, 1);
  auto v = detail::qkv_heads(qkv, NW, n, C, heads, 2);

  auto logits = mul_scalar(bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d)));

  // learned bias indexed by in-window offset of the token pair
  std::int64_t span = 2 * M - 1;
  auto table = ps.get(prefix + ".bias", {span * span, heads}, Init::kTruncNormal);
  auto bidx = detail::make_index(static_cast<std::size_t>(NW * heads * n * n));
  std::vector<std::int64_t> pair_idx(static_cast<std::size_t>(n * n));
  for (std::int64_t t1 = 0; t1 < n; ++t1)
    for (std::int64_t t2 = 0; t2 < n; ++t2) {
      std::int64_t dy = t1 / M - t2 / M + M - 1;
      std::int64_t dx = t1 % M - t2 % M + M - 1;
      pair_idx[static_cast<std::size_t>(t1 * n + t2)] = dy * span + dx;
    }
  for (std::int64_t w = 0; w < NW; ++w)
    for (std::int64_t hh = 0; hh < heads; ++hh)
      for (std::int64_t p = 0; p < n * n; ++p)
        bidx->push_back(pair_idx[static_cast<std::size_t>(p)] * heads + hh);
  auto bias = gather(table, bidx, {NW * heads, n, n});
  auto scores = add(logits, bias);

  if (s > 0) {
    // pairs whose pixels came from different sides of the roll seam must not
    // attend to each other; band ids label the three seam regions per axis
    auto band = [&](std::int64_t p, std::int64_t extent) {
      if (p < extent - M) return std::int64_t{0};
      if (p < extent - s) return std::int64_t{1};
      return std::int64_t{2};
    };
    std::vector<double> mask(static_cast<std::size_t>(NW * heads * n * n), 0.0);
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t wy = 0; wy < nWy; ++wy)
        for (std::int64_t wx = 0; wx < nWx; ++wx) {
          std::int64_t w = (b * nWy + wy) * nWx + wx;
          std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
          for (std::int64_t my = 0; my < M; ++my)
            for (std::int64_t mx = 0; mx < M; ++mx)
              ids[static_cast<std::size_t>(my * M + mx)] =
                  3 * band(wy * M + my, H) + band(wx * M + mx, W);
          for (std::int64_t hh = 0; hh < heads; ++hh)
            for (std::int64_t t1 = 0; t1 < n; ++t1)
              for (std::int64_t t2 = 0; t2 < n; ++t2)
                if (ids[static_cast<std::size_t>(t1)] != ids[static_cast<std::size_t>(t2)])
                  mask[static_cast<std::size_t>(((w * heads + hh) * n + t1) * n + t2)] = -1e9;
        }
    scores = add(scores, Tensor::from({NW * heads, n, n}, std::move(mask)));
  }

  auto attn = softmax_last(scores);
  auto out = bmm(attn, v);  // [NW*heads, n, d]
  auto merged = detail::merge_heads(out, NW, n, C, heads);
  auto projected = detail::dense(merged, C, C, ps, prefix + ".out");

  // undo the partition and the roll
  auto ridx = detail::make_index(static_cast<std::size_t>(B * H * W * C));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t xx = 0; xx < W; ++xx) {
        std::int64_t ry = (y - s + H) % H;
        std::int64_t rx = (xx - s + W) % W;
        std::int64_t w = (b * nWy + ry / M) * nWx + rx / M;
        std::int64_t t = (ry % M) * M + rx % M;
        for (std::int64_t ch = 0; ch < C; ++ch) ridx->push_back((w * n + t) * C + ch);
      }
  auto restored = gather(projected, ridx, {B * H * W, C});
  auto y = add(rows, restored);
  return FeatureMap(reshape(y, x.data.shape()), x.stride);
}

// Global channel-wise attention block: cross-covariance attention over all
// spatial tokens, then an FFN sublayer.
inline FeatureMap gca(const FeatureMap& x, const AttentionConfig& cfg, ParamStore& ps,
                      const std::string& prefix) {
  std::int64_t B = x.batch(), C = x.channels(), N = x.height() * x.width();
  std::int64_t heads = cfg.num_heads;
  if (C % heads != 0)
    throw ConfigError("channels " + std::to_string(C) + " not divisible by " +
                      std::to_string(heads) + " heads");
  auto rows = detail::flat_rows(x);
  auto xn = detail::pre_norm(rows, C, ps, prefix);
  auto mixed = detail::xca_core(xn, B, N, C, heads, ps, prefix);
  auto y = add(rows, detail::dense(mixed, C, C, ps, prefix + ".out"));
  y = detail::ffn_rows(y, C, cfg.ffn_ratio, ps, prefix + ".ffn");
  return FeatureMap(reshape(y, x.data.shape()), x.stride);
}

// Group channel-wise attention: the q/k/v projections are shared across all
// channels, while the output projection and the FFN act block-diagonally on
// two channel halves. Returns the halves separately.
inline std::pair<FeatureMap, FeatureMap> group_ca(const FeatureMap& x, const AttentionConfig& cfg,
                                                  ParamStore& ps, const std::string& prefix) {
  std::int64_t B = x.batch(), C = x.channels(), N = x.height() * x.width();
  std::int64_t heads = cfg.num_heads;
  if (C % 2 != 0) throw ConfigError("group attention needs an even channel count, got " +
                                    std::to_string(C));
  if (C % heads != 0)
    throw ConfigError("channels " + std::to_string(C) + " not divisible by " +
                      std::to_string(heads) + " heads");
  std::int64_t Cg = C / 2;
  auto rows = detail::flat_rows(x);
  auto xn = detail::pre_norm(rows, C, ps, prefix);
  auto mixed = detail::xca_core(xn, B, N, C, heads, ps, prefix);
  auto y1 = add(slice_last(rows, 0, Cg),
                detail::dense(slice_last(mixed, 0, Cg), Cg, Cg, ps, prefix + ".out1"));
  auto y2 = add(slice_last(rows, Cg, C),
                detail::dense(slice_last(mixed, Cg, C), Cg, Cg, ps, prefix + ".out2"));
  // per-group norms keep the halves independent downstream of the shared core
  y1 = detail::ffn_rows(y1, Cg, cfg.ffn_ratio, ps, prefix + ".ffn1");
  y2 = detail::ffn_rows(y2, Cg, cfg.ffn_ratio, ps, prefix + ".ffn2");
  Shape half = {B, x.height(), x.width(), Cg};
  return {FeatureMap(reshape(y1, half), x.stride), FeatureMap(reshape(y2, half), x.stride)};
}

// Concatenate two group halves back into one map.
inline FeatureMap concat_groups(const FeatureMap& a, const FeatureMap& b) {
  if (a.stride != b.stride) throw ShapeError("concat_groups: stride mismatch");
  auto ra = detail::flat_rows(a);
  auto rb = detail::flat_rows(b);
  auto cat = concat_last(ra, rb);
  return FeatureMap(reshape(cat, {a.batch(), a.height(), a.width(), a.channels() + b.channels()}),
                    a.stride);
}

}  // namespace dfft
