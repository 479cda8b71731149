#pragma once

// Analytic multiply-accumulate model for every block type and for whole
// configurations. Counts match the instrumented tensor library exactly:
// 1 mac = 1 reported flop, biases, norms, softmax and activations excluded.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "encoders.hpp"
#include "errors.hpp"

namespace dfft {

inline std::uint64_t macs_linear(std::int64_t n_cells, std::int64_t c_in, std::int64_t c_out) {
  if (n_cells < 1 || c_in < 1 || c_out < 1)
    throw ConfigError("linear cost needs positive dimensions");
  return static_cast<std::uint64_t>(n_cells) * static_cast<std::uint64_t>(c_in) *
         static_cast<std::uint64_t>(c_out);
}

// Hidden width follows the FFN implementation so counts stay exact for
// fractional ratios.
inline std::uint64_t macs_ffn(std::int64_t n_cells, std::int64_t c, double ratio) {
  auto hidden = std::llround(ratio * static_cast<double>(c));
  if (hidden < 1) throw ConfigError("ffn hidden width must be at least 1");
  return 2 * macs_linear(n_cells, c, hidden);
}

// Window attention block including its FFN pair: fused qkv and output
// projections, two window-local attention products, then the FFN.
inline std::uint64_t macs_wmsa(std::int64_t h, std::int64_t w, std::int64_t C, std::int64_t M,
                               double ratio) {
  if (h % M != 0 || w % M != 0)
    throw DimensionError("window cost needs dims divisible by " + std::to_string(M));
  auto n = static_cast<std::uint64_t>(h) * static_cast<std::uint64_t>(w);
  auto c = static_cast<std::uint64_t>(C);
  return 4 * n * c * c + 2 * static_cast<std::uint64_t>(M * M) * n * c +
         macs_ffn(h * w, C, ratio);
}

// Channel-wise attention block: projections, the pair of d x d channel
// products per head, and the FFN.
inline std::uint64_t macs_gca(std::int64_t n_cells, std::int64_t C, std::int64_t heads,
                              double ratio) {
  if (C % heads != 0)
    throw ConfigError("channels " + std::to_string(C) + " not divisible by " +
                      std::to_string(heads) + " heads");
  auto n = static_cast<std::uint64_t>(n_cells);
  auto c = static_cast<std::uint64_t>(C);
  return 4 * n * c * c + 2 * n * c * c / static_cast<std::uint64_t>(heads) +
         macs_ffn(n_cells, C, ratio);
}

// Group attention block: shared qkv, channel products, two half-width output
// projections and two half-width FFNs.
inline std::uint64_t macs_group_ca(std::int64_t n_cells, std::int64_t C, std::int64_t heads,
                                   double ratio) {
  if (C % 2 != 0) throw ConfigError("group cost needs an even channel count");
  if (C % heads != 0)
    throw ConfigError("channels " + std::to_string(C) + " not divisible by " +
                      std::to_string(heads) + " heads");
  auto n = static_cast<std::uint64_t>(n_cells);
  auto c = static_cast<std::uint64_t>(C);
  return 3 * n * c * c + 2 * n * c * c / static_cast<std::uint64_t>(heads) + n * c * c / 2 +
         2 * macs_ffn(n_cells, C / 2, ratio);
}

// Widening channel-wise block: qkv and channel products at the input width,
// skip and output projections to the output width, FFN at the output width.
inline std::uint64_t macs_global_expand(std::int64_t n_cells, std::int64_t c_in,
                                        std::int64_t c_out, std::int64_t heads, double ratio) {
  if (c_in % heads != 0)
    throw ConfigError("channels " + std::to_string(c_in) + " not divisible by " +
                      std::to_string(heads) + " heads");
  auto n = static_cast<std::uint64_t>(n_cells);
  auto ci = static_cast<std::uint64_t>(c_in);
  auto co = static_cast<std::uint64_t>(c_out);
  return 3 * n * ci * ci + 2 * n * ci * ci / static_cast<std::uint64_t>(heads) +
         2 * n * ci * co + macs_ffn(n_cells, c_out, ratio);
}

struct FlopsEntry {
  std::string name;
  std::string group;
  std::uint64_t macs = 0;
};

struct FlopsReport {
  std::vector<FlopsEntry> entries;
  std::uint64_t total = 0;

  void add(const std::string& name, const std::string& group, std::uint64_t macs) {
    entries.push_back(FlopsEntry{name, group, macs});
    total += macs;
  }

  std::uint64_t group_total(const std::string& group) const {
    std::uint64_t s = 0;
    for (const auto& e : entries)
      if (e.group == group) s += e.macs;
    return s;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "# multiply-accumulates, 1 mac = 1 flop; norms, softmax and activations excluded\n";
    for (const auto& e : entries)
      os << std::left << std::setw(24) << e.name << " " << e.macs << "\n";
    for (const auto* g : {"backbone", "sae", "tae", "head"})
      os << std::left << std::setw(24) << (std::string(g) + " subtotal") << " " << group_total(g)
         << "\n";
    os << std::left << std::setw(24) << "total" << " " << total << "\n";
    return os.str();
  }
};

// Walks the exact forward structure and prices every block.
inline FlopsReport macs_model(const BackboneConfig& bb, const EncoderConfig& enc, int K,
                              int num_classes, std::int64_t img_h, std::int64_t img_w) {
  bb.validate();
  enc.validate();
  if (K < 1 || num_classes < 1) throw ConfigError("head needs positive K and class count");
  for (int i = 0; i < 4; ++i) {
    std::int64_t need = (8LL << i) * bb.stages[static_cast<std::size_t>(i)].window_size;
    if (img_h % need != 0 || img_w % need != 0)
      throw DimensionError("image dims must be divisible by " + std::to_string(need) +
                           " for stage " + std::to_string(i + 1));
  }
  FlopsReport rep;
  std::array<std::int64_t, 4> hh, ww, cc;
  std::array<int, 4> heads;
  for (int i = 0; i < 4; ++i) {
    hh[static_cast<std::size_t>(i)] = img_h / (8LL << i);
    ww[static_cast<std::size_t>(i)] = img_w / (8LL << i);
    cc[static_cast<std::size_t>(i)] = bb.stages[static_cast<std::size_t>(i)].channels;
    heads[static_cast<std::size_t>(i)] = bb.stages[static_cast<std::size_t>(i)].num_heads;
  }
  auto n = [&](int i) { return hh[static_cast<std::size_t>(i)] * ww[static_cast<std::size_t>(i)]; };

  rep.add("backbone.embed", "backbone", macs_linear(n(0), 192, cc[0]));
  auto stage = [&](int i, const std::string& name) {
    const auto& st = bb.stages[static_cast<std::size_t>(i)];
    for (int j = 0; j < st.num_sa_blocks; ++j)
      rep.add(name + ".sa" + std::to_string(j), "backbone",
              macs_wmsa(hh[static_cast<std::size_t>(i)], ww[static_cast<std::size_t>(i)],
                        st.channels, st.window_size, bb.ffn_ratio));
    rep.add(name + ".gca", "backbone",
            macs_gca(n(i), st.channels, st.num_heads, bb.ffn_ratio));
  };
  stage(0, "backbone.stage1");
  rep.add("backbone.merge", "backbone", macs_linear(n(1), 4 * cc[0], cc[1]));
  stage(1, "backbone.stage2");
  rep.add("backbone.saa2.up", "backbone", macs_linear(n(0), cc[1], cc[0]));
  rep.add("backbone.saa2.gca", "backbone", macs_gca(n(0), cc[0], heads[0], bb.ffn_ratio));
  rep.add("backbone.recover2", "backbone", macs_linear(n(1), cc[0], cc[1]));
  rep.add("backbone.reduce3", "backbone", macs_linear(n(2), cc[1], cc[2]));
  stage(2, "backbone.stage3");
  rep.add("backbone.saa3.up", "backbone", macs_linear(n(1), cc[2], cc[1]));
  rep.add("backbone.saa3.gca", "backbone", macs_gca(n(1), cc[1], heads[1], bb.ffn_ratio));
  rep.add("backbone.recover3", "backbone", macs_linear(n(2), cc[1], cc[2]));
  rep.add("backbone.reduce4", "backbone", macs_linear(n(3), cc[2], cc[3]));
  stage(3, "backbone.stage4");
  rep.add("backbone.saa4.up", "backbone", macs_linear(n(2), cc[3], cc[2]));
  rep.add("backbone.saa4.gca", "backbone", macs_gca(n(2), cc[2], heads[2], bb.ffn_ratio));

  std::int64_t D = enc.sae_width, T = enc.tae_width;
  rep.add("sae.proj1", "sae", macs_linear(n(0), cc[0], D));
  rep.add("sae.down1", "sae", macs_linear(n(1), D, D));
  rep.add("sae.proj2", "sae", macs_linear(n(1), cc[1], D));
  rep.add("sae.block1", "sae", macs_gca(n(1), D, enc.sae_heads, enc.ffn_ratio));
  rep.add("sae.down2", "sae", macs_linear(n(2), D, D));
  rep.add("sae.proj3", "sae", macs_linear(n(2), cc[2], D));
  rep.add("sae.block2", "sae", macs_gca(n(2), D, enc.sae_heads, enc.ffn_ratio));
  rep.add("sae.up4", "sae", macs_linear(n(2), cc[3], D));
  rep.add("sae.block3", "sae", macs_gca(n(2), D, enc.sae_heads, enc.ffn_ratio));

  rep.add("tae.expand", "tae", macs_linear(n(2), D, T));
  for (int j = 0; j < enc.num_group_blocks; ++j)
    rep.add("tae.group" + std::to_string(j), "tae",
            macs_group_ca(n(2), T, enc.group_heads, enc.ffn_ratio));
  for (int j = 0; j + 1 < enc.num_global_blocks; ++j)
    rep.add("tae.global" + std::to_string(j), "tae",
            macs_gca(n(2), T / 2, enc.global_heads, enc.ffn_ratio));
  rep.add("tae.global" + std::to_string(enc.num_global_blocks - 1), "tae",
          macs_global_expand(n(2), T / 2, T, enc.global_heads, enc.ffn_ratio));

  rep.add("head.cls", "head",
          macs_linear(n(2), T / 2, static_cast<std::int64_t>(K) * num_classes));
  rep.add("head.reg", "head", macs_linear(n(2), T, static_cast<std::int64_t>(K) * 4));
  return rep;
}

// Conventional four-level decoupled comparison head: a 1x1 lateral to a fixed
// width per level, two kernel x kernel towers, and kernel x kernel predictors.
struct MultiLevelHeadSpec {
  int tower_layers = 4;
  std::int64_t width = 256;
  int kernel = 3;
};

struct NeckHeadComparison {
  std::uint64_t single_macs = 0;
  std::uint64_t multilevel_macs = 0;
  double ratio = 0.0;
};

inline NeckHeadComparison compare_single_vs_multilevel(const BackboneConfig& bb,
                                                       const EncoderConfig& enc, int K,
                                                       int num_classes, std::int64_t img_h,
                                                       std::int64_t img_w,
                                                       const MultiLevelHeadSpec& spec = {}) {
  auto rep = macs_model(bb, enc, K, num_classes, img_h, img_w);
  NeckHeadComparison out;
  out.single_macs = rep.group_total("sae") + rep.group_total("tae") + rep.group_total("head");
  auto kk = static_cast<std::uint64_t>(spec.kernel) * static_cast<std::uint64_t>(spec.kernel);
  auto w = static_cast<std::uint64_t>(spec.width);
  for (int i = 0; i < 4; ++i) {
    auto nl = static_cast<std::uint64_t>((img_h / (8LL << i)) * (img_w / (8LL << i)));
    auto cl = static_cast<std::uint64_t>(bb.stages[static_cast<std::size_t>(i)].channels);
    out.multilevel_macs += nl * cl * w;  // lateral
    out.multilevel_macs += 2ULL * static_cast<std::uint64_t>(spec.tower_layers) * nl * kk * w * w;
    out.multilevel_macs +=
        nl * kk * w * static_cast<std::uint64_t>(K) * static_cast<std::uint64_t>(num_classes);
    out.multilevel_macs += nl * kk * w * static_cast<std::uint64_t>(K) * 4ULL;
  }
  out.ratio = static_cast<double>(out.single_macs) / static_cast<double>(out.multilevel_macs);
  return out;
}

}  // namespace dfft
