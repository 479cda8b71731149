#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <random>

#include "dfft/detection.hpp"
#include "dfft/flops.hpp"
#include "helpers.hpp"

using dfft::AttentionConfig;
using dfft::BackboneConfig;
using dfft::DotStageConfig;
using dfft::EncoderConfig;
using dfft::FeatureMap;
using dfft::MacCounter;
using dfft::ParamStore;

namespace {

BackboneConfig tiny_bb() {
  BackboneConfig cfg;
  cfg.stages = {DotStageConfig{1, 4, 1, 2}, DotStageConfig{1, 8, 1, 2},
                DotStageConfig{1, 16, 2, 2}, DotStageConfig{1, 32, 2, 2}};
  cfg.ffn_ratio = 2.0;
  return cfg;
}

EncoderConfig tiny_enc() {
  EncoderConfig cfg;
  cfg.sae_width = 8;
  cfg.tae_width = 16;
  cfg.num_group_blocks = 2;
  cfg.num_global_blocks = 2;
  cfg.sae_heads = 2;
  cfg.group_heads = 4;
  cfg.global_heads = 2;
  cfg.ffn_ratio = 2.0;
  return cfg;
}

BackboneConfig micro_bb() {
  BackboneConfig cfg;
  cfg.stages = {DotStageConfig{1, 32, 2, 4}, DotStageConfig{1, 64, 2, 4},
                DotStageConfig{2, 128, 4, 4}, DotStageConfig{1, 256, 8, 2}};
  cfg.ffn_ratio = 4.0;
  return cfg;
}

struct CountGuard {
  CountGuard() {
    MacCounter::reset();
    MacCounter::enabled = true;
  }
  ~CountGuard() { MacCounter::enabled = false; }
};

}  // namespace

TEST_CASE("unit formula arithmetic") {
  CHECK(dfft::macs_linear(10, 16, 32) == 5120);
  CHECK(dfft::macs_linear(1, 1, 1) == 1);
  CHECK(dfft::macs_linear(14, 9, 9) == 2 * dfft::macs_linear(7, 9, 9));

  CHECK(dfft::macs_wmsa(1, 1, 1, 1, 1.0) == 8);  // 4 + 2 + 2
  // doubling channels quadruples the projection term
  auto proj = [](std::int64_t C) { return dfft::macs_wmsa(4, 4, C, 4, 1.0) -
                                          2 * 16 * 16 * static_cast<std::uint64_t>(C) -
                                          dfft::macs_ffn(16, C, 1.0); };
  CHECK(proj(8) == 4 * proj(4));

  CHECK(dfft::macs_gca(4, 2, 1, 1.0) == 128);
  // the channel attention term is linear in the cell count
  CHECK(dfft::macs_gca(32, 8, 2, 2.0) == 2 * dfft::macs_gca(16, 8, 2, 2.0));

  CHECK_THROWS_AS(dfft::macs_wmsa(5, 4, 8, 2, 1.0), dfft::DimensionError);
  CHECK_THROWS_AS(dfft::macs_gca(4, 9, 2, 1.0), dfft::ConfigError);
  CHECK_THROWS_AS(dfft::macs_group_ca(4, 7, 1, 1.0), dfft::ConfigError);
  CHECK_THROWS_AS(dfft::macs_linear(0, 1, 1), dfft::ConfigError);
}

TEST_CASE("linear and resampling formulas match the instrumented counter") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::int64_t> dim(1, 12);
  for (int trial = 0; trial < 3; ++trial) {
    std::int64_t n = dim(rng), ci = dim(rng), co = dim(rng);
    auto x = dtest::rand_tensor({n, ci}, 100 + static_cast<unsigned>(trial));
    auto w = dtest::rand_tensor({ci, co}, 200 + static_cast<unsigned>(trial));
    auto b = dtest::rand_tensor({co}, 300 + static_cast<unsigned>(trial));
    CountGuard guard;
    dfft::linear(x, w, b);
    CHECK(MacCounter::macs == dfft::macs_linear(n, ci, co));
  }

  // resampling is one projection at the output resolution
  for (int trial = 0; trial < 3; ++trial) {
    std::int64_t h = 2 * dim(rng), w = 2 * dim(rng), ci = dim(rng), co = dim(rng);
    ParamStore ps(static_cast<unsigned>(trial) + 1);
    FeatureMap fm(dtest::rand_tensor({1, h, w, ci}, 400 + static_cast<unsigned>(trial)), 16);
    {
      CountGuard guard;
      dfft::downsample2x(fm, co, ps, "d" + std::to_string(trial));
      CHECK(MacCounter::macs == dfft::macs_linear(h / 2 * (w / 2), ci, co));
    }
    {
      CountGuard guard;
      dfft::upsample2x(fm, co, ps, "u" + std::to_string(trial));
      CHECK(MacCounter::macs == dfft::macs_linear(4 * h * w, ci, co));
    }
  }
}

TEST_CASE("window attention formula matches the instrumented counter") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> mm(1, 3), reps(1, 3), hds(1, 2);
  for (int trial = 0; trial < 3; ++trial) {
    std::int64_t M = mm(rng), h = M * reps(rng), w = M * reps(rng);
    int heads = hds(rng);
    std::int64_t C = 4 * heads;
    AttentionConfig att;
    att.num_heads = heads;
    att.window_size = static_cast<int>(M);
    att.ffn_ratio = 2.0;
    ParamStore ps(static_cast<unsigned>(trial) + 10);
    FeatureMap fm(dtest::rand_tensor({1, h, w, C}, 500 + static_cast<unsigned>(trial)), 8);
    CountGuard guard;
    auto y = dfft::w_msa(fm, att, trial % 2 == 1, ps, "w");
    dfft::ffn(y, att.ffn_ratio, ps, "w.ffn");
    CHECK(MacCounter::macs == dfft::macs_wmsa(h, w, C, M, att.ffn_ratio));
  }
}

TEST_CASE("channel attention formulas match the instrumented counter") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> hds(1, 4), reps(1, 4);
  for (int trial = 0; trial < 3; ++trial) {
    int heads = hds(rng);
    std::int64_t C = 4 * heads, h = reps(rng), w = reps(rng);
    AttentionConfig att;
    att.num_heads = heads;
    att.ffn_ratio = 2.0;
    ParamStore ps(static_cast<unsigned>(trial) + 20);
    FeatureMap fm(dtest::rand_tensor({1, h, w, C}, 600 + static_cast<unsigned>(trial)), 32);
    {
      CountGuard guard;
      dfft::gca(fm, att, ps, "g");
      CHECK(MacCounter::macs == dfft::macs_gca(h * w, C, heads, att.ffn_ratio));
    }
  }

  for (int trial = 0; trial < 3; ++trial) {
    int heads = 2 * hds(rng);
    std::int64_t C = 4 * heads, h = reps(rng), w = reps(rng);
    AttentionConfig att;
    att.num_heads = heads;
    att.ffn_ratio = 2.0;
    ParamStore ps(static_cast<unsigned>(trial) + 30);
    FeatureMap fm(dtest::rand_tensor({1, h, w, C}, 700 + static_cast<unsigned>(trial)), 32);
    {
      CountGuard guard;
      dfft::group_ca(fm, att, ps, "gc");
      CHECK(MacCounter::macs == dfft::macs_group_ca(h * w, C, heads, att.ffn_ratio));
    }
  }

  for (int trial = 0; trial < 3; ++trial) {
    int heads = hds(rng);
    std::int64_t ci = 4 * heads, co = 8 * hds(rng), h = reps(rng), w = reps(rng);
    AttentionConfig att;
    att.num_heads = heads;
    att.ffn_ratio = 2.0;
    ParamStore ps(static_cast<unsigned>(trial) + 40);
    FeatureMap fm(dtest::rand_tensor({1, h, w, ci}, 800 + static_cast<unsigned>(trial)), 32);
    {
      CountGuard guard;
      dfft::detail::widening_gca(fm, co, att, ps, "ge");
      CHECK(MacCounter::macs == dfft::macs_global_expand(h * w, ci, co, heads, att.ffn_ratio));
    }
  }
}

TEST_CASE("model walk matches an instrumented full forward") {
  auto bb = tiny_bb();
  auto enc = tiny_enc();
  ParamStore ps(51);
  FeatureMap img(dtest::rand_tensor({1, 128, 128, 3}, 900), 1);
  CountGuard guard;
  auto f = forward_backbone(img, bb, ps);
  auto s = dfft::sae(f, enc, ps);
  auto [t_cls, t_reg] = dfft::tae(s, enc, ps);
  dfft::predict(t_cls, t_reg, 3, 2, ps);
  auto rep = dfft::macs_model(bb, enc, 2, 3, 128, 128);
  CHECK(MacCounter::macs == rep.total);
}

TEST_CASE("report structure and scaling") {
  auto bb = micro_bb();
  EncoderConfig enc;  // published defaults
  auto rep = dfft::macs_model(bb, enc, 5, 2, 256, 256);

  std::uint64_t sum = 0;
  for (const auto& e : rep.entries) sum += e.macs;
  CHECK(sum == rep.total);
  CHECK(rep.group_total("backbone") + rep.group_total("sae") + rep.group_total("tae") +
            rep.group_total("head") ==
        rep.total);
  for (const auto& e : rep.entries) CHECK(e.macs > 0);

  // halving the image area halves every spatially linear term
  auto half = dfft::macs_model(bb, enc, 5, 2, 256, 128);
  CHECK(rep.total == 2 * half.total);

  // dropping a self-attention block strictly reduces the bill
  auto lighter_cfg = bb;
  lighter_cfg.stages[2].num_sa_blocks = 1;
  auto lighter = dfft::macs_model(lighter_cfg, enc, 5, 2, 256, 256);
  CHECK(lighter.total < rep.total);

  CHECK_THROWS_AS(dfft::macs_model(bb, enc, 5, 2, 200, 256), dfft::DimensionError);

  auto text = rep.to_text();
  CHECK(text.find("backbone.embed") != std::string::npos);
  CHECK(text.find("total") != std::string::npos);
  CHECK(text.find("1 mac = 1 flop") != std::string::npos);
}

TEST_CASE("micro config roll-up assembled by hand") {
  auto bb = micro_bb();
  EncoderConfig enc;
  auto rep = dfft::macs_model(bb, enc, 5, 2, 256, 256);

  // 256 x 256: cell counts 1024, 256, 64, 16 at strides 8..64
  std::int64_t n8 = 1024, n16 = 256, n32 = 64;
  std::uint64_t want = 0;
  want += dfft::macs_linear(n8, 192, 32);                    // embed
  want += dfft::macs_wmsa(32, 32, 32, 4, 4.0);               // stage1 sa
  want += dfft::macs_gca(n8, 32, 2, 4.0);                    // stage1 gca
  want += dfft::macs_linear(n16, 128, 64);                   // merge
  want += dfft::macs_wmsa(16, 16, 64, 4, 4.0);               // stage2 sa
  want += dfft::macs_gca(n16, 64, 2, 4.0);                   // stage2 gca
  want += dfft::macs_linear(n8, 64, 32);                     // saa2 up
  want += dfft::macs_gca(n8, 32, 2, 4.0);                    // saa2 mix
  want += dfft::macs_linear(n16, 32, 64);                    // recover2
  want += dfft::macs_linear(n32, 64, 128);                   // reduce3
  want += 2 * dfft::macs_wmsa(8, 8, 128, 4, 4.0);            // stage3 sa pair
  want += dfft::macs_gca(n32, 128, 4, 4.0);                  // stage3 gca
  want += dfft::macs_linear(n16, 128, 64);                   // saa3 up
  want += dfft::macs_gca(n16, 64, 2, 4.0);                   // saa3 mix
  want += dfft::macs_linear(n32, 64, 128);                   // recover3
  want += dfft::macs_linear(16, 128, 256);                   // reduce4
  want += dfft::macs_wmsa(4, 4, 256, 2, 4.0);                // stage4 sa
  want += dfft::macs_gca(16, 256, 8, 4.0);                   // stage4 gca
  want += dfft::macs_linear(n32, 256, 128);                  // saa4 up
  want += dfft::macs_gca(n32, 128, 4, 4.0);                  // saa4 mix
  want += dfft::macs_linear(n8, 32, 256);                    // sae proj1
  want += dfft::macs_linear(n16, 256, 256);                  // sae down1
  want += dfft::macs_linear(n16, 64, 256);                   // sae proj2
  want += dfft::macs_gca(n16, 256, 8, 4.0);                  // sae block1
  want += dfft::macs_linear(n32, 256, 256);                  // sae down2
  want += dfft::macs_linear(n32, 128, 256);                  // sae proj3
  want += dfft::macs_gca(n32, 256, 8, 4.0);                  // sae block2
  want += dfft::macs_linear(n32, 256, 256);                  // sae up4
  want += dfft::macs_gca(n32, 256, 8, 4.0);                  // sae block3
  want += dfft::macs_linear(n32, 256, 512);                  // tae expand
  want += 2 * dfft::macs_group_ca(n32, 512, 8, 4.0);         // tae groups
  want += dfft::macs_global_expand(n32, 256, 512, 8, 4.0);   // tae global
  want += dfft::macs_linear(n32, 256, 10);                   // head cls
  want += dfft::macs_linear(n32, 512, 20);                   // head reg
  CHECK(want == rep.total);
}

TEST_CASE("single level neck and head cost well under the four level head") {
  auto bb = micro_bb();
  EncoderConfig enc;
  auto cmp = dfft::compare_single_vs_multilevel(bb, enc, 5, 2, 256, 256);
  CHECK(cmp.single_macs > 0);
  CHECK(cmp.multilevel_macs > cmp.single_macs);
  CHECK(cmp.ratio < 0.5);
  CHECK(cmp.ratio > 0.0);

  // degenerate towers still leave a positive, finite ratio
  dfft::MultiLevelHeadSpec bare;
  bare.tower_layers = 0;
  auto cmp2 = dfft::compare_single_vs_multilevel(bb, enc, 5, 2, 256, 256, bare);
  CHECK(cmp2.multilevel_macs > 0);
  CHECK(cmp2.single_macs == cmp.single_macs);
}
