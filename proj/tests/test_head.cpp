#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <tuple>
#include <vector>

#include "dfft/detection.hpp"
#include "helpers.hpp"

using dfft::AnchorSet;
using dfft::Box;
using dfft::Detection;
using dfft::FeatureMap;
using dfft::MatchAssignment;
using dfft::ParamStore;
using dfft::Tensor;

namespace {

Box rand_box(std::mt19937_64& rng, double extent = 80.0, double min_side = 2.0,
             double max_side = 40.0) {
  std::uniform_real_distribution<double> pos(0.0, extent), side(min_side, max_side);
  double x1 = pos(rng), y1 = pos(rng);
  return Box{x1, y1, x1 + side(rng), y1 + side(rng)};
}

// same selection rule, different control flow: repeatedly scan for the single
// best remaining pair instead of sorting
MatchAssignment ref_match(const AnchorSet& as, const std::vector<Box>& gts, int k,
                          double iou_neg_ignore, double iou_pos_min) {
  const auto& A = as.anchors;
  MatchAssignment out;
  out.pre_filter.assign(A.size(), MatchAssignment::kNegative);
  std::vector<int> need(gts.size(), k);
  auto key = [&](int g, std::size_t a) {
    double dx = gts[static_cast<std::size_t>(g)].cx() - A[a].cx();
    double dy = gts[static_cast<std::size_t>(g)].cy() - A[a].cy();
    return std::make_tuple(dx * dx + dy * dy, g, A[a].area(), A[a].cx(), A[a].cy(), a);
  };
  while (true) {
    bool found = false;
    std::tuple<double, int, double, double, double, std::size_t> best;
    for (int g = 0; g < static_cast<int>(gts.size()); ++g) {
      if (need[static_cast<std::size_t>(g)] == 0) continue;
      for (std::size_t a = 0; a < A.size(); ++a) {
        if (out.pre_filter[a] != MatchAssignment::kNegative) continue;
        auto cand = key(g, a);
        if (!found || cand < best) {
          best = cand;
          found = true;
        }
      }
    }
    if (!found) break;
    out.pre_filter[std::get<5>(best)] = std::get<1>(best);
    --need[static_cast<std::size_t>(std::get<1>(best))];
  }
  out.label = out.pre_filter;
  for (std::size_t a = 0; a < A.size(); ++a) {
    if (out.label[a] == MatchAssignment::kNegative) {
      double top = 0.0;
      for (const auto& g : gts) top = std::max(top, dfft::iou(A[a], g));
      if (top > iou_neg_ignore) out.label[a] = MatchAssignment::kIgnore;
    } else if (out.label[a] >= 0 &&
               dfft::iou(A[a], gts[static_cast<std::size_t>(out.label[a])]) < iou_pos_min) {
      out.label[a] = MatchAssignment::kIgnore;
    }
  }
  return out;
}

bool det_order(const Detection& a, const Detection& b) {
  return std::tie(b.score, a.cls, a.box.x1, a.box.y1, a.box.x2, a.box.y2) <
         std::tie(a.score, b.cls, b.box.x1, b.box.y1, b.box.x2, b.box.y2);
}

// greedy suppression written as repeated argmax scans
std::vector<Detection> ref_nms(const std::vector<Detection>& dets, double iou_thresh,
                               double score_thresh, int max_dets) {
  std::vector<Detection> pool;
  for (const auto& d : dets)
    if (d.score >= score_thresh) pool.push_back(d);
  std::vector<bool> alive(pool.size(), true);
  std::vector<Detection> kept;
  while (true) {
    int best = -1;
    for (int i = 0; i < static_cast<int>(pool.size()); ++i) {
      if (!alive[static_cast<std::size_t>(i)]) continue;
      if (best < 0 || det_order(pool[static_cast<std::size_t>(i)],
                                pool[static_cast<std::size_t>(best)]))
        best = i;
    }
    if (best < 0) break;
    auto b = static_cast<std::size_t>(best);
    kept.push_back(pool[b]);
    alive[b] = false;
    for (std::size_t j = 0; j < pool.size(); ++j)
      if (alive[j] && pool[j].cls == pool[b].cls &&
          dfft::iou(pool[j].box, pool[b].box) > iou_thresh)
        alive[j] = false;
  }
  std::sort(kept.begin(), kept.end(), det_order);
  if (kept.size() > static_cast<std::size_t>(max_dets))
    kept.resize(static_cast<std::size_t>(max_dets));
  return kept;
}

bool same_dets(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].cls != b[i].cls || a[i].score != b[i].score || a[i].box.x1 != b[i].box.x1 ||
        a[i].box.y1 != b[i].box.y1 || a[i].box.x2 != b[i].box.x2 || a[i].box.y2 != b[i].box.y2)
      return false;
  return true;
}

}  // namespace

TEST_CASE("anchor grid construction") {
  auto as = dfft::generate_anchors(2, 2, 32, {32});
  REQUIRE(as.anchors.size() == 4);
  const std::array<std::pair<double, double>, 4> want = {
      std::pair{16.0, 16.0}, {48.0, 16.0}, {16.0, 48.0}, {48.0, 48.0}};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(as.anchors[i].cx() == want[i].first);
    CHECK(as.anchors[i].cy() == want[i].second);
    CHECK(as.anchors[i].w() == 32.0);
  }

  auto two = dfft::generate_anchors(1, 1, 32, {32, 64});
  REQUIRE(two.anchors.size() == 2);
  CHECK(two.K == 2);
  for (const auto& a : two.anchors) {
    CHECK(a.cx() == 16.0);
    CHECK(a.cy() == 16.0);
  }
  CHECK(two.anchors[0].w() == 32.0);
  CHECK(two.anchors[1].w() == 64.0);

  // independent double-loop construction
  auto big = dfft::generate_anchors(8, 8, 32);
  REQUIRE(big.anchors.size() == 320);
  std::size_t n = 0;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j)
      for (double s : {32.0, 64.0, 128.0, 256.0, 512.0}) {
        const auto& a = big.anchors[n++];
        CHECK(a.x1 == (j + 0.5) * 32 - s / 2);
        CHECK(a.y1 == (i + 0.5) * 32 - s / 2);
        CHECK(a.x2 == (j + 0.5) * 32 + s / 2);
        CHECK(a.y2 == (i + 0.5) * 32 + s / 2);
      }

  CHECK_THROWS_AS(dfft::generate_anchors(2, 2, 32, {}), dfft::ConfigError);
  CHECK_THROWS_AS(dfft::generate_anchors(0, 2, 32, {32}), dfft::ConfigError);
}

TEST_CASE("box coding") {
  Box anchor{0, 0, 32, 32};
  auto zero = dfft::encode_deltas(anchor, anchor);
  for (double d : zero) CHECK(d == 0.0);

  auto d = dfft::encode_deltas(anchor, Box{8, 8, 56, 56});
  CHECK(d[0] == Catch::Approx(0.5).margin(1e-12));
  CHECK(d[1] == Catch::Approx(0.5).margin(1e-12));
  CHECK(d[2] == Catch::Approx(std::log(1.5)).margin(1e-12));
  CHECK(d[3] == Catch::Approx(std::log(1.5)).margin(1e-12));

  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Box a = rand_box(rng), g = rand_box(rng);
    auto back = dfft::decode_box(a, dfft::encode_deltas(a, g));
    CHECK(std::abs(back.x1 - g.x1) < 1e-6);
    CHECK(std::abs(back.y1 - g.y1) < 1e-6);
    CHECK(std::abs(back.x2 - g.x2) < 1e-6);
    CHECK(std::abs(back.y2 - g.y2) < 1e-6);
  }

  CHECK_THROWS_AS(dfft::encode_deltas(anchor, Box{5, 5, 5, 9}), dfft::ValueError);
  CHECK_THROWS_AS(dfft::encode_deltas(Box{0, 0, 0, 4}, anchor), dfft::ValueError);

  Box c = dfft::clip_box(Box{-5, -3, 120, 40}, 100, 50);
  CHECK(c.x1 == 0.0);
  CHECK(c.y1 == 0.0);
  CHECK(c.x2 == 100.0);
  CHECK(c.y2 == 40.0);
}

TEST_CASE("matching basics") {
  // no ground truth: everything negative
  auto as = dfft::generate_anchors(3, 3, 32, {32});
  auto m = dfft::uniform_match(as, {}, 4);
  for (int l : m.label) CHECK(l == MatchAssignment::kNegative);

  // six anchors on a line, one gt, budget 2: the two nearest win
  AnchorSet line;
  for (int i = 1; i <= 6; ++i)
    line.anchors.push_back(Box{i * 10.0 - 4, 46, i * 10.0 + 4, 54});
  auto lm = dfft::uniform_match(line, {Box{29, 46, 37, 54}}, 2, 0.7, 0.0);
  // gt center x = 33: anchors at 30 and 40 are nearest
  std::vector<int> want = {MatchAssignment::kNegative, MatchAssignment::kNegative, 0, 0,
                           MatchAssignment::kNegative, MatchAssignment::kNegative};
  CHECK(lm.pre_filter == want);

  CHECK_THROWS_AS(dfft::uniform_match(line, {Box{0, 0, 8, 8}}, 7), dfft::ConfigError);
  CHECK_THROWS_AS(dfft::uniform_match(line, {Box{0, 0, 8, 8}}, 0), dfft::ConfigError);
}

TEST_CASE("matching fills each budget exactly and agrees with a scan oracle") {
  std::mt19937_64 rng(11);
  auto as = dfft::generate_anchors(5, 5, 32, {32, 64});  // 50 anchors
  std::uniform_int_distribution<int> gcount(1, 5);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<Box> gts;
    int G = gcount(rng);
    for (int g = 0; g < G; ++g) gts.push_back(rand_box(rng, 140.0, 4.0, 70.0));
    int k = 1 + trial % 5;
    auto mine = dfft::uniform_match(as, gts, k);
    auto ref = ref_match(as, gts, k, 0.7, 0.15);
    CHECK(mine.pre_filter == ref.pre_filter);
    CHECK(mine.label == ref.label);
    if (static_cast<std::size_t>(k) * gts.size() <= as.anchors.size()) {
      std::size_t positives = 0;
      for (int l : mine.pre_filter)
        if (l >= 0) ++positives;
      CHECK(positives == static_cast<std::size_t>(k) * gts.size());
      for (int g = 0; g < G; ++g)
        CHECK(std::count(mine.pre_filter.begin(), mine.pre_filter.end(), g) == k);
    }
  }
}

TEST_CASE("matching is stable under anchor permutation") {
  std::mt19937_64 rng(13);
  auto as = dfft::generate_anchors(4, 4, 32, {32, 64, 128});
  std::vector<Box> gts = {rand_box(rng, 100.0), rand_box(rng, 100.0), rand_box(rng, 100.0)};
  auto base = dfft::uniform_match(as, gts, 4);

  AnchorSet shuffled = as;
  std::shuffle(shuffled.anchors.begin(), shuffled.anchors.end(), rng);
  auto perm = dfft::uniform_match(shuffled, gts, 4);

  auto pair_set = [](const AnchorSet& a, const MatchAssignment& m) {
    std::vector<std::tuple<double, double, double, double, int>> v;
    for (std::size_t i = 0; i < a.anchors.size(); ++i)
      if (m.pre_filter[i] >= 0)
        v.emplace_back(a.anchors[i].x1, a.anchors[i].y1, a.anchors[i].x2, a.anchors[i].y2,
                       m.pre_filter[i]);
    std::sort(v.begin(), v.end());
    return v;
  };
  CHECK(pair_set(as, base) == pair_set(shuffled, perm));
}

TEST_CASE("ignore filtering around the matching") {
  // single anchor cell, gt nearly coincident with the big anchor
  AnchorSet as;
  as.anchors.push_back(Box{0, 0, 64, 64});
  as.anchors.push_back(Box{100, 0, 108, 8});
  // k=1: the near anchor is positive; a far, tiny gt makes overlap tiny
  auto m = dfft::uniform_match(as, {Box{30, 30, 34, 34}}, 1, 0.7, 0.15);
  CHECK(m.pre_filter[0] == 0);
  CHECK(m.label[0] == MatchAssignment::kIgnore);  // IoU well under 0.15

  // unmatched anchor hugging a gt becomes ignore instead of negative
  AnchorSet two;
  two.anchors.push_back(Box{0, 0, 64, 64});
  two.anchors.push_back(Box{1, 1, 65, 65});
  auto m2 = dfft::uniform_match(two, {Box{0, 0, 64, 64}}, 1, 0.7, 0.15);
  CHECK(m2.pre_filter[0] == 0);
  CHECK(m2.pre_filter[1] == MatchAssignment::kNegative);
  CHECK(m2.label[0] == 0);
  CHECK(m2.label[1] == MatchAssignment::kIgnore);  // IoU with the gt > 0.7
}

TEST_CASE("focal loss values") {
  // gamma 0, alpha one half reduces to half the binary cross entropy
  std::mt19937_64 rng(17);
  auto logits = dtest::rand_tensor({6, 3}, 21, -3.0, 3.0);
  std::vector<double> tv(18);
  std::uniform_int_distribution<int> bit(0, 1);
  for (auto& t : tv) t = bit(rng);
  auto targets = Tensor::from({6, 3}, tv);
  auto got = dfft::focal_loss(logits, targets, 0.5, 0.0).item();
  double bce = 0.0, ones = 0.0;
  for (std::size_t i = 0; i < tv.size(); ++i) {
    double p = 1.0 / (1.0 + std::exp(-logits.data()[i]));
    bce += tv[i] > 0.5 ? -std::log(p) : -std::log(1.0 - p);
    ones += tv[i];
  }
  CHECK(std::abs(got - 0.5 * bce / std::max(1.0, ones)) < 1e-9);

  // single positive at p = one half
  auto one = dfft::focal_loss(Tensor::from({1, 1}, {0.0}), Tensor::from({1, 1}, {1.0}), 0.25, 2.0);
  CHECK(std::abs(one.item() - 0.25 * 0.25 * std::log(2.0)) < 1e-12);

  // loss on a confident positive falls monotonically
  double prev = 1e9;
  for (double z : {1.0, 2.0, 4.0, 8.0}) {
    double v = dfft::focal_loss(Tensor::from({1, 1}, {z}), Tensor::from({1, 1}, {1.0})).item();
    CHECK(v < prev);
    prev = v;
  }

  // all-zero targets still normalize by one
  auto neg = dfft::focal_loss(Tensor::from({1, 2}, {0.0, 0.0}), Tensor::from({1, 2}, {0.0, 0.0}),
                              0.25, 2.0);
  double expect = 2 * 0.75 * 0.25 * std::log(2.0);
  CHECK(std::abs(neg.item() - expect) < 1e-12);

  CHECK_THROWS_AS(dfft::focal_loss(Tensor::zeros({2, 2}), Tensor::zeros({2, 3})),
                  dfft::ShapeError);
}

TEST_CASE("focal loss gradients match finite differences") {
  auto logits = dtest::rand_tensor({8, 3}, 23, -2.0, 2.0, true);
  std::vector<double> tv(24);
  std::mt19937_64 rng(19);
  std::uniform_int_distribution<int> bit(0, 1);
  for (auto& t : tv) t = bit(rng);
  auto targets = Tensor::from({8, 3}, tv);
  auto build = [&]() { return dfft::focal_loss(logits, targets, 0.25, 2.0); };
  auto r = dtest::fd_check_leaves({logits}, build, 1e-4, 12);
  INFO(r.worst);
  CHECK(r.max_rel <= 1e-3);
}

TEST_CASE("generalized overlap values") {
  CHECK(dfft::giou(Box{0, 0, 2, 2}, Box{0, 0, 2, 2}) == 1.0);
  double hand = dfft::giou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3});
  CHECK(std::abs(hand - (1.0 / 7.0 - 2.0 / 9.0)) < 1e-12);

  // receding disjoint boxes approach -1 from above
  double prev = 0.0;
  for (double t : {10.0, 100.0, 1000.0, 100000.0}) {
    double v = dfft::giou(Box{0, 0, 1, 1}, Box{t, 0, t + 1, 1});
    CHECK(v > -1.0);
    CHECK(v < prev);
    prev = v;
  }

  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 1000; ++trial) {
    Box a = rand_box(rng), b = rand_box(rng);
    double ab = dfft::giou(a, b);
    CHECK(ab == dfft::giou(b, a));
    CHECK(ab <= dfft::iou(a, b));
    CHECK(ab > -1.0);
    CHECK(ab <= 1.0);
  }
}

TEST_CASE("generalized overlap loss on the graph") {
  // exact deltas decode to the gt, so the loss vanishes
  std::vector<Box> anchors = {Box{0, 0, 32, 32}, Box{16, 16, 80, 80}};
  std::vector<Box> gts = {Box{4, 2, 30, 36}, Box{10, 20, 70, 90}};
  std::vector<double> dv;
  for (std::size_t i = 0; i < anchors.size(); ++i)
    for (double d : dfft::encode_deltas(anchors[i], gts[i])) dv.push_back(d);
  auto exact = dfft::giou_loss(Tensor::from({2, 4}, dv), anchors, gts);
  CHECK(std::abs(exact.item()) < 1e-9);

  // hand case through the decode path
  std::vector<Box> a1 = {Box{0, 0, 16, 16}};
  std::vector<Box> g1 = {Box{0, 0, 2, 2}};
  auto enc = dfft::encode_deltas(a1[0], Box{1, 1, 3, 3});
  auto loss = dfft::giou_loss(Tensor::from({1, 4}, {enc[0], enc[1], enc[2], enc[3]}), a1, g1);
  CHECK(std::abs(loss.item() - (1.0 - (1.0 / 7.0 - 2.0 / 9.0))) < 1e-9);

  CHECK_THROWS_AS(dfft::giou_loss(Tensor::zeros({1, 3}), a1, g1), dfft::ShapeError);
  CHECK_THROWS_AS(dfft::giou_loss(Tensor::zeros({2, 4}), a1, g1), dfft::ShapeError);
}

TEST_CASE("generalized overlap loss gradients match finite differences") {
  std::vector<Box> anchors, gts;
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> jitter(-6.0, 6.0);
  for (int i = 0; i < 5; ++i) {
    Box a{i * 40.0, 10, i * 40.0 + 32, 42};
    anchors.push_back(a);
    gts.push_back(Box{a.x1 + jitter(rng), a.y1 + jitter(rng), a.x2 + jitter(rng),
                      a.y2 + jitter(rng)});
  }
  auto deltas = dtest::rand_tensor({5, 4}, 37, -0.2, 0.2, true);
  auto build = [&]() { return dfft::giou_loss(deltas, anchors, gts); };
  auto r = dtest::fd_check_leaves({deltas}, build, 1e-4, 20);
  INFO(r.worst);
  CHECK(r.max_rel <= 1e-3);
}

TEST_CASE("prediction head shapes and ordering") {
  ParamStore ps(41);
  FeatureMap t_cls(dtest::rand_tensor({1, 2, 2, 6}, 43), 32);
  FeatureMap t_reg(dtest::rand_tensor({1, 2, 2, 10}, 44), 32);
  auto out = dfft::predict(t_cls, t_reg, 3, 2, ps);
  REQUIRE(out.cls_logits.shape() == dfft::Shape{8, 3});
  REQUIRE(out.deltas.shape() == dfft::Shape{8, 4});

  // explicit per-cell, per-anchor oracle
  const auto& wc = *ps.entry("head.cls.w").val;   // [6, 6] as (in, K*classes)
  const auto& bc = *ps.entry("head.cls.b").val;
  for (std::int64_t cell = 0; cell < 4; ++cell)
    for (int kk = 0; kk < 2; ++kk)
      for (int cl = 0; cl < 3; ++cl) {
        double want = bc[static_cast<std::size_t>(kk * 3 + cl)];
        for (int c = 0; c < 6; ++c)
          want += t_cls.data.data()[static_cast<std::size_t>(cell * 6 + c)] *
                  wc[static_cast<std::size_t>(c * 6 + kk * 3 + cl)];
        auto got = out.cls_logits.data()[static_cast<std::size_t>((cell * 2 + kk) * 3 + cl)];
        CHECK(std::abs(got - want) < 1e-12);
      }

  // constant head: logits carry the bias everywhere
  ParamStore ps2(42);
  dfft::predict(t_cls, t_reg, 3, 2, ps2);
  std::fill(ps2.entry("head.cls.w").val->begin(), ps2.entry("head.cls.w").val->end(), 0.0);
  std::fill(ps2.entry("head.cls.b").val->begin(), ps2.entry("head.cls.b").val->end(), 0.7);
  auto flat = dfft::predict(t_cls, t_reg, 3, 2, ps2);
  for (double v : flat.cls_logits.data()) CHECK(v == 0.7);

  FeatureMap off(dtest::rand_tensor({1, 2, 4, 10}, 45), 32);
  ParamStore ps3(43);
  CHECK_THROWS_AS(dfft::predict(t_cls, off, 3, 2, ps3), dfft::ShapeError);
}

TEST_CASE("suppression basics") {
  std::vector<Detection> two = {{Box{0, 0, 10, 10}, 0, 0.9}, {Box{0, 0, 10, 10}, 0, 0.8}};
  auto kept = dfft::nms(two);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);

  std::vector<Detection> apart = {{Box{0, 0, 10, 10}, 0, 0.5},
                                  {Box{50, 50, 60, 60}, 0, 0.8},
                                  {Box{100, 0, 110, 10}, 0, 0.6}};
  auto all = dfft::nms(apart);
  REQUIRE(all.size() == 3);
  CHECK(all[0].score == 0.8);
  CHECK(all[1].score == 0.6);
  CHECK(all[2].score == 0.5);

  // same box, different classes: both survive
  std::vector<Detection> classes = {{Box{0, 0, 10, 10}, 0, 0.9}, {Box{0, 0, 10, 10}, 1, 0.8}};
  CHECK(dfft::nms(classes).size() == 2);

  // score floor and cap
  std::vector<Detection> weak = {{Box{0, 0, 10, 10}, 0, 0.01}};
  CHECK(dfft::nms(weak).empty());
  std::vector<Detection> many;
  for (int i = 0; i < 30; ++i)
    many.push_back({Box{i * 20.0, 0, i * 20.0 + 10, 10}, 0, 0.1 + 0.01 * i});
  CHECK(dfft::nms(many, 0.6, 0.05, 25).size() == 25);
}

TEST_CASE("suppression agrees with a scan oracle") {
  std::mt19937_64 rng(47);
  std::uniform_real_distribution<double> score(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, 1);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Detection> dets;
    for (int i = 0; i < 20; ++i) dets.push_back({rand_box(rng, 60.0), cls(rng), score(rng)});
    auto mine = dfft::nms(dets, 0.5, 0.05, 100);
    auto ref = ref_nms(dets, 0.5, 0.05, 100);
    CHECK(same_dets(mine, ref));
    CHECK(same_dets(mine, dfft::nms(dets, 0.5, 0.05, 100)));  // deterministic
    for (std::size_t i = 1; i < mine.size(); ++i) CHECK(mine[i - 1].score >= mine[i].score);
  }
}
