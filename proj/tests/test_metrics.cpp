#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "iterseg/dataset.hpp"
#include "iterseg/errors.hpp"
#include "iterseg/metrics.hpp"
#include "iterseg/model.hpp"
#include "iterseg/panoptic.hpp"
#include "iterseg/rng.hpp"
#include "testutil.hpp"

using namespace iterseg;
using namespace iterseg::metrics;
using iterseg::testutil::random_messy_map;
namespace fs = std::filesystem;

namespace {

ClassTable four_classes() {
  return ClassTable({{1, "car", true},
                     {2, "person", true},
                     {3, "road", false},
                     {4, "sky", false}});
}

// Repaints a few regions of the map so predictions correlate with the truth
// without matching it.
PanopticMap perturbed(Rng& rng, const PanopticMap& base,
                      const ClassTable& classes) {
  PanopticMap map = base;
  const int edits = static_cast<int>(rng.uniform_int(4));
  for (int e = 0; e < edits; ++e) {
    const int ci = 1 + static_cast<int>(rng.uniform_int(classes.count()));
    const std::uint32_t sem = classes.id_at(ci);
    const bool thing = classes.by_id(sem).is_thing;
    const std::uint32_t inst =
        thing ? 1 + static_cast<std::uint32_t>(rng.uniform_int(3)) : 0;
    const std::uint32_t paint =
        rng.bernoulli(0.15) ? kVoidId : make_id(sem, inst);
    const int r0 = static_cast<int>(rng.uniform_int(map.rows));
    const int c0 = static_cast<int>(rng.uniform_int(map.cols));
    const int h = 1 + static_cast<int>(rng.uniform_int(map.rows - r0));
    const int w = 1 + static_cast<int>(rng.uniform_int(map.cols - c0));
    for (int r = r0; r < r0 + h; ++r)
      for (int c = c0; c < c0 + w; ++c) map.at(r, c) = paint;
  }
  return map;
}

// Independent panoptic-quality computation: explicit segment sets, pairwise
// pixel-set IoU, and an assertion that above-half matches are unique.
struct BrutePQ {
  std::map<int, double> iou_sum;
  std::map<int, std::int64_t> tp, fp, fn;

  void add(const PanopticMap& gt, const PanopticMap& pred,
           const ClassTable& classes) {
    std::map<std::uint32_t, std::set<std::size_t>> gt_px, pred_px;
    std::set<std::size_t> void_px;
    for (std::size_t i = 0; i < gt.ids.size(); ++i) {
      if (gt.ids[i] == kVoidId)
        void_px.insert(i);
      else
        gt_px[gt.ids[i]].insert(i);
      if (pred.ids[i] != kVoidId) pred_px[pred.ids[i]].insert(i);
    }
    std::set<std::uint32_t> gt_done, pred_done;
    for (const auto& [gid, gset] : gt_px) {
      for (const auto& [pid, pset] : pred_px) {
        if (semantic_of(gid) != semantic_of(pid)) continue;
        std::vector<std::size_t> shared;
        std::set_intersection(gset.begin(), gset.end(), pset.begin(),
                              pset.end(), std::back_inserter(shared));
        if (shared.empty()) continue;
        std::vector<std::size_t> on_void;
        std::set_intersection(pset.begin(), pset.end(), void_px.begin(),
                              void_px.end(), std::back_inserter(on_void));
        const double uni = static_cast<double>(gset.size() + pset.size() -
                                               shared.size() - on_void.size());
        const double iou = static_cast<double>(shared.size()) / uni;
        if (iou > 0.5) {
          REQUIRE_FALSE(gt_done.count(gid));
          REQUIRE_FALSE(pred_done.count(pid));
          gt_done.insert(gid);
          pred_done.insert(pid);
          const int ci = classes.index_of(semantic_of(gid));
          iou_sum[ci] += iou;
          ++tp[ci];
        }
      }
    }
    for (const auto& [gid, gset] : gt_px)
      if (!gt_done.count(gid)) ++fn[classes.index_of(semantic_of(gid))];
    for (const auto& [pid, pset] : pred_px) {
      if (pred_done.count(pid)) continue;
      std::vector<std::size_t> on_void;
      std::set_intersection(pset.begin(), pset.end(), void_px.begin(),
                            void_px.end(), std::back_inserter(on_void));
      if (2 * on_void.size() > pset.size()) continue;
      ++fp[classes.index_of(semantic_of(pid))];
    }
  }

  double pq(const ClassTable& classes) const {
    double sum = 0.0;
    int present = 0;
    for (int k = 1; k <= classes.count(); ++k) {
      const std::int64_t t = tp.count(k) ? tp.at(k) : 0;
      const std::int64_t f = fp.count(k) ? fp.at(k) : 0;
      const std::int64_t n = fn.count(k) ? fn.at(k) : 0;
      if (t + f + n == 0) continue;
      const double s = iou_sum.count(k) ? iou_sum.at(k) : 0.0;
      sum += s / (t + 0.5 * f + 0.5 * n);
      ++present;
    }
    REQUIRE(present > 0);
    return sum / present;
  }
};

}  // namespace

TEST_CASE("confusion counts ignore void ground truth") {
  const ClassTable classes = four_classes();
  PanopticMap gt(2, 4, kVoidId);
  PanopticMap pred(2, 4, kVoidId);
  gt.at(0, 0) = make_id(1, 1);  // car, predicted car
  pred.at(0, 0) = make_id(1, 2);
  gt.at(0, 1) = make_id(1, 1);  // car, predicted road
  pred.at(0, 1) = make_id(3, 0);
  gt.at(0, 2) = make_id(3, 0);  // road, predicted void
  gt.at(1, 0) = kVoidId;        // void gt, predicted car: ignored
  pred.at(1, 0) = make_id(1, 1);

  ConfusionMatrix conf(classes.count());
  conf.add(gt, pred, classes);
  CHECK(conf.at(1, 1) == 1);
  CHECK(conf.at(1, 3) == 1);
  CHECK(conf.at(3, 0) == 1);
  std::int64_t total = 0;
  for (int g = 0; g <= 4; ++g)
    for (int p = 0; p <= 4; ++p) total += conf.at(g, p);
  CHECK(total == 3);
}

TEST_CASE("miou matches a hand computation") {
  const ClassTable classes = four_classes();
  // Car: 4 gt pixels, 3 correct, 1 road. Road: 2 gt pixels, 1 correct, 1
  // void. IoU(car) = 3/4; union(road) = 2 + (1 + 1) - 1 = 3, IoU = 1/3.
  PanopticMap gt(1, 6, kVoidId);
  PanopticMap pred(1, 6, kVoidId);
  for (int c = 0; c < 4; ++c) gt.at(0, c) = make_id(1, 1);
  for (int c = 0; c < 3; ++c) pred.at(0, c) = make_id(1, 1);
  pred.at(0, 3) = make_id(3, 0);
  gt.at(0, 4) = make_id(3, 0);
  pred.at(0, 4) = make_id(3, 0);
  gt.at(0, 5) = make_id(3, 0);

  ConfusionMatrix conf(classes.count());
  conf.add(gt, pred, classes);
  CHECK(conf.iou(1) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(conf.iou(2) == -1.0);
  CHECK(conf.iou(3) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(conf.miou() ==
        doctest::Approx((0.75 + 1.0 / 3.0) / 2.0).epsilon(1e-15));
}

TEST_CASE("miou is undefined with nothing present") {
  const ClassTable classes = four_classes();
  ConfusionMatrix conf(classes.count());
  CHECK_THROWS_AS(conf.miou(), UndefinedMetricError);
  conf.add(PanopticMap(2, 2, kVoidId), PanopticMap(2, 2, kVoidId), classes);
  CHECK_THROWS_AS(conf.miou(), UndefinedMetricError);
}

TEST_CASE("confusion merge equals single-pass accumulation") {
  const ClassTable classes = four_classes();
  Rng rng(500);
  ConfusionMatrix whole(classes.count());
  ConfusionMatrix left(classes.count());
  ConfusionMatrix right(classes.count());
  for (int trial = 0; trial < 10; ++trial) {
    const PanopticMap gt = random_messy_map(rng, 9, 11, classes);
    const PanopticMap pred = perturbed(rng, gt, classes);
    whole.add(gt, pred, classes);
    (trial % 2 ? left : right).add(gt, pred, classes);
  }
  left.merge(right);
  for (int g = 0; g <= classes.count(); ++g)
    for (int p = 0; p <= classes.count(); ++p)
      CHECK(left.at(g, p) == whole.at(g, p));
  CHECK(left.miou() == whole.miou());
}

TEST_CASE("pq requires strictly more than half overlap") {
  const ClassTable classes = four_classes();
  // gt: car on cols 0..2, road on col 3 (keeping the void discount out of
  // the picture). pred car on cols 1..3: inter 2, union 4, IoU exactly 0.5,
  // no match.
  PanopticMap gt(1, 8, kVoidId);
  PanopticMap pred(1, 8, kVoidId);
  for (int c = 0; c < 3; ++c) gt.at(0, c) = make_id(1, 1);
  gt.at(0, 3) = make_id(3, 0);
  for (int c = 1; c < 4; ++c) pred.at(0, c) = make_id(1, 1);

  PQAccumulator acc(classes.count());
  acc.add(gt, pred, classes);
  CHECK(acc.stats(1).tp == 0);
  CHECK(acc.stats(1).fn == 1);
  CHECK(acc.stats(1).fp == 1);
  CHECK(acc.stats(1).iou_sum == 0.0);

  // Trimming the prediction to 2 of the 3 car pixels lifts IoU to 2/3.
  PQAccumulator acc2(classes.count());
  PanopticMap pred2 = gt;
  pred2.at(0, 2) = kVoidId;
  acc2.add(gt, pred2, classes);
  CHECK(acc2.stats(1).tp == 1);
  CHECK(acc2.stats(1).iou_sum == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  // Road matches itself perfectly, so PQ averages 2/3 and 1.
  CHECK(acc2.finalize().pq == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("pq discounts prediction overlap with void") {
  const ClassTable classes = four_classes();
  // gt: 4 car pixels then 4 void. pred: one car instance over all 8.
  PanopticMap gt(1, 8, kVoidId);
  PanopticMap pred(1, 8, make_id(1, 1));
  for (int c = 0; c < 4; ++c) gt.at(0, c) = make_id(1, 1);

  PQAccumulator acc(classes.count());
  acc.add(gt, pred, classes);
  // union = 4 + 8 - 4 - 4 = 4, IoU = 1.
  CHECK(acc.stats(1).tp == 1);
  CHECK(acc.finalize().pq == 1.0);
}

TEST_CASE("pq ignores unmatched predictions mostly covering void") {
  const ClassTable classes = four_classes();
  PanopticMap gt(1, 8, kVoidId);
  for (int c = 5; c < 8; ++c) gt.at(0, c) = make_id(3, 0);

  // Car prediction: 5 of 8 pixels on void, unmatched, skipped entirely.
  PanopticMap pred(1, 8, make_id(1, 1));
  PQAccumulator acc(classes.count());
  acc.add(gt, pred, classes);
  CHECK(acc.stats(1).tp == 0);
  CHECK(acc.stats(1).fp == 0);

  // Exactly half on void still counts as a false positive.
  PanopticMap gt2(1, 8, kVoidId);
  for (int c = 4; c < 8; ++c) gt2.at(0, c) = make_id(3, 0);
  PQAccumulator acc2(classes.count());
  acc2.add(gt2, pred, classes);
  CHECK(acc2.stats(1).fp == 1);
}

TEST_CASE("pq self-evaluation is exactly one") {
  const ClassTable classes = four_classes();
  Rng rng(600);
  for (int trial = 0; trial < 20; ++trial) {
    const PanopticMap map = random_messy_map(rng, 10, 13, classes);
    PQAccumulator acc(classes.count());
    acc.add(map, map, classes);
    const PQResult result = acc.finalize();
    CHECK(result.pq == 1.0);
    CHECK(result.sq == 1.0);
    CHECK(result.rq == 1.0);
  }
}

TEST_CASE("pq merge equals single-pass accumulation") {
  const ClassTable classes = four_classes();
  Rng rng(700);
  PQAccumulator whole(classes.count());
  PQAccumulator left(classes.count());
  PQAccumulator right(classes.count());
  for (int trial = 0; trial < 12; ++trial) {
    const PanopticMap gt = random_messy_map(rng, 8, 9, classes);
    const PanopticMap pred = perturbed(rng, gt, classes);
    whole.add(gt, pred, classes);
    (trial % 2 ? left : right).add(gt, pred, classes);
  }
  left.merge(right);
  for (int k = 1; k <= classes.count(); ++k) {
    CHECK(left.stats(k).tp == whole.stats(k).tp);
    CHECK(left.stats(k).fp == whole.stats(k).fp);
    CHECK(left.stats(k).fn == whole.stats(k).fn);
    CHECK(left.stats(k).iou_sum ==
          doctest::Approx(whole.stats(k).iou_sum).epsilon(1e-15));
  }
  CHECK(left.finalize().pq == doctest::Approx(whole.finalize().pq).epsilon(1e-15));
}

TEST_CASE("pq matches a brute-force matcher") {
  const ClassTable classes = four_classes();
  Rng rng(800);
  for (int trial = 0; trial < 100; ++trial) {
    const int rows = 6 + static_cast<int>(rng.uniform_int(11));
    const int cols = 6 + static_cast<int>(rng.uniform_int(11));
    const PanopticMap gt = random_messy_map(rng, rows, cols, classes);
    const PanopticMap pred = rng.bernoulli(0.5)
                                 ? perturbed(rng, gt, classes)
                                 : random_messy_map(rng, rows, cols, classes);
    PQAccumulator acc(classes.count());
    acc.add(gt, pred, classes);
    BrutePQ oracle;
    oracle.add(gt, pred, classes);
    bool any_present = false;
    for (int k = 1; k <= classes.count(); ++k) {
      const PQClassStats& s = acc.stats(k);
      if (s.tp + s.fp + s.fn > 0) any_present = true;
      const std::int64_t t = oracle.tp.count(k) ? oracle.tp.at(k) : 0;
      const std::int64_t f = oracle.fp.count(k) ? oracle.fp.at(k) : 0;
      const std::int64_t n = oracle.fn.count(k) ? oracle.fn.at(k) : 0;
      CHECK(s.tp == t);
      CHECK(s.fp == f);
      CHECK(s.fn == n);
    }
    if (any_present)
      CHECK(std::abs(acc.finalize().pq - oracle.pq(classes)) < 1e-9);
  }
}

TEST_CASE("ap hand case: one detection at iou 0.6 scores 0.3") {
  const ClassTable classes = four_classes();
  // gt car: 5 pixels. pred car: 5 pixels, 3 shared left-aligned at offset 1?
  // Use 4-pixel masks: gt cols 0..3, pred cols 1..4 gives inter 3, union 5.
  PanopticMap gt(1, 8, kVoidId);
  PanopticMap pred(1, 8, kVoidId);
  for (int c = 0; c < 4; ++c) gt.at(0, c) = make_id(1, 1);
  for (int c = 1; c < 5; ++c) pred.at(0, c) = make_id(1, 1);

  APAccumulator acc(classes.count());
  acc.add(gt, pred, {{make_id(1, 1), 0.9}}, classes);
  CHECK(acc.ap() == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("ap rewards ranking correct detections higher") {
  const ClassTable classes = four_classes();
  PanopticMap gt(2, 8, kVoidId);
  for (int c = 0; c < 4; ++c) gt.at(0, c) = make_id(1, 1);

  PanopticMap pred(2, 8, kVoidId);
  for (int c = 0; c < 4; ++c) pred.at(0, c) = make_id(1, 1);  // perfect
  for (int c = 0; c < 4; ++c) pred.at(1, c) = make_id(1, 2);  // spurious

  APAccumulator good(classes.count());
  good.add(gt, pred, {{make_id(1, 1), 0.9}, {make_id(1, 2), 0.1}}, classes);
  CHECK(good.ap() == doctest::Approx(1.0).epsilon(1e-12));

  APAccumulator bad(classes.count());
  bad.add(gt, pred, {{make_id(1, 1), 0.1}, {make_id(1, 2), 0.9}}, classes);
  CHECK(bad.ap() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("ap self-evaluation is exactly one") {
  const ClassTable classes = four_classes();
  Rng rng(900);
  for (int trial = 0; trial < 20; ++trial) {
    const PanopticMap map = random_messy_map(rng, 10, 12, classes);
    APAccumulator acc(classes.count());
    acc.add(map, map, unit_scores(map), classes);
    CHECK(acc.ap() == 1.0);
  }
}

TEST_CASE("ap is undefined without ground truth and skips gt-free classes") {
  const ClassTable classes = four_classes();
  PanopticMap gt(2, 4, make_id(3, 0));  // stuff only
  PanopticMap pred(2, 4, kVoidId);
  pred.at(0, 0) = make_id(1, 1);

  APAccumulator acc(classes.count());
  acc.add(gt, pred, {{make_id(1, 1), 0.5}}, classes);
  CHECK_THROWS_AS(acc.ap(), UndefinedMetricError);

  // Adding a person gt leaves car (detections, no gt) out of the mean.
  PanopticMap gt2(2, 4, kVoidId);
  gt2.at(1, 1) = make_id(2, 1);
  PanopticMap pred2(2, 4, kVoidId);
  pred2.at(1, 1) = make_id(2, 1);
  acc.add(gt2, pred2, {{make_id(2, 1), 0.8}}, classes);
  const std::vector<double> per_class = acc.per_class();
  CHECK(per_class[1] == -1.0);
  CHECK(per_class[2] == 1.0);
  CHECK(acc.ap() == 1.0);
}

TEST_CASE("ap matches an exhaustive-assignment oracle") {
  const ClassTable classes = four_classes();
  Rng rng(1000);
  for (int trial = 0; trial < 100; ++trial) {
    const int rows = 6 + static_cast<int>(rng.uniform_int(9));
    const int cols = 6 + static_cast<int>(rng.uniform_int(9));
    const int frames = 1 + static_cast<int>(rng.uniform_int(3));
    APAccumulator acc(classes.count());

    // Oracle state: per class, per frame masks plus scores.
    struct Det {
      double score;
      std::int64_t frame;
      std::int32_t order;
      std::vector<std::set<std::size_t>> gt_masks_unused;
      std::set<std::size_t> mask;
    };
    std::map<int, std::vector<Det>> dets;
    std::map<int, std::vector<std::pair<std::int64_t, std::set<std::size_t>>>>
        gts;  // (frame, mask)

    for (int f = 0; f < frames; ++f) {
      const PanopticMap gt = random_messy_map(rng, rows, cols, classes);
      const PanopticMap pred = rng.bernoulli(0.5)
                                   ? perturbed(rng, gt, classes)
                                   : random_messy_map(rng, rows, cols, classes);
      // Scores: random, with deliberate ties at two quantized levels.
      std::vector<postproc::SegmentScore> scores;
      std::map<std::uint32_t, std::set<std::size_t>> pred_px;
      for (std::size_t i = 0; i < pred.ids.size(); ++i)
        if (instance_of(pred.ids[i]) != 0) pred_px[pred.ids[i]].insert(i);
      for (const auto& [id, mask] : pred_px) {
        const double s = rng.bernoulli(0.3)
                             ? (rng.bernoulli(0.5) ? 0.25 : 0.75)
                             : rng.uniform();
        scores.push_back({id, s});
      }
      acc.add(gt, pred, scores, classes);

      std::map<std::uint32_t, std::set<std::size_t>> gt_px;
      for (std::size_t i = 0; i < gt.ids.size(); ++i)
        if (instance_of(gt.ids[i]) != 0) gt_px[gt.ids[i]].insert(i);
      for (const auto& [id, mask] : gt_px)
        gts[classes.index_of(semantic_of(id))].push_back({f, mask});
      std::int32_t order = 0;
      for (const auto& [id, mask] : pred_px) {
        const int ci = classes.index_of(semantic_of(id));
        const double s =
            std::find_if(scores.begin(), scores.end(),
                         [id = id](const auto& e) { return e.id == id; })
                ->score;
        dets[ci].push_back({s, f, order++, {}, mask});
      }
    }

    // Oracle: per class and threshold, maximum bipartite matching on every
    // detection prefix (Kuhn's algorithm), then the same 101-point rule.
    double oracle_sum = 0.0;
    int oracle_present = 0;
    for (int ci = 1; ci <= classes.count(); ++ci) {
      const auto git = gts.find(ci);
      const std::int64_t total_gt =
          git == gts.end() ? 0 : static_cast<std::int64_t>(git->second.size());
      if (total_gt == 0) continue;
      ++oracle_present;
      auto class_dets = dets.count(ci) ? dets.at(ci) : std::vector<Det>{};
      std::stable_sort(class_dets.begin(), class_dets.end(),
                       [](const Det& a, const Det& b) {
                         if (a.score != b.score) return a.score > b.score;
                         if (a.frame != b.frame) return a.frame < b.frame;
                         return a.order < b.order;
                       });
      // iou[d][g]
      std::vector<std::vector<double>> iou(
          class_dets.size(), std::vector<double>(git->second.size(), 0.0));
      for (std::size_t d = 0; d < class_dets.size(); ++d)
        for (std::size_t g = 0; g < git->second.size(); ++g) {
          if (git->second[g].first != class_dets[d].frame) continue;
          const auto& dm = class_dets[d].mask;
          const auto& gm = git->second[g].second;
          std::vector<std::size_t> shared;
          std::set_intersection(dm.begin(), dm.end(), gm.begin(), gm.end(),
                                std::back_inserter(shared));
          iou[d][g] = static_cast<double>(shared.size()) /
                      static_cast<double>(dm.size() + gm.size() - shared.size());
        }
      double class_sum = 0.0;
      for (int t = 0; t < 10; ++t) {
        const double threshold = 0.5 + 0.05 * t;
        // Kuhn's augmenting paths over the first k detections.
        const auto max_matching = [&](std::size_t k) {
          std::vector<int> match_gt(git->second.size(), -1);
          int matched = 0;
          for (std::size_t d = 0; d < k; ++d) {
            std::vector<bool> seen(git->second.size(), false);
            const std::function<bool(std::size_t)> try_d =
                [&](std::size_t dd) -> bool {
              for (std::size_t g = 0; g < git->second.size(); ++g) {
                if (iou[dd][g] < threshold || seen[g]) continue;
                seen[g] = true;
                if (match_gt[g] < 0 ||
                    try_d(static_cast<std::size_t>(match_gt[g]))) {
                  match_gt[g] = static_cast<int>(dd);
                  return true;
                }
              }
              return false;
            };
            if (try_d(d)) ++matched;
          }
          return matched;
        };
        std::vector<double> precision, recall;
        for (std::size_t k = 1; k <= class_dets.size(); ++k) {
          const int tp = max_matching(k);
          precision.push_back(static_cast<double>(tp) / static_cast<double>(k));
          recall.push_back(static_cast<double>(tp) /
                           static_cast<double>(total_gt));
        }
        double point_sum = 0.0;
        for (int p = 0; p <= 100; ++p) {
          const double r = p / 100.0;
          double best = 0.0;
          for (std::size_t k = 0; k < precision.size(); ++k)
            if (recall[k] >= r) best = std::max(best, precision[k]);
          point_sum += best;
        }
        class_sum += point_sum / 101.0;
      }
      oracle_sum += class_sum / 10.0;
    }

    if (oracle_present == 0) {
      CHECK_THROWS_AS(acc.ap(), UndefinedMetricError);
    } else {
      CHECK(std::abs(acc.ap() - oracle_sum / oracle_present) < 1e-9);
    }
  }
}

TEST_CASE("ap merge equals single-pass accumulation") {
  const ClassTable classes = four_classes();
  Rng rng(1100);
  APAccumulator whole(classes.count());
  APAccumulator left(classes.count());
  APAccumulator right(classes.count());
  for (int trial = 0; trial < 10; ++trial) {
    const PanopticMap gt = random_messy_map(rng, 8, 10, classes);
    const PanopticMap pred = perturbed(rng, gt, classes);
    std::vector<postproc::SegmentScore> scores = unit_scores(pred);
    for (auto& s : scores) s.score = rng.uniform();
    whole.add(gt, pred, scores, classes);
    (trial < 5 ? left : right).add(gt, pred, scores, classes);
  }
  left.merge(right);
  CHECK(left.ap() == doctest::Approx(whole.ap()).epsilon(1e-15));
}

TEST_CASE("unit scores cover every thing instance once") {
  PanopticMap map(2, 4, make_id(3, 0));
  map.at(0, 0) = make_id(1, 2);
  map.at(0, 1) = make_id(1, 2);
  map.at(1, 3) = make_id(2, 1);
  const auto scores = unit_scores(map);
  REQUIRE(scores.size() == 2);
  CHECK(scores[0].id == make_id(1, 2));
  CHECK(scores[0].score == 1.0);
  CHECK(scores[1].id == make_id(2, 1));
}

TEST_CASE("report renders deterministic csv and text") {
  MetricReport report;
  report.split = "val-fine";
  report.frames = 6;
  report.pq = 0.5;
  report.sq = 0.75;
  report.rq = 0.625;
  report.ap = 0.25;
  report.miou = 0.75;
  CHECK(MetricReport::csv_header() == "iteration,split,pq,ap,miou");
  CHECK(report.csv_row(3) == "3,val-fine,0.5,0.25,0.75");
  const std::string text = report.text();
  CHECK(text.find("split: val-fine") != std::string::npos);
  CHECK(text.find("PQ:   0.5") != std::string::npos);
  CHECK(text.find("mIOU: 0.75") != std::string::npos);
}

TEST_CASE("evaluate_split scores a checkpoint against labeled frames") {
  const fs::path dir =
      fs::temp_directory_path() / "iterseg_metrics_tests" / "eval_split";
  fs::remove_all(dir);
  fs::create_directories(dir);

  dataset::SynthConfig cfg;
  cfg.sequences = 1;
  cfg.val_sequences = 2;
  cfg.frames_per_sequence = 3;
  cfg.labeled_frame = 1;
  cfg.rows = 24;
  cfg.cols = 32;
  cfg.min_radius = 3;
  cfg.max_radius = 5;
  cfg.seed = 7;
  const dataset::Manifest manifest = dataset::synth_generate(cfg, dir);

  model::LearnerConfig lc;
  lc.class_count = manifest.classes.count();
  lc.capacity = 2;
  const model::Checkpoint ckpt = model::init_checkpoint(lc);

  postproc::PostprocConfig pp;
  const MetricReport report = evaluate_split(manifest, "val-fine", ckpt, pp);
  CHECK(report.frames == 2);
  CHECK(report.split == "val-fine");
  CHECK(std::isfinite(report.pq));
  CHECK(std::isfinite(report.ap));
  CHECK(std::isfinite(report.miou));
  CHECK(report.miou >= 0.0);
  CHECK(report.miou <= 1.0);

  // The same evaluation under TTA stays deterministic.
  tta::AugSpec aug;
  aug.scales = {1.0};
  aug.flip = true;
  const MetricReport with_aug =
      evaluate_split(manifest, "val-fine", ckpt, pp, &aug);
  const MetricReport with_aug2 =
      evaluate_split(manifest, "val-fine", ckpt, pp, &aug);
  CHECK(with_aug.pq == with_aug2.pq);
  CHECK(with_aug.ap == with_aug2.ap);
  CHECK(with_aug.miou == with_aug2.miou);

  // Splits containing unlabeled frames or nothing at all are rejected.
  CHECK_THROWS_AS(evaluate_split(manifest, "val-sequence", ckpt, pp),
                  ManifestError);
  CHECK_THROWS_AS(evaluate_split(manifest, "no-such-split", ckpt, pp),
                  ManifestError);
}

TEST_CASE("evaluating stored maps against themselves is perfect") {
  const fs::path dir =
      fs::temp_directory_path() / "iterseg_metrics_tests" / "eval_stored";
  fs::remove_all(dir);
  fs::create_directories(dir);

  dataset::SynthConfig cfg;
  cfg.sequences = 1;
  cfg.val_sequences = 1;
  cfg.frames_per_sequence = 2;
  cfg.labeled_frame = 0;
  cfg.rows = 24;
  cfg.cols = 32;
  cfg.min_radius = 3;
  cfg.max_radius = 5;
  cfg.seed = 9;
  const dataset::Manifest manifest = dataset::synth_generate(cfg, dir);

  const fs::path pred_dir = dir / "preds";
  for (const std::size_t i : manifest.frames_in_split("val-fine")) {
    const dataset::FrameRecord& frame = manifest.frames[i];
    const PanopticMap gt = load_lmap(manifest.resolve(frame.label_path));
    const fs::path out = pred_dir / (frame.frame_key() + ".lmap");
    fs::create_directories(out.parent_path());
    save_lmap(out, gt);
  }

  const MetricReport report = evaluate_stored(manifest, "val-fine", pred_dir);
  CHECK(report.pq == 1.0);
  CHECK(report.ap == 1.0);
  CHECK(report.miou == 1.0);
}
