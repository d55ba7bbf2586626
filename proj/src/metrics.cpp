#include "iterseg/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "iterseg/errors.hpp"
#include "iterseg/image.hpp"
#include "iterseg/textcfg.hpp"

namespace iterseg::metrics {

namespace {

using textcfg::fmt_double;

void check_same_shape(const PanopticMap& gt, const PanopticMap& pred) {
  if (gt.rows != pred.rows || gt.cols != pred.cols)
    throw ShapeError("ground truth and prediction disagree in shape");
}

// Segment areas keyed by panoptic id, void excluded.
std::map<std::uint32_t, std::int64_t> segment_areas(const PanopticMap& map) {
  std::map<std::uint32_t, std::int64_t> areas;
  for (const std::uint32_t id : map.ids)
    if (id != kVoidId) ++areas[id];
  return areas;
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(int class_count)
    : count_(class_count),
      cells_(static_cast<std::size_t>(class_count + 1) * (class_count + 1), 0) {
  if (class_count < 1) throw ConfigError("confusion needs at least one class");
}

void ConfusionMatrix::add(const PanopticMap& gt, const PanopticMap& pred,
                          const ClassTable& classes) {
  check_same_shape(gt, pred);
  if (classes.count() != count_)
    throw ShapeError("class table size does not match the matrix");
  for (std::size_t i = 0; i < gt.ids.size(); ++i) {
    const std::uint32_t g = semantic_of(gt.ids[i]);
    if (g == 0) continue;
    const std::uint32_t p = semantic_of(pred.ids[i]);
    const int gi = classes.index_of(g);
    const int pi = p == 0 ? 0 : classes.index_of(p);
    ++cells_[static_cast<std::size_t>(gi) * (count_ + 1) + pi];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.count_ != count_)
    throw ShapeError("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < cells_.size(); ++i) cells_[i] += other.cells_[i];
}

std::int64_t ConfusionMatrix::at(int gt_index, int pred_index) const {
  if (gt_index < 0 || gt_index > count_ || pred_index < 0 ||
      pred_index > count_)
    throw ContractError("confusion index out of range");
  return cells_[static_cast<std::size_t>(gt_index) * (count_ + 1) + pred_index];
}

double ConfusionMatrix::iou(int class_index) const {
  if (class_index < 1 || class_index > count_)
    throw ContractError("class index out of range");
  const std::int64_t inter = at(class_index, class_index);
  std::int64_t row = 0, col = 0;
  for (int j = 0; j <= count_; ++j) row += at(class_index, j);
  for (int g = 1; g <= count_; ++g) col += at(g, class_index);
  const std::int64_t uni = row + col - inter;
  if (uni == 0) return -1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double ConfusionMatrix::miou() const {
  double sum = 0.0;
  int present = 0;
  for (int k = 1; k <= count_; ++k) {
    const double v = iou(k);
    if (v < 0.0) continue;
    sum += v;
    ++present;
  }
  if (present == 0)
    throw UndefinedMetricError("mean IoU over zero present classes");
  return sum / present;
}

PQAccumulator::PQAccumulator(int class_count)
    : count_(class_count),
      stats_(static_cast<std::size_t>(class_count) + 1) {
  if (class_count < 1)
    throw ConfigError("panoptic quality needs at least one class");
}

void PQAccumulator::add(const PanopticMap& gt, const PanopticMap& pred,
                        const ClassTable& classes) {
  check_same_shape(gt, pred);
  if (classes.count() != count_)
    throw ShapeError("class table size does not match the accumulator");

  const auto gt_areas = segment_areas(gt);
  const auto pred_areas = segment_areas(pred);
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::int64_t> inter;
  std::map<std::uint32_t, std::int64_t> pred_on_void;
  for (std::size_t i = 0; i < gt.ids.size(); ++i) {
    const std::uint32_t g = gt.ids[i];
    const std::uint32_t p = pred.ids[i];
    if (p != kVoidId && g == kVoidId) ++pred_on_void[p];
    if (g != kVoidId && p != kVoidId) ++inter[{g, p}];
  }

  // Candidate matches: same class, IoU above one half. The union discounts
  // the prediction's void overlap.
  struct Match {
    double iou;
    std::uint32_t gt_id, pred_id;
  };
  std::vector<Match> candidates;
  for (const auto& [key, overlap] : inter) {
    const auto [gt_id, pred_id] = key;
    if (semantic_of(gt_id) != semantic_of(pred_id)) continue;
    const std::int64_t void_overlap =
        pred_on_void.count(pred_id) ? pred_on_void.at(pred_id) : 0;
    const std::int64_t uni = gt_areas.at(gt_id) + pred_areas.at(pred_id) -
                             overlap - void_overlap;
    const double iou = static_cast<double>(overlap) / static_cast<double>(uni);
    if (iou > 0.5) candidates.push_back({iou, gt_id, pred_id});
  }
  std::sort(candidates.begin(), candidates.end(),
            [](const Match& a, const Match& b) {
              if (a.iou != b.iou) return a.iou > b.iou;
              if (a.gt_id != b.gt_id) return a.gt_id < b.gt_id;
              return a.pred_id < b.pred_id;
            });

  std::map<std::uint32_t, bool> gt_matched, pred_matched;
  for (const auto& [gt_id, area] : gt_areas) gt_matched[gt_id] = false;
  for (const auto& [pred_id, area] : pred_areas) pred_matched[pred_id] = false;
  for (const Match& m : candidates) {
    if (gt_matched.at(m.gt_id) || pred_matched.at(m.pred_id)) continue;
    gt_matched.at(m.gt_id) = true;
    pred_matched.at(m.pred_id) = true;
    PQClassStats& s = stats_[classes.index_of(semantic_of(m.gt_id))];
    ++s.tp;
    s.iou_sum += m.iou;
  }
  for (const auto& [gt_id, matched] : gt_matched)
    if (!matched) ++stats_[classes.index_of(semantic_of(gt_id))].fn;
  for (const auto& [pred_id, matched] : pred_matched) {
    if (matched) continue;
    const std::int64_t void_overlap =
        pred_on_void.count(pred_id) ? pred_on_void.at(pred_id) : 0;
    // Predictions mostly covering void are ignored, not penalized.
    if (2 * void_overlap > pred_areas.at(pred_id)) continue;
    ++stats_[classes.index_of(semantic_of(pred_id))].fp;
  }
}

void PQAccumulator::merge(const PQAccumulator& other) {
  if (other.count_ != count_)
    throw ShapeError("cannot merge accumulators of different sizes");
  for (std::size_t i = 0; i < stats_.size(); ++i) {
    stats_[i].iou_sum += other.stats_[i].iou_sum;
    stats_[i].tp += other.stats_[i].tp;
    stats_[i].fp += other.stats_[i].fp;
    stats_[i].fn += other.stats_[i].fn;
  }
}

const PQClassStats& PQAccumulator::stats(int class_index) const {
  if (class_index < 1 || class_index > count_)
    throw ContractError("class index out of range");
  return stats_[class_index];
}

PQResult PQAccumulator::finalize() const {
  PQResult out;
  out.per_class.assign(static_cast<std::size_t>(count_) + 1, 0.0);
  out.present.assign(static_cast<std::size_t>(count_) + 1, false);
  double pq_sum = 0.0, sq_sum = 0.0, rq_sum = 0.0;
  int present = 0;
  for (int k = 1; k <= count_; ++k) {
    const PQClassStats& s = stats_[k];
    if (s.tp + s.fp + s.fn == 0) continue;
    const double denom =
        static_cast<double>(s.tp) + 0.5 * s.fp + 0.5 * s.fn;
    const double pq = s.iou_sum / denom;
    const double sq = s.tp > 0 ? s.iou_sum / static_cast<double>(s.tp) : 0.0;
    const double rq = static_cast<double>(s.tp) / denom;
    out.per_class[k] = pq;
    out.present[k] = true;
    pq_sum += pq;
    sq_sum += sq;
    rq_sum += rq;
    ++present;
  }
  if (present == 0)
    throw UndefinedMetricError("panoptic quality over zero present classes");
  out.pq = pq_sum / present;
  out.sq = sq_sum / present;
  out.rq = rq_sum / present;
  return out;
}

APAccumulator::APAccumulator(int class_count)
    : count_(class_count),
      gt_total_(static_cast<std::size_t>(class_count) + 1, 0),
      dets_(static_cast<std::size_t>(class_count) + 1) {
  if (class_count < 1)
    throw ConfigError("average precision needs at least one class");
}

void APAccumulator::add(const PanopticMap& gt, const PanopticMap& pred,
                        const std::vector<postproc::SegmentScore>& scores,
                        const ClassTable& classes) {
  check_same_shape(gt, pred);
  if (classes.count() != count_)
    throw ShapeError("class table size does not match the accumulator");

  // Ground-truth instances, slotted per class in ascending id order.
  std::map<std::uint32_t, std::int64_t> gt_slot;
  std::map<std::uint32_t, std::int64_t> gt_area;
  for (const std::uint32_t id : gt.ids) {
    if (instance_of(id) == 0) continue;
    gt_slot.emplace(id, 0);
    ++gt_area[id];
  }
  for (auto& [id, slot] : gt_slot)
    slot = gt_total_[classes.index_of(semantic_of(id))]++;

  // Predicted instances grouped by id, ascending; each needs a score.
  std::map<std::uint32_t, std::vector<std::size_t>> det_pixels;
  for (std::size_t i = 0; i < pred.ids.size(); ++i)
    if (instance_of(pred.ids[i]) != 0) det_pixels[pred.ids[i]].push_back(i);

  std::int32_t order = 0;
  for (const auto& [id, pixels] : det_pixels) {
    const int ci = classes.index_of(semantic_of(id));
    const auto score_it =
        std::find_if(scores.begin(), scores.end(),
                     [id = id](const postproc::SegmentScore& s) {
                       return s.id == id;
                     });
    if (score_it == scores.end())
      throw ContractError("missing detection score for id " +
                          std::to_string(id));
    Detection det;
    det.score = score_it->score;
    det.frame = frames_;
    det.order = order++;
    std::map<std::uint32_t, std::int64_t> overlap;
    for (const std::size_t p : pixels) {
      const std::uint32_t g = gt.ids[p];
      if (instance_of(g) == 0) continue;
      if (semantic_of(g) != semantic_of(id)) continue;
      ++overlap[g];
    }
    for (const auto& [gt_id, inter] : overlap) {
      const double uni = static_cast<double>(
          gt_area.at(gt_id) + static_cast<std::int64_t>(pixels.size()) - inter);
      det.overlaps.emplace_back(gt_slot.at(gt_id),
                                static_cast<double>(inter) / uni);
    }
    dets_[ci].push_back(std::move(det));
  }
  ++frames_;
}

void APAccumulator::merge(const APAccumulator& other) {
  if (other.count_ != count_)
    throw ShapeError("cannot merge accumulators of different sizes");
  for (int k = 1; k <= count_; ++k) {
    const std::int64_t slot_base = gt_total_[k];
    for (Detection det : other.dets_[k]) {
      det.frame += frames_;
      for (auto& [slot, iou] : det.overlaps) slot += slot_base;
      dets_[k].push_back(std::move(det));
    }
    gt_total_[k] += other.gt_total_[k];
  }
  frames_ += other.frames_;
}

std::int64_t APAccumulator::gt_instances(int class_index) const {
  if (class_index < 1 || class_index > count_)
    throw ContractError("class index out of range");
  return gt_total_[class_index];
}

double APAccumulator::class_ap(int class_index) const {
  const std::int64_t total_gt = gt_total_[class_index];
  std::vector<const Detection*> dets;
  dets.reserve(dets_[class_index].size());
  for (const Detection& d : dets_[class_index]) dets.push_back(&d);
  std::sort(dets.begin(), dets.end(),
            [](const Detection* a, const Detection* b) {
              if (a->score != b->score) return a->score > b->score;
              if (a->frame != b->frame) return a->frame < b->frame;
              return a->order < b->order;
            });

  double threshold_sum = 0.0;
  for (int t = 0; t < 10; ++t) {
    const double threshold = 0.5 + 0.05 * t;
    std::vector<bool> taken(static_cast<std::size_t>(total_gt), false);
    std::vector<double> precision, recall;
    std::int64_t tp = 0, fp = 0;
    for (const Detection* d : dets) {
      std::int64_t best_slot = -1;
      double best_iou = 0.0;
      for (const auto& [slot, iou] : d->overlaps) {
        if (iou < threshold || taken[static_cast<std::size_t>(slot)]) continue;
        if (iou > best_iou) {
          best_iou = iou;
          best_slot = slot;
        }
      }
      if (best_slot >= 0) {
        taken[static_cast<std::size_t>(best_slot)] = true;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(static_cast<double>(tp) /
                          static_cast<double>(tp + fp));
      recall.push_back(total_gt > 0
                           ? static_cast<double>(tp) /
                                 static_cast<double>(total_gt)
                           : 0.0);
    }
    // Monotone envelope: best precision achievable at recall >= r.
    std::vector<double> best_from(precision.size() + 1, 0.0);
    for (std::size_t i = precision.size(); i-- > 0;)
      best_from[i] = std::max(precision[i], best_from[i + 1]);
    double point_sum = 0.0;
    std::size_t k = 0;
    for (int p = 0; p <= 100; ++p) {
      const double r = p / 100.0;
      while (k < recall.size() && recall[k] < r) ++k;
      point_sum += k < recall.size() ? best_from[k] : 0.0;
    }
    threshold_sum += point_sum / 101.0;
  }
  return threshold_sum / 10.0;
}

double APAccumulator::ap() const {
  double sum = 0.0;
  int present = 0;
  for (int k = 1; k <= count_; ++k) {
    if (gt_total_[k] == 0) continue;
    sum += class_ap(k);
    ++present;
  }
  if (present == 0)
    throw UndefinedMetricError("average precision without ground truth");
  return sum / present;
}

std::vector<double> APAccumulator::per_class() const {
  std::vector<double> out(static_cast<std::size_t>(count_) + 1, -1.0);
  for (int k = 1; k <= count_; ++k)
    if (gt_total_[k] > 0) out[k] = class_ap(k);
  return out;
}

std::vector<postproc::SegmentScore> unit_scores(const PanopticMap& map) {
  std::map<std::uint32_t, bool> ids;
  for (const std::uint32_t id : map.ids)
    if (instance_of(id) != 0) ids[id] = true;
  std::vector<postproc::SegmentScore> out;
  out.reserve(ids.size());
  for (const auto& [id, unused] : ids) out.push_back({id, 1.0});
  return out;
}

std::string MetricReport::csv_header() { return "iteration,split,pq,ap,miou"; }

std::string MetricReport::csv_row(int iteration) const {
  return std::to_string(iteration) + "," + split + "," + fmt_double(pq) + "," +
         fmt_double(ap) + "," + fmt_double(miou);
}

std::string MetricReport::text() const {
  std::ostringstream os;
  os << "split: " << split << "\n"
     << "frames: " << frames << "\n"
     << "PQ:   " << fmt_double(pq) << "  (SQ " << fmt_double(sq) << ", RQ "
     << fmt_double(rq) << ")\n"
     << "AP:   " << fmt_double(ap) << "\n"
     << "mIOU: " << fmt_double(miou) << "\n";
  return os.str();
}

namespace {

struct SplitFrames {
  std::vector<std::size_t> frames;
};

std::vector<std::size_t> labeled_split_frames(const dataset::Manifest& manifest,
                                              std::string_view split) {
  const std::vector<std::size_t> idx = manifest.frames_in_split(split);
  if (idx.empty())
    throw ManifestError("split " + std::string(split) + " has no frames");
  for (const std::size_t i : idx)
    if (!manifest.frames[i].has_label())
      throw ManifestError("frame " + manifest.frames[i].frame_key() +
                          " in split " + std::string(split) +
                          " has no ground truth");
  return idx;
}

MetricReport finalize_report(std::string_view split, int frames,
                             const PQAccumulator& pq, const APAccumulator& ap,
                             const ConfusionMatrix& conf) {
  MetricReport report;
  report.split = std::string(split);
  report.frames = frames;
  const PQResult pq_result = pq.finalize();
  report.pq = pq_result.pq;
  report.sq = pq_result.sq;
  report.rq = pq_result.rq;
  report.ap = ap.ap();
  report.miou = conf.miou();
  return report;
}

}  // namespace

MetricReport evaluate_split(const dataset::Manifest& manifest,
                            std::string_view split,
                            const model::Checkpoint& ckpt,
                            const postproc::PostprocConfig& postproc_config,
                            const tta::AugSpec* aug) {
  const auto idx = labeled_split_frames(manifest, split);
  const int count = manifest.classes.count();
  PQAccumulator pq(count);
  APAccumulator ap(count);
  ConfusionMatrix conf(count);
  for (const std::size_t i : idx) {
    const dataset::FrameRecord& frame = manifest.frames[i];
    const Image image = load_ppm(manifest.resolve(frame.image_path));
    const PanopticMap gt = load_lmap(manifest.resolve(frame.label_path));
    PanopticMap pred;
    std::vector<postproc::SegmentScore> scores;
    if (aug) {
      tta::PseudoLabelResult r = tta::pseudo_label(
          image, ckpt, manifest.classes, *aug, postproc_config);
      pred = std::move(r.map);
      scores = std::move(r.scores);
    } else {
      postproc::DecodeResult r = postproc::decode(
          model::forward(ckpt, image), manifest.classes, postproc_config);
      pred = std::move(r.map);
      scores = std::move(r.scores);
    }
    pq.add(gt, pred, manifest.classes);
    ap.add(gt, pred, scores, manifest.classes);
    conf.add(gt, pred, manifest.classes);
  }
  return finalize_report(split, static_cast<int>(idx.size()), pq, ap, conf);
}

MetricReport evaluate_stored(const dataset::Manifest& manifest,
                             std::string_view split,
                             const std::filesystem::path& pred_dir) {
  const auto idx = labeled_split_frames(manifest, split);
  const int count = manifest.classes.count();
  PQAccumulator pq(count);
  APAccumulator ap(count);
  ConfusionMatrix conf(count);
  for (const std::size_t i : idx) {
    const dataset::FrameRecord& frame = manifest.frames[i];
    const PanopticMap gt = load_lmap(manifest.resolve(frame.label_path));
    const PanopticMap pred =
        load_lmap(pred_dir / (frame.frame_key() + ".lmap"));
    pq.add(gt, pred, manifest.classes);
    ap.add(gt, pred, unit_scores(pred), manifest.classes);
    conf.add(gt, pred, manifest.classes);
  }
  return finalize_report(split, static_cast<int>(idx.size()), pq, ap, conf);
}

}  // namespace iterseg::metrics
