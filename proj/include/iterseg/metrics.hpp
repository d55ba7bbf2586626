#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iterseg/dataset.hpp"
#include "iterseg/model.hpp"
#include "iterseg/panoptic.hpp"
#include "iterseg/postproc.hpp"
#include "iterseg/tta.hpp"

namespace iterseg::metrics {

// Pixel confusion over dense class indices (0 = void). Ground-truth void
// pixels are never counted; predicting void on a labeled pixel lands in
// column 0 and counts against the ground-truth class.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int class_count);

  void add(const PanopticMap& gt, const PanopticMap& pred,
           const ClassTable& classes);
  void merge(const ConfusionMatrix& other);  // ShapeError on size mismatch

  int class_count() const { return count_; }
  std::int64_t at(int gt_index, int pred_index) const;

  // Intersection over union for one class; classes absent from both sides
  // have an empty union and report -1.
  double iou(int class_index) const;
  // Mean IoU over the classes present on either side. All classes absent is
  // an UndefinedMetricError.
  double miou() const;

 private:
  int count_ = 0;
  std::vector<std::int64_t> cells_;
};

struct PQClassStats {
  double iou_sum = 0.0;
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
};

struct PQResult {
  double pq = 0.0;
  double sq = 0.0;
  double rq = 0.0;
  std::vector<double> per_class;  // indexed by dense class index, 0 unused
  std::vector<bool> present;      // classes with tp + fp + fn > 0
};

// Panoptic quality accumulation. Matching is per frame and per class:
// segments match when their IoU exceeds 0.5, with the union discounted by
// the predicted segment's overlap with ground-truth void. Unmatched
// predictions more than half covered by void are ignored rather than
// counted as false positives.
class PQAccumulator {
 public:
  PQAccumulator() = default;
  explicit PQAccumulator(int class_count);

  void add(const PanopticMap& gt, const PanopticMap& pred,
           const ClassTable& classes);
  void merge(const PQAccumulator& other);  // field-wise sum

  int class_count() const { return count_; }
  const PQClassStats& stats(int class_index) const;

  // Means over present classes; none present is an UndefinedMetricError.
  PQResult finalize() const;

 private:
  int count_ = 0;
  std::vector<PQClassStats> stats_;
};

// Average precision over instance masks, COCO style: IoU thresholds 0.50 to
// 0.95 in steps of 0.05, greedy score-ordered matching to the unmatched
// ground-truth instance of maximal IoU at or above the threshold, 101-point
// interpolated precision, averaged over thresholds and then over classes
// with at least one ground-truth instance. Mask IoU is the raw pixel-set
// ratio.
class APAccumulator {
 public:
  APAccumulator() = default;
  explicit APAccumulator(int class_count);

  // Ground-truth and predicted instances are the thing segments of the maps;
  // every predicted segment needs a score entry.
  void add(const PanopticMap& gt, const PanopticMap& pred,
           const std::vector<postproc::SegmentScore>& scores,
           const ClassTable& classes);
  void merge(const APAccumulator& other);

  int class_count() const { return count_; }
  std::int64_t gt_instances(int class_index) const;

  double ap() const;  // UndefinedMetricError without any ground truth
  // Per-class AP, -1 for classes without ground truth.
  std::vector<double> per_class() const;

 private:
  struct Detection {
    double score = 0.0;
    std::int64_t frame = 0;
    std::int32_t order = 0;  // extraction order within the frame
    // (global gt slot, IoU), slots ascending.
    std::vector<std::pair<std::int64_t, double>> overlaps;
  };

  double class_ap(int class_index) const;

  int count_ = 0;
  std::int64_t frames_ = 0;
  std::vector<std::int64_t> gt_total_;
  std::vector<std::vector<Detection>> dets_;
};

// One score entry per thing instance of the map, all 1.0, ordered by id.
// Turns a stored map into a detection set for evaluation.
std::vector<postproc::SegmentScore> unit_scores(const PanopticMap& map);

struct MetricReport {
  std::string split;
  int frames = 0;
  double pq = 0.0;
  double sq = 0.0;
  double rq = 0.0;
  double ap = 0.0;
  double miou = 0.0;

  static std::string csv_header();  // "iteration,split,pq,ap,miou"
  std::string csv_row(int iteration) const;
  std::string text() const;
};

// Runs the checkpoint over every frame of the split and scores it against
// the ground truth. Frames without labels are a ManifestError, as is an
// empty split. Passing an AugSpec enables test-time augmentation; otherwise
// each frame gets a single forward pass.
MetricReport evaluate_split(const dataset::Manifest& manifest,
                            std::string_view split,
                            const model::Checkpoint& ckpt,
                            const postproc::PostprocConfig& postproc_config,
                            const tta::AugSpec* aug = nullptr);

// Scores stored prediction maps (one <frame_key>.lmap per frame under
// pred_dir) against the split's ground truth, with unit detection scores.
MetricReport evaluate_stored(const dataset::Manifest& manifest,
                             std::string_view split,
                             const std::filesystem::path& pred_dir);

}  // namespace iterseg::metrics
