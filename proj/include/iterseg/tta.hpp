#pragma once

#include <utility>
#include <vector>

#include "iterseg/grid.hpp"
#include "iterseg/image.hpp"
#include "iterseg/model.hpp"
#include "iterseg/panoptic.hpp"
#include "iterseg/postproc.hpp"

namespace iterseg::tta {

using model::Checkpoint;
using model::PredictionVolume;

// Test-time augmentation plan: every scale, optionally also mirrored.
struct AugSpec {
  std::vector<double> scales = {0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
  bool flip = true;

  void validate() const;  // ConfigError on empty or nonpositive scales
  int pass_count() const;
  // Deterministic execution order: ascending scale, original before
  // mirrored.
  std::vector<std::pair<double, bool>> passes() const;

  friend bool operator==(const AugSpec&, const AugSpec&) = default;
};

// Resizes to (round(rows * scale), round(cols * scale)), then mirrors when
// flipped. A degenerate target size is a ConfigError.
Image apply_aug(const Image& image, double scale, bool flipped);

// A prediction carrying semantic probabilities instead of logits.
struct FusedPrediction {
  Planes semantic_probs;
  GridD center_heatmap;
  Planes offsets;

  int rows() const { return center_heatmap.rows; }
  int cols() const { return center_heatmap.cols; }
  friend bool operator==(const FusedPrediction&, const FusedPrediction&) = default;
};

// Per-pixel softmax over the planes, stabilized by the channel maximum.
Planes softmax_planes(const Planes& logits);

// Mirrors every grid and negates the horizontal offset plane. Applying it
// twice restores the input bit for bit.
PredictionVolume flip_prediction(const PredictionVolume& pred);

// Maps a prediction made under (scale, flipped) back to the original
// geometry: softmax, unflip (mirror plus horizontal-offset negation), resize
// to rows x cols, offsets multiplied by 1/scale so they stay in original
// pixel units.
FusedPrediction invert_prediction(const PredictionVolume& pred, double scale,
                                  bool flipped, int rows, int cols);

// Arithmetic mean over the predictions. Per-pixel values are summed in
// ascending order, which makes the result invariant to the list order.
// Empty input is a ContractError; mismatched shapes are a ShapeError.
FusedPrediction fuse(const std::vector<FusedPrediction>& preds);

struct PseudoLabelResult {
  PanopticMap map;
  std::vector<postproc::SegmentScore> scores;
  int passes = 0;
};

// Full pseudo-label pipeline: one forward pass per (scale, flip), each
// inverted to the original geometry, fused, and decoded. Every pixel gets a
// label; no confidence filtering. Pixels set in `ego_void` are forced void.
// The class table must match the checkpoint's class_count.
PseudoLabelResult pseudo_label(const Image& image, const Checkpoint& ckpt,
                               const ClassTable& classes, const AugSpec& aug,
                               const postproc::PostprocConfig& postproc_config,
                               const GridU8* ego_void = nullptr);

}  // namespace iterseg::tta
