#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "iterseg/grid.hpp"
#include "iterseg/model.hpp"
#include "iterseg/panoptic.hpp"

namespace iterseg::postproc {

using model::PredictionVolume;

// Instance decoding and class fusion settings.
struct PostprocConfig {
  // Minimum heatmap value for a pixel to count as an instance center.
  double center_threshold = 0.1;
  // Odd side length of the square window a center must dominate.
  int nms_window = 7;
  // Keep at most this many centers, by descending score.
  int max_centers = 200;
  // Stuff segments with fewer pixels than the threshold become void. On a
  // frame of exactly reference_rows x reference_cols the threshold is this
  // absolute pixel count; on any other frame size it scales with frame area
  // (threshold / reference area, rounded to nearest).
  std::int64_t stuff_area_threshold = 4096;
  int reference_rows = 1024;
  int reference_cols = 2048;

  void validate() const;  // ConfigError on bad values
  // Effective pixel-count threshold for a frame of the given size.
  std::int64_t area_threshold_for(int rows, int cols) const;

  friend bool operator==(const PostprocConfig&,
                         const PostprocConfig&) = default;
};

// A detected instance center at real-valued pixel coordinates.
struct InstanceCenter {
  double row = 0.0;
  double col = 0.0;
  double score = 0.0;

  friend bool operator==(const InstanceCenter&, const InstanceCenter&) = default;
};

// Strict local maxima of the heatmap: a pixel qualifies when no pixel in its
// window has a larger value and no lexicographically smaller (row, col) pixel
// in the window ties it, and its value is at least center_threshold. Returned
// sorted by descending score (ties toward smaller (row, col)) and truncated
// to max_centers.
std::vector<InstanceCenter> extract_centers(const GridD& heatmap,
                                            const PostprocConfig& config);

// Assigns every thing pixel to the center nearest to pixel + offset (squared
// Euclidean distance, ties toward the earlier entry in `centers`). Ids are
// 1-based positions in `centers`; non-thing pixels and all pixels when
// `centers` is empty get 0. `offsets` holds the (row, col) displacement
// planes.
GridU32 group_instances(const std::vector<InstanceCenter>& centers,
                        const Planes& offsets, const GridU8& thing_mask);

// Bookkeeping from fuse_panoptic, for score attribution and diagnostics.
struct FuseTrace {
  // (input instance id, final panoptic id) for every surviving instance.
  std::vector<std::pair<std::uint32_t, std::uint32_t>> instance_ids;
  // Instances whose majority class was stuff, dissolved into that class.
  int stuff_reassigned = 0;
};

// Merges a dense semantic index map (0 = void) with instance ids into a
// PanopticMap:
//  - every instance adopts the majority class of its pixels, counting thing
//    classes only; with no thing votes, the majority over all non-void votes;
//    a stuff majority dissolves the instance into that stuff class;
//  - thing-class pixels without an instance become void;
//  - stuff components (4-connected, same class) smaller than the area
//    threshold become void;
//  - surviving instances are numbered 1..K within each class by descending
//    pixel count (ties by first pixel in row-major order).
PanopticMap fuse_panoptic(const GridU16& semantic_index,
                          const GridU32& instance_ids,
                          const ClassTable& classes,
                          const PostprocConfig& config,
                          FuseTrace* trace = nullptr);

// Per-instance detection score, for ranking-based metrics.
struct SegmentScore {
  std::uint32_t id = 0;  // panoptic id in the decoded map
  double score = 0.0;    // heatmap value of the originating center

  friend bool operator==(const SegmentScore&, const SegmentScore&) = default;
};

struct DecodeResult {
  PanopticMap map;
  std::vector<SegmentScore> scores;  // one entry per thing instance
};

// Dense argmax over semantic planes (logit or probability alike); ties take
// the smaller channel. Plane 0 is void.
GridU16 semantic_argmax(const Planes& semantic);

// 1 where the dense index is a thing class, else 0.
GridU8 thing_mask_of(const GridU16& semantic_index, const ClassTable& classes);

// Full decoding pipeline: semantic argmax, center extraction, offset
// grouping, fusion. The prediction must carry classes.count() + 1 semantic
// planes.
DecodeResult decode(const PredictionVolume& pred, const ClassTable& classes,
                    const PostprocConfig& config);

}  // namespace iterseg::postproc
