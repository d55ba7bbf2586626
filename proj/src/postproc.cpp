#include "iterseg/postproc.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "iterseg/errors.hpp"

namespace iterseg::postproc {

namespace {

std::size_t flat(int r, int c, int cols) {
  return static_cast<std::size_t>(r) * cols + c;
}

}  // namespace

void PostprocConfig::validate() const {
  if (!std::isfinite(center_threshold))
    throw ConfigError("center_threshold must be finite");
  if (nms_window < 1 || nms_window % 2 == 0)
    throw ConfigError("nms_window must be odd and at least 1, got " +
                      std::to_string(nms_window));
  if (max_centers < 0)
    throw ConfigError("max_centers must be nonnegative, got " +
                      std::to_string(max_centers));
  if (stuff_area_threshold < 0)
    throw ConfigError("stuff_area_threshold must be nonnegative, got " +
                      std::to_string(stuff_area_threshold));
  if (reference_rows < 1 || reference_cols < 1)
    throw ConfigError("threshold reference size must be positive");
}

std::int64_t PostprocConfig::area_threshold_for(int rows, int cols) const {
  if (rows == reference_rows && cols == reference_cols)
    return stuff_area_threshold;
  const double fraction =
      static_cast<double>(stuff_area_threshold) /
      (static_cast<double>(reference_rows) * reference_cols);
  return std::llround(fraction * static_cast<double>(rows) * cols);
}

std::vector<InstanceCenter> extract_centers(const GridD& heatmap,
                                            const PostprocConfig& config) {
  config.validate();
  const int radius = config.nms_window / 2;
  std::vector<InstanceCenter> centers;
  for (int r = 0; r < heatmap.rows; ++r) {
    for (int c = 0; c < heatmap.cols; ++c) {
      const double v = heatmap.at(r, c);
      if (!(v >= config.center_threshold)) continue;
      bool dominant = true;
      const int r0 = std::max(0, r - radius);
      const int r1 = std::min(heatmap.rows - 1, r + radius);
      const int c0 = std::max(0, c - radius);
      const int c1 = std::min(heatmap.cols - 1, c + radius);
      for (int rr = r0; rr <= r1 && dominant; ++rr) {
        for (int cc = c0; cc <= c1; ++cc) {
          if (rr == r && cc == c) continue;
          const double w = heatmap.at(rr, cc);
          if (w > v || (w == v && (rr < r || (rr == r && cc < c)))) {
            dominant = false;
            break;
          }
        }
      }
      if (dominant)
        centers.push_back({static_cast<double>(r), static_cast<double>(c), v});
    }
  }
  std::sort(centers.begin(), centers.end(),
            [](const InstanceCenter& a, const InstanceCenter& b) {
              if (a.score != b.score) return a.score > b.score;
              if (a.row != b.row) return a.row < b.row;
              return a.col < b.col;
            });
  if (centers.size() > static_cast<std::size_t>(config.max_centers))
    centers.resize(static_cast<std::size_t>(config.max_centers));
  return centers;
}

GridU32 group_instances(const std::vector<InstanceCenter>& centers,
                        const Planes& offsets, const GridU8& thing_mask) {
  if (offsets.ch != 2)
    throw ShapeError("offsets must have two planes, got " +
                     std::to_string(offsets.ch));
  if (offsets.rows != thing_mask.rows || offsets.cols != thing_mask.cols)
    throw ShapeError("offsets and thing mask disagree in shape");

  GridU32 ids(thing_mask.rows, thing_mask.cols, 0);
  if (centers.empty()) return ids;
  for (int r = 0; r < thing_mask.rows; ++r) {
    for (int c = 0; c < thing_mask.cols; ++c) {
      if (!thing_mask.at(r, c)) continue;
      const double tr = r + offsets.at(0, r, c);
      const double tc = c + offsets.at(1, r, c);
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < centers.size(); ++k) {
        const double dr = tr - centers[k].row;
        const double dc = tc - centers[k].col;
        const double d = dr * dr + dc * dc;
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      ids.at(r, c) = static_cast<std::uint32_t>(best + 1);
    }
  }
  return ids;
}

namespace {

struct InstancePixels {
  std::vector<std::size_t> pixels;  // row-major flat indices, ascending
  int class_index = 0;              // dense index after the majority vote
};

// Majority vote with ties toward the smaller dense index.
int majority_index(const std::vector<std::int64_t>& votes) {
  int best = -1;
  std::int64_t best_votes = 0;
  for (std::size_t i = 1; i < votes.size(); ++i) {
    if (votes[i] > best_votes) {
      best_votes = votes[i];
      best = static_cast<int>(i);
    }
  }
  return best;  // -1 when no class got a vote
}

}  // namespace

PanopticMap fuse_panoptic(const GridU16& semantic_index,
                          const GridU32& instance_ids,
                          const ClassTable& classes,
                          const PostprocConfig& config, FuseTrace* trace) {
  config.validate();
  if (semantic_index.rows != instance_ids.rows ||
      semantic_index.cols != instance_ids.cols)
    throw ShapeError("semantic and instance grids disagree in shape");

  const int rows = semantic_index.rows;
  const int cols = semantic_index.cols;
  const int count = classes.count();
  std::vector<bool> thing_index(static_cast<std::size_t>(count) + 1, false);
  for (int i = 1; i <= count; ++i)
    thing_index[i] = classes.by_id(classes.id_at(i)).is_thing;

  // Working semantic layer, dense indices. Starts from the input with
  // instance-less thing pixels blanked to void.
  std::vector<std::uint16_t> work(semantic_index.data.size(), 0);
  std::map<std::uint32_t, InstancePixels> instances;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const std::uint16_t s = semantic_index.at(r, c);
      if (s > count)
        throw LookupError("semantic index " + std::to_string(s) +
                          " outside the class table");
      const std::uint32_t inst = instance_ids.at(r, c);
      if (inst != 0)
        instances[inst].pixels.push_back(flat(r, c, cols));
      else
        work[flat(r, c, cols)] = thing_index[s] ? 0 : s;
    }
  }

  // Vote each instance's class; dissolve stuff-majority instances.
  int reassigned = 0;
  std::vector<std::uint32_t> kept;  // input instance ids that stay things
  for (auto& [inst_id, inst] : instances) {
    std::vector<std::int64_t> thing_votes(static_cast<std::size_t>(count) + 1, 0);
    std::vector<std::int64_t> all_votes(static_cast<std::size_t>(count) + 1, 0);
    for (const std::size_t p : inst.pixels) {
      const std::uint16_t s = semantic_index.data[p];
      if (s == 0) continue;
      ++all_votes[s];
      if (thing_index[s]) ++thing_votes[s];
    }
    int idx = majority_index(thing_votes);
    if (idx < 0) idx = majority_index(all_votes);
    inst.class_index = std::max(idx, 0);
    if (idx > 0 && thing_index[idx]) {
      kept.push_back(inst_id);
      continue;
    }
    // Stuff (or void) majority: the pixels stop being an instance.
    if (idx > 0) ++reassigned;
    for (const std::size_t p : inst.pixels)
      work[p] = static_cast<std::uint16_t>(std::max(idx, 0));
    inst.pixels.clear();
  }

  // Remove small stuff components (4-connectivity, same class).
  const std::int64_t area_threshold = config.area_threshold_for(rows, cols);
  std::vector<bool> visited(work.size(), false);
  std::vector<std::size_t> stack, component;
  for (std::size_t start = 0; start < work.size(); ++start) {
    const std::uint16_t s = work[start];
    if (s == 0 || visited[start]) continue;
    component.clear();
    stack.assign(1, start);
    visited[start] = true;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      component.push_back(p);
      const int r = static_cast<int>(p / cols);
      const int c = static_cast<int>(p % cols);
      const int nr[4] = {r - 1, r + 1, r, r};
      const int nc[4] = {c, c, c - 1, c + 1};
      for (int k = 0; k < 4; ++k) {
        if (nr[k] < 0 || nr[k] >= rows || nc[k] < 0 || nc[k] >= cols) continue;
        const std::size_t q = flat(nr[k], nc[k], cols);
        if (visited[q] || work[q] != s) continue;
        visited[q] = true;
        stack.push_back(q);
      }
    }
    if (static_cast<std::int64_t>(component.size()) < area_threshold)
      for (const std::size_t p : component) work[p] = 0;
  }

  // Number surviving instances 1..K per class by descending size, ties by
  // first pixel in scan order.
  std::sort(kept.begin(), kept.end(), [&](std::uint32_t a, std::uint32_t b) {
    const InstancePixels& ia = instances.at(a);
    const InstancePixels& ib = instances.at(b);
    if (ia.class_index != ib.class_index) return ia.class_index < ib.class_index;
    if (ia.pixels.size() != ib.pixels.size())
      return ia.pixels.size() > ib.pixels.size();
    return ia.pixels.front() < ib.pixels.front();
  });

  PanopticMap out(rows, cols, kVoidId);
  for (std::size_t p = 0; p < work.size(); ++p)
    if (work[p] != 0)
      out.ids[p] = make_id(classes.id_at(work[p]), 0);

  std::map<std::uint32_t, std::uint32_t> final_ids;
  int prev_class = -1;
  std::uint32_t number = 0;
  for (const std::uint32_t inst_id : kept) {
    const InstancePixels& inst = instances.at(inst_id);
    number = inst.class_index == prev_class ? number + 1 : 1;
    prev_class = inst.class_index;
    if (number > kMaxInstanceIndex)
      throw SizeError("more than " + std::to_string(kMaxInstanceIndex) +
                      " instances of one class");
    const std::uint32_t id =
        make_id(classes.id_at(inst.class_index), number);
    final_ids[inst_id] = id;
    for (const std::size_t p : inst.pixels) out.ids[p] = id;
  }

  if (trace) {
    trace->instance_ids.assign(final_ids.begin(), final_ids.end());
    trace->stuff_reassigned = reassigned;
  }
  return out;
}

GridU16 semantic_argmax(const Planes& semantic) {
  if (semantic.ch < 1)
    throw ShapeError("semantic volume needs at least one plane");
  GridU16 out(semantic.rows, semantic.cols, 0);
  for (int r = 0; r < semantic.rows; ++r) {
    for (int c = 0; c < semantic.cols; ++c) {
      int best = 0;
      double best_v = semantic.at(0, r, c);
      for (int k = 1; k < semantic.ch; ++k) {
        const double v = semantic.at(k, r, c);
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      out.at(r, c) = static_cast<std::uint16_t>(best);
    }
  }
  return out;
}

GridU8 thing_mask_of(const GridU16& semantic_index, const ClassTable& classes) {
  const int count = classes.count();
  GridU8 mask(semantic_index.rows, semantic_index.cols, 0);
  for (std::size_t i = 0; i < semantic_index.data.size(); ++i) {
    const std::uint16_t s = semantic_index.data[i];
    if (s > count)
      throw LookupError("semantic index " + std::to_string(s) +
                        " outside the class table");
    if (s != 0 && classes.by_id(classes.id_at(s)).is_thing) mask.data[i] = 1;
  }
  return mask;
}

DecodeResult decode(const PredictionVolume& pred, const ClassTable& classes,
                    const PostprocConfig& config) {
  pred.validate();
  if (pred.semantic_logits.ch != classes.count() + 1)
    throw ShapeError("prediction has " +
                     std::to_string(pred.semantic_logits.ch) +
                     " semantic planes for " + std::to_string(classes.count()) +
                     " classes");

  const GridU16 sem = semantic_argmax(pred.semantic_logits);
  const GridU8 mask = thing_mask_of(sem, classes);
  const std::vector<InstanceCenter> centers =
      extract_centers(pred.center_heatmap, config);
  const GridU32 inst = group_instances(centers, pred.offsets, mask);

  FuseTrace trace;
  DecodeResult result;
  result.map = fuse_panoptic(sem, inst, classes, config, &trace);
  result.scores.reserve(trace.instance_ids.size());
  for (const auto& [orig, id] : trace.instance_ids)
    result.scores.push_back({id, centers[orig - 1].score});
  std::sort(result.scores.begin(), result.scores.end(),
            [](const SegmentScore& a, const SegmentScore& b) {
              return a.id < b.id;
            });
  return result;
}

}  // namespace iterseg::postproc
