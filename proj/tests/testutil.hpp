#pragma once

// Shared helpers for the test suites: map comparison modulo instance
// renumbering, random panoptic map generators, and prediction volumes built
// from encoded targets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <vector>

#include "iterseg/grid.hpp"
#include "iterseg/model.hpp"
#include "iterseg/panoptic.hpp"
#include "iterseg/rng.hpp"

namespace iterseg::testutil {

// Bitwise equality, stricter than operator== (distinguishes -0.0 from +0.0).
inline bool bits_equal(const std::vector<double>& a,
                       const std::vector<double>& b) {
  return a.size() == b.size() &&
         (a.empty() ||
          std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

inline bool bits_equal(const model::PredictionVolume& a,
                       const model::PredictionVolume& b) {
  return a.semantic_logits.ch == b.semantic_logits.ch &&
         a.rows() == b.rows() && a.cols() == b.cols() &&
         bits_equal(a.semantic_logits.data, b.semantic_logits.data) &&
         bits_equal(a.center_heatmap.data, b.center_heatmap.data) &&
         bits_equal(a.offsets.data, b.offsets.data);
}

// True when the maps agree pixelwise on semantic class and void, and their
// instance ids are related by a bijection.
inline bool maps_equal_modulo_renumbering(const PanopticMap& a,
                                          const PanopticMap& b) {
  if (a.rows != b.rows || a.cols != b.cols) return false;
  std::map<std::uint32_t, std::uint32_t> fwd, bwd;
  for (std::size_t i = 0; i < a.ids.size(); ++i) {
    const std::uint32_t ia = a.ids[i];
    const std::uint32_t ib = b.ids[i];
    if (semantic_of(ia) != semantic_of(ib)) return false;
    const bool thing_a = instance_of(ia) != 0;
    const bool thing_b = instance_of(ib) != 0;
    if (thing_a != thing_b) return false;
    if (!thing_a) continue;
    const auto [fa, inserted_f] = fwd.emplace(ia, ib);
    if (!inserted_f && fa->second != ib) return false;
    const auto [fb, inserted_b] = bwd.emplace(ib, ia);
    if (!inserted_b && fb->second != ia) return false;
  }
  return true;
}

// A prediction volume whose semantic argmax, heatmap, and offsets reproduce
// the targets exactly. `hot` is the logit of the target class; other classes
// get 0.
inline model::PredictionVolume pred_from_targets(
    const model::TrainingTargets& targets, int class_count, double hot = 1.0) {
  model::PredictionVolume pred;
  pred.semantic_logits =
      Planes(class_count + 1, targets.semantic.rows, targets.semantic.cols);
  for (int r = 0; r < targets.semantic.rows; ++r)
    for (int c = 0; c < targets.semantic.cols; ++c)
      pred.semantic_logits.at(targets.semantic.at(r, c), r, c) = hot;
  pred.center_heatmap = targets.heatmap;
  pred.offsets = targets.offsets;
  return pred;
}

// Arbitrary valid panoptic map: random class rectangles over a void canvas,
// thing rectangles carrying instance indices. Adjacent paints overwrite, so
// shapes are irregular. Guarantees at least one thing instance.
inline PanopticMap random_messy_map(Rng& rng, int rows, int cols,
                                    const ClassTable& classes,
                                    int max_instances = 3) {
  PanopticMap map(rows, cols, kVoidId);
  const int paints = 2 + static_cast<int>(rng.uniform_int(6));
  for (int i = 0; i < paints; ++i) {
    const int ci = 1 + static_cast<int>(rng.uniform_int(classes.count()));
    const std::uint32_t sem = classes.id_at(ci);
    const bool thing = classes.by_id(sem).is_thing;
    const std::uint32_t inst =
        thing ? 1 + static_cast<std::uint32_t>(rng.uniform_int(max_instances))
              : 0;
    const int r0 = static_cast<int>(rng.uniform_int(rows));
    const int c0 = static_cast<int>(rng.uniform_int(cols));
    const int h = 1 + static_cast<int>(rng.uniform_int(rows - r0));
    const int w = 1 + static_cast<int>(rng.uniform_int(cols - c0));
    for (int r = r0; r < r0 + h; ++r)
      for (int c = c0; c < c0 + w; ++c) map.at(r, c) = make_id(sem, inst);
  }
  // Force a thing pixel so detection metrics stay defined.
  bool has_thing = false;
  for (const std::uint32_t id : map.ids)
    if (instance_of(id) != 0) has_thing = true;
  if (!has_thing) {
    for (int ci = 1; ci <= classes.count(); ++ci) {
      const std::uint32_t sem = classes.id_at(ci);
      if (!classes.by_id(sem).is_thing) continue;
      map.at(static_cast<int>(rng.uniform_int(rows)),
             static_cast<int>(rng.uniform_int(cols))) = make_id(sem, 1);
      break;
    }
  }
  return map;
}

// Map with well-separated things: disjoint axis-aligned thing boxes whose
// centers sit farther apart than the peak window, distinct areas within each
// class, a stuff background split into two bands, and an optional void strip
// at the top. Decoding an encoding of such a map recovers it exactly.
inline PanopticMap random_separated_map(Rng& rng, int rows, int cols,
                                        const ClassTable& classes,
                                        int max_things = 3) {
  std::vector<int> stuff_idx, thing_idx;
  for (int ci = 1; ci <= classes.count(); ++ci)
    (classes.by_id(classes.id_at(ci)).is_thing ? thing_idx : stuff_idx)
        .push_back(ci);

  PanopticMap map(rows, cols, kVoidId);
  const int void_rows = static_cast<int>(rng.uniform_int(3));
  if (!stuff_idx.empty()) {
    const int split = rows / 2;
    for (int r = void_rows; r < rows; ++r) {
      const int ci = stuff_idx[(r < split ? 0 : 1) % stuff_idx.size()];
      for (int c = 0; c < cols; ++c)
        map.at(r, c) = make_id(classes.id_at(ci), 0);
    }
  }

  if (thing_idx.empty()) return map;
  struct Box {
    int r, c, h, w;
  };
  std::vector<Box> boxes;
  std::vector<std::uint32_t> ids;
  std::map<int, std::uint32_t> next_inst;
  std::map<int, std::vector<int>> used_areas;
  const int want = 1 + static_cast<int>(rng.uniform_int(max_things));
  for (int i = 0; i < want && boxes.size() < 9; ++i) {
    for (int attempt = 0; attempt < 60; ++attempt) {
      Box b;
      b.h = 3 + static_cast<int>(rng.uniform_int(4));
      b.w = 3 + static_cast<int>(rng.uniform_int(4));
      if (rows - void_rows < b.h + 2 || cols < b.w + 2) continue;
      b.r = void_rows + 1 +
            static_cast<int>(rng.uniform_int(rows - void_rows - b.h - 1));
      b.c = 1 + static_cast<int>(rng.uniform_int(cols - b.w - 1));
      const double cr = b.r + (b.h - 1) / 2.0;
      const double cc = b.c + (b.w - 1) / 2.0;
      bool ok = true;
      for (const Box& o : boxes) {
        const double dr = cr - (o.r + (o.h - 1) / 2.0);
        const double dc = cc - (o.c + (o.w - 1) / 2.0);
        // Keep mass centers past the peak window and the boxes disjoint.
        if (dr * dr + dc * dc < 81.0 ||
            (b.r < o.r + o.h + 1 && o.r < b.r + b.h + 1 &&
             b.c < o.c + o.w + 1 && o.c < b.c + b.w + 1))
          ok = false;
      }
      const int ci = thing_idx[rng.uniform_int(thing_idx.size())];
      auto& areas = used_areas[ci];
      if (std::find(areas.begin(), areas.end(), b.h * b.w) != areas.end())
        ok = false;
      if (!ok) continue;
      areas.push_back(b.h * b.w);
      const std::uint32_t inst = ++next_inst[ci];
      boxes.push_back(b);
      ids.push_back(make_id(classes.id_at(ci), inst));
      break;
    }
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    for (int r = b.r; r < b.r + b.h; ++r)
      for (int c = b.c; c < b.c + b.w; ++c) map.at(r, c) = ids[i];
  }
  return map;
}

}  // namespace iterseg::testutil
