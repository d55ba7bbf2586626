#include <cmath>
#include <map>

#include "iterseg/errors.hpp"
#include "iterseg/model.hpp"

namespace iterseg::model {

double sigma_for_rows(int rows) {
  return std::max(2.0, 8.0 * rows / 1024.0);
}

TrainingTargets encode_targets(const PanopticMap& map, const ClassTable& classes,
                               double sigma) {
  validate_map(map, classes);
  if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");

  TrainingTargets tgt;
  tgt.semantic = GridU16(map.rows, map.cols, 0);
  tgt.heatmap = GridD(map.rows, map.cols, 0.0);
  tgt.offsets = Planes(2, map.rows, map.cols, 0.0);
  tgt.thing_mask = GridU8(map.rows, map.cols, 0);

  // Instance mass centers.
  struct Accum {
    double r = 0, c = 0;
    std::size_t n = 0;
  };
  std::map<std::uint32_t, Accum> instances;
  for (int r = 0; r < map.rows; ++r)
    for (int c = 0; c < map.cols; ++c) {
      const std::uint32_t id = map.at(r, c);
      tgt.semantic.at(r, c) =
          static_cast<std::uint16_t>(classes.index_of(semantic_of(id)));
      if (instance_of(id) != 0) {
        auto& a = instances[id];
        a.r += r;
        a.c += c;
        a.n += 1;
      }
    }
  struct Center {
    double r, c;
  };
  std::map<std::uint32_t, Center> centers;
  for (const auto& [id, a] : instances)
    centers[id] = {a.r / static_cast<double>(a.n), a.c / static_cast<double>(a.n)};

  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (int r = 0; r < map.rows; ++r)
    for (int c = 0; c < map.cols; ++c) {
      double h = 0.0;
      for (const auto& [id, ctr] : centers) {
        const double dr = r - ctr.r;
        const double dc = c - ctr.c;
        h = std::max(h, std::exp(-(dr * dr + dc * dc) * inv2s2));
      }
      tgt.heatmap.at(r, c) = h;
      const std::uint32_t id = map.at(r, c);
      if (instance_of(id) != 0) {
        const Center& ctr = centers.at(id);
        tgt.offsets.at(0, r, c) = ctr.r - r;
        tgt.offsets.at(1, r, c) = ctr.c - c;
        tgt.thing_mask.at(r, c) = 1;
      }
    }
  return tgt;
}

TrainingTargets encode_targets(const PanopticMap& map, const ClassTable& classes) {
  return encode_targets(map, classes, sigma_for_rows(map.rows));
}

}  // namespace iterseg::model
