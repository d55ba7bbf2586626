// Synthetic video benchmark. Twenty-ish short sequences of rigid shapes
// gliding over banded backgrounds, one human-labeled frame per sequence.
// Class identity is carried by shape (discs vs boxes) and texture (stripes vs
// speckle), never by color: colors come from one shared palette, so a model
// trained on the few labeled frames has to generalize, which is what the
// pseudo-label rounds exploit.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "iterseg/dataset.hpp"
#include "iterseg/errors.hpp"
#include "iterseg/image.hpp"
#include "iterseg/rng.hpp"

namespace iterseg::dataset {

namespace {

constexpr std::uint32_t kDisc = 1;
constexpr std::uint32_t kBox = 2;
constexpr std::uint32_t kStripes = 3;
constexpr std::uint32_t kSpeckle = 4;

struct Thing {
  std::uint32_t cls = kDisc;
  std::uint32_t instance = 0;
  double r0 = 0, c0 = 0;      // start center
  double vr = 0, vc = 0;      // px per frame
  double half_r = 0, half_c = 0;
  double rgb[3] = {0, 0, 0};
};

struct Scene {
  std::vector<int> row_band;        // band index per non-ego row
  std::vector<std::uint32_t> band_class;
  std::vector<double> band_tint;
  std::vector<Thing> things;
  int ego_start = 0;                // first ego row
  std::uint64_t tex_seed = 0;
};

double hash01(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  const std::uint64_t h =
      detail::splitmix64(detail::splitmix64(a + 0x632be59bd9b4e019ULL) ^
                         detail::splitmix64(b * 0x9e3779b97f4a7c15ULL + c));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

void hsv_to_rgb(double h, double s, double v, double* rgb) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int sector = std::min(5, static_cast<int>(hh));
  const double f = hh - sector;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

// Reflects an unconstrained coordinate into [lo, hi].
double reflect(double x, double lo, double hi) {
  const double span = hi - lo;
  if (span <= 0.0) return lo;
  double ph = std::fmod(x - lo, 2.0 * span);
  if (ph < 0.0) ph += 2.0 * span;
  return lo + (ph > span ? 2.0 * span - ph : ph);
}

Scene make_scene(const SynthConfig& cfg, Rng rng) {
  Scene s;
  s.ego_start = cfg.rows - static_cast<int>(std::lround(cfg.ego_car_fraction * cfg.rows));
  s.tex_seed = rng.next_u64();

  // Horizontal stuff bands with alternating texture classes.
  const int field_rows = s.ego_start;
  const int bands = 3 + static_cast<int>(rng.uniform_int(3));
  std::vector<int> cuts = {0};
  for (int b = 1; b < bands; ++b)
    cuts.push_back(static_cast<int>(rng.uniform_int(field_rows)));
  cuts.push_back(field_rows);
  std::sort(cuts.begin(), cuts.end());
  const std::uint32_t first = rng.bernoulli(0.5) ? kStripes : kSpeckle;
  s.row_band.assign(field_rows, 0);
  int band = 0;
  for (int b = 0; b + 1 < static_cast<int>(cuts.size()); ++b) {
    if (cuts[b + 1] == cuts[b]) continue;
    s.band_class.push_back((band + (first == kSpeckle)) % 2 == 0 ? kStripes : kSpeckle);
    s.band_tint.push_back(rng.uniform(-0.08, 0.08));
    for (int r = cuts[b]; r < cuts[b + 1]; ++r) s.row_band[r] = band;
    ++band;
  }

  // Moving things. Centers bounce inside the field so instances stay whole.
  const int n = cfg.min_things +
                static_cast<int>(rng.uniform_int(cfg.max_things - cfg.min_things + 1));
  std::uint32_t inst_count[3] = {0, 0, 0};
  for (int i = 0; i < n; ++i) {
    Thing t;
    t.cls = rng.bernoulli(0.5) ? kDisc : kBox;
    t.instance = ++inst_count[t.cls];
    const double max_r = std::min(
        {cfg.max_radius, (field_rows - 4) / 2.0, (cfg.cols - 4) / 2.0});
    const double lo_r = std::min(cfg.min_radius, max_r);
    if (t.cls == kDisc) {
      t.half_r = t.half_c = rng.uniform(lo_r, max_r);
    } else {
      t.half_r = rng.uniform(lo_r, max_r);
      t.half_c = rng.uniform(lo_r, max_r);
    }
    t.r0 = rng.uniform(t.half_r + 1.0, field_rows - 1.0 - t.half_r);
    t.c0 = rng.uniform(t.half_c + 1.0, cfg.cols - 1.0 - t.half_c);
    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double speed = cfg.motion_speed * rng.uniform(0.5, 1.0);
    t.vr = speed * std::sin(angle);
    t.vc = speed * std::cos(angle);
    hsv_to_rgb(rng.uniform(), rng.uniform(0.45, 0.85), rng.uniform(0.55, 0.95), t.rgb);
    s.things.push_back(t);
  }
  return s;
}

struct RenderedFrame {
  Image image;
  PanopticMap labels;
};

RenderedFrame render_frame(const SynthConfig& cfg, const Scene& s, int frame,
                           Rng noise_rng) {
  RenderedFrame out;
  out.image = Image(cfg.rows, cfg.cols);
  out.labels = PanopticMap(cfg.rows, cfg.cols, kVoidId);

  // Current thing centers.
  std::vector<std::pair<double, double>> centers(s.things.size());
  for (std::size_t i = 0; i < s.things.size(); ++i) {
    const Thing& t = s.things[i];
    centers[i] = {
        reflect(t.r0 + t.vr * frame, t.half_r + 1.0, s.ego_start - 1.0 - t.half_r),
        reflect(t.c0 + t.vc * frame, t.half_c + 1.0, cfg.cols - 1.0 - t.half_c)};
  }

  const std::size_t npx = static_cast<std::size_t>(cfg.rows) * cfg.cols;
  for (int r = 0; r < cfg.rows; ++r) {
    for (int c = 0; c < cfg.cols; ++c) {
      double rgb[3];
      std::uint32_t id;
      if (r >= s.ego_start) {
        // Ego hood: dark gradient with a fixed fleck pattern, void in gt.
        const double shade =
            0.12 + 0.10 * (r - s.ego_start) / std::max(1, cfg.rows - s.ego_start);
        const double fleck = 0.05 * hash01(s.tex_seed, 7777, r * 4096 + c);
        rgb[0] = rgb[1] = rgb[2] = shade + fleck;
        id = kVoidId;
      } else {
        const int band = s.row_band[r];
        const std::uint32_t cls = s.band_class[band];
        const double tint = s.band_tint[band];
        if (cls == kStripes) {
          const double tone = (r / 2) % 2 == 0 ? 0.62 : 0.40;
          rgb[0] = tone + tint;
          rgb[1] = tone + tint * 0.5;
          rgb[2] = tone + tint;
        } else {
          const double u = hash01(s.tex_seed, band, r * 4096 + c);
          const double tone = 0.51 + 0.24 * (u - 0.5) + tint;
          rgb[0] = tone;
          rgb[1] = tone + tint * 0.5;
          rgb[2] = tone;
        }
        id = make_id(cls, 0);
        // Things drawn over stuff; later things sit on top.
        for (std::size_t i = s.things.size(); i-- > 0;) {
          const Thing& t = s.things[i];
          const double dr = r - centers[i].first;
          const double dc = c - centers[i].second;
          bool hit;
          double shade;
          if (t.cls == kDisc) {
            const double d2 = (dr * dr + dc * dc) / (t.half_r * t.half_r);
            hit = d2 <= 1.0;
            shade = 1.0 - 0.30 * d2;
          } else {
            hit = std::abs(dr) <= t.half_r && std::abs(dc) <= t.half_c;
            shade = 1.0 - 0.30 * std::abs(dr) / t.half_r;
          }
          if (hit) {
            rgb[0] = t.rgb[0] * shade;
            rgb[1] = t.rgb[1] * shade;
            rgb[2] = t.rgb[2] * shade;
            id = make_id(t.cls, t.instance);
            break;
          }
        }
      }
      const std::size_t px = static_cast<std::size_t>(r) * cfg.cols + c;
      for (int ch = 0; ch < 3; ++ch) {
        const double v = rgb[ch] + cfg.pixel_noise * noise_rng.normal();
        out.image.px.data[ch * npx + px] = std::clamp(v, 0.0, 1.0);
      }
      out.labels.ids[px] = id;
    }
  }
  return out;
}

}  // namespace

void SynthConfig::validate() const {
  if (sequences <= 0) throw ConfigError("sequences must be positive");
  if (val_sequences < 0) throw ConfigError("val_sequences must be nonnegative");
  if (frames_per_sequence <= 0) throw ConfigError("frames_per_sequence must be positive");
  if (labeled_frame < 0 || labeled_frame >= frames_per_sequence)
    throw ConfigError("labeled_frame out of range");
  if (rows < 16 || cols < 16) throw ConfigError("image size too small");
  if (min_things < 0 || max_things < min_things)
    throw ConfigError("bad thing count range");
  if (!(min_radius > 0) || max_radius < min_radius)
    throw ConfigError("bad radius range");
  if (!(motion_speed >= 0)) throw ConfigError("motion_speed must be nonnegative");
  if (!(ego_car_fraction >= 0) || ego_car_fraction > 0.5)
    throw ConfigError("ego_car_fraction must be in [0, 0.5]");
  if (!(pixel_noise >= 0)) throw ConfigError("pixel_noise must be nonnegative");
}

ClassTable synth_class_table() {
  return ClassTable({{kDisc, "disc", true},
                     {kBox, "box", true},
                     {kStripes, "stripes", false},
                     {kSpeckle, "speckle", false}});
}

Manifest synth_generate(const SynthConfig& config,
                        const std::filesystem::path& out_dir) {
  config.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "labels");

  Manifest m;
  m.classes = synth_class_table();
  m.rows = config.rows;
  m.cols = config.cols;
  m.base_dir = out_dir;

  const Rng root(config.seed);
  const int total = config.sequences + config.val_sequences;
  for (int seq = 0; seq < total; ++seq) {
    const bool is_val = seq >= config.sequences;
    char seq_name[16];
    std::snprintf(seq_name, sizeof seq_name, "seq%03d", seq);
    const Scene scene = make_scene(config, root.derive("scene", seq));
    for (int frame = 0; frame < config.frames_per_sequence; ++frame) {
      const RenderedFrame rf = render_frame(
          config, scene, frame,
          root.derive("noise", static_cast<std::uint64_t>(seq) * 100000 + frame));
      char stem[32];
      std::snprintf(stem, sizeof stem, "%s_f%03d", seq_name, frame);
      const fs::path image_rel = fs::path("images") / (std::string(stem) + ".ppm");
      const fs::path label_rel = fs::path("labels") / (std::string(stem) + ".lmap");
      save_ppm(out_dir / image_rel, rf.image);
      save_lmap(out_dir / label_rel, rf.labels);

      FrameRecord rec;
      rec.sequence_id = seq_name;
      rec.frame_index = frame;
      rec.image_path = image_rel;
      rec.splits = {is_val ? "val-sequence" : "train-sequence"};
      if (frame == config.labeled_frame) {
        rec.label_path = label_rel;
        rec.splits.push_back(is_val ? "val-fine" : "train-fine");
      }
      m.frames.push_back(std::move(rec));
    }
  }
  save_manifest(out_dir / "manifest.tsv", m);
  return m;
}

}  // namespace iterseg::dataset
