#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "iterseg/panoptic.hpp"

namespace iterseg::dataset {

// One video frame. Paths are stored relative to the manifest location and
// resolved against Manifest::base_dir. Empty path means "none".
struct FrameRecord {
  std::string sequence_id;
  int frame_index = 0;
  std::filesystem::path image_path;
  std::filesystem::path label_path;
  std::filesystem::path ego_void_path;
  std::vector<std::string> splits;

  bool has_label() const { return !label_path.empty(); }
  bool has_ego_void() const { return !ego_void_path.empty(); }
  bool in_split(std::string_view tag) const;
  std::string frame_key() const;  // "<sequence_id>/<frame_index>"
};

struct Manifest {
  ClassTable classes;
  int rows = 0;
  int cols = 0;
  std::vector<FrameRecord> frames;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::filesystem::path& rel) const;
  std::vector<std::size_t> frames_in_split(std::string_view tag) const;
  std::vector<std::string> split_tags() const;  // sorted unique
};

// Text format, one tab-separated record per frame:
//   manifest-version 1
//   image-size <rows> <cols>
//   class <id> <name> <thing|stuff>   (one line per class, table order)
//   frames <count>
//   <sequence_id> \t <frame_index> \t <image> \t <label|-> \t <ego|-> \t <tags>
// Tags are comma-joined split names. Duplicate (sequence, frame) pairs and a
// count mismatch are manifest errors.
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);

struct SynthConfig {
  int sequences = 20;       // training sequences
  int val_sequences = 6;    // held-out sequences, same generator
  int frames_per_sequence = 30;
  int labeled_frame = 19;   // frame_index carrying the human label
  int rows = 64;
  int cols = 96;
  int min_things = 2;
  int max_things = 5;
  double min_radius = 5.0;
  double max_radius = 11.0;
  double motion_speed = 1.5;      // px per frame
  double ego_car_fraction = 0.15; // bottom rows painted as ego hood, void in gt
  double pixel_noise = 0.03;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

// The synthetic class table: two thing classes told apart by shape, two stuff
// classes told apart by texture. Colors are drawn from one shared palette so
// they carry no class information.
ClassTable synth_class_table();

// Renders the benchmark to out_dir (images/, labels/, manifest.tsv) and
// returns the manifest. Ground-truth label maps are written for every frame;
// the manifest attaches a label only to the labeled frame of each sequence.
// Training sequences are tagged train-sequence (labeled frames additionally
// train-fine); validation sequences val-sequence / val-fine.
Manifest synth_generate(const SynthConfig& config,
                        const std::filesystem::path& out_dir);

enum class EgoVoidMode {
  kVoidPixels,  // mask = exact void pixels of the labeled frame
  kBoundingBox, // mask = bounding rectangle of those pixels
};

// Reads each sequence's labeled frame, derives its ego-void mask, writes one
// EVMK file per sequence into mask_dir, and returns a manifest with
// ego_void_path set on all frames of the sequence. A sequence without a
// labeled frame is a manifest error; a labeled frame without void pixels
// yields an all-zero mask.
Manifest propagate_ego_car(const Manifest& manifest,
                           const std::filesystem::path& mask_dir,
                           EgoVoidMode mode = EgoVoidMode::kVoidPixels);

enum class SampleKind {
  kLabeledImages,  // items are labeled frames; dropped items lose their label
  kSequences,      // items are sequences; dropped sequences lose their frames
};

// Deterministically selects ceil(fraction * item_count) items of the split.
// Selection is a prefix of one seeded permutation, so smaller fractions are
// subsets of larger ones at the same seed, and fraction 1.0 returns the
// manifest unchanged. Selected items keep their original manifest order.
Manifest sample_fraction(const Manifest& manifest, std::string_view split,
                         SampleKind kind, double fraction, std::uint64_t seed);

}  // namespace iterseg::dataset
