#include "iterseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "iterseg/errors.hpp"
#include "iterseg/rng.hpp"

namespace iterseg::dataset {

bool FrameRecord::in_split(std::string_view tag) const {
  return std::find(splits.begin(), splits.end(), tag) != splits.end();
}

std::string FrameRecord::frame_key() const {
  return sequence_id + "/" + std::to_string(frame_index);
}

std::filesystem::path Manifest::resolve(const std::filesystem::path& rel) const {
  if (rel.empty()) return rel;
  if (rel.is_absolute()) return rel;
  return base_dir / rel;
}

std::vector<std::size_t> Manifest::frames_in_split(std::string_view tag) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (frames[i].in_split(tag)) out.push_back(i);
  return out;
}

std::vector<std::string> Manifest::split_tags() const {
  std::set<std::string> tags;
  for (const auto& f : frames) tags.insert(f.splits.begin(), f.splits.end());
  return {tags.begin(), tags.end()};
}

namespace {

std::vector<std::string> split_on(const std::string& line, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (const char c : line) {
    if (c == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  return parts;
}

int parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw FormatError("bad integer in " + what + ": " + s);
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("bad integer in " + what + ": " + s);
  }
}

void check_token(const std::string& s, const std::string& what) {
  if (s.empty()) throw FormatError("empty " + what);
  for (const char c : s)
    if (std::isspace(static_cast<unsigned char>(c)) || c == ',')
      throw FormatError(what + " contains whitespace or comma: " + s);
}

}  // namespace

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Manifest m;
  m.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");

  std::string line;
  if (!std::getline(in, line) || line != "manifest-version 1")
    throw FormatError("missing manifest-version header in " + path.string());

  if (!std::getline(in, line)) throw FormatError("truncated manifest header");
  {
    std::istringstream ss(line);
    std::string key;
    ss >> key >> m.rows >> m.cols;
    if (key != "image-size" || ss.fail() || m.rows <= 0 || m.cols <= 0)
      throw FormatError("bad image-size line: " + line);
  }

  std::vector<ClassDef> classes;
  long frame_count = -1;
  while (std::getline(in, line)) {
    if (line.rfind("class ", 0) == 0) {
      std::istringstream ss(line);
      std::string key, name, kind;
      long id = 0;
      ss >> key >> id >> name >> kind;
      if (ss.fail() || id <= 0 || (kind != "thing" && kind != "stuff"))
        throw FormatError("bad class line: " + line);
      classes.push_back({static_cast<std::uint32_t>(id), name, kind == "thing"});
      continue;
    }
    if (line.rfind("frames ", 0) == 0) {
      frame_count = parse_int(line.substr(7), "frames header");
      break;
    }
    throw FormatError("unexpected manifest header line: " + line);
  }
  if (frame_count < 0) throw FormatError("missing frames header in " + path.string());
  m.classes = ClassTable(std::move(classes));

  std::set<std::string> seen;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cols = split_on(line, '\t');
    if (cols.size() != 6) throw FormatError("bad manifest record: " + line);
    FrameRecord f;
    f.sequence_id = cols[0];
    check_token(f.sequence_id, "sequence id");
    f.frame_index = parse_int(cols[1], "frame index");
    if (f.frame_index < 0) throw FormatError("negative frame index: " + line);
    if (cols[2] == "-" || cols[2].empty())
      throw FormatError("record without image path: " + line);
    f.image_path = cols[2];
    if (cols[3] != "-") f.label_path = cols[3];
    if (cols[4] != "-") f.ego_void_path = cols[4];
    if (cols[5] != "-")
      for (auto& tag : split_on(cols[5], ','))
        if (!tag.empty()) f.splits.push_back(tag);
    if (!seen.insert(f.frame_key()).second)
      throw ManifestError("duplicate frame " + f.frame_key() + " in " + path.string());
    m.frames.push_back(std::move(f));
  }
  if (static_cast<long>(m.frames.size()) != frame_count)
    throw ManifestError("manifest declares " + std::to_string(frame_count) +
                        " frames but lists " + std::to_string(m.frames.size()));
  return m;
}

void save_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "manifest-version 1\n";
  out << "image-size " << manifest.rows << ' ' << manifest.cols << '\n';
  for (const auto& c : manifest.classes.classes()) {
    check_token(c.name, "class name");
    out << "class " << c.id << ' ' << c.name << ' '
        << (c.is_thing ? "thing" : "stuff") << '\n';
  }
  out << "frames " << manifest.frames.size() << '\n';
  for (const auto& f : manifest.frames) {
    check_token(f.sequence_id, "sequence id");
    out << f.sequence_id << '\t' << f.frame_index << '\t'
        << f.image_path.generic_string() << '\t'
        << (f.has_label() ? f.label_path.generic_string() : "-") << '\t'
        << (f.has_ego_void() ? f.ego_void_path.generic_string() : "-") << '\t';
    if (f.splits.empty()) {
      out << '-';
    } else {
      for (std::size_t i = 0; i < f.splits.size(); ++i) {
        if (i) out << ',';
        out << f.splits[i];
      }
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Manifest propagate_ego_car(const Manifest& manifest,
                           const std::filesystem::path& mask_dir,
                           EgoVoidMode mode) {
  std::filesystem::create_directories(mask_dir);
  // Sequences in first-appearance order.
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> by_seq;
  for (std::size_t i = 0; i < manifest.frames.size(); ++i) {
    const auto& seq = manifest.frames[i].sequence_id;
    if (!by_seq.count(seq)) order.push_back(seq);
    by_seq[seq].push_back(i);
  }

  Manifest out = manifest;
  for (const auto& seq : order) {
    const auto& idxs = by_seq[seq];
    const FrameRecord* labeled = nullptr;
    for (const std::size_t i : idxs) {
      const auto& f = manifest.frames[i];
      if (f.has_label() && (!labeled || f.frame_index < labeled->frame_index))
        labeled = &f;
    }
    if (!labeled)
      throw ManifestError("sequence " + seq + " has no labeled frame");
    const PanopticMap gt = load_lmap(manifest.resolve(labeled->label_path));
    if (gt.rows != manifest.rows || gt.cols != manifest.cols)
      throw ManifestError("label size mismatch for " + labeled->frame_key());

    GridU8 mask(gt.rows, gt.cols, 0);
    int rmin = gt.rows, rmax = -1, cmin = gt.cols, cmax = -1;
    for (int r = 0; r < gt.rows; ++r)
      for (int c = 0; c < gt.cols; ++c)
        if (gt.at(r, c) == kVoidId) {
          mask.at(r, c) = 1;
          rmin = std::min(rmin, r);
          rmax = std::max(rmax, r);
          cmin = std::min(cmin, c);
          cmax = std::max(cmax, c);
        }
    if (mode == EgoVoidMode::kBoundingBox && rmax >= 0) {
      mask = GridU8(gt.rows, gt.cols, 0);
      for (int r = rmin; r <= rmax; ++r)
        for (int c = cmin; c <= cmax; ++c) mask.at(r, c) = 1;
    }

    const std::filesystem::path file = mask_dir / (seq + ".evmk");
    save_evmk(file, mask);
    // Store relative to the manifest when the mask lives under base_dir.
    const auto abs_file = std::filesystem::absolute(file).lexically_normal();
    const auto abs_base =
        std::filesystem::absolute(manifest.base_dir).lexically_normal();
    const auto rel = abs_file.lexically_proximate(abs_base);
    const std::filesystem::path stored =
        rel.generic_string().rfind("..", 0) == 0 ? abs_file : rel;
    for (const std::size_t i : idxs) out.frames[i].ego_void_path = stored;
  }
  return out;
}

Manifest sample_fraction(const Manifest& manifest, std::string_view split,
                         SampleKind kind, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0) || fraction > 1.0)
    throw ConfigError("fraction must be in [0, 1], got " + std::to_string(fraction));
  const auto tags = manifest.split_tags();
  if (std::find(tags.begin(), tags.end(), split) == tags.end())
    throw LookupError("unknown split tag: " + std::string(split));

  if (kind == SampleKind::kLabeledImages) {
    // Items: labeled frames of the split, canonically ordered.
    std::vector<std::size_t> items;
    for (std::size_t i = 0; i < manifest.frames.size(); ++i)
      if (manifest.frames[i].in_split(split) && manifest.frames[i].has_label())
        items.push_back(i);
    std::sort(items.begin(), items.end(), [&](std::size_t a, std::size_t b) {
      const auto& fa = manifest.frames[a];
      const auto& fb = manifest.frames[b];
      return std::tie(fa.sequence_id, fa.frame_index) <
             std::tie(fb.sequence_id, fb.frame_index);
    });
    const std::size_t keep = std::min(
        items.size(),
        static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(items.size()))));
    if (keep == items.size()) return manifest;
    Rng rng(seed);
    rng.shuffle(items);
    const std::set<std::size_t> selected(items.begin(), items.begin() + keep);
    Manifest out = manifest;
    for (std::size_t i = 0; i < out.frames.size(); ++i) {
      auto& f = out.frames[i];
      if (!f.in_split(split) || !f.has_label() || selected.count(i)) continue;
      f.label_path.clear();
      std::erase(f.splits, std::string(split));
    }
    return out;
  }

  // Items: sequences with frames in the split.
  std::set<std::string> seqs;
  for (const auto& f : manifest.frames)
    if (f.in_split(split)) seqs.insert(f.sequence_id);
  std::vector<std::string> items(seqs.begin(), seqs.end());
  const std::size_t keep = std::min(
      items.size(),
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(items.size()))));
  if (keep == items.size()) return manifest;
  Rng rng(seed);
  rng.shuffle(items);
  const std::set<std::string> selected(items.begin(), items.begin() + keep);
  Manifest out = manifest;
  std::erase_if(out.frames, [&](const FrameRecord& f) {
    return seqs.count(f.sequence_id) && !selected.count(f.sequence_id);
  });
  return out;
}

}  // namespace iterseg::dataset
