#include "iterseg/panoptic.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>

#include "iterseg/errors.hpp"

namespace iterseg {

ClassTable::ClassTable(std::vector<ClassDef> classes) : classes_(std::move(classes)) {
  std::set<std::uint32_t> ids;
  std::set<std::string> names;
  for (const auto& c : classes_) {
    if (c.id == 0) throw ConfigError("class id 0 is reserved for void");
    if (c.id > std::numeric_limits<std::uint32_t>::max() / kLabelDivisor)
      throw ConfigError("class id too large: " + std::to_string(c.id));
    if (!ids.insert(c.id).second)
      throw ConfigError("duplicate class id: " + std::to_string(c.id));
    if (c.name.empty()) throw ConfigError("empty class name");
    if (!names.insert(c.name).second)
      throw ConfigError("duplicate class name: " + c.name);
  }
}

bool ClassTable::contains(std::uint32_t semantic_id) const {
  return std::any_of(classes_.begin(), classes_.end(),
                     [&](const ClassDef& c) { return c.id == semantic_id; });
}

const ClassDef& ClassTable::by_id(std::uint32_t semantic_id) const {
  for (const auto& c : classes_)
    if (c.id == semantic_id) return c;
  throw LookupError("semantic id not in class table: " + std::to_string(semantic_id));
}

int ClassTable::index_of(std::uint32_t semantic_id) const {
  if (semantic_id == 0) return 0;
  for (std::size_t i = 0; i < classes_.size(); ++i)
    if (classes_[i].id == semantic_id) return static_cast<int>(i) + 1;
  throw LookupError("semantic id not in class table: " + std::to_string(semantic_id));
}

std::uint32_t ClassTable::id_at(int index) const {
  if (index < 1 || index > count())
    throw LookupError("class index out of range: " + std::to_string(index));
  return classes_[static_cast<std::size_t>(index) - 1].id;
}

void validate_map(const PanopticMap& map, const ClassTable& classes) {
  if (map.rows <= 0 || map.cols <= 0) throw SizeError("empty panoptic map");
  if (map.ids.size() != static_cast<std::size_t>(map.rows) * map.cols)
    throw SizeError("panoptic map payload does not match its dimensions");
  for (const std::uint32_t id : map.ids) {
    if (id == kVoidId) continue;
    const std::uint32_t sem = semantic_of(id);
    const std::uint32_t inst = instance_of(id);
    if (sem == 0)
      throw FormatError("instance index without a semantic class: " + std::to_string(id));
    const ClassDef& def = classes.by_id(sem);
    if (def.is_thing && inst == 0)
      throw FormatError("thing pixel with instance index 0: " + std::to_string(id));
    if (!def.is_thing && inst != 0)
      throw FormatError("stuff pixel with nonzero instance index: " + std::to_string(id));
  }
}

PanopticMap mirrored(const PanopticMap& map) {
  PanopticMap out(map.rows, map.cols);
  for (int r = 0; r < map.rows; ++r)
    for (int c = 0; c < map.cols; ++c) out.at(r, c) = map.at(r, map.cols - 1 - c);
  return out;
}

namespace {

void write_u32le(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {
      static_cast<unsigned char>(v & 0xff),
      static_cast<unsigned char>((v >> 8) & 0xff),
      static_cast<unsigned char>((v >> 16) & 0xff),
      static_cast<unsigned char>((v >> 24) & 0xff),
  };
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32le(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw FormatError("truncated " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void check_magic(std::istream& in, const char* magic, const std::string& path) {
  char got[4];
  in.read(got, 4);
  if (in.gcount() != 4 || !std::equal(got, got + 4, magic))
    throw FormatError("bad magic in " + path);
  const int version = in.get();
  if (version == EOF) throw FormatError("truncated header in " + path);
  if (version != 1)
    throw FormatError("unsupported version " + std::to_string(version) + " in " + path);
}

}  // namespace

PanopticMap load_lmap(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  check_magic(in, "LMAP", path.string());
  const std::uint32_t cols = read_u32le(in, "lmap header");
  const std::uint32_t rows = read_u32le(in, "lmap header");
  if (cols == 0 || rows == 0) throw SizeError("zero-sized lmap: " + path.string());
  if (rows > (1u << 20) || cols > (1u << 20) ||
      static_cast<std::uint64_t>(rows) * cols > (1u << 28))
    throw SizeError("implausible lmap size: " + path.string());
  PanopticMap map(static_cast<int>(rows), static_cast<int>(cols));
  for (auto& id : map.ids) id = read_u32le(in, "lmap payload of " + path.string());
  if (in.get() != EOF) throw FormatError("trailing bytes in " + path.string());
  return map;
}

void save_lmap(const std::filesystem::path& path, const PanopticMap& map) {
  if (map.rows <= 0 || map.cols <= 0) throw SizeError("refusing to save empty lmap");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("LMAP", 4);
  out.put(1);
  write_u32le(out, static_cast<std::uint32_t>(map.cols));
  write_u32le(out, static_cast<std::uint32_t>(map.rows));
  for (const std::uint32_t id : map.ids) write_u32le(out, id);
  if (!out) throw IoError("write failed: " + path.string());
}

GridU8 load_evmk(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  check_magic(in, "EVMK", path.string());
  const std::uint32_t cols = read_u32le(in, "evmk header");
  const std::uint32_t rows = read_u32le(in, "evmk header");
  if (cols == 0 || rows == 0) throw SizeError("zero-sized evmk: " + path.string());
  if (rows > (1u << 20) || cols > (1u << 20))
    throw SizeError("implausible evmk size: " + path.string());
  GridU8 mask(static_cast<int>(rows), static_cast<int>(cols));
  const std::size_t row_bytes = (cols + 7) / 8;
  std::vector<char> row(row_bytes);
  for (std::uint32_t r = 0; r < rows; ++r) {
    in.read(row.data(), static_cast<std::streamsize>(row_bytes));
    if (static_cast<std::size_t>(in.gcount()) != row_bytes)
      throw FormatError("truncated evmk payload in " + path.string());
    for (std::uint32_t c = 0; c < cols; ++c)
      mask.at(static_cast<int>(r), static_cast<int>(c)) =
          (static_cast<unsigned char>(row[c / 8]) >> (c % 8)) & 1;
  }
  if (in.get() != EOF) throw FormatError("trailing bytes in " + path.string());
  return mask;
}

void save_evmk(const std::filesystem::path& path, const GridU8& mask) {
  if (mask.rows <= 0 || mask.cols <= 0) throw SizeError("refusing to save empty evmk");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("EVMK", 4);
  out.put(1);
  write_u32le(out, static_cast<std::uint32_t>(mask.cols));
  write_u32le(out, static_cast<std::uint32_t>(mask.rows));
  const std::size_t row_bytes = (static_cast<std::size_t>(mask.cols) + 7) / 8;
  std::vector<unsigned char> row(row_bytes);
  for (int r = 0; r < mask.rows; ++r) {
    std::fill(row.begin(), row.end(), 0);
    for (int c = 0; c < mask.cols; ++c)
      if (mask.at(r, c)) row[c / 8] |= static_cast<unsigned char>(1u << (c % 8));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row_bytes));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace iterseg
