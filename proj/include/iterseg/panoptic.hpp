#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "iterseg/grid.hpp"

namespace iterseg {

// Panoptic ids: semantic_id * 1000 + instance_index. Id 0 is void. Stuff and
// void carry instance index 0; thing pixels carry 1..999.
constexpr std::uint32_t kVoidId = 0;
constexpr std::uint32_t kLabelDivisor = 1000;
constexpr std::uint32_t kMaxInstanceIndex = kLabelDivisor - 1;

constexpr std::uint32_t semantic_of(std::uint32_t id) { return id / kLabelDivisor; }
constexpr std::uint32_t instance_of(std::uint32_t id) { return id % kLabelDivisor; }
constexpr std::uint32_t make_id(std::uint32_t semantic, std::uint32_t instance) {
  return semantic * kLabelDivisor + instance;
}

struct ClassDef {
  std::uint32_t id = 0;  // semantic id, nonzero
  std::string name;
  bool is_thing = false;

  friend bool operator==(const ClassDef&, const ClassDef&) = default;
};

// Ordered set of semantic classes. Class ids are nonzero and unique; index 0
// in the dense indexing is reserved for void.
class ClassTable {
 public:
  ClassTable() = default;
  explicit ClassTable(std::vector<ClassDef> classes);

  const std::vector<ClassDef>& classes() const { return classes_; }
  int count() const { return static_cast<int>(classes_.size()); }

  bool contains(std::uint32_t semantic_id) const;
  const ClassDef& by_id(std::uint32_t semantic_id) const;  // LookupError
  bool is_thing(std::uint32_t semantic_id) const { return by_id(semantic_id).is_thing; }

  // Dense index: void -> 0, classes -> 1..count() in table order.
  int index_of(std::uint32_t semantic_id) const;
  std::uint32_t id_at(int index) const;  // inverse of index_of for 1..count()

  friend bool operator==(const ClassTable&, const ClassTable&) = default;

 private:
  std::vector<ClassDef> classes_;
};

struct PanopticMap {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint32_t> ids;

  PanopticMap() = default;
  PanopticMap(int r, int c, std::uint32_t fill = kVoidId)
      : rows(r), cols(c), ids(static_cast<std::size_t>(r) * c, fill) {}

  std::uint32_t& at(int r, int c) { return ids[static_cast<std::size_t>(r) * cols + c]; }
  std::uint32_t at(int r, int c) const { return ids[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return ids.size(); }

  friend bool operator==(const PanopticMap&, const PanopticMap&) = default;
};

// Checks the id invariants against a class table: every semantic id is void
// or in the table, stuff and void pixels have instance 0, thing pixels have
// instance in 1..999. Throws FormatError or LookupError.
void validate_map(const PanopticMap& map, const ClassTable& classes);

PanopticMap mirrored(const PanopticMap& map);

// LMAP: "LMAP" | u8 version=1 | u32le width | u32le height | row-major
// u32le ids.
PanopticMap load_lmap(const std::filesystem::path& path);
void save_lmap(const std::filesystem::path& path, const PanopticMap& map);

// EVMK: "EVMK" | u8 version=1 | u32le width | u32le height | row-major bits,
// eight per byte, least significant bit first, each row padded to a whole
// byte. Grid values are 0 or 1.
GridU8 load_evmk(const std::filesystem::path& path);
void save_evmk(const std::filesystem::path& path, const GridU8& mask);

}  // namespace iterseg
