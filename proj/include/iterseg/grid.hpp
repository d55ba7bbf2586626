#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "iterseg/errors.hpp"

namespace iterseg {

// Dense row-major 2-D array.
template <typename T>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int r, int c, T fill = T{})
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {
    if (r < 0 || c < 0) throw SizeError("grid dimensions must be nonnegative");
  }

  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols + c];
  }

  T* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const T* row(int r) const {
    return data.data() + static_cast<std::size_t>(r) * cols;
  }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Grid& o) const {
    return rows == o.rows && cols == o.cols;
  }
  friend bool operator==(const Grid&, const Grid&) = default;
};

using GridD = Grid<double>;
using GridU8 = Grid<std::uint8_t>;
using GridU16 = Grid<std::uint16_t>;
using GridU32 = Grid<std::uint32_t>;

// Dense channel-planar 3-D array: `ch` row-major planes of rows x cols.
struct Planes {
  int ch = 0;
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Planes() = default;
  Planes(int c, int r, int w, double fill = 0.0)
      : ch(c), rows(r), cols(w),
        data(static_cast<std::size_t>(c) * r * w, fill) {
    if (c < 0 || r < 0 || w < 0)
      throw SizeError("plane dimensions must be nonnegative");
  }

  std::size_t plane_size() const {
    return static_cast<std::size_t>(rows) * cols;
  }
  double* plane(int c) { return data.data() + plane_size() * c; }
  const double* plane(int c) const { return data.data() + plane_size() * c; }

  double& at(int c, int r, int x) {
    return data[plane_size() * c + static_cast<std::size_t>(r) * cols + x];
  }
  double at(int c, int r, int x) const {
    return data[plane_size() * c + static_cast<std::size_t>(r) * cols + x];
  }

  bool same_shape(const Planes& o) const {
    return ch == o.ch && rows == o.rows && cols == o.cols;
  }
  friend bool operator==(const Planes&, const Planes&) = default;
};

}  // namespace iterseg
