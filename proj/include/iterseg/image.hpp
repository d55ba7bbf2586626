#pragma once

#include <filesystem>

#include "iterseg/grid.hpp"

namespace iterseg {

// RGB image: three channel planes, values in [0, 1].
struct Image {
  Planes px;

  Image() = default;
  Image(int rows, int cols) : px(3, rows, cols) {}

  int rows() const { return px.rows; }
  int cols() const { return px.cols; }
  friend bool operator==(const Image&, const Image&) = default;
};

// Binary PPM (P6, maxval 255). Loading maps bytes to v/255; saving rounds
// clamp(v, 0, 1) * 255 to nearest.
Image load_ppm(const std::filesystem::path& path);
void save_ppm(const std::filesystem::path& path, const Image& img);

// Bilinear resampling with half-pixel-aligned sample positions (the formula
// is pinned in kernels.hpp and the README appendix).
GridD resize_bilinear(const GridD& in, int rows, int cols);
Planes resize_bilinear(const Planes& in, int rows, int cols);
Image resize_bilinear(const Image& in, int rows, int cols);

// Adjoint of resize_bilinear: scatters each output gradient back to the up to
// four source pixels it sampled, with the same weights.
GridD resize_bilinear_adjoint(const GridD& gout, int in_rows, int in_cols);

// Nearest-neighbor resampling for id maps: src = min(in_size - 1,
// floor((dst + 0.5) * in_size / out_size)).
GridU32 resize_nearest(const GridU32& in, int rows, int cols);

// Horizontal mirror: out(r, c) = in(r, w - 1 - c).
template <typename T>
Grid<T> mirrored(const Grid<T>& in) {
  Grid<T> out(in.rows, in.cols);
  for (int r = 0; r < in.rows; ++r)
    for (int c = 0; c < in.cols; ++c) out.at(r, c) = in.at(r, in.cols - 1 - c);
  return out;
}

Planes mirrored(const Planes& in);
Image mirrored(const Image& in);

}  // namespace iterseg
