#include "iterseg/image.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "iterseg/errors.hpp"
#include "iterseg/kernels.hpp"

namespace iterseg {

namespace {

// Reads one PPM header token, skipping whitespace and '#' comments.
std::string ppm_token(std::istream& in) {
  std::string tok;
  for (;;) {
    const int c = in.get();
    if (c == EOF) {
      if (tok.empty()) throw FormatError("truncated ppm header");
      return tok;
    }
    if (c == '#') {
      while (in.good() && in.get() != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
}

int ppm_int(std::istream& in) {
  const std::string tok = ppm_token(in);
  try {
    std::size_t pos = 0;
    const int v = std::stoi(tok, &pos);
    if (pos != tok.size()) throw FormatError("bad ppm integer: " + tok);
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("bad ppm integer: " + tok);
  }
}

}  // namespace

Image load_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  if (ppm_token(in) != "P6") throw FormatError("not a P6 ppm: " + path.string());
  const int cols = ppm_int(in);
  const int rows = ppm_int(in);
  const int maxval = ppm_int(in);
  if (cols <= 0 || rows <= 0) throw SizeError("bad ppm size in " + path.string());
  if (maxval != 255) throw FormatError("unsupported ppm maxval in " + path.string());
  // The header ends with exactly one whitespace byte, already consumed by
  // ppm_token's terminating read.
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(rows) * cols * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw FormatError("truncated ppm payload in " + path.string());
  Image img(rows, cols);
  const std::size_t n = static_cast<std::size_t>(rows) * cols;
  for (std::size_t i = 0; i < n; ++i)
    for (int ch = 0; ch < 3; ++ch)
      img.px.data[ch * n + i] = raw[i * 3 + ch] / 255.0;
  return img;
}

void save_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << img.cols() << ' ' << img.rows() << "\n255\n";
  const std::size_t n = static_cast<std::size_t>(img.rows()) * img.cols();
  std::vector<std::uint8_t> raw(n * 3);
  for (std::size_t i = 0; i < n; ++i)
    for (int ch = 0; ch < 3; ++ch) {
      const double v = std::clamp(img.px.data[ch * n + i], 0.0, 1.0);
      raw[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

GridD resize_bilinear(const GridD& in, int rows, int cols) {
  if (in.rows <= 0 || in.cols <= 0) throw SizeError("resize of empty grid");
  if (rows <= 0 || cols <= 0) throw SizeError("resize to empty grid");
  GridD out(rows, cols);
  kern::active_kernels().bilinear_resize(in.data.data(), in.rows, in.cols,
                                         out.data.data(), rows, cols);
  return out;
}

Planes resize_bilinear(const Planes& in, int rows, int cols) {
  if (in.rows <= 0 || in.cols <= 0) throw SizeError("resize of empty planes");
  if (rows <= 0 || cols <= 0) throw SizeError("resize to empty planes");
  Planes out(in.ch, rows, cols);
  for (int c = 0; c < in.ch; ++c)
    kern::active_kernels().bilinear_resize(in.plane(c), in.rows, in.cols,
                                           out.plane(c), rows, cols);
  return out;
}

Image resize_bilinear(const Image& in, int rows, int cols) {
  Image out;
  out.px = resize_bilinear(in.px, rows, cols);
  return out;
}

GridD resize_bilinear_adjoint(const GridD& gout, int in_rows, int in_cols) {
  GridD gin(in_rows, in_cols, 0.0);
  const double ry = static_cast<double>(in_rows) / gout.rows;
  const double rx = static_cast<double>(in_cols) / gout.cols;
  for (int y = 0; y < gout.rows; ++y) {
    const double sy = (y + 0.5) * ry - 0.5;
    const double fy0 = std::floor(sy);
    const double wy = sy - fy0;
    const int y0 = std::clamp(static_cast<int>(fy0), 0, in_rows - 1);
    const int y1 = std::clamp(static_cast<int>(fy0) + 1, 0, in_rows - 1);
    for (int x = 0; x < gout.cols; ++x) {
      const double sx = (x + 0.5) * rx - 0.5;
      const double fx0 = std::floor(sx);
      const double wx = sx - fx0;
      const int x0 = std::clamp(static_cast<int>(fx0), 0, in_cols - 1);
      const int x1 = std::clamp(static_cast<int>(fx0) + 1, 0, in_cols - 1);
      const double g = gout.at(y, x);
      gin.at(y0, x0) += g * ((1.0 - wx) * (1.0 - wy));
      gin.at(y0, x1) += g * (wx * (1.0 - wy));
      gin.at(y1, x0) += g * ((1.0 - wx) * wy);
      gin.at(y1, x1) += g * (wx * wy);
    }
  }
  return gin;
}

GridU32 resize_nearest(const GridU32& in, int rows, int cols) {
  if (in.rows <= 0 || in.cols <= 0) throw SizeError("resize of empty grid");
  if (rows <= 0 || cols <= 0) throw SizeError("resize to empty grid");
  GridU32 out(rows, cols);
  for (int y = 0; y < rows; ++y) {
    const int sy = std::min(in.rows - 1,
                            static_cast<int>((y + 0.5) * in.rows / rows));
    for (int x = 0; x < cols; ++x) {
      const int sx = std::min(in.cols - 1,
                              static_cast<int>((x + 0.5) * in.cols / cols));
      out.at(y, x) = in.at(sy, sx);
    }
  }
  return out;
}

Planes mirrored(const Planes& in) {
  Planes out(in.ch, in.rows, in.cols);
  for (int c = 0; c < in.ch; ++c)
    for (int r = 0; r < in.rows; ++r) {
      const double* src = in.plane(c) + static_cast<std::size_t>(r) * in.cols;
      double* dst = out.plane(c) + static_cast<std::size_t>(r) * in.cols;
      for (int x = 0; x < in.cols; ++x) dst[x] = src[in.cols - 1 - x];
    }
  return out;
}

Image mirrored(const Image& in) {
  Image out;
  out.px = mirrored(in.px);
  return out;
}

}  // namespace iterseg
