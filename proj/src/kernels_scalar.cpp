#include <algorithm>
#include <cmath>
#include <cstddef>

#include "iterseg/kernels.hpp"

namespace iterseg::kern {
namespace {

void conv3x3_fwd_scalar(const double* in, int cin, const double* wts,
                        const double* bias, double* out, int cout, int h,
                        int w) {
  const std::size_t in_plane = static_cast<std::size_t>(h + 2) * (w + 2);
  const std::size_t out_plane = static_cast<std::size_t>(h) * w;
  for (int co = 0; co < cout; ++co) {
    double* op = out + out_plane * co;
    const double* wco = wts + static_cast<std::size_t>(co) * cin * 9;
    const double b = bias ? bias[co] : 0.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double even = b;
        double odd = 0.0;
        int t = 0;
        for (int ci = 0; ci < cin; ++ci) {
          const double* ip = in + in_plane * ci;
          const double* wk = wco + ci * 9;
          for (int ky = 0; ky < 3; ++ky) {
            const double* row = ip + static_cast<std::size_t>(y + ky) * (w + 2) + x;
            for (int kx = 0; kx < 3; ++kx, ++t) {
              const double p = wk[ky * 3 + kx] * row[kx];
              if (t & 1)
                odd += p;
              else
                even += p;
            }
          }
        }
        op[static_cast<std::size_t>(y) * w + x] = even + odd;
      }
    }
  }
}

void conv3x3_grad_wb_scalar(const double* in, int cin, const double* gout,
                            int cout, int h, int w, double* gw, double* gb) {
  const std::size_t in_plane = static_cast<std::size_t>(h + 2) * (w + 2);
  const std::size_t out_plane = static_cast<std::size_t>(h) * w;
  for (int co = 0; co < cout; ++co) {
    const double* gp = gout + out_plane * co;
    double blane[4] = {0, 0, 0, 0};
    for (int ci = 0; ci < cin; ++ci) {
      const double* ip = in + in_plane * ci;
      double lanes[9][4] = {};
      for (int y = 0; y < h; ++y) {
        const double* grow = gp + static_cast<std::size_t>(y) * w;
        const double* irow[3] = {
            ip + static_cast<std::size_t>(y) * (w + 2),
            ip + static_cast<std::size_t>(y + 1) * (w + 2),
            ip + static_cast<std::size_t>(y + 2) * (w + 2),
        };
        for (int x = 0; x < w; ++x) {
          const int lane = x & 3;
          const double g = grow[x];
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
              lanes[ky * 3 + kx][lane] += g * irow[ky][x + kx];
          if (ci == 0) blane[lane] += g;
        }
      }
      double* wk = gw + (static_cast<std::size_t>(co) * cin + ci) * 9;
      for (int t = 0; t < 9; ++t)
        wk[t] = (lanes[t][0] + lanes[t][2]) + (lanes[t][1] + lanes[t][3]);
    }
    if (gb) gb[co] = (blane[0] + blane[2]) + (blane[1] + blane[3]);
  }
}

void conv1x1_fwd_scalar(const double* in, int cin, const double* wts,
                        const double* bias, double* out, int cout,
                        std::size_t n) {
  for (int co = 0; co < cout; ++co) {
    double* op = out + n * co;
    const double* wco = wts + static_cast<std::size_t>(co) * cin;
    const double b = bias ? bias[co] : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double even = b;
      double odd = 0.0;
      for (int ci = 0; ci < cin; ++ci) {
        const double p = wco[ci] * in[n * ci + i];
        if (ci & 1)
          odd += p;
        else
          even += p;
      }
      op[i] = even + odd;
    }
  }
}

void conv1x1_grad_wb_scalar(const double* in, int cin, const double* gout,
                            int cout, std::size_t n, double* gw, double* gb) {
  for (int co = 0; co < cout; ++co) {
    const double* gp = gout + n * co;
    for (int ci = 0; ci < cin; ++ci) {
      const double* ip = in + n * ci;
      double lanes[4] = {0, 0, 0, 0};
      for (std::size_t i = 0; i < n; ++i) lanes[i & 3] += gp[i] * ip[i];
      gw[static_cast<std::size_t>(co) * cin + ci] =
          (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]);
    }
    if (gb) {
      double lanes[4] = {0, 0, 0, 0};
      for (std::size_t i = 0; i < n; ++i) lanes[i & 3] += gp[i];
      gb[co] = (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]);
    }
  }
}

void relu_fwd_scalar(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::max(x[i], 0.0);
}

void relu_bwd_scalar(const double* y, const double* gy, double* gx,
                     std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) gx[i] = y[i] > 0.0 ? gy[i] : 0.0;
}

void vadd_scalar(const double* a, const double* b, double* out,
                 std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void vscale_scalar(double alpha, double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void bilinear_resize_scalar(const double* in, int ih, int iw, double* out,
                            int oh, int ow) {
  const double ry = static_cast<double>(ih) / oh;
  const double rx = static_cast<double>(iw) / ow;
  for (int y = 0; y < oh; ++y) {
    const double sy = (y + 0.5) * ry - 0.5;
    const double fy0 = std::floor(sy);
    const double wy = sy - fy0;
    const int y0 = std::clamp(static_cast<int>(fy0), 0, ih - 1);
    const int y1 = std::clamp(static_cast<int>(fy0) + 1, 0, ih - 1);
    const double* r0 = in + static_cast<std::size_t>(y0) * iw;
    const double* r1 = in + static_cast<std::size_t>(y1) * iw;
    double* orow = out + static_cast<std::size_t>(y) * ow;
    for (int x = 0; x < ow; ++x) {
      const double sx = (x + 0.5) * rx - 0.5;
      const double fx0 = std::floor(sx);
      const double wx = sx - fx0;
      const int x0 = std::clamp(static_cast<int>(fx0), 0, iw - 1);
      const int x1 = std::clamp(static_cast<int>(fx0) + 1, 0, iw - 1);
      const double top = r0[x0] * (1.0 - wx) + r0[x1] * wx;
      const double bot = r1[x0] * (1.0 - wx) + r1[x1] * wx;
      orow[x] = top * (1.0 - wy) + bot * wy;
    }
  }
}

}  // namespace

const Kernels& scalar_kernels() {
  static const Kernels k = {
      "scalar",
      conv3x3_fwd_scalar,
      conv3x3_grad_wb_scalar,
      conv1x1_fwd_scalar,
      conv1x1_grad_wb_scalar,
      relu_fwd_scalar,
      relu_bwd_scalar,
      vadd_scalar,
      axpy_scalar,
      vscale_scalar,
      bilinear_resize_scalar,
  };
  return k;
}

}  // namespace iterseg::kern
