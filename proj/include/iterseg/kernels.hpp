#pragma once

#include <cstddef>

namespace iterseg::kern {

// Inner-loop kernels used by the network and the resamplers. Every op has a
// scalar reference implementation and may have SIMD variants; all variants of
// an op must produce bit-identical results, which the equivalence tests
// enforce with exact comparison. Two rules make that possible:
//
//  * No FP contraction. Translation units are built with -ffp-contract=off
//    and the SIMD code uses separate multiply and add intrinsics.
//
//  * Fixed accumulation order. Where an op reduces many addends into one
//    value, the order is part of the op's contract (documented per op below)
//    and every variant implements that order, the scalar one included.
//
// Conventions: all tensors are dense row-major doubles, channel-planar.
// Convolution inputs are zero-padded by the caller (one-pixel border), so a
// padded plane is (h+2) x (w+2) for an h x w output.

// 3x3 stride-1 correlation.
//   in : cin planes, each (h+2) x (w+2), zero-padded
//   wts: [cout][cin][3][3] row-major
//   bias: cout values, may be null
//   out: cout planes, each h x w
// Per output pixel the taps are enumerated t = (ci*3 + ky)*3 + kx in
// increasing order and split by parity into two running sums (bias seeds the
// even sum); the result is even_sum + odd_sum.
using Conv3x3FwdFn = void (*)(const double* in, int cin, const double* wts,
                              const double* bias, double* out, int cout,
                              int h, int w);

// Weight and bias gradients for the 3x3 stride-1 correlation above.
//   gout: cout planes of h x w
//   gw  : [cout][cin][3][3], overwritten
//   gb  : cout values, overwritten, may be null
// Each scalar result is reduced over the image in four lanes: pixels are
// visited row-major and pixel (y, x) accumulates into lane x mod 4; lanes
// combine as (l0 + l2) + (l1 + l3).
using Conv3x3GradWbFn = void (*)(const double* in, int cin, const double* gout,
                                 int cout, int h, int w, double* gw,
                                 double* gb);

// 1x1 correlation over n flattened pixels.
//   wts: [cout][cin]
// Taps are enumerated in increasing ci and split by parity into two running
// sums exactly as in Conv3x3FwdFn.
using Conv1x1FwdFn = void (*)(const double* in, int cin, const double* wts,
                              const double* bias, double* out, int cout,
                              std::size_t n);

// Weight and bias gradients for the 1x1 correlation. Four-lane reduction:
// flat pixel i accumulates into lane i mod 4; lanes combine as
// (l0 + l2) + (l1 + l3).
using Conv1x1GradWbFn = void (*)(const double* in, int cin, const double* gout,
                                 int cout, std::size_t n, double* gw,
                                 double* gb);

// y[i] = max(x[i], 0.0)
using ReluFwdFn = void (*)(const double* x, double* y, std::size_t n);

// gx[i] = y[i] > 0 ? gy[i] : 0, where y is the forward output.
using ReluBwdFn = void (*)(const double* y, const double* gy, double* gx,
                           std::size_t n);

// out[i] = a[i] + b[i]
using VaddFn = void (*)(const double* a, const double* b, double* out,
                        std::size_t n);

// y[i] += alpha * x[i]
using AxpyFn = void (*)(double alpha, const double* x, double* y,
                        std::size_t n);

// x[i] *= alpha
using VscaleFn = void (*)(double alpha, double* x, std::size_t n);

// Bilinear plane resize with half-pixel-aligned sample positions:
//   src = (dst + 0.5) * (in_size / out_size) - 0.5        (per axis)
//   i0 = floor(src), frac = src - i0, i1 = i0 + 1, indices clamped to range
//   top = v(y0,x0)*(1-fx) + v(y0,x1)*fx
//   bot = v(y1,x0)*(1-fx) + v(y1,x1)*fx
//   out = top*(1-fy) + bot*fy
using BilinearResizeFn = void (*)(const double* in, int ih, int iw,
                                  double* out, int oh, int ow);

struct Kernels {
  const char* name;
  Conv3x3FwdFn conv3x3_fwd;
  Conv3x3GradWbFn conv3x3_grad_wb;
  Conv1x1FwdFn conv1x1_fwd;
  Conv1x1GradWbFn conv1x1_grad_wb;
  ReluFwdFn relu_fwd;
  ReluBwdFn relu_bwd;
  VaddFn vadd;
  AxpyFn axpy;
  VscaleFn vscale;
  BilinearResizeFn bilinear_resize;
};

// Portable reference implementation. Always available.
const Kernels& scalar_kernels();

// AVX2 implementation, or null when unsupported by the build or the CPU.
const Kernels* avx2_kernels();

// The table used by the rest of the library. Picks the widest supported
// variant once per process; the environment variable ITERSEG_KERNELS
// (values: scalar, avx2) forces a specific one.
const Kernels& active_kernels();

}  // namespace iterseg::kern
