// AVX2 kernel variants. Compiled with -mavx2 only in this translation unit;
// callers go through the dispatch table. Each op follows the accumulation
// contract documented in kernels.hpp, so results match the scalar reference
// exactly (equivalence is asserted with ==, which treats -0.0 and +0.0 as
// equal; magnitudes never differ).

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "iterseg/kernels.hpp"

namespace iterseg::kern {
namespace {

inline __m256i tail_mask(int count) {
  alignas(32) static const long long bits[8] = {-1, -1, -1, -1, 0, 0, 0, 0};
  return _mm256_loadu_si256(
      reinterpret_cast<const __m256i*>(bits + 4 - count));
}

void conv3x3_fwd_avx2(const double* in, int cin, const double* wts,
                      const double* bias, double* out, int cout, int h,
                      int w) {
  const std::size_t in_plane = static_cast<std::size_t>(h + 2) * (w + 2);
  const std::size_t out_plane = static_cast<std::size_t>(h) * w;
  const int wvec = w & ~3;
  for (int co = 0; co < cout; ++co) {
    double* op = out + out_plane * co;
    const double* wco = wts + static_cast<std::size_t>(co) * cin * 9;
    const double b = bias ? bias[co] : 0.0;
    const __m256d bv = _mm256_set1_pd(b);
    for (int y = 0; y < h; ++y) {
      double* orow = op + static_cast<std::size_t>(y) * w;
      for (int x = 0; x < wvec; x += 4) {
        __m256d even = bv;
        __m256d odd = _mm256_setzero_pd();
        int t = 0;
        for (int ci = 0; ci < cin; ++ci) {
          const double* ip = in + in_plane * ci;
          const double* wk = wco + ci * 9;
          for (int ky = 0; ky < 3; ++ky) {
            const double* row =
                ip + static_cast<std::size_t>(y + ky) * (w + 2) + x;
            for (int kx = 0; kx < 3; ++kx, ++t) {
              const __m256d p = _mm256_mul_pd(_mm256_set1_pd(wk[ky * 3 + kx]),
                                              _mm256_loadu_pd(row + kx));
              if (t & 1)
                odd = _mm256_add_pd(odd, p);
              else
                even = _mm256_add_pd(even, p);
            }
          }
        }
        _mm256_storeu_pd(orow + x, _mm256_add_pd(even, odd));
      }
      for (int x = wvec; x < w; ++x) {
        double even = b;
        double odd = 0.0;
        int t = 0;
        for (int ci = 0; ci < cin; ++ci) {
          const double* ip = in + in_plane * ci;
          const double* wk = wco + ci * 9;
          for (int ky = 0; ky < 3; ++ky) {
            const double* row =
                ip + static_cast<std::size_t>(y + ky) * (w + 2) + x;
            for (int kx = 0; kx < 3; ++kx, ++t) {
              const double p = wk[ky * 3 + kx] * row[kx];
              if (t & 1)
                odd += p;
              else
                even += p;
            }
          }
        }
        orow[x] = even + odd;
      }
    }
  }
}

void conv3x3_grad_wb_avx2(const double* in, int cin, const double* gout,
                          int cout, int h, int w, double* gw, double* gb) {
  const std::size_t in_plane = static_cast<std::size_t>(h + 2) * (w + 2);
  const std::size_t out_plane = static_cast<std::size_t>(h) * w;
  const int wvec = w & ~3;
  const int tail = w - wvec;
  const __m256i tmask = tail_mask(tail);
  for (int co = 0; co < cout; ++co) {
    const double* gp = gout + out_plane * co;
    __m256d bacc = _mm256_setzero_pd();
    for (int ci = 0; ci < cin; ++ci) {
      const double* ip = in + in_plane * ci;
      __m256d acc[9];
      for (auto& a : acc) a = _mm256_setzero_pd();
      for (int y = 0; y < h; ++y) {
        const double* grow = gp + static_cast<std::size_t>(y) * w;
        const double* irow[3] = {
            ip + static_cast<std::size_t>(y) * (w + 2),
            ip + static_cast<std::size_t>(y + 1) * (w + 2),
            ip + static_cast<std::size_t>(y + 2) * (w + 2),
        };
        for (int x = 0; x < wvec; x += 4) {
          const __m256d g = _mm256_loadu_pd(grow + x);
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
              acc[ky * 3 + kx] = _mm256_add_pd(
                  acc[ky * 3 + kx],
                  _mm256_mul_pd(g, _mm256_loadu_pd(irow[ky] + x + kx)));
          if (ci == 0) bacc = _mm256_add_pd(bacc, g);
        }
        if (tail) {
          const __m256d g = _mm256_maskload_pd(grow + wvec, tmask);
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
              acc[ky * 3 + kx] = _mm256_add_pd(
                  acc[ky * 3 + kx],
                  _mm256_mul_pd(g,
                                _mm256_maskload_pd(irow[ky] + wvec + kx,
                                                   tmask)));
          if (ci == 0) bacc = _mm256_add_pd(bacc, g);
        }
      }
      double* wk = gw + (static_cast<std::size_t>(co) * cin + ci) * 9;
      for (int t = 0; t < 9; ++t) {
        alignas(32) double l[4];
        _mm256_store_pd(l, acc[t]);
        wk[t] = (l[0] + l[2]) + (l[1] + l[3]);
      }
    }
    if (gb) {
      alignas(32) double l[4];
      _mm256_store_pd(l, bacc);
      gb[co] = (l[0] + l[2]) + (l[1] + l[3]);
    }
  }
}

void conv1x1_fwd_avx2(const double* in, int cin, const double* wts,
                      const double* bias, double* out, int cout,
                      std::size_t n) {
  const std::size_t nvec = n & ~std::size_t{3};
  for (int co = 0; co < cout; ++co) {
    double* op = out + n * co;
    const double* wco = wts + static_cast<std::size_t>(co) * cin;
    const double b = bias ? bias[co] : 0.0;
    const __m256d bv = _mm256_set1_pd(b);
    for (std::size_t i = 0; i < nvec; i += 4) {
      __m256d even = bv;
      __m256d odd = _mm256_setzero_pd();
      for (int ci = 0; ci < cin; ++ci) {
        const __m256d p = _mm256_mul_pd(_mm256_set1_pd(wco[ci]),
                                        _mm256_loadu_pd(in + n * ci + i));
        if (ci & 1)
          odd = _mm256_add_pd(odd, p);
        else
          even = _mm256_add_pd(even, p);
      }
      _mm256_storeu_pd(op + i, _mm256_add_pd(even, odd));
    }
    for (std::size_t i = nvec; i < n; ++i) {
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

void conv1x1_grad_wb_avx2(const double* in, int cin, const double* gout,
                          int cout, std::size_t n, double* gw, double* gb) {
  const std::size_t nvec = n & ~std::size_t{3};
  for (int co = 0; co < cout; ++co) {
    const double* gp = gout + n * co;
    for (int ci = 0; ci < cin; ++ci) {
      const double* ip = in + n * ci;
      __m256d acc = _mm256_setzero_pd();
      for (std::size_t i = 0; i < nvec; i += 4)
        acc = _mm256_add_pd(
            acc, _mm256_mul_pd(_mm256_loadu_pd(gp + i),
                               _mm256_loadu_pd(ip + i)));
      alignas(32) double l[4];
      _mm256_store_pd(l, acc);
      for (std::size_t i = nvec; i < n; ++i) l[i & 3] += gp[i] * ip[i];
      gw[static_cast<std::size_t>(co) * cin + ci] =
          (l[0] + l[2]) + (l[1] + l[3]);
    }
    if (gb) {
      __m256d acc = _mm256_setzero_pd();
      for (std::size_t i = 0; i < nvec; i += 4)
        acc = _mm256_add_pd(acc, _mm256_loadu_pd(gp + i));
      alignas(32) double l[4];
      _mm256_store_pd(l, acc);
      for (std::size_t i = nvec; i < n; ++i) l[i & 3] += gp[i];
      gb[co] = (l[0] + l[2]) + (l[1] + l[3]);
    }
  }
}

void relu_fwd_avx2(const double* x, double* y, std::size_t n) {
  const std::size_t nvec = n & ~std::size_t{3};
  const __m256d zero = _mm256_setzero_pd();
  for (std::size_t i = 0; i < nvec; i += 4)
    _mm256_storeu_pd(y + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
  for (std::size_t i = nvec; i < n; ++i) y[i] = std::max(x[i], 0.0);
}

void relu_bwd_avx2(const double* y, const double* gy, double* gx,
                   std::size_t n) {
  const std::size_t nvec = n & ~std::size_t{3};
  const __m256d zero = _mm256_setzero_pd();
  for (std::size_t i = 0; i < nvec; i += 4) {
    const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(y + i), zero, _CMP_GT_OQ);
    _mm256_storeu_pd(gx + i, _mm256_and_pd(mask, _mm256_loadu_pd(gy + i)));
  }
  for (std::size_t i = nvec; i < n; ++i) gx[i] = y[i] > 0.0 ? gy[i] : 0.0;
}

void vadd_avx2(const double* a, const double* b, double* out, std::size_t n) {
  const std::size_t nvec = n & ~std::size_t{3};
  for (std::size_t i = 0; i < nvec; i += 4)
    _mm256_storeu_pd(out + i,
                     _mm256_add_pd(_mm256_loadu_pd(a + i),
                                   _mm256_loadu_pd(b + i)));
  for (std::size_t i = nvec; i < n; ++i) out[i] = a[i] + b[i];
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const std::size_t nvec = n & ~std::size_t{3};
  const __m256d av = _mm256_set1_pd(alpha);
  for (std::size_t i = 0; i < nvec; i += 4)
    _mm256_storeu_pd(y + i,
                     _mm256_add_pd(_mm256_loadu_pd(y + i),
                                   _mm256_mul_pd(av, _mm256_loadu_pd(x + i))));
  for (std::size_t i = nvec; i < n; ++i) y[i] += alpha * x[i];
}

void vscale_avx2(double alpha, double* x, std::size_t n) {
  const std::size_t nvec = n & ~std::size_t{3};
  const __m256d av = _mm256_set1_pd(alpha);
  for (std::size_t i = 0; i < nvec; i += 4)
    _mm256_storeu_pd(x + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), av));
  for (std::size_t i = nvec; i < n; ++i) x[i] *= alpha;
}

void bilinear_resize_avx2(const double* in, int ih, int iw, double* out,
                          int oh, int ow) {
  const double ry = static_cast<double>(ih) / oh;
  const double rx = static_cast<double>(iw) / ow;
  const int wvec = ow & ~3;
  const __m256d half = _mm256_set1_pd(0.5);
  const __m256d rxv = _mm256_set1_pd(rx);
  const __m256d one = _mm256_set1_pd(1.0);
  for (int y = 0; y < oh; ++y) {
    const double sy = (y + 0.5) * ry - 0.5;
    const double fy0 = std::floor(sy);
    const double wy = sy - fy0;
    const int y0 = std::clamp(static_cast<int>(fy0), 0, ih - 1);
    const int y1 = std::clamp(static_cast<int>(fy0) + 1, 0, ih - 1);
    const double* r0 = in + static_cast<std::size_t>(y0) * iw;
    const double* r1 = in + static_cast<std::size_t>(y1) * iw;
    double* orow = out + static_cast<std::size_t>(y) * ow;
    const __m256d wyv = _mm256_set1_pd(wy);
    const __m256d wy1v = _mm256_sub_pd(one, wyv);
    for (int x = 0; x < wvec; x += 4) {
      const __m256d xs = _mm256_set_pd(x + 3.0, x + 2.0, x + 1.0, x + 0.0);
      const __m256d sx =
          _mm256_sub_pd(_mm256_mul_pd(_mm256_add_pd(xs, half), rxv), half);
      const __m256d fx0 = _mm256_floor_pd(sx);
      const __m256d wx = _mm256_sub_pd(sx, fx0);
      const __m256d wx1 = _mm256_sub_pd(one, wx);
      alignas(32) double fx0s[4];
      _mm256_store_pd(fx0s, fx0);
      alignas(32) double a0[4], a1[4], b0[4], b1[4];
      for (int l = 0; l < 4; ++l) {
        const int x0 = std::clamp(static_cast<int>(fx0s[l]), 0, iw - 1);
        const int x1 = std::clamp(static_cast<int>(fx0s[l]) + 1, 0, iw - 1);
        a0[l] = r0[x0];
        a1[l] = r0[x1];
        b0[l] = r1[x0];
        b1[l] = r1[x1];
      }
      const __m256d top =
          _mm256_add_pd(_mm256_mul_pd(_mm256_load_pd(a0), wx1),
                        _mm256_mul_pd(_mm256_load_pd(a1), wx));
      const __m256d bot =
          _mm256_add_pd(_mm256_mul_pd(_mm256_load_pd(b0), wx1),
                        _mm256_mul_pd(_mm256_load_pd(b1), wx));
      _mm256_storeu_pd(orow + x, _mm256_add_pd(_mm256_mul_pd(top, wy1v),
                                               _mm256_mul_pd(bot, wyv)));
    }
    for (int x = wvec; x < ow; ++x) {
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

const Kernels* avx2_kernels() {
  static const Kernels k = {
      "avx2",
      conv3x3_fwd_avx2,
      conv3x3_grad_wb_avx2,
      conv1x1_fwd_avx2,
      conv1x1_grad_wb_avx2,
      relu_fwd_avx2,
      relu_bwd_avx2,
      vadd_avx2,
      axpy_avx2,
      vscale_avx2,
      bilinear_resize_avx2,
  };
  return &k;
}

}  // namespace iterseg::kern

#else

#include "iterseg/kernels.hpp"

namespace iterseg::kern {
const Kernels* avx2_kernels() { return nullptr; }
}  // namespace iterseg::kern

#endif
