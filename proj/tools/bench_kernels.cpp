// Micro-benchmark for the kernel variants. Not part of the test suite; used
// to size the bundled benchmark configs.

#include <chrono>
#include <cstdio>
#include <vector>

#include "iterseg/kernels.hpp"
#include "iterseg/rng.hpp"

using namespace iterseg::kern;

namespace {

double bench_conv(const Kernels& k, int cin, int cout, int h, int w,
                  int reps) {
  iterseg::Rng rng(1);
  std::vector<double> in(static_cast<std::size_t>(cin) * (h + 2) * (w + 2));
  std::vector<double> wts(static_cast<std::size_t>(cout) * cin * 9);
  std::vector<double> bias(cout);
  std::vector<double> out(static_cast<std::size_t>(cout) * h * w);
  for (auto& x : in) x = rng.uniform();
  for (auto& x : wts) x = rng.uniform(-0.1, 0.1);
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r)
    k.conv3x3_fwd(in.data(), cin, wts.data(), bias.data(), out.data(), cout,
                  h, w);
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / reps;
}

double bench_grad(const Kernels& k, int cin, int cout, int h, int w,
                  int reps) {
  iterseg::Rng rng(2);
  std::vector<double> in(static_cast<std::size_t>(cin) * (h + 2) * (w + 2));
  std::vector<double> gout(static_cast<std::size_t>(cout) * h * w);
  std::vector<double> gw(static_cast<std::size_t>(cout) * cin * 9);
  std::vector<double> gb(cout);
  for (auto& x : in) x = rng.uniform();
  for (auto& x : gout) x = rng.uniform(-1, 1);
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r)
    k.conv3x3_grad_wb(in.data(), cin, gout.data(), cout, h, w, gw.data(),
                      gb.data());
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / reps;
}

void report(const Kernels& k) {
  struct Case {
    int cin, cout, h, w;
  };
  const Case cases[] = {{8, 8, 64, 96}, {16, 16, 32, 48}, {32, 32, 16, 24},
                        {8, 16, 32, 48}, {3, 8, 64, 96}};
  std::printf("%s:\n", k.name);
  for (const auto& c : cases) {
    const double tf = bench_conv(k, c.cin, c.cout, c.h, c.w, 200);
    const double tg = bench_grad(k, c.cin, c.cout, c.h, c.w, 200);
    const double macs = 9.0 * c.cin * c.cout * c.h * c.w;
    std::printf(
        "  conv3x3 %2dx%2d @%3dx%3d  fwd %8.1f us (%5.2f GMAC/s)  gradw %8.1f us\n",
        c.cin, c.cout, c.h, c.w, tf * 1e6, macs / tf * 1e-9, tg * 1e6);
  }
}

}  // namespace

int main() {
  report(scalar_kernels());
  if (const Kernels* k = avx2_kernels()) report(*k);
  std::printf("active: %s\n", active_kernels().name);
  return 0;
}
