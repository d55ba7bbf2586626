#include <cstdlib>
#include <string_view>

#include "iterseg/errors.hpp"
#include "iterseg/kernels.hpp"

namespace iterseg::kern {

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

const Kernels& select() {
  const char* forced = std::getenv("ITERSEG_KERNELS");
  if (forced) {
    const std::string_view name(forced);
    if (name == "scalar") return scalar_kernels();
    if (name == "avx2") {
      const Kernels* k = avx2_kernels();
      if (!k || !cpu_has_avx2())
        throw ConfigError("ITERSEG_KERNELS=avx2 but avx2 is unavailable");
      return *k;
    }
    throw ConfigError("unknown ITERSEG_KERNELS value: " + std::string(name));
  }
  if (const Kernels* k = avx2_kernels(); k && cpu_has_avx2()) return *k;
  return scalar_kernels();
}

}  // namespace

const Kernels& active_kernels() {
  static const Kernels& k = select();
  return k;
}

}  // namespace iterseg::kern
