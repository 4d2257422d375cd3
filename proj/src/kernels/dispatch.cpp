#include <atomic>
#include <stdexcept>
#include <string>
#include <vector>

#include "rflx/error.hpp"
#include "rflx/kernels.hpp"

namespace rflx::kernels {
namespace {

struct Table {
  Level level;
  double (*dot)(const double*, const double*, std::size_t) noexcept;
  double (*sum)(const double*, std::size_t) noexcept;
  void (*vec_mat)(const double*, std::size_t, const double*, std::size_t, std::size_t, double*,
                  double*) noexcept;
  void (*axpy)(double, const double*, double*, std::size_t) noexcept;
};

constexpr Table kScalar{Level::Scalar, &scalar::dot, &scalar::sum, &scalar::vec_mat, &scalar::axpy};
#ifdef RFLX_HAVE_AVX2
constexpr Table kAvx2{Level::Avx2, &avx2::dot, &avx2::sum, &avx2::vec_mat, &avx2::axpy};
#endif

const Table* detect() noexcept {
#ifdef RFLX_HAVE_AVX2
  if (__builtin_cpu_supports("avx2")) return &kAvx2;
#endif
  return &kScalar;
}

std::atomic<const Table*>& active() noexcept {
  static std::atomic<const Table*> table{detect()};
  return table;
}

void check_len(std::size_t a, std::size_t b) {
  if (a != b) {
    throw Error(Errc::DimensionMismatch, std::to_string(a) + " vs " + std::to_string(b));
  }
}

}  // namespace

std::string_view level_name(Level level) noexcept {
  return level == Level::Avx2 ? "avx2" : "scalar";
}

bool level_supported(Level level) noexcept {
  if (level == Level::Scalar) return true;
#ifdef RFLX_HAVE_AVX2
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

Level active_level() noexcept { return active().load(std::memory_order_relaxed)->level; }

void set_level(Level level) {
  if (!level_supported(level)) {
    throw std::invalid_argument("SIMD level not supported: " + std::string(level_name(level)));
  }
#ifdef RFLX_HAVE_AVX2
  active().store(level == Level::Avx2 ? &kAvx2 : &kScalar, std::memory_order_relaxed);
#else
  active().store(&kScalar, std::memory_order_relaxed);
#endif
}

Level parse_level(std::string_view name) {
  if (name == "scalar") return Level::Scalar;
  if (name == "avx2") return Level::Avx2;
  if (name == "auto") return detect()->level;
  throw std::invalid_argument("unknown SIMD level: " + std::string(name));
}

std::size_t vec_mat_scratch_size(std::size_t in, std::size_t out) noexcept {
  std::size_t depth = 1;
  for (std::size_t span = in; span > 1; span = (span + 1) / 2) ++depth;
  return depth * out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  check_len(a.size(), b.size());
  return active().load(std::memory_order_relaxed)->dot(a.data(), b.data(), a.size());
}

double sum(std::span<const double> values) {
  return active().load(std::memory_order_relaxed)->sum(values.data(), values.size());
}

void vec_mat(std::span<const double> x, std::span<const double> w, std::size_t stride,
             std::span<double> y) {
  const std::size_t in = x.size();
  const std::size_t out = y.size();
  if (in > 0 && (stride < out || w.size() < (in - 1) * stride + out)) {
    throw Error(Errc::DimensionMismatch, "vec_mat weight span too small");
  }
  thread_local std::vector<double> scratch;
  const std::size_t need = vec_mat_scratch_size(in, out);
  if (scratch.size() < need) scratch.resize(need);
  active().load(std::memory_order_relaxed)
      ->vec_mat(x.data(), in, w.data(), stride, out, y.data(), scratch.data());
}

void axpy(double a, std::span<const double> x, std::span<double> y) {
  check_len(x.size(), y.size());
  active().load(std::memory_order_relaxed)->axpy(a, x.data(), y.data(), x.size());
}

}  // namespace rflx::kernels
