#include <immintrin.h>

#include "rflx/kernels.hpp"

namespace rflx::kernels::avx2 {
namespace {

inline __m256d load_padded(const double* p, std::size_t idx, std::size_t n) noexcept {
  if (idx + 4 <= n) return _mm256_loadu_pd(p + idx);
  alignas(32) double tmp[4] = {0.0, 0.0, 0.0, 0.0};
  for (std::size_t j = 0; idx + j < n; ++j) tmp[j] = p[idx + j];
  return _mm256_load_pd(tmp);
}

__m256d dot_tree(const double* a, const double* b, std::size_t n, std::size_t lo,
                 std::size_t hi) noexcept {
  if (hi - lo == 1) {
    return _mm256_mul_pd(load_padded(a, 4 * lo, n), load_padded(b, 4 * lo, n));
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  return _mm256_add_pd(dot_tree(a, b, n, lo, mid), dot_tree(a, b, n, mid, hi));
}

__m256d sum_tree(const double* v, std::size_t n, std::size_t lo, std::size_t hi) noexcept {
  if (hi - lo == 1) return load_padded(v, 4 * lo, n);
  const std::size_t mid = lo + (hi - lo) / 2;
  return _mm256_add_pd(sum_tree(v, n, lo, mid), sum_tree(v, n, mid, hi));
}

inline double fold_lanes(__m256d acc) noexcept {
  alignas(32) double l[4];
  _mm256_store_pd(l, acc);
  return (l[0] + l[1]) + (l[2] + l[3]);
}

void vec_mat_tree(const double* x, std::size_t lo, std::size_t hi, const double* w,
                  std::size_t stride, std::size_t out, double* y, double* scratch) noexcept {
  if (hi - lo == 1) {
    const double xi = x[lo];
    const __m256d xv = _mm256_set1_pd(xi);
    const double* row = w + lo * stride;
    std::size_t j = 0;
    for (; j + 4 <= out; j += 4) _mm256_storeu_pd(y + j, _mm256_mul_pd(xv, _mm256_loadu_pd(row + j)));
    for (; j < out; ++j) y[j] = xi * row[j];
    return;
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  vec_mat_tree(x, lo, mid, w, stride, out, y, scratch + out);
  vec_mat_tree(x, mid, hi, w, stride, out, scratch, scratch + out);
  std::size_t j = 0;
  for (; j + 4 <= out; j += 4) {
    _mm256_storeu_pd(y + j, _mm256_add_pd(_mm256_loadu_pd(y + j), _mm256_loadu_pd(scratch + j)));
  }
  for (; j < out; ++j) y[j] = y[j] + scratch[j];
}

}  // namespace

double dot(const double* a, const double* b, std::size_t n) noexcept {
  if (n == 0) return 0.0;
  return fold_lanes(dot_tree(a, b, n, 0, (n + 3) / 4));
}

double sum(const double* v, std::size_t n) noexcept {
  if (n == 0) return 0.0;
  return fold_lanes(sum_tree(v, n, 0, (n + 3) / 4));
}

void vec_mat(const double* x, std::size_t in, const double* w, std::size_t stride,
             std::size_t out, double* y, double* scratch) noexcept {
  if (in == 0) {
    for (std::size_t j = 0; j < out; ++j) y[j] = 0.0;
    return;
  }
  vec_mat_tree(x, 0, in, w, stride, out, y, scratch);
}

void axpy(double a, const double* x, double* y, std::size_t n) noexcept {
  const __m256d av = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(av, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] = y[i] + a * x[i];
}

}  // namespace rflx::kernels::avx2
