#include "rflx/kernels.hpp"

namespace rflx::kernels::scalar {
namespace {

struct Lanes {
  double v[4];
};

Lanes dot_tree(const double* a, const double* b, std::size_t n, std::size_t lo,
               std::size_t hi) noexcept {
  if (hi - lo == 1) {
    Lanes out{};
    for (std::size_t j = 0; j < 4; ++j) {
      const std::size_t idx = 4 * lo + j;
      out.v[j] = idx < n ? a[idx] * b[idx] : 0.0 * 0.0;
    }
    return out;
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  const Lanes left = dot_tree(a, b, n, lo, mid);
  const Lanes right = dot_tree(a, b, n, mid, hi);
  Lanes out{};
  for (std::size_t j = 0; j < 4; ++j) out.v[j] = left.v[j] + right.v[j];
  return out;
}

Lanes sum_tree(const double* v, std::size_t n, std::size_t lo, std::size_t hi) noexcept {
  if (hi - lo == 1) {
    Lanes out{};
    for (std::size_t j = 0; j < 4; ++j) {
      const std::size_t idx = 4 * lo + j;
      out.v[j] = idx < n ? v[idx] : 0.0;
    }
    return out;
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  const Lanes left = sum_tree(v, n, lo, mid);
  const Lanes right = sum_tree(v, n, mid, hi);
  Lanes out{};
  for (std::size_t j = 0; j < 4; ++j) out.v[j] = left.v[j] + right.v[j];
  return out;
}

void vec_mat_tree(const double* x, std::size_t lo, std::size_t hi, const double* w,
                  std::size_t stride, std::size_t out, double* y, double* scratch) noexcept {
  if (hi - lo == 1) {
    const double xi = x[lo];
    const double* row = w + lo * stride;
    for (std::size_t j = 0; j < out; ++j) y[j] = xi * row[j];
    return;
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  vec_mat_tree(x, lo, mid, w, stride, out, y, scratch + out);
  vec_mat_tree(x, mid, hi, w, stride, out, scratch, scratch + out);
  for (std::size_t j = 0; j < out; ++j) y[j] = y[j] + scratch[j];
}

}  // namespace

double dot(const double* a, const double* b, std::size_t n) noexcept {
  if (n == 0) return 0.0;
  const Lanes l = dot_tree(a, b, n, 0, (n + 3) / 4);
  return (l.v[0] + l.v[1]) + (l.v[2] + l.v[3]);
}

double sum(const double* v, std::size_t n) noexcept {
  if (n == 0) return 0.0;
  const Lanes l = sum_tree(v, n, 0, (n + 3) / 4);
  return (l.v[0] + l.v[1]) + (l.v[2] + l.v[3]);
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
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + a * x[i];
}

}  // namespace rflx::kernels::scalar
