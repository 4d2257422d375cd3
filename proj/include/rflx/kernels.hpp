#pragma once

// Inner-loop arithmetic with a scalar reference path and SIMD variants
// picked at runtime. Every variant evaluates the same canonical reduction
// tree, so results are bit-identical across levels:
//
//   dot/sum:  elements are grouped into 4-wide chunks (zero padded), chunks
//             are combined lane-wise by a midpoint-split pairwise tree, and
//             the four lanes are folded as (l0 + l1) + (l2 + l3).
//   vec_mat:  y = x * W, each output column is the pairwise tree over input
//             rows of x[i] * W[i][j] (same midpoint split).
//
// The build disables FMA contraction; a fused multiply-add would change the
// rounding of the products and break the equivalence.

#include <cstddef>
#include <span>
#include <string_view>

namespace rflx::kernels {

enum class Level { Scalar, Avx2 };

std::string_view level_name(Level level) noexcept;
bool level_supported(Level level) noexcept;
Level active_level() noexcept;
/// Throws std::invalid_argument when the level is not available on this CPU/build.
void set_level(Level level);
Level parse_level(std::string_view name);

double dot(std::span<const double> a, std::span<const double> b);
double sum(std::span<const double> values);
/// y = x * W where row i of W starts at w[i * stride] and has y.size() columns.
void vec_mat(std::span<const double> x, std::span<const double> w, std::size_t stride,
             std::span<double> y);
/// y += a * x
void axpy(double a, std::span<const double> x, std::span<double> y);

namespace scalar {
double dot(const double* a, const double* b, std::size_t n) noexcept;
double sum(const double* v, std::size_t n) noexcept;
void vec_mat(const double* x, std::size_t in, const double* w, std::size_t stride,
             std::size_t out, double* y, double* scratch) noexcept;
void axpy(double a, const double* x, double* y, std::size_t n) noexcept;
}  // namespace scalar

namespace avx2 {
double dot(const double* a, const double* b, std::size_t n) noexcept;
double sum(const double* v, std::size_t n) noexcept;
void vec_mat(const double* x, std::size_t in, const double* w, std::size_t stride,
             std::size_t out, double* y, double* scratch) noexcept;
void axpy(double a, const double* x, double* y, std::size_t n) noexcept;
}  // namespace avx2

/// Scratch doubles vec_mat needs for `in` input rows and `out` columns.
std::size_t vec_mat_scratch_size(std::size_t in, std::size_t out) noexcept;

}  // namespace rflx::kernels
