#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace rflx {

/// Dense real vector. A thin value type over std::vector<double>; finiteness
/// is checked at ingestion boundaries via check_finite().
class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0) : values_(dim, fill) {}
  Vector(std::initializer_list<double> values) : values_(values) {}
  explicit Vector(std::vector<double> values) : values_(std::move(values)) {}
  explicit Vector(std::span<const double> values) : values_(values.begin(), values.end()) {}

  std::size_t dim() const noexcept { return values_.size(); }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  const std::vector<double>& raw() const noexcept { return values_; }

  double operator[](std::size_t i) const noexcept { return values_[i]; }
  double& operator[](std::size_t i) noexcept { return values_[i]; }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  bool operator==(const Vector&) const = default;

 private:
  std::vector<double> values_;
};

/// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) noexcept { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const noexcept { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) noexcept { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

/// Throws InvalidFormat if any entry is NaN or infinite.
void check_finite(std::span<const double> values, const char* what);

double dot(const Vector& a, const Vector& b);
double norm(const Vector& a);
/// Cosine similarity clamped to [-1, 1]; ZeroNormVector if either side is zero.
double cosine(const Vector& a, const Vector& b);

/// Component-wise mean. Each component is summed over the values sorted
/// ascending with the pairwise kernel, so the result does not depend on the
/// order of `set`.
Vector mean_vector(std::span<const Vector> set);

Vector add(const Vector& a, const Vector& b);
Vector sub(const Vector& a, const Vector& b);
Vector scale(const Vector& a, double s);

enum class PointLabel { Reflect, NonReflect };

struct PointCloud2D {
  std::vector<double> x;
  std::vector<double> y;
  std::vector<PointLabel> labels;
  double explained_variance[2] = {0.0, 0.0};
  Vector components[2];
  /// Set when the centered data has rank < 2; y is then all zero.
  bool degenerate = false;
};

/// Top-2 principal-component projection (sample covariance, orthogonal
/// iteration capped at 200 steps or 1e-12 residual, 2x2 analytic solve).
/// Component signs make the largest-magnitude loading positive.
PointCloud2D pca_project_2d(std::span<const Vector> set);
/// Same projection with per-point labels carried through.
PointCloud2D pca_project_2d(std::span<const Vector> set, std::span<const PointLabel> labels);

/// ||mean_a - mean_b||^2 / (tr Cov_a + tr Cov_b), unbiased covariances.
/// Returns 0 for a zero mean gap and +inf when both sets have zero spread
/// but distinct means.
double fisher_separability(std::span<const Vector> a, std::span<const Vector> b);

}  // namespace rflx
