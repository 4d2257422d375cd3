#include "rflx/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "rflx/error.hpp"
#include "rflx/kernels.hpp"

namespace rflx {
namespace {

void require_same_dim(std::size_t a, std::size_t b) {
  if (a != b) {
    throw Error(Errc::DimensionMismatch, std::to_string(a) + " vs " + std::to_string(b));
  }
}

std::size_t common_dim(std::span<const Vector> set) {
  if (set.empty()) throw Error(Errc::EmptySet, "empty vector set");
  const std::size_t d = set.front().dim();
  for (const Vector& v : set) require_same_dim(d, v.dim());
  return d;
}

// Sum of squared distances to `mean`, via the pairwise kernels.
double scatter(std::span<const Vector> set, const Vector& mean) {
  std::vector<double> per_point;
  per_point.reserve(set.size());
  std::vector<double> diff(mean.dim());
  for (const Vector& v : set) {
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = v[i] - mean[i];
    per_point.push_back(kernels::dot(diff, diff));
  }
  return kernels::sum(per_point);
}

// Sample covariance of centered rows (n x d) -> d x d.
Matrix covariance(const Matrix& centered) {
  const std::size_t n = centered.rows;
  const std::size_t d = centered.cols;
  Matrix cov(d, d);
  std::vector<double> col_i(n);
  std::vector<double> col_j(n);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t r = 0; r < n; ++r) col_i[r] = centered.at(r, i);
    for (std::size_t j = i; j < d; ++j) {
      for (std::size_t r = 0; r < n; ++r) col_j[r] = centered.at(r, j);
      const double c = kernels::dot(col_i, col_j) / static_cast<double>(n - 1);
      cov.at(i, j) = c;
      cov.at(j, i) = c;
    }
  }
  return cov;
}

// out = C * q for symmetric C.
void sym_mul(const Matrix& c, std::span<const double> q, std::span<double> out) {
  for (std::size_t i = 0; i < c.rows; ++i) out[i] = kernels::dot(c.row(i), q);
}

// Gram-Schmidt on two columns in place; returns the norm of the second
// column after orthogonalization (relative to the first).
double orthonormalize(std::vector<double>& q0, std::vector<double>& q1) {
  const double n0 = std::sqrt(kernels::dot(q0, q0));
  if (n0 == 0.0) return 0.0;
  for (double& v : q0) v /= n0;
  const double proj = kernels::dot(q0, q1);
  for (std::size_t i = 0; i < q1.size(); ++i) q1[i] -= proj * q0[i];
  const double n1 = std::sqrt(kernels::dot(q1, q1));
  if (n1 <= 1e-14 * n0) return 0.0;
  for (double& v : q1) v /= n1;
  return n1 / n0;
}

void fix_sign(std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  }
  if (v[best] < 0.0) {
    for (double& x : v) x = -x;
  }
}

}  // namespace

void check_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(Errc::InvalidFormat, std::string(what) + ": non-finite entry");
  }
}

double dot(const Vector& a, const Vector& b) {
  require_same_dim(a.dim(), b.dim());
  return kernels::dot(a.values(), b.values());
}

double norm(const Vector& a) { return std::sqrt(kernels::dot(a.values(), a.values())); }

double cosine(const Vector& a, const Vector& b) {
  require_same_dim(a.dim(), b.dim());
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw Error(Errc::ZeroNormVector, "cosine of a zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

Vector mean_vector(std::span<const Vector> set) {
  const std::size_t d = common_dim(set);
  Vector mean(d);
  std::vector<double> column(set.size());
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t r = 0; r < set.size(); ++r) column[r] = set[r][i];
    std::sort(column.begin(), column.end());
    mean[i] = kernels::sum(column) / static_cast<double>(set.size());
  }
  return mean;
}

Vector add(const Vector& a, const Vector& b) {
  require_same_dim(a.dim(), b.dim());
  Vector out(a.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) out[i] = a[i] + b[i];
  return out;
}

Vector sub(const Vector& a, const Vector& b) {
  require_same_dim(a.dim(), b.dim());
  Vector out(a.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) out[i] = a[i] - b[i];
  return out;
}

Vector scale(const Vector& a, double s) {
  Vector out(a.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) out[i] = a[i] * s;
  return out;
}

PointCloud2D pca_project_2d(std::span<const Vector> set) {
  std::vector<PointLabel> labels(set.size(), PointLabel::Reflect);
  return pca_project_2d(set, labels);
}

PointCloud2D pca_project_2d(std::span<const Vector> set, std::span<const PointLabel> labels) {
  if (set.size() < 3) throw Error(Errc::EmptySet, "PCA needs at least 3 points");
  const std::size_t d = common_dim(set);
  if (d < 2) throw Error(Errc::DimensionMismatch, "PCA needs dim >= 2");
  if (labels.size() != set.size()) throw Error(Errc::DimensionMismatch, "labels/points length");
  const std::size_t n = set.size();

  const Vector mean = mean_vector(set);
  Matrix centered(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < d; ++i) centered.at(r, i) = set[r][i] - mean[i];
  }
  const Matrix cov = covariance(centered);
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += cov.at(i, i);

  PointCloud2D out;
  out.x.assign(n, 0.0);
  out.y.assign(n, 0.0);
  out.labels.assign(labels.begin(), labels.end());
  out.components[0] = Vector(d);
  out.components[1] = Vector(d);
  if (trace <= 0.0) {
    out.degenerate = true;
    return out;
  }

  // Fixed, non-axis-aligned start so the iteration cannot begin orthogonal
  // to an axis-aligned dominant subspace.
  std::vector<double> q0(d), q1(d), z0(d), z1(d);
  for (std::size_t i = 0; i < d; ++i) {
    q0[i] = 1.0 + 0.5 * std::sin(1.0 + static_cast<double>(i));
    q1[i] = std::cos(2.0 + 1.7 * static_cast<double>(i));
  }
  bool rank_one = orthonormalize(q0, q1) == 0.0;

  const double cov_scale = trace;
  for (int iter = 0; iter < 200 && !rank_one; ++iter) {
    sym_mul(cov, q0, z0);
    sym_mul(cov, q1, z1);
    // Residual of the current basis: ||C Q - Q (Q^T C Q)||.
    const double t00 = kernels::dot(q0, z0), t01 = kernels::dot(q0, z1), t11 = kernels::dot(q1, z1);
    double residual = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double r0 = z0[i] - (q0[i] * t00 + q1[i] * t01);
      const double r1 = z1[i] - (q0[i] * t01 + q1[i] * t11);
      residual += r0 * r0 + r1 * r1;
    }
    if (std::sqrt(residual) <= 1e-12 * cov_scale) break;
    q0 = z0;
    q1 = z1;
    rank_one = orthonormalize(q0, q1) == 0.0;
  }

  if (rank_one) {
    // Second direction vanished; q0 still spans the data.
    if (kernels::dot(q0, q0) == 0.0) {
      out.degenerate = true;
      return out;
    }
    sym_mul(cov, q0, z0);
    fix_sign(q0);
    out.components[0] = Vector(q0);
    out.explained_variance[0] = std::clamp(kernels::dot(q0, z0) / trace, 0.0, 1.0);
    out.degenerate = true;
    for (std::size_t r = 0; r < n; ++r) out.x[r] = kernels::dot(centered.row(r), q0);
    return out;
  }

  // 2x2 eigenproblem on T = Q^T C Q.
  sym_mul(cov, q0, z0);
  sym_mul(cov, q1, z1);
  const double a = kernels::dot(q0, z0);
  const double b = kernels::dot(q0, z1);
  const double c = kernels::dot(q1, z1);
  const double half_tr = 0.5 * (a + c);
  const double disc = std::sqrt(0.25 * (a - c) * (a - c) + b * b);
  const double lambda1 = half_tr + disc;
  const double lambda2 = std::max(half_tr - disc, 0.0);
  // Eigenvector of T for lambda1, written in a form that avoids cancellation.
  double e0, e1;
  if (b == 0.0) {
    e0 = a >= c ? 1.0 : 0.0;
    e1 = a >= c ? 0.0 : 1.0;
  } else if (a >= c) {
    e0 = lambda1 - c;
    e1 = b;
  } else {
    e0 = b;
    e1 = lambda1 - a;
  }
  const double en = std::hypot(e0, e1);
  e0 /= en;
  e1 /= en;

  std::vector<double> p0(d), p1(d);
  for (std::size_t i = 0; i < d; ++i) {
    p0[i] = e0 * q0[i] + e1 * q1[i];
    p1[i] = -e1 * q0[i] + e0 * q1[i];
  }
  fix_sign(p0);
  fix_sign(p1);
  out.components[0] = Vector(p0);
  out.components[1] = Vector(p1);
  out.explained_variance[0] = std::clamp(lambda1 / trace, 0.0, 1.0);
  out.explained_variance[1] = std::clamp(lambda2 / trace, 0.0, out.explained_variance[0]);
  out.degenerate = lambda2 <= 1e-12 * lambda1;
  for (std::size_t r = 0; r < n; ++r) {
    out.x[r] = kernels::dot(centered.row(r), p0);
    out.y[r] = out.degenerate ? 0.0 : kernels::dot(centered.row(r), p1);
  }
  if (out.degenerate) out.explained_variance[1] = 0.0;
  return out;
}

double fisher_separability(std::span<const Vector> a, std::span<const Vector> b) {
  if (a.size() < 2 || b.size() < 2) throw Error(Errc::EmptySet, "fisher needs >= 2 points per set");
  require_same_dim(common_dim(a), common_dim(b));
  const Vector mu_a = mean_vector(a);
  const Vector mu_b = mean_vector(b);
  const Vector gap = sub(mu_a, mu_b);
  const double gap2 = kernels::dot(gap.values(), gap.values());
  const double tr_a = scatter(a, mu_a) / static_cast<double>(a.size() - 1);
  const double tr_b = scatter(b, mu_b) / static_cast<double>(b.size() - 1);
  if (gap2 == 0.0) return 0.0;
  const double denom = tr_a + tr_b;
  if (denom == 0.0) return std::numeric_limits<double>::infinity();
  return gap2 / denom;
}

}  // namespace rflx
