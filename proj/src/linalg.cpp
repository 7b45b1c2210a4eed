#include "quack/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Core>

#include "quack/errors.hpp"

namespace quack {

std::string_view to_string(NormKind kind) {
  return kind == NormKind::kFrobenius ? "frobenius" : "spectral";
}

NormKind parse_norm_kind(std::string_view text) {
  if (text == "frobenius") return NormKind::kFrobenius;
  if (text == "spectral") return NormKind::kSpectral;
  throw ConfigError("unknown norm kind '" + std::string(text) + "' (expected frobenius|spectral)");
}

namespace {

void require_inner(const Tensor& a, const Tensor& b, std::size_t ka, std::size_t kb, const char* op) {
  if (ka != kb) {
    throw DimensionError(std::string(op) + ": inner extents differ, " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

Precision joint_precision(const Tensor& a, const Tensor& b) {
  return (a.precision() == Precision::kSingle || b.precision() == Precision::kSingle) ? Precision::kSingle
                                                                                      : Precision::kDouble;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMat>;
using View = Eigen::Map<RowMat>;

ConstView view(const Tensor& t) { return ConstView(t.data().data(), t.rows(), t.cols()); }
View view(Tensor& t) { return View(t.data().data(), t.rows(), t.cols()); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_inner(a, b, a.cols(), b.rows(), "matmul");
  Tensor c({a.rows(), b.cols()});
  view(c).noalias() = view(a) * view(b);
  c.set_precision(joint_precision(a, b));
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_inner(a, b, a.cols(), b.cols(), "matmul_nt");
  Tensor c({a.rows(), b.rows()});
  view(c).noalias() = view(a) * view(b).transpose();
  c.set_precision(joint_precision(a, b));
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_inner(a, b, a.rows(), b.rows(), "matmul_tn");
  Tensor c({a.cols(), b.cols()});
  view(c).noalias() = view(a).transpose() * view(b);
  c.set_precision(joint_precision(a, b));
  return c;
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  t.set_precision(a.precision());
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  c.set_precision(joint_precision(a, b));
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("sub: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  c.set_precision(joint_precision(a, b));
  return c;
}

Tensor scaled(const Tensor& a, double s) {
  Tensor c = a;
  for (double& v : c.data()) v *= s;
  c.round_to_precision();
  return c;
}

Tensor hconcat(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows())
    throw DimensionError("hconcat: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const std::size_t m = a.rows(), na = a.cols(), nb = b.cols();
  Tensor c({m, na + nb});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(a.row(i).begin(), a.row(i).end(), c.row(i).begin());
    std::copy(b.row(i).begin(), b.row(i).end(), c.row(i).begin() + static_cast<std::ptrdiff_t>(na));
  }
  c.set_precision(joint_precision(a, b));
  return c;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double frobenius_norm(const Tensor& w) {
  double s = 0.0;
  for (double v : w.data()) s += v * v;
  return std::sqrt(s);
}

double spectral_norm(const Tensor& w, double tol, int max_iters, std::uint64_t seed) {
  if (!(tol > 0.0)) throw ConfigError("spectral_norm: tol must be positive");
  const std::size_t m = w.rows(), n = w.cols();
  const double* wd = w.data().data();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  std::vector<double> v(n), u(m), z(n);
  double vn = 0.0;
  for (double& x : v) {
    x = gauss(rng);
    vn += x * x;
  }
  vn = std::sqrt(vn);
  for (double& x : v) x /= vn;

  // lambda_k is the Rayleigh quotient of w^T w; it rises monotonically toward
  // sigma_max^2 and the gaps shrink geometrically once the iteration is in its
  // asymptotic regime, which lets us extrapolate the remaining error.
  double lambda = 0.0, prev_lambda = 0.0, prev_gap = 0.0;
  for (int it = 1; it <= max_iters; ++it) {
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += wd[i * n + j] * v[j];
      u[i] = s;
    }
    std::fill(z.begin(), z.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) z[j] += wd[i * n + j] * u[i];
    lambda = dot(v, z);
    double zn = std::sqrt(dot(z, z));
    if (zn == 0.0) return 0.0;
    for (std::size_t j = 0; j < n; ++j) v[j] = z[j] / zn;

    const double gap = lambda - prev_lambda;
    if (it >= 3) {
      if (gap <= lambda * 1e-16) return std::sqrt(lambda);
      const double ratio = gap / prev_gap;
      if (ratio > 0.0 && ratio < 1.0) {
        const double remaining = gap * ratio / (1.0 - ratio);
        // relative error of sqrt(lambda) is half that of lambda
        if (0.5 * remaining / lambda <= 0.1 * tol) return std::sqrt(lambda + remaining);
      }
    }
    prev_gap = gap;
    prev_lambda = lambda;
  }
  throw IterationLimitError("spectral_norm: no convergence within " + std::to_string(max_iters) + " iterations",
                            std::sqrt(lambda));
}

double matrix_norm(const Tensor& w, NormKind kind) {
  return kind == NormKind::kFrobenius ? frobenius_norm(w) : spectral_norm(w);
}

std::vector<double> singular_values(const Tensor& w) {
  // Columns of the (possibly transposed) matrix, so that ncol <= nrow.
  const bool flip = w.rows() < w.cols();
  const std::size_t nrow = flip ? w.cols() : w.rows();
  const std::size_t ncol = flip ? w.rows() : w.cols();
  std::vector<std::vector<double>> col(ncol, std::vector<double>(nrow));
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) {
      if (flip) col[i][j] = w(i, j);
      else col[j][i] = w(i, j);
    }

  constexpr double kEps = 1e-15;
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < ncol; ++p) {
      for (std::size_t q = p + 1; q < ncol; ++q) {
        const double alpha = dot(col[p], col[p]);
        const double beta = dot(col[q], col[q]);
        const double gamma = dot(col[p], col[q]);
        if (gamma == 0.0 || std::abs(gamma) <= kEps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < nrow; ++i) {
          const double ap = col[p][i], aq = col[q][i];
          col[p][i] = c * ap - s * aq;
          col[q][i] = s * ap + c * aq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sv(ncol);
  for (std::size_t j = 0; j < ncol; ++j) sv[j] = std::sqrt(dot(col[j], col[j]));
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

double max_singular_value(const Tensor& w) { return singular_values(w).front(); }

}  // namespace quack
