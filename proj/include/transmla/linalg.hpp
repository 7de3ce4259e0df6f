#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "transmla/matrix.hpp"

namespace transmla {

struct EigResult {
  std::vector<double> eigenvalues;  // non-increasing
  Matrix eigenvectors;              // column j pairs with eigenvalues[j]
};

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as (S+Sᵀ)/2 first; asymmetry above 1e-8 is
/// rejected. Eigenpairs come back sorted by descending eigenvalue, ties kept in
/// the order of the diagonal position they converged on, so identical inputs
/// always produce identical bases.
inline EigResult sym_eig(const Matrix& s_in) {
  require(s_in.is_square(), "sym_eig: matrix is not square (" + shape_str(s_in) + ")");
  require(s_in.all_finite(), "sym_eig: non-finite entries");
  const std::size_t n = s_in.rows();

  double asym = 0.0;
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      asym = std::max(asym, std::abs(s_in(i, j) - s_in(j, i)));
      a(i, j) = 0.5 * (s_in(i, j) + s_in(j, i));
    }
  }
  require(asym <= 1e-8 * std::max(1.0, max_abs(s_in)), "sym_eig: symmetry defect " + std::to_string(asym));

  Matrix v = Matrix::identity(n);
  const double scale = frobenius_norm(a);
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps && n > 1; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) <= 1e-15 * scale || off == 0.0) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        // Skip rotations that cannot change anything representable.
        if (std::abs(apq) < 1e-300 ||
            (sweep > 3 && std::abs(apq) * 1e18 < std::abs(app) && std::abs(apq) * 1e18 < std::abs(aqq))) {
          a(p, q) = a(q, p) = 0.0;
          continue;
        }
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

  EigResult out{std::vector<double>(n), Matrix(n, n)};
  for (std::size_t j = 0; j < n; ++j) {
    out.eigenvalues[j] = a(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k) out.eigenvectors(k, j) = v(k, order[j]);
  }
  return out;
}

/// XᵀX / (n-1). No centering: callers that want variance center first.
inline Matrix covariance(const Matrix& x) {
  require(x.rows() >= 2, "covariance: need at least 2 samples, got " + std::to_string(x.rows()));
  Matrix c = matmul_tn(x, x);
  const double inv = 1.0 / static_cast<double>(x.rows() - 1);
  for (double& v : c.data()) v *= inv;
  // matmul_tn accumulates (i,j) and (j,i) identically, but keep the output
  // exactly symmetric regardless of summation order.
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (std::size_t j = i + 1; j < c.cols(); ++j) c(j, i) = c(i, j);
  return c;
}

inline std::vector<double> column_means(const Matrix& x) {
  std::vector<double> mu(x.cols(), 0.0);
  if (x.rows() == 0) return mu;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) mu[j] += x(i, j);
  for (double& m : mu) m /= static_cast<double>(x.rows());
  return mu;
}

inline Matrix center_columns(const Matrix& x, std::span<const double> mu) {
  require(mu.size() == x.cols(), "center_columns: mean length mismatch");
  Matrix c = x;
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (std::size_t j = 0; j < c.cols(); ++j) c(i, j) -= mu[j];
  return c;
}

/// max |UᵀU − I|.
inline double orthonormal_defect(const Matrix& u) {
  const Matrix g = matmul_tn(u, u);
  double m = 0.0;
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) m = std::max(m, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
  return m;
}

/// Singular values (descending) by one-sided Jacobi on the columns of A (or
/// Aᵀ when wider than tall). Works on A itself rather than a Gram matrix, so
/// small singular values keep absolute accuracy near ε·σ_max.
inline std::vector<double> singular_values(const Matrix& a_in) {
  require(a_in.all_finite(), "singular_values: non-finite entries");
  Matrix a = a_in.rows() < a_in.cols() ? transpose(a_in) : a_in;
  const std::size_t m = a.rows(), n = a.cols();
  constexpr int kMaxSweeps = 60;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += a(i, p) * a(i, p);
          beta += a(i, q) * a(i, q);
          gamma += a(i, p) * a(i, q);
        }
        if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += a(i, j) * a(i, j);
    sv[j] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

/// Number of singular values above rel_tol · σ_max.
inline std::size_t numerical_rank(const Matrix& a, double rel_tol = 1e-8) {
  const auto sv = singular_values(a);
  if (sv.empty() || sv.front() == 0.0) return 0;
  return static_cast<std::size_t>(
      std::count_if(sv.begin(), sv.end(), [&](double s) { return s > rel_tol * sv.front(); }));
}

/// Minimum-norm solution W of min ‖A·W − B‖_F, through the pseudo-inverse of AᵀA.
inline Matrix least_squares(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), "least_squares: row counts differ");
  const auto eig = sym_eig(matmul_tn(a, a));
  const double cutoff = 1e-12 * std::max(1.0, eig.eigenvalues.empty() ? 0.0 : eig.eigenvalues.front());
  const Matrix atb = matmul_tn(a, b);
  const Matrix& v = eig.eigenvectors;
  Matrix proj = matmul_tn(v, atb);  // Vᵀ Aᵀ B
  for (std::size_t i = 0; i < proj.rows(); ++i) {
    const double lam = eig.eigenvalues[i];
    const double inv = lam > cutoff ? 1.0 / lam : 0.0;
    for (double& x : proj.row(i)) x *= inv;
  }
  return matmul(v, proj);
}

/// Sum of the leading m entries of a descending list.
inline double top_sum(const std::vector<double>& desc, std::size_t m) {
  m = std::min(m, desc.size());
  return std::accumulate(desc.begin(), desc.begin() + static_cast<std::ptrdiff_t>(m), 0.0);
}

/// Tr(UᵀSU) restricted to the leading m columns of U.
inline double leading_trace(const Matrix& s, const Matrix& u, std::size_t m) {
  require(s.is_square() && s.rows() == u.rows() && m <= u.cols(), "leading_trace: shape mismatch");
  double tr = 0.0;
  for (std::size_t c = 0; c < m; ++c) {
    const auto col = u.col(c);
    const auto sc = matvec(s, col);
    tr += dot(col, sc);
  }
  return tr;
}

}  // namespace transmla
