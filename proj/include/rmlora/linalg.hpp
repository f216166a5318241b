// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rmlora/error.hpp"

namespace rmlora {

/// Dense row-major matrix of doubles.
///
/// Constructing from data rejects non-finite entries; arithmetic helpers
/// below never introduce NaN/Inf from finite operands except by overflow.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw InvalidArgument("Matrix: data length " + std::to_string(data_.size()) +
                            " does not match " + std::to_string(rows_) + "x" +
                            std::to_string(cols_));
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw InvalidArgument("Matrix: non-finite entry");
    }
  }

  /// Builds from nested rows, e.g. Matrix::from_rows({{1, 2}, {3, 4}}).
  static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.front().size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw InvalidArgument("Matrix::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix diag(std::span<const double> values) {
    Matrix m(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
    return m;
  }

  static Matrix diag(std::initializer_list<double> values) {
    return diag(std::span<const double>(values.begin(), values.size()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Bitwise equality of shape and contents.
  friend bool operator==(const Matrix& a, const Matrix& b) noexcept {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.data_.size(); ++i) {
      if (std::bit_cast<std::uint64_t>(a.data_[i]) != std::bit_cast<std::uint64_t>(b.data_[i])) {
        return false;
      }
    }
    return true;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw InvalidArgument("matmul: " + shape_str(a) + " * " + shape_str(b));
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ci = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto bk = b.row(k);
      for (std::size_t j = 0; j < ci.size(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

/// a * bᵀ without forming the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw InvalidArgument("matmul_nt: " + shape_str(a) + " * (" + shape_str(b) + ")^T");
  }
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto bj = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < ai.size(); ++k) s += ai[k] * bj[k];
      c(i, j) = s;
    }
  }
  return c;
}

/// aᵀ * b without forming the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw InvalidArgument("matmul_tn: (" + shape_str(a) + ")^T * " + shape_str(b));
  }
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto ak = a.row(k);
    auto bk = b.row(k);
    for (std::size_t i = 0; i < ak.size(); ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      auto ci = c.row(i);
      for (std::size_t j = 0; j < bk.size(); ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

namespace detail {
template <class Op>
Matrix zip(const Matrix& a, const Matrix& b, const char* name, Op op) {
  if (!a.same_shape(b)) {
    throw InvalidArgument(std::string(name) + ": " + shape_str(a) + " vs " + shape_str(b));
  }
  Matrix c(a.rows(), a.cols());
  auto ad = a.data();
  auto bd = b.data();
  auto cd = c.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] = op(ad[i], bd[i]);
  return c;
}
}  // namespace detail

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  return detail::zip(a, b, "add", [](double x, double y) { return x + y; });
}
inline Matrix operator-(const Matrix& a, const Matrix& b) {
  return detail::zip(a, b, "sub", [](double x, double y) { return x - y; });
}
inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  return detail::zip(a, b, "hadamard", [](double x, double y) { return x * y; });
}
inline Matrix operator*(double s, const Matrix& a) {
  Matrix c = a;
  for (double& v : c.data()) v *= s;
  return c;
}

inline double frobenius_norm_sq(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return s;
}

inline double frobenius_norm(const Matrix& a) { return std::sqrt(frobenius_norm_sq(a)); }

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw InvalidArgument("max_abs_diff: " + shape_str(a) + " vs " + shape_str(b));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline double vector_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Thin SVD: a = u * diag(s) * vt with k = min(rows, cols).
struct SvdResult {
  Matrix u;               // rows x k, orthonormal columns
  std::vector<double> s;  // k values, non-increasing, >= 0
  Matrix vt;              // k x cols, orthonormal rows
};

struct SvdOptions {
  std::size_t max_sweeps = 80;
};

namespace detail {

// One-sided Jacobi on the columns of a tall matrix, stored as column vectors.
// Returns the (unnormalized) rotated columns and the accumulated right rotations.
inline void jacobi_orthogonalize(std::vector<std::vector<double>>& cols,
                                 std::vector<std::vector<double>>& vcols,
                                 const SvdOptions& opts) {
  const std::size_t n = cols.size();
  constexpr double kTol = 1e-15;
  for (std::size_t sweep = 0;; ++sweep) {
    if (sweep >= opts.max_sweeps) {
      throw NumericalError("svd: Jacobi iteration did not converge after " +
                               std::to_string(sweep) + " sweeps",
                           sweep);
    }
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto& up = cols[p];
        auto& uq = cols[q];
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < up.size(); ++i) {
          alpha += up[i] * up[i];
          beta += uq[i] * uq[i];
          gamma += up[i] * uq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
        const double c = 1.0 / std::hypot(1.0, t);
        const double s = c * t;
        for (std::size_t i = 0; i < up.size(); ++i) {
          const double x = up[i], y = uq[i];
          up[i] = c * x - s * y;
          uq[i] = s * x + c * y;
        }
        auto& vp = vcols[p];
        auto& vq = vcols[q];
        for (std::size_t i = 0; i < vp.size(); ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    if (!rotated) return;
  }
}

// Replaces degenerate columns (listed in `bad`) by unit vectors orthogonal to
// every other column. Columns are assumed orthonormal apart from `bad`.
//
// Each replacement is the standard basis vector with the largest component
// outside the current span, so a candidate always exists while the span is
// a proper subspace.
inline void complete_basis(std::vector<std::vector<double>>& cols, const std::vector<bool>& bad) {
  const std::size_t m = cols.empty() ? 0 : cols.front().size();
  auto project_out = [&](std::vector<double>& cand, std::size_t j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < cols.size(); ++k) {
        if (k == j || (bad[k] && k > j)) continue;
        double d = 0.0;
        for (std::size_t i = 0; i < m; ++i) d += cols[k][i] * cand[i];
        for (std::size_t i = 0; i < m; ++i) cand[i] -= d * cols[k][i];
      }
    }
  };
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (!bad[j]) continue;
    std::vector<double> best;
    double best_norm = -1.0;
    for (std::size_t e = 0; e < m; ++e) {
      std::vector<double> cand(m, 0.0);
      cand[e] = 1.0;
      project_out(cand, j);
      const double nrm = vector_norm(cand);
      if (nrm > best_norm) {
        best_norm = nrm;
        best = std::move(cand);
      }
    }
    for (double& x : best) x /= best_norm;
    project_out(best, j);  // polish after normalisation
    const double nrm = vector_norm(best);
    for (double& x : best) x /= nrm;
    cols[j] = std::move(best);
  }
}

// Thin SVD of a tall (rows >= cols) matrix given as columns.
inline SvdResult svd_tall(std::vector<std::vector<double>> cols, std::size_t m,
                          const SvdOptions& opts) {
  const std::size_t n = cols.size();
  std::vector<std::vector<double>> vcols(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) vcols[i][i] = 1.0;
  jacobi_orthogonalize(cols, vcols, opts);

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = vector_norm(cols[j]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  std::vector<std::vector<double>> ucols(n);
  std::vector<std::vector<double>> vsorted(n);
  std::vector<double> s(n);
  std::vector<bool> bad(n, false);
  const double smax = n ? norms[order.front()] : 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    s[k] = norms[j];
    vsorted[k] = std::move(vcols[j]);
    ucols[k] = std::move(cols[j]);
    // Columns at roundoff level carry no direction information.
    if (s[k] == 0.0 || s[k] <= smax * 1e-14) {
      bad[k] = true;
    } else {
      for (double& x : ucols[k]) x /= s[k];
    }
  }
  complete_basis(ucols, bad);

  SvdResult out{Matrix(m, n), std::move(s), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    // Sign convention: largest-magnitude entry of each left vector is positive.
    std::size_t imax = 0;
    for (std::size_t i = 1; i < m; ++i) {
      if (std::abs(ucols[k][i]) > std::abs(ucols[k][imax])) imax = i;
    }
    const double sign = ucols[k][imax] < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < m; ++i) out.u(i, k) = sign * ucols[k][i];
    for (std::size_t i = 0; i < n; ++i) out.vt(k, i) = sign * vsorted[k][i];
  }
  return out;
}

}  // namespace detail

/// Thin singular value decomposition by one-sided Jacobi rotations.
///
/// Singular vectors follow a fixed sign convention: the largest-magnitude
/// entry of each column of u is positive. Throws NumericalError (carrying the
/// sweep count) if the rotations fail to converge within opts.max_sweeps.
inline SvdResult svd(const Matrix& a, const SvdOptions& opts = {}) {
  if (!a.all_finite()) throw InvalidArgument("svd: non-finite input");
  const std::size_t m = a.rows(), n = a.cols();
  if (m == 0 || n == 0) return {Matrix(m, 0), {}, Matrix(0, n)};
  if (m >= n) {
    std::vector<std::vector<double>> cols(n, std::vector<double>(m));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) cols[j][i] = a(i, j);
    return detail::svd_tall(std::move(cols), m, opts);
  }
  // Wide: decompose aᵀ = U S Vᵀ, so a = V S Uᵀ.
  std::vector<std::vector<double>> cols(m, std::vector<double>(n));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cols[i][j] = a(i, j);
  SvdResult t = detail::svd_tall(std::move(cols), n, opts);
  SvdResult out{transpose(t.vt), std::move(t.s), transpose(t.u)};
  for (std::size_t k = 0; k < m; ++k) {
    std::size_t imax = 0;
    for (std::size_t i = 1; i < m; ++i) {
      if (std::abs(out.u(i, k)) > std::abs(out.u(imax, k))) imax = i;
    }
    if (out.u(imax, k) < 0.0) {
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = -out.u(i, k);
      for (std::size_t j = 0; j < n; ++j) out.vt(k, j) = -out.vt(k, j);
    }
  }
  return out;
}

inline std::vector<double> singular_values(const Matrix& a) { return svd(a).s; }

inline double spectral_norm(const Matrix& a) {
  auto s = singular_values(a);
  return s.empty() ? 0.0 : s.front();
}

inline constexpr double kDefaultRankTol = 1e-6;

/// Number of singular values strictly above rel_tol * s_max; 0 for the zero matrix.
inline std::size_t rank_from_singular_values(std::span<const double> s, double rel_tol) {
  if (s.empty() || s.front() == 0.0) return 0;
  const double cut = rel_tol * s.front();
  return static_cast<std::size_t>(
      std::count_if(s.begin(), s.end(), [cut](double x) { return x > cut; }));
}

inline std::size_t numerical_rank(const Matrix& a, double rel_tol = kDefaultRankTol) {
  if (!(rel_tol > 0.0 && rel_tol < 1.0)) {
    throw InvalidArgument("numerical_rank: rel_tol must lie in (0, 1)");
  }
  const auto s = singular_values(a);
  return rank_from_singular_values(s, rel_tol);
}

/// Rank at machine precision: singular values above max(m, n) * eps * s_max.
inline std::size_t exact_rank(const Matrix& a) {
  const auto s = singular_values(a);
  const double tol = static_cast<double>(std::max(a.rows(), a.cols())) *
                     std::numeric_limits<double>::epsilon();
  return rank_from_singular_values(s, tol);
}

/// u_r * diag(s_r) * vt_r from an existing decomposition.
inline Matrix low_rank_product(const SvdResult& d, std::size_t r) {
  Matrix out(d.u.rows(), d.vt.cols());
  for (std::size_t k = 0; k < r; ++k) {
    for (std::size_t i = 0; i < out.rows(); ++i) {
      const double us = d.u(i, k) * d.s[k];
      if (us == 0.0) continue;
      auto oi = out.row(i);
      auto vk = d.vt.row(k);
      for (std::size_t j = 0; j < oi.size(); ++j) oi[j] += us * vk[j];
    }
  }
  return out;
}

/// Best rank-r approximation (Eckart-Young) via truncated SVD.
inline Matrix truncated_svd_approx(const Matrix& a, std::size_t r) {
  if (r > std::min(a.rows(), a.cols())) {
    throw InvalidArgument("truncated_svd_approx: rank " + std::to_string(r) +
                          " exceeds min dimension of " + shape_str(a));
  }
  if (r == 0) return Matrix(a.rows(), a.cols());
  return low_rank_product(svd(a), r);
}

}  // namespace rmlora
