// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "rmlora/linalg.hpp"
#include "rmlora/rng.hpp"

namespace rmlora {

inline constexpr double kDefaultLambdaReg = 1e-4;

namespace detail {
inline void check_factor_shapes(const Matrix& a, const Matrix& b, const char* who) {
  if (a.rows() != b.cols()) {
    throw InvalidArgument(std::string(who) + ": a is " + shape_str(a) + " but b is " +
                          shape_str(b) + " (rank mismatch)");
  }
}

// a aᵀ - I
inline Matrix row_gram_minus_identity(const Matrix& a) {
  Matrix g = matmul_nt(a, a);
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= 1.0;
  return g;
}

// bᵀ b - I
inline Matrix col_gram_minus_identity(const Matrix& b) {
  Matrix g = matmul_tn(b, b);
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= 1.0;
  return g;
}
}  // namespace detail

/// Orthogonality penalty ||a aᵀ - I||_F^2 + ||bᵀ b - I||_F^2.
inline double reg_value(const Matrix& a, const Matrix& b) {
  detail::check_factor_shapes(a, b, "reg_value");
  return frobenius_norm_sq(detail::row_gram_minus_identity(a)) +
         frobenius_norm_sq(detail::col_gram_minus_identity(b));
}

struct RegGrads {
  Matrix a;
  Matrix b;
};

/// Exact gradient of reg_value: 4 (a aᵀ - I) a and 4 b (bᵀ b - I).
inline RegGrads reg_grads(const Matrix& a, const Matrix& b) {
  detail::check_factor_shapes(a, b, "reg_grads");
  return {4.0 * matmul(detail::row_gram_minus_identity(a), a),
          4.0 * matmul(b, detail::col_gram_minus_identity(b))};
}

/// Per-step gradient masks selecting r_hat of the R rank directions.
///
/// Direction i keeps row i of the gradient of a (all columns) and column i
/// of the gradient of b (all rows).
struct MaskPair {
  Matrix mask_a;
  Matrix mask_b;
  std::vector<std::size_t> selected;  // 0-based, ascending
};

inline MaskPair build_mask(std::size_t rank, std::vector<std::size_t> selected,
                           std::size_t a_cols, std::size_t b_rows) {
  std::sort(selected.begin(), selected.end());
  if (std::adjacent_find(selected.begin(), selected.end()) != selected.end()) {
    throw InvalidArgument("build_mask: duplicate direction");
  }
  MaskPair m{Matrix(rank, a_cols), Matrix(b_rows, rank), std::move(selected)};
  for (std::size_t i : m.selected) {
    if (i >= rank) {
      throw InvalidArgument("build_mask: direction " + std::to_string(i) + " >= rank " +
                            std::to_string(rank));
    }
    for (std::size_t j = 0; j < a_cols; ++j) m.mask_a(i, j) = 1.0;
    for (std::size_t r = 0; r < b_rows; ++r) m.mask_b(r, i) = 1.0;
  }
  return m;
}

/// Draws r_hat distinct directions uniformly without replacement.
///
/// Consumes exactly r_hat draws from rng (partial Fisher-Yates).
inline MaskPair sample_mask(std::size_t rank, std::size_t r_hat, std::size_t a_cols,
                            std::size_t b_rows, Rng& rng) {
  if (r_hat > rank) {
    throw InvalidArgument("sample_mask: r_hat " + std::to_string(r_hat) + " > rank " +
                          std::to_string(rank));
  }
  std::vector<std::size_t> pool(rank);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t k = 0; k < r_hat; ++k) {
    const auto j = k + static_cast<std::size_t>(rng.below(rank - k));
    std::swap(pool[k], pool[j]);
  }
  pool.resize(r_hat);
  return build_mask(rank, std::move(pool), a_cols, b_rows);
}

inline std::pair<Matrix, Matrix> apply_mask(const Matrix& grad_a, const Matrix& grad_b,
                                            const MaskPair& masks) {
  if (!grad_a.same_shape(masks.mask_a) || !grad_b.same_shape(masks.mask_b)) {
    throw InvalidArgument("apply_mask: gradients " + shape_str(grad_a) + ", " +
                          shape_str(grad_b) + " vs masks " + shape_str(masks.mask_a) + ", " +
                          shape_str(masks.mask_b));
  }
  // Selection rather than multiplication: masked entries become +0.0 exactly.
  auto select = [](const Matrix& g, const Matrix& m) {
    Matrix out(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) {
      out.data()[i] = m.data()[i] != 0.0 ? g.data()[i] : 0.0;
    }
    return out;
  };
  return {select(grad_a, masks.mask_a), select(grad_b, masks.mask_b)};
}

}  // namespace rmlora
