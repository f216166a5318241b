// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rmlora/layer.hpp"
#include "rmlora/linalg.hpp"
#include "rmlora/lora.hpp"
#include "rmlora/model.hpp"
#include "rmlora/rng.hpp"

// Approximation-error machinery for adapting a frozen ReLU network toward a
// target network: per-layer discrepancies, their singular-value errors, the
// magnitude constant beta and the resulting upper bound on E||f(x) - fbar(x)||.

namespace rmlora {

/// Ordered partition of the frozen layers [0, L) into consecutive groups,
/// one group per target layer.
struct Partition {
  std::vector<std::vector<std::size_t>> groups;

  /// One frozen layer per target layer.
  static Partition singletons(std::size_t depth) {
    Partition p;
    for (std::size_t l = 0; l < depth; ++l) p.groups.push_back({l});
    return p;
  }

  bool all_singletons() const {
    return std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.size() == 1; });
  }

  void validate(std::size_t frozen_depth, std::size_t target_depth) const {
    if (groups.size() != target_depth) {
      throw InvalidArgument("Partition: " + std::to_string(groups.size()) + " groups for " +
                            std::to_string(target_depth) + " target layers");
    }
    std::size_t next = 0;
    for (const auto& g : groups) {
      if (g.empty()) throw InvalidArgument("Partition: empty group");
      for (std::size_t l : g) {
        if (l != next) {
          throw InvalidArgument("Partition: groups must be consecutive, ordered and disjoint");
        }
        ++next;
      }
    }
    if (next != frozen_depth) {
      throw InvalidArgument("Partition: covers " + std::to_string(next) + " of " +
                            std::to_string(frozen_depth) + " frozen layers");
    }
  }
};

/// Product of the group's weights in application order (last layer leftmost).
inline Matrix group_product(std::span<const Matrix> group) {
  if (group.empty()) throw InvalidArgument("group_product: empty group");
  Matrix p = group.front();
  for (std::size_t k = 1; k < group.size(); ++k) p = matmul(group[k], p);
  return p;
}

/// E_i = target weight minus the product of the frozen group's weights.
inline Matrix discrepancy(const Matrix& target_weight, std::span<const Matrix> frozen_group) {
  const Matrix p = group_product(frozen_group);
  if (!p.same_shape(target_weight)) {
    throw InvalidArgument("discrepancy: target " + shape_str(target_weight) +
                          " vs group product " + shape_str(p));
  }
  return target_weight - p;
}

inline std::vector<Matrix> discrepancies(const FnnModel& frozen, const FnnModel& target,
                                         const Partition& partition) {
  partition.validate(frozen.depth(), target.depth());
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < partition.groups.size(); ++i) {
    std::vector<Matrix> ws;
    for (std::size_t l : partition.groups[i]) ws.push_back(frozen.layers[l].weight);
    out.push_back(discrepancy(target.layers[i].weight, ws));
  }
  return out;
}

/// sigma_{total_rank+1}(E), with exact zero once total_rank reaches rank(E).
///
/// Rank is judged at machine precision (max(m, n) * eps relative), so
/// roundoff-level singular values do not leak into the bound.
inline double layer_error(const Matrix& e, std::size_t total_rank) {
  const auto s = singular_values(e);
  if (total_rank >= s.size()) return 0.0;
  const double tol =
      static_cast<double>(std::max(e.rows(), e.cols())) * std::numeric_limits<double>::epsilon();
  if (total_rank >= rank_from_singular_values(s, tol)) return 0.0;
  return s[total_rank];
}

namespace detail {
// Cholesky of s + jitter*I; false if not positive definite.
inline bool cholesky_ok(const Matrix& s, double jitter) {
  const std::size_t n = s.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = s(j, j) + jitter;
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) return false;
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = s(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= l(i, k) * l(j, k);
      l(i, j) = v / l(j, j);
    }
  }
  return true;
}
}  // namespace detail

/// Throws InvalidArgument unless sigma is square, symmetric and PSD (to within roundoff).
inline void check_second_moment(const Matrix& sigma) {
  if (sigma.rows() != sigma.cols() || sigma.rows() == 0) {
    throw InvalidArgument("second moment must be square, got " + shape_str(sigma));
  }
  double scale = 0.0;
  for (double v : sigma.data()) scale = std::max(scale, std::abs(v));
  const double tol = 1e-10 * std::max(scale, 1.0);
  for (std::size_t i = 0; i < sigma.rows(); ++i) {
    for (std::size_t j = i + 1; j < sigma.cols(); ++j) {
      if (std::abs(sigma(i, j) - sigma(j, i)) > tol) {
        throw InvalidArgument("second moment is not symmetric");
      }
    }
  }
  if (!detail::cholesky_ok(sigma, tol)) {
    throw InvalidArgument("second moment is not positive semidefinite");
  }
}

/// Magnitude constant beta, evaluated term by term:
///   max_i ( sqrt(||S||_F) prod_{j<=i} ||Wbar_j||_F
///           + sum_{j<=i} prod_{k=j+1}^{i-1} ||Wbar_k||_F ||bbar_j||_2 )  v  sqrt(||S||_F)
/// Empty products are 1 and empty sums 0.
inline double beta_constant(const FnnModel& target, const Matrix& sigma) {
  check_second_moment(sigma);
  target.validate();
  if (sigma.rows() != target.in_dim()) {
    throw InvalidArgument("beta_constant: second moment " + shape_str(sigma) +
                          " for input dim " + std::to_string(target.in_dim()));
  }
  const std::size_t depth = target.depth();
  std::vector<double> wn(depth + 1), bn(depth + 1);  // 1-based
  for (std::size_t j = 1; j <= depth; ++j) {
    wn[j] = frobenius_norm(target.layers[j - 1].weight);
    bn[j] = vector_norm(target.layers[j - 1].bias);
  }
  const double root_sigma = std::sqrt(frobenius_norm(sigma));
  double best = root_sigma;
  for (std::size_t i = 1; i <= depth; ++i) {
    double weight_prod = 1.0;
    for (std::size_t j = 1; j <= i; ++j) weight_prod *= wn[j];
    double bias_sum = 0.0;
    for (std::size_t j = 1; j <= i; ++j) {
      double p = 1.0;
      for (std::size_t k = j + 1; k + 1 <= i; ++k) p *= wn[k];
      bias_sum += p * bn[j];
    }
    best = std::max(best, root_sigma * weight_prod + bias_sum);
  }
  return best;
}

/// beta * sum_i max_k (||Wbar_k||_F + e_k)^(Lbar - i) * e_i.
inline double error_bound(const FnnModel& target, std::span<const double> errors, double beta) {
  const std::size_t depth = target.depth();
  if (errors.size() != depth) {
    throw InvalidArgument("error_bound: " + std::to_string(errors.size()) + " errors for depth " +
                          std::to_string(depth));
  }
  double growth = 0.0;
  for (std::size_t k = 0; k < depth; ++k) {
    growth = std::max(growth, frobenius_norm(target.layers[k].weight) + errors[k]);
  }
  double sum = 0.0;
  for (std::size_t i = 1; i <= depth; ++i) {
    sum += std::pow(growth, static_cast<double>(depth - i)) * errors[i - 1];
  }
  return beta * sum;
}

/// Rank-R adapters whose update is the truncated SVD of each layer's discrepancy.
///
/// Only single-layer groups are constructed; the adapted model keeps the
/// frozen biases. rank == 0 yields no adapters.
inline std::vector<LoraAdapter> optimal_adapters(const FnnModel& frozen, const FnnModel& target,
                                                 const Partition& partition, std::size_t rank) {
  partition.validate(frozen.depth(), target.depth());
  if (!partition.all_singletons()) {
    throw Unsupported("optimal_adapters: only single-layer partition groups are constructed");
  }
  std::vector<LoraAdapter> out;
  if (rank == 0) return out;
  const auto es = discrepancies(frozen, target, partition);
  for (std::size_t i = 0; i < es.size(); ++i) {
    const Matrix& e = es[i];
    if (rank > std::min(e.rows(), e.cols())) {
      throw InvalidArgument("optimal_adapters: rank " + std::to_string(rank) +
                            " exceeds layer dims " + shape_str(e));
    }
    const SvdResult d = svd(e);
    LoraAdapter ad;
    ad.layer_index = partition.groups[i].front();
    ad.b = Matrix(e.rows(), rank);
    ad.a = Matrix(rank, e.cols());
    for (std::size_t k = 0; k < rank; ++k) {
      for (std::size_t r = 0; r < e.rows(); ++r) ad.b(r, k) = d.u(r, k) * d.s[k];
      for (std::size_t c = 0; c < e.cols(); ++c) ad.a(k, c) = d.vt(k, c);
    }
    out.push_back(std::move(ad));
  }
  return out;
}

/// Factor F with F Fᵀ = sigma, used to draw zero-mean inputs with second moment sigma.
inline Matrix second_moment_factor(const Matrix& sigma) {
  check_second_moment(sigma);
  const SvdResult d = svd(sigma);
  Matrix f = d.u;
  for (std::size_t r = 0; r < f.rows(); ++r)
    for (std::size_t k = 0; k < f.cols(); ++k) f(r, k) *= std::sqrt(d.s[k]);
  return f;
}

struct GapEstimate {
  double mean = 0.0;
  double std_error = 0.0;  // sample std / sqrt(n)
};

/// Monte-Carlo estimate of E||f(x) - fbar(x)||_2 with x ~ N(0, sigma).
///
/// Draws are a pure function of seed; samples are processed in fixed chunks.
inline GapEstimate empirical_gap_estimate(const FnnModel& frozen,
                                          std::span<const LoraAdapter> adapters,
                                          const FnnModel& target, const Matrix& sigma,
                                          std::size_t n_samples, std::uint64_t seed) {
  if (n_samples == 0) throw InvalidArgument("empirical_gap: n_samples must be positive");
  if (frozen.in_dim() != target.in_dim() || frozen.out_dim() != target.out_dim()) {
    throw InvalidArgument("empirical_gap: adapted and target models have different I/O dims");
  }
  const Matrix factor = second_moment_factor(sigma);
  if (factor.rows() != frozen.in_dim()) {
    throw InvalidArgument("empirical_gap: second moment " + shape_str(sigma) +
                          " for input dim " + std::to_string(frozen.in_dim()));
  }
  constexpr std::size_t kChunk = 2048;
  Rng rng(seed);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t done = 0; done < n_samples; done += kChunk) {
    const std::size_t n = std::min(kChunk, n_samples - done);
    const Matrix z = rng.gaussian_matrix(n, factor.cols());
    const Matrix x = matmul_nt(z, factor);
    const Matrix y = forward(frozen, adapters, x);
    const Matrix ybar = forward(target, x);
    for (std::size_t r = 0; r < n; ++r) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) {
        const double d = y(r, j) - ybar(r, j);
        d2 += d * d;
      }
      const double d = std::sqrt(d2);
      sum += d;
      sum_sq += d * d;
    }
  }
  const double nn = static_cast<double>(n_samples);
  GapEstimate g;
  g.mean = sum / nn;
  const double var = n_samples > 1 ? std::max(0.0, (sum_sq - nn * g.mean * g.mean) / (nn - 1.0)) : 0.0;
  g.std_error = std::sqrt(var / nn);
  return g;
}

inline double empirical_gap(const FnnModel& frozen, std::span<const LoraAdapter> adapters,
                            const FnnModel& target, const Matrix& sigma, std::size_t n_samples,
                            std::uint64_t seed) {
  return empirical_gap_estimate(frozen, adapters, target, sigma, n_samples, seed).mean;
}

struct BoundReport {
  std::vector<double> e;
  double beta = 0.0;
  std::vector<double> target_norms;
  double bound = 0.0;
  std::optional<double> empirical_error;
  std::optional<double> empirical_std_error;
};

struct BoundOptions {
  std::size_t rank = 1;           // per frozen layer
  std::size_t n_samples = 0;      // 0 skips the Monte-Carlo estimate
  std::uint64_t seed = 0;
};

/// Full bound evaluation; the empirical estimate (when requested) uses the
/// SVD-constructed adapters and therefore needs a singleton partition.
inline BoundReport bound_report(const FnnModel& frozen, const FnnModel& target,
                                const Partition& partition, const Matrix& sigma,
                                const BoundOptions& opts) {
  BoundReport rep;
  const auto es = discrepancies(frozen, target, partition);
  for (std::size_t i = 0; i < es.size(); ++i) {
    rep.e.push_back(layer_error(es[i], partition.groups[i].size() * opts.rank));
    rep.target_norms.push_back(frobenius_norm(target.layers[i].weight));
  }
  rep.beta = beta_constant(target, sigma);
  rep.bound = error_bound(target, rep.e, rep.beta);
  if (opts.n_samples > 0) {
    const auto adapters = optimal_adapters(frozen, target, partition, opts.rank);
    const auto g = empirical_gap_estimate(frozen, adapters, target, sigma, opts.n_samples, opts.seed);
    rep.empirical_error = g.mean;
    rep.empirical_std_error = g.std_error;
  }
  return rep;
}

}  // namespace rmlora
