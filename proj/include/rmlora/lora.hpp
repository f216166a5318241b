// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>

#include "rmlora/layer.hpp"
#include "rmlora/linalg.hpp"
#include "rmlora/rng.hpp"

namespace rmlora {

inline constexpr double kDefaultLoraStd = 0.02;

/// Low-rank update delta_W = scale * b * a attached to one LinearLayer.
///
/// a is R x in_dim, b is out_dim x R.
struct LoraAdapter {
  Matrix a;
  Matrix b;
  double scale = 1.0;
  std::size_t layer_index = 0;

  std::size_t rank() const noexcept { return a.rows(); }
  std::size_t in_dim() const noexcept { return a.cols(); }
  std::size_t out_dim() const noexcept { return b.rows(); }

  void validate() const {
    if (a.rows() != b.cols()) {
      throw InvalidArgument("LoraAdapter: a is " + shape_str(a) + " but b is " + shape_str(b));
    }
    if (!(scale > 0.0)) throw InvalidArgument("LoraAdapter: scale must be positive");
  }

  void validate_against(const LinearLayer& layer) const {
    validate();
    if (a.cols() != layer.in_dim() || b.rows() != layer.out_dim()) {
      throw InvalidArgument("LoraAdapter: factors " + shape_str(b) + " * " + shape_str(a) +
                            " do not fit layer " + shape_str(layer.weight));
    }
  }

  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

/// Gaussian a, zero b, so the initial update is exactly zero.
inline LoraAdapter init_adapter(std::size_t d1, std::size_t d2, std::size_t rank,
                                std::uint64_t seed, double gaussian_std = kDefaultLoraStd,
                                std::size_t layer_index = 0, double scale = 1.0) {
  if (rank == 0 || rank > std::min(d1, d2)) {
    throw InvalidArgument("init_adapter: rank " + std::to_string(rank) + " not in [1, min(" +
                          std::to_string(d1) + ", " + std::to_string(d2) + ")]");
  }
  if (!(gaussian_std > 0.0)) throw InvalidArgument("init_adapter: gaussian_std must be positive");
  if (!(scale > 0.0)) throw InvalidArgument("init_adapter: scale must be positive");
  Rng rng(seed);
  LoraAdapter ad;
  ad.a = rng.gaussian_matrix(rank, d2, gaussian_std);
  ad.b = Matrix(d1, rank);
  ad.scale = scale;
  ad.layer_index = layer_index;
  return ad;
}

inline Matrix delta_w(const LoraAdapter& ad) { return ad.scale * matmul(ad.b, ad.a); }

/// Adds scale * (x aᵀ) bᵀ to h (rows of x are samples). Returns x aᵀ.
inline Matrix add_lora_term(const LoraAdapter& ad, const Matrix& x, Matrix& h) {
  Matrix xa = matmul_nt(x, ad.a);
  const Matrix xab = matmul_nt(xa, ad.b);
  auto hd = h.data();
  auto d = xab.data();
  for (std::size_t i = 0; i < hd.size(); ++i) hd[i] += ad.scale * d[i];
  return xa;
}

/// x Wᵀ + 1 bᵀ for a batch x (rows are samples).
inline Matrix linear_forward(const LinearLayer& layer, const Matrix& x) {
  if (x.cols() != layer.in_dim()) {
    throw InvalidArgument("linear_forward: input " + shape_str(x) + " for layer " +
                          shape_str(layer.weight));
  }
  Matrix h = matmul_nt(x, layer.weight);
  for (std::size_t r = 0; r < h.rows(); ++r) {
    auto hr = h.row(r);
    for (std::size_t j = 0; j < hr.size(); ++j) hr[j] += layer.bias[j];
  }
  return h;
}

/// Layer output with the adapter applied as two thin products; delta_W is never formed.
inline Matrix adapted_forward(const LinearLayer& layer, const LoraAdapter& ad, const Matrix& x) {
  ad.validate_against(layer);
  Matrix h = linear_forward(layer, x);
  add_lora_term(ad, x, h);
  return h;
}

inline LinearLayer merge(const LinearLayer& layer, const LoraAdapter& ad) {
  ad.validate_against(layer);
  LinearLayer out = layer;
  out.weight = layer.weight + delta_w(ad);
  return out;
}

/// ||M Mᵀ - I||_F^2 for the out_dim x out_dim Gram of M.
inline double gram_deviation(const Matrix& m) {
  Matrix g = matmul_nt(m, m);
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= 1.0;
  return frobenius_norm_sq(g);
}

/// ||dW dWᵀ - I||_F^2 using the output-side Gram, unnormalized.
inline double orthogonality_loss_of_delta(const LoraAdapter& ad) { return gram_deviation(delta_w(ad)); }

}  // namespace rmlora
