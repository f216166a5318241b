// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>

#include "rmlora/layer.hpp"
#include "rmlora/linalg.hpp"
#include "rmlora/model.hpp"
#include "rmlora/rng.hpp"
#include "rmlora/trainer.hpp"

namespace rmlora {

/// Teacher-student task: a random frozen network, a target obtained by adding
/// a rank-k perturbation scale * U Vᵀ (orthonormal U, V) to every weight
/// matrix, and Gaussian inputs labelled by the target.
struct TaskSpec {
  std::size_t in_dim = 32;
  std::size_t width = 32;
  std::size_t out_dim = 32;
  std::size_t depth = 2;
  double weight_std = 0.0;  // 0: 1/sqrt(fan_in)
  double bias_std = 0.0;
  std::size_t perturb_rank = 8;
  double perturb_scale = 1.0;
  std::size_t n_train = 256;
  std::size_t n_test = 1024;
  double noise_std = 0.0;
  double input_std = 1.0;  // second moment input_std^2 * I
  bool classification = false;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw InvalidArgument("TaskSpec: " + m); };
    if (in_dim == 0 || width == 0 || out_dim == 0 || depth == 0) fail("dims must be positive");
    if (n_train == 0 || n_test == 0) fail("sample counts must be positive");
    if (!(noise_std >= 0.0)) fail("noise_std must be non-negative");
    if (!(input_std > 0.0)) fail("input_std must be positive");
    if (!(weight_std >= 0.0) || !(bias_std >= 0.0)) fail("weight_std/bias_std must be >= 0");
    if (!(perturb_scale >= 0.0)) fail("perturb_scale must be non-negative");
    if (classification && out_dim < 2) fail("classification needs out_dim >= 2");
  }
};

struct GeneratedTask {
  FnnModel frozen;
  FnnModel target;
  Matrix sigma;
  Dataset data;
  bool classification = false;
};

/// n x k matrix with orthonormal columns (left singular vectors of a Gaussian draw).
inline Matrix random_orthonormal_columns(std::size_t n, std::size_t k, Rng& rng) {
  if (k > n) throw InvalidArgument("random_orthonormal_columns: k > n");
  if (k == 0) return Matrix(n, 0);
  return svd(rng.gaussian_matrix(n, k)).u;
}

inline FnnModel random_fnn(const TaskSpec& spec, Rng& rng) {
  FnnModel m;
  for (std::size_t l = 0; l < spec.depth; ++l) {
    const std::size_t in = l == 0 ? spec.in_dim : spec.width;
    const std::size_t out = l + 1 == spec.depth ? spec.out_dim : spec.width;
    const double std = spec.weight_std > 0.0 ? spec.weight_std : 1.0 / std::sqrt(double(in));
    LinearLayer layer;
    layer.weight = rng.gaussian_matrix(out, in, std);
    layer.bias.resize(out);
    for (double& b : layer.bias) b = spec.bias_std * rng.normal();
    m.layers.push_back(std::move(layer));
  }
  return m;
}

/// Deterministic in spec.seed. Target biases equal the frozen biases.
inline GeneratedTask generate_task(const TaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  GeneratedTask t;
  t.classification = spec.classification;
  t.frozen = random_fnn(spec, rng);
  t.target = t.frozen;
  for (auto& layer : t.target.layers) {
    const std::size_t k = std::min({spec.perturb_rank, layer.out_dim(), layer.in_dim()});
    if (k == 0 || spec.perturb_scale == 0.0) continue;
    const Matrix u = random_orthonormal_columns(layer.out_dim(), k, rng);
    const Matrix v = random_orthonormal_columns(layer.in_dim(), k, rng);
    layer.weight = layer.weight + spec.perturb_scale * matmul_nt(u, v);
  }
  t.sigma = (spec.input_std * spec.input_std) * Matrix::identity(spec.in_dim);

  auto draw = [&](std::size_t n) {
    Batch b;
    b.inputs = rng.gaussian_matrix(n, spec.in_dim, spec.input_std);
    Matrix y = forward(t.target, b.inputs);
    if (spec.noise_std > 0.0) {
      for (double& v : y.data()) v += spec.noise_std * rng.normal();
    }
    if (spec.classification) {
      b.targets = Matrix(n, 1);
      for (std::size_t r = 0; r < n; ++r) {
        auto row = y.row(r);
        b.targets(r, 0) = static_cast<double>(std::max_element(row.begin(), row.end()) - row.begin());
      }
    } else {
      b.targets = std::move(y);
    }
    return b;
  };
  t.data.train = draw(spec.n_train);
  t.data.test = draw(spec.n_test);
  return t;
}

}  // namespace rmlora
