// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rmlora/linalg.hpp"

namespace rmlora {

/// Affine map x -> W x + b. Weight is out_dim x in_dim.
struct LinearLayer {
  Matrix weight;
  std::vector<double> bias;
  bool frozen = true;

  std::size_t in_dim() const noexcept { return weight.cols(); }
  std::size_t out_dim() const noexcept { return weight.rows(); }

  friend bool operator==(const LinearLayer&, const LinearLayer&) = default;
};

/// Fully connected network; ReLU after every layer except the last.
struct FnnModel {
  std::vector<LinearLayer> layers;

  std::size_t depth() const noexcept { return layers.size(); }
  std::size_t in_dim() const { return layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.back().out_dim(); }

  /// Throws InvalidArgument unless the layer shapes chain.
  void validate() const {
    if (layers.empty()) throw InvalidArgument("FnnModel: no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& layer = layers[l];
      if (layer.bias.size() != layer.out_dim()) {
        throw InvalidArgument("FnnModel: layer " + std::to_string(l) + " bias length " +
                              std::to_string(layer.bias.size()) + " != out_dim " +
                              std::to_string(layer.out_dim()));
      }
      if (l > 0 && layer.in_dim() != layers[l - 1].out_dim()) {
        throw InvalidArgument("FnnModel: layer " + std::to_string(l) + " in_dim " +
                              std::to_string(layer.in_dim()) + " != previous out_dim " +
                              std::to_string(layers[l - 1].out_dim()));
      }
    }
  }

  friend bool operator==(const FnnModel&, const FnnModel&) = default;
};

enum class LossKind { mse, cross_entropy };

/// Rows are samples. For cross_entropy, targets is batch x 1 of class indices.
struct Batch {
  Matrix inputs;
  Matrix targets;

  std::size_t size() const noexcept { return inputs.rows(); }

  void validate() const {
    if (inputs.rows() == 0) throw InvalidArgument("Batch: empty");
    if (targets.rows() != inputs.rows()) {
      throw InvalidArgument("Batch: " + std::to_string(targets.rows()) + " targets for " +
                            std::to_string(inputs.rows()) + " inputs");
    }
  }

  /// Rows selected by index, in the given order.
  Batch select(std::span<const std::size_t> idx) const {
    Batch out{Matrix(idx.size(), inputs.cols()), Matrix(idx.size(), targets.cols())};
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy_n(inputs.row(idx[r]).begin(), inputs.cols(), out.inputs.row(r).begin());
      std::copy_n(targets.row(idx[r]).begin(), targets.cols(), out.targets.row(r).begin());
    }
    return out;
  }
};

inline double relu(double x) noexcept { return x > 0.0 ? x : 0.0; }

}  // namespace rmlora
