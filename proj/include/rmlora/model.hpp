// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rmlora/layer.hpp"
#include "rmlora/linalg.hpp"
#include "rmlora/lora.hpp"

namespace rmlora {

namespace detail {

// adapter_for[l] points at the adapter attached to layer l, if any.
inline std::vector<const LoraAdapter*> index_adapters(const FnnModel& model,
                                                      std::span<const LoraAdapter> adapters) {
  std::vector<const LoraAdapter*> adapter_for(model.depth(), nullptr);
  for (const auto& ad : adapters) {
    if (ad.layer_index >= model.depth()) {
      throw InvalidArgument("adapter targets layer " + std::to_string(ad.layer_index) +
                            " of a " + std::to_string(model.depth()) + "-layer model");
    }
    if (adapter_for[ad.layer_index] != nullptr) {
      throw InvalidArgument("two adapters attached to layer " + std::to_string(ad.layer_index));
    }
    ad.validate_against(model.layers[ad.layer_index]);
    adapter_for[ad.layer_index] = &ad;
  }
  return adapter_for;
}

}  // namespace detail

/// Intermediate values kept for reverse mode.
struct ForwardTrace {
  std::vector<Matrix> inputs;          // input to each layer
  std::vector<Matrix> pre_activation;  // x Wᵀ + b (+ lora term) per layer
  std::vector<Matrix> lora_hidden;     // x aᵀ per adapted layer, empty otherwise

  const Matrix& output() const { return pre_activation.back(); }
};

inline ForwardTrace forward_trace(const FnnModel& model, std::span<const LoraAdapter> adapters,
                                  const Matrix& inputs) {
  model.validate();
  if (inputs.cols() != model.in_dim()) {
    throw InvalidArgument("forward: input " + shape_str(inputs) + " for model with in_dim " +
                          std::to_string(model.in_dim()));
  }
  const auto adapter_for = detail::index_adapters(model, adapters);
  ForwardTrace tr;
  tr.inputs.reserve(model.depth());
  tr.pre_activation.reserve(model.depth());
  tr.lora_hidden.resize(model.depth());
  Matrix z = inputs;
  for (std::size_t l = 0; l < model.depth(); ++l) {
    Matrix h = linear_forward(model.layers[l], z);
    if (adapter_for[l]) tr.lora_hidden[l] = add_lora_term(*adapter_for[l], z, h);
    tr.inputs.push_back(std::move(z));
    if (l + 1 < model.depth()) {
      z = h;
      for (double& v : z.data()) v = relu(v);
    }
    tr.pre_activation.push_back(std::move(h));
  }
  return tr;
}

inline Matrix forward(const FnnModel& model, std::span<const LoraAdapter> adapters,
                      const Matrix& inputs) {
  auto tr = forward_trace(model, adapters, inputs);
  return std::move(tr.pre_activation.back());
}

inline Matrix forward(const FnnModel& model, const Matrix& inputs) {
  return forward(model, std::span<const LoraAdapter>{}, inputs);
}

inline std::size_t class_index(double t, std::size_t n_classes) {
  if (!(t >= 0.0) || t != std::floor(t) || t >= static_cast<double>(n_classes)) {
    throw InvalidArgument("cross_entropy: target " + std::to_string(t) + " is not a class in [0, " +
                          std::to_string(n_classes) + ")");
  }
  return static_cast<std::size_t>(t);
}

/// Mean loss over the batch and its gradient with respect to the outputs.
///
/// mse is the per-sample squared Euclidean error; cross_entropy uses a
/// stable log-sum-exp over the logits.
inline double loss_with_output_grad(const Matrix& outputs, const Matrix& targets, LossKind kind,
                                    Matrix* grad) {
  const std::size_t n = outputs.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  if (grad) *grad = Matrix(outputs.rows(), outputs.cols());
  double total = 0.0;
  if (kind == LossKind::mse) {
    if (!targets.same_shape(outputs)) {
      throw InvalidArgument("mse: targets " + shape_str(targets) + " vs outputs " +
                            shape_str(outputs));
    }
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      const double d = outputs.data()[i] - targets.data()[i];
      total += d * d;
      if (grad) grad->data()[i] = 2.0 * d * inv_n;
    }
  } else {
    if (targets.cols() != 1 || targets.rows() != n) {
      throw InvalidArgument("cross_entropy: targets must be " + std::to_string(n) + "x1");
    }
    for (std::size_t r = 0; r < n; ++r) {
      auto y = outputs.row(r);
      const std::size_t c = class_index(targets(r, 0), y.size());
      const double mx = *std::max_element(y.begin(), y.end());
      double sum = 0.0;
      for (double v : y) sum += std::exp(v - mx);
      const double lse = mx + std::log(sum);
      total += lse - y[c];
      if (grad) {
        auto g = grad->row(r);
        for (std::size_t j = 0; j < y.size(); ++j) g[j] = std::exp(y[j] - lse) * inv_n;
        g[c] -= inv_n;
      }
    }
  }
  return total * inv_n;
}

inline double loss(const FnnModel& model, std::span<const LoraAdapter> adapters,
                   const Batch& batch, LossKind kind) {
  batch.validate();
  return loss_with_output_grad(forward(model, adapters, batch.inputs), batch.targets, kind,
                               nullptr);
}

/// Fraction of rows whose argmax output equals the class target.
inline double accuracy(const Matrix& outputs, const Matrix& targets) {
  std::size_t hits = 0;
  for (std::size_t r = 0; r < outputs.rows(); ++r) {
    auto y = outputs.row(r);
    const auto best = static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
    if (best == class_index(targets(r, 0), y.size())) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(outputs.rows());
}

struct AdapterGrad {
  Matrix a;
  Matrix b;
};

struct LossAndGrads {
  double loss = 0.0;
  std::vector<AdapterGrad> adapters;       // parallel to the adapter span
  std::vector<std::vector<double>> biases;  // per layer; filled only on request
};

/// Batch-mean loss and exact reverse-mode gradients with respect to the
/// adapter factors (and optionally the layer biases). Base weights are read only.
inline LossAndGrads loss_and_grads(const FnnModel& model, std::span<const LoraAdapter> adapters,
                                   const Batch& batch, LossKind kind,
                                   bool with_bias_grads = false) {
  batch.validate();
  const ForwardTrace tr = forward_trace(model, adapters, batch.inputs);
  LossAndGrads out;
  Matrix g;
  out.loss = loss_with_output_grad(tr.output(), batch.targets, kind, &g);
  if (!std::isfinite(out.loss)) throw NumericalError("loss is not finite (diverged)");

  std::vector<std::size_t> slot(model.depth(), adapters.size());
  for (std::size_t k = 0; k < adapters.size(); ++k) slot[adapters[k].layer_index] = k;
  out.adapters.resize(adapters.size());
  if (with_bias_grads) out.biases.resize(model.depth());

  for (std::size_t l = model.depth(); l-- > 0;) {
    const auto& layer = model.layers[l];
    if (with_bias_grads) {
      auto& gb = out.biases[l];
      gb.assign(layer.out_dim(), 0.0);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto gr = g.row(r);
        for (std::size_t j = 0; j < gr.size(); ++j) gb[j] += gr[j];
      }
    }
    const LoraAdapter* ad = slot[l] < adapters.size() ? &adapters[slot[l]] : nullptr;
    Matrix gb_hidden;  // g b, batch x R
    if (ad) {
      auto& grad = out.adapters[slot[l]];
      grad.b = ad->scale * matmul_tn(g, tr.lora_hidden[l]);
      gb_hidden = matmul(g, ad->b);
      grad.a = ad->scale * matmul_tn(gb_hidden, tr.inputs[l]);
    }
    if (l == 0) break;
    Matrix dz = matmul(g, layer.weight);
    if (ad) {
      const Matrix extra = matmul(gb_hidden, ad->a);
      for (std::size_t i = 0; i < dz.size(); ++i) dz.data()[i] += ad->scale * extra.data()[i];
    }
    const Matrix& h_prev = tr.pre_activation[l - 1];
    for (std::size_t i = 0; i < dz.size(); ++i) {
      if (!(h_prev.data()[i] > 0.0)) dz.data()[i] = 0.0;
    }
    g = std::move(dz);
  }
  return out;
}

}  // namespace rmlora
