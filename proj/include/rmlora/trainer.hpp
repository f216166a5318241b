// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rmlora/layer.hpp"
#include "rmlora/linalg.hpp"
#include "rmlora/lora.hpp"
#include "rmlora/model.hpp"
#include "rmlora/regmask.hpp"
#include "rmlora/rng.hpp"

namespace rmlora {

enum class OptimizerKind { sgd, adam };

/// Every knob of a run. The seed determines the whole run given the data.
struct TrainConfig {
  std::size_t total_steps = 1000;
  double learning_rate = 1e-2;
  std::size_t batch_size = 32;
  std::size_t rank = 8;
  std::size_t r_hat = 4;
  double lambda_reg = kDefaultLambdaReg;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::mse;
  double rank_tol = kDefaultRankTol;
  bool train_biases = false;
  std::size_t diag_interval = 50;
  double init_std = kDefaultLoraStd;
  double scale = 1.0;
  std::vector<std::size_t> adapt_layers;  // empty: every layer
  double divergence_threshold = 1e12;

  void validate() const {
    auto fail = [](const std::string& m) { throw InvalidArgument("TrainConfig: " + m); };
    if (rank == 0) fail("rank must be positive");
    if (r_hat > rank) fail("r_hat must not exceed rank");
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (batch_size == 0) fail("batch_size must be positive");
    if (!(lambda_reg >= 0.0)) fail("lambda_reg must be non-negative");
    if (!(rank_tol > 0.0 && rank_tol < 1.0)) fail("rank_tol must lie in (0, 1)");
    if (!(init_std > 0.0)) fail("init_std must be positive");
    if (!(scale > 0.0)) fail("scale must be positive");
    if (diag_interval == 0) fail("diag_interval must be positive");
    if (optimizer == OptimizerKind::adam) {
      if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1 must lie in [0, 1)");
      if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2 must lie in [0, 1)");
      if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
    }
  }

  std::vector<std::size_t> adapted_layers(const FnnModel& model) const {
    if (adapt_layers.empty()) {
      std::vector<std::size_t> all(model.depth());
      std::iota(all.begin(), all.end(), std::size_t{0});
      return all;
    }
    return adapt_layers;
  }
};

/// Train and test splits.
struct Dataset {
  Batch train;
  Batch test;
};

struct AdapterDiagnostics {
  std::size_t layer_index = 0;
  std::size_t delta_rank = 0;
  double delta_orth_loss = 0.0;
};

struct DiagnosticsReport {
  std::size_t step = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  std::optional<double> train_acc;
  std::optional<double> test_acc;
  std::optional<double> generalization_gap;  // train_acc - test_acc
  std::vector<AdapterDiagnostics> adapters;
};

/// Loss, accuracy and delta_W structure at the current parameters.
inline DiagnosticsReport diagnose(const FnnModel& model, std::span<const LoraAdapter> adapters,
                                  const Dataset& data, const TrainConfig& cfg,
                                  std::size_t step = 0) {
  DiagnosticsReport rep;
  rep.step = step;
  const Matrix train_out = forward(model, adapters, data.train.inputs);
  const Matrix test_out = forward(model, adapters, data.test.inputs);
  rep.train_loss = loss_with_output_grad(train_out, data.train.targets, cfg.loss, nullptr);
  rep.test_loss = loss_with_output_grad(test_out, data.test.targets, cfg.loss, nullptr);
  if (cfg.loss == LossKind::cross_entropy) {
    rep.train_acc = accuracy(train_out, data.train.targets);
    rep.test_acc = accuracy(test_out, data.test.targets);
    rep.generalization_gap = *rep.train_acc - *rep.test_acc;
  }
  for (const auto& ad : adapters) {
    const Matrix dw = delta_w(ad);
    rep.adapters.push_back({ad.layer_index, numerical_rank(dw, cfg.rank_tol), gram_deviation(dw)});
  }
  return rep;
}

/// First and second moments for one parameter block.
struct AdamSlot {
  std::vector<double> m;
  std::vector<double> v;
};

struct OptimizerState {
  std::size_t t = 0;
  std::vector<AdamSlot> a;
  std::vector<AdamSlot> b;
  std::vector<AdamSlot> bias;
};

namespace detail {

inline void sgd_update(std::span<double> w, std::span<const double> g, double lr) {
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
}

inline void adam_update(std::span<double> w, std::span<const double> g, AdamSlot& slot,
                        const TrainConfig& cfg, std::size_t t) {
  if (slot.m.size() != w.size()) {
    slot.m.assign(w.size(), 0.0);
    slot.v.assign(w.size(), 0.0);
  }
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    slot.m[i] = cfg.adam_beta1 * slot.m[i] + (1.0 - cfg.adam_beta1) * g[i];
    slot.v[i] = cfg.adam_beta2 * slot.v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
    const double mhat = slot.m[i] / c1;
    const double vhat = slot.v[i] / c2;
    w[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
  }
}

inline void update(std::span<double> w, std::span<const double> g, AdamSlot& slot,
                   const TrainConfig& cfg, std::size_t t) {
  if (cfg.optimizer == OptimizerKind::sgd) {
    sgd_update(w, g, cfg.learning_rate);
  } else {
    adam_update(w, g, slot, cfg, t);
  }
}

}  // namespace detail

/// One optimization step: task gradients on the batch, plus lambda_reg times
/// the orthogonality gradients, masked to r_hat random directions per adapter,
/// then an SGD or Adam update. With Adam the mask is applied before the
/// moments are accumulated.
///
/// Base weights are never written; biases only when cfg.train_biases.
/// Returns the task loss on the batch.
inline double rm_lora_step(FnnModel& model, std::vector<LoraAdapter>& adapters,
                           OptimizerState& opt, const Batch& batch, const TrainConfig& cfg,
                           Rng& mask_rng) {
  LossAndGrads lg = loss_and_grads(model, adapters, batch, cfg.loss, cfg.train_biases);
  if (!(lg.loss <= cfg.divergence_threshold)) {
    throw NumericalError("training diverged: batch loss " + std::to_string(lg.loss));
  }
  ++opt.t;
  opt.a.resize(adapters.size());
  opt.b.resize(adapters.size());
  for (std::size_t k = 0; k < adapters.size(); ++k) {
    auto& ad = adapters[k];
    Matrix ga = std::move(lg.adapters[k].a);
    Matrix gb = std::move(lg.adapters[k].b);
    if (cfg.lambda_reg != 0.0) {
      const RegGrads rg = reg_grads(ad.a, ad.b);
      ga = ga + cfg.lambda_reg * rg.a;
      gb = gb + cfg.lambda_reg * rg.b;
    }
    const MaskPair masks = sample_mask(ad.rank(), cfg.r_hat, ad.a.cols(), ad.b.rows(), mask_rng);
    auto [ma, mb] = apply_mask(ga, gb, masks);
    detail::update(ad.a.data(), ma.data(), opt.a[k], cfg, opt.t);
    detail::update(ad.b.data(), mb.data(), opt.b[k], cfg, opt.t);
  }
  if (cfg.train_biases) {
    opt.bias.resize(model.depth());
    for (std::size_t l = 0; l < model.depth(); ++l) {
      detail::update(model.layers[l].bias, lg.biases[l], opt.bias[l], cfg, opt.t);
    }
  }
  return lg.loss;
}

/// Shuffle-each-epoch mini-batch order; the final batch of an epoch may be short.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
      : rng_(seed), perm_(n), batch_size_(batch_size), pos_(n) {
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
  }

  std::span<const std::size_t> next() {
    if (pos_ >= perm_.size()) {
      rng_.shuffle(perm_);
      pos_ = 0;
    }
    const std::size_t n = std::min(batch_size_, perm_.size() - pos_);
    std::span<const std::size_t> out(perm_.data() + pos_, n);
    pos_ += n;
    return out;
  }

 private:
  Rng rng_;
  std::vector<std::size_t> perm_;
  std::size_t batch_size_;
  std::size_t pos_;
};

/// Sub-seed streams of a run.
enum class Stream : std::uint64_t { init = 1, batches = 2, masks = 3 };

inline std::uint64_t stream_seed(std::uint64_t seed, Stream s) {
  return mix_seed(seed, static_cast<std::uint64_t>(s));
}

/// Fresh adapters (b = 0) for every adapted layer of model.
inline std::vector<LoraAdapter> init_adapters(const FnnModel& model, const TrainConfig& cfg) {
  std::vector<LoraAdapter> out;
  const std::uint64_t base = stream_seed(cfg.seed, Stream::init);
  for (std::size_t l : cfg.adapted_layers(model)) {
    if (l >= model.depth()) {
      throw InvalidArgument("TrainConfig: adapt layer " + std::to_string(l) + " out of range");
    }
    const auto& layer = model.layers[l];
    out.push_back(init_adapter(layer.out_dim(), layer.in_dim(), cfg.rank, mix_seed(base, l),
                               cfg.init_std, l, cfg.scale));
  }
  return out;
}

struct TrainResult {
  FnnModel model;  // frozen weights; biases differ only with train_biases
  std::vector<LoraAdapter> adapters;
  std::vector<DiagnosticsReport> reports;
};

/// A run that stopped early; carries the diagnostics gathered so far.
class TrainingFailure : public NumericalError {
 public:
  TrainingFailure(const std::string& what, std::size_t step, std::vector<DiagnosticsReport> partial)
      : NumericalError(what, step), partial_(std::move(partial)) {}

  const std::vector<DiagnosticsReport>& partial_reports() const noexcept { return partial_; }

 private:
  std::vector<DiagnosticsReport> partial_;
};

/// Runs cfg.total_steps steps from fresh adapters. Reports are emitted at
/// step 0, every diag_interval steps, and at the final step.
inline TrainResult train(const FnnModel& frozen, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  frozen.validate();
  data.train.validate();
  data.test.validate();
  TrainResult res{frozen, init_adapters(frozen, cfg), {}};
  BatchSampler sampler(data.train.size(), cfg.batch_size, stream_seed(cfg.seed, Stream::batches));
  Rng mask_rng(stream_seed(cfg.seed, Stream::masks));
  OptimizerState opt;

  res.reports.push_back(diagnose(res.model, res.adapters, data, cfg, 0));
  for (std::size_t t = 1; t <= cfg.total_steps; ++t) {
    const Batch batch = data.train.select(sampler.next());
    try {
      rm_lora_step(res.model, res.adapters, opt, batch, cfg, mask_rng);
    } catch (const NumericalError& e) {
      throw TrainingFailure(std::string(e.what()) + " at step " + std::to_string(t), t,
                            std::move(res.reports));
    }
    if (t % cfg.diag_interval == 0 || t == cfg.total_steps) {
      res.reports.push_back(diagnose(res.model, res.adapters, data, cfg, t));
    }
  }
  return res;
}

enum class Variant { lora, r_lora, gm_lora, rm_lora };

inline constexpr Variant kAllVariants[] = {Variant::lora, Variant::r_lora, Variant::gm_lora,
                                          Variant::rm_lora};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::lora: return "lora";
    case Variant::r_lora: return "r_lora";
    case Variant::gm_lora: return "gm_lora";
    case Variant::rm_lora: return "rm_lora";
  }
  return "?";
}

/// Derives the variant's configuration from base: lora and gm_lora drop the
/// regularizer; lora and r_lora update all R directions.
inline TrainConfig variant_config(TrainConfig base, Variant v) {
  if (v == Variant::lora || v == Variant::gm_lora) base.lambda_reg = 0.0;
  if (v == Variant::lora || v == Variant::r_lora) base.r_hat = base.rank;
  return base;
}

struct SweepRow {
  Variant variant = Variant::lora;
  std::optional<std::uint64_t> seed;  // empty for aggregate rows
  bool ok = true;
  std::string error;
  double train_loss = 0.0;
  double test_loss = 0.0;
  std::optional<double> train_acc;
  std::optional<double> test_acc;
  std::optional<double> gap;  // train_acc - test_acc
  double loss_gap = 0.0;      // test_loss - train_loss
  double delta_rank = 0.0;    // mean over adapters
  double delta_orth_loss = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> runs;     // variant-major, then seed
  std::vector<SweepRow> medians;  // one per variant
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline SweepRow summarize_run(Variant v, std::uint64_t seed, const DiagnosticsReport& rep) {
  SweepRow row;
  row.variant = v;
  row.seed = seed;
  row.train_loss = rep.train_loss;
  row.test_loss = rep.test_loss;
  row.train_acc = rep.train_acc;
  row.test_acc = rep.test_acc;
  row.gap = rep.generalization_gap;
  row.loss_gap = rep.test_loss - rep.train_loss;
  for (const auto& a : rep.adapters) {
    row.delta_rank += static_cast<double>(a.delta_rank);
    row.delta_orth_loss += a.delta_orth_loss;
  }
  if (!rep.adapters.empty()) {
    row.delta_rank /= static_cast<double>(rep.adapters.size());
    row.delta_orth_loss /= static_cast<double>(rep.adapters.size());
  }
  return row;
}

/// Runs each variant for seeds base.seed .. base.seed + n_seeds - 1 and takes
/// per-variant medians over the successful runs. A failing cell is recorded
/// and does not stop the others.
inline SweepResult ablation_sweep(const FnnModel& frozen, const Dataset& data,
                                  const TrainConfig& base, std::size_t n_seeds,
                                  std::span<const Variant> variants = kAllVariants) {
  if (n_seeds == 0) throw InvalidArgument("ablation_sweep: n_seeds must be positive");
  base.validate();
  SweepResult out;
  for (Variant v : variants) {
    std::vector<SweepRow> cells;
    for (std::size_t k = 0; k < n_seeds; ++k) {
      TrainConfig cfg = variant_config(base, v);
      cfg.seed = base.seed + k;
      try {
        const TrainResult r = train(frozen, data, cfg);
        cells.push_back(summarize_run(v, cfg.seed, r.reports.back()));
      } catch (const std::exception& e) {
        SweepRow row;
        row.variant = v;
        row.seed = cfg.seed;
        row.ok = false;
        row.error = e.what();
        row.train_loss = row.test_loss = row.loss_gap = std::nan("");
        row.delta_rank = row.delta_orth_loss = std::nan("");
        cells.push_back(std::move(row));
      }
    }
    SweepRow agg;
    agg.variant = v;
    auto collect = [&](auto field) {
      std::vector<double> xs;
      for (const auto& c : cells)
        if (c.ok) xs.push_back(field(c));
      return median(std::move(xs));
    };
    auto collect_opt = [&](auto field) -> std::optional<double> {
      std::vector<double> xs;
      for (const auto& c : cells)
        if (c.ok && field(c)) xs.push_back(*field(c));
      if (xs.empty()) return std::nullopt;
      return median(std::move(xs));
    };
    agg.ok = std::any_of(cells.begin(), cells.end(), [](const SweepRow& c) { return c.ok; });
    agg.train_loss = collect([](const SweepRow& c) { return c.train_loss; });
    agg.test_loss = collect([](const SweepRow& c) { return c.test_loss; });
    agg.loss_gap = collect([](const SweepRow& c) { return c.loss_gap; });
    agg.delta_rank = collect([](const SweepRow& c) { return c.delta_rank; });
    agg.delta_orth_loss = collect([](const SweepRow& c) { return c.delta_orth_loss; });
    agg.train_acc = collect_opt([](const SweepRow& c) { return c.train_acc; });
    agg.test_acc = collect_opt([](const SweepRow& c) { return c.test_acc; });
    agg.gap = collect_opt([](const SweepRow& c) { return c.gap; });
    out.medians.push_back(std::move(agg));
    for (auto& c : cells) out.runs.push_back(std::move(c));
  }
  return out;
}

}  // namespace rmlora
