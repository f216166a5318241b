// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rmlora/io.hpp"
#include "rmlora/synthetic.hpp"
#include "rmlora/theory.hpp"
#include "rmlora/trainer.hpp"

// Config-driven pipelines behind the command-line tool. Each run_* function
// reads a resolved JSON config and writes its artifacts into an output dir.

namespace rmlora::experiment {

namespace fs = std::filesystem;
using io::json;

enum ExitStatus : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kNumericalError = 3,
  kIoError = 4,
};

struct ExperimentSpec {
  std::string command;  // gen-data | train | sweep | bound | diagnose
  fs::path config_path;
  fs::path output_dir;
  std::vector<std::string> overrides;  // dotted.key=value
  std::optional<std::uint64_t> seed;
};

// ---- config ----------------------------------------------------------------

/// Applies `a.b.c=value`; value is parsed as JSON when possible, else kept as a string.
inline void apply_override(json& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw InvalidArgument("override '" + kv + "' is not key=value");
  }
  const std::string key = kv.substr(0, eq);
  const std::string text = kv.substr(eq + 1);
  json value = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = text;
  json* node = &cfg;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) throw InvalidArgument("override key '" + key + "' has an empty segment");
    if (!node->is_object()) throw InvalidArgument("override key '" + key + "' crosses a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

inline void check_keys(const json& j, const std::string& section, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw InvalidArgument("config section '" + section + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw InvalidArgument("unknown config key '" + section + "." + k + "'");
  }
}

inline json section(const json& cfg, const char* name) {
  return cfg.contains(name) ? cfg.at(name) : json::object();
}

/// Loads the config file (if any), then --set overrides, then --seed.
inline json resolve_config(const ExperimentSpec& spec) {
  json cfg = json::object();
  if (!spec.config_path.empty()) cfg = io::read_json(spec.config_path);
  if (!cfg.is_object()) throw InvalidArgument("config root must be an object");
  check_keys(cfg, "<root>", {"data", "train", "sweep", "bound", "diagnose"});
  for (const auto& kv : spec.overrides) apply_override(cfg, kv);
  if (spec.seed) {
    for (const char* s : {"data", "train", "bound"}) cfg[s]["seed"] = *spec.seed;
  }
  return cfg;
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config key '") + key + "': " + e.what());
  }
}

inline TaskSpec task_spec_from_json(const json& j) {
  check_keys(j, "data",
             {"in_dim", "width", "out_dim", "depth", "weight_std", "bias_std", "perturb_rank",
              "perturb_scale", "n_train", "n_test", "noise_std", "input_std", "task", "seed",
              "manifest"});
  TaskSpec t;
  read_opt(j, "in_dim", t.in_dim);
  read_opt(j, "width", t.width);
  read_opt(j, "out_dim", t.out_dim);
  read_opt(j, "depth", t.depth);
  read_opt(j, "weight_std", t.weight_std);
  read_opt(j, "bias_std", t.bias_std);
  read_opt(j, "perturb_rank", t.perturb_rank);
  read_opt(j, "perturb_scale", t.perturb_scale);
  read_opt(j, "n_train", t.n_train);
  read_opt(j, "n_test", t.n_test);
  read_opt(j, "noise_std", t.noise_std);
  read_opt(j, "input_std", t.input_std);
  read_opt(j, "seed", t.seed);
  std::string task = "regression";
  read_opt(j, "task", task);
  if (task != "regression" && task != "classification") {
    throw InvalidArgument("data.task must be 'regression' or 'classification'");
  }
  t.classification = task == "classification";
  t.validate();
  return t;
}

inline json task_spec_to_json(const TaskSpec& t) {
  return {{"in_dim", t.in_dim},         {"width", t.width},
          {"out_dim", t.out_dim},       {"depth", t.depth},
          {"weight_std", t.weight_std}, {"bias_std", t.bias_std},
          {"perturb_rank", t.perturb_rank}, {"perturb_scale", t.perturb_scale},
          {"n_train", t.n_train},       {"n_test", t.n_test},
          {"noise_std", t.noise_std},   {"input_std", t.input_std},
          {"task", t.classification ? "classification" : "regression"},
          {"seed", t.seed}};
}

inline TrainConfig train_config_from_json(const json& j, LossKind default_loss) {
  check_keys(j, "train",
             {"total_steps", "learning_rate", "batch_size", "rank", "r_hat", "lambda_reg",
              "optimizer", "adam_beta1", "adam_beta2", "adam_eps", "seed", "loss", "rank_tol",
              "train_biases", "diag_interval", "init_std", "scale", "adapt_layers"});
  TrainConfig c;
  c.loss = default_loss;
  read_opt(j, "total_steps", c.total_steps);
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "rank", c.rank);
  c.r_hat = c.rank / 2;
  read_opt(j, "r_hat", c.r_hat);
  read_opt(j, "lambda_reg", c.lambda_reg);
  read_opt(j, "adam_beta1", c.adam_beta1);
  read_opt(j, "adam_beta2", c.adam_beta2);
  read_opt(j, "adam_eps", c.adam_eps);
  read_opt(j, "seed", c.seed);
  read_opt(j, "rank_tol", c.rank_tol);
  read_opt(j, "train_biases", c.train_biases);
  read_opt(j, "diag_interval", c.diag_interval);
  read_opt(j, "init_std", c.init_std);
  read_opt(j, "scale", c.scale);
  read_opt(j, "adapt_layers", c.adapt_layers);
  std::string opt = "sgd";
  read_opt(j, "optimizer", opt);
  if (opt == "sgd") {
    c.optimizer = OptimizerKind::sgd;
  } else if (opt == "adam") {
    c.optimizer = OptimizerKind::adam;
  } else {
    throw InvalidArgument("train.optimizer must be 'sgd' or 'adam'");
  }
  if (j.contains("loss")) {
    std::string l;
    read_opt(j, "loss", l);
    if (l == "mse") {
      c.loss = LossKind::mse;
    } else if (l == "cross_entropy") {
      c.loss = LossKind::cross_entropy;
    } else {
      throw InvalidArgument("train.loss must be 'mse' or 'cross_entropy'");
    }
  }
  c.validate();
  return c;
}

inline json train_config_to_json(const TrainConfig& c) {
  return {{"total_steps", c.total_steps},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"rank", c.rank},
          {"r_hat", c.r_hat},
          {"lambda_reg", c.lambda_reg},
          {"optimizer", c.optimizer == OptimizerKind::sgd ? "sgd" : "adam"},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"seed", c.seed},
          {"loss", c.loss == LossKind::mse ? "mse" : "cross_entropy"},
          {"rank_tol", c.rank_tol},
          {"train_biases", c.train_biases},
          {"diag_interval", c.diag_interval},
          {"init_std", c.init_std},
          {"scale", c.scale},
          {"adapt_layers", c.adapt_layers}};
}

// ---- datasets and manifests -------------------------------------------------

struct LoadedTask {
  FnnModel frozen;
  FnnModel target;
  Matrix sigma;
  Dataset data;
  bool classification = false;

  LossKind default_loss() const { return classification ? LossKind::cross_entropy : LossKind::mse; }
};

/// Writes train.csv, test.csv and manifest.json into dir; returns the manifest path.
inline fs::path write_task(const fs::path& dir, const GeneratedTask& task, const TaskSpec& spec) {
  fs::create_directories(dir);
  io::write_file(dir / "train.csv", io::dataset_to_csv(task.data.train, task.classification));
  io::write_file(dir / "test.csv", io::dataset_to_csv(task.data.test, task.classification));
  const json manifest = {{"format", "rmlora-manifest"},
                         {"version", 1},
                         {"task", task.classification ? "classification" : "regression"},
                         {"in_dim", spec.in_dim},
                         {"out_dim", spec.out_dim},
                         {"n_train", task.data.train.size()},
                         {"n_test", task.data.test.size()},
                         {"train_csv", "train.csv"},
                         {"test_csv", "test.csv"},
                         {"sigma", io::matrix_to_json(task.sigma)},
                         {"frozen", io::model_to_json(task.frozen)},
                         {"target", io::model_to_json(task.target)},
                         {"generator", task_spec_to_json(spec)}};
  const fs::path path = dir / "manifest.json";
  io::write_json(path, manifest);
  return path;
}

inline LoadedTask load_task(const fs::path& manifest_path) {
  const json m = io::read_json(manifest_path);
  if (m.value("format", "") != "rmlora-manifest") {
    throw InvalidArgument(manifest_path.string() + " is not an rmlora manifest");
  }
  LoadedTask t;
  try {
    t.classification = m.at("task").get<std::string>() == "classification";
    t.frozen = io::model_from_json(m.at("frozen"));
    t.target = io::model_from_json(m.at("target"));
    t.sigma = io::matrix_from_json(m.at("sigma"));
    const fs::path dir = manifest_path.parent_path();
    const std::size_t in_dim = m.at("in_dim").get<std::size_t>();
    t.data.train = io::dataset_from_csv(io::read_file(dir / m.at("train_csv").get<std::string>()), in_dim);
    t.data.test = io::dataset_from_csv(io::read_file(dir / m.at("test_csv").get<std::string>()), in_dim);
  } catch (const json::exception& e) {
    throw InvalidArgument(manifest_path.string() + ": " + e.what());
  }
  return t;
}

inline fs::path manifest_path_from(const json& cfg) {
  const json d = section(cfg, "data");
  if (!d.contains("manifest")) throw InvalidArgument("config needs data.manifest");
  return d.at("manifest").get<std::string>();
}

// ---- commands ---------------------------------------------------------------

inline void run_gen_data(const json& cfg, const fs::path& out) {
  const TaskSpec spec = task_spec_from_json(section(cfg, "data"));
  write_task(out, generate_task(spec), spec);
}

inline void run_train(const json& cfg, const fs::path& out) {
  const LoadedTask task = load_task(manifest_path_from(cfg));
  const TrainConfig tc = train_config_from_json(section(cfg, "train"), task.default_loss());
  fs::create_directories(out);
  io::write_json(out / "config.json", {{"train", train_config_to_json(tc)}, {"data", section(cfg, "data")}});
  try {
    const TrainResult r = train(task.frozen, task.data, tc);
    io::write_file(out / "diagnostics.csv", io::diagnostics_to_csv(r.reports));
    io::save_checkpoint(out / "checkpoint.json", {r.model, r.adapters, tc.total_steps});
  } catch (const TrainingFailure& f) {
    io::write_file(out / "diagnostics.csv", io::diagnostics_to_csv(f.partial_reports()));
    throw;
  }
}

inline void run_sweep(const json& cfg, const fs::path& out) {
  const LoadedTask task = load_task(manifest_path_from(cfg));
  const TrainConfig tc = train_config_from_json(section(cfg, "train"), task.default_loss());
  const json s = section(cfg, "sweep");
  check_keys(s, "sweep", {"n_seeds", "variants"});
  std::size_t n_seeds = 1;
  read_opt(s, "n_seeds", n_seeds);
  std::vector<Variant> variants(std::begin(kAllVariants), std::end(kAllVariants));
  if (s.contains("variants")) {
    variants.clear();
    for (const auto& name : s.at("variants").get<std::vector<std::string>>()) {
      bool found = false;
      for (Variant v : kAllVariants) {
        if (name == variant_name(v)) {
          variants.push_back(v);
          found = true;
        }
      }
      if (!found) throw InvalidArgument("unknown sweep variant '" + name + "'");
    }
  }
  const SweepResult r = ablation_sweep(task.frozen, task.data, tc, n_seeds, variants);
  fs::create_directories(out);
  io::write_file(out / "sweep.csv", io::sweep_to_csv(r));
}

inline void run_bound(const json& cfg, const fs::path& out) {
  const LoadedTask task = load_task(manifest_path_from(cfg));
  const json b = section(cfg, "bound");
  check_keys(b, "bound", {"rank", "n_samples", "seed", "group_sizes"});
  BoundOptions opts;
  read_opt(b, "rank", opts.rank);
  read_opt(b, "n_samples", opts.n_samples);
  read_opt(b, "seed", opts.seed);
  Partition p = Partition::singletons(task.frozen.depth());
  if (b.contains("group_sizes")) {
    p.groups.clear();
    std::size_t next = 0;
    for (std::size_t n : b.at("group_sizes").get<std::vector<std::size_t>>()) {
      std::vector<std::size_t> g;
      for (std::size_t k = 0; k < n; ++k) g.push_back(next++);
      p.groups.push_back(std::move(g));
    }
  }
  const BoundReport rep = bound_report(task.frozen, task.target, p, task.sigma, opts);
  fs::create_directories(out);
  io::write_json(out / "bound.json", io::bound_report_to_json(rep, b));
}

inline void run_diagnose(const json& cfg, const fs::path& out) {
  const LoadedTask task = load_task(manifest_path_from(cfg));
  const json d = section(cfg, "diagnose");
  check_keys(d, "diagnose", {"checkpoint"});
  if (!d.contains("checkpoint")) throw InvalidArgument("config needs diagnose.checkpoint");
  const io::Checkpoint ck = io::load_checkpoint(d.at("checkpoint").get<std::string>());
  const TrainConfig tc = train_config_from_json(section(cfg, "train"), task.default_loss());
  const DiagnosticsReport rep = diagnose(ck.model, ck.adapters, task.data, tc, ck.step);
  fs::create_directories(out);
  io::write_file(out / "diagnostics.csv", io::diagnostics_to_csv(std::span(&rep, 1)));
}

inline void write_error_record(const fs::path& out, int status, const std::string& kind,
                               const std::string& message) {
  const json rec = {{"status", status}, {"kind", kind}, {"message", message}};
  std::cerr << rec.dump() << '\n';
  if (out.empty()) return;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) return;
  std::ofstream f(out / "error.json", std::ios::trunc);
  if (f) f << rec.dump(2) << '\n';
}

/// Runs one command and maps failures onto exit statuses, leaving an
/// error.json record in the output directory.
inline int run_command(const ExperimentSpec& spec) {
  try {
    const json cfg = resolve_config(spec);
    if (spec.command == "gen-data") {
      run_gen_data(cfg, spec.output_dir);
    } else if (spec.command == "train") {
      run_train(cfg, spec.output_dir);
    } else if (spec.command == "sweep") {
      run_sweep(cfg, spec.output_dir);
    } else if (spec.command == "bound") {
      run_bound(cfg, spec.output_dir);
    } else if (spec.command == "diagnose") {
      run_diagnose(cfg, spec.output_dir);
    } else {
      throw InvalidArgument("unknown command '" + spec.command + "'");
    }
    return kOk;
  } catch (const InvalidArgument& e) {
    write_error_record(spec.output_dir, kConfigError, "config", e.what());
    return kConfigError;
  } catch (const Unsupported& e) {
    write_error_record(spec.output_dir, kConfigError, "config", e.what());
    return kConfigError;
  } catch (const json::exception& e) {
    write_error_record(spec.output_dir, kConfigError, "config", e.what());
    return kConfigError;
  } catch (const NumericalError& e) {
    write_error_record(spec.output_dir, kNumericalError, "numerical", e.what());
    return kNumericalError;
  } catch (const IoError& e) {
    write_error_record(spec.output_dir, kIoError, "io", e.what());
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    write_error_record(spec.output_dir, kIoError, "io", e.what());
    return kIoError;
  } catch (const std::exception& e) {
    write_error_record(spec.output_dir, kFailure, "internal", e.what());
    return kFailure;
  }
}

}  // namespace rmlora::experiment
