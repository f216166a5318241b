// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "json.hpp"

#include "rmlora/layer.hpp"
#include "rmlora/linalg.hpp"
#include "rmlora/lora.hpp"
#include "rmlora/theory.hpp"
#include "rmlora/trainer.hpp"

namespace rmlora::io {

using json = nlohmann::json;

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw IoError("format_double: conversion failed");
  return std::string(buf, p);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw IoError("parse_double: '" + std::string(s) + "' is not a number");
  }
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write to " + path.string() + " failed");
}

inline json read_json(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  write_file(path, j.dump(2) + "\n");
}

// ---- matrices, layers, adapters ------------------------------------------

inline json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.values()}};
}

inline Matrix matrix_from_json(const json& j) {
  try {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                  j.at("data").get<std::vector<double>>());
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("matrix: ") + e.what());
  }
}

inline json model_to_json(const FnnModel& model) {
  json layers = json::array();
  for (const auto& l : model.layers) {
    layers.push_back({{"in_dim", l.in_dim()},
                      {"out_dim", l.out_dim()},
                      {"weight", l.weight.values()},
                      {"bias", l.bias},
                      {"frozen", l.frozen}});
  }
  return {{"layers", std::move(layers)}};
}

inline FnnModel model_from_json(const json& j) {
  FnnModel m;
  try {
    for (const auto& l : j.at("layers")) {
      LinearLayer layer;
      layer.weight = Matrix(l.at("out_dim").get<std::size_t>(), l.at("in_dim").get<std::size_t>(),
                            l.at("weight").get<std::vector<double>>());
      layer.bias = l.at("bias").get<std::vector<double>>();
      layer.frozen = l.value("frozen", true);
      m.layers.push_back(std::move(layer));
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("model: ") + e.what());
  }
  m.validate();
  return m;
}

inline json adapter_to_json(const LoraAdapter& ad) {
  return {{"layer_index", ad.layer_index},
          {"rank", ad.rank()},
          {"scale", ad.scale},
          {"a", matrix_to_json(ad.a)},
          {"b", matrix_to_json(ad.b)}};
}

inline LoraAdapter adapter_from_json(const json& j) {
  LoraAdapter ad;
  try {
    ad.layer_index = j.at("layer_index").get<std::size_t>();
    ad.scale = j.value("scale", 1.0);
    ad.a = matrix_from_json(j.at("a"));
    ad.b = matrix_from_json(j.at("b"));
    if (j.at("rank").get<std::size_t>() != ad.rank()) {
      throw InvalidArgument("adapter: rank field disagrees with matrix shapes");
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("adapter: ") + e.what());
  }
  ad.validate();
  return ad;
}

struct Checkpoint {
  FnnModel model;
  std::vector<LoraAdapter> adapters;
  std::size_t step = 0;
};

inline json checkpoint_to_json(const Checkpoint& c) {
  json j = model_to_json(c.model);
  j["format"] = "rmlora-checkpoint";
  j["version"] = 1;
  j["step"] = c.step;
  j["adapters"] = json::array();
  for (const auto& ad : c.adapters) j["adapters"].push_back(adapter_to_json(ad));
  return j;
}

inline Checkpoint checkpoint_from_json(const json& j) {
  if (j.value("format", "") != "rmlora-checkpoint") {
    throw InvalidArgument("not an rmlora checkpoint");
  }
  Checkpoint c;
  c.model = model_from_json(j);
  c.step = j.value("step", std::size_t{0});
  for (const auto& a : j.at("adapters")) c.adapters.push_back(adapter_from_json(a));
  detail::index_adapters(c.model, c.adapters);  // shape check
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_json(path, checkpoint_to_json(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(read_json(path));
}

// ---- bound report ----------------------------------------------------------

inline json bound_report_to_json(const BoundReport& r, const json& config_echo = json::object()) {
  json j = {{"e", r.e},
            {"beta", r.beta},
            {"target_norms", r.target_norms},
            {"bound", r.bound},
            {"empirical_error", nullptr},
            {"config", config_echo}};
  if (r.empirical_error) j["empirical_error"] = *r.empirical_error;
  if (r.empirical_std_error) j["empirical_std_error"] = *r.empirical_std_error;
  return j;
}

inline BoundReport bound_report_from_json(const json& j) {
  BoundReport r;
  r.e = j.at("e").get<std::vector<double>>();
  r.beta = j.at("beta").get<double>();
  r.target_norms = j.at("target_norms").get<std::vector<double>>();
  r.bound = j.at("bound").get<double>();
  if (!j.at("empirical_error").is_null()) r.empirical_error = j.at("empirical_error").get<double>();
  if (j.contains("empirical_std_error")) {
    r.empirical_std_error = j.at("empirical_std_error").get<double>();
  }
  return r;
}

// ---- CSV -------------------------------------------------------------------

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

/// Header x0..x{in-1} followed by y0..y{out-1} (or `label` for class targets).
inline std::string dataset_to_csv(const Batch& b, bool class_targets) {
  std::string s;
  for (std::size_t j = 0; j < b.inputs.cols(); ++j) s += (j ? ",x" : "x") + std::to_string(j);
  if (class_targets) {
    s += ",label";
  } else {
    for (std::size_t j = 0; j < b.targets.cols(); ++j) s += ",y" + std::to_string(j);
  }
  s += '\n';
  for (std::size_t r = 0; r < b.inputs.rows(); ++r) {
    for (std::size_t j = 0; j < b.inputs.cols(); ++j) {
      if (j) s += ',';
      s += format_double(b.inputs(r, j));
    }
    for (std::size_t j = 0; j < b.targets.cols(); ++j) s += ',' + format_double(b.targets(r, j));
    s += '\n';
  }
  return s;
}

inline Batch dataset_from_csv(std::string_view text, std::size_t in_dim) {
  std::vector<double> xs, ys;
  std::size_t n_cols = 0, rows = 0;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const std::size_t nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (line_no == 1) {
      n_cols = fields.size();
      if (n_cols <= in_dim) throw IoError("dataset: header has no target columns");
      continue;
    }
    if (fields.size() != n_cols) {
      throw IoError("dataset: line " + std::to_string(line_no) + " has " +
                    std::to_string(fields.size()) + " fields, expected " + std::to_string(n_cols));
    }
    for (std::size_t j = 0; j < n_cols; ++j) {
      (j < in_dim ? xs : ys).push_back(parse_double(fields[j]));
    }
    ++rows;
  }
  if (rows == 0) throw IoError("dataset: no data rows");
  return {Matrix(rows, in_dim, std::move(xs)), Matrix(rows, n_cols - in_dim, std::move(ys))};
}

inline std::string opt_field(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string{};
}

inline constexpr std::string_view kDiagnosticsHeader =
    "step,train_loss,test_loss,train_acc,test_acc,gap,adapter_id,delta_rank,delta_orth_loss";

/// One row per (report, adapter); adapter_id is the adapted layer index.
inline std::string diagnostics_to_csv(std::span<const DiagnosticsReport> reports) {
  std::string s(kDiagnosticsHeader);
  s += '\n';
  for (const auto& r : reports) {
    const std::string prefix = std::to_string(r.step) + ',' + format_double(r.train_loss) + ',' +
                               format_double(r.test_loss) + ',' + opt_field(r.train_acc) + ',' +
                               opt_field(r.test_acc) + ',' + opt_field(r.generalization_gap) + ',';
    if (r.adapters.empty()) {
      s += prefix + ",,\n";
      continue;
    }
    for (const auto& a : r.adapters) {
      s += prefix + std::to_string(a.layer_index) + ',' + std::to_string(a.delta_rank) + ',' +
           format_double(a.delta_orth_loss) + '\n';
    }
  }
  return s;
}

inline constexpr std::string_view kSweepHeader =
    "kind,variant,seed,status,train_loss,test_loss,train_acc,test_acc,gap,loss_gap,delta_rank,"
    "delta_orth_loss";

/// Raw per-run rows (kind=run) followed by per-variant medians (kind=median).
inline std::string sweep_to_csv(const SweepResult& sweep) {
  std::string s(kSweepHeader);
  s += '\n';
  auto emit = [&](const SweepRow& r, const char* kind) {
    s += std::string(kind) + ',' + variant_name(r.variant) + ',' +
         (r.seed ? std::to_string(*r.seed) : std::string{}) + ',' + (r.ok ? "ok" : "failed") +
         ',' + format_double(r.train_loss) + ',' + format_double(r.test_loss) + ',' +
         opt_field(r.train_acc) + ',' + opt_field(r.test_acc) + ',' + opt_field(r.gap) + ',' +
         format_double(r.loss_gap) + ',' + format_double(r.delta_rank) + ',' +
         format_double(r.delta_orth_loss) + '\n';
  };
  for (const auto& r : sweep.runs) emit(r, "run");
  for (const auto& r : sweep.medians) emit(r, "median");
  return s;
}

}  // namespace rmlora::io
