// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <limits>
#include <sys/wait.h>

#include "oracles.hpp"
#include "rmlora/experiment.hpp"
#include "rmlora/io.hpp"

namespace fs = std::filesystem;
using rmlora::Matrix;
using rmlora::io::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rmlora_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(RMLORA_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::size_t count_lines(const std::string& s) { return std::count(s.begin(), s.end(), '\n'); }

const char* kSmallData =
    "--set data.in_dim=8 --set data.width=8 --set data.out_dim=3 --set data.perturb_rank=2 "
    "--set data.n_train=100 --set data.n_test=40";

}  // namespace

TEST(Format, ShortestRoundTrip) {
  rmlora::Rng rng(71);
  for (int i = 0; i < 10000; ++i) {
    const double v = rng.normal() * std::pow(10.0, double(int(rng.below(40)) - 20));
    EXPECT_EQ(rmlora::io::parse_double(rmlora::io::format_double(v)), v);
  }
  for (double v : {0.0, -0.0, 1e-310, std::numeric_limits<double>::max(), 0.1}) {
    const double back = rmlora::io::parse_double(rmlora::io::format_double(v));
    EXPECT_EQ(std::bit_cast<std::uint64_t>(back), std::bit_cast<std::uint64_t>(v));
  }
  EXPECT_EQ(rmlora::io::format_double(0.1), "0.1");
  EXPECT_THROW(rmlora::io::parse_double("1.5x"), rmlora::IoError);
  EXPECT_THROW(rmlora::io::parse_double(""), rmlora::IoError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  rmlora::Rng rng(72);
  rmlora::io::Checkpoint c;
  c.model = oracle::random_model({5, 4, 3}, rng);
  c.model.layers[0].weight(0, 0) = -0.0;
  c.model.layers[1].bias[0] = 4.9e-324;
  c.adapters = {oracle::random_adapter(4, 5, 2, 0, rng), oracle::random_adapter(3, 4, 1, 1, rng)};
  c.adapters[1].scale = 1.0 / 3.0;
  c.step = 17;
  const fs::path dir = fresh_dir("ckpt");
  rmlora::io::save_checkpoint(dir / "c.json", c);
  const auto back = rmlora::io::load_checkpoint(dir / "c.json");
  EXPECT_EQ(back.step, 17u);
  ASSERT_EQ(back.model.depth(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(back.model.layers[l].weight, c.model.layers[l].weight);
    for (std::size_t i = 0; i < c.model.layers[l].bias.size(); ++i) {
      EXPECT_EQ(std::bit_cast<std::uint64_t>(back.model.layers[l].bias[i]),
                std::bit_cast<std::uint64_t>(c.model.layers[l].bias[i]));
    }
  }
  EXPECT_EQ(back.adapters, c.adapters);
  // Saving the loaded checkpoint reproduces the file byte for byte.
  rmlora::io::save_checkpoint(dir / "d.json", back);
  EXPECT_EQ(rmlora::io::read_file(dir / "c.json"), rmlora::io::read_file(dir / "d.json"));
}

TEST(Checkpoint, RejectsMalformedInput) {
  EXPECT_THROW(rmlora::io::checkpoint_from_json(json{{"format", "other"}}), rmlora::InvalidArgument);
  json bad = rmlora::io::checkpoint_to_json({});
  bad["layers"] = json::array({{{"in_dim", 2}, {"out_dim", 2}, {"weight", {1, 2, 3}}, {"bias", {0, 0}}}});
  EXPECT_THROW(rmlora::io::checkpoint_from_json(bad), rmlora::InvalidArgument);
  EXPECT_THROW(rmlora::io::load_checkpoint("/nonexistent/ckpt.json"), rmlora::IoError);
}

TEST(DatasetCsv, RoundTripAndErrors) {
  rmlora::Rng rng(73);
  rmlora::Batch b{rng.gaussian_matrix(7, 3), rng.gaussian_matrix(7, 2)};
  const std::string csv = rmlora::io::dataset_to_csv(b, false);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "x0,x1,x2,y0,y1");
  const auto back = rmlora::io::dataset_from_csv(csv, 3);
  EXPECT_EQ(back.inputs, b.inputs);
  EXPECT_EQ(back.targets, b.targets);
  EXPECT_THROW(rmlora::io::dataset_from_csv("x0,y0\n1,2\n3\n", 1), rmlora::IoError);
  EXPECT_THROW(rmlora::io::dataset_from_csv("x0,y0\n1,abc\n", 1), rmlora::IoError);
  EXPECT_THROW(rmlora::io::dataset_from_csv("x0,y0\n", 1), rmlora::IoError);
  EXPECT_THROW(rmlora::io::dataset_from_csv("x0\n1\n", 1), rmlora::IoError);
}

TEST(BoundJson, RoundTrip) {
  rmlora::BoundReport r{{0.5, 0.0}, 2.25, {3.0, 4.0}, 1.125, 0.3, 0.01};
  const auto back = rmlora::io::bound_report_from_json(rmlora::io::bound_report_to_json(r));
  EXPECT_EQ(back.e, r.e);
  EXPECT_EQ(back.beta, r.beta);
  EXPECT_EQ(back.bound, r.bound);
  EXPECT_EQ(back.empirical_error, r.empirical_error);
}

TEST(Config, OverridesParseJsonValuesAndDottedKeys) {
  json cfg = json::object();
  rmlora::experiment::apply_override(cfg, "train.rank=16");
  rmlora::experiment::apply_override(cfg, "train.optimizer=adam");
  rmlora::experiment::apply_override(cfg, "sweep.variants=[\"lora\",\"rm_lora\"]");
  EXPECT_EQ(cfg["train"]["rank"], 16);
  EXPECT_EQ(cfg["train"]["optimizer"], "adam");
  EXPECT_EQ(cfg["sweep"]["variants"].size(), 2u);
  EXPECT_THROW(rmlora::experiment::apply_override(cfg, "novalue"), rmlora::InvalidArgument);
  EXPECT_THROW(rmlora::experiment::apply_override(cfg, "train..rank=1"), rmlora::InvalidArgument);
}

TEST(Config, TrainSectionRoundTripsAndRejectsUnknownKeys) {
  rmlora::TrainConfig c;
  c.optimizer = rmlora::OptimizerKind::adam;
  c.loss = rmlora::LossKind::cross_entropy;
  c.adapt_layers = {1};
  const json j = rmlora::experiment::train_config_to_json(c);
  const auto back = rmlora::experiment::train_config_from_json(j, rmlora::LossKind::mse);
  EXPECT_EQ(rmlora::experiment::train_config_to_json(back), j);
  EXPECT_THROW(rmlora::experiment::train_config_from_json({{"rnak", 2}}, rmlora::LossKind::mse),
               rmlora::InvalidArgument);
  EXPECT_THROW(rmlora::experiment::train_config_from_json({{"rank", "two"}}, rmlora::LossKind::mse),
               rmlora::InvalidArgument);
  EXPECT_EQ(rmlora::experiment::train_config_from_json({{"rank", 6}}, rmlora::LossKind::mse).r_hat, 3u);
}

TEST(Cli, GenDataIsDeterministicAndCountsRows) {
  const fs::path a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  ASSERT_EQ(run_cli(std::string("gen-data --seed 3 ") + kSmallData + " --out " + a.string()), 0);
  ASSERT_EQ(run_cli(std::string("gen-data --seed 3 ") + kSmallData + " --out " + b.string()), 0);
  for (const char* f : {"train.csv", "test.csv", "manifest.json"}) {
    EXPECT_EQ(rmlora::io::read_file(a / f), rmlora::io::read_file(b / f)) << f;
  }
  EXPECT_EQ(count_lines(rmlora::io::read_file(a / "train.csv")), 101u);

  // Noise-free regression targets are exactly the target network's outputs.
  const auto task = rmlora::experiment::load_task(a / "manifest.json");
  EXPECT_EQ(rmlora::forward(task.target, task.data.train.inputs), task.data.train.targets);
}

TEST(Cli, TrainZeroStepsThenDiagnose) {
  const fs::path data = fresh_dir("tr_data"), out = fresh_dir("tr_out"), diag = fresh_dir("tr_diag");
  ASSERT_EQ(run_cli(std::string("gen-data ") + kSmallData + " --out " + data.string()), 0);
  const std::string manifest = " --set data.manifest=" + (data / "manifest.json").string();
  ASSERT_EQ(run_cli("train --set train.total_steps=0 --set train.rank=2" + manifest + " --out " + out.string()), 0);
  const std::string csv = rmlora::io::read_file(out / "diagnostics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), rmlora::io::kDiagnosticsHeader);
  EXPECT_EQ(count_lines(csv), 1u + 2u);  // header, then one row per adapter at step 0
  const auto ck = rmlora::io::load_checkpoint(out / "checkpoint.json");
  EXPECT_EQ(ck.adapters.size(), 2u);

  ASSERT_EQ(run_cli("diagnose --set train.rank=2 --set diagnose.checkpoint=" +
                    (out / "checkpoint.json").string() + manifest + " --out " + diag.string()),
            0);
  EXPECT_EQ(rmlora::io::read_file(diag / "diagnostics.csv"), csv);
}

TEST(Cli, TrainIsByteReproducible) {
  const fs::path data = fresh_dir("rep_data"), o1 = fresh_dir("rep_1"), o2 = fresh_dir("rep_2");
  ASSERT_EQ(run_cli(std::string("gen-data --set data.task=classification ") + kSmallData + " --out " + data.string()), 0);
  const std::string args = "train --set train.total_steps=40 --set train.rank=2 --set train.diag_interval=10 "
                           "--set data.manifest=" + (data / "manifest.json").string();
  ASSERT_EQ(run_cli(args + " --out " + o1.string()), 0);
  ASSERT_EQ(run_cli(args + " --out " + o2.string()), 0);
  EXPECT_EQ(rmlora::io::read_file(o1 / "diagnostics.csv"), rmlora::io::read_file(o2 / "diagnostics.csv"));
  EXPECT_EQ(rmlora::io::read_file(o1 / "checkpoint.json"), rmlora::io::read_file(o2 / "checkpoint.json"));
}

TEST(Cli, SweepWritesRunAndMedianRows) {
  const fs::path data = fresh_dir("sw_data"), out = fresh_dir("sw_out");
  ASSERT_EQ(run_cli(std::string("gen-data ") + kSmallData + " --out " + data.string()), 0);
  ASSERT_EQ(run_cli("sweep --set sweep.n_seeds=2 --set train.total_steps=10 --set train.rank=2 "
                    "--set data.manifest=" + (data / "manifest.json").string() + " --out " + out.string()),
            0);
  const std::string csv = rmlora::io::read_file(out / "sweep.csv");
  EXPECT_EQ(count_lines(csv), 1u + 8u + 4u);
}

TEST(Cli, BoundIsZeroWhenTargetEqualsFrozen) {
  const fs::path data = fresh_dir("bd_data"), out = fresh_dir("bd_out");
  ASSERT_EQ(run_cli(std::string("gen-data --set data.perturb_scale=0 ") + kSmallData + " --out " + data.string()), 0);
  ASSERT_EQ(run_cli("bound --set bound.n_samples=1000 --set data.manifest=" + (data / "manifest.json").string() +
                    " --out " + out.string()),
            0);
  const json j = rmlora::io::read_json(out / "bound.json");
  EXPECT_EQ(j.at("bound").get<double>(), 0.0);
  EXPECT_EQ(j.at("empirical_error").get<double>(), 0.0);
}

TEST(Cli, ExitCodesAndErrorRecords) {
  const fs::path out = fresh_dir("err");
  EXPECT_EQ(run_cli("gen-data --set data.bogus=1 --out " + out.string()), 2);
  EXPECT_TRUE(fs::exists(out / "error.json"));
  EXPECT_EQ(rmlora::io::read_json(out / "error.json").at("status"), 2);
  EXPECT_EQ(run_cli("train --out " + out.string()), 2);  // no manifest
  EXPECT_EQ(run_cli("train --config /nonexistent/cfg.json --out " + out.string()), 4);
  EXPECT_EQ(run_cli("frobnicate"), 2);

  const fs::path data = fresh_dir("err_data");
  ASSERT_EQ(run_cli(std::string("gen-data ") + kSmallData + " --out " + data.string()), 0);
  EXPECT_EQ(run_cli("train --set train.learning_rate=1e9 --set train.total_steps=50 --set train.rank=2 "
                    "--set data.manifest=" + (data / "manifest.json").string() + " --out " + out.string()),
            3);
  EXPECT_EQ(rmlora::io::read_json(out / "error.json").at("kind"), "numerical");
  EXPECT_TRUE(fs::exists(out / "diagnostics.csv"));
  EXPECT_EQ(run_cli("bound --set bound.group_sizes=[2] --set data.manifest=" + (data / "manifest.json").string() +
                    " --out " + out.string()),
            2);
}

TEST(Cli, SampleConfigsParse) {
  for (const auto& entry : fs::directory_iterator(RMLORA_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    rmlora::experiment::ExperimentSpec spec;
    spec.config_path = entry.path();
    const json cfg = rmlora::experiment::resolve_config(spec);
    EXPECT_NO_THROW(rmlora::experiment::task_spec_from_json(rmlora::experiment::section(cfg, "data")))
        << entry.path();
    EXPECT_NO_THROW(rmlora::experiment::train_config_from_json(rmlora::experiment::section(cfg, "train"),
                                                               rmlora::LossKind::mse))
        << entry.path();
  }
}
