// Units for the experiment driver: config serialization and hashing, grid
// execution with its artifacts, failure handling, and the rate queries.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "uvdef/experiment.hpp"

using namespace uvdef;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path temp_root() {
  static const fs::path p = [] {
    const fs::path root = fs::temp_directory_path() / "uvdef_unit_flow";
    fs::remove_all(root);
    fs::create_directories(root);
    return root;
  }();
  return p;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(bool(is));
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// A grid small enough for unit runs: tiny synthetic dataset, short base
// training, one rft cell at 0.2%, fgsm only.
ExperimentConfig tiny_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.synthetic.seed = 41;
  cfg.synthetic.train_count = 600;
  cfg.synthetic.test_count = 120;
  cfg.base_train.learning_rate = 0.003;
  cfg.base_train.epochs = 2;
  cfg.base_train.seed = 3;
  cfg.finetune.epochs = 2;
  cfg.finetune.seed = 5;
  cfg.device_seeds = {1};
  cfg.error_rates = {0.002};
  cfg.patterns = {"half"};
  cfg.variants = {"rft"};
  cfg.attack_kinds = {"fgsm"};
  cfg.attack_count = 6;
  cfg.benign_count = 40;
  cfg.output_dir = out_dir;
  return cfg;
}

// The first run trains the base model once and saves a checkpoint; later
// runs reuse it so the file stays fast.
struct FlowFixture {
  ExperimentConfig first_cfg;
  RunOutcome first;
  std::string base_ckpt;

  FlowFixture() {
    first_cfg = tiny_config((temp_root() / "run_a").string());
    first = run_experiment(first_cfg);
    base_ckpt = first_cfg.output_dir + "/base.ckpt";
  }
};

const FlowFixture& flow() {
  static FlowFixture f;
  return f;
}

ExperimentConfig reuse_config(const std::string& out_dir) {
  ExperimentConfig cfg = tiny_config(out_dir);
  cfg.base_checkpoint = flow().base_ckpt;
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------- config

TEST_CASE("config: JSON round trip preserves the hash and the fields") {
  ExperimentConfig cfg = tiny_config("somewhere");
  cfg.error_rates = {0.0002, 0.002, 0.02};
  cfg.variants = {"none", "rft", "cdft"};
  cfg.attack_params.cw_steps = 123;
  cfg.attack_params.cw_early_exit = 7;
  cfg.jobs = 3;
  cfg.strict = true;

  const fs::path dir = temp_root() / "config";
  fs::create_directories(dir);
  const std::string path = (dir / "exp.json").string();
  save_experiment_config(path, cfg);
  const ExperimentConfig back = load_experiment_config(path);

  REQUIRE(config_hash(back) == config_hash(cfg));
  REQUIRE(back.synthetic.train_count == 600);
  REQUIRE(back.error_rates == cfg.error_rates);
  REQUIRE(back.variants == cfg.variants);
  REQUIRE(back.attack_params.cw_steps == 123);
  REQUIRE(back.attack_params.cw_early_exit == 7);
  REQUIRE(back.jobs == 3);
  REQUIRE(back.strict == true);
  REQUIRE(back.finetune.subset_fraction == cfg.finetune.subset_fraction);

  REQUIRE_THROWS_AS(load_experiment_config((dir / "absent.json").string()),
                    std::runtime_error);
  {
    std::ofstream os(dir / "junk.json");
    os << "not json at all";
  }
  REQUIRE_THROWS_AS(load_experiment_config((dir / "junk.json").string()), std::runtime_error);
  {
    std::ofstream os(dir / "wrongtag.json");
    os << "{\"format\": \"other\"}";
  }
  REQUIRE_THROWS_AS(load_experiment_config((dir / "wrongtag.json").string()),
                    std::runtime_error);
}

TEST_CASE("config: the hash is stable and sensitive") {
  const ExperimentConfig a = tiny_config("x");
  const ExperimentConfig b = tiny_config("x");
  REQUIRE(config_hash(a) == config_hash(b));
  REQUIRE(config_hash(a).size() == 16);

  ExperimentConfig c = a;
  c.eval_seed += 1;
  REQUIRE(config_hash(c) != config_hash(a));
  ExperimentConfig d = a;
  d.error_rates = {0.0002};
  REQUIRE(config_hash(d) != config_hash(a));
}

// ---------------------------------------------------------------- grid runs

TEST_CASE("run: the artifacts land, agree, and carry the config hash") {
  const FlowFixture& f = flow();
  REQUIRE(f.first.cells_total == 1);
  REQUIRE(f.first.cells_failed == 0);
  REQUIRE(f.first.reports.size() == 1);
  REQUIRE(fs::exists(f.first.manifest_path));
  REQUIRE(fs::exists(f.first.csv_path));
  REQUIRE(fs::exists(f.base_ckpt));
  REQUIRE(fs::exists(f.first_cfg.output_dir + "/corpus_fgsm.bin"));

  const std::string hash = config_hash(f.first_cfg);
  json manifest = json::parse(slurp(f.first.manifest_path));
  REQUIRE(manifest.at("format") == "uvdef-manifest");
  REQUIRE(manifest.at("config_hash") == hash);
  REQUIRE(manifest.at("metrics_csv") == "metrics.csv");
  REQUIRE(manifest.at("dataset").at("source") == "synthetic");
  REQUIRE(manifest.at("dataset").at("train_count") == 600);
  REQUIRE(manifest.at("cells").size() == 1);

  const auto& cell = manifest.at("cells")[0];
  REQUIRE(cell.at("status") == "ok");
  REQUIRE(cell.at("variant") == "rft");
  REQUIRE(cell.at("error_rate") == 0.002);
  const std::string report_file = cell.at("report").get<std::string>();
  REQUIRE(!report_file.empty());

  json cell_report = json::parse(slurp(f.first_cfg.output_dir + "/" + report_file));
  REQUIRE(cell_report.at("config_hash") == hash);
  REQUIRE(cell_report.at("variant") == "rft");

  const MetricsReport parsed =
      read_report_json(f.first_cfg.output_dir + "/" + report_file);
  REQUIRE(parsed.error_rate == f.first.reports[0].error_rate);
  REQUIRE(parsed.benign_tpr_strict == f.first.reports[0].benign_tpr_strict);
  REQUIRE(parsed.attacks.at("fgsm").total == 6);
}

TEST_CASE("run: identical configs reproduce the metrics CSV byte for byte") {
  const ExperimentConfig cfg_b = reuse_config((temp_root() / "run_b").string());
  const ExperimentConfig cfg_c = reuse_config((temp_root() / "run_c").string());
  const RunOutcome b = run_experiment(cfg_b);
  const RunOutcome c = run_experiment(cfg_c);
  REQUIRE(b.cells_failed == 0);
  REQUIRE(slurp(b.csv_path) == slurp(c.csv_path));

  // The checkpointed base reproduces the trained-from-scratch metrics too.
  REQUIRE(slurp(b.csv_path) == slurp(flow().first.csv_path));
}

TEST_CASE("run: a worker pool yields the same CSV as the sequential path") {
  ExperimentConfig cfg_d = reuse_config((temp_root() / "run_d").string());
  cfg_d.jobs = 2;
  cfg_d.error_rates = {0.002, 0.0002};  // two cells so the pool has real work
  const RunOutcome d = run_experiment(cfg_d);
  REQUIRE(d.cells_total == 2);
  REQUIRE(d.cells_failed == 0);

  ExperimentConfig cfg_e = cfg_d;
  cfg_e.jobs = 1;
  cfg_e.output_dir = (temp_root() / "run_e").string();
  const RunOutcome e = run_experiment(cfg_e);
  REQUIRE(slurp(d.csv_path) == slurp(e.csv_path));
}

TEST_CASE("run: no attack kinds still produces a benign-only row") {
  ExperimentConfig cfg = reuse_config((temp_root() / "run_none").string());
  cfg.attack_kinds = {};
  cfg.variants = {"none"};
  const RunOutcome r = run_experiment(cfg);
  REQUIRE(r.cells_failed == 0);
  REQUIRE(r.reports[0].attacks.empty());
  const std::string csv = slurp(r.csv_path);
  REQUIRE(csv.find(",none,0,0,") != std::string::npos);  // placeholder attack row
}

TEST_CASE("run: an unreachable error rate fails its cell, not the run") {
  ExperimentConfig cfg = reuse_config((temp_root() / "run_fail").string());
  cfg.error_rates = {0.002, 0.05};  // the device curve tops out at 0.02
  const RunOutcome r = run_experiment(cfg);
  REQUIRE(r.cells_total == 2);
  REQUIRE(r.cells_failed == 1);
  REQUIRE(r.reports.size() == 1);

  json manifest = json::parse(slurp(r.manifest_path));
  int failed = 0;
  for (const auto& cell : manifest.at("cells")) {
    const std::string status = cell.at("status").get<std::string>();
    if (status.rfind("failed:", 0) == 0) ++failed;
  }
  REQUIRE(failed == 1);

  ExperimentConfig strict_cfg = cfg;
  strict_cfg.output_dir = (temp_root() / "run_fail_strict").string();
  strict_cfg.strict = true;
  REQUIRE_THROWS_AS(run_experiment(strict_cfg), std::runtime_error);
}

TEST_CASE("run: malformed grids are rejected before any work") {
  ExperimentConfig cfg = tiny_config((temp_root() / "run_bad").string());
  cfg.jobs = 0;
  REQUIRE_THROWS_AS(run_experiment(cfg), std::invalid_argument);

  cfg = tiny_config((temp_root() / "run_bad").string());
  cfg.variants = {};
  REQUIRE_THROWS_AS(run_experiment(cfg), std::invalid_argument);

  cfg = tiny_config((temp_root() / "run_bad").string());
  cfg.variants = {"distill"};
  REQUIRE_THROWS_AS(run_experiment(cfg), std::invalid_argument);

  cfg = tiny_config((temp_root() / "run_bad").string());
  cfg.patterns = {"double"};
  REQUIRE_THROWS_AS(run_experiment(cfg), std::invalid_argument);
}

// ---------------------------------------------------------------- rate queries

TEST_CASE("rate query: picks the smallest rate whose pass-rate clears the bar") {
  std::vector<MetricsReport> reports(3);
  reports[0].error_rate = 0.0002;
  reports[0].benign_tpr_strict = 0.60;
  reports[0].benign_tpr_loose = 0.97;
  reports[1].error_rate = 0.002;
  reports[1].benign_tpr_strict = 0.90;
  reports[1].benign_tpr_loose = 0.92;
  reports[2].error_rate = 0.02;
  reports[2].benign_tpr_strict = 0.50;
  reports[2].benign_tpr_loose = 0.60;

  auto strict = lowest_rate_with_tpr_above(reports, 0.85);
  REQUIRE(strict.has_value());
  REQUIRE(*strict == 0.002);  // the 0.0002 report misses the strict bar

  auto loose = lowest_rate_with_tpr_above(reports, 0.85, /*strict=*/false);
  REQUIRE(loose.has_value());
  REQUIRE(*loose == 0.0002);

  REQUIRE(!lowest_rate_with_tpr_above(reports, 0.99).has_value());

  // Same answers when the query runs over the merged CSV.
  const fs::path dir = temp_root() / "ratequery";
  fs::create_directories(dir);
  const std::string csv = (dir / "metrics.csv").string();
  write_metrics_csv(csv, reports);
  auto strict_csv = lowest_rate_with_tpr_above_csv(csv, 0.85);
  REQUIRE(strict_csv.has_value());
  REQUIRE(*strict_csv == doctest::Approx(0.002).epsilon(1e-9));
  auto loose_csv = lowest_rate_with_tpr_above_csv(csv, 0.85, false);
  REQUIRE(*loose_csv == doctest::Approx(0.0002).epsilon(1e-9));

  const std::string junk = (dir / "junk.csv").string();
  {
    std::ofstream os(junk);
    os << "a,b,c\n1,2,3\n";
  }
  REQUIRE_THROWS_AS(lowest_rate_with_tpr_above_csv(junk, 0.5), std::runtime_error);
  REQUIRE_THROWS_AS(lowest_rate_with_tpr_above_csv((dir / "absent.csv").string(), 0.5),
                    std::runtime_error);
}
