#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "uvdef/attacks.hpp"
#include "uvdef/dataset.hpp"
#include "uvdef/defense.hpp"
#include "uvdef/train.hpp"

namespace uvdef {

// Declarative description of a full study: dataset, base model, fine-tune
// settings, the (device x variant x rate x pattern) grid, attack corpora,
// and output locations. Serializes to JSON; the hash of that JSON is stamped
// into every artifact the run produces.
struct ExperimentConfig {
  std::string dataset_dir;  // empty -> procedural dataset
  SyntheticSpec synthetic;

  std::string base_checkpoint;  // empty -> train from scratch
  TrainConfig base_train{.learning_rate = 0.05, .epochs = 10, .accuracy_floor = 0.0};

  TrainConfig finetune;  // defaults match the fine-tuning recipe
  uint64_t subset_seed = 11;

  std::vector<uint64_t> device_seeds{1};
  std::vector<double> error_rates{0.002};
  std::vector<std::string> patterns{"half"};
  std::vector<std::string> variants{"rft"};

  std::vector<std::string> attack_kinds{"fgsm", "deepfool", "cw"};
  int64_t attack_count = 100;
  int64_t benign_count = 1000;
  uint64_t attack_seed = 13;
  AttackParams attack_params;

  uint64_t eval_seed = 17;
  int top_k = 5;

  std::string output_dir = "out";
  int jobs = 1;
  bool strict = false;  // true: first cell failure aborts the run
};

ExperimentConfig load_experiment_config(const std::string& path);
void save_experiment_config(const std::string& path, const ExperimentConfig& cfg);

// FNV-1a over the canonical JSON form, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

struct RunOutcome {
  int cells_total = 0;
  int cells_failed = 0;
  std::string manifest_path;
  std::string csv_path;
  std::vector<MetricsReport> reports;
};

// Executes the whole grid. Cell artifacts land in cfg.output_dir: one
// metrics JSON per cell, a merged CSV, and a manifest describing every cell
// (including failures, unless cfg.strict aborted the run).
RunOutcome run_experiment(const ExperimentConfig& cfg);

// Smallest error rate whose benign pass-rate stays above `threshold`
// (strict TPR by default). Reports must share a variant/pattern.
std::optional<double> lowest_rate_with_tpr_above(const std::vector<MetricsReport>& reports,
                                                 double threshold, bool strict = true);

// Same query evaluated from a merged metrics CSV on disk.
std::optional<double> lowest_rate_with_tpr_above_csv(const std::string& csv_path,
                                                     double threshold, bool strict = true);

}  // namespace uvdef
