#include "uvdef/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "uvdef/checkpoint.hpp"

namespace uvdef {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json train_config_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"momentum", c.momentum},
          {"epochs", c.epochs},               {"batch_size", c.batch_size},
          {"seed", c.seed},                   {"temperature", c.temperature},
          {"subset_fraction", c.subset_fraction}, {"train_limit", c.train_limit},
          {"eval_limit", c.eval_limit},       {"accuracy_floor", c.accuracy_floor},
          {"val_fraction", c.val_fraction}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.temperature = j.at("temperature").get<double>();
  c.subset_fraction = j.at("subset_fraction").get<double>();
  c.train_limit = j.at("train_limit").get<int64_t>();
  c.eval_limit = j.at("eval_limit").get<int64_t>();
  c.accuracy_floor = j.at("accuracy_floor").get<double>();
  c.val_fraction = j.at("val_fraction").get<double>();
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["format"] = "uvdef-experiment";
  j["version"] = 1;
  j["dataset_dir"] = c.dataset_dir;
  j["synthetic"] = {{"seed", c.synthetic.seed},
                    {"train_count", c.synthetic.train_count},
                    {"test_count", c.synthetic.test_count},
                    {"boundary_fraction", c.synthetic.boundary_fraction},
                    {"noise_amp", c.synthetic.noise_amp}};
  j["base_checkpoint"] = c.base_checkpoint;
  j["base_train"] = train_config_to_json(c.base_train);
  j["finetune"] = train_config_to_json(c.finetune);
  j["subset_seed"] = c.subset_seed;
  j["device_seeds"] = c.device_seeds;
  j["error_rates"] = c.error_rates;
  j["patterns"] = c.patterns;
  j["variants"] = c.variants;
  j["attack_kinds"] = c.attack_kinds;
  j["attack_count"] = c.attack_count;
  j["benign_count"] = c.benign_count;
  j["attack_seed"] = c.attack_seed;
  j["attack_params"] = {{"fgsm_eps", c.attack_params.fgsm_eps},
                        {"deepfool_max_iter", c.attack_params.deepfool_max_iter},
                        {"deepfool_overshoot", c.attack_params.deepfool_overshoot},
                        {"cw_steps", c.attack_params.cw_steps},
                        {"cw_lr", c.attack_params.cw_lr},
                        {"cw_c_lo", c.attack_params.cw_c_lo},
                        {"cw_c_hi", c.attack_params.cw_c_hi},
                        {"cw_search_steps", c.attack_params.cw_search_steps},
                        {"cw_kappa", c.attack_params.cw_kappa},
                        {"cw_early_exit", c.attack_params.cw_early_exit}};
  j["eval_seed"] = c.eval_seed;
  j["top_k"] = c.top_k;
  j["output_dir"] = c.output_dir;
  j["jobs"] = c.jobs;
  j["strict"] = c.strict;
  return j;
}

ExperimentConfig from_json(const json& j) {
  if (j.at("format") != "uvdef-experiment")
    throw std::runtime_error("wrong config format tag");
  ExperimentConfig c;
  c.dataset_dir = j.at("dataset_dir").get<std::string>();
  const auto& s = j.at("synthetic");
  c.synthetic.seed = s.at("seed").get<uint64_t>();
  c.synthetic.train_count = s.at("train_count").get<int64_t>();
  c.synthetic.test_count = s.at("test_count").get<int64_t>();
  c.synthetic.boundary_fraction = s.at("boundary_fraction").get<double>();
  c.synthetic.noise_amp = s.at("noise_amp").get<double>();
  c.base_checkpoint = j.at("base_checkpoint").get<std::string>();
  c.base_train = train_config_from_json(j.at("base_train"));
  c.finetune = train_config_from_json(j.at("finetune"));
  c.subset_seed = j.at("subset_seed").get<uint64_t>();
  c.device_seeds = j.at("device_seeds").get<std::vector<uint64_t>>();
  c.error_rates = j.at("error_rates").get<std::vector<double>>();
  c.patterns = j.at("patterns").get<std::vector<std::string>>();
  c.variants = j.at("variants").get<std::vector<std::string>>();
  c.attack_kinds = j.at("attack_kinds").get<std::vector<std::string>>();
  c.attack_count = j.at("attack_count").get<int64_t>();
  c.benign_count = j.at("benign_count").get<int64_t>();
  c.attack_seed = j.at("attack_seed").get<uint64_t>();
  const auto& a = j.at("attack_params");
  c.attack_params.fgsm_eps = a.at("fgsm_eps").get<double>();
  c.attack_params.deepfool_max_iter = a.at("deepfool_max_iter").get<int>();
  c.attack_params.deepfool_overshoot = a.at("deepfool_overshoot").get<double>();
  c.attack_params.cw_steps = a.at("cw_steps").get<int>();
  c.attack_params.cw_lr = a.at("cw_lr").get<double>();
  c.attack_params.cw_c_lo = a.at("cw_c_lo").get<double>();
  c.attack_params.cw_c_hi = a.at("cw_c_hi").get<double>();
  c.attack_params.cw_search_steps = a.at("cw_search_steps").get<int>();
  c.attack_params.cw_kappa = a.at("cw_kappa").get<double>();
  c.attack_params.cw_early_exit = a.at("cw_early_exit").get<int>();
  c.eval_seed = j.at("eval_seed").get<uint64_t>();
  c.top_k = j.at("top_k").get<int>();
  c.output_dir = j.at("output_dir").get<std::string>();
  c.jobs = j.at("jobs").get<int>();
  c.strict = j.at("strict").get<bool>();
  return c;
}

uint64_t fnv1a64_str(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string rate_token(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", rate);
  std::string s(buf);
  for (auto& ch : s)
    if (ch == '.') ch = 'p';
  return s;
}

struct Cell {
  int index = 0;
  uint64_t device_seed = 0;
  std::string variant;
  double rate = 0.0;
  std::string pattern;
};

}  // namespace

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error(path + ": cannot open");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": not valid JSON: " + e.what());
  }
  try {
    return from_json(j);
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": malformed experiment config: " + e.what());
  }
}

void save_experiment_config(const std::string& path, const ExperimentConfig& cfg) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os << to_json(cfg).dump(2) << "\n";
  if (!os.good()) throw std::runtime_error(path + ": write failed");
}

std::string config_hash(const ExperimentConfig& cfg) {
  const uint64_t h = fnv1a64_str(to_json(cfg).dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunOutcome run_experiment(const ExperimentConfig& cfg) {
  if (cfg.jobs < 1) throw std::invalid_argument("run_experiment: jobs must be >= 1");
  if (cfg.device_seeds.empty() || cfg.error_rates.empty() || cfg.patterns.empty() ||
      cfg.variants.empty())
    throw std::invalid_argument("run_experiment: empty grid axis");
  for (const auto& v : cfg.variants)
    if (v != "none" && v != "rft" && v != "cdft")
      throw std::invalid_argument("run_experiment: unknown variant '" + v + "'");
  for (const auto& p : cfg.patterns) BitFlipPattern::from_name(p);  // validates

  const std::string hash = config_hash(cfg);
  fs::create_directories(cfg.output_dir);

  // Dataset.
  const DatasetHandle data =
      cfg.dataset_dir.empty() ? make_synthetic_dataset(cfg.synthetic) : load_cifar10(cfg.dataset_dir);

  // Base model.
  Model base;
  if (!cfg.base_checkpoint.empty()) {
    base = load_checkpoint(cfg.base_checkpoint).model;
  } else {
    base = train_base(data, cfg.base_train);
    save_checkpoint(cfg.output_dir + "/base.ckpt", base,
                    {{"role", "base"}, {"config_hash", hash}});
  }

  // Fine-tune ingredients shared across cells.
  const std::vector<int64_t> subset =
      sample_subset(data, cfg.finetune.subset_fraction, cfg.subset_seed);
  std::vector<SoftLabel> soft;
  const bool wants_cdft =
      std::find(cfg.variants.begin(), cfg.variants.end(), "cdft") != cfg.variants.end();
  if (wants_cdft) soft = soft_labels(base, data, subset, cfg.finetune.temperature);

  // Device-independent attack corpora.
  const std::vector<int64_t> candidates =
      attack_candidates(base, data, cfg.attack_count, cfg.attack_seed);
  std::map<std::string, std::vector<AdversarialExample>> shared_corpora;
  for (const auto& kind : cfg.attack_kinds) {
    if (kind == "cw_noise" || kind == "cw_device") continue;  // per-cell
    shared_corpora[kind] =
        generate_corpus(base, data, candidates, kind, cfg.attack_params);
    save_corpus(cfg.output_dir + "/corpus_" + kind + ".bin", shared_corpora[kind]);
  }
  const bool wants_noise = std::find(cfg.attack_kinds.begin(), cfg.attack_kinds.end(),
                                     "cw_noise") != cfg.attack_kinds.end();
  const bool wants_device = std::find(cfg.attack_kinds.begin(), cfg.attack_kinds.end(),
                                      "cw_device") != cfg.attack_kinds.end();

  // Grid.
  std::vector<Cell> cells;
  for (uint64_t ds : cfg.device_seeds)
    for (const auto& variant : cfg.variants)
      for (double rate : cfg.error_rates)
        for (const auto& pattern : cfg.patterns)
          cells.push_back({int(cells.size()), ds, variant, rate, pattern});

  struct CellOutcome {
    bool ok = false;
    std::string error;
    std::string report_file;
    MetricsReport report;
  };
  std::vector<CellOutcome> outcomes(cells.size());

  auto run_cell = [&](const Cell& cell) -> CellOutcome {
    CellOutcome out;
    try {
      const DeviceProfile device = default_device(cell.device_seed);
      const BitFlipPattern pattern = BitFlipPattern::from_name(cell.pattern);
      const double voltage = rate_to_voltage(device.curve, cell.rate);

      Model tuned = base;
      if (cell.variant != "none") {
        FinetuneContext ctx{device, voltage, pattern};
        if (cell.variant == "rft") {
          tuned = finetune_rft(base, data, subset, ctx, cfg.finetune).model;
        } else {
          tuned = finetune_cdft(base, data, subset, soft, cfg.finetune.temperature, ctx,
                                cfg.finetune)
                      .model;
        }
      }

      auto corpora = shared_corpora;
      if (wants_noise)
        corpora["cw_noise"] =
            gen_noise_aware(base, data, candidates, cell.rate, pattern,
                            mix_seed(cfg.attack_seed, 0x401eULL), cfg.attack_params);
      if (wants_device)
        corpora["cw_device"] =
            gen_device_aware(base, data, candidates, device, cell.rate, pattern,
                             mix_seed(cfg.attack_seed, 0xdeecULL), cfg.attack_params);

      EvalSpec spec;
      spec.error_rate = cell.rate;
      spec.pattern = pattern;
      spec.variant = cell.variant;
      spec.eval_seed = cfg.eval_seed;
      spec.top_k = cfg.top_k;
      spec.benign_limit = cfg.benign_count;
      out.report = evaluate(base, tuned, device, data, corpora, spec);

      char name[128];
      std::snprintf(name, sizeof name, "cell_%03d_d%llu_%s_r%s_%s.json", cell.index,
                    static_cast<unsigned long long>(cell.device_seed), cell.variant.c_str(),
                    rate_token(cell.rate).c_str(), cell.pattern.c_str());
      out.report_file = name;
      write_report_json(cfg.output_dir + "/" + name, out.report, hash);
      out.ok = true;
    } catch (const std::exception& e) {
      out.error = e.what();
    }
    return out;
  };

  if (cfg.jobs == 1) {
    for (size_t i = 0; i < cells.size(); ++i) {
      outcomes[i] = run_cell(cells[i]);
      if (!outcomes[i].ok && cfg.strict)
        throw std::runtime_error("cell " + std::to_string(i) + " failed: " + outcomes[i].error);
    }
  } else {
    // Bounded worker pool over the cell list.
    std::mutex mu;
    size_t next = 0;
    auto worker = [&]() {
      for (;;) {
        size_t i;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (next >= cells.size()) return;
          i = next++;
        }
        outcomes[i] = run_cell(cells[i]);
      }
    };
    std::vector<std::thread> pool;
    const int n_workers = std::min<int>(cfg.jobs, int(cells.size()));
    pool.reserve(size_t(n_workers));
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (cfg.strict)
      for (size_t i = 0; i < cells.size(); ++i)
        if (!outcomes[i].ok)
          throw std::runtime_error("cell " + std::to_string(i) + " failed: " + outcomes[i].error);
  }

  RunOutcome res;
  res.cells_total = int(cells.size());
  for (const auto& oc : outcomes) {
    if (oc.ok)
      res.reports.push_back(oc.report);
    else
      ++res.cells_failed;
  }

  res.csv_path = cfg.output_dir + "/metrics.csv";
  write_metrics_csv(res.csv_path, res.reports);

  json manifest;
  manifest["format"] = "uvdef-manifest";
  manifest["version"] = 1;
  manifest["config_hash"] = hash;
  manifest["config"] = to_json(cfg);
  manifest["dataset"] = {{"source", cfg.dataset_dir.empty() ? "synthetic" : cfg.dataset_dir},
                         {"train_count", data.train_count()},
                         {"test_count", data.test_count()}};
  json jcells = json::array();
  for (size_t i = 0; i < cells.size(); ++i) {
    const Cell& c = cells[i];
    const CellOutcome& oc = outcomes[i];
    jcells.push_back({{"index", c.index},
                      {"device_seed", c.device_seed},
                      {"variant", c.variant},
                      {"error_rate", c.rate},
                      {"pattern", c.pattern},
                      {"status", oc.ok ? "ok" : "failed: " + oc.error},
                      {"report", oc.report_file}});
  }
  manifest["cells"] = jcells;
  manifest["metrics_csv"] = "metrics.csv";
  res.manifest_path = cfg.output_dir + "/manifest.json";
  std::ofstream os(res.manifest_path, std::ios::trunc);
  if (!os) throw std::runtime_error(res.manifest_path + ": cannot open for writing");
  os << manifest.dump(2) << "\n";
  if (!os.good()) throw std::runtime_error(res.manifest_path + ": write failed");
  return res;
}

std::optional<double> lowest_rate_with_tpr_above(const std::vector<MetricsReport>& reports,
                                                 double threshold, bool strict) {
  std::optional<double> best;
  for (const auto& r : reports) {
    const double tpr = strict ? r.benign_tpr_strict : r.benign_tpr_loose;
    if (tpr > threshold && (!best || r.error_rate < *best)) best = r.error_rate;
  }
  return best;
}

std::optional<double> lowest_rate_with_tpr_above_csv(const std::string& csv_path,
                                                     double threshold, bool strict) {
  std::ifstream is(csv_path);
  if (!is) throw std::runtime_error(csv_path + ": cannot open");
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error(csv_path + ": empty CSV");
  std::vector<std::string> cols;
  {
    std::stringstream ss(header);
    std::string tok;
    while (std::getline(ss, tok, ',')) cols.push_back(tok);
  }
  const auto col_of = [&cols, &csv_path](const std::string& name) {
    const auto it = std::find(cols.begin(), cols.end(), name);
    if (it == cols.end())
      throw std::runtime_error(csv_path + ": missing column '" + name + "'");
    return size_t(it - cols.begin());
  };
  const size_t rate_col = col_of("error_rate");
  const size_t tpr_col = col_of(strict ? "benign_tpr_strict" : "benign_tpr_loose");

  std::optional<double> best;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<std::string> vals;
    while (std::getline(ss, tok, ',')) vals.push_back(tok);
    if (vals.size() <= std::max(rate_col, tpr_col))
      throw std::runtime_error(csv_path + ": malformed row '" + line + "'");
    const double rate = std::stod(vals[rate_col]);
    const double tpr = std::stod(vals[tpr_col]);
    if (tpr > threshold && (!best || rate < *best)) best = rate;
  }
  return best;
}

}  // namespace uvdef
