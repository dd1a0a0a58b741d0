#include "uvdef/defense.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

namespace uvdef {

using json = nlohmann::json;

std::pair<int, std::vector<int>> correct(const Model& tuned, const DeviceProfile& device,
                                         double voltage, BitFlipPattern pattern, const Tensor& x,
                                         uint64_t call_seed, int k) {
  const double rate = voltage_to_rate(device.curve, voltage);  // throws CrashError in crash region
  const FaultHook hook = make_device_hook(device, tuned, rate, pattern, call_seed);
  const ForwardResult r = forward(tuned, x, &hook, /*sample_tag=*/0);
  std::vector<int> ranked = top_k(r.probs, k);
  return {ranked[0], std::move(ranked)};
}

Verdict detect(const Model& base, const Model& tuned, const DeviceProfile& device, double voltage,
               BitFlipPattern pattern, const Tensor& x, uint64_t call_seed, int k) {
  Verdict v;
  const ForwardResult clean = forward(base, x);
  v.label_clean = argmax_label(clean.probs);
  auto [faulty_label, ranked] = correct(tuned, device, voltage, pattern, x, call_seed, k);
  v.label_faulty = faulty_label;
  v.topk_faulty = std::move(ranked);
  v.adversarial_flag = (v.label_clean != v.label_faulty);
  return v;
}

namespace {

// Shared faulty-pass helper so evaluate() and detect() cannot drift apart:
// one undervolted forward through the fine-tuned model per sample.
struct FaultyRunner {
  const Model& tuned;
  FaultHook hook;
  int k;

  FaultyRunner(const Model& tuned_, const DeviceProfile& device, double rate,
               BitFlipPattern pattern, uint64_t call_seed, int k_)
      : tuned(tuned_), hook(make_device_hook(device, tuned_, rate, pattern, call_seed)), k(k_) {}

  std::vector<int> run(const Tensor& x, uint64_t tag) const {
    const ForwardResult r = forward(tuned, x, &hook, tag);
    return top_k(r.probs, k);
  }
};

}  // namespace

MetricsReport evaluate(const Model& base, const Model& tuned, const DeviceProfile& device,
                       const DatasetHandle& data,
                       const std::map<std::string, std::vector<AdversarialExample>>& corpora,
                       const EvalSpec& spec) {
  double rate = spec.error_rate;
  if (spec.voltage) rate = voltage_to_rate(device.curve, *spec.voltage);
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("evaluate: error rate outside [0,1]");
  if (spec.top_k < 1) throw std::invalid_argument("evaluate: top_k must be >= 1");
  if (spec.benign_limit < 1) throw std::invalid_argument("evaluate: need at least 1 benign sample");

  MetricsReport rep;
  rep.device_seed = device.device_seed;
  rep.error_rate = rate;
  rep.pattern = spec.pattern.name();
  rep.variant = spec.variant;
  rep.eval_seed = spec.eval_seed;
  rep.top_k = spec.top_k;

  const FaultyRunner runner(tuned, device, rate, spec.pattern, mix_seed(spec.eval_seed, 0xe7a1ULL),
                            spec.top_k);

  // Benign sweep over a test-split prefix.
  const int64_t n_benign = std::min(spec.benign_limit, data.test_count());
  int64_t unflagged = 0, unflagged_and_right = 0;
  for (int64_t i = 0; i < n_benign; ++i) {
    const Tensor x = data.image(false, i);
    const int label_clean = argmax_label(forward(base, x).probs);
    const auto ranked = runner.run(x, mix_seed(0xbe9ULL, uint64_t(i)));
    const bool flagged = ranked[0] != label_clean;
    if (!flagged) {
      ++unflagged;
      if (label_clean == data.label(false, i)) ++unflagged_and_right;
    }
  }
  rep.benign_total = n_benign;
  rep.benign_tpr_loose = double(unflagged) / double(n_benign);
  rep.benign_tpr_strict = double(unflagged_and_right) / double(n_benign);

  // Adversarial corpora: detection and correction against the true label.
  for (const auto& [name, corpus] : corpora) {
    AttackMetrics am;
    am.total = int64_t(corpus.size());
    int64_t flagged = 0, top1 = 0, topk = 0;
    for (size_t i = 0; i < corpus.size(); ++i) {
      const AdversarialExample& ex = corpus[i];
      if (!ex.success) continue;  // baseline already fails: defense not exercised
      ++am.baseline_success;
      const int label_clean = argmax_label(forward(base, ex.x_adv).probs);
      const auto ranked = runner.run(ex.x_adv, mix_seed(0xadULL, uint64_t(i)));
      flagged += (ranked[0] != label_clean);
      top1 += (ranked[0] == ex.label_true);
      topk += (std::find(ranked.begin(), ranked.end(), ex.label_true) != ranked.end());
    }
    if (am.baseline_success) {
      am.detection_rate = double(flagged) / double(am.baseline_success);
      am.correction_top1 = double(top1) / double(am.baseline_success);
      am.correction_topk = double(topk) / double(am.baseline_success);
    } else {
      // Empty denominator: the rates are undefined, not zero.
      am.detection_rate = std::numeric_limits<double>::quiet_NaN();
      am.correction_top1 = std::numeric_limits<double>::quiet_NaN();
      am.correction_topk = std::numeric_limits<double>::quiet_NaN();
    }
    rep.attacks[name] = am;
  }
  return rep;
}

void write_report_json(const std::string& path, const MetricsReport& r,
                       const std::string& config_hash) {
  json j;
  j["format"] = "uvdef-metrics";
  j["version"] = 1;
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  j["device_seed"] = r.device_seed;
  j["error_rate"] = r.error_rate;
  j["pattern"] = r.pattern;
  j["variant"] = r.variant;
  j["eval_seed"] = r.eval_seed;
  j["top_k"] = r.top_k;
  j["benign"] = {{"total", r.benign_total},
                 {"tpr_strict", r.benign_tpr_strict},
                 {"tpr_loose", r.benign_tpr_loose}};
  // NaN marks an undefined rate (empty denominator); JSON spells it null.
  auto rate_or_null = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json attacks = json::object();
  for (const auto& [name, am] : r.attacks)
    attacks[name] = {{"total", am.total},
                     {"baseline_success", am.baseline_success},
                     {"detection_rate", rate_or_null(am.detection_rate)},
                     {"correction_top1", rate_or_null(am.correction_top1)},
                     {"correction_topk", rate_or_null(am.correction_topk)}};
  j["attacks"] = attacks;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os << j.dump(2) << "\n";
  if (!os.good()) throw std::runtime_error(path + ": write failed");
}

MetricsReport read_report_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error(path + ": cannot open");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": not valid JSON: " + e.what());
  }
  try {
    if (j.at("format") != "uvdef-metrics") throw std::runtime_error("wrong format tag");
    MetricsReport r;
    r.device_seed = j.at("device_seed").get<uint64_t>();
    r.error_rate = j.at("error_rate").get<double>();
    r.pattern = j.at("pattern").get<std::string>();
    r.variant = j.at("variant").get<std::string>();
    r.eval_seed = j.at("eval_seed").get<uint64_t>();
    r.top_k = j.at("top_k").get<int>();
    r.benign_total = j.at("benign").at("total").get<int64_t>();
    r.benign_tpr_strict = j.at("benign").at("tpr_strict").get<double>();
    r.benign_tpr_loose = j.at("benign").at("tpr_loose").get<double>();
    auto rate_of = [](const json& v) {
      return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
    };
    for (const auto& [name, am] : j.at("attacks").items()) {
      AttackMetrics a;
      a.total = am.at("total").get<int64_t>();
      a.baseline_success = am.at("baseline_success").get<int64_t>();
      a.detection_rate = rate_of(am.at("detection_rate"));
      a.correction_top1 = rate_of(am.at("correction_top1"));
      a.correction_topk = rate_of(am.at("correction_topk"));
      r.attacks[name] = a;
    }
    return r;
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": malformed metrics report: " + e.what());
  }
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsReport>& reports) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os << "device_seed,variant,error_rate,pattern,attack,total,baseline_success,"
        "detection_rate,correction_top1,correction_topk,benign_total,benign_tpr_strict,"
        "benign_tpr_loose\n";
  char line[512];
  for (const auto& r : reports) {
    for (const auto& [name, am] : r.attacks) {
      std::snprintf(line, sizeof line,
                    "%llu,%s,%.8f,%s,%s,%lld,%lld,%.6f,%.6f,%.6f,%lld,%.6f,%.6f\n",
                    static_cast<unsigned long long>(r.device_seed), r.variant.c_str(),
                    r.error_rate, r.pattern.c_str(), name.c_str(),
                    static_cast<long long>(am.total), static_cast<long long>(am.baseline_success),
                    am.detection_rate, am.correction_top1, am.correction_topk,
                    static_cast<long long>(r.benign_total), r.benign_tpr_strict,
                    r.benign_tpr_loose);
      os << line;
    }
    if (r.attacks.empty()) {
      std::snprintf(line, sizeof line, "%llu,%s,%.8f,%s,none,0,0,0,0,0,%lld,%.6f,%.6f\n",
                    static_cast<unsigned long long>(r.device_seed), r.variant.c_str(),
                    r.error_rate, r.pattern.c_str(), static_cast<long long>(r.benign_total),
                    r.benign_tpr_strict, r.benign_tpr_loose);
      os << line;
    }
  }
  if (!os.good()) throw std::runtime_error(path + ": write failed");
}

EnergyModel EnergyModel::stock() {
  EnergyModel e;
  e.table_ = {{0.652, 0.670}, {0.656, 0.714}, {0.660, 0.716}};
  // Least-squares fit of overhead = a*v^2 + b over the table, then shift b
  // so the fit passes exactly through the highest-voltage entry.
  double sx2 = 0.0, sx4 = 0.0, sy = 0.0, sx2y = 0.0;
  const double n = double(e.table_.size());
  for (const auto& [v, y] : e.table_) {
    const double v2 = v * v;
    sx2 += v2;
    sx4 += v2 * v2;
    sy += y;
    sx2y += v2 * y;
  }
  const double denom = n * sx4 - sx2 * sx2;
  e.quad_a_ = (n * sx2y - sx2 * sy) / denom;
  e.quad_b_ = (sy - e.quad_a_ * sx2) / n;
  const auto& [v_top, y_top] = e.table_.back();
  e.quad_b_ += y_top - (e.quad_a_ * v_top * v_top + e.quad_b_);
  return e;
}

double EnergyModel::estimate(EnergyMode mode, double voltage) const {
  if (table_.empty()) throw std::logic_error("energy model has no table");
  if (voltage < table_.front().first - 1e-12 || voltage > table_.back().first + 1e-12)
    throw std::invalid_argument("energy estimate: voltage " + std::to_string(voltage) +
                                " outside the measured range [" +
                                std::to_string(table_.front().first) + ", " +
                                std::to_string(table_.back().first) + "]");
  const double extra = (mode == EnergyMode::Detection) ? 1.0 : 0.0;
  for (const auto& [v, y] : table_)
    if (v == voltage) return y + extra;  // exact table hits stay exact
  double lo_v = table_.front().first, lo_y = table_.front().second;
  for (size_t i = 1; i < table_.size(); ++i) {
    const auto& [v, y] = table_[i];
    if (voltage <= v) {
      const double t = (voltage - lo_v) / (v - lo_v);
      return lo_y + t * (y - lo_y) + extra;
    }
    lo_v = v;
    lo_y = y;
  }
  return table_.back().second + extra;
}

double EnergyModel::quadratic(EnergyMode mode, double voltage) const {
  const double extra = (mode == EnergyMode::Detection) ? 1.0 : 0.0;
  return quad_a_ * voltage * voltage + quad_b_ + extra;
}

}  // namespace uvdef
