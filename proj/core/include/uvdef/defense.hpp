#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "uvdef/attacks.hpp"
#include "uvdef/dataset.hpp"
#include "uvdef/fault.hpp"
#include "uvdef/nn.hpp"

namespace uvdef {

// Outcome of one detection query: the clean-voltage base-model label, the
// undervolted fine-tuned-model label, and the mismatch flag.
struct Verdict {
  int label_clean = -1;
  int label_faulty = -1;
  bool adversarial_flag = false;  // labels disagree
  std::vector<int> topk_faulty;
};

// Single undervolted pass through the fine-tuned model: top-k candidates
// for recovery. Throws CrashError when the voltage is in the crash region.
std::pair<int, std::vector<int>> correct(const Model& tuned, const DeviceProfile& device,
                                         double voltage, BitFlipPattern pattern, const Tensor& x,
                                         uint64_t call_seed, int k = 5);

// Two-pass scheme: base model at nominal voltage, fine-tuned model
// undervolted; a label mismatch flags the input.
Verdict detect(const Model& base, const Model& tuned, const DeviceProfile& device, double voltage,
               BitFlipPattern pattern, const Tensor& x, uint64_t call_seed, int k = 5);

// What to run the evaluation at. Exactly one of error_rate/voltage drives
// the hook; when voltage is set the rate comes from the device curve.
struct EvalSpec {
  double error_rate = 0.0;
  std::optional<double> voltage;
  BitFlipPattern pattern{FlipKind::Half};
  std::string variant = "rft";  // none | rft | cdft (report annotation)
  uint64_t eval_seed = 0;
  int top_k = 5;
  int64_t benign_limit = 1000;
};

struct AttackMetrics {
  int64_t total = 0;           // corpus size
  int64_t baseline_success = 0;  // fooled the clean base model
  double detection_rate = 0.0;   // flagged / baseline_success
  double correction_top1 = 0.0;  // recovered true label / baseline_success
  double correction_topk = 0.0;
};

struct MetricsReport {
  // Echo of the run configuration.
  uint64_t device_seed = 0;
  double error_rate = 0.0;
  std::string pattern;
  std::string variant;
  uint64_t eval_seed = 0;
  int top_k = 5;

  // Benign behaviour: strict counts a pass only when un-flagged AND the
  // clean label is right; loose only requires un-flagged.
  int64_t benign_total = 0;
  double benign_tpr_strict = 0.0;
  double benign_tpr_loose = 0.0;

  std::map<std::string, AttackMetrics> attacks;
};

// Full pass over 1000 benign samples (test split) and every adversarial
// corpus: detection on both, correction on the adversarial ones.
MetricsReport evaluate(const Model& base, const Model& tuned, const DeviceProfile& device,
                       const DatasetHandle& data,
                       const std::map<std::string, std::vector<AdversarialExample>>& corpora,
                       const EvalSpec& spec);

void write_report_json(const std::string& path, const MetricsReport& r,
                       const std::string& config_hash = "");
MetricsReport read_report_json(const std::string& path);

// CSV across error rates: per (rate, attack) detection and correction, plus
// the benign columns — the shape used for rate-sensitivity plots.
void write_metrics_csv(const std::string& path, const std::vector<MetricsReport>& reports);

enum class EnergyMode { Correction, Detection };

// Per-inference energy overhead of running the scheme, normalized to one
// nominal-voltage inference. Correction = one undervolted pass; detection
// adds the nominal-voltage base pass on top.
class EnergyModel {
 public:
  // Stock table: measured overheads at 0.660 V, 0.656 V, and 0.652 V.
  static EnergyModel stock();

  // Piecewise-linear overhead lookup; exact at the table's voltages.
  double estimate(EnergyMode mode, double voltage) const;

  // Least-squares quadratic E(v) = a*v^2 + b through the correction table,
  // shifted to be exact at the highest table voltage.
  double quadratic(EnergyMode mode, double voltage) const;

  const std::vector<std::pair<double, double>>& correction_table() const { return table_; }

 private:
  std::vector<std::pair<double, double>> table_;  // ascending voltage -> overhead
  double quad_a_ = 0.0, quad_b_ = 0.0;
};

}  // namespace uvdef
