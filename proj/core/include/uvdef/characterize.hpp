#pragma once

#include <optional>
#include <string>
#include <vector>

#include "uvdef/fault.hpp"
#include "uvdef/nn.hpp"

namespace uvdef {

// Fixed stimulus tensors shaped like the model's conv outputs. The values
// are an LFSR-style deterministic ramp, so a corrupted element is detectable
// by comparison with the pristine copy.
struct TestBattery {
  std::vector<QuantizedTensor> tensors;  // one per conv output surface
  uint64_t seed = 0;
  int64_t total_elems = 0;
};

TestBattery make_battery(const Model& m, uint64_t seed);

struct SelfTestReport {
  double voltage = 0.0;
  int trials = 0;
  bool crashed = false;
  int64_t corrupted = 0;   // summed over trials
  int64_t inspected = 0;   // total elements * trials
  double observed_rate = 0.0;
};

// Runs `trials` corruption rounds at one voltage and reports the observed
// fraction of corrupted elements. A crash is reported, not thrown.
SelfTestReport self_test(const DeviceProfile& p, const Model& m, double voltage,
                         const TestBattery& battery, int trials = 10);

struct SweepResult {
  std::vector<SelfTestReport> reports;  // descending voltage, crash point last
  // Monotone (isotonic) fit of observed rates, ascending voltage.
  std::vector<std::pair<double, double>> smoothed_points;
  std::optional<double> safe_floor;      // lowest error-free voltage seen
  std::optional<double> crash_ceiling;   // first (highest) crashing voltage
  bool found_critical = false;           // any nonzero-rate non-crash step

  // Assembles a device profile from the measurements; requires both
  // boundaries to have been found.
  DeviceProfile to_profile(const DeviceProfile& measured_on) const;
};

// Walks voltage downward from v_start to v_end in `step` decrements, running
// the self-test at each point, and stops at the first crash. Needs at least
// 3 points and positive step.
SweepResult sweep(const DeviceProfile& p, const Model& m, double v_start, double v_end,
                  double step, const TestBattery& battery, int trials = 10);

// CSV: voltage,trials,corrupted,inspected,observed_rate,smoothed_rate,region
void write_sweep_csv(const std::string& path, const SweepResult& r);

}  // namespace uvdef
