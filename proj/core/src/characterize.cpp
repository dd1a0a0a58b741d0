#include "uvdef/characterize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace uvdef {

TestBattery make_battery(const Model& m, uint64_t seed) {
  TestBattery b;
  b.seed = seed;
  Rng rng(mix_seed(seed, 0xba77ULL));
  for (const auto& shape : m.conv_output_shapes()) {
    QuantizedTensor q;
    q.shape = shape;
    q.scale = 1.0 / 127.0;
    const int64_t n = Tensor::numel_of(shape);
    q.data.resize(size_t(n));
    for (auto& v : q.data) v = int8_t(int(rng.bounded(255)) - 127);
    b.tensors.push_back(std::move(q));
    b.total_elems += n;
  }
  return b;
}

SelfTestReport self_test(const DeviceProfile& p, const Model& m, double voltage,
                         const TestBattery& battery, int trials) {
  if (trials < 1) throw std::invalid_argument("self_test: trials must be >= 1");
  if (battery.tensors.size() != size_t(m.conv_count()))
    throw std::invalid_argument("self_test: battery does not match the model's conv surfaces");
  SelfTestReport rep;
  rep.voltage = voltage;
  rep.trials = trials;

  double rate = 0.0;
  try {
    rate = voltage_to_rate(p.curve, voltage);
  } catch (const CrashError&) {
    rep.crashed = true;
    return rep;
  }

  const ActiveSites sites = active_sites(p, rate, m);
  for (int t = 0; t < trials; ++t) {
    Rng rng(mix_seed(p.device_seed, battery.seed, uint64_t(t), 0x5e1fULL));
    for (size_t l = 0; l < battery.tensors.size(); ++l) {
      const QuantizedTensor& clean = battery.tensors[l];
      QuantizedTensor probe = clean;
      inject(probe, sites.per_conv[l], {FlipKind::Half}, rng);
      for (size_t i = 0; i < probe.data.size(); ++i)
        rep.corrupted += (probe.data[i] != clean.data[i]);
      rep.inspected += int64_t(clean.data.size());
    }
  }
  rep.observed_rate = rep.inspected ? double(rep.corrupted) / double(rep.inspected) : 0.0;
  return rep;
}

namespace {

// Pool-adjacent-violators. Rates must be non-increasing in voltage; the
// input arrives in descending-voltage measurement order, i.e. rates should
// already be non-decreasing along the vector — PAV repairs sampling noise.
std::vector<double> isotonic_non_decreasing(const std::vector<double>& y) {
  std::vector<double> level;
  std::vector<double> weight;
  for (double v : y) {
    level.push_back(v);
    weight.push_back(1.0);
    while (level.size() > 1 && level[level.size() - 2] > level.back()) {
      const double w = weight[weight.size() - 2] + weight.back();
      const double merged =
          (level[level.size() - 2] * weight[weight.size() - 2] + level.back() * weight.back()) / w;
      level.pop_back();
      weight.pop_back();
      level.back() = merged;
      weight.back() = w;
    }
  }
  std::vector<double> out;
  out.reserve(y.size());
  for (size_t i = 0; i < level.size(); ++i)
    out.insert(out.end(), size_t(weight[i] + 0.5), level[i]);
  return out;
}

}  // namespace

SweepResult sweep(const DeviceProfile& p, const Model& m, double v_start, double v_end,
                  double step, const TestBattery& battery, int trials) {
  if (!(v_start > v_end)) throw std::invalid_argument("sweep: v_start must exceed v_end");
  if (!(step > 0.0)) throw std::invalid_argument("sweep: step must be positive");
  const int n_points = int(std::floor((v_start - v_end) / step + 1e-9)) + 1;
  if (n_points < 3)
    throw std::invalid_argument("sweep: range covers fewer than 3 points at this step");

  SweepResult out;
  for (int i = 0; i < n_points; ++i) {
    // Snap to the microvolt grid: a regulator takes discrete setpoints, and
    // accumulated float error must not leak a point across a region boundary.
    const double v = std::round((v_start - double(i) * step) * 1e6) / 1e6;
    SelfTestReport rep = self_test(p, m, v, battery, trials);
    out.reports.push_back(rep);
    if (rep.crashed) {
      out.crash_ceiling = v;
      break;
    }
    if (rep.observed_rate == 0.0) {
      out.safe_floor = v;  // descending walk: ends at the lowest clean voltage
    } else {
      out.found_critical = true;
    }
  }

  // Fit a monotone curve over the non-crash measurements.
  std::vector<double> rates;
  for (const auto& r : out.reports)
    if (!r.crashed) rates.push_back(r.observed_rate);
  const std::vector<double> smoothed = isotonic_non_decreasing(rates);
  for (size_t i = 0; i < smoothed.size(); ++i)
    out.smoothed_points.emplace_back(out.reports[i].voltage, smoothed[i]);
  std::reverse(out.smoothed_points.begin(), out.smoothed_points.end());  // ascending voltage
  return out;
}

DeviceProfile SweepResult::to_profile(const DeviceProfile& measured_on) const {
  if (!safe_floor || !crash_ceiling)
    throw std::invalid_argument(
        "sweep did not locate both region boundaries; widen the range or shrink the step");
  DeviceProfile p = measured_on;
  p.curve.points.clear();
  for (const auto& [v, r] : smoothed_points) {
    if (v > *safe_floor) continue;  // clean region collapses to the floor point
    p.curve.points.emplace_back(v, r);
  }
  // Strictly ascending voltages with non-increasing rate going up.
  p.curve.safe_floor = *safe_floor;
  p.curve.crash_ceiling = *crash_ceiling;
  p.curve.validate();
  return p;
}

void write_sweep_csv(const std::string& path, const SweepResult& r) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os << "voltage,trials,corrupted,inspected,observed_rate,smoothed_rate,region\n";
  char line[256];
  for (const auto& rep : r.reports) {
    double smoothed = 0.0;
    for (const auto& [v, s] : r.smoothed_points)
      if (v == rep.voltage) smoothed = s;
    const char* region = rep.crashed ? "crash"
                         : rep.observed_rate == 0.0 ? "safe"
                                                    : "critical";
    std::snprintf(line, sizeof line, "%.6f,%d,%lld,%lld,%.8f,%.8f,%s\n", rep.voltage, rep.trials,
                  static_cast<long long>(rep.corrupted), static_cast<long long>(rep.inspected),
                  rep.observed_rate, rep.crashed ? 0.0 : smoothed, region);
    os << line;
  }
  if (!os.good()) throw std::runtime_error(path + ": write failed");
}

}  // namespace uvdef
