#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "uvdef/nn.hpp"
#include "uvdef/rng.hpp"
#include "uvdef/tensor.hpp"

namespace uvdef {

// The simulated part refuses to operate at or below its crash ceiling.
struct CrashError : std::runtime_error {
  explicit CrashError(const std::string& what) : std::runtime_error(what) {}
};

// Piecewise-linear voltage -> error-rate curve. Points ascend in voltage;
// rates are non-increasing as voltage rises. Voltages at or above safe_floor
// are error-free, at or below crash_ceiling the part stops responding.
struct VoltageErrorCurve {
  std::vector<std::pair<double, double>> points;  // (voltage, rate)
  double safe_floor = 0.0;
  double crash_ceiling = 0.0;

  void validate() const;
};

// Rate for an operating voltage. Outside the measured points the curve
// clamps to the nearest endpoint. Throws CrashError at or below the ceiling.
double voltage_to_rate(const VoltageErrorCurve& c, double voltage);

// Highest voltage producing at least `rate`; the least aggressive setting
// that reaches the requested corruption level. Throws std::invalid_argument
// if the curve never reaches `rate`.
double rate_to_voltage(const VoltageErrorCurve& c, double rate);

enum class FlipKind : uint8_t { SingleBit = 0, Quarter = 1, Half = 2 };

// How many of the 8 bits of a corrupted INT8 value flip.
struct BitFlipPattern {
  FlipKind kind = FlipKind::Half;

  int bits_per_value() const;
  const char* name() const;
  static BitFlipPattern from_name(const std::string& name);
};

struct DeviceProfile {
  uint64_t device_seed = 0;
  double nominal_voltage = 0.850;
  VoltageErrorCurve curve;
};

// Synthetic part with the stock curve: errors appear just under 0.660 V and
// grow linearly to 2% right above the 0.648 V crash ceiling.
DeviceProfile default_device(uint64_t device_seed);

void save_device_profile(const std::string& path, const DeviceProfile& p);
DeviceProfile load_device_profile(const std::string& path);

// One fault location: an element of one conv layer's output.
struct FaultSite {
  int conv_ordinal = 0;
  int64_t index = 0;  // flat offset within that conv output (C*H*W)
};

// Device-fixed permutation of every conv-output element. Derived once per
// (device_seed, model geometry) and shared; lower error rates select prefixes
// of the same order, which is what makes fault sets nest across rates.
struct SiteOrder {
  std::vector<FaultSite> order;
  std::vector<int64_t> layer_sizes;
  int64_t total = 0;
};

std::shared_ptr<const SiteOrder> derive_sites(const DeviceProfile& p, const Model& m);

// The first ceil(rate * total) sites of the device order, regrouped per conv
// layer for the injection path.
struct ActiveSites {
  std::vector<std::vector<int64_t>> per_conv;
  int64_t selected = 0;
  int64_t total = 0;
};

ActiveSites active_sites(const DeviceProfile& p, double error_rate, const Model& m);

inline int8_t flip_bits(int8_t v, uint8_t mask) { return int8_t(uint8_t(v) ^ mask); }

// Flips pattern.bits_per_value() distinct, randomly chosen bits of each
// listed element. Out-of-range site indices throw std::out_of_range.
void inject(QuantizedTensor& q, const std::vector<int64_t>& sites, BitFlipPattern pattern,
            Rng& rng);

// Forward hook for a fixed device: quantizes the conv output, corrupts the
// active sites, and writes only those elements back dequantized, so an empty
// site set leaves the activation bit-identical.
FaultHook make_device_hook(const DeviceProfile& p, const Model& m, double error_rate,
                           BitFlipPattern pattern, uint64_t call_seed);

// Attacker-side hook that re-draws the site set for every (call_seed,
// sample_tag): random noise with no fixed geography.
FaultHook make_fresh_noise_hook(const Model& m, double error_rate, BitFlipPattern pattern,
                                uint64_t call_seed);

}  // namespace uvdef
