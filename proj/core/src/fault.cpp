#include "uvdef/fault.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>

#include <nlohmann/json.hpp>

namespace uvdef {

using json = nlohmann::json;

void VoltageErrorCurve::validate() const {
  if (points.empty()) throw std::invalid_argument("voltage curve: no points");
  if (!(crash_ceiling < safe_floor))
    throw std::invalid_argument("voltage curve: crash ceiling must lie below the safe floor");
  for (size_t i = 0; i < points.size(); ++i) {
    const auto& [v, r] = points[i];
    if (!std::isfinite(v) || !std::isfinite(r))
      throw std::invalid_argument("voltage curve: non-finite point");
    if (r < 0.0 || r > 1.0) throw std::invalid_argument("voltage curve: rate outside [0,1]");
    if (v >= safe_floor && r != 0.0)
      throw std::invalid_argument("voltage curve: nonzero rate at or above the safe floor");
    if (i > 0) {
      if (points[i - 1].first >= v)
        throw std::invalid_argument("voltage curve: voltages must be strictly ascending");
      if (points[i - 1].second < r)
        throw std::invalid_argument("voltage curve: rate must not increase with voltage");
    }
  }
}

double voltage_to_rate(const VoltageErrorCurve& c, double voltage) {
  c.validate();
  if (!std::isfinite(voltage)) throw std::invalid_argument("voltage_to_rate: non-finite voltage");
  if (voltage <= c.crash_ceiling)
    throw CrashError("device crash: " + std::to_string(voltage) + " V is at or below the " +
                     std::to_string(c.crash_ceiling) + " V crash ceiling");
  if (voltage >= c.safe_floor) return 0.0;
  if (voltage <= c.points.front().first) return c.points.front().second;
  if (voltage >= c.points.back().first) return c.points.back().second;
  for (size_t i = 1; i < c.points.size(); ++i) {
    const auto& [v1, r1] = c.points[i];
    if (voltage <= v1) {
      const auto& [v0, r0] = c.points[i - 1];
      const double t = (voltage - v0) / (v1 - v0);
      return r0 + t * (r1 - r0);
    }
  }
  return c.points.back().second;  // unreachable
}

double rate_to_voltage(const VoltageErrorCurve& c, double rate) {
  c.validate();
  if (!std::isfinite(rate) || rate < 0.0 || rate > 1.0)
    throw std::invalid_argument("rate_to_voltage: rate must be in [0,1]");
  if (rate == 0.0) return c.safe_floor;
  const double max_rate = c.points.front().second;
  if (rate > max_rate)
    throw std::invalid_argument("rate_to_voltage: curve tops out at " + std::to_string(max_rate) +
                                ", cannot reach " + std::to_string(rate));
  // Walk from the high-voltage (low-rate) end toward the highest voltage
  // that reaches the requested rate.
  double upper_v = c.safe_floor, upper_r = 0.0;
  for (size_t i = c.points.size(); i-- > 0;) {
    const auto& [v, r] = c.points[i];
    if (r >= rate) {
      if (r == rate) return v;
      if (upper_r == rate) return upper_v;
      const double t = (rate - upper_r) / (r - upper_r);
      return upper_v + t * (v - upper_v);
    }
    upper_v = v;
    upper_r = r;
  }
  return c.points.front().first;  // unreachable: rate <= max_rate
}

int BitFlipPattern::bits_per_value() const {
  switch (kind) {
    case FlipKind::SingleBit:
      return 1;
    case FlipKind::Quarter:
      return 2;
    case FlipKind::Half:
      return 4;
  }
  throw std::logic_error("unknown flip kind");
}

const char* BitFlipPattern::name() const {
  switch (kind) {
    case FlipKind::SingleBit:
      return "single";
    case FlipKind::Quarter:
      return "quarter";
    case FlipKind::Half:
      return "half";
  }
  throw std::logic_error("unknown flip kind");
}

BitFlipPattern BitFlipPattern::from_name(const std::string& name) {
  if (name == "single") return {FlipKind::SingleBit};
  if (name == "quarter") return {FlipKind::Quarter};
  if (name == "half") return {FlipKind::Half};
  throw std::invalid_argument("unknown bit-flip pattern '" + name +
                              "' (expected single|quarter|half)");
}

DeviceProfile default_device(uint64_t device_seed) {
  DeviceProfile p;
  p.device_seed = device_seed;
  p.nominal_voltage = 0.850;
  p.curve.safe_floor = 0.660;
  p.curve.crash_ceiling = 0.648;
  p.curve.points = {{0.6485, 0.02}, {0.660, 0.0}};
  p.curve.validate();
  return p;
}

void save_device_profile(const std::string& path, const DeviceProfile& p) {
  p.curve.validate();
  json j;
  j["format"] = "uvdef-device-profile";
  j["version"] = 1;
  j["device_seed"] = p.device_seed;
  j["nominal_voltage"] = p.nominal_voltage;
  j["safe_floor"] = p.curve.safe_floor;
  j["crash_ceiling"] = p.curve.crash_ceiling;
  json pts = json::array();
  for (const auto& [v, r] : p.curve.points) pts.push_back({{"voltage", v}, {"rate", r}});
  j["points"] = pts;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os << j.dump(2) << "\n";
  if (!os.good()) throw std::runtime_error(path + ": write failed");
}

DeviceProfile load_device_profile(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error(path + ": cannot open");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": not valid JSON: " + e.what());
  }
  try {
    if (j.at("format") != "uvdef-device-profile")
      throw std::runtime_error("wrong format tag");
    DeviceProfile p;
    p.device_seed = j.at("device_seed").get<uint64_t>();
    p.nominal_voltage = j.at("nominal_voltage").get<double>();
    p.curve.safe_floor = j.at("safe_floor").get<double>();
    p.curve.crash_ceiling = j.at("crash_ceiling").get<double>();
    for (const auto& pt : j.at("points"))
      p.curve.points.emplace_back(pt.at("voltage").get<double>(), pt.at("rate").get<double>());
    p.curve.validate();
    return p;
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": malformed device profile: " + e.what());
  }
}

std::shared_ptr<const SiteOrder> derive_sites(const DeviceProfile& p, const Model& m) {
  static std::mutex cache_mu;
  static std::map<std::pair<uint64_t, uint64_t>, std::shared_ptr<const SiteOrder>> cache;

  const std::pair<uint64_t, uint64_t> key{p.device_seed, m.geometry_hash()};
  {
    std::lock_guard<std::mutex> lock(cache_mu);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
  }

  auto so = std::make_shared<SiteOrder>();
  so->layer_sizes = m.conv_output_sizes();
  if (so->layer_sizes.empty())
    throw std::invalid_argument("derive_sites: model has no conv layers to corrupt");
  for (int64_t s : so->layer_sizes) so->total += s;
  so->order.reserve(size_t(so->total));
  for (size_t l = 0; l < so->layer_sizes.size(); ++l)
    for (int64_t i = 0; i < so->layer_sizes[l]; ++i) so->order.push_back({int(l), i});

  // The shuffle is the device's manufacturing lottery: fixed per chip,
  // independent across chips.
  Rng rng(mix_seed(p.device_seed, 0x51735ULL));
  shuffle(so->order, rng);

  std::lock_guard<std::mutex> lock(cache_mu);
  auto [it, inserted] = cache.emplace(key, std::move(so));
  return it->second;
}

ActiveSites active_sites(const DeviceProfile& p, double error_rate, const Model& m) {
  if (!std::isfinite(error_rate) || error_rate < 0.0 || error_rate > 1.0)
    throw std::invalid_argument("active_sites: error rate must be in [0,1]");
  const auto so = derive_sites(p, m);
  ActiveSites out;
  out.total = so->total;
  out.per_conv.resize(so->layer_sizes.size());
  out.selected = int64_t(std::ceil(error_rate * double(so->total)));
  for (int64_t i = 0; i < out.selected; ++i) {
    const FaultSite& s = so->order[size_t(i)];
    out.per_conv[size_t(s.conv_ordinal)].push_back(s.index);
  }
  return out;
}

namespace {

uint8_t random_flip_mask(Rng& rng, int nbits) {
  int bits[8] = {0, 1, 2, 3, 4, 5, 6, 7};
  uint8_t mask = 0;
  for (int i = 0; i < nbits; ++i) {
    const int j = i + int(rng.bounded(uint64_t(8 - i)));
    std::swap(bits[i], bits[j]);
    mask |= uint8_t(1u << bits[i]);
  }
  return mask;
}

}  // namespace

void inject(QuantizedTensor& q, const std::vector<int64_t>& sites, BitFlipPattern pattern,
            Rng& rng) {
  const int nbits = pattern.bits_per_value();
  for (int64_t s : sites) {
    if (s < 0 || s >= q.numel())
      throw std::out_of_range("inject: site " + std::to_string(s) + " outside tensor of " +
                              std::to_string(q.numel()) + " elements");
    q.data[size_t(s)] = flip_bits(q.data[size_t(s)], random_flip_mask(rng, nbits));
  }
}

FaultHook make_device_hook(const DeviceProfile& p, const Model& m, double error_rate,
                           BitFlipPattern pattern, uint64_t call_seed) {
  auto sites = std::make_shared<ActiveSites>(active_sites(p, error_rate, m));
  FaultHook hook;
  hook.apply = [sites, pattern, call_seed](int ordinal, uint64_t tag, Tensor& act) {
    if (ordinal < 0 || size_t(ordinal) >= sites->per_conv.size())
      throw std::out_of_range("fault hook: conv ordinal " + std::to_string(ordinal));
    const auto& list = sites->per_conv[size_t(ordinal)];
    if (list.empty()) return;
    QuantizedTensor q = quantize(act);
    Rng rng(mix_seed(call_seed, tag, 0xb17fULL, uint64_t(ordinal)));
    inject(q, list, pattern, rng);
    for (int64_t i : list) act[i] = q.scale * double(q.data[size_t(i)]);
  };
  return hook;
}

FaultHook make_fresh_noise_hook(const Model& m, double error_rate, BitFlipPattern pattern,
                                uint64_t call_seed) {
  if (!std::isfinite(error_rate) || error_rate < 0.0 || error_rate > 1.0)
    throw std::invalid_argument("make_fresh_noise_hook: error rate must be in [0,1]");
  struct State {
    std::vector<int64_t> layer_offsets;  // running starts per conv ordinal
    int64_t total = 0;
    int64_t k = 0;
    // 1-entry cache: calls within one forward pass share the tag.
    uint64_t cached_tag = ~0ULL;
    bool cache_valid = false;
    std::vector<std::vector<int64_t>> cached_sites;
  };
  auto st = std::make_shared<State>();
  const auto sizes = m.conv_output_sizes();
  if (sizes.empty())
    throw std::invalid_argument("make_fresh_noise_hook: model has no conv layers");
  st->layer_offsets.resize(sizes.size());
  for (size_t l = 0; l < sizes.size(); ++l) {
    st->layer_offsets[l] = st->total;
    st->total += sizes[l];
  }
  st->k = int64_t(std::ceil(error_rate * double(st->total)));

  FaultHook hook;
  hook.apply = [st, pattern, call_seed, sizes](int ordinal, uint64_t tag, Tensor& act) {
    if (ordinal < 0 || size_t(ordinal) >= sizes.size())
      throw std::out_of_range("noise hook: conv ordinal " + std::to_string(ordinal));
    if (st->k == 0) return;
    if (!st->cache_valid || st->cached_tag != tag) {
      Rng rng(mix_seed(call_seed, tag, 0xf4e5ULL));
      const auto flat = sample_k_of_n(rng, uint64_t(st->total), uint64_t(st->k));
      st->cached_sites.assign(sizes.size(), {});
      size_t l = 0;
      for (uint64_t f : flat) {
        while (l + 1 < sizes.size() && int64_t(f) >= st->layer_offsets[l + 1]) ++l;
        st->cached_sites[l].push_back(int64_t(f) - st->layer_offsets[l]);
      }
      st->cached_tag = tag;
      st->cache_valid = true;
    }
    const auto& list = st->cached_sites[size_t(ordinal)];
    if (list.empty()) return;
    QuantizedTensor q = quantize(act);
    Rng rng(mix_seed(call_seed, tag, 0xb17fULL, uint64_t(ordinal)));
    inject(q, list, pattern, rng);
    for (int64_t i : list) act[i] = q.scale * double(q.data[size_t(i)]);
  };
  return hook;
}

}  // namespace uvdef
