#include "uvdef/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

namespace uvdef {

int select_target(int true_label, int num_classes) {
  if (num_classes < 2) throw std::invalid_argument("select_target: need at least 2 classes");
  if (true_label < 0 || true_label >= num_classes)
    throw std::invalid_argument("select_target: label out of range");
  return (true_label + 1) % num_classes;
}

int select_target(const SoftLabel& pred, TargetMode mode, int true_label) {
  const int C = pred.size();
  if (mode == TargetMode::Next) return select_target(true_label, C);
  if (C < 2) throw std::invalid_argument("select_target: need at least 2 classes");
  int ll = 0;
  for (int c = 1; c < C; ++c)
    if (pred.probs[size_t(c)] < pred.probs[size_t(ll)]) ll = c;  // ties keep the lower index
  return ll;
}

Distortion distortion(const Tensor& x, const Tensor& x_adv) {
  if (!x.same_shape(x_adv)) throw std::invalid_argument("distortion: shape mismatch");
  Distortion d;
  double sq = 0.0;
  int64_t changed = 0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double diff = x_adv[i] - x[i];
    const double a = std::abs(diff);
    if (a > 1e-6) ++changed;
    sq += diff * diff;
    d.linf = std::max(d.linf, a);
  }
  d.l0 = x.numel() ? double(changed) / double(x.numel()) : 0.0;
  d.l2 = std::sqrt(sq);
  return d;
}

namespace {

Tensor as_batch1(const Tensor& x) {
  std::vector<int> s = x.shape;
  s.insert(s.begin(), 1);
  return Tensor(std::move(s), x.data);
}

Tensor from_batch1(Tensor&& b) {
  std::vector<int> s(b.shape.begin() + 1, b.shape.end());
  return Tensor(std::move(s), std::move(b.data));
}

void clip01(Tensor& t) {
  for (auto& v : t.data) v = std::clamp(v, 0.0, 1.0);
}

// Gradient of (z_a - z_b) w.r.t. the input, optionally through a fault hook.
// A negative `b` drops the second term.
Tensor logit_diff_grad(const Model& m, const Tensor& x, int a, int b, const FaultHook* hook,
                       uint64_t tag) {
  std::vector<uint64_t> tags{tag};
  const Tensor bx = as_batch1(x);
  const Trace tr = forward_trace(m, bx, hook, &tags);
  const int C = tr.logits().shape[1];
  Tensor seed({1, C});
  seed[a] = 1.0;
  if (b >= 0) seed[b] -= 1.0;
  Gradients g = backward(m, tr, seed, /*want_input_grad=*/true, /*want_param_grads=*/false);
  return from_batch1(std::move(g.input_grad));
}

}  // namespace

Tensor fgsm(const Model& m, const Tensor& x, int true_label, double eps) {
  if (eps < 0.0) throw std::invalid_argument("fgsm: epsilon must be non-negative");
  const int C = m.num_classes();
  if (true_label < 0 || true_label >= C) throw std::invalid_argument("fgsm: label out of range");

  std::vector<uint64_t> tags{0};
  const Trace tr = forward_trace(m, as_batch1(x), nullptr, &tags);
  // dCE/dlogits at T=1 for a one-hot target: p - e_y.
  Tensor seed({1, C});
  for (int c = 0; c < C; ++c) seed[c] = tr.probs()[0].probs[size_t(c)];
  seed[true_label] -= 1.0;
  Gradients g = backward(m, tr, seed, true, false);

  Tensor x_adv = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double s = g.input_grad[i];
    x_adv[i] += eps * (s > 0.0 ? 1.0 : (s < 0.0 ? -1.0 : 0.0));
  }
  clip01(x_adv);
  return x_adv;
}

Tensor deepfool(const Model& m, const Tensor& x, int max_iter, double overshoot,
                int true_label) {
  if (max_iter < 1) throw std::invalid_argument("deepfool: max_iter must be >= 1");
  if (overshoot < 0.0) throw std::invalid_argument("deepfool: overshoot must be non-negative");
  const int C = m.num_classes();
  const int k0 = argmax_label(forward(m, x).probs);
  if (true_label >= 0 && k0 != true_label) return x;  // nothing to cross

  Tensor r_total(x.shape);
  Tensor x_adv = x;
  for (int iter = 0; iter < max_iter; ++iter) {
    // Batch the sample C times: one trace serves every boundary gradient.
    std::vector<int> bs = x.shape;
    bs.insert(bs.begin(), C);
    Tensor rep(bs);
    for (int c = 0; c < C; ++c)
      std::copy(x_adv.data.begin(), x_adv.data.end(),
                rep.data.begin() + int64_t(c) * x.numel());
    const Trace tr = forward_trace(m, rep);
    const double* z = tr.logits().data.data();  // rows identical
    if (argmax_label(tr.probs()[0]) != k0) break;

    Tensor seeds({C, C});
    for (int k = 0; k < C; ++k) {
      if (k == k0) continue;
      seeds[int64_t(k) * C + k] = 1.0;
      seeds[int64_t(k) * C + k0] = -1.0;
    }
    Gradients g = backward(m, tr, seeds, true, false);

    double best_ratio = std::numeric_limits<double>::infinity();
    int best_k = -1;
    double best_norm_sq = 0.0;
    for (int k = 0; k < C; ++k) {
      if (k == k0) continue;
      const double fk = z[k] - z[k0];
      double norm_sq = 0.0;
      const double* wk = g.input_grad.data.data() + int64_t(k) * x.numel();
      for (int64_t i = 0; i < x.numel(); ++i) norm_sq += wk[i] * wk[i];
      if (norm_sq < 1e-30) continue;
      const double ratio = std::abs(fk) / std::sqrt(norm_sq);
      if (ratio < best_ratio) {
        best_ratio = ratio;
        best_k = k;
        best_norm_sq = norm_sq;
      }
    }
    if (best_k < 0) break;  // degenerate gradients; keep what we have

    const double* wk = g.input_grad.data.data() + int64_t(best_k) * x.numel();
    const double fk = z[best_k] - z[k0];
    const double coef = (std::abs(fk) + 1e-6) / best_norm_sq;
    for (int64_t i = 0; i < x.numel(); ++i) r_total[i] += coef * wk[i];

    x_adv = x;
    for (int64_t i = 0; i < x.numel(); ++i) x_adv[i] += (1.0 + overshoot) * r_total[i];
    clip01(x_adv);
  }
  return x_adv;
}

namespace {

struct HookedModel {
  const Model& m;
  FaultHook hook;
  bool has_hook = false;
  uint64_t eval_counter = 0;

  explicit HookedModel(const Model& model, const AttackEnv& env) : m(model) {
    switch (env.mode) {
      case AttackEnv::Mode::Plain:
        break;
      case AttackEnv::Mode::FreshNoise:
        hook = make_fresh_noise_hook(m, env.error_rate, env.pattern, env.attacker_seed);
        has_hook = true;
        break;
      case AttackEnv::Mode::DeviceSites:
        hook = make_device_hook(env.device, m, env.error_rate, env.pattern, env.attacker_seed);
        has_hook = true;
        break;
    }
  }

  // Every evaluation gets a fresh tag, so FreshNoise redraws its sites and
  // the device hook redraws its bit noise — exactly what the attacker sees.
  Trace trace(const Tensor& batch1) {
    std::vector<uint64_t> tags{eval_counter++};
    return forward_trace(m, batch1, has_hook ? &hook : nullptr, &tags);
  }
};

}  // namespace

CwResult cw_l2(const Model& m, const Tensor& x, int target, const AttackParams& p,
               const AttackEnv& env) {
  const int C = m.num_classes();
  if (target < 0 || target >= C) throw std::invalid_argument("cw_l2: target out of range");
  if (p.cw_steps < 1 || p.cw_search_steps < 1 || p.cw_lr <= 0.0 || p.cw_c_lo <= 0.0 ||
      p.cw_c_hi < p.cw_c_lo)
    throw std::invalid_argument("cw_l2: bad optimizer parameters");

  HookedModel hm(m, env);

  CwResult best;
  best.x_adv = x;
  best.l2 = std::numeric_limits<double>::infinity();

  // Already classified as the target in the attacker's environment?
  {
    const Trace tr = hm.trace(as_batch1(x));
    if (argmax_label(tr.probs()[0]) == target) {
      best.success = true;
      best.l2 = 0.0;
      return best;
    }
  }

  const int64_t n = x.numel();
  // tanh-space parametrization; shrink toward the interior so atanh is finite.
  constexpr double kShrink = 1.0 - 1e-6;
  std::vector<double> w0(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) w0[size_t(i)] = std::atanh((2.0 * x[i] - 1.0) * kShrink);

  double c_lo = p.cw_c_lo, c_hi = p.cw_c_hi;
  for (int search = 0; search < p.cw_search_steps; ++search) {
    const double c = std::sqrt(c_lo * c_hi);  // geometric midpoint

    std::vector<double> w = w0;
    std::vector<double> adam_m(static_cast<size_t>(n), 0.0), adam_v(static_cast<size_t>(n), 0.0);
    constexpr double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
    bool success_at_c = false;
    int steps_since_success = -1;

    Tensor x_adv(x.shape);
    for (int step = 0; step < p.cw_steps; ++step) {
      for (int64_t i = 0; i < n; ++i) x_adv[i] = (std::tanh(w[size_t(i)]) + 1.0) * 0.5;

      const Trace tr = hm.trace(as_batch1(x_adv));
      const double* z = tr.logits().data.data();
      int runner = target == 0 ? 1 : 0;
      for (int k = 0; k < C; ++k)
        if (k != target && z[k] > z[runner]) runner = k;
      const double hinge = z[runner] - z[target];

      if (argmax_label(tr.probs()[0]) == target) {
        const Distortion d = distortion(x, x_adv);
        if (d.l2 < best.l2) {
          best.x_adv = x_adv;
          best.l2 = d.l2;
          best.best_c = c;
          best.success = true;
        }
        success_at_c = true;
        if (steps_since_success < 0) steps_since_success = 0;
      }
      if (steps_since_success >= 0 && p.cw_early_exit > 0 &&
          steps_since_success >= p.cw_early_exit)
        break;
      if (steps_since_success >= 0) ++steps_since_success;

      // dLoss/dx_adv = 2*delta + c * d hinge/dx_adv (hinge active above -kappa).
      Tensor gx({int(n)});
      const bool hinge_active = hinge > -p.cw_kappa;
      if (hinge_active) {
        Tensor seed({1, C});
        seed[runner] = c;
        seed[target] = -c;
        Gradients g = backward(m, tr, seed, true, false);
        std::copy(g.input_grad.data.begin(), g.input_grad.data.end(), gx.data.begin());
      }
      for (int64_t i = 0; i < n; ++i) gx[i] += 2.0 * (x_adv[i] - x[i]);

      // Chain through x = (tanh(w)+1)/2, then one Adam step.
      const double lr_t = p.cw_lr * std::sqrt(1.0 - std::pow(b2, step + 1)) /
                          (1.0 - std::pow(b1, step + 1));
      for (int64_t i = 0; i < n; ++i) {
        const double th = std::tanh(w[size_t(i)]);
        const double gw = gx[i] * 0.5 * (1.0 - th * th);
        adam_m[size_t(i)] = b1 * adam_m[size_t(i)] + (1.0 - b1) * gw;
        adam_v[size_t(i)] = b2 * adam_v[size_t(i)] + (1.0 - b2) * gw * gw;
        w[size_t(i)] -= lr_t * adam_m[size_t(i)] / (std::sqrt(adam_v[size_t(i)]) + adam_eps);
      }
    }

    if (success_at_c)
      c_hi = c;  // try cheaper distortion
    else
      c_lo = c;  // need a stronger classification push
  }
  return best;
}

std::vector<int64_t> attack_candidates(const Model& m, const DatasetHandle& data, int64_t count,
                                       uint64_t seed) {
  if (count < 1) throw std::invalid_argument("attack_candidates: count must be >= 1");
  std::vector<int64_t> order(static_cast<size_t>(data.test_count()));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, 0xca4dULL));
  shuffle(order, rng);

  std::vector<int64_t> out;
  constexpr size_t kChunk = 64;
  std::vector<int64_t> chunk;
  for (size_t lo = 0; lo < order.size() && int64_t(out.size()) < count; lo += kChunk) {
    const size_t hi = std::min(order.size(), lo + kChunk);
    chunk.assign(order.begin() + long(lo), order.begin() + long(hi));
    const BatchResult r = forward_batch(m, data.batch(false, chunk));
    for (size_t k = 0; k < chunk.size() && int64_t(out.size()) < count; ++k)
      if (argmax_label(r.probs[k]) == data.label(false, chunk[k])) out.push_back(chunk[k]);
  }
  if (int64_t(out.size()) < count)
    throw std::runtime_error("attack_candidates: model classifies fewer than " +
                             std::to_string(count) + " test samples correctly");
  return out;
}

std::vector<AdversarialExample> generate_corpus(const Model& m, const DatasetHandle& data,
                                                const std::vector<int64_t>& candidates,
                                                const std::string& kind, const AttackParams& p,
                                                const AttackEnv& env) {
  const int C = m.num_classes();
  const bool is_cw = kind == "cw";
  if (kind != "fgsm" && kind != "deepfool" && !is_cw)
    throw std::invalid_argument("generate_corpus: unknown attack kind '" + kind + "'");
  std::string recorded_kind = kind;
  if (is_cw && env.mode == AttackEnv::Mode::FreshNoise) recorded_kind = "cw_noise";
  if (is_cw && env.mode == AttackEnv::Mode::DeviceSites) recorded_kind = "cw_device";

  std::vector<AdversarialExample> out;
  out.reserve(candidates.size());
  for (int64_t idx : candidates) {
    AdversarialExample ex;
    ex.original_index = idx;
    ex.label_true = data.label(false, idx);
    ex.kind = recorded_kind;
    const Tensor x = data.image(false, idx);

    if (kind == "fgsm") {
      ex.x_adv = fgsm(m, x, ex.label_true, p.fgsm_eps);
    } else if (kind == "deepfool") {
      ex.x_adv = deepfool(m, x, p.deepfool_max_iter, p.deepfool_overshoot, ex.label_true);
    } else {
      ex.target = select_target(ex.label_true, C);
      AttackEnv sample_env = env;
      sample_env.attacker_seed = mix_seed(env.attacker_seed, uint64_t(idx));
      ex.x_adv = cw_l2(m, x, ex.target, p, sample_env).x_adv;
    }

    const ForwardResult clean = forward(m, ex.x_adv);
    ex.label_base = argmax_label(clean.probs);
    ex.confidence = clean.probs.probs[size_t(ex.label_base)];
    ex.dist = distortion(x, ex.x_adv);
    ex.success = ex.target >= 0 ? (ex.label_base == ex.target) : (ex.label_base != ex.label_true);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<AdversarialExample> gen_noise_aware(const Model& m, const DatasetHandle& data,
                                                const std::vector<int64_t>& candidates,
                                                double error_rate, BitFlipPattern pattern,
                                                uint64_t attacker_seed, const AttackParams& p) {
  AttackEnv env;
  env.mode = AttackEnv::Mode::FreshNoise;
  env.error_rate = error_rate;
  env.pattern = pattern;
  env.attacker_seed = attacker_seed;
  return generate_corpus(m, data, candidates, "cw", p, env);
}

std::vector<AdversarialExample> gen_device_aware(const Model& m, const DatasetHandle& data,
                                                 const std::vector<int64_t>& candidates,
                                                 const DeviceProfile& device, double error_rate,
                                                 BitFlipPattern pattern, uint64_t attacker_seed,
                                                 const AttackParams& p) {
  AttackEnv env;
  env.mode = AttackEnv::Mode::DeviceSites;
  env.device = device;
  env.error_rate = error_rate;
  env.pattern = pattern;
  env.attacker_seed = attacker_seed;
  return generate_corpus(m, data, candidates, "cw", p, env);
}

AttackSummary summarize(const std::string& kind, const std::vector<AdversarialExample>& corpus) {
  AttackSummary s;
  s.kind = kind;
  s.count = int64_t(corpus.size());
  double conf = 0.0, l0 = 0.0, l2 = 0.0, linf = 0.0;
  for (const auto& ex : corpus) {
    if (!ex.success) continue;
    ++s.successes;
    conf += ex.confidence;
    l0 += double(ex.dist.l0);
    l2 += ex.dist.l2;
    linf += ex.dist.linf;
  }
  s.success_rate = s.count ? double(s.successes) / double(s.count) : 0.0;
  if (s.successes) {
    conf /= double(s.successes);
    l0 /= double(s.successes);
    l2 /= double(s.successes);
    linf /= double(s.successes);
    s.mean_confidence = conf;
    s.mean_l0 = l0;
    s.mean_l2 = l2;
    s.mean_linf = linf;
  }
  return s;
}

namespace {

constexpr char kCorpusMagic[4] = {'U', 'V', 'A', 'C'};
constexpr uint32_t kCorpusVersion = 1;

}  // namespace

void save_corpus(const std::string& path, const std::vector<AdversarialExample>& corpus) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  auto put = [&os](const void* p, size_t sz) { os.write(static_cast<const char*>(p), long(sz)); };
  put(kCorpusMagic, 4);
  put(&kCorpusVersion, 4);
  const uint64_t n = corpus.size();
  put(&n, 8);
  for (const auto& ex : corpus) {
    put(&ex.original_index, 8);
    const int32_t lt = ex.label_true, lb = ex.label_base, tg = ex.target;
    put(&lt, 4);
    put(&lb, 4);
    put(&tg, 4);
    const uint32_t klen = uint32_t(ex.kind.size());
    put(&klen, 4);
    put(ex.kind.data(), klen);
    const uint8_t succ = ex.success ? 1 : 0;
    put(&succ, 1);
    put(&ex.confidence, 8);
    put(&ex.dist.l0, 8);
    put(&ex.dist.l2, 8);
    put(&ex.dist.linf, 8);
    const uint32_t rank = uint32_t(ex.x_adv.shape.size());
    put(&rank, 4);
    for (int d : ex.x_adv.shape) {
      const int32_t dd = d;
      put(&dd, 4);
    }
    put(ex.x_adv.data.data(), ex.x_adv.data.size() * sizeof(double));
  }
  os.flush();
  if (!os.good()) throw std::runtime_error(path + ": write failed");
}

std::vector<AdversarialExample> load_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error(path + ": cannot open");
  auto get = [&is, &path](void* p, size_t sz) {
    is.read(static_cast<char*>(p), long(sz));
    if (!is) throw std::runtime_error(path + ": truncated corpus");
  };
  char magic[4];
  get(magic, 4);
  if (std::memcmp(magic, kCorpusMagic, 4) != 0)
    throw std::runtime_error(path + ": not an adversarial corpus (bad magic)");
  uint32_t ver = 0;
  get(&ver, 4);
  if (ver != kCorpusVersion)
    throw std::runtime_error(path + ": unsupported corpus version " + std::to_string(ver));
  uint64_t n = 0;
  get(&n, 8);
  if (n > (1u << 24)) throw std::runtime_error(path + ": implausible corpus size");
  std::vector<AdversarialExample> out;
  out.reserve(size_t(n));
  for (uint64_t i = 0; i < n; ++i) {
    AdversarialExample ex;
    get(&ex.original_index, 8);
    int32_t lt, lb, tg;
    get(&lt, 4);
    get(&lb, 4);
    get(&tg, 4);
    ex.label_true = lt;
    ex.label_base = lb;
    ex.target = tg;
    uint32_t klen = 0;
    get(&klen, 4);
    if (klen > 64) throw std::runtime_error(path + ": implausible kind length");
    ex.kind.resize(klen);
    if (klen) get(ex.kind.data(), klen);
    uint8_t succ = 0;
    get(&succ, 1);
    ex.success = succ != 0;
    get(&ex.confidence, 8);
    get(&ex.dist.l0, 8);
    get(&ex.dist.l2, 8);
    get(&ex.dist.linf, 8);
    uint32_t rank = 0;
    get(&rank, 4);
    if (rank == 0 || rank > 8) throw std::runtime_error(path + ": implausible tensor rank");
    std::vector<int> shape(rank);
    for (auto& d : shape) {
      int32_t dd;
      get(&dd, 4);
      d = dd;
    }
    Tensor t(shape);
    get(t.data.data(), t.data.size() * sizeof(double));
    ex.x_adv = std::move(t);
    out.push_back(std::move(ex));
  }
  return out;
}

void write_attack_summary_csv(const std::string& path, const std::vector<AttackSummary>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os << "kind,count,successes,success_rate,mean_confidence,mean_l0,mean_l2,mean_linf\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%s,%lld,%lld,%.6f,%.6f,%.2f,%.6f,%.6f\n", r.kind.c_str(),
                  static_cast<long long>(r.count), static_cast<long long>(r.successes),
                  r.success_rate, r.mean_confidence, r.mean_l0, r.mean_l2, r.mean_linf);
    os << line;
  }
  if (!os.good()) throw std::runtime_error(path + ": write failed");
}

}  // namespace uvdef
