#include "uvdef/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace uvdef {

Model make_desk_cnn(std::vector<int> input_shape, int classes) {
  return make_model(std::move(input_shape),
                    {LayerSpec::conv2d(32, 3), LayerSpec::relu(),
                     LayerSpec::conv2d(32, 3), LayerSpec::relu(), LayerSpec::max_pool(),
                     LayerSpec::conv2d(64, 3), LayerSpec::relu(),
                     LayerSpec::conv2d(64, 3), LayerSpec::relu(), LayerSpec::max_pool(),
                     LayerSpec::dense(256), LayerSpec::relu(), LayerSpec::dense(classes),
                     LayerSpec::softmax_head(1.0)});
}

double accuracy(const Model& m, const DatasetHandle& data, bool train_split, int64_t limit,
                const FaultHook* hook, uint64_t tag_salt) {
  const int64_t total = train_split ? data.train_count() : data.test_count();
  const int64_t n = (limit > 0 && limit < total) ? limit : total;
  if (n == 0) throw std::invalid_argument("accuracy: empty split");
  constexpr int64_t kChunk = 64;
  int64_t correct = 0;
  std::vector<int64_t> idx;
  std::vector<uint64_t> tags;
  for (int64_t lo = 0; lo < n; lo += kChunk) {
    const int64_t hi = std::min(n, lo + kChunk);
    idx.clear();
    tags.clear();
    for (int64_t i = lo; i < hi; ++i) {
      idx.push_back(i);
      tags.push_back(mix_seed(tag_salt, uint64_t(i)));
    }
    const BatchResult r = forward_batch(m, data.batch(train_split, idx), hook, &tags);
    for (size_t k = 0; k < idx.size(); ++k)
      correct += (argmax_label(r.probs[k]) == data.label(train_split, idx[size_t(k)]));
  }
  return double(correct) / double(n);
}

namespace {

struct SgdState {
  std::vector<Tensor> vel_w, vel_b;

  explicit SgdState(const Model& m) {
    vel_w.reserve(m.weights.size());
    vel_b.reserve(m.biases.size());
    for (size_t i = 0; i < m.weights.size(); ++i) {
      vel_w.emplace_back(m.weights[i].numel() ? Tensor(m.weights[i].shape) : Tensor{});
      vel_b.emplace_back(m.biases[i].numel() ? Tensor(m.biases[i].shape) : Tensor{});
    }
  }

  void step(Model& m, const Gradients& g, double lr, double momentum) {
    for (size_t i = 0; i < m.weights.size(); ++i) {
      if (!m.weights[i].numel()) continue;
      for (int64_t j = 0; j < m.weights[i].numel(); ++j) {
        vel_w[i][j] = momentum * vel_w[i][j] - lr * g.weight_grads[i][j];
        m.weights[i][j] += vel_w[i][j];
      }
      for (int64_t j = 0; j < m.biases[i].numel(); ++j) {
        vel_b[i][j] = momentum * vel_b[i][j] - lr * g.bias_grads[i][j];
        m.biases[i][j] += vel_b[i][j];
      }
    }
  }
};

std::vector<SoftLabel> hard_targets(const DatasetHandle& data, const std::vector<int64_t>& idx,
                                    int classes) {
  std::vector<SoftLabel> t;
  t.reserve(idx.size());
  for (int64_t i : idx) t.push_back(one_hot(data.label(true, i), classes));
  return t;
}

// One SGD pass over `order`; returns the mean training loss. Targets are
// per-dataset-index distributions.
double run_epoch(Model& m, SgdState& sgd, const DatasetHandle& data,
                 const std::vector<int64_t>& order,
                 const std::vector<SoftLabel>* targets_by_pos,  // aligned with `order`
                 const TrainConfig& cfg, const FaultHook* hook, uint64_t epoch_salt) {
  const int classes = m.num_classes();
  const double T = m.temperature();
  double loss_sum = 0.0;
  int64_t seen = 0;
  std::vector<int64_t> idx;
  std::vector<uint64_t> tags;
  std::vector<SoftLabel> targets;
  for (size_t lo = 0; lo < order.size(); lo += size_t(cfg.batch_size)) {
    const size_t hi = std::min(order.size(), lo + size_t(cfg.batch_size));
    idx.assign(order.begin() + long(lo), order.begin() + long(hi));
    tags.clear();
    for (int64_t i : idx) tags.push_back(mix_seed(epoch_salt, uint64_t(i)));
    targets.clear();
    if (targets_by_pos) {
      for (size_t k = lo; k < hi; ++k) targets.push_back((*targets_by_pos)[k]);
    } else {
      for (int64_t i : idx) targets.push_back(one_hot(data.label(true, i), classes));
    }

    const Trace trace = forward_trace(m, data.batch(true, idx), hook, &tags);
    double batch_loss = 0.0;
    for (size_t k = 0; k < idx.size(); ++k)
      batch_loss += soft_cross_entropy(trace.probs()[k], targets[k]);
    loss_sum += batch_loss;
    seen += int64_t(idx.size());

    const Tensor seed_grad = ce_logit_grad(trace.probs(), targets, T);
    const Gradients g = backward(m, trace, seed_grad, /*want_input_grad=*/false);
    sgd.step(m, g, cfg.learning_rate, cfg.momentum);
  }
  const double mean_loss = loss_sum / double(seen);
  if (!std::isfinite(mean_loss))
    throw TrainingFailure("training diverged: non-finite epoch loss", mean_loss, 0.0);
  return mean_loss;
}

double mean_loss_on(const Model& m, const DatasetHandle& data, const std::vector<int64_t>& idx,
                    const std::vector<SoftLabel>& targets, const FaultHook* hook,
                    uint64_t salt) {
  if (idx.empty()) return 0.0;
  constexpr size_t kChunk = 64;
  double sum = 0.0;
  std::vector<int64_t> chunk;
  std::vector<uint64_t> tags;
  for (size_t lo = 0; lo < idx.size(); lo += kChunk) {
    const size_t hi = std::min(idx.size(), lo + kChunk);
    chunk.assign(idx.begin() + long(lo), idx.begin() + long(hi));
    tags.clear();
    for (int64_t i : chunk) tags.push_back(mix_seed(salt, uint64_t(i)));
    const BatchResult r = forward_batch(m, data.batch(true, chunk), hook, &tags);
    for (size_t k = 0; k < chunk.size(); ++k)
      sum += soft_cross_entropy(r.probs[k], targets[lo + k]);
  }
  return sum / double(idx.size());
}

}  // namespace

Model train_base(const DatasetHandle& data, const TrainConfig& cfg, const Model* arch) {
  if (cfg.epochs < 1) throw std::invalid_argument("train_base: epochs must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("train_base: batch_size must be >= 1");
  if (cfg.learning_rate <= 0.0) throw std::invalid_argument("train_base: learning rate");

  Model m = arch ? *arch : make_desk_cnn(data.input_shape(), data.num_classes);
  init_params(m, cfg.seed);
  SgdState sgd(m);

  const int64_t n = (cfg.train_limit > 0 && cfg.train_limit < data.train_count())
                        ? cfg.train_limit
                        : data.train_count();
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int e = 0; e < cfg.epochs; ++e) {
    Rng rng(mix_seed(cfg.seed, 0xe70cULL, uint64_t(e)));
    shuffle(order, rng);
    run_epoch(m, sgd, data, order, nullptr, cfg, nullptr, 0);
  }

  const double acc = accuracy(m, data, /*train_split=*/false, cfg.eval_limit);
  if (acc < cfg.accuracy_floor)
    throw TrainingFailure("base training reached " + std::to_string(acc) +
                              " test accuracy, below the " + std::to_string(cfg.accuracy_floor) +
                              " floor",
                          acc, cfg.accuracy_floor);
  return m;
}

std::vector<int64_t> sample_subset(const DatasetHandle& data, double fraction, uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0)
    throw std::invalid_argument("sample_subset: fraction must be in (0,1]");
  const int64_t want = int64_t(std::ceil(fraction * double(data.train_count()) - 1e-9));
  if (want < 1) throw std::invalid_argument("sample_subset: fraction selects no samples");

  // Per-class pools, shuffled by a per-class stream, then dealt round-robin
  // so class counts differ by at most one.
  std::vector<std::vector<int64_t>> pools(static_cast<size_t>(data.num_classes));
  for (int64_t i = 0; i < data.train_count(); ++i)
    pools[size_t(data.label(true, i))].push_back(i);
  for (size_t c = 0; c < pools.size(); ++c) {
    Rng rng(mix_seed(seed, 0x5b5eULL, uint64_t(c)));
    shuffle(pools[c], rng);
  }
  std::vector<int64_t> out;
  out.reserve(size_t(want));
  size_t round = 0;
  while (int64_t(out.size()) < want) {
    bool any = false;
    for (size_t c = 0; c < pools.size() && int64_t(out.size()) < want; ++c) {
      if (round < pools[c].size()) {
        out.push_back(pools[c][round]);
        any = true;
      }
    }
    if (!any) throw std::invalid_argument("sample_subset: fraction exceeds available data");
    ++round;
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<SoftLabel> soft_labels(const Model& m, const DatasetHandle& data,
                                   const std::vector<int64_t>& subset, double temperature) {
  if (temperature < 1.0) throw std::invalid_argument("soft_labels: temperature must be >= 1");
  std::vector<SoftLabel> out;
  out.reserve(subset.size());
  constexpr size_t kChunk = 64;
  std::vector<int64_t> chunk;
  for (size_t lo = 0; lo < subset.size(); lo += kChunk) {
    const size_t hi = std::min(subset.size(), lo + kChunk);
    chunk.assign(subset.begin() + long(lo), subset.begin() + long(hi));
    const BatchResult r = forward_batch(m, data.batch(true, chunk));
    const auto soft = softmax_t_rows(r.logits, temperature);
    out.insert(out.end(), soft.begin(), soft.end());
  }
  return out;
}

double FinetuneContext::error_rate() const { return voltage_to_rate(device.curve, voltage); }

namespace {

FinetuneResult finetune_impl(const Model& base, const DatasetHandle& data,
                             const std::vector<int64_t>& subset,
                             const std::vector<SoftLabel>* soft_targets, double run_temperature,
                             const FinetuneContext& ctx, const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw std::invalid_argument("finetune: epochs must be >= 1");
  if (cfg.temperature < 1.0) throw std::invalid_argument("finetune: temperature must be >= 1");
  if (subset.empty()) throw std::invalid_argument("finetune: empty subset");
  if (double(subset.size()) > 0.006 * double(data.train_count()) + 1.0)
    throw std::invalid_argument("finetune: subset exceeds the 0.6% data budget");
  if (soft_targets && soft_targets->size() != subset.size())
    throw std::invalid_argument("finetune: targets do not align with the subset");
  if (!(ctx.voltage > ctx.device.curve.crash_ceiling && ctx.voltage <= ctx.device.curve.safe_floor))
    throw std::invalid_argument(
        "finetune: voltage must sit in the device's undervolted operating range");

  Model m = base;
  m.set_temperature(run_temperature);
  SgdState sgd(m);
  const int classes = m.num_classes();
  const double rate = voltage_to_rate(ctx.device.curve, ctx.voltage);

  // Deterministic split of the subset into train/val parts.
  std::vector<size_t> pos(subset.size());
  std::iota(pos.begin(), pos.end(), 0);
  Rng split_rng(mix_seed(cfg.seed, 0x59117ULL, 42));
  shuffle(pos, split_rng);
  const size_t n_val = std::min(subset.size() - 1,
                                size_t(std::ceil(cfg.val_fraction * double(subset.size()))));
  std::vector<size_t> val_pos(pos.begin(), pos.begin() + long(n_val));
  std::vector<size_t> tr_pos(pos.begin() + long(n_val), pos.end());

  std::vector<int64_t> val_idx;
  std::vector<SoftLabel> val_targets;
  for (size_t p : val_pos) {
    val_idx.push_back(subset[p]);
    val_targets.push_back(soft_targets ? (*soft_targets)[p]
                                       : one_hot(data.label(true, subset[p]), classes));
  }

  FinetuneResult res;
  int rises = 0;
  double prev_val = std::numeric_limits<double>::infinity();
  for (int e = 0; e < cfg.epochs; ++e) {
    Rng rng(mix_seed(cfg.seed, 0xf7e0ULL, uint64_t(e)));
    std::vector<size_t> epoch_pos = tr_pos;
    shuffle(epoch_pos, rng);
    std::vector<int64_t> order;
    std::vector<SoftLabel> targets;
    order.reserve(epoch_pos.size());
    for (size_t p : epoch_pos) {
      order.push_back(subset[p]);
      targets.push_back(soft_targets ? (*soft_targets)[p]
                                     : one_hot(data.label(true, subset[p]), classes));
    }
    const FaultHook hook =
        make_device_hook(ctx.device, m, rate, ctx.pattern, mix_seed(cfg.seed, 0xfa17ULL, uint64_t(e)));
    res.train_loss.push_back(run_epoch(m, sgd, data, order, &targets, cfg, &hook,
                                       mix_seed(cfg.seed, 0x7a65ULL, uint64_t(e))));
    const FaultHook vhook =
        make_device_hook(ctx.device, m, rate, ctx.pattern, mix_seed(cfg.seed, 0x7a1dULL, uint64_t(e)));
    const double vloss = mean_loss_on(m, data, val_idx, val_targets, &vhook,
                                      mix_seed(cfg.seed, 0x7a65ULL, uint64_t(e)));
    res.val_loss.push_back(vloss);
    res.epochs_run = e + 1;
    rises = (vloss > prev_val) ? rises + 1 : 0;
    prev_val = vloss;
    if (rises >= 2) {
      res.early_stopped = true;
      break;
    }
  }
  m.set_temperature(1.0);  // inference always runs at T = 1
  res.model = std::move(m);
  return res;
}

}  // namespace

FinetuneResult finetune_rft(const Model& base, const DatasetHandle& data,
                            const std::vector<int64_t>& subset, const FinetuneContext& ctx,
                            const TrainConfig& cfg) {
  return finetune_impl(base, data, subset, nullptr, 1.0, ctx, cfg);
}

FinetuneResult finetune_cdft(const Model& base, const DatasetHandle& data,
                             const std::vector<int64_t>& subset,
                             const std::vector<SoftLabel>& targets, double soft_label_temperature,
                             const FinetuneContext& ctx, const TrainConfig& cfg) {
  if (soft_label_temperature != cfg.temperature)
    throw std::invalid_argument(
        "finetune_cdft: soft labels were distilled at a different temperature than the run");
  return finetune_impl(base, data, subset, &targets, cfg.temperature, ctx, cfg);
}

}  // namespace uvdef
