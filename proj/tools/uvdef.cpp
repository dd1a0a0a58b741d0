// Workbench CLI: characterization, training, fine-tuning, attack corpus
// generation, defense evaluation, and full experiment runs.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "uvdef/characterize.hpp"
#include "uvdef/checkpoint.hpp"
#include "uvdef/experiment.hpp"

namespace {

using namespace uvdef;

// Shared dataset selection: an on-disk binary batch directory or the
// procedural generator.
struct DataOpts {
  std::string dir;
  uint64_t synth_seed = 7;
  int64_t synth_train = 50000;
  int64_t synth_test = 10000;
  double boundary_fraction = 0.45;
  double noise_amp = 0.10;

  void attach(CLI::App* cmd) {
    cmd->add_option("--data", dir, "dataset directory (binary batch files)");
    cmd->add_option("--synth-seed", synth_seed, "procedural dataset seed (when --data is absent)");
    cmd->add_option("--synth-train", synth_train, "procedural train split size");
    cmd->add_option("--synth-test", synth_test, "procedural test split size");
    cmd->add_option("--synth-boundary", boundary_fraction,
                    "fraction of samples drawn near a class-pair boundary");
    cmd->add_option("--synth-noise", noise_amp, "procedural per-pixel noise amplitude");
  }

  DatasetHandle load() const {
    if (!dir.empty()) return load_cifar10(dir);
    SyntheticSpec spec;
    spec.seed = synth_seed;
    spec.train_count = synth_train;
    spec.test_count = synth_test;
    spec.boundary_fraction = boundary_fraction;
    spec.noise_amp = noise_amp;
    return make_synthetic_dataset(spec);
  }
};

int cmd_characterize(const std::string& profile_in, uint64_t device_seed, double v_start,
                     double v_end, double step, int trials, uint64_t battery_seed,
                     const std::string& out_profile, const std::string& out_csv) {
  const DeviceProfile truth =
      profile_in.empty() ? default_device(device_seed) : load_device_profile(profile_in);
  const Model m = make_desk_cnn();
  const TestBattery battery = make_battery(m, battery_seed);
  const SweepResult res = sweep(truth, m, v_start, v_end, step, battery, trials);

  for (const auto& r : res.reports) {
    if (r.crashed)
      std::printf("%.4f V  CRASH\n", r.voltage);
    else
      std::printf("%.4f V  rate %.6f  (%lld/%lld corrupted)\n", r.voltage, r.observed_rate,
                  static_cast<long long>(r.corrupted), static_cast<long long>(r.inspected));
  }
  if (res.safe_floor) std::printf("safe floor: %.4f V\n", *res.safe_floor);
  if (res.crash_ceiling) std::printf("crash ceiling: %.4f V\n", *res.crash_ceiling);

  if (!out_csv.empty()) write_sweep_csv(out_csv, res);
  if (!out_profile.empty()) {
    save_device_profile(out_profile, res.to_profile(truth));
    std::printf("profile written to %s\n", out_profile.c_str());
  }
  return 0;
}

int cmd_train(const DataOpts& data_opts, const TrainConfig& cfg, const std::string& out) {
  const DatasetHandle data = data_opts.load();
  const Model m = train_base(data, cfg);
  const double acc = accuracy(m, data, false, cfg.eval_limit);
  std::printf("test accuracy: %.4f\n", acc);
  save_checkpoint(out, m, {{"role", "base"}, {"test_accuracy", std::to_string(acc)}});
  std::printf("checkpoint written to %s\n", out.c_str());
  return 0;
}

int cmd_finetune(const DataOpts& data_opts, const std::string& base_path,
                 const std::string& variant, uint64_t device_seed, const std::string& profile_in,
                 double voltage, double rate, const std::string& pattern_name,
                 const TrainConfig& cfg, const std::string& out) {
  const DatasetHandle data = data_opts.load();
  const Model base = load_checkpoint(base_path).model;
  const DeviceProfile device =
      profile_in.empty() ? default_device(device_seed) : load_device_profile(profile_in);

  FinetuneContext ctx;
  ctx.device = device;
  ctx.pattern = BitFlipPattern::from_name(pattern_name);
  ctx.voltage = voltage > 0.0 ? voltage : rate_to_voltage(device.curve, rate);

  const std::vector<int64_t> subset = sample_subset(data, cfg.subset_fraction, cfg.seed);
  FinetuneResult res;
  if (variant == "rft") {
    res = finetune_rft(base, data, subset, ctx, cfg);
  } else if (variant == "cdft") {
    const auto soft = soft_labels(base, data, subset, cfg.temperature);
    res = finetune_cdft(base, data, subset, soft, cfg.temperature, ctx, cfg);
  } else {
    std::fprintf(stderr, "unknown variant '%s' (expected rft|cdft)\n", variant.c_str());
    return 1;
  }
  for (int e = 0; e < res.epochs_run; ++e)
    std::printf("epoch %d  train loss %.6f  val loss %.6f\n", e + 1, res.train_loss[size_t(e)],
                res.val_loss[size_t(e)]);
  if (res.early_stopped) std::printf("early stop: validation loss rose twice\n");
  save_checkpoint(out, res.model,
                  {{"role", variant},
                   {"voltage", std::to_string(ctx.voltage)},
                   {"pattern", pattern_name},
                   {"device_seed", std::to_string(device_seed)}});
  std::printf("checkpoint written to %s\n", out.c_str());
  return 0;
}

int cmd_attack(const DataOpts& data_opts, const std::string& base_path, const std::string& kind,
               int64_t count, uint64_t seed, const AttackParams& params, double rate,
               uint64_t device_seed, const std::string& pattern_name, const std::string& out,
               const std::string& summary_csv) {
  const DatasetHandle data = data_opts.load();
  const Model base = load_checkpoint(base_path).model;
  const std::vector<int64_t> candidates = attack_candidates(base, data, count, seed);
  const BitFlipPattern pattern = BitFlipPattern::from_name(pattern_name);

  std::vector<AdversarialExample> corpus;
  if (kind == "cw_noise") {
    corpus = gen_noise_aware(base, data, candidates, rate, pattern, seed, params);
  } else if (kind == "cw_device") {
    corpus = gen_device_aware(base, data, candidates, default_device(device_seed), rate, pattern,
                              seed, params);
  } else {
    corpus = generate_corpus(base, data, candidates, kind, params);
  }
  const AttackSummary s = summarize(kind, corpus);
  std::printf("%s: %lld/%lld successful (%.1f%%), mean L2 %.4f, mean Linf %.4f\n", kind.c_str(),
              static_cast<long long>(s.successes), static_cast<long long>(s.count),
              100.0 * s.success_rate, s.mean_l2, s.mean_linf);
  save_corpus(out, corpus);
  std::printf("corpus written to %s\n", out.c_str());
  if (!summary_csv.empty()) write_attack_summary_csv(summary_csv, {s});
  return 0;
}

int cmd_evaluate(const DataOpts& data_opts, const std::string& base_path,
                 const std::string& tuned_path, const std::vector<std::string>& corpus_paths,
                 uint64_t device_seed, const std::string& profile_in, double rate, double voltage,
                 const std::string& pattern_name, const std::string& variant, uint64_t eval_seed,
                 int top_k, int64_t benign, const std::string& out_json) {
  const DatasetHandle data = data_opts.load();
  const Model base = load_checkpoint(base_path).model;
  const Model tuned = tuned_path.empty() ? base : load_checkpoint(tuned_path).model;
  const DeviceProfile device =
      profile_in.empty() ? default_device(device_seed) : load_device_profile(profile_in);

  std::map<std::string, std::vector<AdversarialExample>> corpora;
  for (const auto& path : corpus_paths) {
    auto corpus = load_corpus(path);
    const std::string name = corpus.empty() ? path : corpus.front().kind;
    corpora[name] = std::move(corpus);
  }

  EvalSpec spec;
  spec.error_rate = rate;
  if (voltage > 0.0) spec.voltage = voltage;
  spec.pattern = BitFlipPattern::from_name(pattern_name);
  spec.variant = variant;
  spec.eval_seed = eval_seed;
  spec.top_k = top_k;
  spec.benign_limit = benign;

  const MetricsReport rep = evaluate(base, tuned, device, data, corpora, spec);
  std::printf("benign TPR: strict %.4f, loose %.4f (n=%lld)\n", rep.benign_tpr_strict,
              rep.benign_tpr_loose, static_cast<long long>(rep.benign_total));
  for (const auto& [name, am] : rep.attacks)
    std::printf("%s: detection %.4f, correction top1 %.4f top%d %.4f (baseline %lld/%lld)\n",
                name.c_str(), am.detection_rate, am.correction_top1, rep.top_k,
                am.correction_topk, static_cast<long long>(am.baseline_success),
                static_cast<long long>(am.total));
  if (!out_json.empty()) {
    write_report_json(out_json, rep);
    std::printf("report written to %s\n", out_json.c_str());
  }
  return 0;
}

int cmd_report(const std::string& config_path, double tpr_threshold, bool loose) {
  const ExperimentConfig cfg = load_experiment_config(config_path);
  std::printf("config hash %s, output to %s\n", config_hash(cfg).c_str(),
              cfg.output_dir.c_str());
  const RunOutcome out = run_experiment(cfg);
  std::printf("%d/%d cells succeeded\n", out.cells_total - out.cells_failed, out.cells_total);
  std::printf("manifest: %s\nmetrics:  %s\n", out.manifest_path.c_str(), out.csv_path.c_str());
  if (tpr_threshold > 0.0) {
    const auto rate = lowest_rate_with_tpr_above(out.reports, tpr_threshold, !loose);
    if (rate)
      std::printf("lowest error rate with benign TPR > %.2f: %.6g\n", tpr_threshold, *rate);
    else
      std::printf("no grid cell kept benign TPR above %.2f\n", tpr_threshold);
  }
  return out.cells_failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"undervolted-inference defense workbench"};
  app.require_subcommand(1);

  try {
    // characterize
    auto* c_char = app.add_subcommand("characterize", "sweep a device's voltage/error curve");
    std::string char_profile, char_out_profile, char_out_csv = "sweep.csv";
    uint64_t char_seed = 1, battery_seed = 3;
    double v_start = 0.700, v_end = 0.640, v_step = 0.001;
    int trials = 10;
    c_char->add_option("--device-seed", char_seed, "simulated device seed");
    c_char->add_option("--profile", char_profile, "existing device profile JSON (instead of seed)");
    c_char->add_option("--v-start", v_start, "sweep start voltage (high end)");
    c_char->add_option("--v-end", v_end, "sweep end voltage (low end)");
    c_char->add_option("--step", v_step, "voltage decrement");
    c_char->add_option("--trials", trials, "self-test repetitions per step");
    c_char->add_option("--battery-seed", battery_seed, "stimulus battery seed");
    c_char->add_option("--out-profile", char_out_profile, "write the measured profile here");
    c_char->add_option("--out-csv", char_out_csv, "write the sweep table here");

    // train
    auto* c_train = app.add_subcommand("train", "train the base CNN");
    DataOpts train_data;
    train_data.attach(c_train);
    TrainConfig train_cfg;
    train_cfg.learning_rate = 0.05;
    train_cfg.epochs = 10;
    std::string train_out = "base.ckpt";
    c_train->add_option("--lr", train_cfg.learning_rate, "SGD learning rate");
    c_train->add_option("--momentum", train_cfg.momentum, "SGD momentum");
    c_train->add_option("--epochs", train_cfg.epochs, "training epochs");
    c_train->add_option("--batch", train_cfg.batch_size, "batch size");
    c_train->add_option("--seed", train_cfg.seed, "training seed");
    c_train->add_option("--train-limit", train_cfg.train_limit, "cap on train samples (0 = all)");
    c_train->add_option("--eval-limit", train_cfg.eval_limit, "cap on eval samples (0 = all)");
    c_train->add_option("--floor", train_cfg.accuracy_floor, "fail below this test accuracy");
    c_train->add_option("--out", train_out, "checkpoint path");

    // finetune
    auto* c_ft = app.add_subcommand("finetune", "error-aware fine-tuning (rft or cdft)");
    DataOpts ft_data;
    ft_data.attach(c_ft);
    TrainConfig ft_cfg;
    std::string ft_base = "base.ckpt", ft_variant = "rft", ft_profile, ft_pattern = "half";
    std::string ft_out = "tuned.ckpt";
    uint64_t ft_device_seed = 1;
    double ft_voltage = 0.0, ft_rate = 0.002;
    c_ft->add_option("--base", ft_base, "base model checkpoint");
    c_ft->add_option("--variant", ft_variant, "rft | cdft");
    c_ft->add_option("--device-seed", ft_device_seed, "simulated device seed");
    c_ft->add_option("--profile", ft_profile, "device profile JSON (instead of seed)");
    c_ft->add_option("--voltage", ft_voltage, "fine-tune voltage (overrides --rate)");
    c_ft->add_option("--rate", ft_rate, "fine-tune error rate (mapped through the curve)");
    c_ft->add_option("--pattern", ft_pattern, "bit-flip pattern: single|quarter|half");
    c_ft->add_option("--lr", ft_cfg.learning_rate, "SGD learning rate");
    c_ft->add_option("--epochs", ft_cfg.epochs, "max fine-tune epochs");
    c_ft->add_option("--batch", ft_cfg.batch_size, "batch size");
    c_ft->add_option("--seed", ft_cfg.seed, "fine-tune + subset seed");
    c_ft->add_option("--subset-fraction", ft_cfg.subset_fraction, "train-split fraction used");
    c_ft->add_option("--temperature", ft_cfg.temperature, "distillation temperature (cdft)");
    c_ft->add_option("--out", ft_out, "checkpoint path");

    // attack
    auto* c_atk = app.add_subcommand("attack", "generate an adversarial corpus");
    DataOpts atk_data;
    atk_data.attach(c_atk);
    AttackParams atk_params;
    std::string atk_base = "base.ckpt", atk_kind = "cw", atk_pattern = "half";
    std::string atk_out = "corpus.bin", atk_summary;
    int64_t atk_count = 100;
    uint64_t atk_seed = 13, atk_device_seed = 1;
    double atk_rate = 0.002;
    c_atk->add_option("--base", atk_base, "base model checkpoint");
    c_atk->add_option("--kind", atk_kind, "fgsm | deepfool | cw | cw_noise | cw_device");
    c_atk->add_option("--count", atk_count, "corpus size");
    c_atk->add_option("--seed", atk_seed, "candidate/attacker seed");
    c_atk->add_option("--eps", atk_params.fgsm_eps, "FGSM epsilon");
    c_atk->add_option("--df-iters", atk_params.deepfool_max_iter, "DeepFool iteration cap");
    c_atk->add_option("--df-overshoot", atk_params.deepfool_overshoot, "DeepFool overshoot");
    c_atk->add_option("--cw-steps", atk_params.cw_steps, "CW Adam steps per c");
    c_atk->add_option("--cw-lr", atk_params.cw_lr, "CW Adam learning rate");
    c_atk->add_option("--cw-search", atk_params.cw_search_steps, "CW binary-search steps");
    c_atk->add_option("--cw-early-exit", atk_params.cw_early_exit,
                      "stop a search this many steps after first success (0 = never)");
    c_atk->add_option("--rate", atk_rate, "error rate for cw_noise / cw_device");
    c_atk->add_option("--device-seed", atk_device_seed, "device for cw_device");
    c_atk->add_option("--pattern", atk_pattern, "bit-flip pattern for aware attacks");
    c_atk->add_option("--out", atk_out, "corpus path");
    c_atk->add_option("--summary-csv", atk_summary, "write a summary CSV here");

    // evaluate
    auto* c_eval = app.add_subcommand("evaluate", "run the defense over corpora");
    DataOpts eval_data;
    eval_data.attach(c_eval);
    std::string ev_base = "base.ckpt", ev_tuned, ev_profile, ev_pattern = "half";
    std::string ev_variant = "rft", ev_out;
    std::vector<std::string> ev_corpora;
    uint64_t ev_device_seed = 1, ev_eval_seed = 17;
    double ev_rate = 0.002, ev_voltage = 0.0;
    int ev_topk = 5;
    int64_t ev_benign = 1000;
    c_eval->add_option("--base", ev_base, "base model checkpoint");
    c_eval->add_option("--tuned", ev_tuned, "fine-tuned checkpoint (defaults to base)");
    c_eval->add_option("--corpus", ev_corpora, "adversarial corpus file (repeatable)");
    c_eval->add_option("--device-seed", ev_device_seed, "simulated device seed");
    c_eval->add_option("--profile", ev_profile, "device profile JSON (instead of seed)");
    c_eval->add_option("--rate", ev_rate, "evaluation error rate");
    c_eval->add_option("--voltage", ev_voltage, "evaluation voltage (overrides --rate)");
    c_eval->add_option("--pattern", ev_pattern, "bit-flip pattern");
    c_eval->add_option("--variant", ev_variant, "label recorded in the report");
    c_eval->add_option("--eval-seed", ev_eval_seed, "noise seed for the evaluation passes");
    c_eval->add_option("--topk", ev_topk, "correction list depth");
    c_eval->add_option("--benign", ev_benign, "benign sample count");
    c_eval->add_option("--out", ev_out, "metrics JSON path");

    // report
    auto* c_rep = app.add_subcommand("report", "run a full experiment grid from a config");
    std::string rep_config = "experiment.json";
    double rep_tpr = 0.0;
    bool rep_loose = false;
    c_rep->add_option("--config", rep_config, "experiment config JSON");
    c_rep->add_option("--tpr-threshold", rep_tpr,
                      "after the run, report the lowest rate with benign TPR above this");
    c_rep->add_flag("--loose", rep_loose, "threshold query uses the loose TPR");

    app.parse(argc, argv);

    if (c_char->parsed())
      return cmd_characterize(char_profile, char_seed, v_start, v_end, v_step, trials,
                              battery_seed, char_out_profile, char_out_csv);
    if (c_train->parsed()) return cmd_train(train_data, train_cfg, train_out);
    if (c_ft->parsed())
      return cmd_finetune(ft_data, ft_base, ft_variant, ft_device_seed, ft_profile, ft_voltage,
                          ft_rate, ft_pattern, ft_cfg, ft_out);
    if (c_atk->parsed())
      return cmd_attack(atk_data, atk_base, atk_kind, atk_count, atk_seed, atk_params, atk_rate,
                        atk_device_seed, atk_pattern, atk_out, atk_summary);
    if (c_eval->parsed())
      return cmd_evaluate(eval_data, ev_base, ev_tuned, ev_corpora, ev_device_seed, ev_profile,
                          ev_rate, ev_voltage, ev_pattern, ev_variant, ev_eval_seed, ev_topk,
                          ev_benign, ev_out);
    if (c_rep->parsed()) return cmd_report(rep_config, rep_tpr, rep_loose);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
