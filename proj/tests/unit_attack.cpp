// Units for the attack suite (FGSM, DeepFool, CW-L2 and its defense-aware
// variants), corpus bookkeeping, the runtime defense, and the energy model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "uvdef/attacks.hpp"
#include "uvdef/dataset.hpp"
#include "uvdef/defense.hpp"
#include "uvdef/fault.hpp"
#include "uvdef/nn.hpp"
#include "uvdef/rng.hpp"
#include "uvdef/train.hpp"

using namespace uvdef;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& leaf) {
  const fs::path p = fs::temp_directory_path() / "uvdef_unit_attack" / leaf;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Model small_arch(const std::vector<int>& input_shape, int classes) {
  return make_model(input_shape,
                    {LayerSpec::conv2d(8, 3, 1, 1), LayerSpec::relu(), LayerSpec::max_pool(),
                     LayerSpec::conv2d(8, 3, 1, 1), LayerSpec::relu(), LayerSpec::max_pool(),
                     LayerSpec::dense(classes), LayerSpec::softmax_head(1.0)});
}

struct Fixture {
  DatasetHandle data;
  Model model;

  Fixture() {
    SyntheticSpec spec;
    spec.seed = 31;
    spec.train_count = 3000;
    spec.test_count = 600;
    data = make_synthetic_dataset(spec);

    // Tuned so the toy net actually responds to its inputs: with momentum
    // 0.9 the effective step is 10x the rate, and 0.02 flatlines this net.
    TrainConfig cfg;
    cfg.learning_rate = 0.003;
    cfg.epochs = 6;
    cfg.batch_size = 32;
    cfg.seed = 9;
    const Model arch = small_arch(data.input_shape(), data.num_classes);
    model = train_base(data, cfg, &arch);
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

// Fast CW settings for unit-scale runs; semantics identical to the defaults.
AttackParams quick_cw() {
  AttackParams p;
  p.cw_steps = 60;
  p.cw_search_steps = 4;
  return p;
}

bool in_box(const Tensor& t) {
  for (double v : t.data)
    if (v < 0.0 || v > 1.0) return false;
  return true;
}

}  // namespace

// ---------------------------------------------------------------- targeting

TEST_CASE("targeting: next-class wraps and validates") {
  REQUIRE(select_target(3, 10) == 4);
  REQUIRE(select_target(9, 10) == 0);
  REQUIRE_THROWS_AS(select_target(0, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(select_target(10, 10), std::invalid_argument);
  REQUIRE_THROWS_AS(select_target(-1, 10), std::invalid_argument);
}

TEST_CASE("targeting: least-likely picks the argmin with low-index ties") {
  SoftLabel uniform;
  uniform.probs.assign(10, 0.1);
  REQUIRE(select_target(uniform, TargetMode::LL, 4) == 0);

  Rng rng(91);
  for (int trial = 0; trial < 50; ++trial) {
    SoftLabel p;
    p.probs.resize(10);
    double sum = 0.0;
    for (auto& v : p.probs) {
      v = rng.uniform01() + 1e-9;
      sum += v;
    }
    for (auto& v : p.probs) v /= sum;
    const int got = select_target(p, TargetMode::LL, 3);
    const int want = int(std::min_element(p.probs.begin(), p.probs.end()) - p.probs.begin());
    REQUIRE(got == want);
  }

  SoftLabel p;
  p.probs = {0.5, 0.5};
  REQUIRE(select_target(p, TargetMode::Next, 1) == 0);  // Next via the overload
}

// ---------------------------------------------------------------- distortion

TEST_CASE("distortion: hand values and a brute-force oracle") {
  Tensor x({4});
  Tensor same = x;
  const Distortion zero = distortion(x, same);
  REQUIRE(zero.l0 == 0.0);
  REQUIRE(zero.l2 == 0.0);
  REQUIRE(zero.linf == 0.0);

  Tensor y = x;
  y[2] += 0.5;
  const Distortion d = distortion(x, y);
  REQUIRE(d.l0 == 0.25);
  REQUIRE(d.l2 == 0.5);
  REQUIRE(d.linf == 0.5);

  Rng rng(17);
  Tensor a({31});
  Tensor b({31});
  for (int64_t i = 0; i < 31; ++i) {
    a[i] = rng.uniform01();
    b[i] = rng.uniform01();
  }
  const Distortion r = distortion(a, b);
  int64_t changed = 0;
  double sq = 0.0, worst = 0.0;
  for (int64_t i = 0; i < 31; ++i) {
    const double diff = std::abs(b[i] - a[i]);
    if (diff > 1e-6) ++changed;
    sq += (b[i] - a[i]) * (b[i] - a[i]);
    worst = std::max(worst, diff);
  }
  REQUIRE(r.l0 == double(changed) / 31.0);
  REQUIRE(r.l2 == doctest::Approx(std::sqrt(sq)).epsilon(1e-12));
  REQUIRE(r.linf == worst);

  Tensor wrong({5});
  REQUIRE_THROWS_AS(distortion(a, wrong), std::invalid_argument);
}

// ---------------------------------------------------------------- fgsm

TEST_CASE("fgsm: epsilon zero is the identity") {
  const Fixture& f = fixture();
  const Tensor x = f.data.image(false, 0);
  const Tensor x_adv = fgsm(f.model, x, f.data.label(false, 0), 0.0);
  REQUIRE(x_adv.data == x.data);
  const Distortion d = distortion(x, x_adv);
  REQUIRE(d.l0 == 0.0);
  REQUIRE(d.l2 == 0.0);
  REQUIRE(d.linf == 0.0);
}

TEST_CASE("fgsm: every pixel moves by exactly epsilon, zero, or onto the box edge") {
  const Fixture& f = fixture();
  const double eps = 0.016;
  for (int64_t idx : {1, 2, 3}) {
    const Tensor x = f.data.image(false, idx);
    const Tensor x_adv = fgsm(f.model, x, f.data.label(false, idx), eps);
    REQUIRE(in_box(x_adv));
    REQUIRE(distortion(x, x_adv).linf <= eps + 1e-12);
    for (int64_t i = 0; i < x.numel(); ++i) {
      const double step = std::abs(x_adv[i] - x[i]);
      const bool exact = step < 1e-12 || std::abs(step - eps) < 1e-12;
      const bool clipped = x_adv[i] == 0.0 || x_adv[i] == 1.0;
      REQUIRE((exact || clipped));
    }
  }
  REQUIRE_THROWS_AS(fgsm(f.model, f.data.image(false, 0), 0, -0.1), std::invalid_argument);
  REQUIRE_THROWS_AS(fgsm(f.model, f.data.image(false, 0), 99, 0.1), std::invalid_argument);
}

// ---------------------------------------------------------------- deepfool

TEST_CASE("deepfool: an already-misclassified input comes back untouched") {
  const Fixture& f = fixture();
  int64_t wrong = -1;
  for (int64_t i = 0; i < f.data.test_count(); ++i) {
    if (argmax_label(forward(f.model, f.data.image(false, i)).probs) != f.data.label(false, i)) {
      wrong = i;
      break;
    }
  }
  REQUIRE(wrong >= 0);  // the fixture model is far from perfect
  const Tensor x = f.data.image(false, wrong);
  const Tensor x_adv = deepfool(f.model, x, 50, 0.02, f.data.label(false, wrong));
  REQUIRE(x_adv.data == x.data);
}

TEST_CASE("deepfool: success means the clean argmax flipped, inside the box") {
  const Fixture& f = fixture();
  const auto candidates = attack_candidates(f.model, f.data, 6, 41);
  int flips = 0;
  for (int64_t idx : candidates) {
    const Tensor x = f.data.image(false, idx);
    const int before = argmax_label(forward(f.model, x).probs);
    const Tensor x_adv = deepfool(f.model, x);
    REQUIRE(in_box(x_adv));
    const int after = argmax_label(forward(f.model, x_adv).probs);
    if (after != before) ++flips;
  }
  REQUIRE(flips > 0);  // minimal-L2 attack on a mediocre model: some must cross
  REQUIRE_THROWS_AS(deepfool(f.model, f.data.image(false, 0), 0), std::invalid_argument);
}

TEST_CASE("deepfool: lower L2 than fgsm at whatever it succeeds on") {
  const Fixture& f = fixture();
  const auto candidates = attack_candidates(f.model, f.data, 8, 43);
  auto df = generate_corpus(f.model, f.data, candidates, "deepfool", AttackParams{});
  auto fg = generate_corpus(f.model, f.data, candidates, "fgsm", AttackParams{});
  const AttackSummary sdf = summarize("deepfool", df);
  const AttackSummary sfg = summarize("fgsm", fg);
  if (sdf.successes > 0 && sfg.successes > 0) {
    REQUIRE(sdf.mean_l2 <= sfg.mean_l2);
  }
}

// ---------------------------------------------------------------- cw

TEST_CASE("cw: an input already classified as the target is a zero-cost success") {
  const Fixture& f = fixture();
  const Tensor x = f.data.image(false, 5);
  const int current = argmax_label(forward(f.model, x).probs);
  const CwResult r = cw_l2(f.model, x, current, quick_cw());
  REQUIRE(r.success);
  REQUIRE(r.l2 == 0.0);
  REQUIRE(r.x_adv.data == x.data);
}

TEST_CASE("cw: success lands on the target inside the box with consistent L2") {
  const Fixture& f = fixture();
  const auto candidates = attack_candidates(f.model, f.data, 4, 47);
  int hits = 0;
  for (int64_t idx : candidates) {
    const Tensor x = f.data.image(false, idx);
    const int target = select_target(f.data.label(false, idx), 10);
    const CwResult r = cw_l2(f.model, x, target, quick_cw());
    REQUIRE(in_box(r.x_adv));
    if (r.success) {
      ++hits;
      REQUIRE(argmax_label(forward(f.model, r.x_adv).probs) == target);
      REQUIRE(r.l2 == doctest::Approx(distortion(x, r.x_adv).l2).epsilon(1e-12));
      REQUIRE(r.best_c > 0.0);
    }
  }
  REQUIRE(hits > 0);

  REQUIRE_THROWS_AS(cw_l2(f.model, f.data.image(false, 0), 17, quick_cw()),
                    std::invalid_argument);
  AttackParams bad = quick_cw();
  bad.cw_lr = 0.0;
  REQUIRE_THROWS_AS(cw_l2(f.model, f.data.image(false, 0), 1, bad), std::invalid_argument);
}

TEST_CASE("cw: noise-aware at rate zero reproduces the plain attack bit for bit") {
  const Fixture& f = fixture();
  const auto candidates = attack_candidates(f.model, f.data, 3, 53);
  const AttackParams p = quick_cw();
  auto plain = generate_corpus(f.model, f.data, candidates, "cw", p);
  auto noisy = gen_noise_aware(f.model, f.data, candidates, 0.0, BitFlipPattern{FlipKind::Half},
                               0, p);
  REQUIRE(plain.size() == noisy.size());
  for (size_t i = 0; i < plain.size(); ++i) {
    REQUIRE(plain[i].kind == "cw");
    REQUIRE(noisy[i].kind == "cw_noise");
    REQUIRE(plain[i].x_adv.data == noisy[i].x_adv.data);
    REQUIRE(plain[i].success == noisy[i].success);
    REQUIRE(plain[i].target == noisy[i].target);
  }
}

TEST_CASE("cw: device-aware corpora are deterministic and tagged") {
  const Fixture& f = fixture();
  const auto candidates = attack_candidates(f.model, f.data, 2, 59);
  const DeviceProfile attacker = default_device(900);
  const AttackParams p = quick_cw();
  auto a = gen_device_aware(f.model, f.data, candidates, attacker, 0.002,
                            BitFlipPattern{FlipKind::Half}, 4, p);
  auto b = gen_device_aware(f.model, f.data, candidates, attacker, 0.002,
                            BitFlipPattern{FlipKind::Half}, 4, p);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].kind == "cw_device");
    REQUIRE(a[i].x_adv.data == b[i].x_adv.data);
    REQUIRE(in_box(a[i].x_adv));
  }
}

// ---------------------------------------------------------------- corpora

TEST_CASE("corpus: candidates are correctly-classified, deterministic, and bounded") {
  const Fixture& f = fixture();
  const auto c1 = attack_candidates(f.model, f.data, 10, 61);
  const auto c2 = attack_candidates(f.model, f.data, 10, 61);
  REQUIRE(c1 == c2);
  REQUIRE(c1.size() == 10);
  for (int64_t idx : c1) {
    REQUIRE(argmax_label(forward(f.model, f.data.image(false, idx)).probs) ==
            f.data.label(false, idx));
  }
  const auto c3 = attack_candidates(f.model, f.data, 10, 62);
  REQUIRE(c1 != c3);

  REQUIRE_THROWS_AS(attack_candidates(f.model, f.data, 100000, 61), std::runtime_error);
  REQUIRE_THROWS_AS(attack_candidates(f.model, f.data, 0, 61), std::invalid_argument);
}

TEST_CASE("corpus: every recorded field survives recomputation") {
  const Fixture& f = fixture();
  const auto candidates = attack_candidates(f.model, f.data, 5, 67);
  for (const char* kind : {"fgsm", "deepfool"}) {
    const auto corpus = generate_corpus(f.model, f.data, candidates, kind, AttackParams{});
    REQUIRE(corpus.size() == candidates.size());
    for (const auto& ex : corpus) {
      REQUIRE(ex.kind == kind);
      REQUIRE(ex.label_true == f.data.label(false, ex.original_index));
      const ForwardResult clean = forward(f.model, ex.x_adv);
      REQUIRE(ex.label_base == argmax_label(clean.probs));
      REQUIRE(ex.confidence == clean.probs.probs[size_t(ex.label_base)]);
      REQUIRE(ex.success == (ex.label_base != ex.label_true));  // untargeted
      REQUIRE(ex.target == -1);
      const Distortion d = distortion(f.data.image(false, ex.original_index), ex.x_adv);
      REQUIRE(ex.dist.l0 == d.l0);
      REQUIRE(ex.dist.l2 == d.l2);
      REQUIRE(ex.dist.linf == d.linf);
    }
  }
  REQUIRE_THROWS_AS(generate_corpus(f.model, f.data, candidates, "pgd", AttackParams{}),
                    std::invalid_argument);
}

TEST_CASE("corpus: binary container round trips bitwise") {
  const Fixture& f = fixture();
  const auto candidates = attack_candidates(f.model, f.data, 3, 71);
  const auto corpus = generate_corpus(f.model, f.data, candidates, "fgsm", AttackParams{});

  const fs::path dir = temp_dir("corpus");
  const std::string path = (dir / "fgsm.uvac").string();
  save_corpus(path, corpus);
  const auto back = load_corpus(path);
  REQUIRE(back.size() == corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    REQUIRE(back[i].original_index == corpus[i].original_index);
    REQUIRE(back[i].label_true == corpus[i].label_true);
    REQUIRE(back[i].label_base == corpus[i].label_base);
    REQUIRE(back[i].target == corpus[i].target);
    REQUIRE(back[i].kind == corpus[i].kind);
    REQUIRE(back[i].success == corpus[i].success);
    REQUIRE(back[i].confidence == corpus[i].confidence);
    REQUIRE(back[i].dist.l0 == corpus[i].dist.l0);
    REQUIRE(back[i].dist.l2 == corpus[i].dist.l2);
    REQUIRE(back[i].dist.linf == corpus[i].dist.linf);
    REQUIRE(back[i].x_adv.shape == corpus[i].x_adv.shape);
    REQUIRE(back[i].x_adv.data == corpus[i].x_adv.data);
  }

  REQUIRE_THROWS(load_corpus((dir / "absent.uvac").string()));
  {
    std::ofstream os(dir / "junk.uvac", std::ios::binary);
    os << "not a corpus";
  }
  REQUIRE_THROWS(load_corpus((dir / "junk.uvac").string()));
}

TEST_CASE("corpus: summaries average successful examples only") {
  std::vector<AdversarialExample> corpus(3);
  corpus[0].success = true;
  corpus[0].confidence = 0.8;
  corpus[0].dist = {0.25, 1.0, 0.5};
  corpus[1].success = false;
  corpus[1].confidence = 0.9;  // must not contaminate the means
  corpus[1].dist = {1.0, 9.0, 1.0};
  corpus[2].success = true;
  corpus[2].confidence = 0.6;
  corpus[2].dist = {0.75, 3.0, 0.1};

  const AttackSummary s = summarize("fgsm", corpus);
  REQUIRE(s.kind == "fgsm");
  REQUIRE(s.count == 3);
  REQUIRE(s.successes == 2);
  REQUIRE(s.success_rate == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  REQUIRE(s.mean_confidence == doctest::Approx(0.7).epsilon(1e-12));
  REQUIRE(s.mean_l0 == doctest::Approx(0.5).epsilon(1e-12));
  REQUIRE(s.mean_l2 == doctest::Approx(2.0).epsilon(1e-12));
  REQUIRE(s.mean_linf == doctest::Approx(0.3).epsilon(1e-12));

  const AttackSummary empty = summarize("fgsm", {});
  REQUIRE(empty.count == 0);
  REQUIRE(empty.success_rate == 0.0);

  const fs::path dir = temp_dir("summary");
  const std::string path = (dir / "attacks.csv").string();
  write_attack_summary_csv(path, {s, empty});
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  REQUIRE(header ==
          "kind,count,successes,success_rate,mean_confidence,mean_l0,mean_l2,mean_linf");
  int rows = 0;
  for (std::string line; std::getline(is, line);) ++rows;
  REQUIRE(rows == 2);
}

// ---------------------------------------------------------------- runtime defense

TEST_CASE("defense: correct returns k ranked labels and honors the crash region") {
  const Fixture& f = fixture();
  const DeviceProfile dev = default_device(101);
  const Tensor x = f.data.image(false, 0);

  auto [label, ranked] = correct(f.model, dev, 0.655, BitFlipPattern{FlipKind::Half}, x, 5, 3);
  REQUIRE(int(ranked.size()) == 3);
  REQUIRE(label == ranked[0]);

  auto [l2, r2] = correct(f.model, dev, 0.655, BitFlipPattern{FlipKind::Half}, x, 5, 3);
  REQUIRE(r2 == ranked);  // same call seed, same verdict

  REQUIRE_THROWS_AS(
      correct(f.model, dev, 0.648, BitFlipPattern{FlipKind::Half}, x, 5, 3), CrashError);
}

TEST_CASE("defense: detect flags exactly when the two passes disagree") {
  const Fixture& f = fixture();
  const DeviceProfile dev = default_device(102);

  for (int64_t i = 0; i < 8; ++i) {
    const Tensor x = f.data.image(false, i);
    const Verdict v = detect(f.model, f.model, dev, 0.654, BitFlipPattern{FlipKind::Half}, x,
                             uint64_t(i));
    REQUIRE(v.adversarial_flag == (v.label_clean != v.label_faulty));
    REQUIRE(v.label_faulty == v.topk_faulty[0]);
  }

  // Error-free voltage with identical models: the passes cannot disagree.
  for (int64_t i = 0; i < 8; ++i) {
    const Tensor x = f.data.image(false, i);
    const Verdict v = detect(f.model, f.model, dev, dev.curve.safe_floor,
                             BitFlipPattern{FlipKind::Half}, x, uint64_t(i));
    REQUIRE(!v.adversarial_flag);
  }
}

// ---------------------------------------------------------------- evaluation

TEST_CASE("evaluate: rate zero against the base model is recomputable by hand") {
  const Fixture& f = fixture();
  const DeviceProfile dev = default_device(103);
  const auto candidates = attack_candidates(f.model, f.data, 6, 73);
  std::map<std::string, std::vector<AdversarialExample>> corpora;
  corpora["fgsm"] = generate_corpus(f.model, f.data, candidates, "fgsm", AttackParams{});

  EvalSpec spec;
  spec.error_rate = 0.0;
  spec.variant = "none";
  spec.benign_limit = 50;
  spec.top_k = 5;
  const MetricsReport rep = evaluate(f.model, f.model, dev, f.data, corpora, spec);

  // No errors, same model twice: nothing is ever flagged.
  REQUIRE(rep.benign_total == 50);
  REQUIRE(rep.benign_tpr_loose == 1.0);
  REQUIRE(rep.benign_tpr_strict ==
          doctest::Approx(accuracy(f.model, f.data, false, 50)).epsilon(1e-12));

  const AttackMetrics& am = rep.attacks.at("fgsm");
  int64_t succ = 0, topk_hits = 0;
  for (const auto& ex : corpora["fgsm"]) {
    if (!ex.success) continue;
    ++succ;
    const auto ranked = top_k(forward(f.model, ex.x_adv).probs, 5);
    topk_hits += std::find(ranked.begin(), ranked.end(), ex.label_true) != ranked.end();
  }
  REQUIRE(am.total == int64_t(corpora["fgsm"].size()));
  REQUIRE(am.baseline_success == succ);
  if (succ > 0) {
    REQUIRE(am.detection_rate == 0.0);   // faulty pass == clean pass
    REQUIRE(am.correction_top1 == 0.0);  // success means the top-1 is wrong
    REQUIRE(am.correction_topk == doctest::Approx(double(topk_hits) / double(succ)));
  }
}

TEST_CASE("evaluate: deterministic, strict never beats loose, and validates input") {
  const Fixture& f = fixture();
  const DeviceProfile dev = default_device(104);
  const auto candidates = attack_candidates(f.model, f.data, 4, 79);
  std::map<std::string, std::vector<AdversarialExample>> corpora;
  corpora["fgsm"] = generate_corpus(f.model, f.data, candidates, "fgsm", AttackParams{});

  EvalSpec spec;
  spec.error_rate = 0.005;
  spec.eval_seed = 11;
  spec.benign_limit = 40;
  const MetricsReport a = evaluate(f.model, f.model, dev, f.data, corpora, spec);
  const MetricsReport b = evaluate(f.model, f.model, dev, f.data, corpora, spec);
  REQUIRE(a.benign_tpr_strict == b.benign_tpr_strict);
  REQUIRE(a.benign_tpr_loose == b.benign_tpr_loose);
  REQUIRE(a.attacks.at("fgsm").detection_rate == b.attacks.at("fgsm").detection_rate);
  REQUIRE(a.benign_tpr_strict <= a.benign_tpr_loose);
  REQUIRE(a.error_rate == 0.005);

  // Voltage-driven spec pulls the rate from the curve.
  EvalSpec vs = spec;
  vs.voltage = rate_to_voltage(dev.curve, 0.005);
  const MetricsReport c = evaluate(f.model, f.model, dev, f.data, corpora, vs);
  REQUIRE(c.error_rate == doctest::Approx(0.005).epsilon(1e-9));

  EvalSpec bad = spec;
  bad.error_rate = 1.5;
  REQUIRE_THROWS_AS(evaluate(f.model, f.model, dev, f.data, corpora, bad),
                    std::invalid_argument);
  bad = spec;
  bad.top_k = 0;
  REQUIRE_THROWS_AS(evaluate(f.model, f.model, dev, f.data, corpora, bad),
                    std::invalid_argument);
  bad = spec;
  bad.benign_limit = 0;
  REQUIRE_THROWS_AS(evaluate(f.model, f.model, dev, f.data, corpora, bad),
                    std::invalid_argument);
}

TEST_CASE("evaluate: a corpus with no baseline successes yields undefined rates") {
  const Fixture& f = fixture();
  const DeviceProfile dev = default_device(105);
  std::vector<AdversarialExample> duds(2);
  for (auto& ex : duds) {
    ex.success = false;
    ex.label_true = 0;
    ex.x_adv = f.data.image(false, 0);
  }
  std::map<std::string, std::vector<AdversarialExample>> corpora;
  corpora["dud"] = duds;

  EvalSpec spec;
  spec.error_rate = 0.002;
  spec.benign_limit = 10;
  const MetricsReport rep = evaluate(f.model, f.model, dev, f.data, corpora, spec);
  const AttackMetrics& am = rep.attacks.at("dud");
  REQUIRE(am.baseline_success == 0);
  REQUIRE(std::isnan(am.detection_rate));
  REQUIRE(std::isnan(am.correction_top1));
  REQUIRE(std::isnan(am.correction_topk));

  // The undefined rates survive the JSON round trip as nulls.
  const fs::path dir = temp_dir("nanreport");
  const std::string path = (dir / "report.json").string();
  write_report_json(path, rep, "abc123");
  const MetricsReport back = read_report_json(path);
  REQUIRE(std::isnan(back.attacks.at("dud").detection_rate));
  REQUIRE(back.benign_tpr_strict == rep.benign_tpr_strict);
}

TEST_CASE("evaluate: report JSON round trips every field") {
  const Fixture& f = fixture();
  const DeviceProfile dev = default_device(106);
  const auto candidates = attack_candidates(f.model, f.data, 3, 83);
  std::map<std::string, std::vector<AdversarialExample>> corpora;
  corpora["fgsm"] = generate_corpus(f.model, f.data, candidates, "fgsm", AttackParams{});
  corpora["deepfool"] = generate_corpus(f.model, f.data, candidates, "deepfool", AttackParams{});

  EvalSpec spec;
  spec.error_rate = 0.002;
  spec.variant = "rft";
  spec.eval_seed = 21;
  spec.benign_limit = 20;
  const MetricsReport rep = evaluate(f.model, f.model, dev, f.data, corpora, spec);

  const fs::path dir = temp_dir("report");
  const std::string path = (dir / "report.json").string();
  write_report_json(path, rep);
  const MetricsReport back = read_report_json(path);
  REQUIRE(back.device_seed == rep.device_seed);
  REQUIRE(back.error_rate == rep.error_rate);
  REQUIRE(back.pattern == rep.pattern);
  REQUIRE(back.variant == rep.variant);
  REQUIRE(back.eval_seed == rep.eval_seed);
  REQUIRE(back.top_k == rep.top_k);
  REQUIRE(back.benign_total == rep.benign_total);
  REQUIRE(back.benign_tpr_strict == rep.benign_tpr_strict);
  REQUIRE(back.benign_tpr_loose == rep.benign_tpr_loose);
  REQUIRE(back.attacks.size() == rep.attacks.size());
  for (const auto& [name, am] : rep.attacks) {
    const AttackMetrics& bm = back.attacks.at(name);
    REQUIRE(bm.total == am.total);
    REQUIRE(bm.baseline_success == am.baseline_success);
    REQUIRE(bm.detection_rate == am.detection_rate);
    REQUIRE(bm.correction_top1 == am.correction_top1);
    REQUIRE(bm.correction_topk == am.correction_topk);
  }

  REQUIRE_THROWS(read_report_json((dir / "absent.json").string()));
  {
    std::ofstream os(dir / "junk.json");
    os << "{\"format\": \"something-else\"}";
  }
  REQUIRE_THROWS(read_report_json((dir / "junk.json").string()));
}

TEST_CASE("evaluate: metrics CSV carries one row per attack and a none row") {
  const Fixture& f = fixture();
  const DeviceProfile dev = default_device(107);
  std::map<std::string, std::vector<AdversarialExample>> empty_corpora;
  EvalSpec spec;
  spec.error_rate = 0.0;
  spec.variant = "none";
  spec.benign_limit = 5;
  const MetricsReport no_attacks = evaluate(f.model, f.model, dev, f.data, empty_corpora, spec);

  const auto candidates = attack_candidates(f.model, f.data, 3, 89);
  std::map<std::string, std::vector<AdversarialExample>> corpora;
  corpora["fgsm"] = generate_corpus(f.model, f.data, candidates, "fgsm", AttackParams{});
  spec.variant = "rft";
  spec.error_rate = 0.002;
  const MetricsReport with_attack = evaluate(f.model, f.model, dev, f.data, corpora, spec);

  const fs::path dir = temp_dir("csv");
  const std::string path = (dir / "metrics.csv").string();
  write_metrics_csv(path, {no_attacks, with_attack});
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  REQUIRE(header ==
          "device_seed,variant,error_rate,pattern,attack,total,baseline_success,"
          "detection_rate,correction_top1,correction_topk,benign_total,benign_tpr_strict,"
          "benign_tpr_loose");
  std::vector<std::string> lines;
  for (std::string line; std::getline(is, line);) lines.push_back(line);
  REQUIRE(lines.size() == 2);
  REQUIRE(lines[0].find(",none,") != std::string::npos);  // placeholder attack column
  REQUIRE(lines[1].find(",fgsm,") != std::string::npos);
}

// ---------------------------------------------------------------- energy

TEST_CASE("energy: the stock table is exact and detection adds one clean pass") {
  const EnergyModel e = EnergyModel::stock();
  REQUIRE(e.estimate(EnergyMode::Correction, 0.660) == 0.716);
  REQUIRE(e.estimate(EnergyMode::Correction, 0.656) == 0.714);
  REQUIRE(e.estimate(EnergyMode::Correction, 0.652) == 0.670);
  REQUIRE(e.estimate(EnergyMode::Detection, 0.660) == 1.716);
  REQUIRE(e.estimate(EnergyMode::Detection, 0.656) == 1.714);
  REQUIRE(e.estimate(EnergyMode::Detection, 0.652) == 1.670);

  // One extra clean pass costs exactly 1.0x; the subtraction here re-rounds,
  // so compare at ulp scale rather than bitwise.
  for (double v : {0.652, 0.6535, 0.655, 0.658, 0.660}) {
    REQUIRE(e.estimate(EnergyMode::Detection, v) - e.estimate(EnergyMode::Correction, v) ==
            doctest::Approx(1.0).epsilon(1e-12));
  }

  // Midpoint of the lower segment interpolates linearly.
  REQUIRE(e.estimate(EnergyMode::Correction, 0.654) == doctest::Approx(0.692).epsilon(1e-12));

  REQUIRE_THROWS_AS(e.estimate(EnergyMode::Correction, 0.661), std::invalid_argument);
  REQUIRE_THROWS_AS(e.estimate(EnergyMode::Correction, 0.6519), std::invalid_argument);
}

TEST_CASE("energy: the quadratic fit is pinned at the top voltage") {
  const EnergyModel e = EnergyModel::stock();
  REQUIRE(e.quadratic(EnergyMode::Correction, 0.660) == doctest::Approx(0.716).epsilon(1e-12));
  REQUIRE(e.quadratic(EnergyMode::Detection, 0.660) == doctest::Approx(1.716).epsilon(1e-12));
  // Between the calibration points it stays in the plausible overhead band.
  for (double v = 0.652; v <= 0.660; v += 0.001) {
    const double c = e.quadratic(EnergyMode::Correction, v);
    REQUIRE(c > 0.6);
    REQUIRE(c < 0.75);
    REQUIRE(e.quadratic(EnergyMode::Detection, v) == doctest::Approx(c + 1.0).epsilon(1e-12));
  }
}
