#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "uvdef/dataset.hpp"
#include "uvdef/fault.hpp"
#include "uvdef/nn.hpp"

namespace uvdef {

struct AttackParams {
  double fgsm_eps = 0.016;

  int deepfool_max_iter = 50;
  double deepfool_overshoot = 0.02;

  int cw_steps = 200;          // Adam steps per c value
  double cw_lr = 1e-2;
  double cw_c_lo = 1e-3;       // geometric search range for the ratio c
  double cw_c_hi = 1e2;
  int cw_search_steps = 5;
  double cw_kappa = 0.0;       // confidence margin in the hinge
  // 0 runs every step; > 0 stops an inner search that many steps after its
  // first success (deterministic, trades polish for time on large grids).
  int cw_early_exit = 0;
};

// Next-class targeting: (true_label + 1) mod num_classes.
int select_target(int true_label, int num_classes);

// Target selection from a prediction: LL picks the least-likely class (ties
// to the lower index), Next wraps to the class after the true label.
enum class TargetMode { LL, Next };
int select_target(const SoftLabel& pred, TargetMode mode, int true_label);

struct Distortion {
  double l0 = 0.0;  // fraction of elements with |delta| > 1e-6
  double l2 = 0.0;
  double linf = 0.0;
};

Distortion distortion(const Tensor& x, const Tensor& x_adv);

// One-step untargeted sign attack; the result stays inside [0,1].
Tensor fgsm(const Model& m, const Tensor& x, int true_label, double eps);

// Minimal-L2 untargeted attack via iterative linearization of the class
// boundaries, with overshoot to cross them. When `true_label` is given and
// the model already misclassifies x, returns x untouched (zero iterations).
Tensor deepfool(const Model& m, const Tensor& x, int max_iter = 50, double overshoot = 0.02,
                int true_label = -1);

// The environment a white-box attacker optimizes against. Plain targets the
// clean model; FreshNoise redraws random fault sites for every gradient
// evaluation; DeviceSites uses one device's fixed site set.
struct AttackEnv {
  enum class Mode { Plain, FreshNoise, DeviceSites } mode = Mode::Plain;
  DeviceProfile device;
  double error_rate = 0.0;
  BitFlipPattern pattern{FlipKind::Half};
  uint64_t attacker_seed = 0;
};

struct CwResult {
  Tensor x_adv;
  bool success = false;  // hit the target in the attacker's own environment
  double best_c = 0.0;
  double l2 = 0.0;
};

// Targeted minimal-L2 attack: tanh change of variables, Adam on
// ||delta||^2 + c * max(max_{i != t} z_i - z_t, -kappa), geometric binary
// search on c. Keeps the best (smallest-L2) success across the search.
CwResult cw_l2(const Model& m, const Tensor& x, int target, const AttackParams& p,
               const AttackEnv& env = {});

struct AdversarialExample {
  int64_t original_index = -1;
  int label_true = -1;
  int label_base = -1;   // clean model's prediction on x_adv
  int target = -1;       // -1 for untargeted attacks
  std::string kind;      // fgsm | deepfool | cw | cw_noise | cw_device
  bool success = false;  // label_base differs from label_true (hit target, if targeted)
  double confidence = 0.0;  // clean model's probability of label_base
  Distortion dist;
  Tensor x_adv;
};

// Seeded draw of `count` test-split indices the model classifies correctly.
std::vector<int64_t> attack_candidates(const Model& m, const DatasetHandle& data, int64_t count,
                                       uint64_t seed);

// Runs one attack kind over the candidate list. `kind` selects fgsm,
// deepfool, or cw; the env turns cw into its defense-aware variants
// (cw_noise / cw_device in the recorded kind).
std::vector<AdversarialExample> generate_corpus(const Model& m, const DatasetHandle& data,
                                                const std::vector<int64_t>& candidates,
                                                const std::string& kind, const AttackParams& p,
                                                const AttackEnv& env = {});

// CW corpora against the randomized defense / a specific device.
std::vector<AdversarialExample> gen_noise_aware(const Model& m, const DatasetHandle& data,
                                                const std::vector<int64_t>& candidates,
                                                double error_rate, BitFlipPattern pattern,
                                                uint64_t attacker_seed, const AttackParams& p);
std::vector<AdversarialExample> gen_device_aware(const Model& m, const DatasetHandle& data,
                                                 const std::vector<int64_t>& candidates,
                                                 const DeviceProfile& device, double error_rate,
                                                 BitFlipPattern pattern, uint64_t attacker_seed,
                                                 const AttackParams& p);

struct AttackSummary {
  std::string kind;
  int64_t count = 0;
  int64_t successes = 0;
  double success_rate = 0.0;
  // Means over successful examples.
  double mean_confidence = 0.0;
  double mean_l0 = 0.0;
  double mean_l2 = 0.0;
  double mean_linf = 0.0;
};

AttackSummary summarize(const std::string& kind, const std::vector<AdversarialExample>& corpus);

// Binary corpus container (magic "UVAC", version 1).
void save_corpus(const std::string& path, const std::vector<AdversarialExample>& corpus);
std::vector<AdversarialExample> load_corpus(const std::string& path);

// CSV: kind,count,successes,success_rate,mean_confidence,mean_l0,mean_l2,mean_linf
void write_attack_summary_csv(const std::string& path, const std::vector<AttackSummary>& rows);

}  // namespace uvdef
