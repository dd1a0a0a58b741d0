#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvdef/dataset.hpp"
#include "uvdef/fault.hpp"
#include "uvdef/nn.hpp"

namespace uvdef {

// Raised when training finishes below its accuracy floor or diverges.
struct TrainingFailure : std::runtime_error {
  double reached = 0.0;
  double floor = 0.0;
  TrainingFailure(const std::string& what, double reached_, double floor_)
      : std::runtime_error(what), reached(reached_), floor(floor_) {}
};

struct TrainConfig {
  double learning_rate = 1e-4;  // fine-tune default; train_base wants more
  double momentum = 0.9;
  int epochs = 5;
  int batch_size = 32;
  uint64_t seed = 1;
  double temperature = 20.0;        // distillation temperature (CDFT)
  double subset_fraction = 0.006;   // fine-tune data budget
  int64_t train_limit = 0;          // 0 = whole split (train_base)
  int64_t eval_limit = 0;           // 0 = whole test split
  double accuracy_floor = 0.0;      // train_base: throw below this
  double val_fraction = 0.1;        // fine-tune: held-out slice of the subset
};

// The fixed workbench CNN: 2x(conv3x3 + relu) -> pool -> 2x(conv3x3 + relu)
// -> pool -> dense 256 + relu -> dense 10 -> softmax.
Model make_desk_cnn(std::vector<int> input_shape = {3, 32, 32}, int classes = 10);

// Mean top-1 accuracy over (a prefix of) a split, batched; optional fault
// hook for accuracy-under-faults.
double accuracy(const Model& m, const DatasetHandle& data, bool train_split, int64_t limit = 0,
                const FaultHook* hook = nullptr, uint64_t tag_salt = 0);

// SGD with momentum on hard labels; architecture comes from `arch` (the
// desk CNN when null). Throws TrainingFailure if the floor is not reached.
Model train_base(const DatasetHandle& data, const TrainConfig& cfg, const Model* arch = nullptr);

// Stratified draw of ceil(fraction * train_count) indices (each class
// within one sample of an even share), ascending.
std::vector<int64_t> sample_subset(const DatasetHandle& data, double fraction, uint64_t seed);

// Temperature-T output distributions of `m` on the listed train images.
std::vector<SoftLabel> soft_labels(const Model& m, const DatasetHandle& data,
                                   const std::vector<int64_t>& subset, double temperature);

// Where the fine-tune forward passes run: a device held in its error-prone
// region. The voltage must sit inside (crash_ceiling, safe_floor].
struct FinetuneContext {
  DeviceProfile device;
  double voltage = 0.0;
  BitFlipPattern pattern{FlipKind::Half};

  double error_rate() const;  // via the device curve
};

struct FinetuneResult {
  Model model;
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_loss;    // per epoch
  int epochs_run = 0;
  bool early_stopped = false;
};

// Resilience fine-tuning: hard labels, T = 1, faulty forward passes.
FinetuneResult finetune_rft(const Model& base, const DatasetHandle& data,
                            const std::vector<int64_t>& subset, const FinetuneContext& ctx,
                            const TrainConfig& cfg);

// Distillation fine-tuning: the base model's temperature-T soft labels as
// targets, faulty forward passes at the same temperature. The returned model
// is reset to T = 1 for inference.
FinetuneResult finetune_cdft(const Model& base, const DatasetHandle& data,
                             const std::vector<int64_t>& subset,
                             const std::vector<SoftLabel>& targets, double soft_label_temperature,
                             const FinetuneContext& ctx, const TrainConfig& cfg);

}  // namespace uvdef
