#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvdef/tensor.hpp"

namespace uvdef {

// Raised when a forward or backward pass produces non-finite values.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

enum class LayerKind : uint8_t { Conv2d = 0, Relu = 1, MaxPool = 2, Dense = 3, SoftmaxT = 4 };

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int out_channels = 0;   // conv
  int kernel = 0;         // conv
  int stride = 1;         // conv
  int pad = 0;            // conv
  int pool = 2;           // max-pool window
  int pool_stride = 2;    // max-pool stride
  int units = 0;          // dense
  double temperature = 1.0;  // softmax head

  static LayerSpec conv2d(int out_channels, int kernel, int stride = 1, int pad = 0);
  static LayerSpec relu();
  static LayerSpec max_pool(int window = 2, int stride = 2);
  static LayerSpec dense(int units);
  static LayerSpec softmax_head(double temperature = 1.0);
};

// Sequential CNN. Parameter tensors are indexed per layer; parameterless
// layers hold empty tensors at their slot.
//
// Conv weights: (out_c, in_c, k, k). Dense weights: (units, in_dim).
struct Model {
  std::vector<int> input_shape;  // (C,H,W) for conv nets, (D) for dense-only
  std::vector<LayerSpec> layers;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  int num_classes() const;
  double temperature() const;
  void set_temperature(double t);

  int conv_count() const;
  // (C,H,W) of every conv output, in network order. These are the fault
  // injection surfaces, so their geometry doubles as the device-site space.
  std::vector<std::vector<int>> conv_output_shapes() const;
  std::vector<int64_t> conv_output_sizes() const;
  // Stable hash of input shape + layer geometry; keys the site-order cache.
  uint64_t geometry_hash() const;
  int64_t param_count() const;
};

// Validates the stack (shape compatibility, terminal softmax head, positive
// dims) and allocates zeroed parameters.
Model make_model(std::vector<int> input_shape, std::vector<LayerSpec> layers);

// He-normal weights, zero biases; deterministic in `seed`.
void init_params(Model& m, uint64_t seed);

// Callback applied to each convolution output (after bias and fused ReLU),
// one sample at a time. `conv_ordinal` counts conv layers from the input,
// `sample_tag` identifies the inference so noise draws are reproducible.
// The callback mutates the activation in place; an empty hook (no target)
// must leave the pass bit-identical to an un-hooked run, which holds because
// the engine only copies values the callback wrote.
struct FaultHook {
  std::function<void(int conv_ordinal, uint64_t sample_tag, Tensor& activation)> apply;

  explicit operator bool() const { return bool(apply); }
};

struct ForwardResult {
  Tensor logits;    // (classes)
  SoftLabel probs;  // softmax at the model temperature
};

ForwardResult forward(const Model& m, const Tensor& input, const FaultHook* hook = nullptr,
                      uint64_t sample_tag = 0);

struct BatchResult {
  Tensor logits;  // (N, classes)
  std::vector<SoftLabel> probs;
};

// `inputs` is (N, ...input_shape). When a hook is given, per-sample tags come
// from `sample_tags` (defaults to the row index).
BatchResult forward_batch(const Model& m, const Tensor& inputs, const FaultHook* hook = nullptr,
                          const std::vector<uint64_t>* sample_tags = nullptr);

// Activations cached by forward_trace, consumed by backward().
class Trace {
 public:
  const Tensor& logits() const { return logits_; }
  const std::vector<SoftLabel>& probs() const { return probs_; }
  int batch() const { return batch_; }

 private:
  friend struct TraceAccess;

  std::vector<Tensor> node_in;        // input to each runtime node
  std::vector<Tensor> conv_pre;       // pre-activation conv outputs (per node; empty otherwise)
  std::vector<std::vector<int32_t>> pool_arg;  // argmax offsets (per node; empty otherwise)
  Tensor logits_;
  std::vector<SoftLabel> probs_;
  int batch_ = 0;
  uint64_t model_sig = 0;
};

Trace forward_trace(const Model& m, const Tensor& inputs, const FaultHook* hook = nullptr,
                    const std::vector<uint64_t>* sample_tags = nullptr);

struct Gradients {
  std::vector<Tensor> weight_grads;  // per layer, empty where no params
  std::vector<Tensor> bias_grads;
  Tensor input_grad;  // (N, ...input_shape); empty unless requested
};

// Reverse pass seeded with dLoss/dlogits (N, classes). Fault hooks never run
// here: corrupted activations cached in the trace are treated as plain
// values (straight-through), matching hardware where only the forward pass
// is undervolted.
Gradients backward(const Model& m, const Trace& t, const Tensor& logit_grad,
                   bool want_input_grad = false, bool want_param_grads = true);

// Temperature softmax over a logit vector (or the last axis of a (N,C)
// tensor flattened row by row, via softmax_t_rows).
SoftLabel softmax_t(const Tensor& logits, double temperature);
std::vector<SoftLabel> softmax_t_rows(const Tensor& logits, double temperature);

// -sum target_i * log(pred_i), with log clamped away from -inf.
double soft_cross_entropy(const SoftLabel& pred, const SoftLabel& target);

// dLoss/dlogit rows for mean soft cross entropy at temperature T over a
// batch: (p - t) / (T * N).
Tensor ce_logit_grad(const std::vector<SoftLabel>& probs, const std::vector<SoftLabel>& targets,
                     double temperature);

}  // namespace uvdef
