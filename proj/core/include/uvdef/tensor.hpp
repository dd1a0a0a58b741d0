#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace uvdef {

// Dense row-major tensor of doubles. Shape is a plain dimension list;
// nothing here assumes a layout beyond row-major flattening.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);
  Tensor(std::vector<int> s, std::vector<double> d);

  static int64_t numel_of(const std::vector<int>& s);

  int64_t numel() const { return int64_t(data.size()); }
  double& operator[](int64_t i) { return data[size_t(i)]; }
  double operator[](int64_t i) const { return data[size_t(i)]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  double max_abs() const;
};

std::string shape_str(const std::vector<int>& s);

// Symmetric per-tensor INT8 quantization: real = scale * q.
struct QuantizedTensor {
  std::vector<int> shape;
  std::vector<int8_t> data;
  double scale = 1.0;

  int64_t numel() const { return int64_t(data.size()); }
};

// Banker's rounding (ties to even), independent of the FP environment.
double round_half_even(double x);

// scale = max|t| / 127 (1.0 for an all-zero tensor); values are rounded
// half-to-even and clamped to [-127, 127]. Throws std::invalid_argument on
// non-finite input.
QuantizedTensor quantize(const Tensor& t);
Tensor dequantize(const QuantizedTensor& q);

// Class-probability vector. Produced by the softmax head and by distillation.
struct SoftLabel {
  std::vector<double> probs;

  int size() const { return int(probs.size()); }
};

// One-hot distribution.
SoftLabel one_hot(int label, int classes);

// Indices of the k largest entries, in descending probability order.
// Ties resolve toward the lower index so rankings are reproducible.
std::vector<int> top_k(const SoftLabel& p, int k);
int argmax_label(const SoftLabel& p);

}  // namespace uvdef
