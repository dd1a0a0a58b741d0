#include "uvdef/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace uvdef {

int64_t Tensor::numel_of(const std::vector<int>& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("Tensor: dimensions must be positive, got " + shape_str(s));
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)), data(size_t(numel_of(shape)), 0.0) {}

Tensor::Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (numel_of(shape) != int64_t(data.size()))
    throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match a buffer of " +
                                std::to_string(data.size()) + " values");
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data) m = std::max(m, std::abs(v));
  return m;
}

std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

double round_half_even(double x) {
  // remainder(x, 1) is the signed distance to the nearest integer with the
  // tie broken to even, so this rounds correctly regardless of fesetround.
  return x - std::remainder(x, 1.0);
}

QuantizedTensor quantize(const Tensor& t) {
  if (!t.all_finite()) throw std::invalid_argument("quantize: tensor contains non-finite values");
  QuantizedTensor q;
  q.shape = t.shape;
  q.data.resize(t.data.size());
  const double m = t.max_abs();
  q.scale = (m == 0.0) ? 1.0 : m / 127.0;
  const double inv = 1.0 / q.scale;
  for (size_t i = 0; i < t.data.size(); ++i) {
    double r = round_half_even(t.data[i] * inv);
    r = std::clamp(r, -127.0, 127.0);
    q.data[i] = int8_t(r);
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor t;
  t.shape = q.shape;
  t.data.resize(q.data.size());
  for (size_t i = 0; i < q.data.size(); ++i) t.data[i] = q.scale * double(q.data[i]);
  return t;
}

SoftLabel one_hot(int label, int classes) {
  if (label < 0 || label >= classes) throw std::invalid_argument("one_hot: label out of range");
  SoftLabel s;
  s.probs.assign(size_t(classes), 0.0);
  s.probs[size_t(label)] = 1.0;
  return s;
}

std::vector<int> top_k(const SoftLabel& p, int k) {
  const int n = p.size();
  if (k < 1 || k > n) throw std::invalid_argument("top_k: k must be in [1, #classes]");
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return p.probs[size_t(a)] > p.probs[size_t(b)]; });
  idx.resize(size_t(k));
  return idx;
}

int argmax_label(const SoftLabel& p) {
  if (p.probs.empty()) throw std::invalid_argument("argmax_label: empty distribution");
  int best = 0;
  for (int i = 1; i < p.size(); ++i)
    if (p.probs[size_t(i)] > p.probs[size_t(best)]) best = i;
  return best;
}

}  // namespace uvdef
