#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvdef/tensor.hpp"

namespace uvdef {

// Raised when dataset files are missing, truncated, or corrupt.
struct IngestError : std::runtime_error {
  explicit IngestError(const std::string& what) : std::runtime_error(what) {}
};

// In-memory image classification dataset. Pixels are stored as raw bytes in
// channel-planar order (all R, all G, all B per image) and scaled to [0,1]
// doubles on access.
struct DatasetHandle {
  int width = 32, height = 32, channels = 3, num_classes = 10;
  std::vector<uint8_t> train_pixels, test_pixels;
  std::vector<uint8_t> train_labels, test_labels;

  int64_t image_bytes() const { return int64_t(width) * height * channels; }
  int64_t train_count() const { return int64_t(train_labels.size()); }
  int64_t test_count() const { return int64_t(test_labels.size()); }
  std::vector<int> input_shape() const { return {channels, height, width}; }

  Tensor image(bool train, int64_t idx) const;       // (C,H,W)
  int label(bool train, int64_t idx) const;
  Tensor batch(bool train, const std::vector<int64_t>& indices) const;  // (N,C,H,W)
};

// Reads the classic binary batch layout: five data_batch_N.bin files plus
// test_batch.bin, each holding 10000 records of 1 label byte followed by
// 3072 channel-planar pixel bytes.
DatasetHandle load_cifar10(const std::string& dir);

// Writes a handle back out in the same binary batch layout (train split is
// sliced into data_batch_1..5.bin, test into test_batch.bin). Requires the
// 32x32x3 geometry and a train count divisible by 5.
void write_cifar_batches(const std::string& dir, const DatasetHandle& d);

// Procedural 10-class stand-in with CIFAR geometry. Classes come in pairs
// that share two of their three spectral components, so each class has a
// natural confusion partner; a tunable fraction of samples is drawn close to
// that pair boundary to keep decision margins realistic.
struct SyntheticSpec {
  uint64_t seed = 7;
  int64_t train_count = 50000;
  int64_t test_count = 10000;
  double boundary_fraction = 0.45;  // samples drawn near the pair boundary
  double noise_amp = 0.10;          // per-pixel uniform noise amplitude
};

DatasetHandle make_synthetic_dataset(const SyntheticSpec& spec);

}  // namespace uvdef
