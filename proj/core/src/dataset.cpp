#include "uvdef/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "uvdef/rng.hpp"

namespace uvdef {

namespace fs = std::filesystem;

Tensor DatasetHandle::image(bool train, int64_t idx) const {
  const auto& px = train ? train_pixels : test_pixels;
  const int64_t n = train ? train_count() : test_count();
  if (idx < 0 || idx >= n)
    throw std::out_of_range("dataset image index " + std::to_string(idx) + " of " +
                            std::to_string(n));
  Tensor t({channels, height, width});
  const uint8_t* src = px.data() + idx * image_bytes();
  for (int64_t i = 0; i < image_bytes(); ++i) t[i] = double(src[i]) / 255.0;
  return t;
}

int DatasetHandle::label(bool train, int64_t idx) const {
  const auto& lb = train ? train_labels : test_labels;
  if (idx < 0 || idx >= int64_t(lb.size()))
    throw std::out_of_range("dataset label index " + std::to_string(idx));
  return lb[size_t(idx)];
}

Tensor DatasetHandle::batch(bool train, const std::vector<int64_t>& indices) const {
  if (indices.empty()) throw std::invalid_argument("dataset batch: empty index list");
  const auto& px = train ? train_pixels : test_pixels;
  const int64_t n = train ? train_count() : test_count();
  Tensor t({int(indices.size()), channels, height, width});
  for (size_t k = 0; k < indices.size(); ++k) {
    const int64_t idx = indices[k];
    if (idx < 0 || idx >= n) throw std::out_of_range("dataset batch index " + std::to_string(idx));
    const uint8_t* src = px.data() + idx * image_bytes();
    double* dst = t.data.data() + int64_t(k) * image_bytes();
    for (int64_t i = 0; i < image_bytes(); ++i) dst[i] = double(src[i]) / 255.0;
  }
  return t;
}

namespace {

constexpr int64_t kRecordBytes = 3073;  // label + 3*32*32

// Accepts any whole number of records so hand-built fixtures load too;
// the canonical archive carries 10000 per file.
void read_batch_file(const std::string& path, std::vector<uint8_t>& pixels,
                     std::vector<uint8_t>& labels, int num_classes) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestError(path + ": missing batch file");
  is.seekg(0, std::ios::end);
  const int64_t size = is.tellg();
  is.seekg(0);
  if (size <= 0 || size % kRecordBytes != 0)
    throw IngestError(path + ": size " + std::to_string(size) +
                      " is not a whole number of " + std::to_string(kRecordBytes) +
                      "-byte records (truncated or corrupt)");
  const int64_t records = size / kRecordBytes;
  std::vector<uint8_t> buf(static_cast<size_t>(size));
  is.read(reinterpret_cast<char*>(buf.data()), size);
  if (!is) throw IngestError(path + ": short read");
  for (int64_t r = 0; r < records; ++r) {
    const uint8_t label = buf[size_t(r * kRecordBytes)];
    if (label >= num_classes)
      throw IngestError(path + ": record " + std::to_string(r) + " has label " +
                        std::to_string(int(label)) + " outside 0.." +
                        std::to_string(num_classes - 1));
    labels.push_back(label);
    const uint8_t* rec = buf.data() + r * kRecordBytes + 1;
    pixels.insert(pixels.end(), rec, rec + kRecordBytes - 1);
  }
}

}  // namespace

DatasetHandle load_cifar10(const std::string& dir) {
  DatasetHandle d;
  for (int b = 1; b <= 5; ++b)
    read_batch_file(dir + "/data_batch_" + std::to_string(b) + ".bin", d.train_pixels,
                    d.train_labels, d.num_classes);
  read_batch_file(dir + "/test_batch.bin", d.test_pixels, d.test_labels, d.num_classes);
  return d;
}

void write_cifar_batches(const std::string& dir, const DatasetHandle& d) {
  if (d.width != 32 || d.height != 32 || d.channels != 3)
    throw std::invalid_argument("write_cifar_batches: needs 32x32x3 geometry");
  if (d.train_count() % 5 != 0)
    throw std::invalid_argument("write_cifar_batches: train count must split into 5 batches");
  fs::create_directories(dir);
  const int64_t per = d.train_count() / 5;
  auto write_range = [&](const std::string& path, const std::vector<uint8_t>& px,
                         const std::vector<uint8_t>& lb, int64_t lo, int64_t hi) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error(path + ": cannot open for writing");
    for (int64_t i = lo; i < hi; ++i) {
      os.put(char(lb[size_t(i)]));
      os.write(reinterpret_cast<const char*>(px.data() + i * d.image_bytes()),
               d.image_bytes());
    }
    if (!os.good()) throw std::runtime_error(path + ": write failed");
  };
  for (int b = 0; b < 5; ++b)
    write_range(dir + "/data_batch_" + std::to_string(b + 1) + ".bin", d.train_pixels,
                d.train_labels, b * per, (b + 1) * per);
  write_range(dir + "/test_batch.bin", d.test_pixels, d.test_labels, 0, d.test_count());
}

namespace {

struct Grating {
  double fy, fx;      // cycles across the 32-pixel extent
  double color[3];
};

// Class geometry is fixed by hand so difficulty does not drift with the
// seed; the seed only drives per-sample draws (phases, weights, noise).
//
// Classes 2p and 2p+1 share gratings A[p] and B[p]; only the per-class
// grating and the blob location separate them.
constexpr Grating kPairA[5] = {
    {0, 1, {+0.9, +0.2, -0.5}}, {1, 0, {-0.4, +0.8, +0.3}}, {1, 1, {+0.6, -0.7, +0.2}},
    {0, 2, {-0.8, -0.3, +0.7}}, {2, 0, {+0.3, +0.6, +0.8}}};
constexpr Grating kPairB[5] = {
    {2, 1, {-0.6, +0.5, +0.6}}, {1, 2, {+0.8, -0.6, -0.2}}, {2, 2, {-0.3, -0.8, +0.5}},
    {1, 3, {+0.5, +0.7, -0.6}}, {3, 1, {-0.7, +0.1, -0.7}}};
constexpr Grating kClassC[10] = {
    {3, 0, {+0.8, -0.4, +0.4}}, {0, 3, {-0.5, +0.9, -0.1}}, {3, 2, {+0.2, +0.5, -0.9}},
    {2, 3, {-0.9, -0.1, +0.4}}, {3, 3, {+0.7, +0.6, +0.1}}, {4, 1, {-0.2, -0.6, -0.8}},
    {1, 4, {+0.9, +0.1, +0.5}}, {4, 2, {-0.6, -0.5, +0.7}}, {2, 4, {+0.4, -0.9, -0.3}},
    {4, 4, {-0.8, +0.7, -0.2}}};
constexpr Grating kConfuser[4] = {
    {5, 0, {+0.5, +0.5, -0.5}}, {0, 5, {-0.5, +0.5, +0.5}}, {5, 5, {+0.5, -0.5, +0.5}},
    {4, 0, {-0.5, -0.5, -0.5}}};

// Separable evaluation of sin(2*pi*(fx*x + fy*y)/32 + phase); fills 32+32
// lookup rows so the per-pixel work is two multiplies.
struct GratingRows {
  double sx[32], cx[32], sy[32], cy[32];

  GratingRows(const Grating& g, double phase) {
    constexpr double kStep = 2.0 * std::numbers::pi / 32.0;
    for (int x = 0; x < 32; ++x) {
      const double u = kStep * g.fx * x + phase;
      sx[x] = std::sin(u);
      cx[x] = std::cos(u);
    }
    for (int y = 0; y < 32; ++y) {
      const double v = kStep * g.fy * y;
      sy[y] = std::sin(v);
      cy[y] = std::cos(v);
    }
  }
  double at(int y, int x) const { return sx[x] * cy[y] + cx[x] * sy[y]; }
};

void render_sample(Rng& rng, int cls, double boundary_fraction, double noise_amp,
                   uint8_t* out /* 3072 bytes, channel-planar */) {
  const int pair = cls / 2;
  const int side = cls % 2;
  const int partner = pair * 2 + (1 - side);

  struct Term {
    GratingRows rows;
    double w;
    const double* color;
  };
  std::vector<Term> terms;
  terms.reserve(6);

  const double wA = rng.uniform(0.70, 1.00);
  const double wB = rng.uniform(0.70, 1.00);
  terms.push_back({GratingRows(kPairA[pair], rng.uniform(0.0, 2.0 * std::numbers::pi)), wA,
                   kPairA[pair].color});
  terms.push_back({GratingRows(kPairB[pair], rng.uniform(0.0, 2.0 * std::numbers::pi)), wB,
                   kPairB[pair].color});

  // The separating component. Boundary samples carry a weak own-class term
  // plus cross-talk from the partner class.
  const bool near_boundary = rng.uniform01() < boundary_fraction;
  const double wC = near_boundary ? rng.uniform(0.28, 0.45) : rng.uniform(0.55, 0.90);
  const double wX = near_boundary ? rng.uniform(0.10, 0.25) : rng.uniform(0.0, 0.08);
  terms.push_back({GratingRows(kClassC[cls], rng.uniform(0.0, 2.0 * std::numbers::pi)), wC,
                   kClassC[cls].color});
  terms.push_back({GratingRows(kClassC[partner], rng.uniform(0.0, 2.0 * std::numbers::pi)), wX,
                   kClassC[partner].color});

  const int conf = int(rng.bounded(4));
  terms.push_back({GratingRows(kConfuser[conf], rng.uniform(0.0, 2.0 * std::numbers::pi)),
                   rng.uniform(0.25, 0.40), kConfuser[conf].color});

  // Localized blob at a class-dependent position. Boundary samples attenuate
  // it too; a full-strength positional cue would pull them far from the
  // decision boundary regardless of the grating mix.
  const double cx = 4.0 + 6.0 * double(cls % 5) + rng.uniform(-1.5, 1.5);
  const double cy = (cls < 5 ? 10.0 : 21.0) + rng.uniform(-1.5, 1.5);
  const double wBlob = near_boundary ? rng.uniform(0.10, 0.30) : rng.uniform(0.45, 0.70);
  const double* blob_color = kClassC[cls].color;
  double bx[32], by[32];
  for (int x = 0; x < 32; ++x) bx[x] = std::exp(-(x - cx) * (x - cx) / (2.0 * 16.0));
  for (int y = 0; y < 32; ++y) by[y] = std::exp(-(y - cy) * (y - cy) / (2.0 * 16.0));

  constexpr double kGain = 0.24;
  double plane[3][32][32];
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) plane[ch][y][x] = 0.0;
  for (const Term& t : terms) {
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        const double g = t.w * t.rows.at(y, x);
        plane[0][y][x] += g * t.color[0];
        plane[1][y][x] += g * t.color[1];
        plane[2][y][x] += g * t.color[2];
      }
    }
  }
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const double b = wBlob * bx[x] * by[y];
      plane[0][y][x] += b * blob_color[0];
      plane[1][y][x] += b * blob_color[1];
      plane[2][y][x] += b * blob_color[2];
    }
  }
  for (int ch = 0; ch < 3; ++ch) {
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        double v = 0.5 + kGain * plane[ch][y][x] + rng.uniform(-noise_amp, noise_amp);
        v = std::clamp(v, 0.0, 1.0);
        out[(ch * 32 + y) * 32 + x] = uint8_t(round_half_even(v * 255.0));
      }
    }
  }
}

}  // namespace

DatasetHandle make_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.train_count < 10 || spec.test_count < 10)
    throw std::invalid_argument("synthetic dataset: need at least 10 samples per split");
  if (spec.boundary_fraction < 0.0 || spec.boundary_fraction > 1.0)
    throw std::invalid_argument("synthetic dataset: boundary fraction must be in [0,1]");
  DatasetHandle d;
  auto fill = [&](bool train, int64_t count) {
    auto& px = train ? d.train_pixels : d.test_pixels;
    auto& lb = train ? d.train_labels : d.test_labels;
    px.resize(size_t(count * d.image_bytes()));
    lb.resize(size_t(count));
    const uint64_t split_tag = train ? 0x7261ULL : 0x7e57ULL;
    for (int64_t i = 0; i < count; ++i) {
      const int cls = int(i % d.num_classes);
      Rng rng(mix_seed(spec.seed, split_tag, uint64_t(i)));
      render_sample(rng, cls, spec.boundary_fraction, spec.noise_amp,
                    px.data() + i * d.image_bytes());
      lb[size_t(i)] = uint8_t(cls);
    }
  };
  fill(true, spec.train_count);
  fill(false, spec.test_count);
  return d;
}

}  // namespace uvdef
