#include "uvdef/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace uvdef {
namespace {

constexpr char kMagic[4] = {'U', 'V', 'D', 'M'};
constexpr uint32_t kVersion = 1;

// This container is explicitly little-endian; every supported target is LE,
// so writes are plain memcpy of the native representation.

void put_bytes(std::ofstream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), std::streamsize(n));
}

template <class T>
void put(std::ofstream& os, T v) {
  put_bytes(os, &v, sizeof v);
}

void put_str(std::ofstream& os, const std::string& s) {
  put(os, uint64_t(s.size()));
  put_bytes(os, s.data(), s.size());
}

void put_tensor(std::ofstream& os, const Tensor& t) {
  put(os, uint32_t(t.shape.size()));
  for (int d : t.shape) put(os, int32_t(d));
  put(os, uint64_t(t.data.size()));
  put_bytes(os, t.data.data(), t.data.size() * sizeof(double));
}

struct Reader {
  std::ifstream is;
  std::string path;

  void get_bytes(void* p, size_t n) {
    is.read(static_cast<char*>(p), std::streamsize(n));
    if (!is) throw CheckpointError(path + ": truncated checkpoint");
  }
  template <class T>
  T get() {
    T v;
    get_bytes(&v, sizeof v);
    return v;
  }
  std::string get_str(uint64_t max_len = 1u << 20) {
    const uint64_t n = get<uint64_t>();
    if (n > max_len) throw CheckpointError(path + ": implausible string length");
    std::string s(size_t(n), '\0');
    if (n) get_bytes(s.data(), size_t(n));
    return s;
  }
  Tensor get_tensor() {
    const uint32_t rank = get<uint32_t>();
    if (rank > 8) throw CheckpointError(path + ": implausible tensor rank");
    std::vector<int> shape(rank);
    for (auto& d : shape) d = get<int32_t>();
    const uint64_t n = get<uint64_t>();
    if (rank == 0) {
      if (n != 0) throw CheckpointError(path + ": rank-0 tensor with data");
      return Tensor{};
    }
    if (Tensor::numel_of(shape) != int64_t(n))
      throw CheckpointError(path + ": tensor shape/data mismatch");
    Tensor t(shape);
    get_bytes(t.data.data(), size_t(n) * sizeof(double));
    return t;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const Model& m,
                     const std::map<std::string, std::string>& metadata) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError(path + ": cannot open for writing");

  put_bytes(os, kMagic, 4);
  put(os, kVersion);

  put(os, uint32_t(m.input_shape.size()));
  for (int d : m.input_shape) put(os, int32_t(d));

  put(os, uint32_t(m.layers.size()));
  for (const auto& ls : m.layers) {
    put(os, uint8_t(ls.kind));
    put(os, int32_t(ls.out_channels));
    put(os, int32_t(ls.kernel));
    put(os, int32_t(ls.stride));
    put(os, int32_t(ls.pad));
    put(os, int32_t(ls.pool));
    put(os, int32_t(ls.pool_stride));
    put(os, int32_t(ls.units));
    put(os, ls.temperature);
  }
  for (size_t i = 0; i < m.layers.size(); ++i) {
    put_tensor(os, m.weights[i]);
    put_tensor(os, m.biases[i]);
  }

  put(os, uint32_t(metadata.size()));
  for (const auto& [k, v] : metadata) {
    put_str(os, k);
    put_str(os, v);
  }
  os.flush();
  if (!os) throw CheckpointError(path + ": write failed");
}

CheckpointData load_checkpoint(const std::string& path) {
  Reader r;
  r.path = path;
  r.is.open(path, std::ios::binary);
  if (!r.is) throw CheckpointError(path + ": cannot open");

  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError(path + ": not a model checkpoint (bad magic)");
  const uint32_t ver = r.get<uint32_t>();
  if (ver != kVersion)
    throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(ver));

  CheckpointData out;
  const uint32_t in_rank = r.get<uint32_t>();
  if (in_rank == 0 || in_rank > 8) throw CheckpointError(path + ": implausible input rank");
  std::vector<int> input_shape(in_rank);
  for (auto& d : input_shape) d = r.get<int32_t>();

  const uint32_t n_layers = r.get<uint32_t>();
  if (n_layers == 0 || n_layers > 1024) throw CheckpointError(path + ": implausible layer count");
  std::vector<LayerSpec> layers(n_layers);
  for (auto& ls : layers) {
    const uint8_t kind = r.get<uint8_t>();
    if (kind > uint8_t(LayerKind::SoftmaxT))
      throw CheckpointError(path + ": unknown layer kind " + std::to_string(kind));
    ls.kind = LayerKind(kind);
    ls.out_channels = r.get<int32_t>();
    ls.kernel = r.get<int32_t>();
    ls.stride = r.get<int32_t>();
    ls.pad = r.get<int32_t>();
    ls.pool = r.get<int32_t>();
    ls.pool_stride = r.get<int32_t>();
    ls.units = r.get<int32_t>();
    ls.temperature = r.get<double>();
  }

  // make_model re-validates the stack, so a tampered geometry fails loudly.
  Model m;
  try {
    m = make_model(input_shape, layers);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(path + ": invalid model geometry: " + e.what());
  }
  for (size_t i = 0; i < layers.size(); ++i) {
    Tensor w = r.get_tensor();
    Tensor b = r.get_tensor();
    if (w.shape != m.weights[i].shape || b.shape != m.biases[i].shape)
      throw CheckpointError(path + ": parameter shape mismatch at layer " + std::to_string(i));
    m.weights[i] = std::move(w);
    m.biases[i] = std::move(b);
  }

  const uint32_t n_meta = r.get<uint32_t>();
  if (n_meta > 4096) throw CheckpointError(path + ": implausible metadata count");
  for (uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.get_str();
    out.metadata[k] = r.get_str();
  }
  out.model = std::move(m);
  return out;
}

}  // namespace uvdef
