#include "uvdef/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>

#include "uvdef/rng.hpp"

namespace uvdef {

// Internal backdoor into Trace for the forward/backward walkers.
struct TraceAccess {
  static std::vector<Tensor>& node_in(Trace& t) { return t.node_in; }
  static const std::vector<Tensor>& node_in(const Trace& t) { return t.node_in; }
  static std::vector<Tensor>& conv_pre(Trace& t) { return t.conv_pre; }
  static const std::vector<Tensor>& conv_pre(const Trace& t) { return t.conv_pre; }
  static std::vector<std::vector<int32_t>>& pool_arg(Trace& t) { return t.pool_arg; }
  static const std::vector<std::vector<int32_t>>& pool_arg(const Trace& t) { return t.pool_arg; }
  static void set_outputs(Trace& t, const Tensor& logits, const std::vector<SoftLabel>& probs,
                          int batch, uint64_t sig) {
    t.logits_ = logits;
    t.probs_ = probs;
    t.batch_ = batch;
    t.model_sig = sig;
  }
  static uint64_t model_sig(const Trace& t) { return t.model_sig; }
};

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;
using MapV = Eigen::Map<Eigen::VectorXd>;
using CMapV = Eigen::Map<const Eigen::VectorXd>;

struct Node {
  LayerKind kind;
  int layer = -1;
  bool fused_relu = false;
  int conv_ordinal = -1;
  // conv / pool geometry
  int in_c = 0, in_h = 0, in_w = 0;
  int out_c = 0, out_h = 0, out_w = 0;
  int kernel = 0, stride = 1, pad = 0;
  int pool = 0, pool_stride = 0;
  // dense geometry
  int in_dim = 0, out_dim = 0;
  std::vector<int> oshape;  // per-sample output shape

  int64_t out_size() const {
    int64_t n = 1;
    for (int d : oshape) n *= d;
    return n;
  }
  int64_t in_size() const {
    return kind == LayerKind::Dense ? in_dim : int64_t(in_c) * in_h * in_w;
  }
};

struct Plan {
  std::vector<Node> nodes;
  double temperature = 1.0;
  int classes = 0;
};

[[noreturn]] void plan_error(size_t layer_idx, const std::string& msg) {
  throw std::invalid_argument("model layer " + std::to_string(layer_idx) + ": " + msg);
}

// Walks the stack, checks shape compatibility, and fuses ReLU into the
// preceding conv so the fault hook sees post-activation values.
Plan build_plan(const std::vector<int>& input_shape, const std::vector<LayerSpec>& layers) {
  if (input_shape.empty()) throw std::invalid_argument("model: empty input shape");
  for (int d : input_shape)
    if (d <= 0) throw std::invalid_argument("model: input shape " + shape_str(input_shape));
  if (layers.empty()) throw std::invalid_argument("model: no layers");

  Plan plan;
  std::vector<int> cur = input_shape;
  int conv_ordinal = 0;

  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& ls = layers[i];
    const bool last = (i + 1 == layers.size());
    if (ls.kind == LayerKind::SoftmaxT) {
      if (!last) plan_error(i, "softmax head must be the final layer");
      if (ls.temperature <= 0.0) plan_error(i, "softmax temperature must be positive");
      int64_t flat = 1;
      for (int d : cur) flat *= d;
      if (flat < 2) plan_error(i, "softmax head needs at least 2 logits");
      plan.temperature = ls.temperature;
      plan.classes = int(flat);
      continue;
    }
    if (last) plan_error(i, "stack must end with a softmax head");

    Node node;
    node.kind = ls.kind;
    node.layer = int(i);
    switch (ls.kind) {
      case LayerKind::Conv2d: {
        if (cur.size() != 3) plan_error(i, "conv input must be (C,H,W), got " + shape_str(cur));
        if (ls.out_channels <= 0 || ls.kernel <= 0 || ls.stride <= 0 || ls.pad < 0)
          plan_error(i, "bad conv geometry");
        node.in_c = cur[0];
        node.in_h = cur[1];
        node.in_w = cur[2];
        node.kernel = ls.kernel;
        node.stride = ls.stride;
        node.pad = ls.pad;
        node.out_c = ls.out_channels;
        node.out_h = (cur[1] + 2 * ls.pad - ls.kernel) / ls.stride + 1;
        node.out_w = (cur[2] + 2 * ls.pad - ls.kernel) / ls.stride + 1;
        if (cur[1] + 2 * ls.pad < ls.kernel || cur[2] + 2 * ls.pad < ls.kernel)
          plan_error(i, "kernel larger than padded input");
        node.conv_ordinal = conv_ordinal++;
        // Fuse an immediately following ReLU.
        if (i + 1 < layers.size() && layers[i + 1].kind == LayerKind::Relu) node.fused_relu = true;
        cur = {node.out_c, node.out_h, node.out_w};
        break;
      }
      case LayerKind::Relu: {
        if (!plan.nodes.empty() && plan.nodes.back().kind == LayerKind::Conv2d &&
            plan.nodes.back().fused_relu && plan.nodes.back().layer == int(i) - 1)
          continue;  // consumed by the conv node
        node.in_dim = 0;  // elementwise; geometry untouched
        break;
      }
      case LayerKind::MaxPool: {
        if (cur.size() != 3) plan_error(i, "max-pool input must be (C,H,W), got " + shape_str(cur));
        if (ls.pool <= 0 || ls.pool_stride <= 0) plan_error(i, "bad pool geometry");
        if (cur[1] < ls.pool || cur[2] < ls.pool) plan_error(i, "pool window larger than input");
        node.in_c = cur[0];
        node.in_h = cur[1];
        node.in_w = cur[2];
        node.pool = ls.pool;
        node.pool_stride = ls.pool_stride;
        node.out_c = cur[0];
        node.out_h = (cur[1] - ls.pool) / ls.pool_stride + 1;
        node.out_w = (cur[2] - ls.pool) / ls.pool_stride + 1;
        cur = {node.out_c, node.out_h, node.out_w};
        break;
      }
      case LayerKind::Dense: {
        if (ls.units <= 0) plan_error(i, "dense units must be positive");
        int64_t flat = 1;
        for (int d : cur) flat *= d;
        node.in_dim = int(flat);
        node.out_dim = ls.units;
        cur = {ls.units};
        break;
      }
      case LayerKind::SoftmaxT:
        break;  // handled above
    }
    node.oshape = cur;
    plan.nodes.push_back(node);
  }
  if (plan.classes == 0) throw std::invalid_argument("model: stack must end with a softmax head");
  return plan;
}

void im2col(const double* x, int C, int H, int W, int k, int stride, int pad, int OH, int OW,
            double* out) {
  const int cols = OH * OW;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* orow = out + (int64_t(c) * k * k + ky * k + kx) * cols;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride + ky - pad;
          double* od = orow + int64_t(oy) * OW;
          if (iy < 0 || iy >= H) {
            std::memset(od, 0, sizeof(double) * size_t(OW));
            continue;
          }
          const double* xrow = x + (int64_t(c) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride + kx - pad;
            od[ox] = (ix >= 0 && ix < W) ? xrow[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols_buf, int C, int H, int W, int k, int stride, int pad, int OH,
                int OW, double* x) {
  const int cols = OH * OW;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* orow = cols_buf + (int64_t(c) * k * k + ky * k + kx) * cols;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          double* xrow = x + (int64_t(c) * H + iy) * W;
          const double* od = orow + int64_t(oy) * OW;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < W) xrow[ix] += od[ox];
          }
        }
      }
    }
  }
}

uint64_t fnv1a64(uint64_t h, const void* p, size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  for (size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct RunBuffers {
  std::vector<double> col;  // im2col scratch, reused across samples
};

// Executes one node for the whole batch. `pre` (fused-relu conv) and `arg`
// (pool) are filled only when tracing.
void run_node(const Model& m, const Node& nd, const Tensor& in, Tensor& out, Tensor* pre,
              std::vector<int32_t>* arg, const FaultHook* hook,
              const std::vector<uint64_t>* tags, RunBuffers& buf) {
  const int N = in.shape[0];
  switch (nd.kind) {
    case LayerKind::Conv2d: {
      const Tensor& w = m.weights[size_t(nd.layer)];
      const Tensor& b = m.biases[size_t(nd.layer)];
      const int ckk = nd.in_c * nd.kernel * nd.kernel;
      const int ohw = nd.out_h * nd.out_w;
      buf.col.resize(size_t(ckk) * ohw);
      CMapM W(w.data.data(), nd.out_c, ckk);
      CMapV bias(b.data.data(), nd.out_c);
      Tensor sample_act;  // reused hook scratch
      if (hook && *hook) sample_act = Tensor({nd.out_c, nd.out_h, nd.out_w});
      for (int n = 0; n < N; ++n) {
        im2col(in.data.data() + int64_t(n) * nd.in_size(), nd.in_c, nd.in_h, nd.in_w, nd.kernel,
               nd.stride, nd.pad, nd.out_h, nd.out_w, buf.col.data());
        CMapM P(buf.col.data(), ckk, ohw);
        double* optr = out.data.data() + int64_t(n) * nd.out_size();
        MapM O(optr, nd.out_c, ohw);
        O.noalias() = W * P;
        O.colwise() += bias;
        if (pre)
          std::memcpy(pre->data.data() + int64_t(n) * nd.out_size(), optr,
                      sizeof(double) * size_t(nd.out_size()));
        if (nd.fused_relu) O = O.cwiseMax(0.0);
        if (hook && *hook) {
          std::memcpy(sample_act.data.data(), optr, sizeof(double) * size_t(nd.out_size()));
          const uint64_t tag = tags ? (*tags)[size_t(n)] : uint64_t(n);
          hook->apply(nd.conv_ordinal, tag, sample_act);
          std::memcpy(optr, sample_act.data.data(), sizeof(double) * size_t(nd.out_size()));
        }
      }
      break;
    }
    case LayerKind::Relu: {
      for (int64_t i = 0; i < in.numel(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    }
    case LayerKind::MaxPool: {
      const int64_t in_chw = nd.in_size();
      const int64_t out_chw = nd.out_size();
      for (int n = 0; n < N; ++n) {
        const double* xs = in.data.data() + int64_t(n) * in_chw;
        double* os = out.data.data() + int64_t(n) * out_chw;
        int32_t* as = arg ? arg->data() + int64_t(n) * out_chw : nullptr;
        int64_t o = 0;
        for (int c = 0; c < nd.in_c; ++c) {
          const double* xc = xs + int64_t(c) * nd.in_h * nd.in_w;
          for (int oy = 0; oy < nd.out_h; ++oy) {
            for (int ox = 0; ox < nd.out_w; ++ox, ++o) {
              const int y0 = oy * nd.pool_stride;
              const int x0 = ox * nd.pool_stride;
              double best = xc[int64_t(y0) * nd.in_w + x0];
              int32_t besti = int32_t(y0 * nd.in_w + x0);
              for (int ky = 0; ky < nd.pool; ++ky) {
                for (int kx = 0; kx < nd.pool; ++kx) {
                  const int32_t idx = int32_t((y0 + ky) * nd.in_w + (x0 + kx));
                  const double v = xc[idx];
                  if (v > best) {  // strict: first max wins, rankings stay stable
                    best = v;
                    besti = idx;
                  }
                }
              }
              os[o] = best;
              if (as) as[o] = int32_t(c * nd.in_h * nd.in_w) + besti;
            }
          }
        }
      }
      break;
    }
    case LayerKind::Dense: {
      const Tensor& w = m.weights[size_t(nd.layer)];
      const Tensor& b = m.biases[size_t(nd.layer)];
      CMapM X(in.data.data(), N, nd.in_dim);
      CMapM W(w.data.data(), nd.out_dim, nd.in_dim);
      CMapV bias(b.data.data(), nd.out_dim);
      MapM O(out.data.data(), N, nd.out_dim);
      O.noalias() = X * W.transpose();
      O.rowwise() += bias.transpose();
      break;
    }
    case LayerKind::SoftmaxT:
      break;
  }
}

Tensor alloc_out(const Node& nd, int N) {
  std::vector<int> s = nd.oshape;
  s.insert(s.begin(), N);
  return Tensor(std::move(s));
}

void check_batch_input(const Model& m, const Tensor& inputs) {
  if (inputs.shape.size() != m.input_shape.size() + 1 || inputs.shape[0] < 1 ||
      !std::equal(m.input_shape.begin(), m.input_shape.end(), inputs.shape.begin() + 1))
    throw std::invalid_argument("forward: input shape " + shape_str(inputs.shape) +
                                " does not match model input " + shape_str(m.input_shape));
}

}  // namespace

LayerSpec LayerSpec::conv2d(int out_channels, int kernel, int stride, int pad) {
  LayerSpec ls;
  ls.kind = LayerKind::Conv2d;
  ls.out_channels = out_channels;
  ls.kernel = kernel;
  ls.stride = stride;
  ls.pad = pad;
  return ls;
}

LayerSpec LayerSpec::relu() {
  LayerSpec ls;
  ls.kind = LayerKind::Relu;
  return ls;
}

LayerSpec LayerSpec::max_pool(int window, int stride) {
  LayerSpec ls;
  ls.kind = LayerKind::MaxPool;
  ls.pool = window;
  ls.pool_stride = stride;
  return ls;
}

LayerSpec LayerSpec::dense(int units) {
  LayerSpec ls;
  ls.kind = LayerKind::Dense;
  ls.units = units;
  return ls;
}

LayerSpec LayerSpec::softmax_head(double temperature) {
  LayerSpec ls;
  ls.kind = LayerKind::SoftmaxT;
  ls.temperature = temperature;
  return ls;
}

int Model::num_classes() const { return build_plan(input_shape, layers).classes; }

double Model::temperature() const {
  for (const auto& ls : layers)
    if (ls.kind == LayerKind::SoftmaxT) return ls.temperature;
  throw std::logic_error("model has no softmax head");
}

void Model::set_temperature(double t) {
  if (t <= 0.0) throw std::invalid_argument("temperature must be positive");
  for (auto& ls : layers)
    if (ls.kind == LayerKind::SoftmaxT) {
      ls.temperature = t;
      return;
    }
  throw std::logic_error("model has no softmax head");
}

int Model::conv_count() const {
  int n = 0;
  for (const auto& ls : layers) n += (ls.kind == LayerKind::Conv2d);
  return n;
}

std::vector<std::vector<int>> Model::conv_output_shapes() const {
  std::vector<std::vector<int>> out;
  for (const Node& nd : build_plan(input_shape, layers).nodes)
    if (nd.kind == LayerKind::Conv2d) out.push_back({nd.out_c, nd.out_h, nd.out_w});
  return out;
}

std::vector<int64_t> Model::conv_output_sizes() const {
  std::vector<int64_t> out;
  for (const auto& s : conv_output_shapes()) out.push_back(int64_t(s[0]) * s[1] * s[2]);
  return out;
}

uint64_t Model::geometry_hash() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto add_int = [&h](int64_t v) { h = fnv1a64(h, &v, sizeof v); };
  add_int(int64_t(input_shape.size()));
  for (int d : input_shape) add_int(d);
  for (const auto& ls : layers) {
    add_int(int64_t(ls.kind));
    add_int(ls.out_channels);
    add_int(ls.kernel);
    add_int(ls.stride);
    add_int(ls.pad);
    add_int(ls.pool);
    add_int(ls.pool_stride);
    add_int(ls.units);
    h = fnv1a64(h, &ls.temperature, sizeof ls.temperature);
  }
  return h;
}

int64_t Model::param_count() const {
  int64_t n = 0;
  for (const auto& t : weights) n += t.numel();
  for (const auto& t : biases) n += t.numel();
  return n;
}

Model make_model(std::vector<int> input_shape, std::vector<LayerSpec> layers) {
  Model m;
  m.input_shape = std::move(input_shape);
  m.layers = std::move(layers);
  const Plan plan = build_plan(m.input_shape, m.layers);  // validates
  m.weights.resize(m.layers.size());
  m.biases.resize(m.layers.size());
  for (const Node& nd : plan.nodes) {
    if (nd.kind == LayerKind::Conv2d) {
      m.weights[size_t(nd.layer)] = Tensor({nd.out_c, nd.in_c, nd.kernel, nd.kernel});
      m.biases[size_t(nd.layer)] = Tensor({nd.out_c});
    } else if (nd.kind == LayerKind::Dense) {
      m.weights[size_t(nd.layer)] = Tensor({nd.out_dim, nd.in_dim});
      m.biases[size_t(nd.layer)] = Tensor({nd.out_dim});
    }
  }
  return m;
}

void init_params(Model& m, uint64_t seed) {
  for (size_t i = 0; i < m.layers.size(); ++i) {
    Tensor& w = m.weights[i];
    if (w.numel() == 0) continue;
    int64_t fan_in = 1;
    for (size_t d = 1; d < w.shape.size(); ++d) fan_in *= w.shape[d];
    const double stddev = std::sqrt(2.0 / double(fan_in));
    Rng rng(mix_seed(seed, 0x1ea7ULL, uint64_t(i)));
    for (auto& v : w.data) v = rng.normal(0.0, stddev);
    for (auto& v : m.biases[i].data) v = 0.0;
  }
}

SoftLabel softmax_t(const Tensor& logits, double temperature) {
  if (temperature <= 0.0) throw std::invalid_argument("softmax_t: temperature must be positive");
  if (logits.numel() < 2) throw std::invalid_argument("softmax_t: need at least 2 logits");
  SoftLabel out;
  out.probs.resize(size_t(logits.numel()));
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits.data) mx = std::max(mx, v / temperature);
  double sum = 0.0;
  for (size_t i = 0; i < logits.data.size(); ++i) {
    const double e = std::exp(logits.data[i] / temperature - mx);
    out.probs[i] = e;
    sum += e;
  }
  for (auto& p : out.probs) p /= sum;
  return out;
}

std::vector<SoftLabel> softmax_t_rows(const Tensor& logits, double temperature) {
  if (logits.shape.size() != 2) throw std::invalid_argument("softmax_t_rows: logits must be (N,C)");
  const int N = logits.shape[0], C = logits.shape[1];
  std::vector<SoftLabel> out(static_cast<size_t>(N));
  for (int n = 0; n < N; ++n) {
    Tensor row({C});
    std::copy_n(logits.data.begin() + int64_t(n) * C, C, row.data.begin());
    out[size_t(n)] = softmax_t(row, temperature);
  }
  return out;
}

double soft_cross_entropy(const SoftLabel& pred, const SoftLabel& target) {
  if (pred.size() != target.size())
    throw std::invalid_argument("soft_cross_entropy: distribution sizes differ");
  double loss = 0.0;
  for (size_t i = 0; i < pred.probs.size(); ++i) {
    if (target.probs[i] == 0.0) continue;
    loss -= target.probs[i] * std::log(std::max(pred.probs[i], 1e-300));
  }
  return loss;
}

Tensor ce_logit_grad(const std::vector<SoftLabel>& probs, const std::vector<SoftLabel>& targets,
                     double temperature) {
  if (probs.empty() || probs.size() != targets.size())
    throw std::invalid_argument("ce_logit_grad: batch sizes differ");
  const int N = int(probs.size());
  const int C = probs[0].size();
  Tensor g({N, C});
  const double scale = 1.0 / (temperature * double(N));
  for (int n = 0; n < N; ++n) {
    if (probs[size_t(n)].size() != C || targets[size_t(n)].size() != C)
      throw std::invalid_argument("ce_logit_grad: inconsistent class counts");
    for (int c = 0; c < C; ++c)
      g[int64_t(n) * C + c] =
          (probs[size_t(n)].probs[size_t(c)] - targets[size_t(n)].probs[size_t(c)]) * scale;
  }
  return g;
}

namespace {

// Shared forward walker. When `trace` is non-null every node input plus the
// relu/pool bookkeeping needed by backward() is cached.
BatchResult run_forward(const Model& m, const Tensor& inputs, const FaultHook* hook,
                        const std::vector<uint64_t>* tags, Trace* trace) {
  check_batch_input(m, inputs);
  if (!inputs.all_finite()) throw NumericalError("forward: non-finite input");
  if (tags && int64_t(tags->size()) != inputs.shape[0])
    throw std::invalid_argument("forward: sample_tags size does not match batch");
  const Plan plan = build_plan(m.input_shape, m.layers);
  const int N = inputs.shape[0];

  if (trace) {
    TraceAccess::node_in(*trace).clear();
    TraceAccess::conv_pre(*trace).assign(plan.nodes.size(), Tensor{});
    TraceAccess::pool_arg(*trace).assign(plan.nodes.size(), {});
  }

  RunBuffers buf;
  Tensor cur = inputs;
  for (size_t i = 0; i < plan.nodes.size(); ++i) {
    const Node& nd = plan.nodes[i];
    Tensor out = alloc_out(nd, N);
    Tensor* pre = nullptr;
    std::vector<int32_t>* arg = nullptr;
    if (trace) {
      if (nd.kind == LayerKind::Conv2d && nd.fused_relu) {
        TraceAccess::conv_pre(*trace)[i] = Tensor(out.shape);
        pre = &TraceAccess::conv_pre(*trace)[i];
      }
      if (nd.kind == LayerKind::MaxPool) {
        TraceAccess::pool_arg(*trace)[i].resize(size_t(N) * size_t(nd.out_size()));
        arg = &TraceAccess::pool_arg(*trace)[i];
      }
    }
    run_node(m, nd, cur, out, pre, arg, hook, tags, buf);
    if (trace) TraceAccess::node_in(*trace).push_back(std::move(cur));
    cur = std::move(out);
  }

  if (!cur.all_finite()) throw NumericalError("forward: non-finite logits");
  BatchResult res;
  res.logits = Tensor({N, plan.classes}, std::move(cur.data));
  res.probs = softmax_t_rows(res.logits, plan.temperature);
  if (trace) TraceAccess::set_outputs(*trace, res.logits, res.probs, N, m.geometry_hash());
  return res;
}

}  // namespace

ForwardResult forward(const Model& m, const Tensor& input, const FaultHook* hook,
                      uint64_t sample_tag) {
  if (input.shape != m.input_shape)
    throw std::invalid_argument("forward: input shape " + shape_str(input.shape) +
                                " does not match model input " + shape_str(m.input_shape));
  std::vector<int> bshape = input.shape;
  bshape.insert(bshape.begin(), 1);
  Tensor batched(bshape, input.data);
  std::vector<uint64_t> tags{sample_tag};
  BatchResult br = run_forward(m, batched, hook, &tags, nullptr);
  ForwardResult out;
  out.logits = Tensor({br.logits.shape[1]}, std::move(br.logits.data));
  out.probs = std::move(br.probs[0]);
  return out;
}

BatchResult forward_batch(const Model& m, const Tensor& inputs, const FaultHook* hook,
                          const std::vector<uint64_t>* sample_tags) {
  return run_forward(m, inputs, hook, sample_tags, nullptr);
}

Trace forward_trace(const Model& m, const Tensor& inputs, const FaultHook* hook,
                    const std::vector<uint64_t>* sample_tags) {
  Trace t;
  run_forward(m, inputs, hook, sample_tags, &t);
  return t;
}

Gradients backward(const Model& m, const Trace& t, const Tensor& logit_grad,
                   bool want_input_grad, bool want_param_grads) {
  const Plan plan = build_plan(m.input_shape, m.layers);
  if (TraceAccess::model_sig(t) != m.geometry_hash())
    throw std::invalid_argument("backward: trace was built for a different model geometry");
  const int N = t.batch();
  if (logit_grad.shape != std::vector<int>{N, plan.classes})
    throw std::invalid_argument("backward: logit_grad must be (batch, classes)");
  if (!logit_grad.all_finite()) throw NumericalError("backward: non-finite logit gradient");

  Gradients g;
  if (want_param_grads) {
    g.weight_grads.resize(m.layers.size());
    g.bias_grads.resize(m.layers.size());
    for (size_t i = 0; i < m.layers.size(); ++i) {
      if (m.weights[i].numel()) {
        g.weight_grads[i] = Tensor(m.weights[i].shape);
        g.bias_grads[i] = Tensor(m.biases[i].shape);
      }
    }
  }

  RunBuffers buf;
  Tensor grad = logit_grad;  // gradient w.r.t. the current node's output
  for (size_t ri = plan.nodes.size(); ri-- > 0;) {
    const Node& nd = plan.nodes[ri];
    const Tensor& x = TraceAccess::node_in(t)[ri];
    const bool need_down = want_input_grad || ri > 0;
    Tensor gin;
    if (need_down) gin = Tensor(x.shape);

    switch (nd.kind) {
      case LayerKind::Dense: {
        CMapM G(grad.data.data(), N, nd.out_dim);
        CMapM X(x.data.data(), N, nd.in_dim);
        const Tensor& w = m.weights[size_t(nd.layer)];
        CMapM W(w.data.data(), nd.out_dim, nd.in_dim);
        if (want_param_grads) {
          MapM dW(g.weight_grads[size_t(nd.layer)].data.data(), nd.out_dim, nd.in_dim);
          dW.noalias() = G.transpose() * X;
          MapV db(g.bias_grads[size_t(nd.layer)].data.data(), nd.out_dim);
          db = G.colwise().sum().transpose();
        }
        if (need_down) {
          MapM GI(gin.data.data(), N, nd.in_dim);
          GI.noalias() = G * W;
        }
        break;
      }
      case LayerKind::Relu: {
        if (need_down)
          for (int64_t i = 0; i < x.numel(); ++i) gin[i] = x[i] > 0.0 ? grad[i] : 0.0;
        break;
      }
      case LayerKind::MaxPool: {
        if (!need_down) break;
        const auto& arg = TraceAccess::pool_arg(t)[ri];
        const int64_t in_chw = nd.in_size();
        const int64_t out_chw = nd.out_size();
        for (int n = 0; n < N; ++n) {
          const int32_t* as = arg.data() + int64_t(n) * out_chw;
          const double* gs = grad.data.data() + int64_t(n) * out_chw;
          double* gi = gin.data.data() + int64_t(n) * in_chw;
          for (int64_t o = 0; o < out_chw; ++o) gi[as[o]] += gs[o];
        }
        break;
      }
      case LayerKind::Conv2d: {
        const int ckk = nd.in_c * nd.kernel * nd.kernel;
        const int ohw = nd.out_h * nd.out_w;
        const Tensor& w = m.weights[size_t(nd.layer)];
        CMapM W(w.data.data(), nd.out_c, ckk);
        buf.col.resize(size_t(ckk) * ohw);
        std::vector<double> gp(static_cast<size_t>(nd.out_c) * ohw);
        std::vector<double> gcols(need_down ? size_t(ckk) * ohw : 0);
        for (int n = 0; n < N; ++n) {
          // Straight-through at the hook: the cached (possibly corrupted)
          // output is differentiated as identity; ReLU masks on the clean
          // pre-activation sign.
          const double* gout = grad.data.data() + int64_t(n) * nd.out_size();
          if (nd.fused_relu) {
            const double* pre = TraceAccess::conv_pre(t)[ri].data.data() + int64_t(n) * nd.out_size();
            for (int64_t i = 0; i < nd.out_size(); ++i) gp[size_t(i)] = pre[i] > 0.0 ? gout[i] : 0.0;
          } else {
            std::copy_n(gout, nd.out_size(), gp.begin());
          }
          MapM GP(gp.data(), nd.out_c, ohw);
          if (want_param_grads) {
            im2col(x.data.data() + int64_t(n) * nd.in_size(), nd.in_c, nd.in_h, nd.in_w, nd.kernel,
                   nd.stride, nd.pad, nd.out_h, nd.out_w, buf.col.data());
            CMapM P(buf.col.data(), ckk, ohw);
            MapM dW(g.weight_grads[size_t(nd.layer)].data.data(), nd.out_c, ckk);
            dW.noalias() += GP * P.transpose();
            MapV db(g.bias_grads[size_t(nd.layer)].data.data(), nd.out_c);
            db += GP.rowwise().sum();
          }
          if (need_down) {
            MapM GC(gcols.data(), ckk, ohw);
            GC.noalias() = W.transpose() * GP;
            col2im_add(gcols.data(), nd.in_c, nd.in_h, nd.in_w, nd.kernel, nd.stride, nd.pad,
                       nd.out_h, nd.out_w, gin.data.data() + int64_t(n) * nd.in_size());
          }
        }
        break;
      }
      case LayerKind::SoftmaxT:
        break;
    }
    grad = std::move(gin);
  }

  if (want_input_grad) {
    if (!grad.all_finite()) throw NumericalError("backward: non-finite input gradient");
    g.input_grad = std::move(grad);
  }
  if (want_param_grads) {
    for (size_t i = 0; i < g.weight_grads.size(); ++i)
      if (g.weight_grads[i].numel() &&
          (!g.weight_grads[i].all_finite() || !g.bias_grads[i].all_finite()))
        throw NumericalError("backward: non-finite parameter gradient");
  }
  return g;
}

}  // namespace uvdef
