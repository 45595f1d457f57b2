#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfbd/io.hpp"
#include "rfbd/rng.hpp"
#include "rfbd/tensor.hpp"

namespace rfbd {

// ---------------------------------------------------------------------------
// Elementwise / reduction ops

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (T& v : y.data) v = v > T(0) ? v : T(0);
  return y;
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (T& v : x.data) v = v > T(0) ? v : T(0);
}

// dx = dy where the activation was positive. `y` is the post-activation value.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& dy, const Tensor<T>& y) {
  require_same_shape(dy, y, "relu_backward");
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.data.size(); ++i)
    if (!(y.data[i] > T(0))) dx.data[i] = T(0);
  return dx;
}

// Global average pool over the time axis. x is laid out (C, B*L); the result
// is (B, C).
template <typename T>
Tensor<T> gap_forward(const Tensor<T>& x, std::int64_t batch, std::int64_t len) {
  const std::int64_t channels = x.dim(0);
  if (x.dim(1) != batch * len) throw std::invalid_argument("gap_forward: layout mismatch");
  Tensor<T> pooled({batch, channels});
  for (std::int64_t c = 0; c < channels; ++c) {
    const T* row = x.ptr() + c * batch * len;
    for (std::int64_t b = 0; b < batch; ++b) {
      double s = 0.0;
      for (std::int64_t t = 0; t < len; ++t) s += static_cast<double>(row[b * len + t]);
      pooled(b, c) = static_cast<T>(s / static_cast<double>(len));
    }
  }
  return pooled;
}

template <typename T>
Tensor<T> gap_backward(const Tensor<T>& dpooled, std::int64_t len) {
  const std::int64_t batch = dpooled.dim(0);
  const std::int64_t channels = dpooled.dim(1);
  Tensor<T> dx({channels, batch * len});
  for (std::int64_t c = 0; c < channels; ++c) {
    T* row = dx.ptr() + c * batch * len;
    for (std::int64_t b = 0; b < batch; ++b) {
      const T g = dpooled(b, c) / static_cast<T>(len);
      for (std::int64_t t = 0; t < len; ++t) row[b * len + t] = g;
    }
  }
  return dx;
}

// Row-wise stable softmax.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw std::invalid_argument("softmax_rows: rank-2 tensor expected");
  const std::int64_t rows = x.dim(0), cols = x.dim(1);
  Tensor<T> p = x;
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = p.ptr() + r * cols;
    T mx = row[0];
    for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      row[c] = static_cast<T>(std::exp(static_cast<double>(row[c] - mx)));
      sum += static_cast<double>(row[c]);
    }
    for (std::int64_t c = 0; c < cols; ++c) row[c] = static_cast<T>(row[c] / sum);
  }
  return p;
}

// Jacobian-vector product of the row softmax: dx_i = p_i * (dp_i - <dp_i, p_i>).
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& dprobs, const Tensor<T>& probs) {
  require_same_shape(dprobs, probs, "softmax_backward");
  const std::int64_t rows = probs.dim(0), cols = probs.dim(1);
  Tensor<T> dx({rows, cols});
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* p = probs.ptr() + r * cols;
    const T* dp = dprobs.ptr() + r * cols;
    double dot = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) dot += static_cast<double>(dp[c]) * p[c];
    T* out = dx.ptr() + r * cols;
    for (std::int64_t c = 0; c < cols; ++c)
      out[c] = static_cast<T>(p[c] * (static_cast<double>(dp[c]) - dot));
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Losses (values accumulated in double)

template <typename T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;
};

// Mean over all entries of the squared difference; grad = 2 (pred - target) / N.
template <typename T>
LossResult<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred, target, "mse_loss");
  LossResult<T> r;
  r.grad = Tensor<T>(pred.shape);
  const double n = static_cast<double>(pred.numel());
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double d = static_cast<double>(pred.data[i]) - static_cast<double>(target.data[i]);
    acc += d * d;
    r.grad.data[i] = static_cast<T>(2.0 * d / n);
  }
  r.value = acc / n;
  if (!std::isfinite(r.value)) throw std::runtime_error("mse_loss: non-finite loss");
  return r;
}

template <typename T>
struct CrossEntropyResult {
  double value = 0.0;
  Tensor<T> grad;   // d loss / d logits
  Tensor<T> probs;  // row softmax of the logits
};

// Softmax cross-entropy averaged over the batch; grad = (softmax - onehot)/B.
template <typename T>
CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be (B, C)");
  const std::int64_t batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != batch)
    throw std::invalid_argument("cross_entropy: label count mismatch");
  CrossEntropyResult<T> r;
  r.probs = softmax_rows(logits);
  r.grad = r.probs;
  double acc = 0.0;
  for (std::int64_t b = 0; b < batch; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= classes) throw std::invalid_argument("cross_entropy: label out of range");
    acc -= std::log(std::max(static_cast<double>(r.probs(b, y)), 1e-300));
    r.grad(b, y) -= T(1);
  }
  for (T& v : r.grad.data) v = static_cast<T>(v / static_cast<double>(batch));
  r.value = acc / static_cast<double>(batch);
  if (!std::isfinite(r.value)) throw std::runtime_error("cross_entropy: non-finite loss");
  return r;
}

// ---------------------------------------------------------------------------
// Layers

// 1-D convolution via im2col + GEMM. Activations are laid out (C, B*L) with
// column index b*L + t; frames never bleed into each other because the edge
// guard is applied per frame.
template <typename T>
struct Conv1d {
  int c_in = 0, c_out = 0, kernel = 7, stride = 2, pad = 3;
  bool trainable = true;
  Tensor<T> w;  // (c_out, c_in*kernel)
  Tensor<T> b;  // (c_out)
  Tensor<T> gw, gb;

  // forward cache
  Tensor<T> cols;
  int batch = 0, len_in = 0, len_out = 0;

  Conv1d() = default;
  Conv1d(int in, int out, std::uint64_t seed) : c_in(in), c_out(out) {
    w = Tensor<T>({c_out, static_cast<std::int64_t>(c_in) * kernel});
    b = Tensor<T>({c_out});
    Rng rng(seed);
    const double sd = std::sqrt(2.0 / static_cast<double>(c_in * kernel));
    for (T& v : w.data) v = static_cast<T>(rng.normal(0.0, sd));
  }

  std::int64_t param_count() const { return w.numel() + b.numel(); }

  static int output_len(int len_in, int kernel, int stride, int pad) {
    return (len_in + 2 * pad - kernel) / stride + 1;
  }

  Tensor<T> forward(const Tensor<T>& x, int batch_size, int length) {
    if (x.dim(0) != c_in || x.dim(1) != static_cast<std::int64_t>(batch_size) * length)
      throw std::invalid_argument("conv1d: input layout mismatch");
    batch = batch_size;
    len_in = length;
    len_out = output_len(len_in, kernel, stride, pad);
    const std::int64_t ncols = static_cast<std::int64_t>(batch) * len_out;
    cols = Tensor<T>({static_cast<std::int64_t>(c_in) * kernel, ncols});
    for (int c = 0; c < c_in; ++c) {
      const T* src = x.ptr() + static_cast<std::int64_t>(c) * batch * len_in;
      for (int u = 0; u < kernel; ++u) {
        T* dst = cols.ptr() + (static_cast<std::int64_t>(c) * kernel + u) * ncols;
        const int shift = u - pad;
        for (int bb = 0; bb < batch; ++bb) {
          const T* frame = src + static_cast<std::int64_t>(bb) * len_in;
          T* out_row = dst + static_cast<std::int64_t>(bb) * len_out;
          for (int to = 0; to < len_out; ++to) {
            const int ti = to * stride + shift;
            out_row[to] = (ti >= 0 && ti < len_in) ? frame[ti] : T(0);
          }
        }
      }
    }
    Tensor<T> y({c_out, ncols});
    gemm<T>(false, false, c_out, ncols, static_cast<std::int64_t>(c_in) * kernel, T(1), w.ptr(),
            static_cast<std::int64_t>(c_in) * kernel, cols.ptr(), ncols, T(0), y.ptr(), ncols);
    for (int o = 0; o < c_out; ++o) {
      T* row = y.ptr() + static_cast<std::int64_t>(o) * ncols;
      const T bias = b.data[static_cast<std::size_t>(o)];
      for (std::int64_t i = 0; i < ncols; ++i) row[i] += bias;
    }
    return y;
  }

  // dy is the gradient w.r.t. the pre-activation output, (c_out, B*len_out).
  void backward(const Tensor<T>& dy, Tensor<T>* dx, bool compute_param_grads) {
    const std::int64_t ncols = static_cast<std::int64_t>(batch) * len_out;
    if (dy.dim(0) != c_out || dy.dim(1) != ncols)
      throw std::invalid_argument("conv1d backward: gradient layout mismatch");
    const std::int64_t kdim = static_cast<std::int64_t>(c_in) * kernel;
    if (compute_param_grads) {
      gw = Tensor<T>({c_out, kdim});
      gb = Tensor<T>({c_out});
      gemm<T>(false, true, c_out, kdim, ncols, T(1), dy.ptr(), ncols, cols.ptr(), ncols, T(0),
              gw.ptr(), kdim);
      for (int o = 0; o < c_out; ++o) {
        const T* row = dy.ptr() + static_cast<std::int64_t>(o) * ncols;
        double s = 0.0;
        for (std::int64_t i = 0; i < ncols; ++i) s += static_cast<double>(row[i]);
        gb.data[static_cast<std::size_t>(o)] = static_cast<T>(s);
      }
    }
    if (dx == nullptr) return;
    Tensor<T> dcols({kdim, ncols});
    gemm<T>(true, false, kdim, ncols, c_out, T(1), w.ptr(), kdim, dy.ptr(), ncols, T(0),
            dcols.ptr(), ncols);
    *dx = Tensor<T>({c_in, static_cast<std::int64_t>(batch) * len_in});
    for (int c = 0; c < c_in; ++c) {
      T* dst = dx->ptr() + static_cast<std::int64_t>(c) * batch * len_in;
      for (int u = 0; u < kernel; ++u) {
        const T* src = dcols.ptr() + (static_cast<std::int64_t>(c) * kernel + u) * ncols;
        const int shift = u - pad;
        for (int bb = 0; bb < batch; ++bb) {
          const T* in_row = src + static_cast<std::int64_t>(bb) * len_out;
          T* out_frame = dst + static_cast<std::int64_t>(bb) * len_in;
          for (int to = 0; to < len_out; ++to) {
            const int ti = to * stride + shift;
            if (ti >= 0 && ti < len_in) out_frame[ti] += in_row[to];
          }
        }
      }
    }
  }
};

template <typename T>
struct Dense {
  int in = 0, out = 0;
  bool trainable = true;
  Tensor<T> w;  // (out, in)
  Tensor<T> b;  // (out)
  Tensor<T> gw, gb;
  Tensor<T> x_cache;  // (B, in)

  Dense() = default;
  Dense(int in_dim, int out_dim, std::uint64_t seed) : in(in_dim), out(out_dim) {
    w = Tensor<T>({out, in});
    b = Tensor<T>({out});
    Rng rng(seed);
    const double sd = std::sqrt(1.0 / static_cast<double>(in));
    for (T& v : w.data) v = static_cast<T>(rng.normal(0.0, sd));
  }

  std::int64_t param_count() const { return w.numel() + b.numel(); }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.rank() != 2 || x.dim(1) != in) throw std::invalid_argument("dense: input shape mismatch");
    x_cache = x;
    const std::int64_t batch = x.dim(0);
    Tensor<T> y({batch, out});
    gemm<T>(false, true, batch, out, in, T(1), x.ptr(), in, w.ptr(), in, T(0), y.ptr(), out);
    for (std::int64_t bb = 0; bb < batch; ++bb)
      for (int o = 0; o < out; ++o) y(bb, o) += b.data[static_cast<std::size_t>(o)];
    return y;
  }

  void backward(const Tensor<T>& dy, Tensor<T>* dx, bool compute_param_grads) {
    const std::int64_t batch = x_cache.dim(0);
    if (dy.dim(0) != batch || dy.dim(1) != out)
      throw std::invalid_argument("dense backward: gradient shape mismatch");
    if (compute_param_grads) {
      gw = Tensor<T>({out, in});
      gb = Tensor<T>({out});
      gemm<T>(true, false, out, in, batch, T(1), dy.ptr(), out, x_cache.ptr(), in, T(0), gw.ptr(),
              in);
      for (std::int64_t bb = 0; bb < batch; ++bb)
        for (int o = 0; o < out; ++o)
          gb.data[static_cast<std::size_t>(o)] += dy(bb, o);
    }
    if (dx != nullptr) {
      *dx = Tensor<T>({batch, in});
      gemm<T>(false, false, batch, in, out, T(1), dy.ptr(), out, w.ptr(), in, T(0), dx->ptr(), in);
    }
  }
};

// ---------------------------------------------------------------------------
// Encoder

enum class Preset { small, medium, large, custom };

inline const char* preset_name(Preset p) {
  switch (p) {
    case Preset::small: return "small";
    case Preset::medium: return "medium";
    case Preset::large: return "large";
    default: return "custom";
  }
}

inline Preset preset_from_name(const std::string& s) {
  if (s == "small") return Preset::small;
  if (s == "medium") return Preset::medium;
  if (s == "large") return Preset::large;
  if (s == "custom") return Preset::custom;
  throw std::invalid_argument("unknown preset: " + s);
}

// Channel ladders tuned so the presets land on ~0.6M / ~1.3M / ~2.3M
// parameters with most of the weight mass in the short late stages, which
// keeps the per-frame cost low.
inline std::vector<int> preset_channels(Preset p) {
  switch (p) {
    case Preset::small: return {8, 16, 32, 64, 96, 128, 512};
    case Preset::medium: return {12, 24, 48, 96, 144, 192, 736};
    case Preset::large: return {16, 32, 64, 128, 192, 256, 960};
    default: throw std::invalid_argument("preset_channels: custom preset has no fixed ladder");
  }
}

// Feature extractor f(x): [conv1d(k=7, s=2) -> relu] x depth -> global average
// pool -> dense(rep_dim). Input is a (B, 2, W) batch; output (B, rep_dim).
template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(std::vector<int> conv_channels, int rep_dim, int input_width, std::uint64_t seed,
          Preset preset = Preset::custom)
      : channels_(std::move(conv_channels)),
        rep_dim_(rep_dim),
        input_width_(input_width),
        preset_(preset) {
    if (rep_dim_ < 1 || input_width_ < 1) throw std::invalid_argument("encoder: bad dimensions");
    int c_prev = 2;
    for (std::size_t i = 0; i < channels_.size(); ++i) {
      convs_.emplace_back(c_prev, channels_[i], derive_seed(seed, 0x434F4E56ULL /* "CONV" */, i));
      c_prev = channels_[i];
    }
    out_ = Dense<T>(c_prev, rep_dim_, derive_seed(seed, 0x44454E53ULL /* "DENS" */));
  }

  Tensor<T> forward(const Tensor<T>& batch) {
    if (batch.rank() != 3 || batch.dim(1) != 2 || batch.dim(2) != input_width_)
      throw std::invalid_argument("encoder forward: expected (B, 2, " +
                                  std::to_string(input_width_) + ") batch");
    const std::int64_t bsz = batch.dim(0);
    batch_ = static_cast<int>(bsz);
    const int w = input_width_;
    x0_ = Tensor<T>({2, bsz * w});
    for (std::int64_t bb = 0; bb < bsz; ++bb)
      for (int c = 0; c < 2; ++c)
        std::copy_n(batch.ptr() + (bb * 2 + c) * w, w, x0_.ptr() + c * bsz * w + bb * w);
    lens_.assign(1, w);
    acts_.resize(convs_.size());
    const Tensor<T>* cur = &x0_;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      acts_[i] = convs_[i].forward(*cur, batch_, lens_.back());
      relu_inplace(acts_[i]);
      lens_.push_back(convs_[i].len_out);
      cur = &acts_[i];
    }
    pooled_ = gap_forward(*cur, bsz, lens_.back());
    Tensor<T> reps = out_.forward(pooled_);
    if (!reps.all_finite()) throw std::runtime_error("encoder forward: non-finite representation");
    have_forward_ = true;
    return reps;
  }

  // Accumulates parameter gradients for all trainable layers. Propagation
  // stops below the earliest layer that still needs a gradient unless a full
  // input gradient is requested.
  void backward(const Tensor<T>& dreps, Tensor<T>* dinput = nullptr) {
    if (!have_forward_) throw std::logic_error("encoder backward: no forward pass recorded");
    int lowest = static_cast<int>(convs_.size());  // lowest conv index needing param grads
    for (int i = 0; i < static_cast<int>(convs_.size()); ++i)
      if (convs_[static_cast<std::size_t>(i)].trainable) {
        lowest = i;
        break;
      }
    const bool need_below_dense = dinput != nullptr || lowest < static_cast<int>(convs_.size());
    Tensor<T> dpooled;
    out_.backward(dreps, need_below_dense ? &dpooled : nullptr, out_.trainable);
    if (!need_below_dense) return;
    Tensor<T> dact = gap_backward(dpooled, lens_.back());
    for (int i = static_cast<int>(convs_.size()) - 1; i >= 0; --i) {
      auto& conv = convs_[static_cast<std::size_t>(i)];
      // Mask with the stored post-activation; dact becomes the pre-activation grad.
      const Tensor<T>& act = acts_[static_cast<std::size_t>(i)];
      for (std::size_t j = 0; j < dact.data.size(); ++j)
        if (!(act.data[j] > T(0))) dact.data[j] = T(0);
      const bool need_dx = dinput != nullptr || i > lowest;
      Tensor<T> dx;
      conv.backward(dact, need_dx ? &dx : nullptr, conv.trainable);
      if (!need_dx) return;
      dact = std::move(dx);
    }
    if (dinput != nullptr) {
      const std::int64_t bsz = batch_;
      const int w = input_width_;
      *dinput = Tensor<T>({bsz, 2, w});
      for (std::int64_t bb = 0; bb < bsz; ++bb)
        for (int c = 0; c < 2; ++c)
          std::copy_n(dact.ptr() + c * bsz * w + bb * w, w, dinput->ptr() + (bb * 2 + c) * w);
    }
  }

  int num_layers() const { return static_cast<int>(convs_.size()) + 1; }

  bool layer_trainable(int i) const {
    return i < static_cast<int>(convs_.size()) ? convs_[static_cast<std::size_t>(i)].trainable
                                               : out_.trainable;
  }
  void set_layer_trainable(int i, bool t) {
    if (i < static_cast<int>(convs_.size()))
      convs_[static_cast<std::size_t>(i)].trainable = t;
    else
      out_.trainable = t;
  }

  std::vector<Tensor<T>*> params() {
    std::vector<Tensor<T>*> p;
    for (auto& c : convs_) {
      p.push_back(&c.w);
      p.push_back(&c.b);
    }
    p.push_back(&out_.w);
    p.push_back(&out_.b);
    return p;
  }
  std::vector<Tensor<T>*> grads() {
    std::vector<Tensor<T>*> g;
    for (auto& c : convs_) {
      g.push_back(&c.gw);
      g.push_back(&c.gb);
    }
    g.push_back(&out_.gw);
    g.push_back(&out_.gb);
    return g;
  }
  std::vector<bool> trainable_mask() const {
    std::vector<bool> m;
    for (const auto& c : convs_) {
      m.push_back(c.trainable);
      m.push_back(c.trainable);
    }
    m.push_back(out_.trainable);
    m.push_back(out_.trainable);
    return m;
  }

  std::int64_t param_count() const {
    std::int64_t n = out_.param_count();
    for (const auto& c : convs_) n += c.param_count();
    return n;
  }

  const std::vector<int>& conv_channels() const { return channels_; }
  int rep_dim() const { return rep_dim_; }
  int input_width() const { return input_width_; }
  Preset preset() const { return preset_; }

  std::vector<Conv1d<T>>& convs() { return convs_; }
  const std::vector<Conv1d<T>>& convs() const { return convs_; }
  Dense<T>& output_layer() { return out_; }
  const Dense<T>& output_layer() const { return out_; }

 private:
  std::vector<int> channels_;
  int rep_dim_ = 0;
  int input_width_ = 0;
  Preset preset_ = Preset::custom;
  std::vector<Conv1d<T>> convs_;
  Dense<T> out_;

  // forward caches
  int batch_ = 0;
  bool have_forward_ = false;
  Tensor<T> x0_;
  std::vector<Tensor<T>> acts_;
  std::vector<int> lens_;
  Tensor<T> pooled_;
};

inline Encoder<float> make_encoder(Preset p, int rep_dim, int input_width, std::uint64_t seed) {
  return Encoder<float>(preset_channels(p), rep_dim, input_width, seed, p);
}

template <typename T>
bool same_parameters(const Encoder<T>& a, const Encoder<T>& b) {
  if (a.conv_channels() != b.conv_channels() || a.rep_dim() != b.rep_dim()) return false;
  for (std::size_t i = 0; i < a.convs().size(); ++i)
    if (a.convs()[i].w.data != b.convs()[i].w.data || a.convs()[i].b.data != b.convs()[i].b.data)
      return false;
  return a.output_layer().w.data == b.output_layer().w.data &&
         a.output_layer().b.data == b.output_layer().b.data;
}

// Downstream linear classifier y = W_c f(x) + B_c.
template <typename T>
struct ClassifierHead {
  Dense<T> fc;

  ClassifierHead() = default;
  ClassifierHead(int rep_dim, int classes, std::uint64_t seed) : fc(rep_dim, classes, seed) {}

  int classes() const { return fc.out; }
  int rep_dim() const { return fc.in; }
  Tensor<T> forward(const Tensor<T>& reps) { return fc.forward(reps); }
};

// ---------------------------------------------------------------------------
// Optimizers

enum class OptKind { sgd, adam };

inline OptKind opt_from_name(const std::string& s) {
  if (s == "sgd") return OptKind::sgd;
  if (s == "adam") return OptKind::adam;
  throw std::invalid_argument("unknown optimizer: " + s);
}

// SGD or Adam with the standard moment defaults and optional decoupled
// weight decay. Moment state is kept in double and indexed by parameter
// position, so the parameter list must be stable across calls.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptKind kind, double lr, double weight_decay = 0.0)
      : kind_(kind), lr_(lr), weight_decay_(weight_decay) {}

  void step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>*>& grads,
            const std::vector<bool>& trainable = {}) {
    if (params.size() != grads.size()) throw std::invalid_argument("optimizer: list size mismatch");
    if (!trainable.empty() && trainable.size() != params.size())
      throw std::invalid_argument("optimizer: mask size mismatch");
    ++t_;
    if (kind_ == OptKind::adam && m_.size() != params.size()) {
      m_.assign(params.size(), {});
      v_.assign(params.size(), {});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!trainable.empty() && !trainable[i]) continue;
      Tensor<T>& p = *params[i];
      const Tensor<T>& g = *grads[i];
      if (g.numel() != p.numel()) throw std::invalid_argument("optimizer: grad size mismatch");
      if (weight_decay_ > 0.0) {
        const T keep = static_cast<T>(1.0 - lr_ * weight_decay_);
        for (T& v : p.data) v *= keep;
      }
      if (kind_ == OptKind::sgd) {
        for (std::size_t j = 0; j < p.data.size(); ++j)
          p.data[j] -= static_cast<T>(lr_ * static_cast<double>(g.data[j]));
      } else {
        auto& m = m_[i];
        auto& v = v_[i];
        if (m.empty()) {
          m.assign(p.data.size(), 0.0);
          v.assign(p.data.size(), 0.0);
        }
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t j = 0; j < p.data.size(); ++j) {
          const double gj = static_cast<double>(g.data[j]);
          m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
          v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
          const double mh = m[j] / bc1;
          const double vh = v[j] / bc2;
          p.data[j] -= static_cast<T>(lr_ * mh / (std::sqrt(vh) + eps_));
        }
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  OptKind kind_;
  double lr_;
  double weight_decay_ = 0.0;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Leaves only the last ceil(rate * num_layers) parameterized layers trainable.
template <typename T>
void freeze_fraction(Encoder<T>& model, double rate) {
  if (!(rate >= 0.0) || rate > 1.0)
    throw std::invalid_argument("freeze_fraction: rate must be in [0, 1]");
  const int n = model.num_layers();
  const int unfrozen = static_cast<int>(std::ceil(rate * n - 1e-9));
  for (int i = 0; i < n; ++i) model.set_layer_trainable(i, i >= n - unfrozen);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace detail {

inline nlohmann::json layer_entry(const std::string& name, const std::vector<std::int64_t>& shape) {
  return nlohmann::json{{"name", name}, {"shape", shape}};
}

}  // namespace detail

inline void save_encoder(const Encoder<float>& enc, const std::string& path,
                         const std::string& config_hash = "") {
  nlohmann::json meta;
  meta["kind"] = "encoder";
  meta["preset"] = preset_name(enc.preset());
  meta["rep_dim"] = enc.rep_dim();
  meta["input_width"] = enc.input_width();
  meta["conv_channels"] = enc.conv_channels();
  if (!config_hash.empty()) meta["config_hash"] = config_hash;
  nlohmann::json manifest = nlohmann::json::array();
  std::vector<float> payload;
  auto push = [&](const std::string& name, const Tensor<float>& t) {
    manifest.push_back(detail::layer_entry(name, t.shape));
    payload.insert(payload.end(), t.data.begin(), t.data.end());
  };
  for (std::size_t i = 0; i < enc.convs().size(); ++i) {
    push("conv" + std::to_string(i) + ".weight", enc.convs()[i].w);
    push("conv" + std::to_string(i) + ".bias", enc.convs()[i].b);
  }
  push("output.weight", enc.output_layer().w);
  push("output.bias", enc.output_layer().b);
  meta["layers"] = manifest;
  write_container(path, kMagicCheckpoint, meta, payload.data(), payload.size());
}

inline Encoder<float> load_encoder(const std::string& path) {
  const Container c = read_container(path, kMagicCheckpoint);
  if (c.meta.at("kind").get<std::string>() != "encoder")
    throw std::runtime_error("checkpoint is not an encoder: " + path);
  Encoder<float> enc(c.meta.at("conv_channels").get<std::vector<int>>(),
                     c.meta.at("rep_dim").get<int>(), c.meta.at("input_width").get<int>(), 0,
                     preset_from_name(c.meta.at("preset").get<std::string>()));
  std::size_t off = 0;
  auto pull = [&](Tensor<float>& t) {
    if (off + t.data.size() > c.payload.size())
      throw std::runtime_error("checkpoint payload too short: " + path);
    std::copy_n(c.payload.begin() + static_cast<std::ptrdiff_t>(off), t.data.size(),
                t.data.begin());
    off += t.data.size();
  };
  for (auto& conv : enc.convs()) {
    pull(conv.w);
    pull(conv.b);
  }
  pull(enc.output_layer().w);
  pull(enc.output_layer().b);
  if (off != c.payload.size()) throw std::runtime_error("checkpoint payload too long: " + path);
  return enc;
}

inline void save_head(const ClassifierHead<float>& head, const std::string& path,
                      const std::string& config_hash = "") {
  nlohmann::json meta;
  meta["kind"] = "head";
  meta["rep_dim"] = head.fc.in;
  meta["classes"] = head.fc.out;
  if (!config_hash.empty()) meta["config_hash"] = config_hash;
  meta["layers"] = nlohmann::json::array({detail::layer_entry("fc.weight", head.fc.w.shape),
                                          detail::layer_entry("fc.bias", head.fc.b.shape)});
  std::vector<float> payload;
  payload.insert(payload.end(), head.fc.w.data.begin(), head.fc.w.data.end());
  payload.insert(payload.end(), head.fc.b.data.begin(), head.fc.b.data.end());
  write_container(path, kMagicCheckpoint, meta, payload.data(), payload.size());
}

inline ClassifierHead<float> load_head(const std::string& path) {
  const Container c = read_container(path, kMagicCheckpoint);
  if (c.meta.at("kind").get<std::string>() != "head")
    throw std::runtime_error("checkpoint is not a head: " + path);
  ClassifierHead<float> head(c.meta.at("rep_dim").get<int>(), c.meta.at("classes").get<int>(), 0);
  const std::size_t nw = head.fc.w.data.size(), nb = head.fc.b.data.size();
  if (c.payload.size() != nw + nb) throw std::runtime_error("head payload size mismatch: " + path);
  std::copy_n(c.payload.begin(), nw, head.fc.w.data.begin());
  std::copy_n(c.payload.begin() + static_cast<std::ptrdiff_t>(nw), nb, head.fc.b.data.begin());
  return head;
}

}  // namespace rfbd
