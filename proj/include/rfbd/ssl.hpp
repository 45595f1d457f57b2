#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "rfbd/encode.hpp"
#include "rfbd/nn.hpp"
#include "rfbd/signal.hpp"

namespace rfbd {

// View augmentations for contrastive pre-training, applied in the order
// circular-time-shift -> amplitude-scale -> joint I/Q rotation -> jitter,
// then renormalized to unit power. An all-identity config returns the frame
// untouched.
struct AugmentationConfig {
  int time_shift_max = 0;     // samples, 0 disables
  double jitter_sigma = 0.3;  // additive noise std, 0 disables
  double scale_low = 0.9;
  double scale_high = 1.1;
  bool phase_rotation = false;
};

inline void validate_augmentation(const AugmentationConfig& cfg) {
  if (!(cfg.scale_low > 0.0) || !(cfg.scale_high > 0.0) || cfg.scale_low > cfg.scale_high)
    throw std::invalid_argument("augmentation: scale range must satisfy 0 < low <= high");
  if (cfg.time_shift_max < 0 || cfg.jitter_sigma < 0)
    throw std::invalid_argument("augmentation: negative parameter");
}

inline void circular_shift(IQFrame& f, int shift) {
  const int w = f.width;
  shift = ((shift % w) + w) % w;
  if (shift == 0) return;
  std::rotate(f.data.begin(), f.data.begin() + (w - shift), f.data.begin() + w);
  std::rotate(f.data.begin() + w, f.data.begin() + w + (w - shift), f.data.end());
}

// Joint rotation of the I/Q plane by theta.
inline void rotate_iq(IQFrame& f, double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  for (int k = 0; k < f.width; ++k) {
    const double vi = f.i(k), vq = f.q(k);
    f.i(k) = c * vi - s * vq;
    f.q(k) = s * vi + c * vq;
  }
}

inline IQFrame augment(const IQFrame& frame, const AugmentationConfig& cfg, Rng& rng) {
  if (frame.domain != Domain::time)
    throw std::invalid_argument("augment: time-domain frames only");
  validate_augmentation(cfg);
  IQFrame out = frame;
  bool modified = false;
  if (cfg.time_shift_max > 0) {
    const int s = static_cast<int>(rng.uniform_int(2 * cfg.time_shift_max + 1)) - cfg.time_shift_max;
    if (s != 0) {
      circular_shift(out, s);
      modified = true;
    }
  }
  if (cfg.scale_low != 1.0 || cfg.scale_high != 1.0) {
    const double g = rng.uniform(cfg.scale_low, cfg.scale_high);
    for (double& v : out.data) v *= g;
    modified = true;
  }
  if (cfg.phase_rotation) {
    rotate_iq(out, rng.uniform(0.0, 2.0 * std::numbers::pi));
    modified = true;
  }
  if (cfg.jitter_sigma > 0.0) {
    for (double& v : out.data) v += rng.normal(0.0, cfg.jitter_sigma);
    modified = true;
  }
  if (modified) normalize_power(out);
  return out;
}

// ---------------------------------------------------------------------------
// NT-Xent

// Normalized-temperature cross-entropy over 2K interleaved views: rows 2i and
// 2i+1 are the two views of sample i. Each anchor is scored by -log softmax
// over the other 2K-1 rows, with its partner as the positive; cosine
// similarity throughout. The working precision is double regardless of T.
template <typename T>
LossResult<T> nt_xent_loss(const Tensor<T>& reps, double tau) {
  if (reps.rank() != 2) throw std::invalid_argument("nt_xent: reps must be (2K, D)");
  const std::int64_t n = reps.dim(0), d = reps.dim(1);
  if (n < 4 || n % 2 != 0)
    throw std::invalid_argument("nt_xent: need at least two pairs (2K >= 4, even)");
  if (!(tau > 0.0)) throw std::invalid_argument("nt_xent: temperature must be positive");

  std::vector<double> z(static_cast<std::size_t>(n * d));
  std::vector<double> norms(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double v = static_cast<double>(reps(i, j));
      s += v * v;
    }
    const double nrm = std::sqrt(s) + 1e-12;
    norms[static_cast<std::size_t>(i)] = nrm;
    for (std::int64_t j = 0; j < d; ++j)
      z[static_cast<std::size_t>(i * d + j)] = static_cast<double>(reps(i, j)) / nrm;
  }

  std::vector<double> sim(static_cast<std::size_t>(n * n));
  gemm<double>(false, true, n, n, d, 1.0, z.data(), d, z.data(), d, 0.0, sim.data(), n);

  // dL/dS as read by each anchor row.
  std::vector<double> gs(static_cast<std::size_t>(n * n), 0.0);
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t partner = i ^ 1;
    const double* srow = sim.data() + i * n;
    double mx = -1e300;
    for (std::int64_t k = 0; k < n; ++k)
      if (k != i) mx = std::max(mx, srow[k] / tau);
    double denom = 0.0;
    for (std::int64_t k = 0; k < n; ++k)
      if (k != i) denom += std::exp(srow[k] / tau - mx);
    const double lse = mx + std::log(denom);
    loss += lse - srow[partner] / tau;
    double* grow = gs.data() + i * n;
    for (std::int64_t k = 0; k < n; ++k)
      if (k != i) grow[k] = std::exp(srow[k] / tau - lse) / (tau * static_cast<double>(n));
    grow[partner] -= 1.0 / (tau * static_cast<double>(n));
  }
  loss /= static_cast<double>(n);

  // dL/dZ = (G + G^T) Z, then back through the row normalization.
  std::vector<double> gsym(static_cast<std::size_t>(n * n));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < n; ++k)
      gsym[static_cast<std::size_t>(i * n + k)] =
          gs[static_cast<std::size_t>(i * n + k)] + gs[static_cast<std::size_t>(k * n + i)];
  std::vector<double> dz(static_cast<std::size_t>(n * d));
  gemm<double>(false, false, n, d, n, 1.0, gsym.data(), n, z.data(), d, 0.0, dz.data(), d);

  LossResult<T> r;
  r.value = loss;
  r.grad = Tensor<T>(reps.shape);
  for (std::int64_t i = 0; i < n; ++i) {
    const double* zi = z.data() + i * d;
    const double* gi = dz.data() + i * d;
    double dot = 0.0;
    for (std::int64_t j = 0; j < d; ++j) dot += gi[j] * zi[j];
    for (std::int64_t j = 0; j < d; ++j)
      r.grad(i, j) = static_cast<T>((gi[j] - dot * zi[j]) / norms[static_cast<std::size_t>(i)]);
  }
  if (!std::isfinite(r.value)) throw std::runtime_error("nt_xent: non-finite loss");
  return r;
}

// ---------------------------------------------------------------------------
// Pre-training

struct PretrainConfig {
  int batch_size = 64;  // K; each step sees 2K views
  double temperature = 0.2;
  int epochs = 30;
  double lr = 3e-4;
  double weight_decay = 1e-4;
  bool projection_head = true;  // contrast on a discarded MLP projection
  int restart_period = 5;       // reset optimizer + projector every N epochs; 0 disables
};

inline void validate_pretrain(const PretrainConfig& cfg) {
  if (cfg.batch_size < 2) throw std::invalid_argument("pretrain: batch_size must be >= 2");
  if (!(cfg.temperature > 0.0)) throw std::invalid_argument("pretrain: temperature must be > 0");
  if (cfg.epochs < 0 || !(cfg.lr > 0.0)) throw std::invalid_argument("pretrain: bad epochs or lr");
  if (cfg.weight_decay < 0.0) throw std::invalid_argument("pretrain: negative weight decay");
  if (cfg.restart_period < 0) throw std::invalid_argument("pretrain: negative restart period");
}

// Contrastive pre-training over unlabeled frames (labels are ignored).
// The loss is computed on a two-layer MLP projection of the representation;
// the projector is training scaffolding and is dropped afterwards, leaving
// the encoder output as the downstream-facing representation. Every
// restart_period epochs the optimizer state and the projector are
// re-initialized: the warm restarts keep instance-specific detail from
// accumulating in the backbone, which measurably improves linear probes on
// device identity.
// Returns the mean NT-Xent loss per epoch. Training mutates the encoder.
inline std::vector<double> pretrain(Encoder<float>& enc,
                                    const std::vector<const IQFrame*>& frames,
                                    const PretrainConfig& cfg, const AugmentationConfig& aug,
                                    std::uint64_t seed, Domain domain = Domain::time) {
  validate_pretrain(cfg);
  validate_augmentation(aug);
  if (frames.empty()) throw std::invalid_argument("pretrain: empty dataset");
  const int d = enc.rep_dim();
  Dense<float> proj_hidden(d, d, derive_seed(seed, 0x50524F4AULL /* "PROJ" */, 1));
  Dense<float> proj_out(d, d, derive_seed(seed, 0x50524F4AULL, 2));
  Optimizer<float> opt(OptKind::adam, cfg.lr, cfg.weight_decay);
  auto params = enc.params();
  auto mask = enc.trainable_mask();
  if (cfg.projection_head) {
    for (Tensor<float>* t : {&proj_hidden.w, &proj_hidden.b, &proj_out.w, &proj_out.b})
      params.push_back(t);
    mask.insert(mask.end(), 4, true);
  }
  std::vector<double> epoch_losses;
  std::vector<std::size_t> order(frames.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.restart_period > 0 && epoch > 0 && epoch % cfg.restart_period == 0) {
      opt = Optimizer<float>(OptKind::adam, cfg.lr, cfg.weight_decay);
      if (cfg.projection_head) {
        const std::uint64_t restart = static_cast<std::uint64_t>(epoch / cfg.restart_period);
        proj_hidden = Dense<float>(d, d, derive_seed(seed, 0x50524F4AULL, 1 + 2 * restart));
        proj_out = Dense<float>(d, d, derive_seed(seed, 0x50524F4AULL, 2 + 2 * restart));
      }
    }
    Rng shuffle_rng(derive_seed(seed, 0x4F524452ULL /* "ORDR" */, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double loss_sum = 0.0;
    std::int64_t view_count = 0;
    for (std::size_t pos = 0; pos < order.size();) {
      const std::size_t k = std::min<std::size_t>(cfg.batch_size, order.size() - pos);
      if (k < 2) break;  // a lone leftover sample has no negatives
      std::vector<IQFrame> views;
      views.reserve(2 * k);
      for (std::size_t b = 0; b < k; ++b) {
        const std::size_t idx = order[pos + b];
        for (int view = 0; view < 2; ++view) {
          Rng rng(derive_seed(seed, static_cast<std::uint64_t>(epoch),
                              static_cast<std::uint64_t>(idx), static_cast<std::uint64_t>(view)));
          views.push_back(augment(*frames[idx], aug, rng));
        }
      }
      std::vector<const IQFrame*> ptrs;
      ptrs.reserve(views.size());
      for (const auto& v : views) ptrs.push_back(&v);
      const Tensor<float> reps = enc.forward(make_batch(ptrs, domain));
      double loss_value = 0.0;
      if (cfg.projection_head) {
        Tensor<float> hidden = proj_hidden.forward(reps);
        relu_inplace(hidden);
        const Tensor<float> z = proj_out.forward(hidden);
        const LossResult<float> loss = nt_xent_loss(z, cfg.temperature);
        loss_value = loss.value;
        Tensor<float> dhidden;
        proj_out.backward(loss.grad, &dhidden, true);
        const Tensor<float> dhidden_masked = relu_backward(dhidden, hidden);
        Tensor<float> dreps;
        proj_hidden.backward(dhidden_masked, &dreps, true);
        enc.backward(dreps);
      } else {
        const LossResult<float> loss = nt_xent_loss(reps, cfg.temperature);
        loss_value = loss.value;
        enc.backward(loss.grad);
      }
      auto grads = enc.grads();
      if (cfg.projection_head)
        for (Tensor<float>* t : {&proj_hidden.gw, &proj_hidden.gb, &proj_out.gw, &proj_out.gb})
          grads.push_back(t);
      opt.step(params, grads, mask);
      loss_sum += loss_value * static_cast<double>(2 * k);
      view_count += static_cast<std::int64_t>(2 * k);
      pos += k;
    }
    epoch_losses.push_back(view_count > 0 ? loss_sum / static_cast<double>(view_count) : 0.0);
  }
  return epoch_losses;
}

}  // namespace rfbd
