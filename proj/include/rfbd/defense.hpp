#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "rfbd/eval.hpp"

namespace rfbd {

// ---------------------------------------------------------------------------
// Fine-tuning defense

struct FinetuneResult {
  Encoder<float> encoder;
  ClassifierHead<float> head;  // auxiliary head trained jointly during defense
};

// The victim-side mitigation: unfreeze the last ceil(rate * num_layers)
// encoder layers and train them jointly with a fresh classifier head by
// cross-entropy on clean labeled downstream data. rate = 0 leaves the encoder
// parameters bitwise untouched.
inline FinetuneResult finetune_defense(const Encoder<float>& encoder,
                                       const std::vector<const IQFrame*>& frames, int num_classes,
                                       double rate, int epochs, double lr, std::uint64_t seed,
                                       Domain domain = Domain::time, int batch_size = 64) {
  if (frames.empty()) throw std::invalid_argument("finetune_defense: empty dataset");
  if (!(rate >= 0.0) || rate > 1.0)
    throw std::invalid_argument("finetune_defense: rate must be in [0, 1]");
  FinetuneResult r{encoder, ClassifierHead<float>(encoder.rep_dim(), num_classes,
                                                  derive_seed(seed, 0x46544844ULL /* "FTHD" */))};
  freeze_fraction(r.encoder, rate);
  std::vector<int> labels;
  labels.reserve(frames.size());
  for (const auto* f : frames) {
    if (f->device_id < 0 || f->device_id >= num_classes)
      throw std::invalid_argument("finetune_defense: device id outside class range");
    labels.push_back(f->device_id);
  }

  bool any_encoder_layer = false;
  for (int i = 0; i < r.encoder.num_layers(); ++i) any_encoder_layer |= r.encoder.layer_trainable(i);

  if (!any_encoder_layer) {
    // Frozen encoder: equivalent to plain downstream head training.
    DownstreamConfig cfg;
    cfg.epochs = epochs;
    cfg.lr = lr;
    cfg.batch_size = batch_size;
    const Tensor<float> reps = encode_frames(r.encoder, frames, domain);
    r.head = train_head_on_reps(reps, labels, num_classes, cfg, seed);
    return r;
  }

  Optimizer<float> opt(OptKind::adam, lr);
  std::vector<Tensor<float>*> params = r.encoder.params();
  std::vector<Tensor<float>*> grad_ptrs;  // filled per step
  std::vector<bool> mask = r.encoder.trainable_mask();
  params.push_back(&r.head.fc.w);
  params.push_back(&r.head.fc.b);
  mask.push_back(true);
  mask.push_back(true);

  std::vector<IQFrame> inputs;
  inputs.reserve(frames.size());
  for (const auto* f : frames) inputs.push_back(to_model_input(*f, domain));

  std::vector<std::size_t> order(frames.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng rng(derive_seed(seed, 0x46544E45ULL /* "FTNE" */, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(batch_size)) {
      const std::size_t bsz = std::min<std::size_t>(batch_size, order.size() - pos);
      std::vector<const IQFrame*> ptrs(bsz);
      std::vector<int> y(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        ptrs[b] = &inputs[order[pos + b]];
        y[b] = labels[order[pos + b]];
      }
      const Tensor<float> reps = r.encoder.forward(make_batch(ptrs, domain));
      const Tensor<float> logits = r.head.fc.forward(reps);
      const CrossEntropyResult<float> ce = cross_entropy(logits, y);
      Tensor<float> dreps;
      r.head.fc.backward(ce.grad, &dreps, true);
      r.encoder.backward(dreps);
      grad_ptrs = r.encoder.grads();
      grad_ptrs.push_back(&r.head.fc.gw);
      grad_ptrs.push_back(&r.head.fc.gb);
      opt.step(params, grad_ptrs, mask);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// STRIP

// Blends a suspect frame with random benign frames and reports the mean
// softmax prediction entropy in nats. A backdoored pipeline keeps predicting
// the trigger's class through the blend, so its entropy collapses.
inline double strip_entropy(ClassifierHead<float>& head, Encoder<float>& encoder,
                            const IQFrame& suspect, const std::vector<const IQFrame*>& pool,
                            int n_overlays, Rng& rng, Domain domain = Domain::time) {
  if (n_overlays < 1) throw std::invalid_argument("strip_entropy: n_overlays must be >= 1");
  if (pool.empty()) throw std::invalid_argument("strip_entropy: empty benign pool");
  std::vector<IQFrame> blends;
  blends.reserve(static_cast<std::size_t>(n_overlays));
  for (int i = 0; i < n_overlays; ++i) {
    const IQFrame& b = *pool[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(pool.size())))];
    IQFrame blend = suspect;
    for (std::size_t k = 0; k < blend.data.size(); ++k)
      blend.data[k] = 0.5 * blend.data[k] + 0.5 * b.data[k];
    blends.push_back(std::move(blend));
  }
  const Tensor<float> reps = encode_frames(encoder, frame_ptrs(blends), domain);
  Tensor<float> logits = head.forward(reps);
  const Tensor<float> probs = softmax_rows(logits);
  const std::int64_t n = probs.dim(0), c = probs.dim(1);
  double total = 0.0;
  for (std::int64_t r = 0; r < n; ++r) {
    double h = 0.0;
    for (std::int64_t k = 0; k < c; ++k) {
      const double p = static_cast<double>(probs(r, k));
      if (p > 0.0) h -= p * std::log(p);
    }
    total += h;
  }
  return total / static_cast<double>(n);
}

struct StripReport {
  double mean_entropy_clean_ptm = 0.0;       // nats
  double mean_entropy_backdoored_ptm = 0.0;  // nats
  double difference = 0.0;                   // backdoored - clean, nats
};

// Mean STRIP entropy over a set of suspect frames for the clean and the
// backdoored pipeline, with paired overlay draws.
inline StripReport strip_report(ClassifierHead<float>& clean_head, Encoder<float>& clean_encoder,
                                ClassifierHead<float>& backdoored_head,
                                Encoder<float>& backdoored_encoder,
                                const std::vector<const IQFrame*>& suspects,
                                const std::vector<const IQFrame*>& pool, int n_overlays,
                                std::uint64_t seed, Domain domain = Domain::time) {
  if (suspects.empty()) throw std::invalid_argument("strip_report: no suspect frames");
  StripReport rep;
  for (std::size_t i = 0; i < suspects.size(); ++i) {
    Rng rng_clean(derive_seed(seed, 0x53545250ULL /* "STRP" */, i));
    Rng rng_bd(derive_seed(seed, 0x53545250ULL, i));
    rep.mean_entropy_clean_ptm +=
        strip_entropy(clean_head, clean_encoder, *suspects[i], pool, n_overlays, rng_clean, domain);
    rep.mean_entropy_backdoored_ptm += strip_entropy(backdoored_head, backdoored_encoder,
                                                     *suspects[i], pool, n_overlays, rng_bd, domain);
  }
  rep.mean_entropy_clean_ptm /= static_cast<double>(suspects.size());
  rep.mean_entropy_backdoored_ptm /= static_cast<double>(suspects.size());
  rep.difference = rep.mean_entropy_backdoored_ptm - rep.mean_entropy_clean_ptm;
  return rep;
}

// ---------------------------------------------------------------------------
// Isolation forest

// Standard isolation forest on flattened frames: random feature, uniform
// split between the feature's min and max, depth capped at ceil(log2 psi).
// Scores follow s(x) = 2^(-E[h(x)] / c(psi)).
class IsolationForest {
 public:
  IsolationForest(int num_trees, int subsample, std::uint64_t seed)
      : num_trees_(num_trees), psi_(subsample), seed_(seed) {
    if (num_trees < 1 || subsample < 2)
      throw std::invalid_argument("isolation_forest: need >= 1 tree and subsample >= 2");
  }

  void fit(const Tensor<float>& data) {
    const std::int64_t n = data.dim(0);
    dim_ = data.dim(1);
    if (psi_ > n) throw std::invalid_argument("isolation_forest: subsample larger than dataset");
    max_depth_ = static_cast<int>(std::ceil(std::log2(static_cast<double>(psi_))));
    trees_.assign(static_cast<std::size_t>(num_trees_), {});
    std::vector<std::int64_t> all(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::int64_t>(i);
    for (int t = 0; t < num_trees_; ++t) {
      Rng rng(derive_seed(seed_, 0x49464F52ULL /* "IFOR" */, static_cast<std::uint64_t>(t)));
      std::vector<std::int64_t> sample = all;
      std::shuffle(sample.begin(), sample.end(), rng.engine());
      sample.resize(static_cast<std::size_t>(psi_));
      build(trees_[static_cast<std::size_t>(t)], data, sample, 0, rng);
    }
  }

  double score(const float* x) const {
    if (trees_.empty()) throw std::logic_error("isolation_forest: score before fit");
    double h = 0.0;
    for (const auto& tree : trees_) h += path_length(tree, x);
    h /= static_cast<double>(trees_.size());
    return std::pow(2.0, -h / avg_path_len(static_cast<double>(psi_)));
  }

  std::vector<double> scores(const Tensor<float>& data) const {
    std::vector<double> out(static_cast<std::size_t>(data.dim(0)));
    for (std::int64_t i = 0; i < data.dim(0); ++i)
      out[static_cast<std::size_t>(i)] = score(data.ptr() + i * dim_);
    return out;
  }

  // Fraction of points whose anomaly score exceeds the threshold.
  double anomaly_rate(const Tensor<float>& data, double threshold = 0.5) const {
    const auto s = scores(data);
    std::size_t flagged = 0;
    for (double v : s)
      if (v > threshold) ++flagged;
    return static_cast<double>(flagged) / static_cast<double>(s.size());
  }

  // c(n): expected path length of an unsuccessful BST search over n points.
  static double avg_path_len(double n) {
    if (n <= 1.0) return 0.0;
    if (n <= 2.0) return 1.0;
    const double euler = 0.5772156649015329;
    return 2.0 * (std::log(n - 1.0) + euler) - 2.0 * (n - 1.0) / n;
  }

 private:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    float split = 0.0f;
    int left = -1, right = -1;
    std::int64_t size = 0;
  };
  using Tree = std::vector<Node>;

  int build(Tree& tree, const Tensor<float>& data, std::vector<std::int64_t>& idx, int depth,
            Rng& rng) {
    const int node_id = static_cast<int>(tree.size());
    tree.push_back({});
    tree[static_cast<std::size_t>(node_id)].size = static_cast<std::int64_t>(idx.size());
    if (idx.size() <= 1 || depth >= max_depth_) return node_id;
    const int f = static_cast<int>(rng.uniform_int(dim_));
    float lo = data(idx[0], f), hi = lo;
    for (std::int64_t i : idx) {
      lo = std::min(lo, data(i, f));
      hi = std::max(hi, data(i, f));
    }
    if (!(hi > lo)) return node_id;  // constant feature: isolation stalls here
    const float split = static_cast<float>(rng.uniform(lo, hi));
    std::vector<std::int64_t> left_idx, right_idx;
    for (std::int64_t i : idx)
      (data(i, f) < split ? left_idx : right_idx).push_back(i);
    if (left_idx.empty() || right_idx.empty()) return node_id;
    tree[static_cast<std::size_t>(node_id)].feature = f;
    tree[static_cast<std::size_t>(node_id)].split = split;
    const int l = build(tree, data, left_idx, depth + 1, rng);
    tree[static_cast<std::size_t>(node_id)].left = l;
    const int r = build(tree, data, right_idx, depth + 1, rng);
    tree[static_cast<std::size_t>(node_id)].right = r;
    return node_id;
  }

  double path_length(const Tree& tree, const float* x) const {
    int node = 0;
    int depth = 0;
    while (tree[static_cast<std::size_t>(node)].feature >= 0) {
      const Node& nd = tree[static_cast<std::size_t>(node)];
      node = x[nd.feature] < nd.split ? nd.left : nd.right;
      ++depth;
    }
    return depth + avg_path_len(static_cast<double>(tree[static_cast<std::size_t>(node)].size));
  }

  int num_trees_, psi_;
  std::uint64_t seed_;
  std::int64_t dim_ = 0;
  int max_depth_ = 0;
  std::vector<Tree> trees_;
};

inline Tensor<float> flatten_frames(const std::vector<const IQFrame*>& frames) {
  if (frames.empty()) throw std::invalid_argument("flatten_frames: empty input");
  const int w = frames[0]->width;
  Tensor<float> out({static_cast<std::int64_t>(frames.size()), 2 * w});
  for (std::size_t i = 0; i < frames.size(); ++i) {
    float* dst = out.ptr() + static_cast<std::int64_t>(i) * 2 * w;
    for (std::size_t k = 0; k < frames[i]->data.size(); ++k)
      dst[k] = static_cast<float>(frames[i]->data[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Physical stealth

struct StealthReport {
  double mean_delta_l2 = 0.0;  // mean ||x^p|| - ||x|| over (frame, trigger)
  double mean_snr_db = 0.0;    // mean 10 log10(frame energy / trigger energy)
  bool snr_infinite = false;   // all triggers carried zero energy
};

inline StealthReport stealth_report(const std::vector<const IQFrame*>& frames,
                                    const TriggerSet& triggers) {
  if (frames.empty() || triggers.size() < 1)
    throw std::invalid_argument("stealth_report: need frames and triggers");
  StealthReport rep;
  double snr_sum = 0.0;
  long snr_count = 0;
  long pairs = 0;
  for (const auto& trig : triggers.triggers) {
    const double te = trig.energy();
    for (const auto* f : frames) {
      const IQFrame poisoned = apply_trigger(*f, trig);
      rep.mean_delta_l2 += frame_l2(poisoned) - frame_l2(*f);
      ++pairs;
      if (te > 0.0) {
        double fe = 0.0;
        for (double v : f->data) fe += v * v;
        snr_sum += 10.0 * std::log10(fe / te);
        ++snr_count;
      }
    }
  }
  rep.mean_delta_l2 /= static_cast<double>(pairs);
  if (snr_count == 0) {
    rep.snr_infinite = true;
    rep.mean_snr_db = std::numeric_limits<double>::infinity();
  } else {
    rep.mean_snr_db = snr_sum / static_cast<double>(snr_count);
  }
  return rep;
}

}  // namespace rfbd
