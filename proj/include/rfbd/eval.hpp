#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include "rfbd/backdoor.hpp"
#include "rfbd/encode.hpp"
#include "rfbd/nn.hpp"

namespace rfbd {

// ---------------------------------------------------------------------------
// Downstream classifier

struct DownstreamConfig {
  int epochs = 200;
  double lr = 0.01;
  int batch_size = 64;
};

// The head is trained on per-dimension standardized features (a better
// conditioned problem for the optimizer); the standardization is folded back
// into W and B afterwards, so the returned head is a plain affine map over
// raw representations.
inline ClassifierHead<float> train_head_on_reps(const Tensor<float>& reps,
                                                const std::vector<int>& labels, int num_classes,
                                                const DownstreamConfig& cfg, std::uint64_t seed) {
  const std::int64_t n = reps.dim(0);
  const int d = static_cast<int>(reps.dim(1));
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0), sdev(static_cast<std::size_t>(d), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) mean[static_cast<std::size_t>(k)] += reps(i, k);
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::int64_t i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) {
      const double v = reps(i, k) - mean[static_cast<std::size_t>(k)];
      sdev[static_cast<std::size_t>(k)] += v * v;
    }
  for (double& s : sdev) s = std::max(std::sqrt(s / static_cast<double>(n)), 1e-6);
  Tensor<float> zreps(reps.shape);
  for (std::int64_t i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k)
      zreps(i, k) = static_cast<float>((reps(i, k) - mean[static_cast<std::size_t>(k)]) /
                                       sdev[static_cast<std::size_t>(k)]);

  ClassifierHead<float> head(d, num_classes, derive_seed(seed, 0x48454144ULL /* "HEAD" */));
  Optimizer<float> opt(OptKind::adam, cfg.lr);
  std::vector<Tensor<float>*> params = {&head.fc.w, &head.fc.b};
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(seed, 0x444F524EULL, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t bsz = std::min<std::size_t>(cfg.batch_size, order.size() - pos);
      Tensor<float> x({static_cast<std::int64_t>(bsz), d});
      std::vector<int> y(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        const std::size_t idx = order[pos + b];
        std::copy_n(zreps.ptr() + static_cast<std::int64_t>(idx) * d, d,
                    x.ptr() + static_cast<std::int64_t>(b) * d);
        y[b] = labels[idx];
      }
      const Tensor<float> logits = head.fc.forward(x);
      const CrossEntropyResult<float> ce = cross_entropy(logits, y);
      head.fc.backward(ce.grad, nullptr, true);
      std::vector<Tensor<float>*> grads = {&head.fc.gw, &head.fc.gb};
      opt.step(params, grads);
    }
  }
  // Fold the standardization into the affine map: logits over raw reps.
  for (int c = 0; c < num_classes; ++c) {
    double shift = 0.0;
    for (int k = 0; k < d; ++k) {
      const double w = head.fc.w(c, k) / sdev[static_cast<std::size_t>(k)];
      shift += w * mean[static_cast<std::size_t>(k)];
      head.fc.w(c, k) = static_cast<float>(w);
    }
    head.fc.b.data[static_cast<std::size_t>(c)] -= static_cast<float>(shift);
  }
  return head;
}

// Trains a linear softmax head on frozen-encoder representations. The encoder
// weights never change; representations are computed once up front.
inline ClassifierHead<float> train_downstream(Encoder<float>& encoder,
                                              const std::vector<const IQFrame*>& frames,
                                              int num_classes, const DownstreamConfig& cfg,
                                              std::uint64_t seed, Domain domain = Domain::time) {
  if (frames.empty()) throw std::invalid_argument("train_downstream: empty training set");
  std::set<int> distinct;
  std::vector<int> labels;
  labels.reserve(frames.size());
  for (const auto* f : frames) {
    if (f->device_id < 0 || f->device_id >= num_classes)
      throw std::invalid_argument("train_downstream: device id outside class range");
    labels.push_back(f->device_id);
    distinct.insert(f->device_id);
  }
  if (distinct.size() < 2)
    throw std::invalid_argument("train_downstream: training set has a single class");
  const Tensor<float> reps = encode_frames(encoder, frames, domain);
  return train_head_on_reps(reps, labels, num_classes, cfg, seed);
}

// ---------------------------------------------------------------------------
// Metrics

inline std::vector<int> predict(ClassifierHead<float>& head, const Tensor<float>& reps) {
  Tensor<float> logits = head.forward(reps);
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t r = 0; r < n; ++r) {
    const float* row = logits.ptr() + r * c;
    out[static_cast<std::size_t>(r)] =
        static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

inline std::vector<int> predict_frames(ClassifierHead<float>& head, Encoder<float>& encoder,
                                       const std::vector<const IQFrame*>& frames, Domain domain) {
  return predict(head, encode_frames(encoder, frames, domain));
}

// Fraction of argmax predictions matching the true device label.
inline double classification_accuracy(ClassifierHead<float>& head, Encoder<float>& encoder,
                                      const std::vector<const IQFrame*>& frames, Domain domain) {
  if (frames.empty()) throw std::invalid_argument("classification_accuracy: empty test set");
  const std::vector<int> pred = predict_frames(head, encoder, frames, domain);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (pred[i] == frames[i]->device_id) ++correct;
  return static_cast<double>(correct) / static_cast<double>(frames.size());
}

struct UasrResult {
  double value = 0.0;  // fraction of (frame, trigger) pairs misclassified
  std::vector<std::vector<long>> histogram;        // N_t x C, all predictions
  std::vector<std::vector<long>> wrong_histogram;  // N_t x C, wrong predictions only
  std::vector<long> correct_counts;                // per trigger
};

// Every test frame is poisoned with every trigger; a pair counts as an attack
// success when the prediction differs from the frame's true label.
inline UasrResult uasr(ClassifierHead<float>& head, Encoder<float>& encoder,
                       const std::vector<const IQFrame*>& frames, const TriggerSet& triggers,
                       Domain domain) {
  if (triggers.size() < 1) throw std::invalid_argument("uasr: empty trigger set");
  if (frames.empty()) throw std::invalid_argument("uasr: empty test set");
  const int classes = head.classes();
  UasrResult r;
  r.histogram.assign(static_cast<std::size_t>(triggers.size()),
                     std::vector<long>(static_cast<std::size_t>(classes), 0));
  r.wrong_histogram = r.histogram;
  r.correct_counts.assign(static_cast<std::size_t>(triggers.size()), 0);
  long wrong = 0;
  for (int j = 0; j < triggers.size(); ++j) {
    std::vector<IQFrame> poisoned;
    poisoned.reserve(frames.size());
    for (const auto* f : frames)
      poisoned.push_back(apply_trigger(*f, triggers.triggers[static_cast<std::size_t>(j)]));
    const std::vector<int> pred = predict_frames(head, encoder, frame_ptrs(poisoned), domain);
    for (std::size_t i = 0; i < poisoned.size(); ++i) {
      ++r.histogram[static_cast<std::size_t>(j)][static_cast<std::size_t>(pred[i])];
      if (pred[i] != frames[i]->device_id) {
        ++wrong;
        ++r.wrong_histogram[static_cast<std::size_t>(j)][static_cast<std::size_t>(pred[i])];
      } else {
        ++r.correct_counts[static_cast<std::size_t>(j)];
      }
    }
  }
  r.value = static_cast<double>(wrong) /
            static_cast<double>(frames.size() * static_cast<std::size_t>(triggers.size()));
  return r;
}

// Targeted ratio: each trigger's dominant class is the most frequent wrong
// prediction, unless the majority of its predictions are correct, in which
// case the trigger is inert and contributes nothing. TR is the number of
// distinct dominant classes over N_t.
inline double targeted_ratio(const std::vector<std::vector<long>>& wrong_histogram,
                             const std::vector<long>& correct_counts) {
  const std::size_t nt = wrong_histogram.size();
  if (nt == 0 || correct_counts.size() != nt)
    throw std::invalid_argument("targeted_ratio: malformed histogram");
  std::set<int> dominants;
  for (std::size_t j = 0; j < nt; ++j) {
    long wrong_total = 0;
    for (long v : wrong_histogram[j]) wrong_total += v;
    const long total = wrong_total + correct_counts[j];
    if (total == 0 || 2 * correct_counts[j] > total) continue;  // inert trigger
    const auto it = std::max_element(wrong_histogram[j].begin(), wrong_histogram[j].end());
    if (*it <= 0) continue;
    dominants.insert(static_cast<int>(it - wrong_histogram[j].begin()));
  }
  const std::size_t numerator = dominants.size();
  if (numerator > nt || (!wrong_histogram.empty() && numerator > wrong_histogram[0].size()))
    throw std::logic_error("targeted_ratio: numerator exceeded bounds");
  return static_cast<double>(numerator) / static_cast<double>(nt);
}

// Accuracy cost of the triggers alone on a benign pipeline:
// CA(clean) - CA over all (frame, trigger) pairs.
inline double trigger_only_drop(Encoder<float>& benign_encoder, ClassifierHead<float>& head,
                                const std::vector<const IQFrame*>& frames,
                                const TriggerSet& triggers, Domain domain) {
  const double ca_clean = classification_accuracy(head, benign_encoder, frames, domain);
  const UasrResult poisoned = uasr(head, benign_encoder, frames, triggers, domain);
  const double ca_poisoned = 1.0 - poisoned.value;
  return ca_clean - ca_poisoned;
}

}  // namespace rfbd
