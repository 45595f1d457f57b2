#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>
#include <vector>

#include "rfbd/encode.hpp"
#include "rfbd/nn.hpp"
#include "rfbd/signal.hpp"

namespace rfbd {

// ---------------------------------------------------------------------------
// Triggers

// Additive Gaussian noise burst covering samples [offset, offset+len) of both
// the I and Q rows.
struct Trigger {
  int index = 0;   // 1-based position in the set
  int offset = 0;
  int len = 0;
  std::vector<float> pattern;  // 2*len: I row then Q row

  double energy() const {
    double s = 0.0;
    for (float v : pattern) s += static_cast<double>(v) * v;
    return s;
  }
  double l2() const { return std::sqrt(energy()); }
};

struct TriggerSet {
  std::vector<Trigger> triggers;
  double sigma = 0.0;
  int len = 0;
  int offset = 0;
  std::uint64_t seed = 0;

  int size() const { return static_cast<int>(triggers.size()); }
};

// First ceil(N_t/2) triggers are fresh Gaussian draws; the rest are exact
// sign-mirrored copies, pattern_j = -pattern_{N_t+1-j}. Mirroring reuses the
// buffer so the antisymmetry is bitwise.
inline TriggerSet gen_trigger_set(int num_triggers, int len, double sigma, int offset,
                                  std::uint64_t seed, int frame_width = 256) {
  if (num_triggers < 1) throw std::invalid_argument("gen_trigger_set: need at least one trigger");
  if (len < 1 || sigma <= 0.0) throw std::invalid_argument("gen_trigger_set: bad len or sigma");
  if (offset < 0 || offset + len > frame_width)
    throw std::invalid_argument("gen_trigger_set: trigger window exceeds frame width");
  TriggerSet set;
  set.sigma = sigma;
  set.len = len;
  set.offset = offset;
  set.seed = seed;
  const int fresh = (num_triggers + 1) / 2;
  set.triggers.resize(static_cast<std::size_t>(num_triggers));
  for (int j = 1; j <= num_triggers; ++j) {
    Trigger& t = set.triggers[static_cast<std::size_t>(j - 1)];
    t.index = j;
    t.offset = offset;
    t.len = len;
    if (j <= fresh) {
      Rng rng(derive_seed(seed, 0x54524947ULL /* "TRIG" */, static_cast<std::uint64_t>(j)));
      t.pattern.resize(static_cast<std::size_t>(2 * len));
      for (float& v : t.pattern) v = static_cast<float>(rng.normal(0.0, sigma));
    } else {
      const Trigger& src = set.triggers[static_cast<std::size_t>(num_triggers - j)];
      t.pattern.resize(src.pattern.size());
      for (std::size_t u = 0; u < src.pattern.size(); ++u) t.pattern[u] = -src.pattern[u];
    }
  }
  return set;
}

// x^p = x (+) t: elementwise addition over the trigger window, no
// renormalization — the perturbation must survive into the model input.
inline IQFrame apply_trigger(const IQFrame& frame, const Trigger& trig) {
  if (frame.domain != Domain::time)
    throw std::invalid_argument("apply_trigger: triggers are injected in the time domain");
  if (trig.offset + trig.len > frame.width)
    throw std::invalid_argument("apply_trigger: trigger window exceeds frame width");
  IQFrame out = frame;
  for (int u = 0; u < trig.len; ++u) {
    out.i(trig.offset + u) += trig.pattern[static_cast<std::size_t>(u)];
    out.q(trig.offset + u) += trig.pattern[static_cast<std::size_t>(trig.len + u)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Predefined output representations

enum class PorDesign { orthogonal, sign_pattern };

inline const char* por_design_name(PorDesign d) {
  return d == PorDesign::orthogonal ? "orthogonal" : "sign_pattern";
}
inline PorDesign por_design_from_name(const std::string& s) {
  if (s == "orthogonal") return PorDesign::orthogonal;
  if (s == "sign_pattern") return PorDesign::sign_pattern;
  throw std::invalid_argument("unknown POR design: " + s);
}

struct PORSet {
  std::vector<std::vector<double>> vectors;  // N_t vectors of length dim
  double amplitude = 0.0;
  int dim = 0;
  PorDesign design = PorDesign::orthogonal;

  int size() const { return static_cast<int>(vectors.size()); }

  double norm_sq(int j) const {  // 1-based
    const auto& v = vectors[static_cast<std::size_t>(j - 1)];
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
  }
};

// The orthogonal family: e_1 = 0, e_{N_t} = A*1, and in between scaled cosine
// vectors at integer frequency j on the uniform grid t_k = k/dim. The first
// half of the cosine branch uses +A, the second half -A, and the growth
// factor (1 + (j-1)/N_t) stretches the moving distance with j. Distinct
// frequencies below dim/2 make the cosine vectors exactly orthogonal.
inline PORSet gen_pors(int num_triggers, int dim, double amplitude) {
  if (num_triggers < 2) throw std::invalid_argument("gen_pors: need at least two vectors");
  if (dim < 2) throw std::invalid_argument("gen_pors: bad dimension");
  if (num_triggers > 2 && 2 * (num_triggers - 1) >= dim)
    throw std::invalid_argument("gen_pors: too many vectors for the representation dimension");
  PORSet set;
  set.amplitude = amplitude;
  set.dim = dim;
  set.design = PorDesign::orthogonal;
  set.vectors.assign(static_cast<std::size_t>(num_triggers), std::vector<double>(dim, 0.0));
  for (int j = 2; j <= num_triggers; ++j) {
    auto& v = set.vectors[static_cast<std::size_t>(j - 1)];
    if (j == num_triggers) {
      std::fill(v.begin(), v.end(), amplitude);
      continue;
    }
    const double sign = (2 * j <= num_triggers + 1) ? 1.0 : -1.0;
    const double scale =
        (1.0 + static_cast<double>(j - 1) / num_triggers) * sign * amplitude;
    for (int k = 0; k < dim; ++k)
      v[static_cast<std::size_t>(k)] =
          scale * std::cos(2.0 * std::numbers::pi * j * k / static_cast<double>(dim));
  }
  return set;
}

// Baseline design for comparison: +-A sign patterns with a varying number of
// positive entries. Not mutually orthogonal.
inline PORSet gen_sign_pattern_pors(int num_triggers, int dim, double amplitude) {
  if (num_triggers < 1 || dim < 2) throw std::invalid_argument("gen_sign_pattern_pors: bad sizes");
  PORSet set;
  set.amplitude = amplitude;
  set.dim = dim;
  set.design = PorDesign::sign_pattern;
  set.vectors.assign(static_cast<std::size_t>(num_triggers), std::vector<double>(dim, 0.0));
  for (int j = 1; j <= num_triggers; ++j) {
    auto& v = set.vectors[static_cast<std::size_t>(j - 1)];
    const int positives = std::clamp(
        static_cast<int>(std::lround(static_cast<double>(dim) * j / (num_triggers + 1))), 1,
        dim - 1);
    for (int k = 0; k < dim; ++k)
      v[static_cast<std::size_t>(k)] = (k < positives) ? amplitude : -amplitude;
  }
  return set;
}

// RMS entry of the benign representations over clean substitute frames, so
// that POR targets sit at a representative magnitude.
inline double calibrate_amplitude(Encoder<float>& benign,
                                  const std::vector<const IQFrame*>& clean_frames,
                                  Domain domain = Domain::time) {
  const Tensor<float> reps = encode_frames(benign, clean_frames, domain);
  double s = 0.0;
  for (float v : reps.data) s += static_cast<double>(v) * v;
  const double rms = std::sqrt(s / static_cast<double>(reps.numel()));
  if (rms < 1e-12)
    std::cerr << "[rfbd] warning: representation RMS is ~0; POR amplitude degenerates to 0\n";
  return rms;
}

// ---------------------------------------------------------------------------
// Poison plan

// Substitute frames split into a clean part carrying benign pseudo-labels and
// a poisoned part carrying POR labels. Each trigger owns exactly
// floor(N/N_t) frames; the N mod N_t leftover candidates return to the clean
// side so per-trigger quotas stay balanced.
struct PoisonPlan {
  std::vector<IQFrame> clean_frames;     // time-domain; initial clean + returned remainder
  Tensor<float> clean_targets;           // (|clean|, D) benign representations
  std::vector<IQFrame> poisoned_frames;  // time-domain, trigger already added
  Tensor<float> poisoned_targets;        // (|poisoned|, D) POR rows
  std::vector<int> trigger_index;        // per poisoned frame, 1-based
  Domain domain = Domain::time;
  int total = 0;             // S
  int poisoned_requested = 0;  // N = floor(phi * S)
  int clean_initial = 0;     // M = S - N
  int remainder = 0;         // N - N_t * floor(N / N_t)
  int per_trigger = 0;       // floor(N / N_t)
};

// Shuffled poison/clean index split shared by plan construction and by
// amplitude calibration, so both see the same clean subset.
struct PoisonSplit {
  std::vector<std::size_t> order;  // shuffled frame indices
  int total = 0, requested = 0, per_trigger = 0, remainder = 0;

  // order[0 .. per_trigger*nt) are poisoned, the rest are clean.
  int assigned(int nt) const { return per_trigger * nt; }
};

inline PoisonSplit poison_split(int total, double phi, int nt, std::uint64_t seed) {
  if (!(phi > 0.0) || phi >= 1.0)
    throw std::invalid_argument("poison_split: poisoning rate must be in (0, 1)");
  if (nt < 1) throw std::invalid_argument("poison_split: need at least one trigger");
  PoisonSplit s;
  s.total = total;
  s.requested = static_cast<int>(phi * total);
  s.per_trigger = s.requested / nt;
  s.remainder = s.requested - s.per_trigger * nt;
  if (s.per_trigger < 1)
    throw std::invalid_argument("poison_split: per-trigger quota is empty; grow the substitute set or phi");
  s.order.resize(static_cast<std::size_t>(total));
  for (std::size_t i = 0; i < s.order.size(); ++i) s.order[i] = i;
  Rng rng(derive_seed(seed, 0x504C414EULL /* "PLAN" */));
  std::shuffle(s.order.begin(), s.order.end(), rng.engine());
  return s;
}

inline PoisonPlan build_poison_plan(const Dataset& substitute, double phi,
                                    const TriggerSet& triggers, const PORSet& pors,
                                    Encoder<float>& benign, std::uint64_t seed,
                                    Domain domain = Domain::time) {
  if (triggers.size() < 1 || pors.size() != triggers.size())
    throw std::invalid_argument("build_poison_plan: trigger/POR set size mismatch");
  if (pors.dim != benign.rep_dim())
    throw std::invalid_argument("build_poison_plan: POR dimension != encoder rep_dim");
  const int total = static_cast<int>(substitute.frames.size());
  const int nt = triggers.size();
  const PoisonSplit split = poison_split(total, phi, nt, seed);
  const int requested = split.requested;
  const int quota = split.per_trigger;
  const std::vector<std::size_t>& order = split.order;

  PoisonPlan plan;
  plan.domain = domain;
  plan.total = total;
  plan.poisoned_requested = requested;
  plan.clean_initial = total - requested;
  plan.per_trigger = quota;
  plan.remainder = requested - quota * nt;

  const int assigned = quota * nt;
  plan.poisoned_frames.reserve(static_cast<std::size_t>(assigned));
  plan.trigger_index.reserve(static_cast<std::size_t>(assigned));
  int pos = 0;
  for (int j = 1; j <= nt; ++j) {
    const Trigger& t = triggers.triggers[static_cast<std::size_t>(j - 1)];
    for (int n = 0; n < quota; ++n, ++pos) {
      plan.poisoned_frames.push_back(apply_trigger(substitute.frames[order[static_cast<std::size_t>(pos)]], t));
      plan.trigger_index.push_back(j);
    }
  }
  // Unassigned candidates (pos..requested) return to the clean side.
  plan.clean_frames.reserve(static_cast<std::size_t>(total - assigned));
  for (int i = pos; i < total; ++i)
    plan.clean_frames.push_back(substitute.frames[order[static_cast<std::size_t>(i)]]);

  plan.clean_targets = encode_frames(benign, frame_ptrs(plan.clean_frames), domain);
  const int d = benign.rep_dim();
  plan.poisoned_targets = Tensor<float>({static_cast<std::int64_t>(assigned), d});
  for (int r = 0; r < assigned; ++r) {
    const auto& e = pors.vectors[static_cast<std::size_t>(plan.trigger_index[static_cast<std::size_t>(r)] - 1)];
    for (int k = 0; k < d; ++k)
      plan.poisoned_targets(r, k) = static_cast<float>(e[static_cast<std::size_t>(k)]);
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Backdoor training

struct BackdoorEpochLog {
  double clean_mse = 0.0;   // per-entry mean over the clean term
  double poison_mse = 0.0;  // per-entry mean over the poisoned term
};

struct BackdoorResult {
  Encoder<float> model;
  std::vector<BackdoorEpochLog> epochs;
  std::vector<double> per_trigger_mse;      // mean ||f(x^p) - e_j||^2 per trigger
  std::vector<double> per_trigger_norm_sq;  // ||e_j||^2
  double clean_train_mse = 0.0;             // mean ||f_p(x) - f(x)||^2 on the clean term
  bool converged = true;
};

// Fine-tunes a copy of the benign encoder so clean substitute frames keep
// their benign representations (distillation term) while triggered frames map
// onto their POR (poison term). Both MSE terms are minimized jointly with
// minibatch Adam; per-epoch means of each term are logged.
inline BackdoorResult backdoor_train(const Encoder<float>& benign, const PoisonPlan& plan,
                                     const PORSet& pors, double lr, int epochs,
                                     std::uint64_t seed, int batch_size = 128,
                                     double convergence_threshold = 0.05) {
  if (plan.poisoned_frames.empty())
    throw std::invalid_argument("backdoor_train: empty poisoned set degenerates to distillation");
  if (epochs < 0 || !(lr > 0.0) || batch_size < 1)
    throw std::invalid_argument("backdoor_train: bad hyperparameters");
  BackdoorResult result;
  result.model = benign;  // copy structure and parameters
  if (epochs == 0) return result;

  // Model inputs are fixed across epochs, so transform once.
  const std::size_t n_clean = plan.clean_frames.size();
  const std::size_t n_poison = plan.poisoned_frames.size();
  std::vector<IQFrame> inputs;
  inputs.reserve(n_clean + n_poison);
  for (const auto& f : plan.clean_frames) inputs.push_back(to_model_input(f, plan.domain));
  for (const auto& f : plan.poisoned_frames) inputs.push_back(to_model_input(f, plan.domain));

  const int d = result.model.rep_dim();
  Optimizer<float> opt(OptKind::adam, lr);
  const auto params = result.model.params();
  std::vector<std::size_t> order(n_clean + n_poison);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(seed, 0x424B4F52ULL /* "BKOR" */, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double clean_sq = 0.0, poison_sq = 0.0;
    std::size_t clean_rows = 0, poison_rows = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(batch_size)) {
      const std::size_t bsz = std::min<std::size_t>(batch_size, order.size() - pos);
      std::vector<const IQFrame*> ptrs(bsz);
      Tensor<float> target({static_cast<std::int64_t>(bsz), d});
      std::vector<bool> poisoned_row(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        const std::size_t idx = order[pos + b];
        ptrs[b] = &inputs[idx];
        const bool poisoned = idx >= n_clean;
        poisoned_row[b] = poisoned;
        const Tensor<float>& src = poisoned ? plan.poisoned_targets : plan.clean_targets;
        const std::size_t r = poisoned ? idx - n_clean : idx;
        std::copy_n(src.ptr() + static_cast<std::int64_t>(r) * d, d,
                    target.ptr() + static_cast<std::int64_t>(b) * d);
      }
      const Tensor<float> pred = result.model.forward(make_batch(ptrs, plan.domain));
      Tensor<float> grad(pred.shape);
      const double scale = 2.0 / static_cast<double>(pred.numel());
      for (std::size_t b = 0; b < bsz; ++b) {
        double row_sq = 0.0;
        for (int k = 0; k < d; ++k) {
          const std::int64_t at = static_cast<std::int64_t>(b) * d + k;
          const double diff = static_cast<double>(pred.data[static_cast<std::size_t>(at)]) -
                              static_cast<double>(target.data[static_cast<std::size_t>(at)]);
          row_sq += diff * diff;
          grad.data[static_cast<std::size_t>(at)] = static_cast<float>(scale * diff);
        }
        if (poisoned_row[b]) {
          poison_sq += row_sq;
          ++poison_rows;
        } else {
          clean_sq += row_sq;
          ++clean_rows;
        }
      }
      result.model.backward(grad);
      opt.step(params, result.model.grads(), result.model.trainable_mask());
    }
    BackdoorEpochLog log;
    log.clean_mse = clean_rows ? clean_sq / static_cast<double>(clean_rows * static_cast<std::size_t>(d)) : 0.0;
    log.poison_mse = poison_rows ? poison_sq / static_cast<double>(poison_rows * static_cast<std::size_t>(d)) : 0.0;
    result.epochs.push_back(log);
  }

  // Final fidelity pass over the fixed training inputs.
  const int nt = pors.size();
  result.per_trigger_mse.assign(static_cast<std::size_t>(nt), 0.0);
  result.per_trigger_norm_sq.resize(static_cast<std::size_t>(nt));
  std::vector<int> counts(static_cast<std::size_t>(nt), 0);
  for (int j = 1; j <= nt; ++j)
    result.per_trigger_norm_sq[static_cast<std::size_t>(j - 1)] = pors.norm_sq(j);
  {
    std::vector<const IQFrame*> ptrs;
    for (std::size_t i = 0; i < n_poison; ++i) ptrs.push_back(&inputs[n_clean + i]);
    const Tensor<float> reps = encode_frames(result.model, ptrs, plan.domain);
    for (std::size_t r = 0; r < n_poison; ++r) {
      const int j = plan.trigger_index[r];
      double sq = 0.0;
      for (int k = 0; k < d; ++k) {
        const double diff =
            static_cast<double>(reps(static_cast<std::int64_t>(r), k)) -
            static_cast<double>(plan.poisoned_targets(static_cast<std::int64_t>(r), k));
        sq += diff * diff;
      }
      result.per_trigger_mse[static_cast<std::size_t>(j - 1)] += sq;
      ++counts[static_cast<std::size_t>(j - 1)];
    }
    for (int j = 0; j < nt; ++j)
      if (counts[static_cast<std::size_t>(j)] > 0)
        result.per_trigger_mse[static_cast<std::size_t>(j)] /= counts[static_cast<std::size_t>(j)];
  }
  {
    std::vector<const IQFrame*> ptrs;
    for (std::size_t i = 0; i < n_clean; ++i) ptrs.push_back(&inputs[i]);
    const Tensor<float> reps = encode_frames(result.model, ptrs, plan.domain);
    double sq = 0.0;
    for (std::size_t i = 0; i < reps.data.size(); ++i) {
      const double diff =
          static_cast<double>(reps.data[i]) - static_cast<double>(plan.clean_targets.data[i]);
      sq += diff * diff;
    }
    result.clean_train_mse = sq / static_cast<double>(n_clean);
  }
  // The zero POR has no norm of its own; judge it against the set's mean.
  double mean_norm_sq = 0.0;
  for (double v : result.per_trigger_norm_sq) mean_norm_sq += v;
  mean_norm_sq /= static_cast<double>(nt);
  if (mean_norm_sq <= 0.0) mean_norm_sq = 1.0;
  for (int j = 0; j < nt; ++j) {
    const double denom =
        std::max(result.per_trigger_norm_sq[static_cast<std::size_t>(j)], mean_norm_sq);
    if (result.per_trigger_mse[static_cast<std::size_t>(j)] > convergence_threshold * denom)
      result.converged = false;
  }
  if (!result.converged)
    std::cerr << "[rfbd] warning: poisoned representations did not converge to the PORs "
                 "within the configured threshold\n";
  return result;
}

}  // namespace rfbd
