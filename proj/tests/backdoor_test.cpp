// Trigger set construction, POR families, amplitude calibration, poison-plan
// bookkeeping, and the backdoor training loop.

#include <gtest/gtest.h>

#include "rfbd/backdoor.hpp"
#include "rfbd/ssl.hpp"
#include "test_util.hpp"

using namespace rfbd;

namespace {

Dataset tiny_dataset(int devices, int frames, std::uint64_t seed, int width = 256) {
  DatasetSpec spec;
  spec.num_devices = devices;
  spec.frames_per_device = frames;
  spec.seed = seed;
  return build_dataset(spec, width);
}

}  // namespace

TEST(TriggerSet, FreshAndMirroredSplit) {
  const TriggerSet set = gen_trigger_set(8, 48, 0.1, 0, 1);
  ASSERT_EQ(set.size(), 8);
  // Mirrored half: pattern_j = -pattern_{N_t+1-j}, bitwise.
  for (int j = 5; j <= 8; ++j) {
    const auto& hi = set.triggers[static_cast<std::size_t>(j - 1)].pattern;
    const auto& lo = set.triggers[static_cast<std::size_t>(8 - j)].pattern;
    ASSERT_EQ(hi.size(), lo.size());
    for (std::size_t u = 0; u < hi.size(); ++u) EXPECT_EQ(hi[u], -lo[u]);
  }
  // Fresh half mutually distinct.
  for (int a = 0; a < 4; ++a)
    for (int b = a + 1; b < 4; ++b)
      EXPECT_NE(set.triggers[static_cast<std::size_t>(a)].pattern,
                set.triggers[static_cast<std::size_t>(b)].pattern);
}

TEST(TriggerSet, AdjacentMiddlePairCancelsForEvenCount) {
  const TriggerSet set = gen_trigger_set(8, 16, 0.1, 0, 2);
  const auto& t4 = set.triggers[3].pattern;
  const auto& t5 = set.triggers[4].pattern;
  for (std::size_t u = 0; u < t4.size(); ++u) EXPECT_EQ(t4[u] + t5[u], 0.0f);
}

TEST(TriggerSet, OddCountKeepsMiddleFresh) {
  const TriggerSet set = gen_trigger_set(7, 16, 0.1, 0, 3);
  // Fresh j = 1..4, mirrored j = 5..7.
  for (int j = 5; j <= 7; ++j) {
    const auto& hi = set.triggers[static_cast<std::size_t>(j - 1)].pattern;
    const auto& lo = set.triggers[static_cast<std::size_t>(7 - j)].pattern;
    for (std::size_t u = 0; u < hi.size(); ++u) EXPECT_EQ(hi[u], -lo[u]);
  }
}

TEST(TriggerSet, PooledFreshEntriesMatchSigma) {
  // Monte-Carlo moment check over ~1e6 pooled fresh entries.
  double sum = 0.0, sum_sq = 0.0;
  long n = 0;
  for (int s = 0; s < 64; ++s) {
    const TriggerSet set = gen_trigger_set(8, 2048, 0.1, 0, derive_seed(1000, s), 4096);
    for (int j = 0; j < 4; ++j)
      for (float v : set.triggers[static_cast<std::size_t>(j)].pattern) {
        sum += v;
        sum_sq += static_cast<double>(v) * v;
        ++n;
      }
  }
  const double mean = sum / n;
  const double sd = std::sqrt(sum_sq / n - mean * mean);
  EXPECT_GE(n, 1000000L);
  EXPECT_GE(sd, 0.099);
  EXPECT_LE(sd, 0.101);
}

TEST(TriggerSet, RejectsBadGeometry) {
  EXPECT_THROW(gen_trigger_set(0, 48, 0.1, 0, 1), std::invalid_argument);
  EXPECT_THROW(gen_trigger_set(4, 48, 0.0, 0, 1), std::invalid_argument);
  EXPECT_THROW(gen_trigger_set(4, 48, 0.1, 240, 1), std::invalid_argument);  // offset+len > W
}

TEST(ApplyTrigger, ZeroTriggerIsIdentity) {
  const Dataset ds = tiny_dataset(2, 1, 5);
  Trigger zero;
  zero.index = 1;
  zero.offset = 10;
  zero.len = 8;
  zero.pattern.assign(16, 0.0f);
  const IQFrame out = apply_trigger(ds.frames[0], zero);
  EXPECT_EQ(out.data, ds.frames[0].data);
}

TEST(ApplyTrigger, AdditiveInverseRestoresFrame) {
  const Dataset ds = tiny_dataset(2, 1, 6);
  const TriggerSet set = gen_trigger_set(2, 48, 0.1, 0, 7);
  // t2 = -t1 by construction.
  const IQFrame poisoned = apply_trigger(ds.frames[0], set.triggers[0]);
  const IQFrame restored = apply_trigger(poisoned, set.triggers[1]);
  for (std::size_t k = 0; k < restored.data.size(); ++k)
    EXPECT_NEAR(restored.data[k], ds.frames[0].data[k], 1e-12);
}

TEST(ApplyTrigger, DeltaL2BoundedByPatternNorm) {
  const Dataset ds = tiny_dataset(2, 4, 8);
  const TriggerSet set = gen_trigger_set(4, 48, 0.1, 0, 9);
  for (const auto& f : ds.frames)
    for (const auto& t : set.triggers) {
      const IQFrame p = apply_trigger(f, t);
      const double delta = frame_l2(p) - frame_l2(f);
      EXPECT_LE(delta, t.l2() + 1e-12);
      EXPECT_GE(delta, -t.l2() - 1e-12);
    }
}

TEST(ApplyTrigger, RejectsSpectrogramDomain) {
  const Dataset ds = tiny_dataset(2, 1, 10);
  const IQFrame spec = stft_spectrogram(ds.frames[0]);
  const TriggerSet set = gen_trigger_set(1, 8, 0.1, 0, 11);
  EXPECT_THROW(apply_trigger(spec, set.triggers[0]), std::invalid_argument);
}

TEST(Pors, BoundaryCasesExact) {
  const PORSet set = gen_pors(8, 64, 0.7);
  for (double v : set.vectors[0]) EXPECT_EQ(v, 0.0);
  for (double v : set.vectors[7]) EXPECT_EQ(v, 0.7);
}

TEST(Pors, CosineBranchSignsAndGrowth) {
  const PORSet set = gen_pors(8, 64, 1.0);
  // j = 2..4 on the +A branch, j = 5..7 on the -A branch: check at k = 0
  // where cos(...) = 1.
  for (int j = 2; j <= 7; ++j) {
    const double v0 = set.vectors[static_cast<std::size_t>(j - 1)][0];
    const double expected = (1.0 + (j - 1) / 8.0) * ((2 * j <= 9) ? 1.0 : -1.0);
    EXPECT_NEAR(v0, expected, 1e-12) << "j=" << j;
  }
  // Norm grows with j within each branch via the (1 + (j-1)/N_t) factor.
  EXPECT_GT(set.norm_sq(3), set.norm_sq(2));
  EXPECT_GT(set.norm_sq(4), set.norm_sq(3));
  EXPECT_GT(set.norm_sq(6), set.norm_sq(5));
  EXPECT_GT(set.norm_sq(7), set.norm_sq(6));
}

TEST(Pors, CosineBranchOrthogonality) {
  for (int nt : {4, 8, 16})
    for (int dim : {32, 64, 128}) {
      if (2 * (nt - 1) >= dim) continue;  // outside the valid regime
      const double amplitude = 0.9;
      const PORSet set = gen_pors(nt, dim, amplitude);
      for (int a = 2; a < nt; ++a)
        for (int b = a + 1; b < nt; ++b) {
          double dot = 0.0;
          for (int k = 0; k < dim; ++k)
            dot += set.vectors[static_cast<std::size_t>(a - 1)][static_cast<std::size_t>(k)] *
                   set.vectors[static_cast<std::size_t>(b - 1)][static_cast<std::size_t>(k)];
          EXPECT_LT(std::abs(dot), 1e-9 * dim * amplitude * amplitude)
              << "nt=" << nt << " dim=" << dim << " pair " << a << "," << b;
        }
    }
}

TEST(Pors, RejectsTooManyVectors) {
  EXPECT_THROW(gen_pors(40, 64, 1.0), std::invalid_argument);  // needs N_t-1 < D/2
  EXPECT_THROW(gen_pors(1, 64, 1.0), std::invalid_argument);
  EXPECT_NO_THROW(gen_pors(2, 4, 1.0));  // zero + scaled-ones only
}

TEST(Pors, SignPatternBaselineShape) {
  const PORSet set = gen_sign_pattern_pors(8, 64, 0.5);
  int prev_pos = 0;
  for (int j = 1; j <= 8; ++j) {
    int pos = 0;
    for (double v : set.vectors[static_cast<std::size_t>(j - 1)]) {
      EXPECT_EQ(std::abs(v), 0.5);
      pos += v > 0;
    }
    EXPECT_GT(pos, prev_pos);  // varying number of positive entries
    prev_pos = pos;
  }
}

TEST(CalibrateAmplitude, ConstantRepresentationGivesAbsValue) {
  Encoder<float> enc({}, 8, 64, 1);  // dense-only
  enc.output_layer().w.fill(0.0f);
  enc.output_layer().b.fill(-0.25f);
  Dataset ds = tiny_dataset(2, 2, 12, 64);
  const double a = calibrate_amplitude(enc, frame_ptrs(ds.frames));
  EXPECT_NEAR(a, 0.25, 1e-7);
}

TEST(CalibrateAmplitude, ZeroRepresentationsDegenerate) {
  Encoder<float> enc({}, 8, 64, 1);
  enc.output_layer().w.fill(0.0f);
  enc.output_layer().b.fill(0.0f);
  Dataset ds = tiny_dataset(2, 2, 13, 64);
  EXPECT_EQ(calibrate_amplitude(enc, frame_ptrs(ds.frames)), 0.0);
}

TEST(CalibrateAmplitude, UnitVarianceMonteCarlo) {
  // RMS of ~1e4 x 16 standard-normal entries sits within 2% of 1.
  Rng rng(14);
  Tensor<float> reps({10000, 16});
  for (float& v : reps.data) v = static_cast<float>(rng.normal());
  double s = 0.0;
  for (float v : reps.data) s += static_cast<double>(v) * v;
  const double rms = std::sqrt(s / static_cast<double>(reps.numel()));
  EXPECT_GE(rms, 0.98);
  EXPECT_LE(rms, 1.02);
}

TEST(PoisonPlan, QuotaArithmeticWithRemainder) {
  Dataset sub = tiny_dataset(4, 250, 15);  // S = 1000
  Encoder<float> enc({8, 16}, 16, 256, 3);
  const TriggerSet triggers = gen_trigger_set(8, 48, 0.1, 0, 16);
  const PORSet pors = gen_pors(8, 16, 0.5);
  const PoisonPlan plan = build_poison_plan(sub, 0.1, triggers, pors, enc, 17);
  EXPECT_EQ(plan.total, 1000);
  EXPECT_EQ(plan.poisoned_requested, 100);
  EXPECT_EQ(plan.per_trigger, 12);
  EXPECT_EQ(plan.remainder, 4);
  EXPECT_EQ(plan.poisoned_frames.size(), 96u);
  EXPECT_EQ(plan.clean_frames.size(), 904u);  // 900 initial + 4 returned
  // Bookkeeping identity.
  EXPECT_EQ(plan.clean_initial + static_cast<int>(plan.poisoned_frames.size()) + plan.remainder,
            plan.total);
  // Every poisoned label is exactly one POR row.
  for (std::size_t r = 0; r < plan.poisoned_frames.size(); ++r) {
    const int j = plan.trigger_index[r];
    for (int k = 0; k < 16; ++k)
      EXPECT_EQ(plan.poisoned_targets(static_cast<std::int64_t>(r), k),
                static_cast<float>(pors.vectors[static_cast<std::size_t>(j - 1)][static_cast<std::size_t>(k)]));
  }
  // Per-trigger quota is exact.
  std::vector<int> counts(9, 0);
  for (int j : plan.trigger_index) ++counts[static_cast<std::size_t>(j)];
  for (int j = 1; j <= 8; ++j) EXPECT_EQ(counts[static_cast<std::size_t>(j)], 12);
}

TEST(PoisonPlan, RejectsEmptyQuota) {
  Dataset sub = tiny_dataset(2, 10, 18);  // S = 20, phi = 0.1 -> N = 2 < N_t
  Encoder<float> enc({8}, 16, 256, 3);
  const TriggerSet triggers = gen_trigger_set(8, 48, 0.1, 0, 19);
  const PORSet pors = gen_pors(8, 16, 0.5);
  EXPECT_THROW(build_poison_plan(sub, 0.1, triggers, pors, enc, 20), std::invalid_argument);
  EXPECT_THROW(build_poison_plan(sub, 0.0, triggers, pors, enc, 20), std::invalid_argument);
  EXPECT_THROW(build_poison_plan(sub, 1.0, triggers, pors, enc, 20), std::invalid_argument);
}

TEST(BackdoorTrain, ZeroEpochsReturnsExactCopy) {
  Dataset sub = tiny_dataset(2, 40, 21);
  Encoder<float> enc({8, 16}, 16, 256, 4);
  const TriggerSet triggers = gen_trigger_set(2, 48, 0.1, 0, 22);
  const PORSet pors = gen_pors(2, 16, 0.5);
  const PoisonPlan plan = build_poison_plan(sub, 0.2, triggers, pors, enc, 23);
  const BackdoorResult r = backdoor_train(enc, plan, pors, 1e-3, 0, 24);
  EXPECT_TRUE(same_parameters(enc, r.model));
}

TEST(BackdoorTrain, CleanTermStartsAtZero) {
  Dataset sub = tiny_dataset(2, 40, 25);
  Encoder<float> enc({8, 16}, 16, 256, 5);
  const TriggerSet triggers = gen_trigger_set(2, 48, 0.1, 0, 26);
  const PORSet pors = gen_pors(2, 16, 0.5);
  const PoisonPlan plan = build_poison_plan(sub, 0.2, triggers, pors, enc, 27);
  // Pseudo-labels came from the same frozen encoder, so before any update the
  // distillation term is exactly zero; probe it with a single tiny-lr epoch.
  const BackdoorResult r = backdoor_train(enc, plan, pors, 1e-12, 1, 28, 4096);
  ASSERT_EQ(r.epochs.size(), 1u);
  EXPECT_EQ(r.epochs[0].clean_mse, 0.0);
  EXPECT_GT(r.epochs[0].poison_mse, 0.0);
}

TEST(BackdoorTrain, RejectsEmptyPoisonSet) {
  Dataset sub = tiny_dataset(2, 20, 29);
  Encoder<float> enc({8}, 16, 256, 6);
  PoisonPlan plan;
  plan.domain = Domain::time;
  plan.clean_frames = sub.frames;
  const PORSet pors = gen_pors(2, 16, 0.5);
  EXPECT_THROW(backdoor_train(enc, plan, pors, 1e-3, 1, 30), std::invalid_argument);
}

TEST(BackdoorTrain, MiniatureAttackConverges) {
  // Small but real: the poisoned representations must move onto their PORs
  // while clean ones stay close to the benign encoder's.
  Dataset sub = tiny_dataset(3, 60, 31, 128);
  Encoder<float> enc({8, 16, 32}, 16, 128, 7);
  AugmentationConfig aug;
  aug.time_shift_max = 32;
  PretrainConfig pcfg;
  pcfg.batch_size = 32;
  pcfg.epochs = 6;
  pretrain(enc, frame_ptrs(sub.frames), pcfg, aug, 32);
  const TriggerSet triggers = gen_trigger_set(2, 24, 0.1, 0, 33, 128);
  const double a = calibrate_amplitude(enc, frame_ptrs(sub.frames));
  const PORSet pors = gen_pors(2, 16, a);
  const PoisonPlan plan = build_poison_plan(sub, 0.2, triggers, pors, enc, 34);
  const BackdoorResult r = backdoor_train(enc, plan, pors, 1e-3, 60, 35);
  ASSERT_EQ(r.epochs.size(), 60u);
  // Strong learning signal on the poisoned term; strict POR fidelity at the
  // default scale is checked by the acceptance suite.
  EXPECT_LT(r.epochs.back().poison_mse, 0.5 * r.epochs.front().poison_mse);
  // Clean behavior preserved within the fidelity budget.
  double rep_scale = 0.0;
  const Tensor<float> reps = encode_frames(enc, frame_ptrs(sub.frames), Domain::time);
  for (float v : reps.data) rep_scale += static_cast<double>(v) * v;
  rep_scale /= static_cast<double>(reps.dim(0));
  EXPECT_LE(r.clean_train_mse, 0.05 * rep_scale);
}
