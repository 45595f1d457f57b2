// Defense battery: fine-tuning no-op guarantees, STRIP entropy bounds,
// isolation-forest behavior, and physical stealth numbers.

#include <gtest/gtest.h>

#include <numeric>

#include "rfbd/defense.hpp"
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

TEST(FinetuneDefense, RateZeroLeavesEncoderBitwiseUntouched) {
  Dataset ds = tiny_dataset(3, 10, 1, 128);
  Encoder<float> enc({8, 16}, 16, 128, 2);
  const auto r = finetune_defense(enc, frame_ptrs(ds.frames), 3, 0.0, 5, 1e-3, 3);
  EXPECT_TRUE(same_parameters(enc, r.encoder));
}

TEST(FinetuneDefense, PositiveRateUpdatesOnlyUnfrozenLayers) {
  Dataset ds = tiny_dataset(3, 10, 4, 128);
  Encoder<float> enc({8, 16}, 16, 128, 5);
  const Encoder<float> before = enc;
  const auto r = finetune_defense(enc, frame_ptrs(ds.frames), 3, 0.5, 3, 1e-3, 6);
  // 3 layers total, ceil(0.5*3) = 2 trainable: conv1 and the dense output.
  EXPECT_EQ(before.convs()[0].w.data, r.encoder.convs()[0].w.data);
  EXPECT_NE(before.convs()[1].w.data, r.encoder.convs()[1].w.data);
  EXPECT_NE(before.output_layer().w.data, r.encoder.output_layer().w.data);
}

TEST(FinetuneDefense, RejectsEmptyDataAndBadRate) {
  Encoder<float> enc({8}, 16, 128, 7);
  std::vector<const IQFrame*> empty;
  EXPECT_THROW(finetune_defense(enc, empty, 2, 0.5, 1, 1e-3, 8), std::invalid_argument);
  Dataset ds = tiny_dataset(2, 2, 9, 128);
  EXPECT_THROW(finetune_defense(enc, frame_ptrs(ds.frames), 2, 1.5, 1, 1e-3, 8),
               std::invalid_argument);
}

TEST(StripEntropy, DegenerateAndUniformHeads) {
  Encoder<float> enc({}, 2, 64, 1);
  enc.output_layer().w.fill(0.0f);
  enc.output_layer().b.fill(0.0f);
  Dataset ds = tiny_dataset(2, 6, 10, 64);
  const auto pool = frame_ptrs(ds.frames);
  Rng rng(11);
  // Head with one overwhelming logit: entropy 0.
  ClassifierHead<float> certain(2, 10, 0);
  certain.fc.w.fill(0.0f);
  certain.fc.b.fill(0.0f);
  certain.fc.b.data[4] = 1000.0f;
  EXPECT_NEAR(strip_entropy(certain, enc, ds.frames[0], pool, 8, rng), 0.0, 1e-9);
  // Uniform head: entropy ln C.
  ClassifierHead<float> uniform(2, 10, 0);
  uniform.fc.w.fill(0.0f);
  uniform.fc.b.fill(0.0f);
  EXPECT_NEAR(strip_entropy(uniform, enc, ds.frames[0], pool, 8, rng), std::log(10.0), 1e-6);
  // Entropy always sits in [0, ln C].
  ClassifierHead<float> random_head(2, 10, 12);
  const double h = strip_entropy(random_head, enc, ds.frames[0], pool, 16, rng);
  EXPECT_GE(h, 0.0);
  EXPECT_LE(h, std::log(10.0) + 1e-6);
  EXPECT_THROW(strip_entropy(random_head, enc, ds.frames[0], pool, 0, rng), std::invalid_argument);
  std::vector<const IQFrame*> empty;
  EXPECT_THROW(strip_entropy(random_head, enc, ds.frames[0], empty, 4, rng), std::invalid_argument);
}

TEST(StripEntropy, BlendIsSymmetricInItsInputs) {
  Dataset ds = tiny_dataset(2, 2, 13, 64);
  IQFrame a = ds.frames[0];
  IQFrame b = ds.frames[1];
  IQFrame ab = a, ba = b;
  for (std::size_t k = 0; k < ab.data.size(); ++k) {
    ab.data[k] = 0.5 * a.data[k] + 0.5 * b.data[k];
    ba.data[k] = 0.5 * b.data[k] + 0.5 * a.data[k];
  }
  EXPECT_EQ(ab.data, ba.data);
}

TEST(IsolationForest, FlagsTheFarOutlier) {
  Rng rng(14);
  const int n = 101;
  Tensor<float> data({n, 4});
  for (int i = 0; i < n - 1; ++i)
    for (int k = 0; k < 4; ++k) data(i, k) = static_cast<float>(0.1 * rng.normal());
  for (int k = 0; k < 4; ++k) data(n - 1, k) = 100.0f;
  IsolationForest forest(100, 64, 15);
  forest.fit(data);
  const auto scores = forest.scores(data);
  const auto max_it = std::max_element(scores.begin(), scores.end());
  EXPECT_EQ(max_it - scores.begin(), n - 1);
  EXPECT_GT(*max_it, 0.5);
}

TEST(IsolationForest, DuplicatesGetIdenticalScores) {
  Rng rng(16);
  Tensor<float> data({40, 3});
  for (int i = 0; i < 20; ++i)
    for (int k = 0; k < 3; ++k) {
      const float v = static_cast<float>(rng.normal());
      data(i, k) = v;
      data(i + 20, k) = v;
    }
  IsolationForest forest(50, 20, 17);
  forest.fit(data);
  const auto s = forest.scores(data);
  for (int i = 0; i < 20; ++i) EXPECT_DOUBLE_EQ(s[static_cast<std::size_t>(i)], s[static_cast<std::size_t>(i + 20)]);
}

TEST(IsolationForest, RefitWithSameSeedIsIdentical) {
  Rng rng(18);
  Tensor<float> data({64, 5});
  for (float& v : data.data) v = static_cast<float>(rng.normal());
  IsolationForest a(30, 32, 19), b(30, 32, 19);
  a.fit(data);
  b.fit(data);
  const auto sa = a.scores(data), sb = b.scores(data);
  EXPECT_EQ(sa, sb);
}

TEST(IsolationForest, ScoreOrderingInvariantToConstantFeatureShift) {
  Rng rng(20);
  Tensor<float> data({50, 4});
  for (float& v : data.data) v = static_cast<float>(rng.normal());
  Tensor<float> shifted = data;
  for (float& v : shifted.data) v += 5.0f;
  IsolationForest a(40, 25, 21), b(40, 25, 21);
  a.fit(data);
  b.fit(shifted);
  const auto sa = a.scores(data), sb = b.scores(shifted);
  // Compare rank orderings.
  auto ranks = [](const std::vector<double>& s) {
    std::vector<int> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int x, int y) { return s[static_cast<std::size_t>(x)] < s[static_cast<std::size_t>(y)]; });
    return idx;
  };
  EXPECT_EQ(ranks(sa), ranks(sb));
}

TEST(IsolationForest, RejectsOversizedSubsample) {
  Tensor<float> data({10, 2});
  IsolationForest forest(10, 32, 22);
  EXPECT_THROW(forest.fit(data), std::invalid_argument);
}

TEST(StealthReport, ZeroTriggerSentinel) {
  Dataset ds = tiny_dataset(2, 3, 23);
  TriggerSet zero_set;
  Trigger t;
  t.index = 1;
  t.offset = 0;
  t.len = 4;
  t.pattern.assign(8, 0.0f);
  zero_set.triggers = {t};
  const StealthReport rep = stealth_report(frame_ptrs(ds.frames), zero_set);
  EXPECT_DOUBLE_EQ(rep.mean_delta_l2, 0.0);
  EXPECT_TRUE(rep.snr_infinite);
  EXPECT_TRUE(std::isinf(rep.mean_snr_db));
}

TEST(StealthReport, ClosedFormSnrOnUnitPowerFrames) {
  // Unit-power frames have energy 2W = 512; a sigma=0.1, L=48 trigger on both
  // rows carries ~0.96 expected energy: SNR ~ 10 log10(512/0.96) ~ 27.3 dB.
  Dataset ds = tiny_dataset(4, 50, 24);
  const TriggerSet set = gen_trigger_set(8, 48, 0.1, 0, 25);
  const StealthReport rep = stealth_report(frame_ptrs(ds.frames), set);
  EXPECT_NEAR(rep.mean_snr_db, 27.3, 1.2);
  // Exact check against the realized trigger energies.
  double expect = 0.0;
  for (const auto& t : set.triggers) expect += 10.0 * std::log10(512.0 / t.energy());
  expect /= set.size();
  EXPECT_NEAR(rep.mean_snr_db, expect, 1e-6);
}
