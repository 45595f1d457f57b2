// Metric oracles on tiny hand-checkable fixtures: downstream head capacity,
// CA, UASR, TR counting rules, and argmax invariances.

#include <gtest/gtest.h>

#include "rfbd/eval.hpp"
#include "test_util.hpp"

using namespace rfbd;
using testutil::random_tensor;

namespace {

// Identity-style encoder: dense-only model whose representation is an affine
// map of the pooled input. Handy because tests can steer it exactly.
Encoder<float> scaled_identity_encoder(int width) {
  Encoder<float> enc({}, 2, width, 1);
  enc.output_layer().w.fill(0.0f);
  enc.output_layer().w(0, 0) = 1.0f;
  enc.output_layer().w(1, 1) = 1.0f;
  enc.output_layer().b.fill(0.0f);
  return enc;
}

// Frames whose pooled (mean I, mean Q) is exactly the given point.
IQFrame point_frame(int width, double mi, double mq, int device) {
  IQFrame f(width, Domain::time, device);
  for (int k = 0; k < width; ++k) {
    f.i(k) = mi;
    f.q(k) = mq;
  }
  return f;
}

ClassifierHead<float> manual_head(std::vector<std::vector<float>> w, std::vector<float> b) {
  ClassifierHead<float> head(static_cast<int>(w[0].size()), static_cast<int>(w.size()), 0);
  for (std::size_t r = 0; r < w.size(); ++r)
    for (std::size_t c = 0; c < w[r].size(); ++c)
      head.fc.w(static_cast<std::int64_t>(r), static_cast<std::int64_t>(c)) = w[r][c];
  for (std::size_t r = 0; r < b.size(); ++r) head.fc.b.data[r] = b[r];
  return head;
}

}  // namespace

TEST(TrainDownstream, SeparableRepresentationsReachPerfectTraining) {
  Rng rng(1);
  const int n = 60;
  Tensor<float> reps({n, 2});
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    const int y = i % 2;
    reps(i, 0) = static_cast<float>((y == 0 ? -1.0 : 1.0) + 0.05 * rng.normal());
    reps(i, 1) = static_cast<float>(0.05 * rng.normal());
    labels[static_cast<std::size_t>(i)] = y;
  }
  DownstreamConfig cfg;
  cfg.epochs = 100;
  auto head = train_head_on_reps(reps, labels, 2, cfg, 2);
  const auto pred = predict(head, reps);
  int correct = 0;
  for (int i = 0; i < n; ++i) correct += pred[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(i)];
  EXPECT_EQ(correct, n);
}

TEST(TrainDownstream, IdenticalRepresentationsAreChanceLevel) {
  Tensor<float> reps({40, 3});
  for (float& v : reps.data) v = 1.0f;
  std::vector<int> labels(40);
  for (int i = 0; i < 40; ++i) labels[static_cast<std::size_t>(i)] = i % 2;
  DownstreamConfig cfg;
  cfg.epochs = 50;
  auto head = train_head_on_reps(reps, labels, 2, cfg, 3);
  const auto pred = predict(head, reps);
  int correct = 0;
  for (int i = 0; i < 40; ++i) correct += pred[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(i)];
  EXPECT_NEAR(static_cast<double>(correct) / 40.0, 0.5, 0.05);
}

TEST(TrainDownstream, HeadShapeAndSingleClassRejection) {
  Encoder<float> enc({4}, 8, 64, 1);
  DatasetSpec spec;
  spec.num_devices = 2;
  spec.frames_per_device = 5;
  spec.seed = 4;
  Dataset ds = build_dataset(spec, 64);
  DownstreamConfig cfg;
  cfg.epochs = 2;
  auto head = train_downstream(enc, frame_ptrs(ds.frames), 2, cfg, 5);
  EXPECT_EQ(head.fc.w.shape, (std::vector<std::int64_t>{2, 8}));
  // Single-class training set is rejected.
  std::vector<const IQFrame*> one_class;
  for (const auto& f : ds.frames)
    if (f.device_id == 0) one_class.push_back(&f);
  EXPECT_THROW(train_downstream(enc, one_class, 2, cfg, 5), std::invalid_argument);
  std::vector<const IQFrame*> empty;
  EXPECT_THROW(train_downstream(enc, empty, 2, cfg, 5), std::invalid_argument);
}

TEST(ClassificationAccuracy, AllCorrectAndEmptyGuard) {
  auto enc = scaled_identity_encoder(64);
  // Head that classifies by sign of mean I.
  auto head = manual_head({{-1.0f, 0.0f}, {1.0f, 0.0f}}, {0.0f, 0.0f});
  std::vector<IQFrame> frames;
  frames.push_back(point_frame(64, -0.5, 0.1, 0));
  frames.push_back(point_frame(64, 0.7, -0.2, 1));
  frames.push_back(point_frame(64, -0.3, 0.0, 0));
  EXPECT_DOUBLE_EQ(classification_accuracy(head, enc, frame_ptrs(frames), Domain::time), 1.0);
  std::vector<const IQFrame*> empty;
  EXPECT_THROW(classification_accuracy(head, enc, empty, Domain::time), std::invalid_argument);
}

TEST(ClassificationAccuracy, RandomLabelsSitAtChance) {
  auto enc = scaled_identity_encoder(64);
  ClassifierHead<float> head(2, 10, 9);  // random head, 10 classes
  Rng rng(10);
  std::vector<IQFrame> frames;
  for (int i = 0; i < 2000; ++i)
    frames.push_back(point_frame(64, rng.normal(), rng.normal(), static_cast<int>(rng.uniform_int(10))));
  const double ca = classification_accuracy(head, enc, frame_ptrs(frames), Domain::time);
  EXPECT_NEAR(ca, 0.1, 0.03);
}

TEST(Uasr, AllWrongGivesOne) {
  auto enc = scaled_identity_encoder(64);
  // Head predicts class 0 for mean I < 0, class 1 otherwise.
  auto head = manual_head({{-1.0f, 0.0f}, {1.0f, 0.0f}}, {0.0f, 0.0f});
  // Frames of device 0 at strongly positive mean I: always predicted 1.
  std::vector<IQFrame> frames;
  for (int i = 0; i < 10; ++i) frames.push_back(point_frame(64, 0.8, 0.0, 0));
  TriggerSet zero_set;
  Trigger t;
  t.index = 1;
  t.offset = 0;
  t.len = 4;
  t.pattern.assign(8, 0.0f);
  zero_set.triggers = {t};
  const UasrResult r = uasr(head, enc, frame_ptrs(frames), zero_set, Domain::time);
  EXPECT_DOUBLE_EQ(r.value, 1.0);
  EXPECT_EQ(r.histogram[0][1], 10);
  EXPECT_EQ(r.correct_counts[0], 0);
  TriggerSet empty_set;
  EXPECT_THROW(uasr(head, enc, frame_ptrs(frames), empty_set, Domain::time), std::invalid_argument);
}

TEST(Uasr, NegligibleTriggerMatchesOneMinusCa) {
  auto enc = scaled_identity_encoder(64);
  auto head = manual_head({{-1.0f, 0.0f}, {1.0f, 0.0f}}, {0.0f, 0.0f});
  Rng rng(11);
  std::vector<IQFrame> frames;
  for (int i = 0; i < 50; ++i) {
    const int dev = static_cast<int>(rng.uniform_int(2));
    // Devices mostly but not perfectly separable by mean I.
    frames.push_back(point_frame(64, (dev == 0 ? -0.2 : 0.2) + 0.25 * rng.normal(), 0.0, dev));
  }
  TriggerSet tiny = gen_trigger_set(1, 4, 1e-9, 0, 12, 64);
  const double ca = classification_accuracy(head, enc, frame_ptrs(frames), Domain::time);
  const UasrResult r = uasr(head, enc, frame_ptrs(frames), tiny, Domain::time);
  EXPECT_NEAR(r.value, 1.0 - ca, 1e-12);
}

TEST(TargetedRatio, CountingRules) {
  // 8 triggers, each dominating a distinct wrong class -> TR = 1.
  {
    std::vector<std::vector<long>> wrong(8, std::vector<long>(10, 0));
    std::vector<long> correct(8, 0);
    for (int j = 0; j < 8; ++j) wrong[static_cast<std::size_t>(j)][static_cast<std::size_t>(j)] = 5;
    EXPECT_DOUBLE_EQ(targeted_ratio(wrong, correct), 1.0);
  }
  // All eight dominated by one class -> TR = 1/8.
  {
    std::vector<std::vector<long>> wrong(8, std::vector<long>(10, 0));
    std::vector<long> correct(8, 0);
    for (int j = 0; j < 8; ++j) wrong[static_cast<std::size_t>(j)][3] = 7;
    EXPECT_DOUBLE_EQ(targeted_ratio(wrong, correct), 0.125);
  }
  // An inert trigger (zero misclassifications) contributes nothing: 7/8.
  {
    std::vector<std::vector<long>> wrong(8, std::vector<long>(10, 0));
    std::vector<long> correct(8, 0);
    for (int j = 0; j < 7; ++j) wrong[static_cast<std::size_t>(j)][static_cast<std::size_t>(j)] = 5;
    correct[7] = 9;  // all predictions correct for trigger 8
    EXPECT_DOUBLE_EQ(targeted_ratio(wrong, correct), 0.875);
  }
  // Majority-correct triggers are inert even with some wrong predictions.
  {
    std::vector<std::vector<long>> wrong(2, std::vector<long>(4, 0));
    std::vector<long> correct(2, 0);
    wrong[0][1] = 2;
    correct[0] = 8;  // 80% correct -> inert
    wrong[1][2] = 9;
    correct[1] = 1;
    EXPECT_DOUBLE_EQ(targeted_ratio(wrong, correct), 0.5);
  }
}

TEST(TriggerOnlyDrop, ZeroAmplitudeTriggersGiveZeroDrop) {
  auto enc = scaled_identity_encoder(64);
  auto head = manual_head({{-1.0f, 0.0f}, {1.0f, 0.0f}}, {0.0f, 0.0f});
  std::vector<IQFrame> frames;
  frames.push_back(point_frame(64, -0.5, 0.0, 0));
  frames.push_back(point_frame(64, 0.5, 0.0, 1));
  TriggerSet zero_set;
  Trigger t;
  t.index = 1;
  t.offset = 0;
  t.len = 4;
  t.pattern.assign(8, 0.0f);
  zero_set.triggers = {t};
  const double drop = trigger_only_drop(enc, head, frame_ptrs(frames), zero_set, Domain::time);
  EXPECT_DOUBLE_EQ(drop, 0.0);
}

TEST(Metrics, InvariantToPositiveLogitRescale) {
  auto enc = scaled_identity_encoder(64);
  Rng rng(13);
  std::vector<IQFrame> frames;
  for (int i = 0; i < 30; ++i)
    frames.push_back(point_frame(64, rng.normal(), rng.normal(), static_cast<int>(rng.uniform_int(3))));
  auto head = manual_head({{0.4f, -0.1f}, {-0.3f, 0.8f}, {0.1f, 0.2f}}, {0.01f, -0.02f, 0.0f});
  TriggerSet trig = gen_trigger_set(2, 8, 0.2, 0, 14, 64);
  const UasrResult base = uasr(head, enc, frame_ptrs(frames), trig, Domain::time);
  // Scale W and b by a positive constant: argmax unchanged.
  ClassifierHead<float> scaled = head;
  for (float& v : scaled.fc.w.data) v *= 7.5f;
  for (float& v : scaled.fc.b.data) v *= 7.5f;
  const UasrResult after = uasr(scaled, enc, frame_ptrs(frames), trig, Domain::time);
  EXPECT_DOUBLE_EQ(base.value, after.value);
  EXPECT_EQ(base.histogram, after.histogram);
  EXPECT_DOUBLE_EQ(targeted_ratio(base.wrong_histogram, base.correct_counts),
                   targeted_ratio(after.wrong_histogram, after.correct_counts));
}
