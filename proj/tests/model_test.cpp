#include <cmath>
#include <cstdio>
#include <vector>

#include "glam/model.hpp"
#include "glam/serialize.hpp"
#include "gtest/gtest.h"
#include "test_util.hpp"

using namespace glam;

namespace {

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.img_h = cfg.img_w = 32;
  cfg.patch = 4;
  cfg.chans = 8;
  cfg.window = 4;
  cfg.ng = 2;
  cfg.classes = 5;
  cfg.heads = 2;
  cfg.depths = {2, 2};
  return cfg;
}

ModelConfig single_stage_config() {
  ModelConfig cfg;
  cfg.img_h = cfg.img_w = 32;
  cfg.patch = 4;
  cfg.chans = 8;
  cfg.window = 4;
  cfg.ng = 2;
  cfg.classes = 3;
  cfg.heads = 2;
  cfg.depths = {2};
  return cfg;
}

// Pixel-level perturbation of every window except (0, 0) at the finest
// grid; per-pixel values vary so the change survives normalization.
Tensor<double> perturb_other_windows(const Tensor<double>& image, int win_px) {
  auto out = image.detach();
  int h = static_cast<int>(image.dim(1));
  int w = static_cast<int>(image.dim(2));
  Rng rng(777);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (y < win_px && x < win_px) continue;  // window (0,0) untouched
      for (int c = 0; c < 3; ++c)
        out.mutable_values()[static_cast<std::size_t>((y * w + x) * 3 + c)] =
            rng.uniform(-5.0, 5.0);
    }
  return out;
}

}  // namespace

TEST(ModelConfig, ValidationErrors) {
  auto cfg = toy_config();
  cfg.img_h = 30;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = toy_config();
  cfg.depths = {2, 2, 2};  // stage-2 grid would be 2 < window 4
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = toy_config();
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = toy_config();
  cfg.glam_stages = {1};
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_NO_THROW(toy_config().validate());
}

TEST(SegModel, ForwardShapeAndDeterminism) {
  auto cfg = toy_config();
  Rng r1(100), r2(100), dat(5);
  auto m1 = SegModel<double>::build(cfg, r1);
  auto m2 = SegModel<double>::build(cfg, r2);
  auto img = Tensor<double>::uniform({2, 32, 32, 3}, dat, 0.0, 1.0);
  auto l1 = m1.forward(img);
  auto l2 = m2.forward(img);
  EXPECT_EQ(l1.shape(), (Shape{2, 64, 5}));
  EXPECT_EQ(l1.values(), l2.values());
  for (double v : l1.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(SegModel, SingleClassSoftmaxTrivial) {
  auto cfg = single_stage_config();
  cfg.classes = 1;
  Rng rng(101), dat(6);
  auto m = SegModel<double>::build(cfg, rng);
  auto img = Tensor<double>::uniform({1, 32, 32, 3}, dat, 0.0, 1.0);
  auto logits = m.forward(img);
  EXPECT_EQ(logits.shape(), (Shape{1, 64, 1}));
  auto probs = softmax_rows(logits);
  for (double v : probs.values()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(SegModel, CrossWindowLocalityTheorem) {
  auto cfg = single_stage_config();
  cfg.gmsa = false;
  Rng rng(102), dat(7);
  auto off = SegModel<double>::build(cfg, rng);
  auto img = Tensor<double>::uniform({1, 32, 32, 3}, dat, 0.0, 1.0);
  auto img2 = perturb_other_windows(img, cfg.window * cfg.patch);

  auto base = off.forward(img);
  auto pert = off.forward(img2);
  // Window (0,0) covers patch rows/cols 0..3 of the 8x8 grid.
  for (i64 pr = 0; pr < 4; ++pr)
    for (i64 pc = 0; pc < 4; ++pc)
      for (i64 k = 0; k < 3; ++k)
        EXPECT_EQ(base.at({0, pr * 8 + pc, k}), pert.at({0, pr * 8 + pc, k}));

  cfg.gmsa = true;
  Rng rng2(102);
  auto on = SegModel<double>::build(cfg, rng2);
  auto base_on = on.forward(img);
  auto pert_on = on.forward(img2);
  double diff = 0;
  for (i64 pr = 0; pr < 4; ++pr)
    for (i64 pc = 0; pc < 4; ++pc)
      for (i64 k = 0; k < 3; ++k)
        diff = std::max(diff, std::fabs(base_on.at({0, pr * 8 + pc, k}) -
                                        pert_on.at({0, pr * 8 + pc, k})));
  EXPECT_GT(diff, 0.0);
  std::printf("cross-window logit response (init weights): %.3g\n", diff);
}

TEST(SegModel, CaptureStageRecords) {
  auto cfg = toy_config();
  Rng rng(103), dat(8);
  auto m = SegModel<double>::build(cfg, rng);
  auto img = Tensor<double>::uniform({1, 32, 32, 3}, dat, 0.0, 1.0);
  // Capture points: enc0, enc1, dec0.
  EXPECT_EQ(cfg.capture_points(), 3);
  for (int stage = 0; stage < 3; ++stage) {
    CaptureRequest cap;
    cap.stage = stage;
    m.forward(img, &cap);
    ASSERT_TRUE(cap.done);
    EXPECT_EQ(cap.record.ng, 2);
    EXPECT_TRUE(cap.record.head_averaged);
    i64 s = cap.record.seq();
    for (i64 r = 0; r < cap.record.nr; ++r)
      for (i64 i = 0; i < s; ++i) {
        double sum = 0;
        for (i64 j = 0; j < s; ++j) sum += cap.record.a_at(r, i, j);
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
  }
  CaptureRequest bad;
  bad.stage = 3;
  EXPECT_THROW(m.forward(img, &bad), IndexError);
}

TEST(SegModel, CheckpointRoundTripAndValidation) {
  auto cfg = toy_config();
  Rng r1(104), r2(200), dat(9);
  auto m1 = SegModel<float>::build(cfg, r1);
  auto m2 = SegModel<float>::build(cfg, r2);
  auto p1 = m1.params();
  save_checkpoint("/tmp/glam_model_test.ckpt", p1);
  auto p2 = m2.params();
  load_checkpoint("/tmp/glam_model_test.ckpt", p2);
  auto img = Tensor<float>::uniform({1, 32, 32, 3}, dat, 0.0, 1.0);
  EXPECT_EQ(m1.forward(img).values(), m2.forward(img).values());

  // Shape validation: a model with different width must reject the file.
  auto cfg3 = cfg;
  cfg3.chans = 16;
  Rng r3(300);
  auto m3 = SegModel<float>::build(cfg3, r3);
  auto p3 = m3.params();
  EXPECT_THROW(load_checkpoint("/tmp/glam_model_test.ckpt", p3), ConfigError);
}

TEST(SegModel, NoNluVariantRuns) {
  auto cfg = toy_config();
  cfg.nlu = false;
  Rng rng(105), dat(10);
  auto m = SegModel<double>::build(cfg, rng);
  auto img = Tensor<double>::uniform({1, 32, 32, 3}, dat, 0.0, 1.0);
  EXPECT_EQ(m.forward(img).shape(), (Shape{1, 64, 5}));
  // The NLU parameters are gone from the model surface.
  for (auto& [name, t] : m.params()) EXPECT_EQ(name.find("nlu"), std::string::npos);
}

TEST(SegModel, GradientThroughFullToyModel) {
  auto cfg = toy_config();
  cfg.img_h = cfg.img_w = 16;
  cfg.window = 2;
  cfg.ng = 2;
  cfg.chans = 4;
  cfg.heads = 2;
  cfg.depths = {1, 1};
  Rng rng(106), dat(11);
  auto m = SegModel<double>::build(cfg, rng);
  auto params = m.params();
  Rng wr(107);
  test::randomize_params(params, wr, 0.15);
  auto img = Tensor<double>::uniform({1, 16, 16, 3}, dat, 0.0, 1.0);
  std::vector<int> labels(16, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 5);
  labels[3] = -1;  // one ignored patch
  auto loss_fn = [&]() { return seg_loss(m.forward(img), labels, -1); };
  std::vector<Tensor<double>> leaves;
  for (auto& [name, t] : params) leaves.push_back(t);
  Rng pick(108);
  auto rep = test::fd_check(loss_fn, leaves, pick, 3);
  EXPECT_LT(rep.max_rel_err, 1e-4) << "coords " << rep.coords_checked;
}

TEST(Loss, UniformLogitsGiveLogK) {
  auto logits = Tensor<double>::zeros({1, 4, 4});
  std::vector<int> labels{0, 1, 2, 3};
  EXPECT_NEAR(seg_loss(logits, labels).item(), std::log(4.0), 1e-14);
}

TEST(Loss, HugeCorrectLogitsGoToZero) {
  std::vector<double> v(2 * 3, 0.0);
  v[0 * 3 + 1] = 200.0;
  v[1 * 3 + 2] = 200.0;
  auto logits = Tensor<double>::from_values({2, 3}, v);
  EXPECT_LT(seg_loss(logits, {1, 2}).item(), 1e-12);
}

TEST(Loss, MatchesDirectFormulaOracle) {
  Rng rng(109);
  auto logits = Tensor<double>::randn({6, 4}, rng);
  std::vector<int> labels{0, 3, -1, 2, 1, 0};
  double expect = 0;
  int count = 0;
  for (i64 t = 0; t < 6; ++t) {
    if (labels[static_cast<std::size_t>(t)] < 0) continue;
    double denom = 0;
    for (i64 j = 0; j < 4; ++j) denom += std::exp(logits.at({t, j}));
    expect += -std::log(std::exp(logits.at({t, labels[static_cast<std::size_t>(t)]})) / denom);
    ++count;
  }
  expect /= count;
  EXPECT_NEAR(seg_loss(logits, labels, -1).item(), expect, 1e-12);
}

TEST(Metrics, PerfectPrediction) {
  std::vector<int> y{0, 1, 2, 1, 0};
  auto m = compute_metrics(y, y, 3);
  EXPECT_DOUBLE_EQ(m.miou, 1.0);
  EXPECT_DOUBLE_EQ(m.mdice, 1.0);
  EXPECT_DOUBLE_EQ(m.pixel_acc, 1.0);
}

TEST(Metrics, DisjointMasksAreZero) {
  std::vector<int> pred{1, 0};
  std::vector<int> truth{0, 1};
  auto m = compute_metrics(pred, truth, 2);
  EXPECT_DOUBLE_EQ(m.iou[1], 0.0);
  EXPECT_DOUBLE_EQ(m.dice[1], 0.0);
}

TEST(Metrics, HalfOverlapEqualArea) {
  std::vector<int> pred{1, 1, 0, 0};
  std::vector<int> truth{0, 1, 1, 0};
  auto m = compute_metrics(pred, truth, 2);
  EXPECT_NEAR(m.iou[1], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(m.dice[1], 0.5, 1e-15);
}

TEST(Metrics, AbsentClassesExcludedFromMean) {
  std::vector<int> pred{0, 0, 1, 1};
  std::vector<int> truth{0, 0, 1, 1};
  auto m = compute_metrics(pred, truth, 5);
  EXPECT_FALSE(m.present[2]);
  EXPECT_FALSE(m.present[3]);
  EXPECT_FALSE(m.present[4]);
  EXPECT_DOUBLE_EQ(m.miou, 1.0);
}

TEST(Metrics, IgnoredPixelsDoNotCount) {
  std::vector<int> pred{0, 1, 0};
  std::vector<int> truth{0, -1, 1};
  auto m = compute_metrics(pred, truth, 2, -1);
  EXPECT_DOUBLE_EQ(m.pixel_acc, 0.5);
}

TEST(Labels, MajorityVoteDownsample) {
  // 4x4 image, patch 2 -> 2x2 cells.
  std::vector<int> px{
      0, 0, 1, 1,   //
      0, 2, 1, 2,   //
      -1, -1, 2, 2, //
      -1, -1, 2, 0, //
  };
  auto ds = downsample_labels(px, 4, 4, 2, 3, -1);
  EXPECT_EQ(ds[0], 0);   // three 0s, one 2
  EXPECT_EQ(ds[1], 1);   // three 1s? (1,1,1,2) -> 1
  EXPECT_EQ(ds[2], -1);  // all ignored
  EXPECT_EQ(ds[3], 2);   // (2,2,2,0) -> 2
  // Tie goes to the smaller class index.
  std::vector<int> tie{0, 1, 1, 0};
  auto ds2 = downsample_labels(tie, 2, 2, 2, 2, -1);
  EXPECT_EQ(ds2[0], 0);
}
