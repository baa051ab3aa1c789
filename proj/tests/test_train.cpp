#include <gtest/gtest.h>

#include "mct/train.hpp"

using namespace mct;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.grid = 4;
  cfg.image_size = 32;
  cfg.embed_dim = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.fuse_layers = 2;
  return cfg;
}

synth::Dataset small_data(std::size_t n, std::uint64_t seed = 0) {
  synth::DatasetSpec spec;
  spec.num_samples = n;
  spec.image_size = 32;
  spec.min_size = 4;
  spec.max_size = 9;
  spec.seed = seed;
  return synth::generate(spec);
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  // bias-corrected first step is lr * g / (|g| + eps) ~ lr * sign(g)
  ParamStore<double> p{{"w", Tensor<double>::vector({1.0, -2.0})}};
  ParamStore<double> g{{"w", Tensor<double>::vector({0.5, -3.0})}};
  TrainOptions opt;
  opt.lr = 0.1;
  Adam<double> adam(p, opt);
  adam.step(p, g);
  EXPECT_NEAR(p.at("w")[0], 0.9, 1e-7);
  EXPECT_NEAR(p.at("w")[1], -1.9, 1e-7);
}

TEST(Adam, MinimizesAQuadratic) {
  ParamStore<double> p{{"w", Tensor<double>::vector({3.0, -4.0})}};
  TrainOptions opt;
  opt.lr = 0.05;
  Adam<double> adam(p, opt);
  for (int i = 0; i < 2000; ++i) {
    ParamStore<double> g{{"w", Tensor<double>::vector({2 * p.at("w")[0], 2 * p.at("w")[1]})}};
    adam.step(p, g);
  }
  EXPECT_NEAR(p.at("w")[0], 0.0, 1e-3);
  EXPECT_NEAR(p.at("w")[1], 0.0, 1e-3);
}

TEST(Train, OverfitsOneSample) {
  const auto cfg = small_config();
  const auto data = small_data(1);
  TrainOptions opt;
  opt.epochs = 30;
  opt.batch_size = 1;
  auto res = train<float>(data, cfg, opt, 0);
  ASSERT_EQ(res.curve.size(), 30u);
  EXPECT_LT(res.curve.back().total, 0.5 * res.curve.front().total);
  const auto after = evaluate_loss(res.params, cfg, data[0]);
  EXPECT_LT(after.total, res.curve.front().total);
}

TEST(Train, SameSeedSameCurveAndWeights) {
  const auto cfg = small_config();
  const auto data = small_data(6);
  TrainOptions opt;
  opt.epochs = 2;
  opt.batch_size = 4;
  opt.hflip = true;
  auto a = train<float>(data, cfg, opt, 3);
  auto b = train<float>(data, cfg, opt, 3);
  EXPECT_EQ(loss_csv(a.curve), loss_csv(b.curve));
  EXPECT_EQ(a.params, b.params);
  auto c = train<float>(data, cfg, opt, 4);
  EXPECT_NE(loss_csv(a.curve), loss_csv(c.curve));
  // ceil(6 / 4) steps per epoch
  EXPECT_EQ(a.curve.size(), 4u);
}

TEST(Train, ContrastiveTermSeparatesClassTokens) {
  auto cfg = small_config();
  const auto data = small_data(8);
  TrainOptions opt;
  opt.epochs = 5;
  opt.batch_size = 4;
  auto with = train<float>(data, cfg, opt, 1);
  cfg.gamma = 0;
  auto without = train<float>(data, cfg, opt, 1);
  // measure the contrastive term of both models the same way
  auto measure = cfg;
  measure.gamma = 1;
  double cct_with = 0, cct_without = 0;
  for (const auto& s : data) {
    cct_with += evaluate_loss(with.params, measure, s).cct;
    cct_without += evaluate_loss(without.params, measure, s).cct;
  }
  EXPECT_LT(cct_with, cct_without);
}

TEST(Train, LossCsvHasOneRowPerStep) {
  std::vector<LossRecord> rows{{0, 0, 1.5, 0.5, 0.5, 0.5}, {0, 1, 1.25, 0.25, 0.5, 0.5}};
  EXPECT_EQ(loss_csv(rows),
            "epoch,step,loss_total,loss_cls_class,loss_cls_patch,loss_cct\n"
            "0,0,1.5,0.5,0.5,0.5\n0,1,1.25,0.25,0.5,0.5\n");
}

TEST(Train, RejectsBadInputs) {
  const auto cfg = small_config();
  TrainOptions opt;
  EXPECT_THROW(train<float>({}, cfg, opt, 0), ConfigError);
  auto other = cfg;
  other.num_classes = 4;
  EXPECT_THROW(train<float>(small_data(1), other, opt, 0), ConfigError);
  opt.epochs = 0;
  EXPECT_THROW(train<float>(small_data(1), cfg, opt, 0), ConfigError);
}
