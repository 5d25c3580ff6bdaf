#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "lymphdet/synthetic.h"
#include "lymphdet/trainer.h"

namespace lymphdet {
namespace {

namespace fs = std::filesystem;

NetworkConfig tiny() {
  NetworkConfig c;
  c.base_channels = 4;
  c.scales = 2;
  return c;
}

std::vector<FovPtr> synthetic_fovs(int n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  SceneSpec spec;
  spec.height = spec.width = 112;
  spec.lymphocytes = 2;
  spec.distractors = 1;
  spec.margin = 20;
  std::vector<FovPtr> out;
  std::optional<StainReference> ref;
  for (int i = 0; i < n; ++i) {
    const SyntheticScene s = generate_scene(spec, rng);
    if (!ref) ref = fit_reference(s.image);
    out.push_back(make_sample("s" + std::to_string(i), s.image, s.truth, ref));
  }
  return out;
}

Tensor<double> probs_of(std::initializer_list<double> p1) {
  Tensor<double> t(2, 1, static_cast<int>(p1.size()));
  int i = 0;
  for (double p : p1) {
    t.at(1, 0, i) = p;
    t.at(0, 0, i) = 1 - p;
    ++i;
  }
  return t;
}

TEST(Loss, PerfectPredictionIsZero) {
  LabelMap l(1, 3, 1);
  l.values() = {2, 1, 0};
  WeightMap w(1, 3, 1);
  w.values() = {1.0f, 0.5f, 0.0f};
  EXPECT_DOUBLE_EQ(weighted_cross_entropy(probs_of({1.0, 0.0, 0.3}), l, w), 0.0);
}

TEST(Loss, UniformPredictionIsLog2) {
  LabelMap l(1, 4, 1);
  l.values() = {2, 1, 2, 1};
  WeightMap w(1, 4, 1);
  w.values() = {1.0f, 0.5f, 0.5f, 1.0f};
  EXPECT_NEAR(weighted_cross_entropy(probs_of({0.5, 0.5, 0.5, 0.5}), l, w), std::log(2.0), 1e-12);
}

TEST(Loss, WeightedAverage) {
  LabelMap l(1, 2, 1);
  l.values() = {2, 1};
  WeightMap w(1, 2, 1);
  w.values() = {1.0f, 0.5f};
  const double a = -std::log(0.8), b = -std::log(1 - 0.3);
  EXPECT_NEAR(weighted_cross_entropy(probs_of({0.8, 0.3}), l, w), (a + 0.5 * b) / 1.5, 1e-12);
}

TEST(Loss, NoWeightIsZeroWithZeroGradient) {
  LabelMap l(1, 2, 1, 0);
  WeightMap w(1, 2, 1, 0.0f);
  Tensor<double> g;
  EXPECT_EQ(weighted_cross_entropy(probs_of({0.2, 0.9}), l, w, &g), 0.0);
  for (double v : g.values) EXPECT_EQ(v, 0.0);
}

struct PatchCase {
  Tensor<double> x;
  LabelMap labels;
  WeightMap weights;
};

PatchCase random_patch(int size, uint64_t seed) {
  std::mt19937_64 rng(seed);
  PatchCase c{Tensor<double>(3, size, size), LabelMap(size, size, 1), WeightMap(size, size, 1)};
  for (auto& v : c.x.values) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  for (size_t i = 0; i < c.labels.size(); ++i) {
    c.labels.values()[i] = static_cast<uint8_t>(rng() % 3);
    c.weights.values()[i] = c.labels.values()[i] ? (rng() % 2 ? 1.0f : 0.5f) : 0.0f;
  }
  return c;
}

TEST(Loss, ZeroWeightsLeaveOnlyL2Gradient) {
  const FcnNetwork<double> net(tiny());
  const ParamSet<double> p = net.init_params(1);
  PatchCase c = random_patch(16, 2);
  std::fill(c.weights.values().begin(), c.weights.values().end(), 0.0f);
  ParamSet<double> g;
  const auto loss = loss_and_gradient(net, p, c.x, c.labels, c.weights, Mode::kEval, nullptr,
                                      1e-3, g);
  EXPECT_EQ(loss.data, 0.0);
  for (size_t t = 0; t < p.tensors.size(); ++t) {
    for (size_t i = 0; i < p.tensors[t].values.size(); ++i) {
      const double want = p.tensors[t].is_kernel ? 2e-3 * p.tensors[t].values[i] : 0.0;
      EXPECT_NEAR(g.tensors[t].values[i], want, 1e-15);
    }
  }
}

TEST(Loss, WeightScaleInvariance) {
  const FcnNetwork<double> net(tiny());
  const ParamSet<double> p = net.init_params(3);
  PatchCase c = random_patch(16, 4);
  ParamSet<double> g1, g2;
  const auto l1 = loss_and_gradient(net, p, c.x, c.labels, c.weights, Mode::kEval, nullptr,
                                    1e-5, g1);
  for (auto& v : c.weights.values()) v *= 2.0f;
  const auto l2 = loss_and_gradient(net, p, c.x, c.labels, c.weights, Mode::kEval, nullptr,
                                    1e-5, g2);
  EXPECT_NEAR(l1.total(), l2.total(), 1e-13);
  for (size_t t = 0; t < g1.tensors.size(); ++t) {
    for (size_t i = 0; i < g1.tensors[t].values.size(); ++i) {
      EXPECT_NEAR(g1.tensors[t].values[i], g2.tensors[t].values[i], 1e-13);
    }
  }
}

TEST(Loss, SmallStepDescends) {
  const FcnNetwork<double> net(tiny());
  ParamSet<double> p = net.init_params(5);
  const PatchCase c = random_patch(16, 6);
  ParamSet<double> g;
  const double before =
      loss_and_gradient(net, p, c.x, c.labels, c.weights, Mode::kEval, nullptr, 1e-5, g).total();
  for (size_t t = 0; t < p.tensors.size(); ++t) {
    for (size_t i = 0; i < p.tensors[t].values.size(); ++i) {
      p.tensors[t].values[i] -= 1e-6 * g.tensors[t].values[i];
    }
  }
  ParamSet<double> unused;
  const double after =
      loss_and_gradient(net, p, c.x, c.labels, c.weights, Mode::kEval, nullptr, 1e-5, unused)
          .total();
  EXPECT_LT(after, before);
}

TEST(Schedule, StandardRows) {
  const Schedule s = Schedule::standard();
  const std::vector<std::tuple<int, double, double>> want{
      {1, 1e-4, 0.9},    {50, 1e-4, 0.9},    {51, 1e-5, 0.99}, {60, 1e-5, 0.99},
      {120, 1e-5, 0.99}, {121, 1e-6, 0.999}, {200, 1e-6, 0.999}, {250, 1e-6, 0.999}};
  for (auto [epoch, lr, mom] : want) {
    EXPECT_EQ(s.lookup(epoch).learning_rate, lr) << epoch;
    EXPECT_EQ(s.lookup(epoch).momentum, mom) << epoch;
  }
  EXPECT_THROW(s.lookup(0), InvalidInput);
}

TEST(Schedule, Validation) {
  EXPECT_THROW(Schedule({}), InvalidInput);
  EXPECT_THROW(Schedule({{2, 5, 1e-3, 0.9}}), InvalidInput);
  EXPECT_THROW(Schedule({{1, 5, 1e-3, 0.9}, {7, 9, 1e-3, 0.9}}), InvalidInput);
  EXPECT_THROW(Schedule({{1, 5, 1e-3, 1.0}}), InvalidInput);
  EXPECT_EQ(Schedule::constant(0.1, 0.5).lookup(1000).learning_rate, 0.1);
}

TrainOptions quick_options(int epochs) {
  TrainOptions o;
  o.epochs = epochs;
  o.train_epoch_size = 10;
  o.val_epoch_size = 4;
  o.augment.patch_size = 32;
  o.schedule = Schedule::constant(0.01, 0.9);
  return o;
}

TEST(Train, LossFallsOnSyntheticData) {
  const FcnNetwork<float> net(tiny());
  const SourceData src = split_source("syn", synthetic_fovs(6, 1), 0.8, 2);
  TrainOptions o = quick_options(30);
  o.patience = 100;
  const TrainState s = train(net, make_train_state(net.init_params(3), 4), {src}, o);
  ASSERT_EQ(s.history.size(), 30u);
  double first = 0, last = 0;
  for (int i = 0; i < 3; ++i) {
    first += s.history[i].train_loss;
    last += s.history[27 + i].train_loss;
  }
  EXPECT_LT(last, 0.1 * first);
}

TEST(Train, DeterministicUnderSeeds) {
  const FcnNetwork<float> net(tiny());
  const SourceData src = split_source("syn", synthetic_fovs(4, 5), 0.5, 6);
  const TrainOptions o = quick_options(3);
  const TrainState a = train(net, make_train_state(net.init_params(1), 2), {src}, o);
  const TrainState b = train(net, make_train_state(net.init_params(1), 2), {src}, o);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    EXPECT_EQ(a.history[i].val_loss, b.history[i].val_loss);
  }
  for (size_t t = 0; t < a.params.tensors.size(); ++t) {
    EXPECT_EQ(a.params.tensors[t].values, b.params.tensors[t].values);
  }
}

TEST(Train, PatienceZeroStopsAtFirstStall) {
  const FcnNetwork<float> net(tiny());
  const SourceData src = split_source("syn", synthetic_fovs(4, 7), 0.5, 8);
  TrainOptions o = quick_options(40);
  o.patience = 0;
  o.schedule = Schedule::constant(0.5, 0.9);  // large enough to stall quickly
  const TrainState s = train(net, make_train_state(net.init_params(1), 2), {src}, o);
  ASSERT_LT(s.history.size(), 40u);
  const auto& h = s.history;
  EXPECT_GE(h.back().val_loss, s.best_val_loss);
  for (size_t i = 1; i + 1 < h.size(); ++i) {
    EXPECT_LT(h[i].val_loss, h[i - 1].val_loss);
  }
}

TEST(Train, ReturnsBestValidationParameters) {
  const FcnNetwork<float> net(tiny());
  const SourceData src = split_source("syn", synthetic_fovs(4, 9), 0.5, 10);
  TrainOptions o = quick_options(8);
  o.patience = 100;
  o.schedule = Schedule::constant(0.3, 0.9);
  const TrainState s = train(net, make_train_state(net.init_params(1), 2), {src}, o);
  const double again = validation_loss(net, s.params, {src}, o.val_epoch_size, o.augment,
                                       o.validation_seed);
  EXPECT_NEAR(again, s.best_val_loss, 1e-6);
  EXPECT_EQ(s.history[s.best_epoch - 1].val_loss, s.best_val_loss);
}

TEST(Train, AlternatesSources) {
  const FcnNetwork<float> net(tiny());
  const auto fovs = synthetic_fovs(4, 11);
  const SourceData a{"a", {fovs[0]}, {}}, b{"b", {fovs[1]}, {}};
  TrainOptions o = quick_options(1);
  o.train_epoch_size = 7;
  const TrainState s = train(net, make_train_state(net.init_params(1), 2), {a, b}, o);
  EXPECT_EQ(s.source_toggle, 7u);
  EXPECT_EQ(s.iteration, 7);
  EXPECT_TRUE(std::isnan(s.history[0].val_loss));
}

TEST(Train, WritesLogAndCheckpoints) {
  const fs::path dir = fs::temp_directory_path() / "lymphdet_train_test";
  fs::remove_all(dir);
  const FcnNetwork<float> net(tiny());
  const SourceData src = split_source("syn", synthetic_fovs(4, 12), 0.5, 13);
  TrainOptions o = quick_options(2);
  o.output_dir = dir;
  o.checkpoint_every = 1;
  o.checkpoint_template.config = tiny();
  train(net, make_train_state(net.init_params(1), 2), {src}, o);
  EXPECT_TRUE(fs::exists(dir / "loss_log.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "epoch_0001" / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "epoch_0002" / "metadata.json"));
  EXPECT_TRUE(fs::exists(dir / "best" / "manifest.json"));
  fs::remove_all(dir);
}

TEST(FineTune, JobSizes) {
  const auto prior = synthetic_fovs(20, 14);
  const auto corrections = synthetic_fovs(5, 15);
  const FineTuneJob job = assemble_finetune_job(corrections, prior, 3);
  EXPECT_EQ(job.corrections.size(), 5u);
  EXPECT_EQ(job.prior_train.size(), 5u);
  EXPECT_EQ(job.prior_val.size(), 5u);
  std::set<const FovSample*> a, b;
  for (const auto& f : job.prior_train) a.insert(f.get());
  for (const auto& f : job.prior_val) b.insert(f.get());
  EXPECT_EQ(a.size(), 5u);
  for (const auto* f : b) EXPECT_FALSE(a.count(f));

  const FineTuneJob small = assemble_finetune_job(corrections, {prior.begin(), prior.begin() + 7}, 3);
  EXPECT_EQ(small.prior_train.size(), 3u);
  EXPECT_EQ(small.prior_val.size(), 3u);
  const FineTuneJob none = assemble_finetune_job(corrections, {}, 3);
  EXPECT_TRUE(none.prior_train.empty());
  EXPECT_THROW(assemble_finetune_job({}, prior, 3), InvalidInput);
}

TEST(FineTune, WithoutPriorDataRunsFixedEpochs) {
  const FcnNetwork<float> net(tiny());
  const FineTuneJob job = assemble_finetune_job(synthetic_fovs(2, 16), {}, 1);
  FineTuneOptions o;
  o.train_epoch_size = 3;
  o.augment.patch_size = 32;
  const TrainState s = finetune(net, net.init_params(1), job, o);
  EXPECT_EQ(s.history.size(), 5u);
  EXPECT_EQ(s.history[0].learning_rate, 1e-6);
  EXPECT_EQ(s.history[0].momentum, 0.999);
}

TEST(FineTune, StallingValidationKeepsParent) {
  const FcnNetwork<float> net(tiny());
  const ParamSet<float> parent = net.init_params(1);
  const FineTuneJob job = assemble_finetune_job(synthetic_fovs(2, 17), synthetic_fovs(4, 18), 1);
  FineTuneOptions o;
  o.train_epoch_size = 3;
  o.val_epoch_size = 3;
  o.patience = 1;
  o.learning_rate = 10.0;  // diverges, so validation never improves
  o.momentum = 0.0;
  o.augment.patch_size = 32;
  const TrainState s = finetune(net, parent, job, o);
  EXPECT_EQ(s.best_epoch, 0);
  EXPECT_EQ(s.history.size(), 2u);
  for (size_t t = 0; t < parent.tensors.size(); ++t) {
    EXPECT_EQ(s.params.tensors[t].values, parent.tensors[t].values);
  }
}

}  // namespace
}  // namespace lymphdet
