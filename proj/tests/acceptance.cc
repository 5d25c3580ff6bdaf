// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "lymphdet/inference.h"
#include "lymphdet/service.h"
#include "lymphdet/synthetic.h"
#include "lymphdet/trainer.h"
#include "support/oracles.h"
#include "support/scratch.h"

// After Eigen: <resolv.h> defines a _res macro.
#include <httplib.h>

namespace lymphdet {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Tolerances.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradFloor = 1e-6;  // magnitudes below this are compared absolutely
constexpr double kGradStep = 1e-4;  // smaller steps are dominated by roundoff
constexpr double kMomentTol = 1e-9;
constexpr double kSoftmaxTol = 1e-6;
constexpr double kMinF1 = 0.90;
constexpr double kMatchTolerance = 10.0;
constexpr int kMaxIterations = 2000;
constexpr double kMaxChangedFraction = 0.01;
constexpr double kSameDetectionTolerance = 1.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// --- gradient ---------------------------------------------------------------

Outcome gradient_check() {
  const Timer timer;
  NetworkConfig cfg;
  cfg.base_channels = 4;
  cfg.scales = 2;
  const FcnNetwork<double> net(cfg);
  ParamSet<double> p = net.init_params(21);
  std::mt19937_64 rng(22);
  // Non-zero biases so their gradients are exercised away from zero.
  for (auto& t : p.tensors) {
    if (!t.is_kernel) {
      for (auto& v : t.values) v = std::normal_distribution<double>(0, 0.1)(rng);
    }
  }
  Tensor<double> x(3, 32, 32);
  for (auto& v : x.values) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  LabelMap labels(32, 32, 1);
  WeightMap weights(32, 32, 1);
  for (auto& v : labels.values()) v = static_cast<uint8_t>(rng() % 3);
  for (size_t i = 0; i < weights.size(); ++i) {
    weights.values()[i] = labels.values()[i] ? (rng() % 2 ? 1.0f : 0.5f) : 0.0f;
  }
  auto loss = [&](ParamSet<double>& grads) {
    std::mt19937_64 drop(5);  // same dropout mask on every evaluation
    return loss_and_gradient(net, p, x, labels, weights, Mode::kTrain, &drop, kDefaultL2, grads)
        .total();
  };
  ParamSet<double> grads, scratch;
  loss(grads);
  double worst = 0.0;
  size_t checked = 0, failed = 0;
  for (size_t t = 0; t < p.tensors.size(); ++t) {
    for (size_t i = 0; i < p.tensors[t].values.size(); ++i) {
      double& w = p.tensors[t].values[i];
      const double keep = w;
      w = keep + kGradStep;
      const double up = loss(scratch);
      w = keep - kGradStep;
      const double down = loss(scratch);
      w = keep;
      const double numeric = (up - down) / (2 * kGradStep);
      const double analytic = grads.tensors[t].values[i];
      const double rel = std::abs(numeric - analytic) /
                         std::max({std::abs(numeric), std::abs(analytic), kGradFloor});
      worst = std::max(worst, rel);
      failed += rel >= kGradRelTol;
      ++checked;
    }
  }
  const double secs = timer.seconds();
  return {failed == 0 && secs < 120.0,
          fmt::format("{} parameters, worst relative error {:.2e} (tol {:.0e}), {} over, {:.1f}s "
                      "(limit 120s)",
                      checked, worst, kGradRelTol, failed, secs)};
}

// --- synthetic overfit ------------------------------------------------------

struct OverfitArtifacts {
  Model model;
  std::vector<FovPtr> train_fovs;
};

std::vector<SyntheticScene> scenes(int n, uint64_t seed, SceneSpec spec = {}) {
  std::mt19937_64 rng(seed);
  std::vector<SyntheticScene> out;
  while (static_cast<int>(out.size()) < n) out.push_back(generate_scene(spec, rng));
  return out;
}

Outcome synthetic_overfit(OverfitArtifacts& out) {
  const Timer timer;
  SceneSpec spec;
  spec.margin = 24;
  const auto train_scenes = scenes(20, 7, spec);
  const auto held_out = scenes(5, 8, spec);
  const StainReference stain = fit_reference(train_scenes.front().image);
  for (size_t i = 0; i < train_scenes.size(); ++i) {
    out.train_fovs.push_back(
        make_sample(fmt::format("train-{:02d}", i), train_scenes[i].image, train_scenes[i].truth,
                    stain));
  }
  // All 20 scenes train; validation only picks the best epoch.
  const SourceData source{"synthetic", out.train_fovs, out.train_fovs};

  NetworkConfig cfg;  // default network
  const FcnNetwork<float> net(cfg);
  TrainOptions opts;
  opts.epochs = 8;
  opts.train_epoch_size = 100;
  opts.val_epoch_size = 10;
  opts.patience = opts.epochs;
  opts.augment.patch_size = 64;
  const int iterations = opts.epochs * opts.train_epoch_size;
  const TrainState state =
      train(net, make_train_state(net.init_params(1), 1), {source}, opts);

  out.model.config = cfg;
  out.model.params = state.params;
  out.model.meta.model_id = "overfit";
  out.model.meta.stain = stain;
  const Detector detector(out.model);
  oracle::MatchCounts total;
  for (const auto& s : held_out) {
    const auto m = oracle::match(detector.detect(s.image), s.lymphocyte_centers(),
                                 kMatchTolerance);
    total.true_positive += m.true_positive;
    total.false_positive += m.false_positive;
    total.false_negative += m.false_negative;
  }
  const double f1 = total.f1();
  const double secs = timer.seconds();
  return {f1 >= kMinF1 && iterations <= kMaxIterations && secs < 1800.0,
          fmt::format("F1 {:.3f} (min {:.2f}; tp {} fp {} fn {}) after {} iterations, patch 64, "
                      "best epoch {}, {:.0f}s",
                      f1, kMinF1, total.true_positive, total.false_positive,
                      total.false_negative, iterations, state.best_epoch, secs)};
}

// --- oracles ----------------------------------------------------------------

Outcome compiler_oracle() {
  std::mt19937_64 rng(31);
  size_t differing = 0;
  for (int k = 0; k < 100; ++k) {
    const AnnotationSet set = oracle::random_annotations(rng, 64, 64);
    const CompiledMaps got = compile_maps(set, 64, 64);
    const CompiledMaps want = oracle::compile(set, 64, 64, kDefaultDilationRadius);
    for (size_t i = 0; i < got.labels.size(); ++i) {
      differing += got.labels.values()[i] != want.labels.values()[i] ||
                   got.weights.values()[i] != want.weights.values()[i];
    }
  }
  return {differing == 0, fmt::format("100 random sets on 64x64, {} differing pixels", differing)};
}

Outcome geometry_oracle() {
  std::mt19937_64 rng(41);
  std::uniform_int_distribution<int> side(1, 32);
  size_t component_mismatches = 0, regions = 0;
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const BinaryMask mask = oracle::random_mask(rng, side(rng), side(rng));
    const auto got = connected_components(mask);
    auto want = oracle::components(mask);
    std::vector<std::vector<Pixel>> got_sets;
    for (const auto& r : got) {
      auto px = r.pixels;
      std::sort(px.begin(), px.end());
      got_sets.push_back(px);
    }
    std::sort(got_sets.begin(), got_sets.end());
    std::sort(want.begin(), want.end());
    if (got_sets != want) {
      ++component_mismatches;
      continue;
    }
    for (const auto& r : got) {
      const auto m = oracle::moments(r.pixels);
      worst = std::max({worst, std::abs(m.row - r.centroid.row), std::abs(m.col - r.centroid.col),
                        std::abs(m.eccentricity - r.eccentricity)});
      ++regions;
    }
  }
  return {component_mismatches == 0 && worst <= kMomentTol,
          fmt::format("100 masks, {} component mismatches, {} regions, worst moment error {:.1e} "
                      "(tol {:.0e})",
                      component_mismatches, regions, worst, kMomentTol)};
}

Outcome schedule_boundaries() {
  const Schedule s = Schedule::standard();
  struct Row {
    int epoch;
    double lr, momentum;
  };
  const Row expected[] = {{1, 1e-4, 0.9},    {50, 1e-4, 0.9},    {51, 1e-5, 0.99},
                          {120, 1e-5, 0.99}, {121, 1e-6, 0.999}, {200, 1e-6, 0.999}};
  int bad = 0;
  for (const Row& r : expected) {
    const ScheduleRow got = s.lookup(r.epoch);
    bad += got.learning_rate != r.lr || got.momentum != r.momentum;
  }
  return {bad == 0 && s.rows().size() == 3,
          fmt::format("epochs 1/50/51/120/121/200, {} mismatches", bad)};
}

Outcome shape_normalization() {
  const NetworkConfig cfg;
  const FcnNetwork<float> net(cfg);
  const ParamSet<float> params = net.init_params(3);
  std::mt19937_64 rng(51);
  double worst = 0.0;
  bool shapes_ok = true;
  for (int h : {16, 64, 256}) {
    for (int w : {16, 64, 256}) {
      Tensor<float> x(3, h, w);
      for (auto& v : x.values) v = std::uniform_real_distribution<float>(-1, 1)(rng);
      const Tensor<float> p = net.forward(params, x, Mode::kEval);
      shapes_ok &= p.channels == 2 && p.height == h && p.width == w;
      for (size_t i = 0; i < p.plane(); ++i) {
        worst = std::max(worst, std::abs(double{p.values[i]} + p.values[p.plane() + i] - 1.0));
      }
    }
  }
  ParamSet<float> zero_bias = params;
  for (auto& t : zero_bias.tensors) {
    if (!t.is_kernel) std::fill(t.values.begin(), t.values.end(), 0.0f);
  }
  const Tensor<float> z = net.forward(zero_bias, Tensor<float>(3, 64, 64), Mode::kEval);
  double zero_dev = 0.0;
  for (float v : z.values) zero_dev = std::max(zero_dev, std::abs(double{v} - 0.5));
  return {shapes_ok && worst <= kSoftmaxTol && zero_dev == 0.0,
          fmt::format("9 shapes ok={}, worst softmax sum error {:.1e} (tol {:.0e}), zero input "
                      "max |p-0.5| = {:.1e}",
                      shapes_ok, worst, kSoftmaxTol, zero_dev)};
}

Outcome threshold_recalibration() {
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<float> u(0.f, 0.9f);
  std::vector<FloatImage> old_maps, new_maps;
  for (int k = 0; k < 5; ++k) {
    FloatImage a(64, 64, 1), b(64, 64, 1);
    for (size_t i = 0; i < a.size(); ++i) {
      float v = u(rng);
      if (std::abs(v - 0.5f) < 1e-4f) v = 0.25f;  // keep clear of float ties at the boundary
      a.values()[i] = v;
      b.values()[i] = v + 0.1f;
    }
    old_maps.push_back(a);
    new_maps.push_back(b);
  }
  size_t violations = 0;
  for (const auto& m : old_maps) {
    for (int g = 1; g < 100; ++g) {
      const BinaryMask lo = threshold_mask(m, g / 100.0);
      const BinaryMask hi = threshold_mask(m, (g + 1) / 100.0);
      for (size_t i = 0; i < lo.size(); ++i) violations += hi.values()[i] > lo.values()[i];
    }
  }
  const double t = calibrate_threshold(old_maps, 0.5, new_maps);
  const size_t residual = mask_disagreement(old_maps, 0.5, new_maps, t);
  return {violations == 0 && t == 0.60 && residual == 0,
          fmt::format("nesting violations {}, +0.1 shift recovers {:.2f} (want 0.60), residual "
                      "disagreement {}",
                      violations, t, residual)};
}

// --- fine-tune protocol -------------------------------------------------------

Outcome finetune_protocol(const OverfitArtifacts& trained) {
  const Timer timer;
  SceneSpec spec;
  spec.margin = 24;
  const StainReference& stain = *trained.model.meta.stain;
  const FcnNetwork<float> net(trained.model.config);
  const Detector parent(trained.model);

  // No-op corrections: PP at the parent's own detections on five new scenes.
  std::vector<FovPtr> corrections;
  const auto correction_scenes = scenes(5, 71, spec);
  for (size_t i = 0; i < correction_scenes.size(); ++i) {
    AnnotationSet set;
    set.fov_id = fmt::format("corr-{}", i);
    for (const auto& d : parent.detect(correction_scenes[i].image)) {
      set.positive_points.push_back({static_cast<int>(std::lround(d.position.row)),
                                     static_cast<int>(std::lround(d.position.col))});
    }
    if (set.positive_points.empty()) set = correction_scenes[i].truth;
    corrections.push_back(make_sample(set.fov_id, correction_scenes[i].image, set, stain));
  }
  const FineTuneJob job = assemble_finetune_job(corrections, trained.train_fovs, 72);
  const SourceData pool = finetune_pool(job);
  std::set<const FovSample*> train_set, val_set;
  for (const auto& f : pool.train) train_set.insert(f.get());
  for (const auto& f : pool.validation) val_set.insert(f.get());
  bool disjoint = true;
  for (const auto* f : val_set) disjoint &= !train_set.count(f);
  const bool sizes_ok = pool.train.size() == 10 && train_set.size() == 10 &&
                        pool.validation.size() == 5 && val_set.size() == 5 && disjoint;

  FineTuneOptions opts;  // lr 1e-6, momentum 0.999
  opts.train_epoch_size = 25;
  opts.val_epoch_size = 5;
  opts.max_epochs = 4;
  opts.augment.patch_size = 64;
  opts.seed = 73;
  const TrainState state = finetune(net, trained.model.params, job, opts);
  Model child = trained.model;
  child.params = state.params;
  const Detector tuned(child);

  // A held-out scene counts as changed unless its detections pair up
  // one-to-one within a pixel.
  const auto held_out = scenes(100, 74, spec);
  int changed = 0;
  for (const auto& s : held_out) {
    const auto before = parent.detect(s.image);
    const auto after = tuned.detect(s.image);
    std::vector<PointF> anchor;
    for (const auto& d : before) anchor.push_back(d.position);
    const auto m = oracle::match(after, anchor, kSameDetectionTolerance);
    changed += m.false_positive > 0 || m.false_negative > 0;
  }
  const double fraction = changed / static_cast<double>(held_out.size());
  return {sizes_ok && fraction <= kMaxChangedFraction,
          fmt::format("train pool {} ({} distinct), validation {} ({} distinct, disjoint={}); "
                      "{} epochs run; changed {}/{} held-out scenes ({:.1f}%, max {:.0f}%), {:.0f}s",
                      pool.train.size(), train_set.size(), pool.validation.size(), val_set.size(),
                      disjoint, state.history.size(), changed, held_out.size(), 100 * fraction,
                      100 * kMaxChangedFraction, timer.seconds())};
}

// --- service loop -------------------------------------------------------------

Outcome service_loop() {
  const Timer timer;
  const testing::ScratchDir dir("acceptance_service");
  SceneSpec spec;
  spec.height = spec.width = 128;
  spec.lymphocytes = 3;
  spec.distractors = 1;
  spec.margin = 20;

  // Prior training data and a briefly trained tiny model.
  const auto prior_scenes = scenes(8, 81, spec);
  const StainReference stain = fit_reference(prior_scenes.front().image);
  std::vector<FovPtr> prior;
  for (size_t i = 0; i < prior_scenes.size(); ++i) {
    const std::string id = fmt::format("prior-{}", i);
    write_dataset_fov(dir / "prior", id, prior_scenes[i].image, prior_scenes[i].truth);
    prior.push_back(make_sample(id, prior_scenes[i].image, prior_scenes[i].truth, stain));
  }
  Model seed_model;
  seed_model.config.base_channels = 4;
  seed_model.config.scales = 2;
  seed_model.meta.model_id = "tiny";
  seed_model.meta.stain = stain;
  {
    const FcnNetwork<float> net(seed_model.config);
    TrainOptions opts;
    opts.epochs = 3;
    opts.train_epoch_size = 40;
    opts.val_epoch_size = 4;
    opts.augment.patch_size = 64;
    opts.schedule = Schedule::constant(0.01, 0.9);
    seed_model.params =
        train(net, make_train_state(net.init_params(2), 2), {split_source("p", prior, 0.75, 3)},
              opts)
            .params;
  }
  save_checkpoint(seed_model, dir / "tiny");

  std::atomic<int> during_job_requests{0}, during_job_wrong{0};
  std::atomic<bool> in_job{false};
  int port = 0;
  ServiceConfig cfg;
  cfg.data_dir = dir / "data";
  cfg.prior_dirs = {dir / "prior"};
  cfg.finetune.train_epoch_size = 10;
  cfg.finetune.val_epoch_size = 4;
  cfg.finetune.max_epochs = 3;
  cfg.finetune.augment.patch_size = 64;
  cfg.before_swap = [&](const std::string&) {
    // Child trained and calibrated but not registered: still the old model.
    httplib::Client c("127.0.0.1", port);
    for (int i = 0; i < 3; ++i) {
      auto res = c.Post("/images/fov-000001/detect", "{}", "application/json");
      ++during_job_requests;
      if (!res || res->status != 200 || json::parse(res->body)["model_id"] != "tiny") {
        ++during_job_wrong;
      }
    }
  };
  Service service(cfg);
  service.import_model(dir / "tiny");
  HttpServer server(service);
  port = server.start("127.0.0.1", 0);
  httplib::Client client("127.0.0.1", port);
  client.set_read_timeout(300, 0);

  std::vector<std::string> problems;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) problems.push_back(what);
    return ok;
  };

  const auto field = scenes(2, 82, spec);
  std::vector<std::string> ids;
  for (const auto& s : field) {
    const auto png = encode_png(s.image);
    auto res = client.Post("/images", std::string(png.begin(), png.end()), "image/png");
    if (expect(res && res->status == 201, "upload")) ids.push_back(json::parse(res->body)["id"]);
  }
  if (ids.size() != 2) return {false, "upload failed"};
  auto det = client.Post("/images/" + ids[0] + "/detect", "{}", "application/json");
  expect(det && det->status == 200 && json::parse(det->body)["model_id"] == "tiny",
         "detect with the seed model");

  // Poll detections from another thread while corrections arrive and the
  // job runs; every answer must come from a registered model.
  std::atomic<bool> polling{true};
  std::atomic<int> poll_count{0}, poll_bad{0};
  std::thread poller([&] {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(300, 0);
    while (polling) {
      auto res = c.Post("/images/" + ids[1] + "/detect", "{}", "application/json");
      ++poll_count;
      if (!res || res->status != 200) {
        ++poll_bad;
        continue;
      }
      const json models = json::parse(c.Get("/models")->body);
      std::set<std::string> known;
      for (const auto& m : models["models"]) known.insert(m["model_id"].get<std::string>());
      if (!known.count(json::parse(res->body)["model_id"])) ++poll_bad;
    }
  });

  // 200 corrections in batches of 40, alternating images: PP at every
  // fourth record on a true lymphocyte center, NP elsewhere.
  std::mt19937_64 rng(83);
  std::uniform_int_distribution<int> coord(4, spec.height - 5);
  int sent = 0;
  bool triggered_early = false, triggered = false;
  size_t reported = 0;
  for (int batch = 0; sent < 200; ++batch) {
    const size_t img = batch % 2;
    const auto& truth = field[img].truth;
    json records = json::array();
    for (int i = 0; i < 40; ++i, ++sent) {
      json rec = {{"fov_id", ids[img]}, {"author", "acceptance"}};
      if (sent % 4 == 0 && !truth.positive_points.empty()) {
        const Pixel p = truth.positive_points[(sent / 4) % truth.positive_points.size()];
        rec["kind"] = "PP";
        rec["points"] = {{p.row, p.col}};
      } else {
        rec["kind"] = "NP";
        rec["points"] = {{coord(rng), coord(rng)}};
      }
      records.push_back(rec);
    }
    auto res = client.Post("/images/" + ids[img] + "/annotations",
                           json{{"records", records}}.dump(), "application/json");
    if (!expect(res && res->status == 200, "annotate")) break;
    const json body = json::parse(res->body);
    reported = body["unconsumed"];
    const bool fired = body["finetune_triggered"];
    triggered_early |= fired && sent < 200;
    triggered |= fired;
  }
  expect(triggered && !triggered_early, "trigger fired exactly at 200");
  service.wait_idle();
  polling = false;
  poller.join();

  const json models = json::parse(client.Get("/models")->body);
  const json& list = models["models"];
  std::string child_id;
  double child_threshold = -1;
  if (expect(list.size() == 2, "registry has a child entry")) {
    const json& child = list[1];
    child_id = child["model_id"];
    child_threshold = child["threshold"];
    expect(child["parent_id"] == "tiny", "child lineage");
    expect(child["status"] == "ready", "child ready");
    expect(models["active"] == child_id, "child active");
    const Model stored = load_checkpoint(dir / "data" / child["path"].get<std::string>());
    expect(stored.meta.threshold == child_threshold, "checkpoint carries the threshold");
    const auto grid = default_threshold_grid();
    expect(std::any_of(grid.begin(), grid.end(),
                       [&](double g) { return std::abs(g - child_threshold) < 1e-12; }),
           "threshold on the calibration grid");
  }
  expect(models["unconsumed"] == 0, "corrections consumed");
  expect(models["jobs"]["completed"] == 1 && models["jobs"]["failed"] == 0, "one job completed");
  det = client.Post("/images/" + ids[0] + "/detect", "{}", "application/json");
  expect(det && det->status == 200 && json::parse(det->body)["model_id"] == child_id &&
             json::parse(det->body)["threshold"] == child_threshold,
         "detect served by the child");
  expect(during_job_requests == 3 && during_job_wrong == 0, "old model served during the job");
  expect(poll_bad == 0, "concurrent detections");
  server.stop();

  const double secs = timer.seconds();
  expect(secs < 600.0, "runtime");
  std::string missing;
  for (const auto& p : problems) missing += (missing.empty() ? "" : ", ") + p;
  return {problems.empty(),
          fmt::format("reported {} unconsumed before the job, child {} threshold {:.2f}, {} "
                      "concurrent detects, {:.0f}s (limit 600s){}",
                      reported, child_id, child_threshold, poll_count.load(), secs,
                      problems.empty() ? "" : "; failed: " + missing)};
}

}  // namespace
}  // namespace lymphdet

int main() {
  using namespace lymphdet;
  spdlog::set_level(spdlog::level::warn);
  OverfitArtifacts trained;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient-check", gradient_check},
      {"synthetic-overfit", [&] { return synthetic_overfit(trained); }},
      {"compiler-oracle", compiler_oracle},
      {"geometry-oracle", geometry_oracle},
      {"schedule-boundaries", schedule_boundaries},
      {"shape-normalization", shape_normalization},
      {"threshold-recalibration", threshold_recalibration},
      {"finetune-protocol",
       [&]() -> Outcome {
         if (trained.train_fovs.empty()) return {false, "needs the overfit model"};
         return finetune_protocol(trained);
       }},
      {"service-loop", service_loop},
  };
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : fmt::format("{} criteria failed", failures))
            << std::endl;
  return failures == 0 ? 0 : 1;
}
