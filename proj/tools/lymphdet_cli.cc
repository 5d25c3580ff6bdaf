// Command-line front end. Every option can also be given through an
// environment variable (LYMPHDET_<OPTION>) or a config file passed with
// --config / LYMPHDET_CONFIG; precedence is flag > environment > config.

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "lymphdet/service.h"
#include "lymphdet/synthetic.h"

namespace fs = std::filesystem;
using namespace lymphdet;

namespace {

std::string env_name(const std::string& flag) {
  std::string out = "LYMPHDET_";
  for (char c : flag.substr(flag.find_first_not_of('-'))) {
    out += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  }
  return out;
}

// CLI11 applies config files before the environment; drop config entries
// whose environment variable is set so the environment wins.
class EnvFirstConfig : public CLI::ConfigTOML {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    auto items = CLI::ConfigTOML::from_config(input);
    std::erase_if(items, [](const CLI::ConfigItem& item) {
      // "++" / "--" items open and close sections
      if (item.name.empty() || !std::isalnum(static_cast<unsigned char>(item.name[0]))) {
        return false;
      }
      return std::getenv(env_name(item.name).c_str()) != nullptr;
    });
    return items;
  }
};

template <typename T>
CLI::Option* opt(CLI::App* app, const std::string& flag, T& value, const std::string& help) {
  return app->add_option(flag, value, help)->envname(env_name(flag))->capture_default_str();
}

struct NetworkFlags {
  int base = 32;
  int scales = 4;
  double dropout = 0.1;

  void add(CLI::App* app) {
    opt(app, "--base-channels", base, "channels at the finest scale");
    opt(app, "--scales", scales, "number of down-sampling steps");
    opt(app, "--dropout", dropout, "dropout rate");
  }
  NetworkConfig config() const {
    NetworkConfig c;
    c.base_channels = base;
    c.scales = scales;
    c.dropout_rate = dropout;
    c.validate();
    return c;
  }
};

struct FineTuneFlags {
  FineTuneOptions o;
  int patch = 256;

  void add(CLI::App* app) {
    opt(app, "--ft-lr", o.learning_rate, "fine-tune learning rate");
    opt(app, "--ft-momentum", o.momentum, "fine-tune momentum");
    opt(app, "--ft-max-epochs", o.max_epochs, "fine-tune epoch cap");
    opt(app, "--ft-patience", o.patience, "fine-tune early-stopping patience");
    opt(app, "--ft-epoch-size", o.train_epoch_size, "fine-tune iterations per epoch");
    opt(app, "--ft-val-size", o.val_epoch_size, "fine-tune validation patches per epoch");
    opt(app, "--ft-patch", patch, "fine-tune patch size");
  }
  FineTuneOptions options() const {
    FineTuneOptions out = o;
    out.augment.patch_size = patch;
    return out;
  }
};

std::vector<fs::path> png_inputs(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in)) {
        if (e.path().extension() == ".png") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else if (fs::exists(in)) {
      out.emplace_back(in);
    } else {
      throw InvalidInput("no such input: " + in);
    }
  }
  if (out.empty()) throw InvalidInput("no input images");
  return out;
}

// --- train ----------------------------------------------------------------

struct TrainCmd {
  std::vector<std::string> data;
  std::string out;
  std::string stain_image;
  NetworkFlags net;
  int epochs = 200;
  int epoch_size = 175;
  int val_size = 25;
  int patience = 20;
  int patch = 256;
  int checkpoint_every = 10;
  int radius = kDefaultDilationRadius;
  double split = 0.9;
  double lr = 0;
  double momentum = 0.9;
  uint64_t seed = 1;
  std::string dump_patches;
  int dump_count = 16;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("train", "train a model from annotated dataset directories");
    opt(app, "--data", data, "dataset directory, one per data source (repeatable)")->required();
    opt(app, "--out", out, "output directory for checkpoints and the loss log")->required();
    opt(app, "--stain-image", stain_image, "image defining the stain reference");
    net.add(app);
    opt(app, "--epochs", epochs, "maximum epochs");
    opt(app, "--epoch-size", epoch_size, "training iterations per epoch");
    opt(app, "--val-size", val_size, "validation patches per epoch");
    opt(app, "--patience", patience, "epochs without improvement before stopping");
    opt(app, "--patch", patch, "training patch size");
    opt(app, "--checkpoint-every", checkpoint_every, "epochs between snapshots");
    opt(app, "--radius", radius, "positive-point dilation radius");
    opt(app, "--split", split, "training fraction per data source");
    opt(app, "--lr", lr, "constant learning rate instead of the standard schedule");
    opt(app, "--momentum", momentum, "momentum for --lr");
    opt(app, "--seed", seed, "random seed");
    opt(app, "--dump-patches", dump_patches, "write augmented patches here and exit");
    opt(app, "--dump-count", dump_count, "patches written by --dump-patches");
    app->callback([this] { run(); });
  }

  void run() {
    const RgbImage ref_image =
        stain_image.empty() ? first_dataset_image(data.front()) : read_rgb(stain_image);
    const StainReference stain = fit_reference(ref_image);
    std::vector<SourceData> sources;
    for (size_t i = 0; i < data.size(); ++i) {
      auto fovs = load_dataset_dir(data[i], DataSource::kInHouse, stain, radius);
      if (fovs.empty()) throw InvalidInput("no annotated FOVs in " + data[i]);
      sources.push_back(fovs.size() == 1 ? SourceData{data[i], fovs, {}}
                                         : split_source(data[i], fovs, split, seed + i));
      spdlog::info("{}: {} train / {} validation FOVs", data[i], sources.back().train.size(),
                   sources.back().validation.size());
    }
    AugmentOptions augment;
    augment.patch_size = patch;

    if (!dump_patches.empty()) {
      fs::create_directories(dump_patches);
      std::mt19937_64 rng(seed);
      for (int i = 0; i < dump_count; ++i) {
        const auto& pool = sources[i % sources.size()].train;
        const FovSample& fov = *pool[std::uniform_int_distribution<size_t>(0, pool.size() - 1)(rng)];
        const TrainingPatch p = sample_patch(fov.image, fov.labels, fov.weights, rng, augment);
        const std::string stem = fmt::format("{}/patch_{:03d}", dump_patches, i);
        write_rgb(stem + "_image.png", p.image);
        write_label_png(stem + "_labels.png", p.labels);
        write_weight_png(stem + "_weights.png", p.weights);
      }
      spdlog::info("wrote {} patches to {}", dump_count, dump_patches);
      return;
    }

    Model tmpl;
    tmpl.config = net.config();
    tmpl.meta.model_id = "trained";
    tmpl.meta.stain = stain;
    tmpl.meta.created_ms = now_ms();
    TrainOptions options;
    options.epochs = epochs;
    options.train_epoch_size = epoch_size;
    options.val_epoch_size = val_size;
    options.patience = patience;
    options.augment = augment;
    options.output_dir = out;
    options.checkpoint_every = checkpoint_every;
    options.checkpoint_template = tmpl;
    if (lr > 0) options.schedule = Schedule::constant(lr, momentum);

    const FcnNetwork<float> network(tmpl.config);
    TrainState state =
        train(network, make_train_state(network.init_params(seed), seed), sources, options);
    spdlog::info("best epoch {} (validation loss {:.5f}); checkpoint in {}", state.best_epoch,
                 state.best_val_loss, (fs::path(out) / "best").string());
  }
};

// --- detect ---------------------------------------------------------------

struct DetectCmd {
  std::string model;
  std::vector<std::string> inputs;
  std::string out;
  double threshold = -1;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("detect", "detect lymphocytes in images");
    opt(app, "--model", model, "checkpoint directory")->required();
    opt(app, "--out", out, "output directory")->required();
    opt(app, "--threshold", threshold, "override the model's calibrated threshold");
    app->add_option("inputs", inputs, "PNG images or directories")->required();
    app->callback([this] { run(); });
  }

  void run() {
    Model m = load_checkpoint(model);
    if (threshold >= 0) m.meta.threshold = threshold;
    const Detector detector(std::move(m));
    fs::create_directories(out);
    for (const auto& path : png_inputs(inputs)) {
      const std::string id = path.stem().string();
      const RgbImage image = read_rgb(path);
      const FloatImage prob = detector.probability(detector.normalize(image));
      const auto dets = lymphdet::detect(prob, detector.postprocess());
      write_detections(fs::path(out) / (id + ".detections.jsonl"), id, dets);
      write_probability(fs::path(out) / (id + ".probability.png"), prob);
      write_rgb(fs::path(out) / (id + ".overlay.png"), render_overlay(image, dets));
      spdlog::info("{}: {} detections", id, dets.size());
    }
  }
};

// --- compile-annotations --------------------------------------------------

struct CompileCmd {
  std::string annotations;
  std::string out;
  std::string fov;
  int height = 0;
  int width = 0;
  int radius = kDefaultDilationRadius;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("compile-annotations",
                                    "rasterize annotation records into label/weight maps");
    opt(app, "--annotations", annotations, "annotation records (JSON lines)")->required();
    opt(app, "--height", height, "image height")->required();
    opt(app, "--width", width, "image width")->required();
    opt(app, "--out", out, "output directory")->required();
    opt(app, "--fov", fov, "only this FOV");
    opt(app, "--radius", radius, "positive-point dilation radius");
    app->callback([this] { run(); });
  }

  void run() {
    if (!fs::is_regular_file(annotations)) throw InvalidInput("no such file: " + annotations);
    const auto grouped = group_by_fov(read_records(annotations), DataSource::kInHouse);
    if (!fov.empty() && !grouped.count(fov)) throw InvalidInput("no records for FOV " + fov);
    fs::create_directories(out);
    for (const auto& [id, set] : grouped) {
      if (!fov.empty() && id != fov) continue;
      const CompiledMaps maps = compile_maps(set, height, width, radius);
      write_label_png(fs::path(out) / (id + ".labels.png"), maps.labels);
      write_weight_png(fs::path(out) / (id + ".weights.png"), maps.weights);
      spdlog::info("{}: {} annotations", id, set.count());
    }
  }
};

// --- service-backed commands ----------------------------------------------

struct ServiceFlags {
  std::string data_dir;
  size_t trigger = 200;
  std::vector<std::string> prior;
  FineTuneFlags ft;
  uint64_t seed = 1;

  void add(CLI::App* app) {
    opt(app, "--data-dir", data_dir, "service data directory")->required();
    opt(app, "--trigger", trigger, "unconsumed corrections that start a fine-tune (0 = never)");
    opt(app, "--prior", prior, "prior training dataset directory (repeatable)");
    opt(app, "--seed", seed, "random seed");
    ft.add(app);
  }
  ServiceConfig config() const {
    ServiceConfig c;
    c.data_dir = data_dir;
    c.finetune_trigger = trigger;
    c.prior_dirs.assign(prior.begin(), prior.end());
    c.finetune = ft.options();
    c.seed = seed;
    return c;
  }
};

struct FineTuneCmd {
  ServiceFlags service;
  std::string model_id;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("finetune",
                                    "fine-tune the active model on unconsumed corrections");
    service.add(app);
    opt(app, "--model-id", model_id, "expected active model id");
    app->callback([this] { run(); });
  }

  void run() {
    ServiceConfig cfg = service.config();
    cfg.finetune_trigger = 0;
    Service svc(cfg);
    const auto active = svc.active();
    if (!active) throw InvalidInput("the data directory has no active model");
    if (!model_id.empty() && active->model().meta.model_id != model_id) {
      throw InvalidInput("active model is " + active->model().meta.model_id + ", not " + model_id);
    }
    svc.request_finetune();
    svc.wait_idle();
    const JobStatus s = svc.job_status();
    if (s.failed > 0) throw std::runtime_error("fine-tune failed: " + s.last_error);
    const std::string child = svc.active()->model().meta.model_id;
    std::cout << child << '\n';
  }
};

struct ServeCmd {
  ServiceFlags service;
  std::string model;
  std::string host = "127.0.0.1";
  int port = 8080;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("serve", "run the HTTP service");
    service.add(app);
    opt(app, "--model", model, "checkpoint to import and activate");
    opt(app, "--host", host, "bind address");
    opt(app, "--port", port, "bind port");
    app->callback([this] { run(); });
  }

  void run() {
    Service svc(service.config());
    if (!model.empty()) svc.import_model(model);
    HttpServer server(svc);
    spdlog::info("listening on {}:{}", host, port);
    server.listen(host, port);
  }
};

// --- calibrate-threshold --------------------------------------------------

struct CalibrateCmd {
  std::string old_model;
  std::string new_model;
  std::vector<std::string> references;
  bool write = false;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("calibrate-threshold",
                                    "match a new model's threshold to an old model's masks");
    opt(app, "--old", old_model, "old checkpoint (its threshold is the reference)")->required();
    opt(app, "--new", new_model, "new checkpoint")->required();
    opt(app, "--reference", references, "reference PNG images or directories")->required();
    app->add_flag("--write", write, "store the result in the new checkpoint")
        ->envname("LYMPHDET_WRITE");
    app->callback([this] { run(); });
  }

  void run() {
    const Model old_m = load_checkpoint(old_model);
    Model new_m = load_checkpoint(new_model);
    const FcnNetwork<float> old_net(old_m.config), new_net(new_m.config);
    std::vector<FloatImage> old_maps, new_maps;
    for (const auto& path : png_inputs(references)) {
      const RgbImage raw = read_rgb(path);
      const RgbImage a = old_m.meta.stain ? normalize_stain(raw, *old_m.meta.stain) : raw;
      const RgbImage b = new_m.meta.stain ? normalize_stain(raw, *new_m.meta.stain) : raw;
      old_maps.push_back(predict_probability(old_net, old_m.params, a));
      new_maps.push_back(predict_probability(new_net, new_m.params, b));
    }
    const double t = calibrate_threshold(old_maps, old_m.meta.threshold, new_maps);
    std::cout << fmt::format("{:.2f}", t) << '\n';
    if (write) {
      new_m.meta.threshold = t;
      save_checkpoint(new_m, new_model);
    }
  }
};

// --- synth ----------------------------------------------------------------

struct SynthCmd {
  std::string out;
  int count = 10;
  SceneSpec spec;
  uint64_t seed = 1;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("synth", "generate a synthetic annotated dataset");
    opt(app, "--out", out, "dataset directory")->required();
    opt(app, "--count", count, "number of scenes");
    opt(app, "--height", spec.height, "scene height");
    opt(app, "--width", spec.width, "scene width");
    opt(app, "--lymphocytes", spec.lymphocytes, "lymphocytes per scene");
    opt(app, "--distractors", spec.distractors, "distractor nuclei per scene");
    opt(app, "--clustering", spec.clustering, "probability of touching lymphocyte pairs");
    opt(app, "--margin", spec.margin, "minimum center distance from the border");
    opt(app, "--seed", seed, "random seed");
    app->callback([this] { run(); });
  }

  void run() {
    fs::create_directories(out);
    std::mt19937_64 rng(seed);
    std::ofstream truth(fs::path(out) / "truth.jsonl", std::ios::trunc);
    for (int i = 0; i < count; ++i) {
      SyntheticScene scene = generate_scene(spec, rng);
      const std::string id = fmt::format("synth-{:04d}", i);
      scene.truth.fov_id = id;
      write_dataset_fov(out, id, scene.image, scene.truth);
      nlohmann::json objs = nlohmann::json::array();
      for (const auto& o : scene.objects) {
        objs.push_back({{"row", o.center.row},
                        {"col", o.center.col},
                        {"radius", o.radius},
                        {"elongation", o.elongation},
                        {"class", o.cls == ObjectClass::kLymphocyte ? "lymphocyte" : "distractor"}});
      }
      truth << nlohmann::json{{"fov_id", id}, {"objects", objs}}.dump() << '\n';
    }
    spdlog::info("wrote {} scenes to {}", count, out);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lymphocyte detection: training, inference and annotation service"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  app.set_config("--config", "", "TOML/INI config file (sections per subcommand)")
      ->envname("LYMPHDET_CONFIG");
  app.config_formatter(std::make_shared<EnvFirstConfig>());
  std::string log_level = "info";
  opt(&app, "--log-level", log_level, "trace, debug, info, warn, error");
  app.parse_complete_callback([&] { spdlog::set_level(spdlog::level::from_str(log_level)); });

  TrainCmd train_cmd;
  DetectCmd detect_cmd;
  CompileCmd compile_cmd;
  FineTuneCmd finetune_cmd;
  CalibrateCmd calibrate_cmd;
  ServeCmd serve_cmd;
  SynthCmd synth_cmd;
  train_cmd.add(app);
  detect_cmd.add(app);
  compile_cmd.add(app);
  finetune_cmd.add(app);
  calibrate_cmd.add(app);
  serve_cmd.add(app);
  synth_cmd.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
