#include "lymphdet/service.h"

#include <atomic>
#include <fstream>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace lymphdet {

namespace fs = std::filesystem;

namespace {

std::atomic<uint64_t> tmp_counter{0};

fs::path tmp_sibling(const fs::path& path) {
  return path.parent_path() /
         fmt::format(".{}.{}.tmp{}", path.stem().string(), tmp_counter++,
                     path.extension().string());
}

std::vector<uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("missing artifact " + path.filename().string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string stain_key(const std::optional<StainReference>& stain) {
  if (!stain) return "raw";
  nlohmann::json j = *stain;
  return fmt::format("{:016x}", std::hash<std::string>{}(j.dump()));
}

fs::path latest_pointer(const DataStore& store, const std::string& image_id) {
  return store.root() / "detections" / (image_id + ".latest");
}

}  // namespace

nlohmann::json to_json(const DetectResult& result) {
  nlohmann::json dets = nlohmann::json::array();
  for (const auto& d : result.detections) dets.push_back(to_json(d, result.image_id));
  return {{"image_id", result.image_id},
          {"model_id", result.model_id},
          {"threshold", result.threshold},
          {"detections", dets},
          {"probability_map", result.probability_map},
          {"overlay", "/images/" + result.image_id + "/overlay"}};
}

Service::Service(ServiceConfig config)
    : config_(std::move(config)), store_(config_.data_dir) {
  Registry reg = store_.registry();
  bool dirty = false;
  for (auto& e : reg.models) {
    if (e.status != ModelStatus::kReady) {
      spdlog::warn("model {} was left in state {}; marking ready", e.model_id,
                   to_string(e.status));
      e.status = ModelStatus::kReady;
      dirty = true;
    }
  }
  if (dirty) store_.write_registry(reg);
  if (!reg.active.empty()) {
    const RegistryEntry& e = *reg.find(reg.active);
    Model model = load_checkpoint(store_.root() / e.path);
    model.meta.threshold = e.threshold;
    active_ = std::make_shared<const Detector>(std::move(model));
    spdlog::info("serving model {} (threshold {:.2f})", e.model_id, e.threshold);
  }
  worker_ = std::thread([this] { worker_loop(); });
}

Service::~Service() {
  {
    std::lock_guard lock(job_mu_);
    stopping_ = true;
  }
  job_cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

std::shared_ptr<const Detector> Service::active() const {
  std::lock_guard lock(model_mu_);
  return active_;
}

std::string Service::import_model(const fs::path& checkpoint_dir) {
  Model model = load_checkpoint(checkpoint_dir);
  Registry reg = store_.registry();
  std::string id = model.meta.model_id;
  if (!valid_identifier(id) || reg.find(id) || fs::exists(store_.model_dir(id))) {
    id = store_.next_model_id();
  }
  model.meta.model_id = id;
  if (!model.meta.parent_id.empty() && !reg.find(model.meta.parent_id)) {
    model.meta.parent_id.clear();
  }
  if (model.meta.created_ms == 0) model.meta.created_ms = now_ms();
  save_checkpoint(model, store_.model_dir(id));

  reg.models.push_back({id, model.meta.parent_id, "models/" + id, model.meta.threshold,
                        model.meta.created_ms, ModelStatus::kReady});
  reg.active = id;
  store_.write_registry(reg);
  {
    std::lock_guard lock(model_mu_);
    active_ = std::make_shared<const Detector>(std::move(model));
  }
  spdlog::info("imported {} as {}", checkpoint_dir.string(), id);
  return id;
}

std::string Service::upload(const RgbImage& image, std::optional<std::string> id) {
  const std::string out = store_.add_image(image, std::move(id));
  if (auto det = active()) normalized_image(out, *det);
  return out;
}

RgbImage Service::normalized_image(const std::string& image_id, const Detector& det) {
  const fs::path cached = store_.normalized_path(image_id, stain_key(det.model().meta.stain));
  if (fs::exists(cached)) return read_rgb(cached);
  RgbImage norm = det.normalize(store_.image(image_id));
  const fs::path tmp = tmp_sibling(cached);
  write_rgb(tmp, norm);
  fs::rename(tmp, cached);
  return norm;
}

DetectResult Service::detect(const std::string& image_id) {
  if (!store_.has_image(image_id)) throw NotFoundError("unknown image " + image_id);
  const auto det = active();
  if (!det) throw NoModelError("no ready model");

  const RgbImage norm = normalized_image(image_id, *det);
  const FloatImage prob = det->probability(norm);
  DetectResult result;
  result.image_id = image_id;
  result.model_id = det->model().meta.model_id;
  result.threshold = det->postprocess().threshold;
  result.detections = lymphdet::detect(prob, det->postprocess());

  const fs::path dets = store_.detections_path(image_id, result.model_id);
  const fs::path probmap = store_.probmap_path(image_id, result.model_id);
  const fs::path overlay = store_.overlay_path(image_id);
  fs::path tmp = tmp_sibling(dets);
  write_detections(tmp, image_id, result.detections);
  fs::rename(tmp, dets);
  tmp = tmp_sibling(probmap);
  write_probability(tmp, prob);
  fs::rename(tmp, probmap);
  tmp = tmp_sibling(overlay);
  write_rgb(tmp, render_overlay(store_.image(image_id), result.detections));
  fs::rename(tmp, overlay);
  tmp = tmp_sibling(latest_pointer(store_, image_id));
  std::ofstream(tmp) << result.model_id << '\n';
  fs::rename(tmp, latest_pointer(store_, image_id));

  result.probability_map = fs::relative(probmap, store_.root()).generic_string();
  return result;
}

std::vector<uint8_t> Service::overlay_png(const std::string& image_id) const {
  if (!store_.has_image(image_id)) throw NotFoundError("unknown image " + image_id);
  const fs::path path = store_.overlay_path(image_id);
  if (!fs::exists(path)) throw NotFoundError("image " + image_id + " has not been detected yet");
  return read_bytes(path);
}

std::vector<uint8_t> Service::image_png(const std::string& image_id) const {
  if (!store_.has_image(image_id)) throw NotFoundError("unknown image " + image_id);
  return read_bytes(store_.image_path(image_id));
}

std::vector<uint8_t> Service::probability_png(const std::string& image_id) const {
  if (!store_.has_image(image_id)) throw NotFoundError("unknown image " + image_id);
  std::ifstream in(latest_pointer(store_, image_id));
  std::string model_id;
  if (!(in >> model_id)) throw NotFoundError("image " + image_id + " has not been detected yet");
  return read_bytes(store_.probmap_path(image_id, model_id));
}

AnnotateResult Service::annotate(const std::string& image_id, const nlohmann::json& body) {
  if (!store_.has_image(image_id)) throw NotFoundError("unknown image " + image_id);
  std::vector<nlohmann::json> items;
  bool batch = true;
  if (body.is_array()) {
    items.assign(body.begin(), body.end());
  } else if (body.is_object() && body.contains("records")) {
    if (!body["records"].is_array()) throw AnnotationFormatError("records must be an array", {"records"});
    items.assign(body["records"].begin(), body["records"].end());
  } else {
    items.push_back(body);
    batch = false;
  }
  if (items.empty()) throw AnnotationFormatError("no annotation records", {"records"});

  const auto [height, width] = store_.image_size(image_id);
  std::vector<AnnotationRecord> records;
  std::vector<std::string> bad;
  for (size_t i = 0; i < items.size(); ++i) {
    const std::string prefix = batch ? fmt::format("records[{}].", i) : "";
    try {
      AnnotationRecord rec = parse_record(items[i]);
      if (rec.fov_id != image_id) bad.push_back(prefix + "fov_id");
      for (const Pixel& p : rec.points) {
        if (p.row < 0 || p.col < 0 || p.row >= height || p.col >= width) {
          bad.push_back(prefix + "points");
          break;
        }
      }
      if (!items[i].contains("timestamp")) rec.timestamp = now_ms();
      records.push_back(std::move(rec));
    } catch (const AnnotationFormatError& e) {
      for (const auto& f : e.fields) bad.push_back(prefix + f);
    }
  }
  if (!bad.empty()) {
    std::string msg = "malformed annotation:";
    for (const auto& f : bad) msg += " " + f;
    throw AnnotationFormatError(msg, std::move(bad));
  }

  AnnotateResult result;
  result.accepted = records.size();
  {
    std::lock_guard lock(annotate_mu_);
    const size_t before = store_.unconsumed_count();
    result.unconsumed = store_.append_corrections(records);
    const size_t trigger = config_.finetune_trigger;
    result.finetune_triggered = trigger > 0 && before < trigger && result.unconsumed >= trigger;
  }
  if (result.finetune_triggered) {
    spdlog::info("{} unconsumed corrections reached the trigger; queueing fine-tune",
                 result.unconsumed);
    std::lock_guard lock(job_mu_);
    ++jobs_.queued;
    job_cv_.notify_one();
  }
  return result;
}

std::vector<CorrectionRecord> Service::annotations(const std::string& image_id) const {
  if (!store_.has_image(image_id)) throw NotFoundError("unknown image " + image_id);
  std::vector<CorrectionRecord> out;
  for (auto& c : store_.corrections()) {
    if (c.record.fov_id == image_id) out.push_back(std::move(c));
  }
  return out;
}

void Service::request_finetune() {
  if (!active()) throw NoModelError("no ready model to fine-tune");
  std::lock_guard lock(job_mu_);
  ++jobs_.queued;
  job_cv_.notify_one();
}

void Service::wait_idle() {
  std::unique_lock lock(job_mu_);
  idle_cv_.wait(lock, [this] { return jobs_.queued == 0 && !jobs_.running; });
}

JobStatus Service::job_status() const {
  std::lock_guard lock(job_mu_);
  return jobs_;
}

void Service::worker_loop() {
  std::unique_lock lock(job_mu_);
  for (;;) {
    job_cv_.wait(lock, [this] { return stopping_ || jobs_.queued > 0; });
    if (stopping_) return;
    --jobs_.queued;
    jobs_.running = true;
    lock.unlock();
    std::string error;
    try {
      run_finetune();
    } catch (const std::exception& e) {
      error = e.what();
      spdlog::error("fine-tune failed: {}", error);
    }
    lock.lock();
    jobs_.running = false;
    if (error.empty()) {
      ++jobs_.completed;
    } else {
      ++jobs_.failed;
      jobs_.last_error = error;
    }
    idle_cv_.notify_all();
  }
}

void Service::set_status(const std::string& model_id, ModelStatus status) {
  Registry reg = store_.registry();
  if (RegistryEntry* e = reg.find(model_id)) {
    e->status = status;
    store_.write_registry(reg);
  }
}

void Service::run_finetune() {
  const auto parent = active();
  if (!parent) throw NoModelError("no ready model to fine-tune");
  const Model& pm = parent->model();
  const std::string parent_id = pm.meta.model_id;

  const std::vector<CorrectionRecord> all = store_.corrections();
  size_t first = 0;
  while (first < all.size() && !all[first].consumed_by.empty()) ++first;
  const size_t last = all.size();
  if (first == last) {
    spdlog::info("no unconsumed corrections; nothing to fine-tune");
    return;
  }
  const uint64_t job_seed = config_.seed + (++job_counter_);
  set_status(parent_id, ModelStatus::kFinetuning);
  fs::path unregistered;  // child checkpoint written but not yet in the registry
  try {
    // F: every FOV that received a new correction, with all of its
    // corrections so far.
    std::set<std::string> fov_ids;
    for (size_t i = first; i < last; ++i) fov_ids.insert(all[i].record.fov_id);
    std::vector<AnnotationRecord> upto;
    for (size_t i = 0; i < last; ++i) upto.push_back(all[i].record);
    auto grouped = group_by_fov(upto, DataSource::kCorrection);
    std::vector<FovPtr> corrections;
    for (const auto& id : fov_ids) {
      corrections.push_back(make_sample(id, store_.image(id), grouped.at(id), pm.meta.stain,
                                        config_.dilation_radius));
    }
    std::vector<FovPtr> prior;
    for (const auto& dir : config_.prior_dirs) {
      auto fovs = load_dataset_dir(dir, DataSource::kInHouse, pm.meta.stain,
                                   config_.dilation_radius);
      prior.insert(prior.end(), fovs.begin(), fovs.end());
    }
    const FineTuneJob job = assemble_finetune_job(corrections, prior, job_seed);
    spdlog::info("fine-tuning {} on {} corrections: F={} A={} B={}", parent_id, last - first,
                 job.corrections.size(), job.prior_train.size(), job.prior_val.size());

    FineTuneOptions opts = config_.finetune;
    opts.seed = job_seed;
    const FcnNetwork<float> net(pm.config);
    TrainState state = finetune(net, pm.params, job, opts);

    const auto& refs = job.prior_val.empty() ? job.corrections : job.prior_val;
    std::vector<FloatImage> old_maps, new_maps;
    for (const auto& fov : refs) {
      old_maps.push_back(predict_probability(net, pm.params, fov->image));
      new_maps.push_back(predict_probability(net, state.params, fov->image));
    }
    const double threshold = calibrate_threshold(old_maps, pm.meta.threshold, new_maps);

    Model child;
    child.config = pm.config;
    child.params = std::move(state.params);
    child.meta = pm.meta;
    child.meta.model_id = store_.next_model_id();
    child.meta.parent_id = parent_id;
    child.meta.epoch = pm.meta.epoch + state.epoch;
    child.meta.threshold = threshold;
    child.meta.created_ms = now_ms();
    const fs::path dir = store_.model_dir(child.meta.model_id);
    const fs::path tmp_dir = dir.parent_path() / ("." + child.meta.model_id + ".tmp");
    fs::remove_all(tmp_dir);
    save_checkpoint(child, tmp_dir);
    fs::rename(tmp_dir, dir);
    unregistered = dir;

    if (config_.before_swap) config_.before_swap(child.meta.model_id);

    Registry reg = store_.registry();
    if (RegistryEntry* p = reg.find(parent_id)) p->status = ModelStatus::kReady;
    reg.models.push_back({child.meta.model_id, parent_id, "models/" + child.meta.model_id,
                          threshold, child.meta.created_ms, ModelStatus::kReady});
    reg.active = child.meta.model_id;
    store_.write_registry(reg);
    unregistered.clear();
    const std::string child_id = child.meta.model_id;
    {
      std::lock_guard lock(model_mu_);
      active_ = std::make_shared<const Detector>(std::move(child));
    }
    store_.mark_consumed(first, last, child_id);
    spdlog::info("registered {} (parent {}, threshold {:.2f})", child_id, parent_id, threshold);
  } catch (...) {
    if (!unregistered.empty()) {
      std::error_code ec;
      fs::remove_all(unregistered, ec);
    }
    set_status(parent_id, ModelStatus::kReady);
    throw;
  }
}

nlohmann::json Service::models() const {
  nlohmann::json j = to_json(store_.registry());
  const JobStatus s = job_status();
  j["jobs"] = {{"queued", s.queued},
               {"running", s.running},
               {"completed", s.completed},
               {"failed", s.failed},
               {"last_error", s.last_error}};
  j["unconsumed"] = store_.unconsumed_count();
  j["finetune_trigger"] = config_.finetune_trigger;
  return j;
}

}  // namespace lymphdet
