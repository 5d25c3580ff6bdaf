#ifndef LYMPHDET_SERVICE_H_
#define LYMPHDET_SERVICE_H_

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lymphdet/inference.h"
#include "lymphdet/store.h"
#include "lymphdet/trainer.h"

namespace lymphdet {

struct ServiceConfig {
  std::filesystem::path data_dir;
  size_t finetune_trigger = 200;  // unconsumed corrections that start a job
  std::vector<std::filesystem::path> prior_dirs;  // training data of the served lineage
  FineTuneOptions finetune;
  int dilation_radius = kDefaultDilationRadius;
  uint64_t seed = 1;
  // Test hook, called on the worker thread once the child is trained and
  // calibrated but before it is registered.
  std::function<void(const std::string& child_id)> before_swap;
};

// No servable model (HTTP 409).
class NoModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unknown resource (HTTP 404).
class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DetectResult {
  std::string image_id;
  std::string model_id;
  double threshold = 0.0;
  std::vector<Detection> detections;
  std::string probability_map;  // path relative to the data dir
};

nlohmann::json to_json(const DetectResult& result);

struct AnnotateResult {
  size_t accepted = 0;
  size_t unconsumed = 0;
  bool finetune_triggered = false;
};

struct JobStatus {
  size_t queued = 0;
  bool running = false;
  size_t completed = 0;
  size_t failed = 0;
  std::string last_error;
};

// Transport-independent service core: storage, detection with the active
// model, correction intake and the background fine-tune worker.
class Service {
 public:
  explicit Service(ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  DataStore& store() { return store_; }

  // Copies a checkpoint into the registry and makes it active.
  std::string import_model(const std::filesystem::path& checkpoint_dir);

  std::string upload(const RgbImage& image, std::optional<std::string> id = {});
  DetectResult detect(const std::string& image_id);
  std::vector<uint8_t> overlay_png(const std::string& image_id) const;
  std::vector<uint8_t> image_png(const std::string& image_id) const;
  std::vector<uint8_t> probability_png(const std::string& image_id) const;

  // Body: one record, an array of records, or {"records": [...]}. Every
  // record's fov_id must equal `image_id` and its points must lie inside
  // the image. Throws AnnotationFormatError listing the bad fields.
  AnnotateResult annotate(const std::string& image_id, const nlohmann::json& body);
  std::vector<CorrectionRecord> annotations(const std::string& image_id) const;

  // Queues a fine-tune of the active model on the unconsumed corrections.
  void request_finetune();
  void wait_idle();
  JobStatus job_status() const;

  std::shared_ptr<const Detector> active() const;
  nlohmann::json models() const;

 private:
  void worker_loop();
  void run_finetune();
  RgbImage normalized_image(const std::string& image_id, const Detector& det);
  void set_status(const std::string& model_id, ModelStatus status);

  ServiceConfig config_;
  DataStore store_;

  mutable std::mutex model_mu_;
  std::shared_ptr<const Detector> active_;

  std::mutex annotate_mu_;

  mutable std::mutex job_mu_;
  std::condition_variable job_cv_;
  std::condition_variable idle_cv_;
  JobStatus jobs_;
  bool stopping_ = false;
  uint64_t job_counter_ = 0;
  std::thread worker_;
};

// HTTP front end. Endpoints:
//   GET  /images                   list of image ids
//   POST /images[?id=]             PNG body -> {"id","height","width"}
//   GET  /images/{id}              raw PNG
//   POST /images/{id}/detect       detections + probability-map reference
//   GET  /images/{id}/overlay      overlay PNG of the latest detection
//   GET  /images/{id}/probability  probability PNG of the latest detection
//   GET  /images/{id}/annotations  stored correction records
//   POST /images/{id}/annotations  append corrections -> unconsumed count
//   POST /finetune                 queue a fine-tune job
//   GET  /models                   registry, job status, unconsumed count
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();

  // Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host, int port);
  // Serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace lymphdet

#endif  // LYMPHDET_SERVICE_H_
