#ifndef LYMPHDET_STORE_H_
#define LYMPHDET_STORE_H_

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lymphdet/annotation.h"
#include "lymphdet/image.h"
#include "lymphdet/model.h"

namespace lymphdet {

enum class ModelStatus { kTraining, kReady, kFinetuning };

std::string to_string(ModelStatus status);
ModelStatus parse_status(const std::string& text);

struct RegistryEntry {
  std::string model_id;
  std::string parent_id;  // empty for root models
  std::string path;       // checkpoint directory, relative to the data dir
  double threshold = kDefaultThreshold;
  int64_t created_ms = 0;
  ModelStatus status = ModelStatus::kReady;
};

struct Registry {
  std::string active;  // model_id of the serving model; empty when none
  std::vector<RegistryEntry> models;

  const RegistryEntry* find(const std::string& model_id) const;
  RegistryEntry* find(const std::string& model_id);
};

nlohmann::json to_json(const RegistryEntry& entry);
nlohmann::json to_json(const Registry& registry);
Registry parse_registry(const nlohmann::json& j);

// A submitted correction with its position in the append-only log.
struct CorrectionRecord {
  AnnotationRecord record;
  size_t seq = 0;
  std::string consumed_by;  // model_id of the fine-tune that used it
};

int64_t now_ms();

// Flat on-disk layout under one root:
//   images/<id>.png            uploaded FOVs (raw)
//   images/<id>.norm-<key>.png stain-normalized copies
//   annotations.jsonl          correction records, append-only
//   consumed.jsonl             {"first","last","model_id"} consumption marks
//   models/registry.json       model lineage and the active model
//   models/<model_id>/         checkpoints
//   detections/ probmaps/ overlays/
// All members are safe to call from several threads.
class DataStore {
 public:
  explicit DataStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

  // Images. Ids are [A-Za-z0-9_-]+; generated ids are "fov-000001", ...
  std::string add_image(const RgbImage& image, std::optional<std::string> id = {});
  bool has_image(const std::string& id) const;
  RgbImage image(const std::string& id) const;
  std::pair<int, int> image_size(const std::string& id) const;
  std::vector<std::string> image_ids() const;
  std::filesystem::path image_path(const std::string& id) const;
  std::filesystem::path normalized_path(const std::string& id, const std::string& key) const;

  // Corrections. Returns the unconsumed count after the append.
  size_t append_corrections(const std::vector<AnnotationRecord>& records);
  std::vector<CorrectionRecord> corrections() const;
  size_t correction_count() const;
  size_t unconsumed_count() const;
  // Marks records [first, last) as used by `model_id`.
  void mark_consumed(size_t first, size_t last, const std::string& model_id);

  // Registry; writes go through a temporary file and a rename.
  Registry registry() const;
  void write_registry(const Registry& registry);
  std::string next_model_id() const;
  std::filesystem::path model_dir(const std::string& model_id) const;

  std::filesystem::path detections_path(const std::string& image_id,
                                        const std::string& model_id) const;
  std::filesystem::path probmap_path(const std::string& image_id,
                                     const std::string& model_id) const;
  std::filesystem::path overlay_path(const std::string& image_id) const;

 private:
  struct Mark {
    size_t first = 0;
    size_t last = 0;
    std::string model_id;
  };

  std::filesystem::path root_;
  mutable std::mutex mu_;
  std::vector<AnnotationRecord> records_;
  std::vector<Mark> marks_;
  size_t image_counter_ = 0;
};

bool valid_identifier(const std::string& id);

}  // namespace lymphdet

#endif  // LYMPHDET_STORE_H_
