#ifndef LYMPHDET_MODEL_H_
#define LYMPHDET_MODEL_H_

#include <filesystem>
#include <optional>
#include <string>

#include "lymphdet/network.h"
#include "lymphdet/stain.h"

namespace lymphdet {

inline constexpr double kDefaultThreshold = 0.5;

struct ModelMetadata {
  std::string model_id;
  std::string parent_id;  // empty for models trained from scratch
  int epoch = 0;
  double threshold = kDefaultThreshold;
  std::optional<StainReference> stain;
  int64_t created_ms = 0;
};

// A trained network snapshot: structure, weights and everything needed to
// reproduce its detections.
struct Model {
  NetworkConfig config;
  ParamSet<float> params;
  ModelMetadata meta;
};

// Checkpoint directory layout:
//   manifest.json   ordered layer list (name, shape, file, kind)
//   <name>.f32      raw little-endian float32 values, one file per tensor
//   metadata.json   config, epoch, lineage, threshold
//   stain.json      stain reference (when present)
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);

}  // namespace lymphdet

#endif  // LYMPHDET_MODEL_H_
