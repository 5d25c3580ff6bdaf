#ifndef LYMPHDET_DATASET_H_
#define LYMPHDET_DATASET_H_

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lymphdet/annotation.h"
#include "lymphdet/stain.h"

namespace lymphdet {

// A stain-normalized FOV with its compiled supervision, ready for sampling.
struct FovSample {
  std::string id;
  RgbImage image;
  LabelMap labels;
  WeightMap weights;
  AnnotationSet annotations;
};

using FovPtr = std::shared_ptr<const FovSample>;

FovPtr make_sample(std::string id, const RgbImage& raw, const AnnotationSet& annotations,
                   const std::optional<StainReference>& stain,
                   int r1 = kDefaultDilationRadius);

// Dataset directory: <fov_id>.png images plus annotations.jsonl records.
// FOVs without any annotation are skipped.
std::vector<FovPtr> load_dataset_dir(const std::filesystem::path& dir, DataSource source,
                                     const std::optional<StainReference>& stain,
                                     int r1 = kDefaultDilationRadius);

// Writes one FOV image and appends its annotation records.
void write_dataset_fov(const std::filesystem::path& dir, const std::string& fov_id,
                       const RgbImage& image, const AnnotationSet& annotations);

// Raw (un-normalized) image of the first FOV in a dataset directory, by
// sorted file name; used to fit the stain reference.
RgbImage first_dataset_image(const std::filesystem::path& dir);

// Training and validation pools from one data source.
struct SourceData {
  std::string name;
  std::vector<FovPtr> train;
  std::vector<FovPtr> validation;
};

SourceData split_source(std::string name, const std::vector<FovPtr>& fovs, double ratio,
                        uint64_t seed);

}  // namespace lymphdet

#endif  // LYMPHDET_DATASET_H_
