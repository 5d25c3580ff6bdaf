#include "lymphdet/dataset.h"

#include <algorithm>

#include <spdlog/spdlog.h>

namespace lymphdet {

namespace fs = std::filesystem;

FovPtr make_sample(std::string id, const RgbImage& raw, const AnnotationSet& annotations,
                   const std::optional<StainReference>& stain, int r1) {
  auto sample = std::make_shared<FovSample>();
  sample->id = std::move(id);
  sample->image = stain ? normalize_stain(raw, *stain) : raw;
  CompiledMaps maps = compile_maps(annotations, raw.height(), raw.width(), r1);
  sample->labels = std::move(maps.labels);
  sample->weights = std::move(maps.weights);
  sample->annotations = annotations;
  return sample;
}

std::vector<FovPtr> load_dataset_dir(const fs::path& dir, DataSource source,
                                     const std::optional<StainReference>& stain, int r1) {
  const fs::path records = dir / "annotations.jsonl";
  if (!fs::exists(records)) {
    throw std::runtime_error("dataset " + dir.string() + " has no annotations.jsonl");
  }
  std::vector<FovPtr> out;
  for (const auto& [fov_id, set] : group_by_fov(read_records(records), source)) {
    const fs::path image_path = dir / (fov_id + ".png");
    if (!fs::exists(image_path)) {
      spdlog::warn("annotations reference missing image {}", image_path.string());
      continue;
    }
    if (set.empty()) continue;
    out.push_back(make_sample(fov_id, read_rgb(image_path), set, stain, r1));
  }
  return out;
}

void write_dataset_fov(const fs::path& dir, const std::string& fov_id,
                       const RgbImage& image, const AnnotationSet& annotations) {
  fs::create_directories(dir);
  write_rgb(dir / (fov_id + ".png"), image);
  for (AnnotationRecord rec : to_records(annotations)) {
    rec.fov_id = fov_id;
    append_record(dir / "annotations.jsonl", rec);
  }
}

RgbImage first_dataset_image(const fs::path& dir) {
  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".png") images.push_back(entry.path());
  }
  if (images.empty()) throw std::runtime_error("no images in " + dir.string());
  std::sort(images.begin(), images.end());
  return read_rgb(images.front());
}

SourceData split_source(std::string name, const std::vector<FovPtr>& fovs, double ratio,
                        uint64_t seed) {
  SourceData data;
  data.name = std::move(name);
  if (fovs.size() < 2) {
    data.train = fovs;
    return data;
  }
  SplitIndices split = split_dataset(fovs.size(), ratio, seed);
  for (size_t i : split.train) data.train.push_back(fovs[i]);
  for (size_t i : split.validation) data.validation.push_back(fovs[i]);
  return data;
}

}  // namespace lymphdet
