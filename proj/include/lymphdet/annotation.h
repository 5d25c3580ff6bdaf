#ifndef LYMPHDET_ANNOTATION_H_
#define LYMPHDET_ANNOTATION_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lymphdet/image.h"

namespace lymphdet {

enum class AnnotationKind { kPositivePoint, kPositiveScribble, kNegativePoint, kNegativeScribble };
enum class DataSource { kPublic, kInHouse, kCorrection };

std::string to_string(AnnotationKind kind);  // "PP", "PS", "NP", "NS"
std::optional<AnnotationKind> parse_kind(const std::string& text);
std::string to_string(DataSource source);
DataSource parse_source(const std::string& text);

using Polyline = std::vector<Pixel>;

// Free-form annotations attached to one field of view.
struct AnnotationSet {
  std::string fov_id;
  std::vector<Pixel> positive_points;
  std::vector<Polyline> positive_scribbles;
  std::vector<Pixel> negative_points;
  std::vector<Polyline> negative_scribbles;
  DataSource source = DataSource::kPublic;

  bool empty() const {
    return positive_points.empty() && positive_scribbles.empty() &&
           negative_points.empty() && negative_scribbles.empty();
  }
  size_t count() const {
    return positive_points.size() + positive_scribbles.size() +
           negative_points.size() + negative_scribbles.size();
  }
};

// One persisted annotation: a click (one point) or a stroke (ordered points).
struct AnnotationRecord {
  std::string fov_id;
  AnnotationKind kind = AnnotationKind::kPositivePoint;
  std::vector<Pixel> points;
  int64_t timestamp = 0;  // milliseconds since epoch
  std::string author;
};

// Raised when a wire record is malformed; `fields` names each offending key.
class AnnotationFormatError : public InvalidInput {
 public:
  AnnotationFormatError(const std::string& what, std::vector<std::string> fields)
      : InvalidInput(what), fields(std::move(fields)) {}
  std::vector<std::string> fields;
};

nlohmann::json to_json(const AnnotationRecord& record);
AnnotationRecord parse_record(const nlohmann::json& j);

std::vector<AnnotationRecord> read_records(const std::filesystem::path& path);
void append_record(const std::filesystem::path& path, const AnnotationRecord& record);
void write_records(const std::filesystem::path& path,
                   const std::vector<AnnotationRecord>& records);

void add_record(AnnotationSet& set, const AnnotationRecord& record);
std::vector<AnnotationRecord> to_records(const AnnotationSet& set);
std::map<std::string, AnnotationSet> group_by_fov(
    const std::vector<AnnotationRecord>& records, DataSource source);

// 1-pixel-wide rasterization of a stroke (Bresenham between samples).
std::vector<Pixel> rasterize_polyline(const Polyline& line);

using LabelMap = Image<uint8_t>;  // 0 ignore, 1 non-lymphocyte, 2 lymphocyte
using WeightMap = Image<float>;   // {0, 0.5, 1}

inline constexpr uint8_t kLabelIgnore = 0;
inline constexpr uint8_t kLabelNegative = 1;
inline constexpr uint8_t kLabelPositive = 2;
inline constexpr int kDefaultDilationRadius = 11;

struct CompiledMaps {
  LabelMap labels;
  WeightMap weights;
};

// Builds the per-pixel supervision targets. Positive points are dilated to
// a full-weight core of radius r1-5 and a half-weight ring out to r1;
// negative points are dilated to r1+5. Negative evidence wins on overlap.
CompiledMaps compile_maps(const AnnotationSet& annotations, int height,
                          int width, int r1 = kDefaultDilationRadius);

void write_label_png(const std::filesystem::path& path, const LabelMap& labels);
void write_weight_png(const std::filesystem::path& path, const WeightMap& weights);

struct TileOptions {
  int patch = 400;
  int stride = 200;
  int center = 200;
};

struct Tile {
  Pixel origin;  // top-left corner in FOV coordinates
  RgbImage image;
  AnnotationSet annotations;
};

// Window origins along one axis; the final window is snapped to the edge.
std::vector<int> tile_offsets(int extent, int patch, int stride);

std::vector<Tile> tile_fov(const RgbImage& fov, const AnnotationSet& annotations,
                           const TileOptions& options = {});

struct SplitIndices {
  std::vector<size_t> train;
  std::vector<size_t> validation;
};

// Random partition with |train| = round(ratio * n), kept in [1, n-1].
SplitIndices split_dataset(size_t n, double ratio, uint64_t seed);

}  // namespace lymphdet

#endif  // LYMPHDET_ANNOTATION_H_
