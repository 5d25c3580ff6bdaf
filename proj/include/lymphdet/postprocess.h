#ifndef LYMPHDET_POSTPROCESS_H_
#define LYMPHDET_POSTPROCESS_H_

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lymphdet/image.h"

namespace lymphdet {

struct Detection {
  PointF position;  // region centroid, (row, col)
  double confidence = 0.0;
  int area = 0;
  double eccentricity = 0.0;
};

struct SizeBounds {
  double min_area = 0.0;
  double max_area = 0.0;
};

// Area bounds from the expected lymphocyte diameter range: the lower bound
// is slack_low times the smallest disk, the upper bound slack_high times the
// largest. The lower bound never drops below one pixel.
SizeBounds default_size_bounds(double diameter_min = 24.0, double diameter_max = 40.0,
                               double slack_low = 0.5, double slack_high = 2.0);

struct PostprocessConfig {
  double threshold = 0.5;
  double eccentricity_max = 0.8;
  double min_area = default_size_bounds().min_area;
  double max_area = default_size_bounds().max_area;

  void validate() const;
};

// prob >= threshold on a single-channel probability map.
BinaryMask threshold_mask(const FloatImage& prob, double threshold);

// Threshold, 8-connected components, eccentricity filter, size filter.
// Result is sorted by descending confidence, then row-major centroid.
std::vector<Detection> detect(const FloatImage& prob, const PostprocessConfig& config);

// Candidate thresholds 0.05, 0.06, ..., 0.95.
std::vector<double> default_threshold_grid();

// Picks the grid threshold whose masks on `new_maps` best agree (Hamming
// distance) with the masks of `old_maps` at `old_threshold`. Ties go to the
// smallest threshold; with no reference maps the old threshold is kept.
double calibrate_threshold(std::span<const FloatImage> old_maps, double old_threshold,
                           std::span<const FloatImage> new_maps,
                           const std::vector<double>& grid = default_threshold_grid());

// Total pixel disagreement between the two mask families.
size_t mask_disagreement(std::span<const FloatImage> old_maps, double old_threshold,
                         std::span<const FloatImage> new_maps, double new_threshold);

nlohmann::json to_json(const Detection& d, const std::string& fov_id);
void write_detections(const std::filesystem::path& path, const std::string& fov_id,
                      const std::vector<Detection>& detections);

// Dots coloured by confidence (blue = 0 ... red = 1) with a colour bar.
RgbImage render_overlay(const RgbImage& image, const std::vector<Detection>& detections);

}  // namespace lymphdet

#endif  // LYMPHDET_POSTPROCESS_H_
