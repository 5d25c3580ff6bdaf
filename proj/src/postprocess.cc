#include "lymphdet/postprocess.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "lymphdet/geometry.h"

namespace lymphdet {

SizeBounds default_size_bounds(double diameter_min, double diameter_max,
                               double slack_low, double slack_high) {
  if (!(diameter_min > 0.0 && diameter_min < diameter_max)) {
    throw InvalidInput("need 0 < diameter_min < diameter_max");
  }
  if (!(slack_low > 0.0 && slack_high > 0.0)) {
    throw InvalidInput("size slack factors must be positive");
  }
  const double r_lo = diameter_min / 2.0;
  const double r_hi = diameter_max / 2.0;
  SizeBounds b;
  b.min_area = std::max(1.0, slack_low * std::numbers::pi * r_lo * r_lo);
  b.max_area = slack_high * std::numbers::pi * r_hi * r_hi;
  return b;
}

void PostprocessConfig::validate() const {
  if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidInput("threshold must be in (0,1)");
  if (!(min_area > 0.0 && min_area < max_area)) {
    throw InvalidInput("need 0 < min_area < max_area");
  }
}

BinaryMask threshold_mask(const FloatImage& prob, double threshold) {
  BinaryMask mask(prob.height(), prob.width(), 1, 0);
  for (size_t i = 0; i < mask.size(); ++i) {
    mask.values()[i] = prob.values()[i * prob.channels()] >= threshold;
  }
  return mask;
}

std::vector<Detection> detect(const FloatImage& prob, const PostprocessConfig& config) {
  config.validate();
  if (prob.channels() != 1) throw InvalidInput("detect expects a single-channel map");
  std::vector<Detection> out;
  for (const Region& region : connected_components(threshold_mask(prob, config.threshold))) {
    if (region.eccentricity > config.eccentricity_max) continue;
    if (region.area < config.min_area || region.area > config.max_area) continue;
    double sum = 0.0;
    for (const Pixel& p : region.pixels) sum += prob.at(p.row, p.col);
    out.push_back({region.centroid, sum / region.area, region.area, region.eccentricity});
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.position.row != b.position.row) return a.position.row < b.position.row;
    return a.position.col < b.position.col;
  });
  return out;
}

std::vector<double> default_threshold_grid() {
  std::vector<double> grid;
  for (int i = 5; i <= 95; ++i) grid.push_back(i / 100.0);
  return grid;
}

size_t mask_disagreement(std::span<const FloatImage> old_maps, double old_threshold,
                         std::span<const FloatImage> new_maps, double new_threshold) {
  if (old_maps.size() != new_maps.size()) {
    throw InvalidInput("old and new reference map counts differ");
  }
  size_t total = 0;
  for (size_t k = 0; k < old_maps.size(); ++k) {
    const FloatImage& a = old_maps[k];
    const FloatImage& b = new_maps[k];
    if (!a.same_shape(b)) throw InvalidInput("reference map shapes differ");
    for (size_t i = 0; i < a.size(); ++i) {
      total += (a.values()[i] >= old_threshold) != (b.values()[i] >= new_threshold);
    }
  }
  return total;
}

double calibrate_threshold(std::span<const FloatImage> old_maps, double old_threshold,
                           std::span<const FloatImage> new_maps,
                           const std::vector<double>& grid) {
  if (old_maps.empty()) {
    spdlog::warn("no reference FOVs for threshold calibration; keeping {}", old_threshold);
    return old_threshold;
  }
  if (grid.empty()) throw InvalidInput("threshold grid is empty");
  double best_t = grid.front();
  size_t best = std::numeric_limits<size_t>::max();
  for (double t : grid) {
    const size_t d = mask_disagreement(old_maps, old_threshold, new_maps, t);
    if (d < best || (d == best && t < best_t)) {
      best = d;
      best_t = t;
    }
  }
  return best_t;
}

nlohmann::json to_json(const Detection& d, const std::string& fov_id) {
  return {{"fov_id", fov_id},
          {"row", d.position.row},
          {"col", d.position.col},
          {"confidence", d.confidence},
          {"area", d.area},
          {"eccentricity", d.eccentricity}};
}

void write_detections(const std::filesystem::path& path, const std::string& fov_id,
                      const std::vector<Detection>& detections) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& d : detections) out << to_json(d, fov_id).dump() << '\n';
}

namespace {

cv::Scalar confidence_color(double c) {
  cv::Mat v(1, 1, CV_8UC1, cv::Scalar(std::lround(std::clamp(c, 0.0, 1.0) * 255.0)));
  cv::Mat rgb;
  cv::applyColorMap(v, rgb, cv::COLORMAP_JET);  // BGR output
  const cv::Vec3b bgr = rgb.at<cv::Vec3b>(0, 0);
  return {static_cast<double>(bgr[2]), static_cast<double>(bgr[1]),
          static_cast<double>(bgr[0])};
}

}  // namespace

RgbImage render_overlay(const RgbImage& image, const std::vector<Detection>& detections) {
  if (image.channels() != 3) throw InvalidInput("overlay needs an RGB image");
  const int bar = 12;
  RgbImage out(image.height(), image.width() + bar, 3, 255);
  cv::Mat canvas(out.height(), out.width(), CV_8UC3, out.data());
  cv::Mat src(image.height(), image.width(), CV_8UC3, const_cast<uint8_t*>(image.data()));
  src.copyTo(canvas(cv::Rect(0, 0, image.width(), image.height())));
  for (const Detection& d : detections) {
    const cv::Point center(static_cast<int>(std::lround(d.position.col)),
                           static_cast<int>(std::lround(d.position.row)));
    cv::circle(canvas, center, 4, confidence_color(d.confidence), cv::FILLED);
    cv::circle(canvas, center, 4, cv::Scalar(255, 255, 255), 1);
  }
  for (int r = 0; r < out.height(); ++r) {
    const double c = 1.0 - static_cast<double>(r) / std::max(1, out.height() - 1);
    cv::line(canvas, {image.width() + 2, r}, {out.width() - 1, r}, confidence_color(c));
  }
  return out;
}

}  // namespace lymphdet
