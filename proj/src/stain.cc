#include "lymphdet/stain.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

namespace lymphdet {
namespace {

// RGB -> LMS cone response, then an orthonormal decorrelating rotation of the
// log responses.
const Eigen::Matrix3d& rgb_to_lms() {
  static const Eigen::Matrix3d m = (Eigen::Matrix3d() << 0.3811, 0.5783, 0.0402,
                                    0.1967, 0.7244, 0.0782,
                                    0.0241, 0.1288, 0.8444)
                                       .finished();
  return m;
}

const Eigen::Matrix3d& lms_to_rgb() {
  static const Eigen::Matrix3d m = rgb_to_lms().inverse();
  return m;
}

const Eigen::Matrix3d& log_lms_to_lab() {
  static const Eigen::Matrix3d m = [] {
    Eigen::Matrix3d scale = Eigen::Vector3d(1.0 / std::sqrt(3.0),
                                            1.0 / std::sqrt(6.0),
                                            1.0 / std::sqrt(2.0))
                                .asDiagonal();
    Eigen::Matrix3d mix;
    mix << 1, 1, 1, 1, 1, -2, 1, -1, 0;
    return Eigen::Matrix3d(scale * mix);
  }();
  return m;
}

const Eigen::Matrix3d& lab_to_log_lms() {
  static const Eigen::Matrix3d m = log_lms_to_lab().inverse();
  return m;
}

// LMS responses below one intensity level are floored before the log.
constexpr double kLmsFloor = 1.0;

std::vector<Eigen::Vector3d> to_lab(const RgbImage& image) {
  if (image.channels() != 3) {
    throw InvalidInput("stain normalization needs a 3-channel RGB image");
  }
  const size_t n = static_cast<size_t>(image.height()) * image.width();
  std::vector<Eigen::Vector3d> out(n);
  const uint8_t* px = image.data();
  for (size_t i = 0; i < n; ++i, px += 3) {
    Eigen::Vector3d rgb(px[0], px[1], px[2]);
    Eigen::Vector3d lms = rgb_to_lms() * rgb;
    for (int k = 0; k < 3; ++k) lms[k] = std::log10(std::max(lms[k], kLmsFloor));
    out[i] = log_lms_to_lab() * lms;
  }
  return out;
}

StainReference stats(const std::vector<Eigen::Vector3d>& lab) {
  StainReference ref;
  const double n = static_cast<double>(lab.size());
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  for (const auto& v : lab) sum += v;
  Eigen::Vector3d mean = sum / n;
  Eigen::Vector3d var = Eigen::Vector3d::Zero();
  for (const auto& v : lab) var += (v - mean).cwiseAbs2();
  var /= n;
  for (int k = 0; k < 3; ++k) {
    ref.mean[k] = mean[k];
    ref.stddev[k] = std::sqrt(var[k]);
  }
  return ref;
}

}  // namespace

void to_json(nlohmann::json& j, const StainReference& ref) {
  j = nlohmann::json{{"mean", ref.mean}, {"stddev", ref.stddev}};
}

void from_json(const nlohmann::json& j, StainReference& ref) {
  j.at("mean").get_to(ref.mean);
  j.at("stddev").get_to(ref.stddev);
}

StainReference fit_reference(const RgbImage& image) {
  return stats(to_lab(image));
}

RgbImage normalize_stain(const RgbImage& image,
                         const StainReference& reference) {
  std::vector<Eigen::Vector3d> lab = to_lab(image);
  const StainReference source = stats(lab);

  Eigen::Vector3d scale, src_mean, ref_mean;
  for (int k = 0; k < 3; ++k) {
    src_mean[k] = source.mean[k];
    ref_mean[k] = reference.mean[k];
    if (source.stddev[k] < kStainEpsilon) {
      scale[k] = 0.0;  // constant channel: lands on the reference mean
    } else if (reference.stddev[k] < kStainEpsilon) {
      scale[k] = 1.0;  // degenerate reference: shift only
    } else {
      scale[k] = reference.stddev[k] / source.stddev[k];
    }
  }

  RgbImage out(image.height(), image.width(), 3);
  uint8_t* px = out.data();
  for (const Eigen::Vector3d& v : lab) {
    Eigen::Vector3d mapped =
        (v - src_mean).cwiseProduct(scale) + ref_mean;
    Eigen::Vector3d lms = lab_to_log_lms() * mapped;
    for (int k = 0; k < 3; ++k) lms[k] = std::pow(10.0, lms[k]);
    Eigen::Vector3d rgb = lms_to_rgb() * lms;
    for (int k = 0; k < 3; ++k) {
      *px++ = static_cast<uint8_t>(std::lround(std::clamp(rgb[k], 0.0, 255.0)));
    }
  }
  return out;
}

}  // namespace lymphdet
