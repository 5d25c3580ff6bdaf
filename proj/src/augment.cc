#include "lymphdet/augment.h"

#include <cmath>

#include <opencv2/imgproc.hpp>

namespace lymphdet {
namespace {

cv::Mat rotation_matrix(int height, int width, int angle_deg) {
  const cv::Point2f center((width - 1) * 0.5f, (height - 1) * 0.5f);
  return cv::getRotationMatrix2D(center, static_cast<double>(angle_deg), 1.0);
}

template <typename T>
Image<T> warp(const Image<T>& image, int angle_deg, int cv_type, int interp) {
  Image<T> out(image.height(), image.width(), image.channels());
  cv::Mat src(image.height(), image.width(), cv_type, const_cast<T*>(image.data()));
  cv::Mat dst(out.height(), out.width(), cv_type, out.data());
  cv::warpAffine(src, dst, rotation_matrix(image.height(), image.width(), angle_deg),
                 dst.size(), interp, cv::BORDER_REFLECT_101);
  return out;
}

}  // namespace

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

RgbImage rotate_bilinear(const RgbImage& image, int angle_deg) {
  return warp(image, angle_deg, CV_8UC(image.channels()), cv::INTER_LINEAR);
}

LabelMap rotate_nearest(const LabelMap& labels, int angle_deg) {
  return warp(labels, angle_deg, CV_8UC1, cv::INTER_NEAREST);
}

WeightMap rotate_nearest(const WeightMap& weights, int angle_deg) {
  return warp(weights, angle_deg, CV_32FC1, cv::INTER_NEAREST);
}

PointF transform_point(PointF p, int height, int width, const AugmentPlan& plan) {
  if (plan.flip == Flip::kHorizontal) p.col = width - 1 - p.col;
  if (plan.flip == Flip::kVertical) p.row = height - 1 - p.row;
  if (plan.angle_deg != 0) {
    cv::Mat m = rotation_matrix(height, width, plan.angle_deg);
    const double x = p.col, y = p.row;
    p.col = m.at<double>(0, 0) * x + m.at<double>(0, 1) * y + m.at<double>(0, 2);
    p.row = m.at<double>(1, 0) * x + m.at<double>(1, 1) * y + m.at<double>(1, 2);
  }
  return p;
}

AugmentPlan draw_plan(std::mt19937_64& rng, const AugmentOptions& options) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> angle(1, 360);
  std::uniform_int_distribution<int> jitter(-options.max_jitter, options.max_jitter);
  AugmentPlan plan;
  const double f = unit(rng);
  plan.flip = f < 0.25 ? Flip::kHorizontal : (f < 0.5 ? Flip::kVertical : Flip::kNone);
  if (unit(rng) < 0.5) plan.angle_deg = angle(rng);
  plan.anchor_u = unit(rng);
  plan.dx = jitter(rng);
  plan.dy = jitter(rng);
  return plan;
}

TrainingPatch apply_plan(const RgbImage& fov, const LabelMap& labels,
                         const WeightMap& weights, const AugmentPlan& plan,
                         int patch_size) {
  if (!fov.same_extent(labels) || !fov.same_extent(weights)) {
    throw InvalidInput("image, labels and weights must share dimensions");
  }
  if (patch_size < 1) throw InvalidInput("patch size must be positive");

  RgbImage img = flip_image(fov, plan.flip);
  LabelMap lab = flip_image(labels, plan.flip);
  WeightMap wgt = flip_image(weights, plan.flip);
  if (plan.angle_deg != 0) {
    img = rotate_bilinear(img, plan.angle_deg);
    lab = rotate_nearest(lab, plan.angle_deg);
    wgt = rotate_nearest(wgt, plan.angle_deg);
  }

  size_t labelled = 0;
  for (uint8_t v : lab.values()) labelled += v > 0;
  if (labelled == 0) throw InvalidInput("FOV has no labelled pixel to anchor a patch");
  auto pick = static_cast<size_t>(plan.anchor_u * static_cast<double>(labelled));
  if (pick >= labelled) pick = labelled - 1;

  TrainingPatch patch;
  for (size_t i = 0, seen = 0; i < lab.size(); ++i) {
    if (lab.values()[i] == 0) continue;
    if (seen++ == pick) {
      patch.anchor = {static_cast<int>(i / lab.width()),
                      static_cast<int>(i % lab.width())};
      break;
    }
  }
  patch.center = {patch.anchor.row + plan.dy, patch.anchor.col + plan.dx};
  const Pixel origin{patch.center.row - patch_size / 2,
                     patch.center.col - patch_size / 2};
  patch.image = crop_reflect(img, origin, patch_size, patch_size);
  patch.labels = crop_reflect(lab, origin, patch_size, patch_size);
  patch.weights = crop_reflect(wgt, origin, patch_size, patch_size);
  return patch;
}

TrainingPatch sample_patch(const RgbImage& fov, const LabelMap& labels,
                           const WeightMap& weights, std::mt19937_64& rng,
                           const AugmentOptions& options) {
  return apply_plan(fov, labels, weights, draw_plan(rng, options),
                    options.patch_size);
}

}  // namespace lymphdet
