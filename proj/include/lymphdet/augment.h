#ifndef LYMPHDET_AUGMENT_H_
#define LYMPHDET_AUGMENT_H_

#include <random>

#include "lymphdet/annotation.h"
#include "lymphdet/image.h"

namespace lymphdet {

// A K x K training crop with its aligned supervision.
struct TrainingPatch {
  RgbImage image;
  LabelMap labels;
  WeightMap weights;
  Pixel anchor;  // chosen labelled pixel, in transformed FOV coordinates
  Pixel center;  // anchor + jitter, the crop center in the same frame
};

enum class Flip { kNone, kHorizontal, kVertical };

// Every random choice made for one sample. `angle_deg` == 0 means no rotation.
struct AugmentPlan {
  Flip flip = Flip::kNone;
  int angle_deg = 0;
  double anchor_u = 0.0;  // in [0,1): picks among labelled pixels
  int dx = 0;             // column jitter
  int dy = 0;             // row jitter
};

struct AugmentOptions {
  int patch_size = 256;
  int max_jitter = 20;
};

AugmentPlan draw_plan(std::mt19937_64& rng, const AugmentOptions& options = {});

// Applies flip, then rotation about the FOV center, then the anchored crop.
// Throws InvalidInput when the transformed label map has no labelled pixel.
TrainingPatch apply_plan(const RgbImage& fov, const LabelMap& labels,
                         const WeightMap& weights, const AugmentPlan& plan,
                         int patch_size);

TrainingPatch sample_patch(const RgbImage& fov, const LabelMap& labels,
                           const WeightMap& weights, std::mt19937_64& rng,
                           const AugmentOptions& options = {});

// Reflection without repeating the edge pixel: index -1 maps to 1.
// Repeats the reflection for indices further out.
int reflect_index(int i, int n);

template <typename T>
Image<T> mirror_pad(const Image<T>& image, int top, int bottom, int left,
                    int right) {
  if (top < 0 || bottom < 0 || left < 0 || right < 0) {
    throw InvalidInput("pad extents must be non-negative");
  }
  if (top >= image.height() || bottom >= image.height() ||
      left >= image.width() || right >= image.width()) {
    throw InvalidInput("pad extent must be smaller than the image dimension");
  }
  Image<T> out(image.height() + top + bottom, image.width() + left + right,
               image.channels());
  for (int r = 0; r < out.height(); ++r) {
    const int sr = reflect_index(r - top, image.height());
    for (int c = 0; c < out.width(); ++c) {
      const int sc = reflect_index(c - left, image.width());
      for (int k = 0; k < image.channels(); ++k) out.at(r, c, k) = image.at(sr, sc, k);
    }
  }
  return out;
}

// K x K window whose top-left is `origin`; out-of-range indices reflect.
template <typename T>
Image<T> crop_reflect(const Image<T>& image, Pixel origin, int height, int width) {
  Image<T> out(height, width, image.channels());
  for (int r = 0; r < height; ++r) {
    const int sr = reflect_index(origin.row + r, image.height());
    for (int c = 0; c < width; ++c) {
      const int sc = reflect_index(origin.col + c, image.width());
      for (int k = 0; k < image.channels(); ++k) out.at(r, c, k) = image.at(sr, sc, k);
    }
  }
  return out;
}

template <typename T>
Image<T> flip_image(const Image<T>& image, Flip flip) {
  if (flip == Flip::kNone) return image;
  Image<T> out(image.height(), image.width(), image.channels());
  for (int r = 0; r < image.height(); ++r) {
    for (int c = 0; c < image.width(); ++c) {
      const int sr = flip == Flip::kVertical ? image.height() - 1 - r : r;
      const int sc = flip == Flip::kHorizontal ? image.width() - 1 - c : c;
      for (int k = 0; k < image.channels(); ++k) out.at(r, c, k) = image.at(sr, sc, k);
    }
  }
  return out;
}

// Rotation by `angle_deg` (counter-clockwise) about the image center, with
// reflected borders. Bilinear for `image`, nearest for categorical rasters.
RgbImage rotate_bilinear(const RgbImage& image, int angle_deg);
LabelMap rotate_nearest(const LabelMap& labels, int angle_deg);
WeightMap rotate_nearest(const WeightMap& weights, int angle_deg);

// Where a source pixel lands after flip + rotation (for alignment checks).
PointF transform_point(PointF p, int height, int width, const AugmentPlan& plan);

}  // namespace lymphdet

#endif  // LYMPHDET_AUGMENT_H_
