#ifndef LYMPHDET_GEOMETRY_H_
#define LYMPHDET_GEOMETRY_H_

#include <span>
#include <vector>

#include "lymphdet/image.h"

namespace lymphdet {

// An 8-connected set of foreground pixels with its second-moment summary.
struct Region {
  std::vector<Pixel> pixels;  // row-major order
  int area = 0;
  PointF centroid;
  double eccentricity = 0.0;
};

struct Moments {
  PointF centroid;
  double eccentricity = 0.0;
};

// Marks every pixel within Euclidean distance `radius` (inclusive) of any of
// `points`. Throws InvalidInput for negative radius or out-of-bounds points.
BinaryMask disk_dilate(std::span<const Pixel> points, int radius, int height,
                       int width);

// Same, OR-ed into an existing mask.
void disk_dilate_into(std::span<const Pixel> points, int radius,
                      BinaryMask& mask);

// Maximal 8-connected components, ordered by their first pixel in raster
// order. Every returned region has area, centroid and eccentricity filled.
std::vector<Region> connected_components(const BinaryMask& mask);

// Centroid and eccentricity of the ellipse sharing the pixel set's second
// moments. Each pixel is treated as a unit square, which adds 1/12 to both
// axis variances; a single pixel therefore has eccentricity 0.
Moments region_moments(std::span<const Pixel> pixels);

}  // namespace lymphdet

#endif  // LYMPHDET_GEOMETRY_H_
