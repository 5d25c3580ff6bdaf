#include "lymphdet/geometry.h"

#include <algorithm>
#include <cmath>
#include <string>

namespace lymphdet {

void disk_dilate_into(std::span<const Pixel> points, int radius,
                      BinaryMask& mask) {
  if (radius < 0) throw InvalidInput("dilation radius must be >= 0");
  const long r2 = static_cast<long>(radius) * radius;
  for (const Pixel& p : points) {
    if (!mask.contains(p)) {
      throw InvalidInput("dilation point (" + std::to_string(p.row) + "," +
                         std::to_string(p.col) + ") is outside the image");
    }
    const int r0 = std::max(0, p.row - radius);
    const int r1 = std::min(mask.height() - 1, p.row + radius);
    for (int r = r0; r <= r1; ++r) {
      const long dr = r - p.row;
      // Half-width of the disk on this row.
      const long rem = r2 - dr * dr;
      int half = static_cast<int>(std::sqrt(static_cast<double>(rem)));
      while (static_cast<long>(half + 1) * (half + 1) <= rem) ++half;
      while (static_cast<long>(half) * half > rem) --half;
      const int c0 = std::max(0, p.col - half);
      const int c1 = std::min(mask.width() - 1, p.col + half);
      for (int c = c0; c <= c1; ++c) mask.at(r, c) = 1;
    }
  }
}

BinaryMask disk_dilate(std::span<const Pixel> points, int radius, int height,
                       int width) {
  BinaryMask mask(height, width, 1, 0);
  disk_dilate_into(points, radius, mask);
  return mask;
}

Moments region_moments(std::span<const Pixel> pixels) {
  if (pixels.empty()) throw InvalidInput("region has no pixels");
  const double n = static_cast<double>(pixels.size());
  double sr = 0.0, sc = 0.0;
  for (const Pixel& p : pixels) {
    sr += p.row;
    sc += p.col;
  }
  const double mr = sr / n;
  const double mc = sc / n;
  double vrr = 0.0, vcc = 0.0, vrc = 0.0;
  for (const Pixel& p : pixels) {
    const double dr = p.row - mr;
    const double dc = p.col - mc;
    vrr += dr * dr;
    vcc += dc * dc;
    vrc += dr * dc;
  }
  vrr = vrr / n + 1.0 / 12.0;
  vcc = vcc / n + 1.0 / 12.0;
  vrc /= n;

  const double mean = 0.5 * (vrr + vcc);
  const double half_diff = 0.5 * (vrr - vcc);
  const double root = std::sqrt(half_diff * half_diff + vrc * vrc);
  const double major = mean + root;
  const double minor = mean - root;
  double ecc = std::sqrt(std::max(0.0, 1.0 - minor / major));
  return {{mr, mc}, ecc};
}

std::vector<Region> connected_components(const BinaryMask& mask) {
  const int h = mask.height();
  const int w = mask.width();
  std::vector<int> label(static_cast<size_t>(h) * w, -1);
  std::vector<Region> regions;
  std::vector<Pixel> stack;

  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const size_t idx = static_cast<size_t>(r) * w + c;
      if (!mask.at(r, c) || label[idx] >= 0) continue;
      const int id = static_cast<int>(regions.size());
      Region region;
      label[idx] = id;
      stack.push_back({r, c});
      while (!stack.empty()) {
        Pixel p = stack.back();
        stack.pop_back();
        region.pixels.push_back(p);
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            const int nr = p.row + dr;
            const int nc = p.col + dc;
            if ((dr == 0 && dc == 0) || !mask.contains(nr, nc)) continue;
            const size_t nidx = static_cast<size_t>(nr) * w + nc;
            if (mask.at(nr, nc) && label[nidx] < 0) {
              label[nidx] = id;
              stack.push_back({nr, nc});
            }
          }
        }
      }
      std::sort(region.pixels.begin(), region.pixels.end());
      region.area = static_cast<int>(region.pixels.size());
      Moments m = region_moments(region.pixels);
      region.centroid = m.centroid;
      region.eccentricity = m.eccentricity;
      regions.push_back(std::move(region));
    }
  }
  return regions;
}

}  // namespace lymphdet
