#include "lymphdet/synthetic.h"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <opencv2/imgproc.hpp>

namespace lymphdet {
namespace {

constexpr int kMaxAttempts = 5000;
constexpr int kMaxLayouts = 20;
constexpr double kGap = 4.0;  // free space between unrelated objects

double dist(PointF a, PointF b) { return std::hypot(a.row - b.row, a.col - b.col); }

// Radius of the circle enclosing the object.
double bound_radius(const SyntheticObject& o) { return o.radius; }

struct Placer {
  const SceneSpec& spec;
  std::mt19937_64& rng;
  std::vector<SyntheticObject>& objects;

  bool inside(PointF p) const {
    return p.row >= spec.margin && p.col >= spec.margin &&
           p.row <= spec.height - 1 - spec.margin && p.col <= spec.width - 1 - spec.margin;
  }

  bool fits(const SyntheticObject& cand, int ignore = -1) const {
    if (!inside(cand.center)) return false;
    for (size_t i = 0; i < objects.size(); ++i) {
      if (static_cast<int>(i) == ignore) continue;
      const SyntheticObject& o = objects[i];
      double need = bound_radius(o) + bound_radius(cand) + kGap;
      if (o.cls == ObjectClass::kLymphocyte && cand.cls == ObjectClass::kLymphocyte) {
        need = std::max(need, spec.lymphocyte_spacing);
      }
      if (dist(o.center, cand.center) < need) return false;
    }
    return true;
  }

  PointF random_center() {
    std::uniform_real_distribution<double> row(spec.margin, spec.height - 1 - spec.margin);
    std::uniform_real_distribution<double> col(spec.margin, spec.width - 1 - spec.margin);
    return {std::round(row(rng)), std::round(col(rng))};
  }

  void place_free(SyntheticObject obj) {
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      obj.center = random_center();
      if (fits(obj)) {
        objects.push_back(obj);
        return;
      }
    }
    throw InvalidInput("cannot pack the requested objects into the scene");
  }

  // Places `obj` touching lymphocyte `partner`; false if no room.
  bool place_touching(SyntheticObject obj, int partner) {
    const SyntheticObject& p = objects[partner];
    const double d = std::min(p.radius + obj.radius - 2.0, 28.0);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    for (int attempt = 0; attempt < 64; ++attempt) {
      const double a = angle(rng);
      obj.center = {std::round(p.center.row + d * std::sin(a)),
                    std::round(p.center.col + d * std::cos(a))};
      if (!inside(obj.center)) continue;
      bool ok = true;
      for (size_t i = 0; i < objects.size() && ok; ++i) {
        if (static_cast<int>(i) == partner) continue;
        ok = dist(objects[i].center, obj.center) >=
             bound_radius(objects[i]) + obj.radius + kGap;
      }
      if (ok) {
        objects.push_back(obj);
        return true;
      }
    }
    return false;
  }
};

double noise_field(const cv::Mat& field, int r, int c) { return field.at<float>(r, c); }

void paint(RgbImage& img, int r, int c, const double rgb[3]) {
  for (int k = 0; k < 3; ++k) {
    img.at(r, c, k) = static_cast<uint8_t>(std::lround(std::clamp(rgb[k], 0.0, 255.0)));
  }
}

}  // namespace

std::vector<PointF> SyntheticScene::lymphocyte_centers() const {
  std::vector<PointF> out;
  for (const auto& o : objects) {
    if (o.cls == ObjectClass::kLymphocyte) out.push_back(o.center);
  }
  return out;
}

SyntheticScene generate_scene(const SceneSpec& spec, std::mt19937_64& rng) {
  if (spec.height < 32 || spec.width < 32) throw InvalidInput("scene must be at least 32x32");
  if (spec.lymphocytes < 0 || spec.distractors < 0) throw InvalidInput("negative object count");
  if (!(spec.clustering >= 0.0 && spec.clustering <= 1.0)) {
    throw InvalidInput("clustering must be in [0,1]");
  }
  if (2 * spec.margin >= std::min(spec.height, spec.width)) {
    throw InvalidInput("margin leaves no room for objects");
  }
  // Packing bound: enclosing disks may cover at most half the canvas.
  const double budget = 0.5 * spec.height * spec.width;
  const double need = std::numbers::pi * (spec.lymphocytes * 20.0 * 20.0 +
                                          spec.distractors * 28.0 * 28.0);
  if (need > budget) throw InvalidInput("object counts exceed the packing bound");

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SyntheticScene scene;
  std::vector<std::pair<int, int>> touching;
  auto layout = [&] {
    scene.objects.clear();
    touching.clear();
    Placer placer{spec, rng, scene.objects};
    std::vector<bool> paired;

    for (int i = 0; i < spec.lymphocytes; ++i) {
      SyntheticObject obj;
      obj.cls = ObjectClass::kLymphocyte;
      std::vector<int> open;
      for (size_t j = 0; j < paired.size(); ++j) {
        if (!paired[j]) open.push_back(static_cast<int>(j));
      }
      // Uniform draw happens before the branch so the clustering knob does
      // not shift the rng stream for the radius.
      const double u = unit(rng);
      if (!open.empty() && u < spec.clustering) {
        obj.radius = std::uniform_real_distribution<double>(12.0, 14.0)(rng);
        const int partner = open[std::uniform_int_distribution<size_t>(0, open.size() - 1)(rng)];
        if (placer.place_touching(obj, partner)) {
          touching.emplace_back(partner, static_cast<int>(scene.objects.size()) - 1);
          paired[partner] = true;
          paired.push_back(true);
          continue;
        }
      }
      obj.radius = std::uniform_real_distribution<double>(12.0, 20.0)(rng);
      placer.place_free(obj);
      paired.push_back(false);
    }
    for (int i = 0; i < spec.distractors; ++i) {
      SyntheticObject obj;
      obj.cls = ObjectClass::kDistractor;
      if (unit(rng) < 0.5) {
        obj.radius = std::uniform_real_distribution<double>(22.0, 28.0)(rng);
        obj.elongation = 1.0;
      } else {
        obj.radius = std::uniform_real_distribution<double>(18.0, 24.0)(rng);
        obj.elongation = std::uniform_real_distribution<double>(2.4, 3.0)(rng);
      }
      obj.angle = std::uniform_real_distribution<double>(0.0, std::numbers::pi)(rng);
      placer.place_free(obj);
    }
  };
  // An unlucky early placement can block the rest; start over a few times.
  for (int restart = 0;; ++restart) {
    try {
      layout();
      break;
    } catch (const InvalidInput&) {
      if (restart + 1 == kMaxLayouts) throw;
    }
  }

  // Background: pink with smooth and fine texture.
  const int h = spec.height, w = spec.width;
  cv::Mat smooth(h, w, CV_32FC1);
  cv::Mat fine(h, w, CV_32FC1);
  {
    std::normal_distribution<float> g(0.0f, 1.0f);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        smooth.at<float>(r, c) = g(rng);
        fine.at<float>(r, c) = g(rng);
      }
    }
    cv::GaussianBlur(smooth, smooth, cv::Size(0, 0), 8.0);
    cv::normalize(smooth, smooth, -1.0, 1.0, cv::NORM_MINMAX);
  }
  scene.image = RgbImage(h, w, 3);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const double s = 14.0 * noise_field(smooth, r, c);
      const double f = 5.0 * noise_field(fine, r, c);
      const double px[3] = {232.0 + s + f, 178.0 + 0.8 * s + f, 204.0 + 0.6 * s + f};
      paint(scene.image, r, c, px);
    }
  }

  for (const SyntheticObject& o : scene.objects) {
    const bool lymph = o.cls == ObjectClass::kLymphocyte;
    const double jitter = std::uniform_real_distribution<double>(-10.0, 10.0)(rng);
    const double base[3] = {
        (lymph ? 72.0 : (o.elongation > 1.0 ? 138.0 : 168.0)) + jitter,
        (lymph ? 42.0 : (o.elongation > 1.0 ? 92.0 : 122.0)) + jitter,
        (lymph ? 124.0 : (o.elongation > 1.0 ? 165.0 : 190.0)) + jitter};
    const double ph1 = std::uniform_real_distribution<double>(0.0, 6.3)(rng);
    const double ph2 = std::uniform_real_distribution<double>(0.0, 6.3)(rng);
    const double major = o.radius;
    const double minor = o.radius / o.elongation;
    const int reach = static_cast<int>(std::ceil(major + 2.0));
    const double ca = std::cos(o.angle), sa = std::sin(o.angle);
    for (int r = static_cast<int>(o.center.row) - reach; r <= o.center.row + reach; ++r) {
      for (int c = static_cast<int>(o.center.col) - reach; c <= o.center.col + reach; ++c) {
        if (!scene.image.contains(r, c)) continue;
        const double dr = r - o.center.row, dc = c - o.center.col;
        const double u = dc * ca + dr * sa;   // along the major axis
        const double v = -dc * sa + dr * ca;  // along the minor axis
        const double theta = std::atan2(v, u);
        const double ragged = 0.8 * std::sin(3.0 * theta + ph1) + 0.5 * std::sin(5.0 * theta + ph2);
        const double norm = std::sqrt((u / major) * (u / major) + (v / minor) * (v / minor));
        if (norm * major > major + ragged) continue;
        const double f = 8.0 * noise_field(fine, r, c);
        const double px[3] = {base[0] + f, base[1] + f, base[2] + f};
        paint(scene.image, r, c, px);
      }
    }
  }

  // Ground truth.
  AnnotationSet& truth = scene.truth;
  truth.fov_id = "synthetic";
  for (const SyntheticObject& o : scene.objects) {
    const Pixel p{static_cast<int>(o.center.row), static_cast<int>(o.center.col)};
    (o.cls == ObjectClass::kLymphocyte ? truth.positive_points : truth.negative_points)
        .push_back(p);
  }
  for (const auto& [a, b] : touching) {
    const PointF pa = scene.objects[a].center, pb = scene.objects[b].center;
    const double len = dist(pa, pb);
    const PointF mid{(pa.row + pb.row) / 2.0, (pa.col + pb.col) / 2.0};
    const PointF perp{(pb.col - pa.col) / len, -(pb.row - pa.row) / len};
    Polyline stroke;
    for (double t : {-6.0, 6.0}) {
      const int r = std::clamp(static_cast<int>(std::lround(mid.row + t * perp.row)), 0, h - 1);
      const int c = std::clamp(static_cast<int>(std::lround(mid.col + t * perp.col)), 0, w - 1);
      stroke.push_back({r, c});
    }
    truth.negative_scribbles.push_back(stroke);
  }
  std::uniform_real_distribution<double> turn(-0.8, 0.8);
  std::uniform_real_distribution<double> heading(0.0, 2.0 * std::numbers::pi);
  for (int s = 0; s < spec.background_strokes; ++s) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      Polyline stroke;
      PointF p{std::uniform_real_distribution<double>(0.0, h - 1.0)(rng),
               std::uniform_real_distribution<double>(0.0, w - 1.0)(rng)};
      double a = heading(rng);
      stroke.push_back({static_cast<int>(p.row), static_cast<int>(p.col)});
      for (int seg = 0; seg < 4; ++seg) {
        a += turn(rng);
        p.row += 15.0 * std::sin(a);
        p.col += 15.0 * std::cos(a);
        stroke.push_back({static_cast<int>(std::lround(p.row)), static_cast<int>(std::lround(p.col))});
      }
      bool ok = true;
      for (const Pixel& q : rasterize_polyline(stroke)) {
        if (!scene.image.contains(q)) {
          ok = false;
          break;
        }
        for (const SyntheticObject& o : scene.objects) {
          if (dist({static_cast<double>(q.row), static_cast<double>(q.col)}, o.center) <
              bound_radius(o) + 5.0) {
            ok = false;
            break;
          }
        }
        if (!ok) break;
      }
      if (ok) {
        truth.negative_scribbles.push_back(stroke);
        break;
      }
    }
  }
  return scene;
}

}  // namespace lymphdet
