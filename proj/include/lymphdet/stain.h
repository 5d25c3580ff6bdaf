#ifndef LYMPHDET_STAIN_H_
#define LYMPHDET_STAIN_H_

#include <array>

#include <nlohmann/json.hpp>

#include "lymphdet/image.h"

namespace lymphdet {

// Colour statistics of a reference field of view in the decorrelated
// log-LMS (l, alpha, beta) space.
struct StainReference {
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};

  friend bool operator==(const StainReference&, const StainReference&) = default;
};

void to_json(nlohmann::json& j, const StainReference& ref);
void from_json(const nlohmann::json& j, StainReference& ref);

inline constexpr double kStainEpsilon = 1e-6;

StainReference fit_reference(const RgbImage& image);

// Per-channel affine match of the image's l-alpha-beta statistics to the
// reference, then back to RGB with clipping to [0,255].
RgbImage normalize_stain(const RgbImage& image, const StainReference& reference);

}  // namespace lymphdet

#endif  // LYMPHDET_STAIN_H_
