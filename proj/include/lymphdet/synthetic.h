#ifndef LYMPHDET_SYNTHETIC_H_
#define LYMPHDET_SYNTHETIC_H_

#include <random>
#include <vector>

#include "lymphdet/annotation.h"
#include "lymphdet/image.h"

namespace lymphdet {

enum class ObjectClass { kLymphocyte, kDistractor };

struct SyntheticObject {
  PointF center;
  double radius = 0.0;       // lymphocytes: disk radius in [12,20]
  double elongation = 1.0;   // major/minor axis ratio (distractors only)
  double angle = 0.0;        // radians
  ObjectClass cls = ObjectClass::kLymphocyte;
};

struct SceneSpec {
  int height = 192;
  int width = 192;
  int lymphocytes = 6;
  int distractors = 3;
  double clustering = 0.0;  // probability of placing a lymphocyte touching another
  int margin = 6;           // minimum distance of object centers from the border
  int background_strokes = 8;
  double lymphocyte_spacing = 50.0;  // min center distance of unclustered lymphocytes
};

struct SyntheticScene {
  RgbImage image;
  std::vector<SyntheticObject> objects;
  // PP at lymphocyte centers, NP at distractor centers, NS strokes through
  // the background and across touching lymphocyte pairs.
  AnnotationSet truth;

  std::vector<PointF> lymphocyte_centers() const;
};

// Flat H&E-like rendering: dark purple lymphocyte disks with ragged borders,
// paler larger or elongated distractor nuclei, on a textured pink background.
// Throws InvalidInput when the objects cannot be packed.
SyntheticScene generate_scene(const SceneSpec& spec, std::mt19937_64& rng);

}  // namespace lymphdet

#endif  // LYMPHDET_SYNTHETIC_H_
