#ifndef LYMPHDET_INFERENCE_H_
#define LYMPHDET_INFERENCE_H_

#include <vector>

#include "lymphdet/model.h"
#include "lymphdet/postprocess.h"

namespace lymphdet {

// Lymphocyte-class probability for every pixel of an already normalized
// image. Images whose sides are not multiples of the network's size multiple
// are mirror-padded on the bottom/right and the result cropped back.
FloatImage predict_probability(const FcnNetwork<float>& net, const ParamSet<float>& params,
                               const RgbImage& normalized);

// Immutable inference wrapper around a model snapshot. Safe for concurrent
// use from several threads.
class Detector {
 public:
  explicit Detector(Model model, PostprocessConfig postprocess = {});

  const Model& model() const { return model_; }
  const PostprocessConfig& postprocess() const { return postprocess_; }

  // Stain normalization with the model's reference (identity when absent).
  RgbImage normalize(const RgbImage& raw) const;
  FloatImage probability(const RgbImage& normalized) const;
  std::vector<Detection> detect_normalized(const RgbImage& normalized) const;
  std::vector<Detection> detect(const RgbImage& raw) const;

 private:
  Model model_;
  FcnNetwork<float> net_;
  PostprocessConfig postprocess_;
};

}  // namespace lymphdet

#endif  // LYMPHDET_INFERENCE_H_
