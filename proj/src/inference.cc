#include "lymphdet/inference.h"

#include "lymphdet/augment.h"

namespace lymphdet {

FloatImage predict_probability(const FcnNetwork<float>& net, const ParamSet<float>& params,
                               const RgbImage& normalized) {
  const int m = net.config().size_multiple();
  const int h = normalized.height();
  const int w = normalized.width();
  const int ph = (h + m - 1) / m * m;
  const int pw = (w + m - 1) / m * m;
  const RgbImage padded =
      (ph == h && pw == w) ? normalized : crop_reflect(normalized, {0, 0}, ph, pw);
  const Tensor<float> probs =
      net.forward(params, to_input_tensor<float>(padded), Mode::kEval);
  FloatImage out(h, w, 1);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) out.at(r, c) = probs.at(1, r, c);
  }
  return out;
}

Detector::Detector(Model model, PostprocessConfig postprocess)
    : model_(std::move(model)), net_(model_.config), postprocess_(postprocess) {
  postprocess_.threshold = model_.meta.threshold;
  postprocess_.validate();
}

RgbImage Detector::normalize(const RgbImage& raw) const {
  return model_.meta.stain ? normalize_stain(raw, *model_.meta.stain) : raw;
}

FloatImage Detector::probability(const RgbImage& normalized) const {
  return predict_probability(net_, model_.params, normalized);
}

std::vector<Detection> Detector::detect_normalized(const RgbImage& normalized) const {
  return lymphdet::detect(probability(normalized), postprocess_);
}

std::vector<Detection> Detector::detect(const RgbImage& raw) const {
  return detect_normalized(normalize(raw));
}

}  // namespace lymphdet
