#include "lymphdet/image.h"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace lymphdet {
namespace {

RgbImage from_bgr(const cv::Mat& bgr) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  RgbImage out(rgb.rows, rgb.cols, 3);
  for (int r = 0; r < rgb.rows; ++r) {
    std::copy_n(rgb.ptr<uint8_t>(r), rgb.cols * 3, &out.at(r, 0));
  }
  return out;
}

cv::Mat to_bgr(const RgbImage& image) {
  if (image.channels() != 3) throw InvalidInput("expected a 3-channel image");
  cv::Mat rgb(image.height(), image.width(), CV_8UC3,
              const_cast<uint8_t*>(image.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

void write_or_throw(const std::filesystem::path& path, const cv::Mat& mat) {
  if (!cv::imwrite(path.string(), mat)) {
    throw std::runtime_error("failed to write " + path.string());
  }
}

}  // namespace

RgbImage read_rgb(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot read image " + path.string());
  return from_bgr(bgr);
}

GrayImage read_gray(const std::filesystem::path& path) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw std::runtime_error("cannot read image " + path.string());
  GrayImage out(gray.rows, gray.cols, 1);
  for (int r = 0; r < gray.rows; ++r) {
    std::copy_n(gray.ptr<uint8_t>(r), gray.cols, &out.at(r, 0));
  }
  return out;
}

void write_rgb(const std::filesystem::path& path, const RgbImage& image) {
  write_or_throw(path, to_bgr(image));
}

void write_gray(const std::filesystem::path& path, const GrayImage& image) {
  if (image.channels() != 1) throw InvalidInput("expected a 1-channel image");
  cv::Mat gray(image.height(), image.width(), CV_8UC1,
               const_cast<uint8_t*>(image.data()));
  write_or_throw(path, gray);
}

void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  GrayImage out(mask.height(), mask.width(), 1);
  std::transform(mask.values().begin(), mask.values().end(),
                 out.values().begin(),
                 [](uint8_t v) -> uint8_t { return v ? 255 : 0; });
  write_gray(path, out);
}

void write_probability(const std::filesystem::path& path,
                       const FloatImage& prob) {
  GrayImage out(prob.height(), prob.width(), 1);
  for (size_t i = 0; i < out.size(); ++i) {
    float v = std::clamp(prob.values()[i * prob.channels()], 0.0f, 1.0f);
    out.values()[i] = static_cast<uint8_t>(std::lround(v * 255.0f));
  }
  write_gray(path, out);
}

RgbImage decode_rgb(const std::vector<uint8_t>& bytes) {
  cv::Mat bgr = cv::imdecode(bytes, cv::IMREAD_COLOR);
  if (bgr.empty()) throw InvalidInput("payload is not a decodable image");
  return from_bgr(bgr);
}

std::vector<uint8_t> encode_png(const RgbImage& image) {
  std::vector<uint8_t> buf;
  if (!cv::imencode(".png", to_bgr(image), buf)) {
    throw std::runtime_error("png encoding failed");
  }
  return buf;
}

}  // namespace lymphdet
