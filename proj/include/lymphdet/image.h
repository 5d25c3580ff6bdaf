#ifndef LYMPHDET_IMAGE_H_
#define LYMPHDET_IMAGE_H_

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace lymphdet {

// Pixel coordinate, (row, col) with origin at the top-left.
struct Pixel {
  int row = 0;
  int col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
  friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

struct PointF {
  double row = 0.0;
  double col = 0.0;
};

class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense raster with interleaved channels (row-major, HWC).
template <typename T>
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels = 1, T fill = T{})
      : height_(height), width_(width), channels_(channels) {
    if (height < 1 || width < 1 || channels < 1) {
      throw InvalidInput("image dimensions must be positive");
    }
    data_.assign(static_cast<size_t>(height) * width * channels, fill);
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  bool contains(int row, int col) const {
    return row >= 0 && col >= 0 && row < height_ && col < width_;
  }
  bool contains(Pixel p) const { return contains(p.row, p.col); }

  T& at(int row, int col, int ch = 0) {
    return data_[(static_cast<size_t>(row) * width_ + col) * channels_ + ch];
  }
  const T& at(int row, int col, int ch = 0) const {
    return data_[(static_cast<size_t>(row) * width_ + col) * channels_ + ch];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  bool same_shape(const Image& other) const {
    return height_ == other.height_ && width_ == other.width_ &&
           channels_ == other.channels_;
  }
  template <typename U>
  bool same_extent(const Image<U>& other) const {
    return height_ == other.height() && width_ == other.width();
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<T> data_;
};

using RgbImage = Image<uint8_t>;    // 3 channels, RGB order
using GrayImage = Image<uint8_t>;   // 1 channel
using FloatImage = Image<float>;
using BinaryMask = Image<uint8_t>;  // 1 channel, 0 or 1

// PNG I/O. RGB images are stored in RGB order in memory regardless of the
// codec's native channel order. Masks are written as {0,255}.
RgbImage read_rgb(const std::filesystem::path& path);
GrayImage read_gray(const std::filesystem::path& path);
void write_rgb(const std::filesystem::path& path, const RgbImage& image);
void write_gray(const std::filesystem::path& path, const GrayImage& image);
void write_mask(const std::filesystem::path& path, const BinaryMask& mask);
// Probability map in [0,1] -> 8-bit grayscale.
void write_probability(const std::filesystem::path& path, const FloatImage& prob);

RgbImage decode_rgb(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> encode_png(const RgbImage& image);

}  // namespace lymphdet

#endif  // LYMPHDET_IMAGE_H_
