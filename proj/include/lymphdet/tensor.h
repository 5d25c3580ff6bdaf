#ifndef LYMPHDET_TENSOR_H_
#define LYMPHDET_TENSOR_H_

#include <vector>

#include <Eigen/Core>

#include "lymphdet/image.h"

namespace lymphdet {

// 64-byte aligned storage: Eigen's reductions peel to alignment, so summation
// order (and the last bits of the result) would otherwise depend on the heap.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

// Channel-major feature map (C x H x W), batch size one.
template <typename T>
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  AlignedVector<T> values;

  Tensor() = default;
  Tensor(int c, int h, int w, T fill = T{})
      : channels(c), height(h), width(w),
        values(static_cast<size_t>(c) * h * w, fill) {}

  size_t plane() const { return static_cast<size_t>(height) * width; }
  size_t size() const { return values.size(); }
  T& at(int c, int r, int col) { return values[c * plane() + static_cast<size_t>(r) * width + col]; }
  const T& at(int c, int r, int col) const {
    return values[c * plane() + static_cast<size_t>(r) * width + col];
  }
  T* data() { return values.data(); }
  const T* data() const { return values.data(); }
  bool same_shape(const Tensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixView = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixView = Eigen::Map<const RowMatrix<T>>;

// (C) x (H*W) view of a tensor.
template <typename T>
MatrixView<T> as_matrix(Tensor<T>& t) {
  return MatrixView<T>(t.data(), t.channels, static_cast<Eigen::Index>(t.plane()));
}
template <typename T>
ConstMatrixView<T> as_matrix(const Tensor<T>& t) {
  return ConstMatrixView<T>(t.data(), t.channels, static_cast<Eigen::Index>(t.plane()));
}

// RGB image -> 3 x H x W tensor with values mapped from [0,255] to [-1,1].
template <typename T>
Tensor<T> to_input_tensor(const RgbImage& image) {
  Tensor<T> t(image.channels(), image.height(), image.width());
  for (int r = 0; r < image.height(); ++r) {
    for (int c = 0; c < image.width(); ++c) {
      for (int k = 0; k < image.channels(); ++k) {
        t.at(k, r, c) = static_cast<T>(image.at(r, c, k)) / T(127.5) - T(1);
      }
    }
  }
  return t;
}

}  // namespace lymphdet

#endif  // LYMPHDET_TENSOR_H_
