#ifndef LYMPHDET_NETWORK_H_
#define LYMPHDET_NETWORK_H_

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lymphdet/tensor.h"

namespace lymphdet {

// Structural hyperparameters of the encoder-decoder network. Scale i of the
// encoder produces base_channels * 2^i feature maps; the bridge works at
// base_channels * 2^scales.
struct NetworkConfig {
  int base_channels = 32;
  int scales = 4;
  double dropout_rate = 0.1;
  int num_classes = 2;
  int input_channels = 3;

  void validate() const;
  int channels_at(int level) const { return base_channels << level; }
  // Spatial dims must be multiples of this.
  int size_multiple() const { return 1 << scales; }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

template <typename T>
struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  AlignedVector<T> values;
  bool is_kernel = true;  // false for biases (excluded from L2)
};

// Ordered parameter tensors; the order is the layer manifest.
template <typename T>
struct ParamSet {
  std::vector<ParamTensor<T>> tensors;

  size_t count() const {
    size_t n = 0;
    for (const auto& t : tensors) n += t.values.size();
    return n;
  }
  ParamSet zeros_like() const {
    ParamSet out = *this;
    for (auto& t : out.tensors) std::fill(t.values.begin(), t.values.end(), T{});
    return out;
  }
  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& t : tensors) {
      out.tensors.push_back({t.name, t.shape,
                             AlignedVector<U>(t.values.begin(), t.values.end()),
                             t.is_kernel});
    }
    return out;
  }
};

enum class Mode { kTrain, kEval };

template <typename T>
struct ResidualTrace {
  Tensor<T> input;
  Tensor<T> hidden;     // ReLU(conv_a(input))
  Tensor<T> activated;  // ReLU(shortcut + conv_b(hidden))
  std::vector<uint8_t> keep;
  Tensor<T> output;     // after dropout
};

template <typename T>
struct DecoderTrace {
  Tensor<T> below;      // input to the up-convolution
  Tensor<T> merged;     // [upsampled ; skip]
  Tensor<T> hidden;
  Tensor<T> activated;
  std::vector<uint8_t> keep;
  Tensor<T> output;
};

// Intermediate activations recorded by a forward pass for backward().
template <typename T>
struct ForwardTrace {
  Mode mode = Mode::kEval;
  std::vector<ResidualTrace<T>> encoders;
  ResidualTrace<T> bridge;
  std::vector<DecoderTrace<T>> decoders;  // index = scale
  Tensor<T> probabilities;
};

// Encoder-decoder fully convolutional network with residual encoder blocks,
// stride-2 down-convolutions, stride-2 up-convolutions with concatenated
// skip connections, and a 1x1 softmax head.
template <typename T>
class FcnNetwork {
 public:
  explicit FcnNetwork(NetworkConfig config);

  const NetworkConfig& config() const { return config_; }

  // He-normal kernels (std sqrt(2 / fan_in)), zero biases.
  ParamSet<T> init_params(uint64_t seed) const;
  // Correctly shaped, all zero.
  ParamSet<T> zero_params() const;

  // Returns per-pixel class probabilities (num_classes x H x W). `rng` is
  // required in train mode (dropout). Pass `trace` to enable backward().
  Tensor<T> forward(const ParamSet<T>& params, const Tensor<T>& input, Mode mode,
                    std::mt19937_64* rng = nullptr,
                    ForwardTrace<T>* trace = nullptr) const;

  // Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logits).
  void backward(const ParamSet<T>& params, const ForwardTrace<T>& trace,
                const Tensor<T>& grad_logits, ParamSet<T>& grads) const;

  static size_t parameter_count(const NetworkConfig& config);

 private:
  struct Conv {
    int in = 0, out = 0, kernel = 1, stride = 1, pad = 0;
    bool transposed = false;
    int weight = -1, bias = -1;  // indices into ParamSet::tensors
  };
  struct Residual {
    Conv a, b, projection;
    bool has_projection = false;
  };
  struct Decoder {
    Conv up, a, b;
  };

  Conv add_conv(int in, int out, int kernel, int stride, int pad,
                bool transposed, const std::string& name);
  Residual add_residual(int in, int out, const std::string& name);

  void residual_forward(const ParamSet<T>& p, const Residual& unit,
                        const Tensor<T>& x, Mode mode, std::mt19937_64* rng,
                        ResidualTrace<T>& trace) const;
  Tensor<T> residual_backward(const ParamSet<T>& p, const Residual& unit,
                              const ResidualTrace<T>& trace, Tensor<T> grad_out,
                              ParamSet<T>& grads, bool need_input_grad) const;

  NetworkConfig config_;
  std::vector<ParamTensor<T>> layout_;  // names/shapes, values empty
  std::vector<Residual> encoders_;
  std::vector<Conv> downs_;
  Residual bridge_;
  std::vector<Decoder> decoders_;
  Conv head_;
};

// Softmax over channels, per pixel.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits);

extern template class FcnNetwork<float>;
extern template class FcnNetwork<double>;

}  // namespace lymphdet

#endif  // LYMPHDET_NETWORK_H_
