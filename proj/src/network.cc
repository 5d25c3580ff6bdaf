#include "lymphdet/network.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lymphdet {

void NetworkConfig::validate() const {
  if (base_channels < 1) throw InvalidInput("base_channels must be >= 1");
  if (scales < 1 || scales > 8) throw InvalidInput("scales must be in [1,8]");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw InvalidInput("dropout_rate must be in [0,1)");
  }
  if (num_classes < 2) throw InvalidInput("num_classes must be >= 2");
  if (input_channels < 1) throw InvalidInput("input_channels must be >= 1");
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"base_channels", c.base_channels},
       {"scales", c.scales},
       {"dropout_rate", c.dropout_rate},
       {"num_classes", c.num_classes},
       {"input_channels", c.input_channels}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  j.at("base_channels").get_to(c.base_channels);
  j.at("scales").get_to(c.scales);
  j.at("dropout_rate").get_to(c.dropout_rate);
  j.at("num_classes").get_to(c.num_classes);
  j.at("input_channels").get_to(c.input_channels);
}

namespace {

template <typename T>
RowMatrix<T> im2col(const Tensor<T>& x, int k, int s, int p, int ho, int wo) {
  RowMatrix<T> cols(static_cast<Eigen::Index>(x.channels) * k * k,
                    static_cast<Eigen::Index>(ho) * wo);
  for (int ci = 0; ci < x.channels; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols.row((ci * k + ky) * k + kx).data();
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s - p + ky;
          T* dst = row + static_cast<size_t>(oy) * wo;
          if (iy < 0 || iy >= x.height) {
            std::fill(dst, dst + wo, T{});
            continue;
          }
          const T* src = &x.at(ci, iy, 0);
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s - p + kx;
            dst[ox] = (ix >= 0 && ix < x.width) ? src[ix] : T{};
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
void col2im_add(const RowMatrix<T>& cols, int k, int s, int p, int ho, int wo,
                Tensor<T>& dx) {
  for (int ci = 0; ci < dx.channels; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols.row((ci * k + ky) * k + kx).data();
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s - p + ky;
          if (iy < 0 || iy >= dx.height) continue;
          const T* src = row + static_cast<size_t>(oy) * wo;
          T* dst = &dx.at(ci, iy, 0);
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s - p + kx;
            if (ix >= 0 && ix < dx.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
  for (T& v : t.values) v = v > T{} ? v : T{};
}

// grad *= (activation > 0)
template <typename T>
void relu_backward(const Tensor<T>& activation, Tensor<T>& grad) {
  for (size_t i = 0; i < grad.size(); ++i) {
    if (!(activation.values[i] > T{})) grad.values[i] = T{};
  }
}

template <typename T>
void dropout_forward(const Tensor<T>& in, double rate, Mode mode,
                     std::mt19937_64* rng, std::vector<uint8_t>& keep,
                     Tensor<T>& out) {
  out = in;
  keep.clear();
  if (mode != Mode::kTrain || rate <= 0.0) return;
  if (rng == nullptr) throw InvalidInput("train-mode forward needs an rng");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  keep.resize(in.size());
  for (size_t i = 0; i < in.size(); ++i) {
    keep[i] = unit(*rng) >= rate;
    out.values[i] = keep[i] ? in.values[i] * scale : T{};
  }
}

template <typename T>
void dropout_backward(const std::vector<uint8_t>& keep, double rate,
                      Tensor<T>& grad) {
  if (keep.empty()) return;
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (size_t i = 0; i < grad.size(); ++i) {
    grad.values[i] = keep[i] ? grad.values[i] * scale : T{};
  }
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out(a.channels + b.channels, a.height, a.width);
  std::copy(a.values.begin(), a.values.end(), out.values.begin());
  std::copy(b.values.begin(), b.values.end(),
            out.values.begin() + static_cast<long>(a.size()));
  return out;
}

}  // namespace

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tensor<T> out(logits.channels, logits.height, logits.width);
  const size_t plane = logits.plane();
  for (size_t i = 0; i < plane; ++i) {
    T peak = logits.values[i];
    for (int c = 1; c < logits.channels; ++c) peak = std::max(peak, logits.values[c * plane + i]);
    T total{};
    for (int c = 0; c < logits.channels; ++c) {
      const T e = std::exp(logits.values[c * plane + i] - peak);
      out.values[c * plane + i] = e;
      total += e;
    }
    for (int c = 0; c < logits.channels; ++c) out.values[c * plane + i] /= total;
  }
  return out;
}

template <typename T>
FcnNetwork<T>::FcnNetwork(NetworkConfig config) : config_(config) {
  config_.validate();
  const int levels = config_.scales;
  int in = config_.input_channels;
  for (int i = 0; i < levels; ++i) {
    const int c = config_.channels_at(i);
    const std::string prefix = "enc" + std::to_string(i);
    encoders_.push_back(add_residual(in, c, prefix + ".res"));
    downs_.push_back(add_conv(c, 2 * c, 2, 2, 0, false, prefix + ".down"));
    in = 2 * c;
  }
  bridge_ = add_residual(in, in, "bridge.res");
  decoders_.resize(levels);
  for (int i = levels - 1; i >= 0; --i) {
    const int c = config_.channels_at(i);
    const std::string prefix = "dec" + std::to_string(i);
    Decoder& d = decoders_[i];
    d.up = add_conv(2 * c, c, 2, 2, 0, true, prefix + ".up");
    d.a = add_conv(2 * c, c, 3, 1, 1, false, prefix + ".fuse_a");
    d.b = add_conv(c, c, 3, 1, 1, false, prefix + ".fuse_b");
  }
  head_ = add_conv(config_.channels_at(0), config_.num_classes, 1, 1, 0, false,
                   "head");
}

template <typename T>
typename FcnNetwork<T>::Conv FcnNetwork<T>::add_conv(int in, int out, int kernel,
                                                     int stride, int pad,
                                                     bool transposed,
                                                     const std::string& name) {
  Conv conv{in, out, kernel, stride, pad, transposed, 0, 0};
  conv.weight = static_cast<int>(layout_.size());
  std::vector<int> shape = transposed ? std::vector<int>{in, out, kernel, kernel}
                                      : std::vector<int>{out, in, kernel, kernel};
  layout_.push_back({name + ".weight", shape, {}, true});
  conv.bias = static_cast<int>(layout_.size());
  layout_.push_back({name + ".bias", {out}, {}, false});
  return conv;
}

template <typename T>
typename FcnNetwork<T>::Residual FcnNetwork<T>::add_residual(
    int in, int out, const std::string& name) {
  Residual unit;
  unit.a = add_conv(in, out, 3, 1, 1, false, name + ".conv_a");
  unit.b = add_conv(out, out, 3, 1, 1, false, name + ".conv_b");
  if (in != out) {
    unit.projection = add_conv(in, out, 1, 1, 0, false, name + ".shortcut");
    unit.has_projection = true;
  }
  return unit;
}

template <typename T>
ParamSet<T> FcnNetwork<T>::zero_params() const {
  ParamSet<T> p;
  p.tensors = layout_;
  for (auto& t : p.tensors) {
    size_t n = 1;
    for (int d : t.shape) n *= static_cast<size_t>(d);
    t.values.assign(n, T{});
  }
  return p;
}

template <typename T>
ParamSet<T> FcnNetwork<T>::init_params(uint64_t seed) const {
  ParamSet<T> p = zero_params();
  std::mt19937_64 rng(seed);
  for (auto& t : p.tensors) {
    if (!t.is_kernel) continue;
    // Conv kernels are (out, in, k, k): fan-in = in*k*k. The stride-2
    // up-convolution (in, out, 2, 2) feeds each output pixel from `in` inputs.
    const bool transposed = t.name.find(".up.") != std::string::npos;
    const double fan_in = transposed
                              ? static_cast<double>(t.shape[0])
                              : static_cast<double>(t.shape[1]) * t.shape[2] * t.shape[3];
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (T& v : t.values) v = static_cast<T>(dist(rng));
  }
  return p;
}

template <typename T>
size_t FcnNetwork<T>::parameter_count(const NetworkConfig& config) {
  return FcnNetwork<T>(config).zero_params().count();
}

namespace {

template <typename T, typename ConvT>
Tensor<T> conv_forward(const ParamSet<T>& p, const ConvT& conv, const Tensor<T>& x) {
  if (x.channels != conv.in) throw InvalidInput("convolution input channel mismatch");
  const auto& w = p.tensors[conv.weight].values;
  const auto& b = p.tensors[conv.bias].values;
  const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(b.data(), conv.out);
  if (conv.transposed) {
    const int k = conv.kernel;
    ConstMatrixView<T> wm(w.data(), conv.in, static_cast<Eigen::Index>(conv.out) * k * k);
    RowMatrix<T> z = wm.transpose() * as_matrix(x);
    Tensor<T> y(conv.out, x.height * k, x.width * k);
    for (int co = 0; co < conv.out; ++co) {
      for (int dy = 0; dy < k; ++dy) {
        for (int dx = 0; dx < k; ++dx) {
          const T* src = z.row((co * k + dy) * k + dx).data();
          for (int i = 0; i < x.height; ++i) {
            T* dst = &y.at(co, i * k + dy, dx);
            for (int j = 0; j < x.width; ++j) dst[j * k] = src[i * x.width + j] + b[co];
          }
        }
      }
    }
    return y;
  }
  const int k = conv.kernel, s = conv.stride, pad = conv.pad;
  const int ho = (x.height + 2 * pad - k) / s + 1;
  const int wo = (x.width + 2 * pad - k) / s + 1;
  Tensor<T> y(conv.out, ho, wo);
  ConstMatrixView<T> wm(w.data(), conv.out, static_cast<Eigen::Index>(conv.in) * k * k);
  auto ym = as_matrix(y);
  if (k == 1 && s == 1 && pad == 0) {
    ym.noalias() = wm * as_matrix(x);
  } else {
    RowMatrix<T> cols = im2col(x, k, s, pad, ho, wo);
    ym.noalias() = wm * cols;
  }
  ym.colwise() += bias;
  return y;
}

// Accumulates weight/bias gradients; returns d(input) when requested.
template <typename T, typename ConvT>
Tensor<T> conv_backward(const ParamSet<T>& p, const ConvT& conv, const Tensor<T>& x,
                        const Tensor<T>& dy, ParamSet<T>& grads, bool need_input) {
  const auto& w = p.tensors[conv.weight].values;
  auto& gw = grads.tensors[conv.weight].values;
  auto& gb = grads.tensors[conv.bias].values;
  const int k = conv.kernel;
  Tensor<T> dx;
  if (conv.transposed) {
    RowMatrix<T> dz(static_cast<Eigen::Index>(conv.out) * k * k,
                    static_cast<Eigen::Index>(x.plane()));
    for (int co = 0; co < conv.out; ++co) {
      T bsum{};
      for (int dyy = 0; dyy < k; ++dyy) {
        for (int dxx = 0; dxx < k; ++dxx) {
          T* dst = dz.row((co * k + dyy) * k + dxx).data();
          for (int i = 0; i < x.height; ++i) {
            const T* src = &dy.at(co, i * k + dyy, dxx);
            for (int j = 0; j < x.width; ++j) {
              dst[i * x.width + j] = src[j * k];
              bsum += src[j * k];
            }
          }
        }
      }
      gb[co] += bsum;
    }
    MatrixView<T> gwm(gw.data(), conv.in, static_cast<Eigen::Index>(conv.out) * k * k);
    gwm.noalias() += as_matrix(x) * dz.transpose();
    if (need_input) {
      ConstMatrixView<T> wm(w.data(), conv.in, static_cast<Eigen::Index>(conv.out) * k * k);
      dx = Tensor<T>(x.channels, x.height, x.width);
      as_matrix(dx).noalias() = wm * dz;
    }
    return dx;
  }
  const int s = conv.stride, pad = conv.pad;
  const int ho = dy.height, wo = dy.width;
  ConstMatrixView<T> wm(w.data(), conv.out, static_cast<Eigen::Index>(conv.in) * k * k);
  MatrixView<T> gwm(gw.data(), conv.out, static_cast<Eigen::Index>(conv.in) * k * k);
  const auto dym = as_matrix(dy);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb.data(), conv.out) +=
      dym.rowwise().sum();
  if (k == 1 && s == 1 && pad == 0) {
    gwm.noalias() += dym * as_matrix(x).transpose();
    if (need_input) {
      dx = Tensor<T>(x.channels, x.height, x.width);
      as_matrix(dx).noalias() = wm.transpose() * dym;
    }
    return dx;
  }
  {
    RowMatrix<T> cols = im2col(x, k, s, pad, ho, wo);
    gwm.noalias() += dym * cols.transpose();
  }
  if (need_input) {
    RowMatrix<T> dcols = wm.transpose() * dym;
    dx = Tensor<T>(x.channels, x.height, x.width);
    col2im_add(dcols, k, s, pad, ho, wo, dx);
  }
  return dx;
}

}  // namespace

template <typename T>
void FcnNetwork<T>::residual_forward(const ParamSet<T>& p, const Residual& unit,
                                     const Tensor<T>& x, Mode mode,
                                     std::mt19937_64* rng,
                                     ResidualTrace<T>& trace) const {
  trace.input = x;
  trace.hidden = conv_forward(p, unit.a, x);
  relu_inplace(trace.hidden);
  trace.activated = conv_forward(p, unit.b, trace.hidden);
  if (unit.has_projection) {
    Tensor<T> shortcut = conv_forward(p, unit.projection, x);
    as_matrix(trace.activated) += as_matrix(shortcut);
  } else {
    as_matrix(trace.activated) += as_matrix(x);
  }
  relu_inplace(trace.activated);
  dropout_forward(trace.activated, config_.dropout_rate, mode, rng, trace.keep,
                  trace.output);
}

template <typename T>
Tensor<T> FcnNetwork<T>::residual_backward(const ParamSet<T>& p,
                                           const Residual& unit,
                                           const ResidualTrace<T>& trace,
                                           Tensor<T> grad, ParamSet<T>& grads,
                                           bool need_input_grad) const {
  dropout_backward(trace.keep, config_.dropout_rate, grad);
  relu_backward(trace.activated, grad);
  Tensor<T> d_hidden = conv_backward(p, unit.b, trace.hidden, grad, grads, true);
  relu_backward(trace.hidden, d_hidden);
  Tensor<T> dx = conv_backward(p, unit.a, trace.input, d_hidden, grads, need_input_grad);
  if (unit.has_projection) {
    Tensor<T> d_short =
        conv_backward(p, unit.projection, trace.input, grad, grads, need_input_grad);
    if (need_input_grad) as_matrix(dx) += as_matrix(d_short);
  } else if (need_input_grad) {
    as_matrix(dx) += as_matrix(grad);
  }
  return dx;
}

template <typename T>
Tensor<T> FcnNetwork<T>::forward(const ParamSet<T>& params, const Tensor<T>& input,
                                 Mode mode, std::mt19937_64* rng,
                                 ForwardTrace<T>* trace) const {
  const int m = config_.size_multiple();
  if (input.height % m != 0 || input.width % m != 0 || input.height == 0 ||
      input.width == 0) {
    throw InvalidInput("input height and width must be positive multiples of " +
                       std::to_string(m));
  }
  if (input.channels != config_.input_channels) {
    throw InvalidInput("input channel count does not match the network");
  }
  if (params.tensors.size() != layout_.size()) {
    throw InvalidInput("parameter set does not match the network layout");
  }
  ForwardTrace<T> local;
  ForwardTrace<T>& t = trace ? *trace : local;
  t.mode = mode;
  const int levels = config_.scales;
  t.encoders.assign(levels, {});
  t.decoders.assign(levels, {});

  Tensor<T> x = input;
  for (int i = 0; i < levels; ++i) {
    residual_forward(params, encoders_[i], x, mode, rng, t.encoders[i]);
    x = conv_forward(params, downs_[i], t.encoders[i].output);
    if (!trace) {
      ResidualTrace<T>& e = t.encoders[i];
      e.input = {};
      e.hidden = {};
      e.activated = {};
    }
  }
  residual_forward(params, bridge_, x, mode, rng, t.bridge);
  Tensor<T> below = t.bridge.output;
  for (int i = levels - 1; i >= 0; --i) {
    DecoderTrace<T>& d = t.decoders[i];
    const Decoder& unit = decoders_[i];
    d.below = std::move(below);
    Tensor<T> up = conv_forward(params, unit.up, d.below);
    d.merged = concat_channels(up, t.encoders[i].output);
    d.hidden = conv_forward(params, unit.a, d.merged);
    relu_inplace(d.hidden);
    d.activated = conv_forward(params, unit.b, d.hidden);
    relu_inplace(d.activated);
    dropout_forward(d.activated, config_.dropout_rate, mode, rng, d.keep, d.output);
    below = d.output;
    if (!trace) d = {};
  }
  Tensor<T> logits = conv_forward(params, head_, below);
  Tensor<T> probs = softmax_channels(logits);
  if (trace) t.probabilities = probs;
  return probs;
}

template <typename T>
void FcnNetwork<T>::backward(const ParamSet<T>& params,
                             const ForwardTrace<T>& trace,
                             const Tensor<T>& grad_logits,
                             ParamSet<T>& grads) const {
  if (trace.decoders.size() != static_cast<size_t>(config_.scales)) {
    throw InvalidInput("trace was not recorded by this network");
  }
  if (grads.tensors.size() != layout_.size()) {
    throw InvalidInput("gradient set does not match the network layout");
  }
  if (!grad_logits.same_shape(trace.probabilities)) {
    throw InvalidInput("logit gradient shape does not match the forward output");
  }
  const int levels = config_.scales;
  std::vector<Tensor<T>> d_skip(levels);

  Tensor<T> grad = conv_backward(params, head_, trace.decoders[0].output,
                                 grad_logits, grads, true);
  for (int i = 0; i < levels; ++i) {
    const DecoderTrace<T>& d = trace.decoders[i];
    const Decoder& unit = decoders_[i];
    dropout_backward(d.keep, config_.dropout_rate, grad);
    relu_backward(d.activated, grad);
    Tensor<T> d_hidden = conv_backward(params, unit.b, d.hidden, grad, grads, true);
    relu_backward(d.hidden, d_hidden);
    Tensor<T> d_merged = conv_backward(params, unit.a, d.merged, d_hidden, grads, true);
    const int c = unit.up.out;
    Tensor<T> d_up(c, d_merged.height, d_merged.width);
    std::copy_n(d_merged.values.begin(), d_up.size(), d_up.values.begin());
    d_skip[i] = Tensor<T>(c, d_merged.height, d_merged.width);
    std::copy_n(d_merged.values.begin() + static_cast<long>(d_up.size()),
                d_skip[i].size(), d_skip[i].values.begin());
    grad = conv_backward(params, unit.up, d.below, d_up, grads, true);
  }
  grad = residual_backward(params, bridge_, trace.bridge, std::move(grad), grads, true);
  for (int i = levels - 1; i >= 0; --i) {
    const ResidualTrace<T>& e = trace.encoders[i];
    Tensor<T> d_out = conv_backward(params, downs_[i], e.output, grad, grads, true);
    as_matrix(d_out) += as_matrix(d_skip[i]);
    grad = residual_backward(params, encoders_[i], e, std::move(d_out), grads, i > 0);
  }
}

template Tensor<float> softmax_channels(const Tensor<float>&);
template Tensor<double> softmax_channels(const Tensor<double>&);
template class FcnNetwork<float>;
template class FcnNetwork<double>;

}  // namespace lymphdet
