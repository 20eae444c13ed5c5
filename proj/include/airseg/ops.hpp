#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "airseg/tensor.hpp"

// Layer primitives over [B, C, H, W] tensors. Every op records a backward rule
// when grad mode is on and one of its inputs is tracked.
//
// Conventions: cross-correlation (no kernel flip); "same-ceil" padding, i.e.
// output extent ceil(in / stride) with the total padding split floor/ceil
// between the leading and trailing edge; half-pixel-centre bilinear sampling.

namespace airseg::nn {

/// Output extent and leading padding for same-ceil padding.
struct SamePad {
  std::size_t out = 0;
  std::size_t before = 0;
};
SamePad same_ceil_pad(std::size_t in, std::size_t kernel, std::size_t stride);

/// x [B,Cin,H,W], w [Cout,Cin,kh,kw] with odd kh/kw, b [Cout] or empty; stride 1 or 2.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                      std::size_t stride = 1);

/// Per-channel spatial convolution, stride 1; w [C,1,kh,kw].
template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w);

/// Depthwise 3x3 (dw [C,1,3,3]) followed by pointwise 1x1 mixing (pw [C',C,1,1]); no biases.
template <typename T>
BasicTensor<T> depthwise_separable(const BasicTensor<T>& x, const BasicTensor<T>& dw, const BasicTensor<T>& pw);

enum class NormMode { train, eval };

/// Running statistics owned by a batchnorm layer. Never tracked.
template <typename T>
struct BatchNormState {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Train mode normalizes with batch statistics (biased variance) and folds
/// them into the running stats as rs <- (1-momentum)*rs + momentum*stat, using
/// the unbiased variance for running_var. Eval mode uses the running stats.
template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                           BatchNormState<T>& state, NormMode mode, double momentum = kBatchNormMomentum,
                           double eps = kBatchNormEps);

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

/// x * sigmoid(x)
template <typename T>
BasicTensor<T> swish(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w);

/// 2x2 window, stride 2, ceil mode (missing cells behave as -inf).
template <typename T>
BasicTensor<T> maxpool2(const BasicTensor<T>& x);

/// Crops from the top-left corner or pads by repeating the last row/column.
template <typename T>
BasicTensor<T> crop_pad_replicate(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Sum of all elements, as a scalar tensor.
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

/// Fast normalized fusion: sum_i relu(w_i) / (sum_j relu(w_j) + eps) * inputs[i].
/// All inputs must share one shape; raw_weights has shape [inputs.size()].
template <typename T>
BasicTensor<T> weighted_fusion(const std::vector<BasicTensor<T>>& inputs, const BasicTensor<T>& raw_weights,
                               double eps);

/// The normalized fusion coefficients alone (no graph).
std::vector<double> fusion_coefficients(std::span<const double> raw_weights, double eps);

/// Numerically stable logistic function.
template <typename T>
inline T stable_sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace airseg::nn
