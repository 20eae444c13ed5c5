#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "airseg/ops.hpp"
#include "airseg/rng.hpp"

namespace airseg::nn {

/// Architecture knobs. Backbone widths are the channel counts of the stride
/// 2/4/8 feature maps (P1, P2, P3).
struct ArchConfig {
  std::array<std::size_t, 3> backbone_widths{8, 12, 16};
  std::size_t bifpn_width = 16;
  std::size_t bifpn_repeats = 2;
  std::size_t head_blocks = 3;
  std::size_t head_width = 16;
  std::size_t classes = 1;
  double fusion_eps = 1e-4;

  /// Throws std::invalid_argument on out-of-range values.
  void validate() const;
  bool operator==(const ArchConfig&) const = default;
};

/// Shapes seen by one fusion node, for inspection in tests.
struct FusionRecord {
  std::string node;
  std::vector<Shape> partner_shapes;
};

/// Brings a feature map to an exact spatial size: bilinear when growing,
/// maxpool2 followed by crop/edge-replicate when shrinking, identity when equal.
template <typename T>
BasicTensor<T> align(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w);

/// Soft Dice loss over the whole batch: 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps).
template <typename T>
BasicTensor<T> dice_loss(const BasicTensor<T>& p, const BasicTensor<T>& g, double eps = 1.0);

template <typename T>
struct BatchNormLayer {
  BasicTensor<T> gamma, beta;
  BatchNormState<T> state;
};

/// Depthwise-separable conv -> batchnorm -> swish.
template <typename T>
struct SeparableBlock {
  BasicTensor<T> dw, pw;
  BatchNormLayer<T> bn;
};

/// Segmentation network: stride-matched backbone exposing P1..P3, a BiFPN
/// with padded/aligned fusion over those three levels, bilinear upsampling of
/// the half-resolution P1 output and a depthwise-separable head with a
/// single sigmoid channel.
template <typename T>
class BasicMEDSeg {
 public:
  struct Features {
    BasicTensor<T> p1, p2, p3;
  };

  explicit BasicMEDSeg(ArchConfig config = {}, std::uint64_t seed = 0);
  // Tensors are shared handles; a copy would alias the weights.
  BasicMEDSeg(const BasicMEDSeg&) = delete;
  BasicMEDSeg& operator=(const BasicMEDSeg&) = delete;
  BasicMEDSeg(BasicMEDSeg&&) = default;
  BasicMEDSeg& operator=(BasicMEDSeg&&) = default;

  const ArchConfig& config() const { return config_; }
  NormMode mode() const { return mode_; }
  void set_mode(NormMode m) { mode_ = m; }

  /// x [B,3,H,W] -> P1..P3 at strides 2, 4, 8 (ceil).
  Features backbone_forward(const BasicTensor<T>& x);
  /// Returns the P1-level map [B, bifpn_width, ceil(H/2), ceil(W/2)].
  BasicTensor<T> bifpn_forward(const Features& f, std::vector<FusionRecord>* trace = nullptr);
  /// Upsamples to (out_h, out_w) and returns probabilities [B,1,out_h,out_w].
  BasicTensor<T> head_forward(const BasicTensor<T>& f, std::size_t out_h, std::size_t out_w);
  /// Head output before the sigmoid.
  BasicTensor<T> head_logits(const BasicTensor<T>& f, std::size_t out_h, std::size_t out_w);
  BasicTensor<T> forward(const BasicTensor<T>& x, std::vector<FusionRecord>* trace = nullptr);

  std::vector<BasicParam<T>>& params() { return params_; }
  const std::vector<BasicParam<T>>& params() const { return params_; }
  /// Parameters followed by batchnorm running statistics, in a fixed order.
  std::vector<std::pair<std::string, BasicTensor<T>>> state_tensors() const;
  /// Copies values by name; throws on a missing name or shape mismatch.
  void load_state(const std::map<std::string, BasicTensor<T>>& tensors);
  void zero_grad();

  /// Copies every parameter and buffer from a model of another precision.
  template <typename U>
  void copy_from(const BasicMEDSeg<U>& other) {
    const auto src = other.state_tensors();
    const auto dst = state_tensors();
    if (src.size() != dst.size()) throw ShapeError("copy_from: architecture mismatch");
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i].first != dst[i].first || src[i].second.shape() != dst[i].second.shape())
        throw ShapeError("copy_from: tensor mismatch at " + src[i].first);
      auto out = dst[i].second;
      for (std::size_t k = 0; k < out.numel(); ++k) out[k] = static_cast<T>(src[i].second[k]);
    }
  }

 private:
  struct Stage {
    BasicTensor<T> conv;
    BatchNormLayer<T> bn;
    SeparableBlock<T> block;
  };
  struct Fusion {
    BasicTensor<T> weights;
    SeparableBlock<T> block;
  };
  struct Repeat {
    Fusion p2_td, p1_out, p2_out, p3_out;
  };

  BasicTensor<T> add_param(const std::string& name, Shape shape, double bound, T fill = T(0));
  BatchNormLayer<T> make_bn(const std::string& prefix, std::size_t channels);
  SeparableBlock<T> make_block(const std::string& prefix, std::size_t in, std::size_t out);
  Fusion make_fusion(const std::string& prefix, std::size_t inputs);

  BasicTensor<T> run_bn(const BasicTensor<T>& x, BatchNormLayer<T>& bn);
  BasicTensor<T> run_block(const BasicTensor<T>& x, SeparableBlock<T>& b);
  BasicTensor<T> run_fusion(Fusion& f, const std::string& node, const std::vector<BasicTensor<T>>& inputs,
                            std::vector<FusionRecord>* trace);

  ArchConfig config_;
  NormMode mode_ = NormMode::train;
  std::vector<BasicParam<T>> params_;
  std::vector<std::pair<std::string, BasicTensor<T>>> buffers_;
  Xoshiro256 init_rng_;

  std::array<Stage, 3> stages_;
  std::array<BasicTensor<T>, 3> proj_w_, proj_b_;
  std::vector<Repeat> repeats_;
  std::vector<SeparableBlock<T>> head_;
  BasicTensor<T> out_w_, out_b_;
};

using MEDSeg = BasicMEDSeg<float>;
using MEDSeg64 = BasicMEDSeg<double>;

}  // namespace airseg::nn
