#include "airseg/medseg.hpp"

#include <cmath>

namespace airseg::nn {

void ArchConfig::validate() const {
  for (std::size_t w : backbone_widths)
    if (w < 1) throw std::invalid_argument("backbone widths must be >= 1");
  if (bifpn_width < 1) throw std::invalid_argument("bifpn_width must be >= 1");
  if (bifpn_repeats < 1) throw std::invalid_argument("bifpn_repeats must be >= 1");
  if (head_width < 1) throw std::invalid_argument("head_width must be >= 1");
  if (head_blocks != 3) throw std::invalid_argument("head_blocks is fixed at 3");
  if (classes != 1) throw std::invalid_argument("classes is fixed at 1 (binary airway)");
  if (!(fusion_eps > 0.0)) throw std::invalid_argument("fusion_eps must be positive");
}

template <typename T>
BasicTensor<T> align(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (h == out_h && w == out_w) return x;
  if (out_h <= h && out_w <= w) {
    BasicTensor<T> pooled = maxpool2(x);
    if (pooled.dim(2) == out_h && pooled.dim(3) == out_w) return pooled;
    return crop_pad_replicate(pooled, out_h, out_w);
  }
  // Growing on at least one axis (possibly shrinking on the other).
  return bilinear_resize(x, out_h, out_w);
}

template <typename T>
BasicTensor<T> dice_loss(const BasicTensor<T>& p, const BasicTensor<T>& g, double eps) {
  if (p.shape() != g.shape())
    throw ShapeError("dice_loss: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(g.shape()));
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    inter += static_cast<double>(p[i]) * g[i];
    sp += p[i];
    sg += g[i];
  }
  const double num = 2.0 * inter + eps, den = sp + sg + eps;
  const T loss = static_cast<T>(1.0 - num / den);
  return make_result<T>(Shape{}, {loss}, {p, g}, [=](const TensorImpl<T>& o) {
    const double go = o.grad[0];
    // d/dp_i of -(num/den) = -(2 g_i den - num) / den^2
    if (p.tracked()) {
      auto& gp = p.impl()->grad_buffer();
      for (std::size_t i = 0; i < gp.size(); ++i)
        gp[i] += static_cast<T>(go * -(2.0 * g[i] * den - num) / (den * den));
    }
    if (g.tracked()) {
      auto& gg = g.impl()->grad_buffer();
      for (std::size_t i = 0; i < gg.size(); ++i)
        gg[i] += static_cast<T>(go * -(2.0 * p[i] * den - num) / (den * den));
    }
  });
}

template <typename T>
BasicMEDSeg<T>::BasicMEDSeg(ArchConfig config, std::uint64_t seed) : config_(config), init_rng_(seed) {
  config_.validate();
  const auto& cw = config_.backbone_widths;
  const std::size_t W = config_.bifpn_width;

  std::size_t in = 3;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string p = "backbone.stage" + std::to_string(s + 1);
    stages_[s].conv = add_param(p + ".conv.weight", {cw[s], in, 3, 3}, std::sqrt(6.0 / static_cast<double>(in * 9)));
    stages_[s].bn = make_bn(p + ".bn", cw[s]);
    stages_[s].block = make_block(p + ".block", cw[s], cw[s]);
    in = cw[s];
  }
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string p = "bifpn.proj" + std::to_string(s + 1);
    proj_w_[s] = add_param(p + ".weight", {W, cw[s], 1, 1}, std::sqrt(6.0 / static_cast<double>(cw[s])));
    proj_b_[s] = add_param(p + ".bias", {W}, 0.0);
  }
  for (std::size_t r = 0; r < config_.bifpn_repeats; ++r) {
    const std::string p = "bifpn.repeat" + std::to_string(r);
    Repeat rep;
    rep.p2_td = make_fusion(p + ".p2_td", 2);
    rep.p1_out = make_fusion(p + ".p1_out", 2);
    rep.p2_out = make_fusion(p + ".p2_out", 3);
    rep.p3_out = make_fusion(p + ".p3_out", 2);
    repeats_.push_back(std::move(rep));
  }
  std::size_t hin = W;
  for (std::size_t b = 0; b < config_.head_blocks; ++b) {
    head_.push_back(make_block("head.block" + std::to_string(b), hin, config_.head_width));
    hin = config_.head_width;
  }
  out_w_ = add_param("head.out.weight", {config_.classes, hin, 1, 1}, 1.0 / std::sqrt(static_cast<double>(hin)));
  out_b_ = add_param("head.out.bias", {config_.classes}, 0.0);
}

template <typename T>
BasicTensor<T> BasicMEDSeg<T>::add_param(const std::string& name, Shape shape, double bound, T fill) {
  BasicTensor<T> t(std::move(shape), fill);
  if (bound > 0.0)
    for (auto& v : t.data()) v = static_cast<T>(init_rng_.uniform(-bound, bound));
  t.set_requires_grad(true);
  params_.push_back({name, t});
  return t;
}

template <typename T>
BatchNormLayer<T> BasicMEDSeg<T>::make_bn(const std::string& prefix, std::size_t channels) {
  BatchNormLayer<T> bn;
  bn.gamma = add_param(prefix + ".gamma", {channels}, 0.0, T(1));
  bn.beta = add_param(prefix + ".beta", {channels}, 0.0, T(0));
  bn.state = BatchNormState<T>(channels);
  buffers_.emplace_back(prefix + ".running_mean", bn.state.running_mean);
  buffers_.emplace_back(prefix + ".running_var", bn.state.running_var);
  return bn;
}

template <typename T>
SeparableBlock<T> BasicMEDSeg<T>::make_block(const std::string& prefix, std::size_t in, std::size_t out) {
  SeparableBlock<T> b;
  b.dw = add_param(prefix + ".dw", {in, 1, 3, 3}, std::sqrt(6.0 / 9.0));
  b.pw = add_param(prefix + ".pw", {out, in, 1, 1}, std::sqrt(6.0 / static_cast<double>(in)));
  b.bn = make_bn(prefix + ".bn", out);
  return b;
}

template <typename T>
typename BasicMEDSeg<T>::Fusion BasicMEDSeg<T>::make_fusion(const std::string& prefix, std::size_t inputs) {
  Fusion f;
  f.weights = add_param(prefix + ".fusion", {inputs}, 0.0, T(1));
  f.block = make_block(prefix + ".block", config_.bifpn_width, config_.bifpn_width);
  return f;
}

template <typename T>
BasicTensor<T> BasicMEDSeg<T>::run_bn(const BasicTensor<T>& x, BatchNormLayer<T>& bn) {
  return batchnorm2d(x, bn.gamma, bn.beta, bn.state, mode_);
}

template <typename T>
BasicTensor<T> BasicMEDSeg<T>::run_block(const BasicTensor<T>& x, SeparableBlock<T>& b) {
  return swish(run_bn(depthwise_separable(x, b.dw, b.pw), b.bn));
}

template <typename T>
BasicTensor<T> BasicMEDSeg<T>::run_fusion(Fusion& f, const std::string& node,
                                          const std::vector<BasicTensor<T>>& inputs,
                                          std::vector<FusionRecord>* trace) {
  if (trace) {
    FusionRecord rec{node, {}};
    for (const auto& in : inputs) rec.partner_shapes.push_back(in.shape());
    trace->push_back(std::move(rec));
  }
  return run_block(weighted_fusion(inputs, f.weights, config_.fusion_eps), f.block);
}

template <typename T>
typename BasicMEDSeg<T>::Features BasicMEDSeg<T>::backbone_forward(const BasicTensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != 3)
    throw ShapeError("MEDSeg expects a [B,3,H,W] 2.5D input, got " + shape_str(x.shape()));
  std::array<BasicTensor<T>, 3> out;
  BasicTensor<T> h = x;
  for (std::size_t s = 0; s < 3; ++s) {
    h = swish(run_bn(conv2d(h, stages_[s].conv, BasicTensor<T>(), 2), stages_[s].bn));
    h = run_block(h, stages_[s].block);
    out[s] = h;
  }
  return {out[0], out[1], out[2]};
}

template <typename T>
BasicTensor<T> BasicMEDSeg<T>::bifpn_forward(const Features& f, std::vector<FusionRecord>* trace) {
  BasicTensor<T> p1 = conv2d(f.p1, proj_w_[0], proj_b_[0], 1);
  BasicTensor<T> p2 = conv2d(f.p2, proj_w_[1], proj_b_[1], 1);
  BasicTensor<T> p3 = conv2d(f.p3, proj_w_[2], proj_b_[2], 1);
  auto hw = [](const BasicTensor<T>& t) { return std::pair{t.dim(2), t.dim(3)}; };
  for (std::size_t r = 0; r < repeats_.size(); ++r) {
    Repeat& rep = repeats_[r];
    const std::string tag = "repeat" + std::to_string(r) + ".";
    const auto [h1, w1] = hw(p1);
    const auto [h2, w2] = hw(p2);
    const auto [h3, w3] = hw(p3);
    // top-down
    BasicTensor<T> p2_td = run_fusion(rep.p2_td, tag + "p2_td", {p2, align(p3, h2, w2)}, trace);
    BasicTensor<T> p1_out = run_fusion(rep.p1_out, tag + "p1_out", {p1, align(p2_td, h1, w1)}, trace);
    // bottom-up
    BasicTensor<T> p2_out = run_fusion(rep.p2_out, tag + "p2_out", {p2, p2_td, align(p1_out, h2, w2)}, trace);
    BasicTensor<T> p3_out = run_fusion(rep.p3_out, tag + "p3_out", {p3, align(p2_out, h3, w3)}, trace);
    p1 = p1_out;
    p2 = p2_out;
    p3 = p3_out;
  }
  return p1;
}

template <typename T>
BasicTensor<T> BasicMEDSeg<T>::head_logits(const BasicTensor<T>& f, std::size_t out_h, std::size_t out_w) {
  BasicTensor<T> h = bilinear_resize(f, out_h, out_w);
  for (auto& block : head_) h = run_block(h, block);
  return conv2d(h, out_w_, out_b_, 1);
}

template <typename T>
BasicTensor<T> BasicMEDSeg<T>::head_forward(const BasicTensor<T>& f, std::size_t out_h, std::size_t out_w) {
  return sigmoid(head_logits(f, out_h, out_w));
}

template <typename T>
BasicTensor<T> BasicMEDSeg<T>::forward(const BasicTensor<T>& x, std::vector<FusionRecord>* trace) {
  const Features f = backbone_forward(x);
  return head_forward(bifpn_forward(f, trace), x.dim(2), x.dim(3));
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>>> BasicMEDSeg<T>::state_tensors() const {
  std::vector<std::pair<std::string, BasicTensor<T>>> out;
  for (const auto& p : params_) out.emplace_back(p.name, p.tensor);
  for (const auto& b : buffers_) out.push_back(b);
  return out;
}

template <typename T>
void BasicMEDSeg<T>::load_state(const std::map<std::string, BasicTensor<T>>& tensors) {
  for (auto& [name, t] : state_tensors()) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ShapeError("missing tensor '" + name + "'");
    if (it->second.shape() != t.shape())
      throw ShapeError("tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", model expects " +
                       shape_str(t.shape()));
    auto dst = t;
    std::copy(it->second.data().begin(), it->second.data().end(), dst.data().begin());
  }
}

template <typename T>
void BasicMEDSeg<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template BasicTensor<float> align(const BasicTensor<float>&, std::size_t, std::size_t);
template BasicTensor<double> align(const BasicTensor<double>&, std::size_t, std::size_t);
template BasicTensor<float> dice_loss(const BasicTensor<float>&, const BasicTensor<float>&, double);
template BasicTensor<double> dice_loss(const BasicTensor<double>&, const BasicTensor<double>&, double);
template class BasicMEDSeg<float>;
template class BasicMEDSeg<double>;

}  // namespace airseg::nn
