#include "airseg/ops.hpp"

#include <algorithm>
#include <limits>

namespace airseg::nn {

SamePad same_ceil_pad(std::size_t in, std::size_t kernel, std::size_t stride) {
  const std::size_t out = (in + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + kernel;
  const std::size_t total = needed > in ? needed - in : 0;
  return {out, total / 2};
}

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

template <typename T>
void require_4d(const BasicTensor<T>& x, const char* op) {
  require(x.rank() == 4, std::string(op) + ": expected [B,C,H,W], got " + shape_str(x.shape()));
}

// Geometry of one input plane convolved with one kernel.
struct ConvGeom {
  std::size_t h, w, oh, ow, kh, kw, stride, pad_top, pad_left;

  // Output indices o in [lo, hi) for which o*stride + k - pad lands inside [0, n).
  static std::pair<std::size_t, std::size_t> valid(std::size_t n_out, std::size_t n_in, std::size_t pad,
                                                   std::size_t k, std::size_t stride) {
    const long off = static_cast<long>(k) - static_cast<long>(pad);
    const long s = static_cast<long>(stride);
    long lo = off >= 0 ? 0 : (-off + s - 1) / s;
    const long last = static_cast<long>(n_in) - 1 - off;
    if (last < 0) return {0, 0};
    long hi = std::min(static_cast<long>(n_out), last / s + 1);
    if (hi < lo) hi = lo;
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
  }
};

ConvGeom make_geom(std::size_t h, std::size_t w, std::size_t kh, std::size_t kw, std::size_t stride) {
  const SamePad py = same_ceil_pad(h, kh, stride), px = same_ceil_pad(w, kw, stride);
  return {h, w, py.out, px.out, kh, kw, stride, py.before, px.before};
}

// out += in (*) kernel, one plane.
template <typename T>
void conv_plane_forward(T* out, const T* in, const T* kernel, const ConvGeom& g) {
  for (std::size_t ky = 0; ky < g.kh; ++ky) {
    const auto [y0, y1] = ConvGeom::valid(g.oh, g.h, g.pad_top, ky, g.stride);
    for (std::size_t kx = 0; kx < g.kw; ++kx) {
      const auto [x0, x1] = ConvGeom::valid(g.ow, g.w, g.pad_left, kx, g.stride);
      const T wv = kernel[ky * g.kw + kx];
      for (std::size_t oy = y0; oy < y1; ++oy) {
        T* o = out + oy * g.ow;
        const T* row = in + (oy * g.stride + ky - g.pad_top) * g.w + kx - g.pad_left;
        if (g.stride == 1) {
          for (std::size_t ox = x0; ox < x1; ++ox) o[ox] += wv * row[ox];
        } else {
          for (std::size_t ox = x0; ox < x1; ++ox) o[ox] += wv * row[ox * g.stride];
        }
      }
    }
  }
}

// grad_in += grad_out (*)^T kernel, one plane.
template <typename T>
void conv_plane_grad_input(T* gin, const T* gout, const T* kernel, const ConvGeom& g) {
  for (std::size_t ky = 0; ky < g.kh; ++ky) {
    const auto [y0, y1] = ConvGeom::valid(g.oh, g.h, g.pad_top, ky, g.stride);
    for (std::size_t kx = 0; kx < g.kw; ++kx) {
      const auto [x0, x1] = ConvGeom::valid(g.ow, g.w, g.pad_left, kx, g.stride);
      const T wv = kernel[ky * g.kw + kx];
      for (std::size_t oy = y0; oy < y1; ++oy) {
        const T* go = gout + oy * g.ow;
        T* row = gin + (oy * g.stride + ky - g.pad_top) * g.w + kx - g.pad_left;
        if (g.stride == 1) {
          for (std::size_t ox = x0; ox < x1; ++ox) row[ox] += wv * go[ox];
        } else {
          for (std::size_t ox = x0; ox < x1; ++ox) row[ox * g.stride] += wv * go[ox];
        }
      }
    }
  }
}

// grad_kernel += correlation of grad_out with the input, one plane.
template <typename T>
void conv_plane_grad_kernel(T* gk, const T* gout, const T* in, const ConvGeom& g) {
  for (std::size_t ky = 0; ky < g.kh; ++ky) {
    const auto [y0, y1] = ConvGeom::valid(g.oh, g.h, g.pad_top, ky, g.stride);
    for (std::size_t kx = 0; kx < g.kw; ++kx) {
      const auto [x0, x1] = ConvGeom::valid(g.ow, g.w, g.pad_left, kx, g.stride);
      T acc = T(0);
      for (std::size_t oy = y0; oy < y1; ++oy) {
        const T* go = gout + oy * g.ow;
        const T* row = in + (oy * g.stride + ky - g.pad_top) * g.w + kx - g.pad_left;
        if (g.stride == 1) {
          for (std::size_t ox = x0; ox < x1; ++ox) acc += go[ox] * row[ox];
        } else {
          for (std::size_t ox = x0; ox < x1; ++ox) acc += go[ox] * row[ox * g.stride];
        }
      }
      gk[ky * g.kw + kx] += acc;
    }
  }
}

template <typename T, typename F>
BasicTensor<T> unary(const BasicTensor<T>& x, F f_and_df) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f_and_df(in[i]).first;
  return make_result<T>(x.shape(), std::move(out), {x}, [x, f_and_df](const TensorImpl<T>& o) {
    auto& gx = x.impl()->grad_buffer();
    const auto in = x.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * f_and_df(in[i]).second;
  });
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b, std::size_t stride) {
  require_4d(x, "conv2d");
  require(w.rank() == 4, "conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(w.shape()));
  require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(w.dim(1) == Cin, "conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, got " +
                               std::to_string(Cin));
  require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel sizes must be odd");
  const bool has_bias = b.numel() > 0;
  require(!has_bias || (b.rank() == 1 && b.dim(0) == Cout), "conv2d: bias must be [Cout]");

  const ConvGeom g = make_geom(H, W, kh, kw, stride);
  const std::size_t in_plane = H * W, out_plane = g.oh * g.ow, ksize = kh * kw;
  std::vector<T> out(B * Cout * out_plane);
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t co = 0; co < Cout; ++co) {
      T* o = out.data() + (n * Cout + co) * out_plane;
      if (has_bias) std::fill(o, o + out_plane, b[co]);
      for (std::size_t ci = 0; ci < Cin; ++ci)
        conv_plane_forward(o, xd + (n * Cin + ci) * in_plane, wd + (co * Cin + ci) * ksize, g);
    }

  return make_result<T>({B, Cout, g.oh, g.ow}, std::move(out), {x, w, b}, [=](const TensorImpl<T>& o) {
    const T* go = o.grad.data();
    if (x.tracked()) {
      T* gx = x.impl()->grad_buffer().data();
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t ci = 0; ci < Cin; ++ci)
          for (std::size_t co = 0; co < Cout; ++co)
            conv_plane_grad_input(gx + (n * Cin + ci) * in_plane, go + (n * Cout + co) * out_plane,
                                  w.data().data() + (co * Cin + ci) * ksize, g);
    }
    if (w.tracked()) {
      T* gw = w.impl()->grad_buffer().data();
      for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t ci = 0; ci < Cin; ++ci)
          for (std::size_t n = 0; n < B; ++n)
            conv_plane_grad_kernel(gw + (co * Cin + ci) * ksize, go + (n * Cout + co) * out_plane,
                                   x.data().data() + (n * Cin + ci) * in_plane, g);
    }
    if (has_bias && b.tracked()) {
      auto& gb = b.impl()->grad_buffer();
      for (std::size_t co = 0; co < Cout; ++co) {
        T acc = T(0);
        for (std::size_t n = 0; n < B; ++n) {
          const T* p = go + (n * Cout + co) * out_plane;
          for (std::size_t i = 0; i < out_plane; ++i) acc += p[i];
        }
        gb[co] += acc;
      }
    }
  });
}

template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w) {
  require_4d(x, "depthwise_conv2d");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(w.rank() == 4 && w.dim(0) == C && w.dim(1) == 1,
          "depthwise_conv2d: weight must be [" + std::to_string(C) + ",1,kh,kw], got " + shape_str(w.shape()));
  const std::size_t kh = w.dim(2), kw = w.dim(3);
  require(kh % 2 == 1 && kw % 2 == 1, "depthwise_conv2d: kernel sizes must be odd");
  const ConvGeom g = make_geom(H, W, kh, kw, 1);
  const std::size_t plane = H * W, ksize = kh * kw;
  std::vector<T> out(x.numel(), T(0));
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      conv_plane_forward(out.data() + (n * C + c) * plane, x.data().data() + (n * C + c) * plane,
                         w.data().data() + c * ksize, g);

  return make_result<T>(x.shape(), std::move(out), {x, w}, [=](const TensorImpl<T>& o) {
    const T* go = o.grad.data();
    if (x.tracked()) {
      T* gx = x.impl()->grad_buffer().data();
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c)
          conv_plane_grad_input(gx + (n * C + c) * plane, go + (n * C + c) * plane, w.data().data() + c * ksize, g);
    }
    if (w.tracked()) {
      T* gw = w.impl()->grad_buffer().data();
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t n = 0; n < B; ++n)
          conv_plane_grad_kernel(gw + c * ksize, go + (n * C + c) * plane, x.data().data() + (n * C + c) * plane, g);
    }
  });
}

template <typename T>
BasicTensor<T> depthwise_separable(const BasicTensor<T>& x, const BasicTensor<T>& dw, const BasicTensor<T>& pw) {
  require(dw.rank() == 4 && dw.dim(2) == 3 && dw.dim(3) == 3, "depthwise_separable: depthwise kernel must be 3x3");
  require(pw.rank() == 4 && pw.dim(2) == 1 && pw.dim(3) == 1, "depthwise_separable: pointwise kernel must be 1x1");
  require(x.rank() == 4 && pw.dim(1) == x.dim(1), "depthwise_separable: channel mismatch");
  return conv2d(depthwise_conv2d(x, dw), pw, BasicTensor<T>(), 1);
}

template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                           BatchNormState<T>& state, NormMode mode, double momentum, double eps) {
  require_4d(x, "batchnorm2d");
  const std::size_t B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  require(gamma.numel() == C && beta.numel() == C && state.running_mean.numel() == C &&
              state.running_var.numel() == C,
          "batchnorm2d: parameter/state size does not match " + std::to_string(C) + " channels");
  const std::size_t count = B * plane;
  if (mode == NormMode::train && count <= 1)
    throw std::invalid_argument("batchnorm2d: train mode needs more than one value per channel");

  std::vector<T> mean(C), invstd(C);
  if (mode == NormMode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < B; ++n) {
        const T* p = x.data().data() + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < B; ++n) {
        const T* p = x.data().data() + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - m) * (p[i] - m);
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<T>(m);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
      const double unbiased = ss / static_cast<double>(count - 1);
      state.running_mean[c] = static_cast<T>((1.0 - momentum) * state.running_mean[c] + momentum * m);
      state.running_var[c] = static_cast<T>((1.0 - momentum) * state.running_var[c] + momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + eps));
    }
  }

  std::vector<T> out(x.numel());
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = x.data().data() + (n * C + c) * plane;
      T* o = out.data() + (n * C + c) * plane;
      const T scale = invstd[c] * gamma[c], shift = beta[c];
      const T m = mean[c];
      for (std::size_t i = 0; i < plane; ++i) o[i] = (p[i] - m) * scale + shift;
    }

  const bool batch_stats = mode == NormMode::train;
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta}, [=](const TensorImpl<T>& o) {
    const T* go = o.grad.data();
    std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const T* p = x.data().data() + (n * C + c) * plane;
        const T* g = go + (n * C + c) * plane;
        double sg = 0.0, sgx = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          sg += g[i];
          sgx += g[i] * (p[i] - mean[c]) * invstd[c];
        }
        sum_g[c] += sg;
        sum_gx[c] += sgx;
      }
    if (gamma.tracked()) {
      auto& gg = gamma.impl()->grad_buffer();
      for (std::size_t c = 0; c < C; ++c) gg[c] += static_cast<T>(sum_gx[c]);
    }
    if (beta.tracked()) {
      auto& gb = beta.impl()->grad_buffer();
      for (std::size_t c = 0; c < C; ++c) gb[c] += static_cast<T>(sum_g[c]);
    }
    if (!x.tracked()) return;
    T* gx = x.impl()->grad_buffer().data();
    const auto N = static_cast<double>(count);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const T* p = x.data().data() + (n * C + c) * plane;
        const T* g = go + (n * C + c) * plane;
        T* q = gx + (n * C + c) * plane;
        const T k = gamma[c] * invstd[c];
        if (batch_stats) {
          const T mg = static_cast<T>(sum_g[c] / N), mgx = static_cast<T>(sum_gx[c] / N);
          for (std::size_t i = 0; i < plane; ++i) {
            const T xhat = (p[i] - mean[c]) * invstd[c];
            q[i] += k * (g[i] - mg - xhat * mgx);
          }
        } else {
          for (std::size_t i = 0; i < plane; ++i) q[i] += k * g[i];
        }
      }
  });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x[i]);
  auto y = std::make_shared<std::vector<T>>(out);
  return make_result<T>(x.shape(), std::move(out), {x}, [x, y](const TensorImpl<T>& o) {
    auto& gx = x.impl()->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * (*y)[i] * (T(1) - (*y)[i]);
  });
}

template <typename T>
BasicTensor<T> swish(const BasicTensor<T>& x) {
  return unary(x, [](T v) {
    const T s = stable_sigmoid(v);
    return std::pair<T, T>(v * s, s + v * s * (T(1) - s));
  });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return unary(x, [](T v) { return v > T(0) ? std::pair<T, T>(v, T(1)) : std::pair<T, T>(T(0), T(0)); });
}

namespace {
struct LerpTap {
  std::size_t i0, i1;
  double frac;
};

std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(src);
    taps[d] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace

template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
  require_4d(x, "bilinear_resize");
  require(out_h >= 1 && out_w >= 1, "bilinear_resize: target size must be >= 1");
  const std::size_t BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H == out_h && W == out_w) {
    // Half-pixel sampling at equal size is the identity; keep the graph link.
    return make_result<T>(x.shape(), std::vector<T>(x.data().begin(), x.data().end()), {x},
                          [x](const TensorImpl<T>& o) {
                            auto& gx = x.impl()->grad_buffer();
                            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
                          });
  }
  const auto ty = lerp_taps(H, out_h), tx = lerp_taps(W, out_w);
  std::vector<T> out(BC * out_h * out_w);
  for (std::size_t p = 0; p < BC; ++p) {
    const T* in = x.data().data() + p * H * W;
    T* o = out.data() + p * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const T fy = static_cast<T>(ty[y].frac);
      const T* r0 = in + ty[y].i0 * W;
      const T* r1 = in + ty[y].i1 * W;
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const T fx = static_cast<T>(tx[xx].frac);
        const T top = r0[tx[xx].i0] * (T(1) - fx) + r0[tx[xx].i1] * fx;
        const T bot = r1[tx[xx].i0] * (T(1) - fx) + r1[tx[xx].i1] * fx;
        o[y * out_w + xx] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  Shape shape = {x.dim(0), x.dim(1), out_h, out_w};
  return make_result<T>(std::move(shape), std::move(out), {x}, [=](const TensorImpl<T>& o) {
    T* gx = x.impl()->grad_buffer().data();
    for (std::size_t p = 0; p < BC; ++p) {
      T* gin = gx + p * H * W;
      const T* go = o.grad.data() + p * out_h * out_w;
      for (std::size_t y = 0; y < out_h; ++y) {
        const T fy = static_cast<T>(ty[y].frac);
        T* r0 = gin + ty[y].i0 * W;
        T* r1 = gin + ty[y].i1 * W;
        for (std::size_t xx = 0; xx < out_w; ++xx) {
          const T fx = static_cast<T>(tx[xx].frac);
          const T g = go[y * out_w + xx];
          r0[tx[xx].i0] += g * (T(1) - fy) * (T(1) - fx);
          r0[tx[xx].i1] += g * (T(1) - fy) * fx;
          r1[tx[xx].i0] += g * fy * (T(1) - fx);
          r1[tx[xx].i1] += g * fy * fx;
        }
      }
    }
  });
}

template <typename T>
BasicTensor<T> maxpool2(const BasicTensor<T>& x) {
  require_4d(x, "maxpool2");
  const std::size_t BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t oh = (H + 1) / 2, ow = (W + 1) / 2;
  std::vector<T> out(BC * oh * ow);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t p = 0; p < BC; ++p) {
    const T* in = x.data().data() + p * H * W;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        // First maximum in window scan order wins ties.
        const std::size_t first = 2 * y * W + 2 * xx;
        T best = in[first];
        std::size_t best_i = first;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t iy = 2 * y + dy, ix = 2 * xx + dx;
            if (iy >= H || ix >= W) continue;
            const std::size_t i = iy * W + ix;
            if (in[i] > best) {
              best = in[i];
              best_i = i;
            }
          }
        const std::size_t o = (p * oh + y) * ow + xx;
        out[o] = best;
        (*arg)[o] = p * H * W + best_i;
      }
  }
  Shape shape = {x.dim(0), x.dim(1), oh, ow};
  return make_result<T>(std::move(shape), std::move(out), {x}, [x, arg](const TensorImpl<T>& o) {
    auto& gx = x.impl()->grad_buffer();
    for (std::size_t i = 0; i < arg->size(); ++i) gx[(*arg)[i]] += o.grad[i];
  });
}

template <typename T>
BasicTensor<T> crop_pad_replicate(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
  require_4d(x, "crop_pad_replicate");
  require(out_h >= 1 && out_w >= 1, "crop_pad_replicate: target size must be >= 1");
  const std::size_t BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<T> out(BC * out_h * out_w);
  for (std::size_t p = 0; p < BC; ++p)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t xx = 0; xx < out_w; ++xx)
        out[(p * out_h + y) * out_w + xx] = x[(p * H + std::min(y, H - 1)) * W + std::min(xx, W - 1)];
  Shape shape = {x.dim(0), x.dim(1), out_h, out_w};
  return make_result<T>(std::move(shape), std::move(out), {x}, [=](const TensorImpl<T>& o) {
    auto& gx = x.impl()->grad_buffer();
    for (std::size_t p = 0; p < BC; ++p)
      for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t xx = 0; xx < out_w; ++xx)
          gx[(p * H + std::min(y, H - 1)) * W + std::min(xx, W - 1)] += o.grad[(p * out_h + y) * out_w + xx];
  });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl<T>& o) {
    for (const auto* t : {&a, &b}) {
      if (!t->tracked()) continue;
      auto& g = t->impl()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl<T>& o) {
    if (a.tracked()) {
      auto& g = a.impl()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * b[i];
    }
    if (b.tracked()) {
      auto& g = b.impl()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * a[i];
    }
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double s = 0.0;
  for (T v : x.data()) s += v;
  return make_result<T>(Shape{}, std::vector<T>{static_cast<T>(s)}, {x}, [x](const TensorImpl<T>& o) {
    auto& g = x.impl()->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

std::vector<double> fusion_coefficients(std::span<const double> raw_weights, double eps) {
  double total = 0.0;
  for (double w : raw_weights) total += std::max(w, 0.0);
  std::vector<double> out;
  for (double w : raw_weights) out.push_back(std::max(w, 0.0) / (total + eps));
  return out;
}

template <typename T>
BasicTensor<T> weighted_fusion(const std::vector<BasicTensor<T>>& inputs, const BasicTensor<T>& raw_weights,
                               double eps) {
  require(!inputs.empty(), "weighted_fusion: no inputs");
  require(raw_weights.numel() == inputs.size(), "weighted_fusion: need one weight per input");
  for (const auto& in : inputs)
    require(in.shape() == inputs[0].shape(), "weighted_fusion: partner shapes differ: " + shape_str(in.shape()) +
                                                 " vs " + shape_str(inputs[0].shape()));
  const std::size_t n = inputs.size(), len = inputs[0].numel();
  std::vector<double> raw(raw_weights.data().begin(), raw_weights.data().end());
  const std::vector<double> coef = fusion_coefficients(raw, eps);
  double total = 0.0;
  for (double w : raw) total += std::max(w, 0.0);

  std::vector<T> out(len, T(0));
  for (std::size_t k = 0; k < n; ++k) {
    const T a = static_cast<T>(coef[k]);
    const T* p = inputs[k].data().data();
    for (std::size_t i = 0; i < len; ++i) out[i] += a * p[i];
  }

  std::vector<BasicTensor<T>> deps = inputs;
  deps.push_back(raw_weights);
  return make_result<T>(inputs[0].shape(), std::move(out), deps, [=](const TensorImpl<T>& o) {
    const T* go = o.grad.data();
    std::vector<double> g_coef(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      const T* p = inputs[k].data().data();
      double acc = 0.0;
      for (std::size_t i = 0; i < len; ++i) acc += static_cast<double>(go[i]) * p[i];
      g_coef[k] = acc;
      if (inputs[k].tracked()) {
        auto& g = inputs[k].impl()->grad_buffer();
        const T a = static_cast<T>(coef[k]);
        for (std::size_t i = 0; i < len; ++i) g[i] += a * go[i];
      }
    }
    if (!raw_weights.tracked()) return;
    const double denom = total + eps;
    double mixed = 0.0;
    for (std::size_t k = 0; k < n; ++k) mixed += std::max(raw[k], 0.0) * g_coef[k];
    auto& gw = raw_weights.impl()->grad_buffer();
    for (std::size_t k = 0; k < n; ++k) {
      if (raw[k] <= 0.0) continue;
      gw[k] += static_cast<T>(g_coef[k] / denom - mixed / (denom * denom));
    }
  });
}

#define AIRSEG_INSTANTIATE_OPS(T)                                                                                   \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, std::size_t); \
  template BasicTensor<T> depthwise_conv2d(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> depthwise_separable(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> batchnorm2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,          \
                                      BatchNormState<T>&, NormMode, double, double);                                \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                           \
  template BasicTensor<T> swish(const BasicTensor<T>&);                                                             \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                              \
  template BasicTensor<T> bilinear_resize(const BasicTensor<T>&, std::size_t, std::size_t);                         \
  template BasicTensor<T> maxpool2(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> crop_pad_replicate(const BasicTensor<T>&, std::size_t, std::size_t);                      \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                        \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                        \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                               \
  template BasicTensor<T> weighted_fusion(const std::vector<BasicTensor<T>>&, const BasicTensor<T>&, double);

AIRSEG_INSTANTIATE_OPS(float)
AIRSEG_INSTANTIATE_OPS(double)

}  // namespace airseg::nn
