#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "airseg/ops.hpp"
#include "gradcheck.hpp"

using namespace airseg;
using namespace airseg::nn;
using airseg::testing::check_gradients;
using airseg::testing::random_tensor;

namespace {

template <typename T>
double fd_step() {
  return std::is_same_v<T, float> ? 3e-3 : 1e-5;
}
template <typename T>
double fd_tol() {
  return std::is_same_v<T, float> ? 1e-3 : 1e-6;
}

// Projects an op output onto fixed random weights so every output entry matters.
template <typename T>
BasicTensor<T> project(const BasicTensor<T>& y, const BasicTensor<T>& r) {
  return sum(mul(y, r));
}

// Scalar-loop bilinear oracle with half-pixel centres and clamping.
double bilinear_oracle(const std::vector<double>& img, std::size_t h, std::size_t w, std::size_t oh, std::size_t ow,
                       std::size_t y, std::size_t x) {
  auto src = [](std::size_t d, std::size_t in, std::size_t out) {
    double s = (d + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    return std::min(std::max(s, 0.0), static_cast<double>(in - 1));
  };
  const double sy = src(y, h, oh), sx = src(x, w, ow);
  const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0, fx = sx - x0;
  auto at = [&](std::size_t r, std::size_t c) { return img[r * w + c]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace

TEST_CASE("same-ceil output extent is ceil(in/stride) for every size") {
  for (std::size_t in = 1; in <= 40; ++in)
    for (std::size_t s : {1u, 2u}) {
      CHECK(same_ceil_pad(in, 3, s).out == (in + s - 1) / s);
      Tensor x({1, 1, in, in + 1}, 1.0f);
      Tensor w({1, 1, 3, 3}, 1.0f);
      Tensor y = conv2d(x, w, Tensor(), s);
      CHECK(y.dim(2) == (in + s - 1) / s);
      CHECK(y.dim(3) == (in + 1 + s - 1) / s);
      Tensor p = maxpool2(x);
      CHECK(p.dim(2) == (in + 1) / 2);
      CHECK(p.dim(3) == (in + 2) / 2);
    }
}

TEST_CASE("conv2d examples") {
  SUBCASE("1x1 identity kernel") {
    Xoshiro256 rng(1);
    Tensor x = random_tensor<float>({2, 3, 5, 4}, rng);
    Tensor w({3, 3, 1, 1}, 0.0f);
    for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0f;
    Tensor y = conv2d(x, w, Tensor(), 1);
    CHECK(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  }
  SUBCASE("3x3 ones over a 2x2 image sums every window") {
    Tensor x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    Tensor w({1, 1, 3, 3}, 1.0f);
    Tensor y = conv2d(x, w, Tensor(), 1);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (float v : y.data()) CHECK(v == 10.0f);
  }
  SUBCASE("stride 2 on 7x7 gives 4x4") {
    Tensor y = conv2d(Tensor({1, 2, 7, 7}, 1.0f), Tensor({3, 2, 3, 3}, 1.0f), Tensor(), 2);
    CHECK(y.shape() == Shape{1, 3, 4, 4});
  }
  SUBCASE("shape errors") {
    CHECK_THROWS_AS(conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 3, 3, 3}), Tensor(), 1), ShapeError);
    CHECK_THROWS_AS(conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 2, 2, 2}), Tensor(), 1), ShapeError);
    CHECK_THROWS_AS(conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 2, 3, 3}), Tensor(), 3), ShapeError);
  }
}

TEST_CASE("depthwise separable examples") {
  Xoshiro256 rng(2);
  SUBCASE("delta depthwise + identity pointwise is the identity") {
    Tensor x = random_tensor<float>({1, 2, 6, 5}, rng);
    Tensor dw({2, 1, 3, 3}, 0.0f);
    dw[4] = dw[9 + 4] = 1.0f;
    Tensor pw({2, 2, 1, 1}, std::vector<float>{1, 0, 0, 1});
    Tensor y = depthwise_separable(x, dw, pw);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  }
  SUBCASE("constant plane with ones kernel: interior x9, edges per window count") {
    const std::size_t H = 5, W = 6;
    Tensor x({1, 1, H, W}, 2.0f);
    Tensor y = depthwise_conv2d(x, Tensor({1, 1, 3, 3}, 1.0f));
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        // scalar oracle: count in-bounds window cells
        int cells = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const long rr = static_cast<long>(r) + dy, cc = static_cast<long>(c) + dx;
            cells += rr >= 0 && cc >= 0 && rr < static_cast<long>(H) && cc < static_cast<long>(W);
          }
        CHECK(y[r * W + c] == doctest::Approx(2.0 * cells));
      }
    CHECK(y[2 * W + 2] == doctest::Approx(18.0));
  }
  SUBCASE("pointwise (a,b) mixes two channels linearly") {
    Tensor x = random_tensor<float>({1, 2, 4, 4}, rng);
    Tensor dw({2, 1, 3, 3}, 0.0f);
    dw[4] = dw[13] = 1.0f;
    const float a = 0.75f, b = -1.5f;
    Tensor y = depthwise_separable(x, dw, Tensor({1, 2, 1, 1}, std::vector<float>{a, b}));
    CHECK(y.shape() == Shape{1, 1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) CHECK(y[i] == doctest::Approx(a * x[i] + b * x[16 + i]));
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(depthwise_separable(Tensor({1, 2, 4, 4}), Tensor({2, 1, 3, 3}), Tensor({1, 3, 1, 1})),
                    ShapeError);
  }
}

TEST_CASE("batchnorm2d") {
  Xoshiro256 rng(3);
  Tensor gamma({2}, 1.0f), beta({2}, 0.0f);
  SUBCASE("train mode output has zero mean and unit variance per channel") {
    BatchNormState<float> st(2);
    Tensor x = random_tensor<float>({3, 2, 4, 5}, rng, -3.0, 5.0);
    Tensor y = batchnorm2d(x, gamma, beta, st, NormMode::train);
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0, v = 0;
      for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < 20; ++i) m += y[(n * 2 + c) * 20 + i];
      m /= 60;
      for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < 20; ++i) v += std::pow(y[(n * 2 + c) * 20 + i] - m, 2);
      v /= 60;
      CHECK(m == doctest::Approx(0.0).epsilon(1e-5).scale(1.0));
      CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
    }
  }
  SUBCASE("eval mode uses running statistics") {
    BatchNormState<float> st(2);
    st.running_mean[0] = 0.5f;
    st.running_mean[1] = -1.0f;
    st.running_var[0] = 4.0f;
    st.running_var[1] = 0.25f;
    Tensor g({2}, std::vector<float>{2.0f, 0.5f}), b({2}, std::vector<float>{0.1f, -0.2f});
    Tensor x = random_tensor<float>({1, 2, 3, 3}, rng);
    Tensor y = batchnorm2d(x, g, b, st, NormMode::eval);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 9; ++i) {
        const double want = (x[c * 9 + i] - st.running_mean[c]) / std::sqrt(st.running_var[c] + 1e-5) * g[c] + b[c];
        CHECK(y[c * 9 + i] == doctest::Approx(want).epsilon(1e-6));
      }
  }
  SUBCASE("running statistics follow the momentum update across two calls") {
    BatchNormState<double> st(1);
    double rm = 0.0, rv = 1.0;
    for (int call = 0; call < 2; ++call) {
      Tensor64 x = random_tensor<double>({2, 1, 3, 3}, rng, -2.0, 4.0);
      // scalar oracle
      double m = 0;
      for (double v : x.data()) m += v;
      m /= 18;
      double ss = 0;
      for (double v : x.data()) ss += (v - m) * (v - m);
      rm = 0.9 * rm + 0.1 * m;
      rv = 0.9 * rv + 0.1 * ss / 17;
      batchnorm2d(x, Tensor64({1}, 1.0), Tensor64({1}, 0.0), st, NormMode::train);
      CHECK(st.running_mean[0] == doctest::Approx(rm).epsilon(1e-12));
      CHECK(st.running_var[0] == doctest::Approx(rv).epsilon(1e-12));
    }
  }
  SUBCASE("single value per channel in train mode is rejected") {
    BatchNormState<float> st(2);
    CHECK_THROWS_AS(batchnorm2d(Tensor({1, 2, 1, 1}), gamma, beta, st, NormMode::train), std::invalid_argument);
    CHECK_NOTHROW(batchnorm2d(Tensor({1, 2, 1, 1}), gamma, beta, st, NormMode::eval));
  }
}

TEST_CASE("swish and sigmoid values") {
  auto swish1 = [](double v) { return swish(Tensor64({1}, std::vector<double>{v}))[0]; };
  auto sig1 = [](double v) { return sigmoid(Tensor64({1}, std::vector<double>{v}))[0]; };
  CHECK(swish1(0.0) == 0.0);
  CHECK(swish1(1.0) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
  CHECK(swish1(1.0) == doctest::Approx(0.731059).epsilon(1e-6));
  // -20 * sigma(-20) with sigma(-20) = e^-20 / (1 + e^-20)
  const double s20 = -20.0 * std::exp(-20.0) / (1.0 + std::exp(-20.0));
  CHECK(std::isfinite(swish1(-20.0)));
  CHECK(swish1(-20.0) == doctest::Approx(s20).epsilon(1e-12));
  CHECK(swish(Tensor({1}, std::vector<float>{-100.0f}))[0] == doctest::Approx(0.0));

  CHECK(sig1(0.0) == 0.5);
  CHECK(std::fabs(sig1(100.0) - 1.0) <= 1e-12);
  CHECK(std::isfinite(sig1(-1000.0)));
  for (double v : {-7.5, -1.0, 0.3, 2.0, 30.0}) CHECK(sig1(v) + sig1(-v) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("bilinear_resize") {
  SUBCASE("constant image stays constant at any size") {
    Tensor x({1, 2, 3, 5}, 4.25f);
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{1, 1}, {7, 2}, {6, 10}, {13, 17}}) {
      Tensor y = bilinear_resize(x, h, w);
      CHECK(y.shape() == Shape{1, 2, h, w});
      for (float v : y.data()) CHECK(v == doctest::Approx(4.25f));
    }
  }
  SUBCASE("same size is the identity") {
    Xoshiro256 rng(4);
    Tensor x = random_tensor<float>({2, 1, 5, 3}, rng);
    Tensor y = bilinear_resize(x, 5, 3);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  }
  SUBCASE("2x2 -> 4x4 matches the scalar oracle") {
    const std::vector<double> img{0, 1, 2, 3};
    Tensor64 y = bilinear_resize(Tensor64({1, 1, 2, 2}, img), 4, 4);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c)
        CHECK(y[r * 4 + c] == doctest::Approx(bilinear_oracle(img, 2, 2, 4, 4, r, c)).epsilon(1e-14));
    // centre cells: src = 0.25 / 0.75 on each axis
    CHECK(y[1 * 4 + 1] == doctest::Approx(0.75));
    CHECK(y[2 * 4 + 2] == doctest::Approx(2.25));
  }
  SUBCASE("arbitrary odd targets match the oracle") {
    Xoshiro256 rng(5);
    std::vector<double> img(5 * 7);
    for (auto& v : img) v = rng.uniform(-1, 1);
    Tensor64 y = bilinear_resize(Tensor64({1, 1, 5, 7}, img), 11, 3);
    for (std::size_t r = 0; r < 11; ++r)
      for (std::size_t c = 0; c < 3; ++c)
        CHECK(y[r * 3 + c] == doctest::Approx(bilinear_oracle(img, 5, 7, 11, 3, r, c)).epsilon(1e-13));
  }
}

TEST_CASE("maxpool2") {
  Tensor y = maxpool2(Tensor({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4}));
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == 4.0f);
  CHECK(maxpool2(Tensor({1, 1, 5, 5})).shape() == Shape{1, 1, 3, 3});

  Xoshiro256 rng(6);
  Tensor x = random_tensor<float>({2, 2, 5, 7}, rng);
  Tensor shifted = x.clone();
  for (auto& v : shifted.data()) v += 3.5f;
  Tensor a = maxpool2(x), b = maxpool2(shifted);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(b[i] == a[i] + 3.5f);
}

TEST_CASE("backward basics") {
  SUBCASE("d/dw sum(w*x) = x") {
    Xoshiro256 rng(8);
    Tensor x = random_tensor<float>({2, 3}, rng);
    Tensor w = random_tensor<float>({2, 3}, rng);
    w.set_requires_grad();
    sum(mul(w, x)).backward();
    REQUIRE(w.has_grad());
    for (std::size_t i = 0; i < 6; ++i) CHECK(w.grad()[i] == x[i]);
  }
  SUBCASE("reused value accumulates") {
    Tensor64 w({3}, std::vector<double>{1, 2, 3});
    w.set_requires_grad();
    sum(add(mul(w, w), w)).backward();  // d/dw (w^2 + w) = 2w + 1
    for (std::size_t i = 0; i < 3; ++i) CHECK(w.grad()[i] == doctest::Approx(2 * w[i] + 1));
  }
  SUBCASE("unreachable parameter gets no gradient") {
    Tensor w({2}, 1.0f), unused({2}, 1.0f);
    w.set_requires_grad();
    unused.set_requires_grad();
    sum(w).backward();
    CHECK_FALSE(unused.has_grad());
  }
  SUBCASE("non-scalar loss is rejected") { CHECK_THROWS_AS(Tensor({2}, 1.0f).backward(), ShapeError); }
  SUBCASE("no graph under NoGradGuard") {
    Tensor w({2}, 1.0f);
    w.set_requires_grad();
    NoGradGuard guard;
    Tensor s = sum(w);
    CHECK(s.impl()->node == nullptr);
  }
}

TEST_CASE_TEMPLATE("every op matches central finite differences", T, float, double) {
  using Tn = BasicTensor<T>;
  Xoshiro256 rng(11);
  const double h = fd_step<T>(), tol = fd_tol<T>();
  for (Shape shape : {Shape{2, 3, 8, 8}, Shape{2, 3, 7, 5}, Shape{1, 2, 1, 3}}) {
    CAPTURE(shape_str(shape));
    const std::size_t B = shape[0], C = shape[1], H = shape[2], W = shape[3];
    Tn x = random_tensor<T>(shape, rng);
    x.set_requires_grad();

    {  // conv2d stride 1 and 2
      for (std::size_t stride : {1u, 2u}) {
        Tn w = random_tensor<T>({4, C, 3, 3}, rng), b = random_tensor<T>({4}, rng);
        w.set_requires_grad();
        b.set_requires_grad();
        Tn probe = conv2d(x, w, b, stride);
        Tn r = random_tensor<T>(probe.shape(), rng);
        auto res = check_gradients<T>([&] { return project(conv2d(x, w, b, stride), r); }, {x, w, b}, h);
        CHECK(res.rel_error <= tol);
      }
    }
    {  // depthwise separable
      Tn dw = random_tensor<T>({C, 1, 3, 3}, rng), pw = random_tensor<T>({5, C, 1, 1}, rng);
      dw.set_requires_grad();
      pw.set_requires_grad();
      Tn r = random_tensor<T>({B, 5, H, W}, rng);
      auto res = check_gradients<T>([&] { return project(depthwise_separable(x, dw, pw), r); }, {x, dw, pw}, h);
      CHECK(res.rel_error <= tol);
    }
    {  // batchnorm train and eval
      for (NormMode mode : {NormMode::train, NormMode::eval}) {
        if (mode == NormMode::train && B * H * W <= 1) continue;
        Tn g = random_tensor<T>({C}, rng, 0.5, 1.5), be = random_tensor<T>({C}, rng);
        g.set_requires_grad();
        be.set_requires_grad();
        BatchNormState<T> st(C);
        Tn r = random_tensor<T>(shape, rng);
        auto res = check_gradients<T>([&] { return project(batchnorm2d(x, g, be, st, mode), r); }, {x, g, be}, h);
        CHECK(res.rel_error <= tol);
      }
    }
    {  // swish, sigmoid, relu
      Tn r = random_tensor<T>(shape, rng);
      CHECK(check_gradients<T>([&] { return project(swish(x), r); }, {x}, h).rel_error <= tol);
      CHECK(check_gradients<T>([&] { return project(sigmoid(x), r); }, {x}, h).rel_error <= tol);
      // Keep inputs away from the ReLU kink.
      Tn xr = x.clone();
      for (auto& v : xr.data())
        if (std::fabs(v) < T(0.05)) v = v < 0 ? T(-0.5) : T(0.5);
      xr.set_requires_grad();
      CHECK(check_gradients<T>([&] { return project(relu(xr), r); }, {xr}, h).rel_error <= tol);
    }
    {  // bilinear up and down
      for (auto [oh, ow] : {std::pair<std::size_t, std::size_t>{2 * H + 1, W + 3}, {(H + 1) / 2, (W + 1) / 2}}) {
        Tn r = random_tensor<T>({B, C, oh, ow}, rng);
        CHECK(check_gradients<T>([&] { return project(bilinear_resize(x, oh, ow), r); }, {x}, h).rel_error <= tol);
      }
    }
    {  // maxpool2 on well-separated values
      // Distinct values spaced far beyond the FD step avoid argmax flips.
      std::vector<T> vals(x.numel());
      for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<T>(0.01 * static_cast<double>(i));
      rng.shuffle(vals);
      std::copy(vals.begin(), vals.end(), x.data().begin());
      Tn r = random_tensor<T>({B, C, (H + 1) / 2, (W + 1) / 2}, rng);
      CHECK(check_gradients<T>([&] { return project(maxpool2(x), r); }, {x}, h).rel_error <= tol);
    }
    {  // crop / replicate-pad
      Tn r = random_tensor<T>({B, C, H + 2, W > 1 ? W - 1 : 1}, rng);
      CHECK(check_gradients<T>([&] { return project(crop_pad_replicate(x, H + 2, W > 1 ? W - 1 : 1), r); }, {x}, h)
                .rel_error <= tol);
    }
    {  // weighted fusion
      Tn y = random_tensor<T>(shape, rng), z = random_tensor<T>(shape, rng);
      y.set_requires_grad();
      Tn wts({3}, std::vector<T>{T(0.7), T(1.3), T(0.4)});
      wts.set_requires_grad();
      Tn r = random_tensor<T>(shape, rng);
      auto res = check_gradients<T>([&] { return project(weighted_fusion<T>({x, y, z}, wts, 1e-4), r); },
                                    {x, y, wts}, h);
      CHECK(res.rel_error <= tol);
    }
  }
}

TEST_CASE("ops are deterministic") {
  Xoshiro256 rng(12);
  Tensor x = random_tensor<float>({2, 3, 9, 7}, rng);
  Tensor w = random_tensor<float>({4, 3, 3, 3}, rng);
  Tensor a = swish(bilinear_resize(conv2d(x, w, Tensor(), 2), 9, 7));
  Tensor b = swish(bilinear_resize(conv2d(x, w, Tensor(), 2), 9, 7));
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("fusion coefficients") {
  const std::vector<double> eq{2.0, 2.0, 2.0};
  for (double c : fusion_coefficients(eq, 1e-4)) CHECK(c == doctest::Approx(2.0 / 6.0001));
  const std::vector<double> neg{1.0, -5.0};
  const auto c = fusion_coefficients(neg, 1e-4);
  CHECK(c[1] == 0.0);
  CHECK(c[0] == doctest::Approx(1.0 / 1.0001));
}
