#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "airseg/medseg.hpp"
#include "gradcheck.hpp"

using namespace airseg;
using namespace airseg::nn;
using airseg::testing::check_gradients;
using airseg::testing::random_tensor;

namespace {
std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

ArchConfig tiny_config() {
  ArchConfig c;
  c.backbone_widths = {4, 6, 8};
  c.bifpn_width = 8;
  c.bifpn_repeats = 1;
  c.head_width = 8;
  return c;
}
}  // namespace

TEST_CASE("arch config validation") {
  ArchConfig c;
  CHECK_NOTHROW(c.validate());
  c.classes = 2;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ArchConfig{};
  c.bifpn_repeats = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ArchConfig{};
  c.backbone_widths[1] = 0;
  CHECK_THROWS_AS(MEDSeg{c}, std::invalid_argument);
}

TEST_CASE("backbone feature sizes") {
  MEDSeg model;
  model.set_mode(NormMode::eval);
  struct Case {
    std::size_t h, w;
    std::array<std::pair<std::size_t, std::size_t>, 3> want;
  };
  for (const Case& c : {Case{256, 256, {{{128, 128}, {64, 64}, {32, 32}}}}, Case{7, 7, {{{4, 4}, {2, 2}, {1, 1}}}},
                        Case{333, 217, {{{167, 109}, {84, 55}, {42, 28}}}}}) {
    CAPTURE(c.h);
    NoGradGuard ng;
    auto f = model.backbone_forward(Tensor({1, 3, c.h, c.w}, 0.25f));
    CHECK(f.p1.shape() == Shape{1, 8, c.want[0].first, c.want[0].second});
    CHECK(f.p2.shape() == Shape{1, 12, c.want[1].first, c.want[1].second});
    CHECK(f.p3.shape() == Shape{1, 16, c.want[2].first, c.want[2].second});
  }
  CHECK_THROWS_AS(model.backbone_forward(Tensor({1, 1, 8, 8})), ShapeError);
}

TEST_CASE("align") {
  Xoshiro256 rng(1);
  SUBCASE("identity at target size") {
    Tensor x = random_tensor<float>({1, 2, 5, 5}, rng);
    Tensor y = align(x, 5, 5);
    CHECK(y.impl() == x.impl());
  }
  SUBCASE("1x1 -> 2x2 is a constant upsample") {
    Tensor y = align(Tensor({1, 1, 1, 1}, 3.0f), 2, 2);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (float v : y.data()) CHECK(v == 3.0f);
  }
  SUBCASE("4x4 -> 2x2 equals maxpool2") {
    Tensor x = random_tensor<float>({2, 3, 4, 4}, rng);
    Tensor a = align(x, 2, 2), b = maxpool2(x);
    CHECK(a.shape() == b.shape());
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  }
  SUBCASE("shrinking to a non-halved size crops/replicates after pooling") {
    Tensor x = random_tensor<float>({1, 1, 9, 9}, rng);
    CHECK(align(x, 4, 6).shape() == Shape{1, 1, 4, 6});
    CHECK(align(x, 3, 12).shape() == Shape{1, 1, 3, 12});
  }
}

TEST_CASE("BiFPN fusion") {
  SUBCASE("equal raw weights reduce to the mean") {
    Xoshiro256 rng(2);
    std::vector<Tensor> ins;
    for (int i = 0; i < 3; ++i) ins.push_back(random_tensor<float>({1, 2, 3, 3}, rng));
    const double eps = 1e-4;
    Tensor y = weighted_fusion(ins, Tensor({3}, 0.8f), eps);
    for (std::size_t i = 0; i < y.numel(); ++i) {
      const double mean = (ins[0][i] + ins[1][i] + ins[2][i]) / 3.0;
      CHECK(y[i] == doctest::Approx(mean * 2.4 / (2.4 + eps)).epsilon(1e-6));
      CHECK(y[i] == doctest::Approx(mean).epsilon(1e-3));
    }
  }
  SUBCASE("a strongly negative raw weight silences its input") {
    Tensor a({1, 1, 2, 2}, 1.0f), b({1, 1, 2, 2}, 100.0f);
    Tensor y = weighted_fusion<float>({a, b}, Tensor({2}, std::vector<float>{1.0f, -50.0f}), 1e-4);
    for (float v : y.data()) CHECK(v == doctest::Approx(1.0 / 1.0001));
  }
  SUBCASE("normalized coefficients are bounded and shift-covariant") {
    Xoshiro256 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> w(3);
      for (auto& v : w) v = rng.uniform(0.01, 3.0);
      const double eps = 1e-4;
      const auto c = fusion_coefficients(w, eps);
      const double total = w[0] + w[1] + w[2];
      const double sc = c[0] + c[1] + c[2];
      CHECK(sc <= 1.0);
      CHECK(sc >= total / (total + eps) - 1e-15);
      // shifting every raw weight by the same positive amount keeps the order of coefficients
      std::vector<double> shifted = w;
      for (auto& v : shifted) v += 0.5;
      const auto cs = fusion_coefficients(shifted, eps);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          if (w[i] < w[j]) CHECK(cs[i] < cs[j]);
    }
  }
  SUBCASE("odd 101x101 input matches partner shapes at every fusion") {
    MEDSeg model;
    std::vector<FusionRecord> trace;
    NoGradGuard ng;
    Tensor y = model.forward(Tensor({1, 3, 101, 101}, 0.5f), &trace);
    CHECK(y.shape() == Shape{1, 1, 101, 101});
    CHECK(trace.size() == 4 * model.config().bifpn_repeats);
    for (const auto& rec : trace) {
      CAPTURE(rec.node);
      for (const auto& s : rec.partner_shapes) CHECK(s == rec.partner_shapes.front());
    }
    CHECK(trace[0].partner_shapes[0] == Shape{1, 16, 26, 26});  // P2 level
    CHECK(trace[1].partner_shapes[0] == Shape{1, 16, 51, 51});  // P1 level
    CHECK(trace[3].partner_shapes[0] == Shape{1, 16, 13, 13});  // P3 level
  }
}

TEST_CASE("forward output shape equals input shape") {
  MEDSeg model;
  model.set_mode(NormMode::eval);
  NoGradGuard ng;
  for (std::size_t h : {7u, 64u, 101u}) {
    for (std::size_t w : {7u, 64u, 101u, 217u}) {
      Tensor y = model.forward(Tensor({2, 3, h, w}, 0.3f));
      CHECK(y.shape() == Shape{2, 1, h, w});
      for (float v : y.data()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
      }
    }
  }
  auto f = model.bifpn_forward(model.backbone_forward(Tensor({1, 3, 33, 18}, 0.1f)));
  CHECK(f.shape() == Shape{1, 16, ceil_div(33, 2), ceil_div(18, 2)});
}

TEST_CASE("forward is deterministic") {
  MEDSeg a(ArchConfig{}, 5);
  Xoshiro256 rng(4);
  Tensor x = random_tensor<float>({2, 3, 20, 13}, rng, 0.0, 1.0);
  a.set_mode(NormMode::eval);
  Tensor y1 = a.forward(x), y2 = a.forward(x);
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
  MEDSeg b(ArchConfig{}, 5);
  b.set_mode(NormMode::eval);
  Tensor y3 = b.forward(x);
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y3.data().begin()));
}

TEST_CASE("dice loss") {
  SUBCASE("perfect binary prediction on a large mask") {
    const std::size_t n = 1000;
    Tensor g({1, 1, 1, n}, 1.0f);
    const double L = dice_loss(g.clone(), g).item();
    CHECK(L >= 0.0);
    CHECK(L <= 1.0 / (2 * n + 1.0) + 1e-7);
  }
  SUBCASE("zero prediction") {
    Tensor g({1, 1, 4, 4}, 0.0f);
    for (std::size_t i = 0; i < 5; ++i) g[i] = 1.0f;
    CHECK(dice_loss(Tensor({1, 1, 4, 4}, 0.0f), g).item() == doctest::Approx(1.0 - 1.0 / 6.0));
  }
  SUBCASE("uniform half probability on half-covered labels") {
    for (std::size_t N : {4u, 64u, 1000u}) {
      Tensor64 p({1, 1, 1, N}, 0.5), g({1, 1, 1, N}, 0.0);
      for (std::size_t i = 0; i < N / 2; ++i) g[i] = 1.0;
      const double want = 1.0 - (0.5 * N + 1.0) / (N + 1.0);
      CHECK(dice_loss(p, g).item() == doctest::Approx(want).epsilon(1e-14));
    }
  }
  SUBCASE("symmetric for binary arguments") {
    Xoshiro256 rng(5);
    Tensor64 a({1, 1, 6, 6}), b({1, 1, 6, 6});
    for (std::size_t i = 0; i < 36; ++i) {
      a[i] = rng.below(2);
      b[i] = rng.below(2);
    }
    CHECK(dice_loss(a, b).item() == doctest::Approx(dice_loss(b, a).item()).epsilon(1e-15));
  }
  SUBCASE("empty labels and empty prediction give zero loss") {
    CHECK(dice_loss(Tensor({1, 1, 3, 3}, 0.0f), Tensor({1, 1, 3, 3}, 0.0f)).item() == 0.0f);
  }
  SUBCASE("gradient matches finite differences") {
    Xoshiro256 rng(6);
    Tensor64 p = random_tensor<double>({2, 1, 5, 5}, rng, 0.05, 0.95);
    Tensor64 g({2, 1, 5, 5});
    for (auto& v : g.data()) v = static_cast<double>(rng.below(2));
    p.set_requires_grad();
    CHECK(check_gradients<double>([&] { return dice_loss(p, g); }, {p}, 1e-6).rel_error <= 1e-8);
  }
}

TEST_CASE_TEMPLATE("end-to-end gradient of dice_loss . forward", T, float, double) {
  BasicMEDSeg<T> model(tiny_config(), 9);
  Xoshiro256 rng(10);
  auto x = random_tensor<T>({2, 3, 16, 16}, rng, 0.0, 1.0);
  BasicTensor<T> g({2, 1, 16, 16});
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] = rng.uniform() < 0.3 ? T(1) : T(0);
  std::vector<BasicTensor<T>> wrt;
  for (auto& p : model.params()) wrt.push_back(p.tensor);
  const double h = std::is_same_v<T, float> ? 3e-3 : 1e-5;
  const double tol = std::is_same_v<T, float> ? 1e-3 : 1e-6;
  airseg::testing::GradCheckResult res;
  if constexpr (std::is_same_v<T, float>) res = airseg::testing::check_medseg_f32(model, x, g, 6);
  else res = check_gradients<T>([&] { return dice_loss(model.forward(x), g); }, wrt, h, 6);
  CAPTURE(res.checked);
  CHECK(res.rel_error <= tol);
}

TEST_CASE("state tensors round-trip through load_state and copy_from") {
  MEDSeg a(ArchConfig{}, 1), b(ArchConfig{}, 2);
  std::map<std::string, Tensor> m;
  for (auto& [name, t] : a.state_tensors()) m.emplace(name, t.clone());
  b.load_state(m);
  auto sa = a.state_tensors(), sb = b.state_tensors();
  REQUIRE(sa.size() == sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i)
    CHECK(std::equal(sa[i].second.data().begin(), sa[i].second.data().end(), sb[i].second.data().begin()));

  MEDSeg64 c(ArchConfig{}, 3);
  c.copy_from(a);
  CHECK(c.state_tensors()[0].second[0] == static_cast<double>(sa[0].second[0]));

  m.erase(m.begin());
  CHECK_THROWS_AS(b.load_state(m), ShapeError);
  // names must be unique
  std::set<std::string> names;
  for (auto& [name, t] : a.state_tensors()) CHECK(names.insert(name).second);
}
