#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "ldpet/adam.hpp"
#include "ldpet/autograd.hpp"
#include "ldpet/ops.hpp"
#include "grad_cases.hpp"
#include "test_support.hpp"

using namespace ldpet;
using ldpet::testing::close_rel;
using ldpet::testing::gradient_check;
using ldpet::testing::random_away_from_zero;
using ldpet::testing::random_tensor;

namespace {

// Direct loop oracle for 3D cross-correlation with zero padding and stride.
std::vector<double> loop_conv3d(const Tensor64& x, const Tensor64& w, std::size_t stride,
                                std::size_t pad) {
  const auto B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const auto O = w.dim(0), K0 = w.dim(2), K1 = w.dim(3), K2 = w.dim(4);
  const auto Do = (D + 2 * pad - K0) / stride + 1;
  const auto Ho = (H + 2 * pad - K1) / stride + 1;
  const auto Wo = (W + 2 * pad - K2) / stride + 1;
  std::vector<double> y(B * O * Do * Ho * Wo, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t z = 0; z < Do; ++z)
        for (std::size_t r = 0; r < Ho; ++r)
          for (std::size_t c = 0; c < Wo; ++c) {
            double acc = 0;
            for (std::size_t i = 0; i < C; ++i)
              for (std::size_t a = 0; a < K0; ++a)
                for (std::size_t e = 0; e < K1; ++e)
                  for (std::size_t f = 0; f < K2; ++f) {
                    const long zi = long(z * stride + a) - long(pad);
                    const long yi = long(r * stride + e) - long(pad);
                    const long xi = long(c * stride + f) - long(pad);
                    if (zi < 0 || yi < 0 || xi < 0 || zi >= long(D) || yi >= long(H) ||
                        xi >= long(W))
                      continue;
                    acc += x[(((b * C + i) * D + zi) * H + yi) * W + xi] *
                           w[(((o * C + i) * K0 + a) * K1 + e) * K2 + f];
                  }
            y[(((b * O + o) * Do + z) * Ho + r) * Wo + c] = acc;
          }
  return y;
}

double dot(const Tensor64& a, const Tensor64& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("conv: identity kernel preserves a 2D input") {
  std::mt19937_64 rng(1);
  auto x = random_tensor<double>({1, 1, 5, 5}, rng);
  Tensor64 k({1, 1, 3, 3}, 0.0);
  k.mutable_data()[4] = 1.0;
  auto y = conv_forward(x, k, Tensor64({1}, 0.0), 1, Padding::zero);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("conv: all-ones valid summation") {
  auto y = conv_forward(Tensor64::ones({1, 1, 3, 3}), Tensor64::ones({1, 1, 3, 3}),
                        Tensor64({1}, 0.0), 1, Padding::none);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 9.0);
}

TEST_CASE("conv: 3D matches the direct loop oracle") {
  std::mt19937_64 rng(7);
  auto x = random_tensor<double>({1, 1, 4, 4, 4}, rng);
  auto w = random_tensor<double>({1, 1, 3, 3, 3}, rng);
  for (auto pad : {Padding::none, Padding::zero}) {
    auto y = conv(x, w, ConvSpec::make(1, pad, w.shape()));
    auto ref = loop_conv3d(x, w, 1, pad == Padding::zero ? 1 : 0);
    REQUIRE(y.numel() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(close_rel(y[i], ref[i], 1e-6));
  }
  // strided, multi-channel, batch 2 (discriminator geometry), float path
  auto xb = random_tensor<double>({2, 3, 5, 6, 7}, rng);
  auto wb = random_tensor<double>({4, 3, 3, 3, 3}, rng);
  auto ref = loop_conv3d(xb, wb, 2, 1);
  auto y64 = conv(xb, wb, ConvSpec::make(2, Padding::zero, wb.shape()));
  CHECK(y64.shape() == Shape{2, 4, 3, 3, 4});
  Tensor32 xf(xb.shape(), std::vector<float>(xb.data().begin(), xb.data().end()));
  Tensor32 wf(wb.shape(), std::vector<float>(wb.data().begin(), wb.data().end()));
  auto yf = conv(xf, wf, ConvSpec::make(2, Padding::zero, wf.shape()));
  for (std::size_t i = 0; i < ref.size(); ++i) {
    CHECK(close_rel(y64[i], ref[i], 1e-12, 1e-12));
    CHECK(std::abs(yf[i] - ref[i]) < 1e-4);
  }
}

TEST_CASE("conv: errors name the offending axis") {
  Tensor64 x({1, 2, 5, 5}, 1.0);
  Tensor64 w({1, 3, 3, 3}, 1.0);
  CHECK_THROWS_WITH_AS(conv(x, w, ConvSpec{}), doctest::Contains("axis 1"), ShapeError);
  CHECK_THROWS_AS(conv_forward(x, Tensor64({1, 2, 3, 3}, 1.0), Tensor64({1}), 0, Padding::zero),
                  ShapeError);
  CHECK_THROWS_AS(conv(Tensor64({1, 1, 2, 2}), Tensor64({1, 1, 3, 3}), ConvSpec{}), ShapeError);
}

TEST_CASE("deconv: identity and single-pixel spread") {
  std::mt19937_64 rng(2);
  auto x = random_tensor<double>({1, 1, 3, 3}, rng);
  Tensor64 k({1, 1, 3, 3}, 0.0);
  k.mutable_data()[4] = 1.0;
  auto y = deconv_forward(x, k, Tensor64({1}, 0.0), 1, Padding::zero);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);

  auto spread = deconv_forward(Tensor64::ones({1, 1, 1, 1}), Tensor64::ones({1, 1, 3, 3}),
                               Tensor64({1}, 0.0), 1, Padding::none);
  REQUIRE(spread.shape() == Shape{1, 1, 3, 3});
  for (double v : spread.data()) CHECK(v == 1.0);
}

TEST_CASE("deconv: adjoint identity <deconv(x), y> == <x, conv(y)>") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const bool three_d = trial % 2 == 0;
    const std::size_t stride = trial % 4 < 2 ? 1 : 2;
    const Padding pad = trial % 3 == 0 ? Padding::none : Padding::zero;
    Shape kshape = three_d ? Shape{3, 2, 3, 3, 3} : Shape{3, 2, 3, 3};
    Shape yshape = three_d ? Shape{2, 2, 5, 6, 7} : Shape{2, 2, 6, 7};
    auto w = random_tensor<double>(kshape, rng);
    auto y = random_tensor<double>(yshape, rng);
    const auto spec = ConvSpec::make(stride, pad, kshape);
    auto cy = conv(y, w, spec);
    auto x = random_tensor<double>(cy.shape(), rng);
    std::vector<std::size_t> sp(yshape.begin() + 2, yshape.end());
    auto dx = conv_transpose(x, w, spec, sp);
    CHECK(close_rel(dot(dx, y), dot(x, cy), 1e-5));
  }
}

TEST_CASE("activations") {
  Tensor64 x({3}, std::vector<double>{-1, 0, 2});
  auto r = relu(x);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 2.0);
  auto l = leaky_relu(Tensor64({2}, std::vector<double>{-1, 2}), 0.2);
  CHECK(l[0] == doctest::Approx(-0.2));
  CHECK(l[1] == 2.0);

  Tensor64 p({2}, std::vector<double>{-1, 3});
  p.set_requires_grad(true);
  auto g = backward(sum(relu(p)), {p});
  CHECK(g.at(p)[0] == 0.0);
  CHECK(g.at(p)[1] == 1.0);

  Tensor64 kink({1}, 0.0);
  kink.set_requires_grad(true);
  CHECK(backward(sum(relu(kink)), {kink}).at(kink)[0] == 0.0);
}

TEST_CASE("dense forward") {
  Tensor64 x({1, 2}, std::vector<double>{1, 2});
  Tensor64 eye({2, 2}, std::vector<double>{1, 0, 0, 1});
  auto y = dense_forward(x, eye, Tensor64({2}, 0.0));
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 2.0);
  auto z = dense_forward(x, Tensor64({2, 2}, std::vector<double>{1, 1, 0, 1}),
                         Tensor64({2}, std::vector<double>{1, 0}));
  CHECK(z[0] == 4.0);
  CHECK(z[1] == 2.0);

  std::mt19937_64 rng(4);
  auto xi = random_tensor<double>({2, 3}, rng);
  auto w = random_tensor<double>({4, 3}, rng);
  auto b = random_tensor<double>({4}, rng);
  auto out = dense_forward(xi, w, b);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t m = 0; m < 4; ++m) {
      double acc = b[m];
      for (std::size_t n = 0; n < 3; ++n) acc += xi[r * 3 + n] * w[m * 3 + n];
      CHECK(close_rel(out[r * 4 + m], acc, 1e-6));
    }
  CHECK_THROWS_AS(dense_forward(xi, Tensor64({4, 2}), b), ShapeError);
}

TEST_CASE("backward: basics and documented policies") {
  Tensor64 x = Tensor64::scalar(3.0);
  x.set_requires_grad(true);
  CHECK(backward(square(x), {x}).at(x).item() == 6.0);

  Tensor64 unused = Tensor64::ones({2, 2});
  unused.set_requires_grad(true);
  auto g = backward(square(x), {x, unused});
  REQUIRE(g.contains(unused));
  for (double v : g.at(unused).data()) CHECK(v == 0.0);

  Tensor64 v({3}, 1.0);
  v.set_requires_grad(true);
  CHECK_THROWS_AS(backward(scale(v, 2.0), {v}), ShapeError);

  // consumed graph
  auto y = sum(square(v));
  backward(y, {v});
  CHECK_THROWS_AS(backward(y, {v}), ShapeError);
  auto y2 = sum(square(v));
  BackwardOptions keep;
  keep.retain_graph = true;
  backward(y2, {v}, keep);
  CHECK(backward(y2, {v}).at(v)[0] == 2.0);
}

TEST_CASE("input_gradient_node: symbolic double backprop") {
  Tensor64 w = Tensor64::scalar(2.5);
  Tensor64 x = Tensor64::scalar(-1.5);
  w.set_requires_grad(true);
  x.set_requires_grad(true);

  auto gx = input_gradient_node(sum(mul(w, x)), x);
  CHECK(gx.item() == 2.5);
  CHECK(backward(sum(gx), {w}).at(w).item() == doctest::Approx(1.0));

  auto gx2 = input_gradient_node(sum(mul(w, square(x))), x);
  CHECK(gx2.item() == doctest::Approx(2 * 2.5 * -1.5));
  CHECK(backward(sum(gx2), {w}).at(w).item() == doctest::Approx(2 * -1.5));

  Tensor64 other = Tensor64::scalar(1.0);
  other.set_requires_grad(true);
  CHECK_THROWS_AS(input_gradient_node(sum(mul(w, x)), other), ShapeError);
}

TEST_CASE("finite-difference agreement of every differentiable op (100 trials)") {
  std::mt19937_64 rng(11);
  const double worst = ldpet::testing::run_gradient_trials(100, rng, [](const char* name, double err) {
    INFO(name);
    CHECK(err < 1e-4);
  });
  MESSAGE("worst relative gradient error: " << worst);
}

TEST_CASE("double backprop: penalty parameter-gradient on a tiny critic") {
  // critic D(x) = sum(w2 * leaky(conv(x, w1))), 2x2 kernel + 2 scalars
  std::mt19937_64 rng(5);
  auto x = random_tensor<double>({1, 1, 3, 3}, rng);
  auto penalty = [&](const std::vector<Tensor64>& p) {
    Tensor64 xi = x.clone();
    xi.set_requires_grad(true);
    EnableGradGuard on(true);
    auto h = leaky_relu(conv(xi, p[0], ConvSpec{}), 0.2);
    auto d = sum(mul(h, expand_scalar(p[1], h.shape())));
    auto g = input_gradient_node(d, xi);
    auto n = norm_per_sample(g);
    return sum(square(add_scalar(n, -1.0)));
  };
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Tensor64> params{random_tensor<double>({1, 1, 2, 2}, rng),
                                 random_tensor<double>({1}, rng)};
    CHECK(gradient_check(penalty, params) < 1e-3);
  }
}

TEST_CASE("backward is linear") {
  std::mt19937_64 rng(6);
  auto x = random_tensor<float>({6}, rng);
  x.set_requires_grad(true);
  auto f = [&] { return sum(square(x)); };
  auto gfun = [&] { return sum(mul(x, relu(x))); };
  const float a = 1.5f, b = -0.75f;
  auto combined = backward(add(scale(f(), a), scale(gfun(), b)), {x}).at(x);
  auto gf = backward(f(), {x}).at(x);
  auto gg = backward(gfun(), {x}).at(x);
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(combined[i] - (a * gf[i] + b * gg[i])) < 1e-6);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    std::vector<Tensor64> params{Tensor64({2}, std::vector<double>{0.5, -2})};
    AdamState<double> state(params, AdamHyper{});
    GradientMap<double> g;
    g.set(params[0], Tensor64::zeros({2}));
    adam_step(params, g, state);
    CHECK(params[0][0] == 0.5);
    CHECK(params[0][1] == -2.0);
    CHECK(state.step == 1);
  }
  SUBCASE("scalar first step vs hand-rolled oracle") {
    std::vector<Tensor64> params{Tensor64::scalar(1.0)};
    AdamHyper h{1e-4, 0.9, 0.999, 1e-8};
    AdamState<double> state(params, h);
    GradientMap<double> g;
    g.set(params[0], Tensor64::scalar(1.0));
    adam_step(params, g, state);
    const double m = 0.1, v = 0.001;
    const double m_hat = m / (1 - 0.9), v_hat = v / (1 - 0.999);
    const double expected = 1.0 - 1e-4 * m_hat / (std::sqrt(v_hat) + 1e-8);
    CHECK(close_rel(params[0].item(), expected, 1e-10));
    // second step with a different gradient
    g.set(params[0], Tensor64::scalar(-0.5));
    adam_step(params, g, state);
    const double m2 = 0.9 * m + 0.1 * -0.5, v2 = 0.999 * v + 0.001 * 0.25;
    const double expected2 =
        expected - 1e-4 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.999 * 0.999)) + 1e-8);
    CHECK(close_rel(params[0].item(), expected2, 1e-10));
  }
  SUBCASE("identical params and grads update identically") {
    std::vector<Tensor32> params{Tensor32({3}, 0.3f), Tensor32({3}, 0.3f)};
    AdamState<float> state(params, AdamHyper{});
    GradientMap<float> g;
    g.set(params[0], Tensor32({3}, std::vector<float>{0.1f, -2.f, 3.f}));
    g.set(params[1], Tensor32({3}, std::vector<float>{0.1f, -2.f, 3.f}));
    for (int i = 0; i < 3; ++i) adam_step(params, g, state);
    CHECK(std::memcmp(params[0].data().data(), params[1].data().data(), 3 * sizeof(float)) == 0);
  }
  SUBCASE("missing gradient is rejected") {
    std::vector<Tensor64> params{Tensor64::scalar(1.0)};
    AdamState<double> state(params, AdamHyper{});
    CHECK_THROWS_AS(adam_step(params, GradientMap<double>{}, state), ShapeError);
  }
}

TEST_CASE("determinism: identical inputs give bit-identical values and gradients") {
  auto run = [] {
    std::mt19937_64 rng(99);
    auto x = random_tensor<float>({2, 3, 5, 8, 8}, rng);
    auto w = random_tensor<float>({4, 3, 3, 3, 3}, rng);
    w.set_requires_grad(true);
    auto y = sum(square(conv(x, w, ConvSpec::make(1, Padding::zero, w.shape()))));
    auto g = backward(y, {w}).at(w);
    std::vector<float> out(g.data().begin(), g.data().end());
    out.push_back(y.item());
    return out;
  };
  auto a = run();
  auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}
