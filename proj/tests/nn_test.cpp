// Copyright 2026 The VisemeFlow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>

#include "visemeflow/layers.hpp"
#include "visemeflow/nn.hpp"
#include "oracles.hpp"

namespace vf = visemeflow;
using oracle::naive_conv;

namespace {

vf::TensorF random_f(vf::Shape s, std::uint64_t seed) {
  return vf::random_tensor(std::move(s), seed).cast<float>();
}

}  // namespace

TEST(Xavier, BoundsDeterminismAndMean) {
  const double limit = std::sqrt(6.0 / 200.0);
  EXPECT_NEAR(limit, 0.17320, 1e-5);
  auto a = vf::xavier_init<double>(100, 100, vf::Shape{100, 100}, 42);
  for (double v : a.data()) {
    ASSERT_LT(v, limit);
    ASSERT_GT(v, -limit);
  }
  EXPECT_EQ(a, (vf::xavier_init<double>(100, 100, vf::Shape{100, 100}, 42)));

  auto big = vf::xavier_init<double>(100, 100, vf::Shape{100000}, 7);
  EXPECT_NEAR(vf::sum_all(big) / 1e5, 0.0, 0.01);
}

TEST(Conv2d, OneByOneIdentityKernel) {
  auto x = random_f(vf::Shape{2, 1, 4, 5}, 1);
  vf::TensorF w(vf::Shape{1, 1, 1, 1}, 1.0f);
  auto [y, cache] = vf::conv2d_forward(x, w, vf::TensorF(vf::Shape{1}), 1, 0);
  EXPECT_EQ(y, x);
}

TEST(Conv2d, OnesKernelOnOnes) {
  auto [y, cache] = vf::conv2d_forward(vf::TensorF::ones(vf::Shape{1, 1, 2, 2}),
                                       vf::TensorF::ones(vf::Shape{1, 1, 2, 2}),
                                       vf::TensorF(vf::Shape{1}), 1, 0);
  ASSERT_EQ(y.shape(), (vf::Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 4.0f);
}

TEST(Conv2d, MatchesNaiveLoop) {
  auto x = random_f(vf::Shape{2, 3, 5, 5}, 2);
  auto w = random_f(vf::Shape{4, 3, 3, 3}, 3);
  auto b = random_f(vf::Shape{4}, 4);
  for (std::size_t pad : {0u, 1u}) {
    auto [y, cache] = vf::conv2d_forward(x, w, b, 1, pad);
    auto ref = naive_conv(x, w, b, 1, pad);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.size(); ++i) {
      EXPECT_NEAR(y[i], ref[i], 1e-6 * std::max(1.0f, std::abs(ref[i])));
    }
    EXPECT_EQ(vf::conv2d_infer(x, w, b, 1, pad), y);
  }
}

TEST(Conv2d, GeometryErrors) {
  vf::TensorF x(vf::Shape{1, 2, 5, 5});
  EXPECT_THROW(vf::conv2d_forward(x, vf::TensorF(vf::Shape{1, 3, 3, 3}),
                                  vf::TensorF(vf::Shape{1}), 1, 0),
               vf::ShapeError);
  EXPECT_THROW(vf::conv2d_forward(x, vf::TensorF(vf::Shape{1, 2, 2, 2}),
                                  vf::TensorF(vf::Shape{1}), 2, 0),
               vf::ShapeError);
}

TEST(Conv2dBackward, ZeroGradOutGivesZeroGradients) {
  auto x = random_f(vf::Shape{1, 2, 4, 4}, 5);
  auto w = random_f(vf::Shape{3, 2, 3, 3}, 6);
  auto [y, cache] = vf::conv2d_forward(x, w, vf::TensorF(vf::Shape{3}), 1, 1);
  auto g = vf::conv2d_backward(vf::TensorF(y.shape()), cache);
  for (float v : g.x.data()) EXPECT_EQ(v, 0.0f);
  for (float v : g.w.data()) EXPECT_EQ(v, 0.0f);
  for (float v : g.b.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Conv2dBackward, SinglePixelThroughIdentityKernel) {
  vf::TensorD x(vf::Shape{1, 1, 3, 3});
  auto [y, cache] = vf::conv2d_forward(x, vf::TensorD::ones(vf::Shape{1, 1, 1, 1}),
                                       vf::TensorD(vf::Shape{1}), 1, 0);
  vf::TensorD gy(y.shape());
  gy[4] = 2.5;
  auto g = vf::conv2d_backward(gy, cache);
  EXPECT_EQ(g.x, gy);
}

TEST(Conv2dBackward, FiniteDifferences) {
  auto x = vf::random_tensor(vf::Shape{1, 2, 6, 6}, 11);
  auto w = vf::random_tensor(vf::Shape{3, 2, 3, 3}, 12);
  auto b = vf::random_tensor(vf::Shape{3}, 13);
  const auto r = vf::random_tensor(vf::Shape{1, 3, 6, 6}, 14);
  auto [y, cache] = vf::conv2d_forward(x, w, b, 1, 1);
  auto g = vf::conv2d_backward(r, cache);
  std::vector<vf::GradProbe> probes{{"x", &x, g.x}, {"w", &w, g.w}, {"b", &b, g.b}};
  auto report = vf::grad_check(
      [&] { return vf::project(vf::conv2d_infer(x, w, b, 1, 1), r); }, probes);
  EXPECT_LT(report.max_relative_error, 1e-6) << report.worst_name;
}

TEST(Conv2dBackward, StridedFiniteDifferences) {
  auto x = vf::random_tensor(vf::Shape{2, 1, 7, 7}, 21);
  auto w = vf::random_tensor(vf::Shape{2, 1, 3, 3}, 22);
  auto b = vf::random_tensor(vf::Shape{2}, 23);
  const auto r = vf::random_tensor(vf::Shape{2, 2, 3, 3}, 24);
  auto [y, cache] = vf::conv2d_forward(x, w, b, 2, 0);
  auto g = vf::conv2d_backward(r, cache);
  std::vector<vf::GradProbe> probes{{"x", &x, g.x}, {"w", &w, g.w}, {"b", &b, g.b}};
  auto report = vf::grad_check(
      [&] { return vf::project(vf::conv2d_infer(x, w, b, 2, 0), r); }, probes);
  EXPECT_LT(report.max_relative_error, 1e-6) << report.worst_name;
}

TEST(ConvTranspose2d, DoublesSpatialSizeAndIsAdjointOfConv) {
  // <conv(x), y> = <x, conv_transpose(y)> for equal weights and zero bias.
  auto x = vf::random_tensor(vf::Shape{1, 2, 6, 8}, 31);
  auto w = vf::random_tensor(vf::Shape{3, 2, 2, 2}, 32);
  auto yv = vf::random_tensor(vf::Shape{1, 3, 3, 4}, 33);
  auto conv = vf::conv2d_infer(x, w, vf::TensorD(vf::Shape{3}), 2, 0);
  auto [up, cache] =
      vf::conv_transpose2d_forward(yv, w, vf::TensorD(vf::Shape{2}), 2, 0);
  EXPECT_EQ(up.shape(), x.shape());
  EXPECT_NEAR(vf::project(conv, yv), vf::project(up, x), 1e-12);
}

TEST(ConvTranspose2d, FiniteDifferences) {
  for (auto [k, s, p] : {std::tuple{2u, 2u, 0u}, std::tuple{3u, 1u, 1u}}) {
    auto x = vf::random_tensor(vf::Shape{2, 3, 3, 4}, 41);
    auto w = vf::random_tensor(vf::Shape{3, 2, k, k}, 42);
    auto b = vf::random_tensor(vf::Shape{2}, 43);
    auto [y, cache] = vf::conv_transpose2d_forward(x, w, b, s, p);
    const auto r = vf::random_tensor(y.shape(), 44);
    auto g = vf::conv_transpose2d_backward(r, cache);
    std::vector<vf::GradProbe> probes{{"x", &x, g.x}, {"w", &w, g.w}, {"b", &b, g.b}};
    auto report = vf::grad_check(
        [&] { return vf::project(vf::conv_transpose2d_forward(x, w, b, s, p).first, r); },
        probes);
    EXPECT_LT(report.max_relative_error, 1e-6) << report.worst_name;
  }
}

TEST(MaxPool, ConstantInputRoutesToFirstElement) {
  vf::TensorD x(vf::Shape{1, 1, 4, 4}, 3.0);
  auto [y, cache] = vf::maxpool_forward(x, 2, 2);
  for (double v : y.data()) EXPECT_EQ(v, 3.0);
  auto gx = vf::maxpool_backward(vf::TensorD::ones(y.shape()), cache);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_EQ(gx[r * 4 + c], (r % 2 == 0 && c % 2 == 0) ? 1.0 : 0.0);
}

TEST(MaxPool, TwoByTwo) {
  vf::TensorD x(vf::Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  auto [y, cache] = vf::maxpool_forward(x, 2, 2);
  ASSERT_EQ(y.size(), 1u);
  EXPECT_EQ(y[0], 4.0);
}

TEST(MaxPool, NonIntegralSize) {
  EXPECT_THROW(vf::maxpool_forward(vf::TensorD(vf::Shape{1, 1, 5, 4}), 2, 2),
               vf::ShapeError);
}

TEST(MaxPool, FiniteDifferencesTieFree) {
  // Distinct values spaced well above 2*eps.
  vf::TensorD x(vf::Shape{2, 2, 4, 6});
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  vf::Rng rng(51);
  rng.shuffle(order);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.01 * double(order[i]);
  auto [y, cache] = vf::maxpool_forward(x, 2, 2);
  const auto r = vf::random_tensor(y.shape(), 52);
  std::vector<vf::GradProbe> probes{{"x", &x, vf::maxpool_backward(r, cache)}};
  auto report = vf::grad_check(
      [&] { return vf::project(vf::maxpool_forward(x, 2, 2).first, r); }, probes);
  EXPECT_LT(report.max_relative_error, 1e-6);
}

TEST(Dense, IdentityAndHandExample) {
  auto x = vf::random_tensor(vf::Shape{3, 4}, 61);
  auto [y, c] = vf::dense_forward(x, vf::TensorD::identity(4), vf::TensorD(vf::Shape{4}));
  EXPECT_EQ(y, x);
  auto [z, c2] = vf::dense_forward(vf::TensorD::matrix({{1, 1}}),
                                   vf::TensorD::matrix({{1}, {1}}),
                                   vf::TensorD::vector({1}));
  EXPECT_EQ(z, vf::TensorD::matrix({{3}}));
  EXPECT_THROW(vf::dense_forward(x, vf::TensorD(vf::Shape{3, 2}), vf::TensorD(vf::Shape{2})),
               vf::ShapeError);
}

TEST(Dense, FiniteDifferences3to2) {
  auto x = vf::random_tensor(vf::Shape{4, 3}, 71);
  auto w = vf::random_tensor(vf::Shape{3, 2}, 72);
  auto b = vf::random_tensor(vf::Shape{2}, 73);
  const auto r = vf::random_tensor(vf::Shape{4, 2}, 74);
  auto [y, cache] = vf::dense_forward(x, w, b);
  auto g = vf::dense_backward(r, cache);
  std::vector<vf::GradProbe> probes{{"x", &x, g.x}, {"w", &w, g.w}, {"b", &b, g.b}};
  auto report = vf::grad_check(
      [&] { return vf::project(vf::dense_infer(x, w, b), r); }, probes);
  EXPECT_LT(report.max_relative_error, 1e-6);
}

namespace {

vf::LstmParams<double> random_lstm(std::size_t d, std::size_t h, std::uint64_t seed) {
  return {vf::random_tensor(vf::Shape{d, 4 * h}, seed, -0.5, 0.5),
          vf::random_tensor(vf::Shape{h, 4 * h}, seed + 1, -0.5, 0.5),
          vf::random_tensor(vf::Shape{4 * h}, seed + 2, -0.5, 0.5)};
}

}  // namespace

TEST(Lstm, ZeroParamsAndStates) {
  vf::LstmParams<double> p{vf::TensorD(vf::Shape{3, 8}), vf::TensorD(vf::Shape{2, 8}),
                           vf::TensorD(vf::Shape{8})};
  auto r = vf::lstm_step(vf::TensorD(vf::Shape{1, 3}), vf::TensorD(vf::Shape{1, 2}),
                         vf::TensorD(vf::Shape{1, 2}), p);
  for (double v : r.h.data()) EXPECT_EQ(v, 0.0);
  for (double v : r.c.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(r.cache.gates[0], 0.5);  // input gate
  EXPECT_EQ(r.cache.gates[4], 0.0);  // cell candidate
}

TEST(Lstm, SaturatedForgetGateKeepsCell) {
  const std::size_t h = 3;
  auto p = random_lstm(2, h, 80);
  for (std::size_t j = 0; j < h; ++j) {
    p.b[j] = -50.0;     // input gate closed
    p.b[h + j] = 50.0;  // forget gate open
  }
  auto c = vf::random_tensor(vf::Shape{1, h}, 83);
  auto r = vf::lstm_step(vf::random_tensor(vf::Shape{1, 2}, 84),
                         vf::random_tensor(vf::Shape{1, h}, 85), c, p);
  for (std::size_t j = 0; j < h; ++j) EXPECT_NEAR(r.c[j], c[j], 1e-6);
}

TEST(Lstm, ShapeMismatch) {
  auto p = random_lstm(3, 4, 1);
  EXPECT_THROW(vf::lstm_step(vf::TensorD(vf::Shape{1, 2}), vf::TensorD(vf::Shape{1, 4}),
                             vf::TensorD(vf::Shape{1, 4}), p),
               vf::ShapeError);
}

TEST(Lstm, StepFiniteDifferences) {
  auto p = random_lstm(3, 4, 90);
  auto x = vf::random_tensor(vf::Shape{2, 3}, 93);
  auto h = vf::random_tensor(vf::Shape{2, 4}, 94);
  auto c = vf::random_tensor(vf::Shape{2, 4}, 95);
  const auto rh = vf::random_tensor(vf::Shape{2, 4}, 96);
  const auto rc = vf::random_tensor(vf::Shape{2, 4}, 97);
  auto res = vf::lstm_step(x, h, c, p);
  auto grads = vf::LstmGrads<double>::zeros_like(p);
  auto g = vf::lstm_step_backward(rh, rc, res.cache, p, grads);
  std::vector<vf::GradProbe> probes{{"x", &x, g.x},         {"h", &h, g.h_prev},
                                    {"c", &c, g.c_prev},    {"w_x", &p.w_x, grads.w_x},
                                    {"w_h", &p.w_h, grads.w_h}, {"b", &p.b, grads.b}};
  auto report = vf::grad_check(
      [&] {
        auto r = vf::lstm_step(x, h, c, p);
        return vf::project(r.h, rh) + vf::project(r.c, rc);
      },
      probes);
  EXPECT_LT(report.max_relative_error, 1e-6) << report.worst_name;
}

TEST(Lstm, SequenceFiniteDifferencesT5) {
  auto p = random_lstm(3, 4, 100);
  auto feats = vf::random_tensor(vf::Shape{1, 5, 3}, 103);
  const auto r = vf::random_tensor(vf::Shape{1, 4}, 104);
  auto [h, cache] = vf::lstm_sequence(feats, p);
  auto grads = vf::LstmGrads<double>::zeros_like(p);
  auto dfeat = vf::lstm_sequence_backward(r, cache, p, grads);
  std::vector<vf::GradProbe> probes{{"features", &feats, dfeat},
                                    {"w_x", &p.w_x, grads.w_x},
                                    {"w_h", &p.w_h, grads.w_h},
                                    {"b", &p.b, grads.b}};
  auto report = vf::grad_check(
      [&] { return vf::project(vf::lstm_sequence(feats, p).first, r); }, probes);
  EXPECT_LT(report.max_relative_error, 1e-6) << report.worst_name;
}

TEST(Lstm, SequenceT1EqualsOneStep) {
  auto p = random_lstm(3, 4, 110);
  auto x = vf::random_tensor(vf::Shape{2, 3}, 113);
  auto seq = vf::lstm_sequence(vf::reshape(x, vf::Shape{2, 1, 3}), p).first;
  auto step = vf::lstm_step(x, vf::TensorD(vf::Shape{2, 4}), vf::TensorD(vf::Shape{2, 4}), p);
  EXPECT_EQ(seq, step.h);
}

TEST(Lstm, ZeroSequenceZeroParams) {
  vf::LstmParams<double> p{vf::TensorD(vf::Shape{3, 8}), vf::TensorD(vf::Shape{2, 8}),
                           vf::TensorD(vf::Shape{8})};
  auto h = vf::lstm_sequence(vf::TensorD(vf::Shape{1, 6, 3}), p).first;
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, FrameOrderMatters) {
  auto p = random_lstm(3, 4, 120);
  auto feats = vf::random_tensor(vf::Shape{1, 4, 3}, 123);
  vf::TensorD swapped = feats;
  for (std::size_t j = 0; j < 3; ++j) std::swap(swapped[j], swapped[3 * 3 + j]);
  auto a = vf::lstm_sequence(feats, p).first;
  auto b = vf::lstm_sequence(swapped, p).first;
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(Lstm, BatchOrderEquivariance) {
  auto p = random_lstm(3, 4, 130);
  auto feats = vf::random_tensor(vf::Shape{3, 5, 3}, 133);
  vf::TensorD perm(feats.shape());
  const std::size_t order[3] = {2, 0, 1};
  for (std::size_t i = 0; i < 3; ++i) {
    auto src = feats.slab(order[i]);
    std::copy(src.begin(), src.end(), perm.slab(i).begin());
  }
  auto a = vf::lstm_sequence(feats, p).first;
  auto b = vf::lstm_sequence(perm, p).first;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(b.at(i, j), a.at(order[i], j));
}

TEST(Lstm, EmptySequence) {
  auto p = random_lstm(3, 4, 1);
  EXPECT_THROW(vf::lstm_sequence(vf::TensorD(vf::Shape{1, 0, 3}), p), vf::ShapeError);
}

TEST(SoftmaxCrossEntropy, AnalyticValues) {
  std::vector<std::size_t> label{0};
  auto r = vf::softmax_cross_entropy(vf::TensorD::matrix({{0, 0}}), label);
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-12);
  EXPECT_NEAR(r.loss, 0.693147, 1e-6);
  auto sat = vf::softmax_cross_entropy(vf::TensorD::matrix({{50, -50}}), label);
  EXPECT_NEAR(sat.loss, 0.0, 1e-12);
  std::vector<std::size_t> bad{2};
  EXPECT_THROW(vf::softmax_cross_entropy(vf::TensorD::matrix({{0, 0}}), bad),
               vf::DataError);
}

TEST(SoftmaxCrossEntropy, FiniteDifferences) {
  auto logits = vf::random_tensor(vf::Shape{2, 5}, 140, -3, 3);
  std::vector<std::size_t> labels{3, 1};
  auto r = vf::softmax_cross_entropy(logits, labels);
  std::vector<vf::GradProbe> probes{{"logits", &logits, r.grad}};
  auto report = vf::grad_check(
      [&] { return vf::softmax_cross_entropy(logits, labels).loss; }, probes);
  EXPECT_LT(report.max_relative_error, 1e-6);
}

TEST(SoftmaxCrossEntropy, RowsAreProbabilityVectors) {
  vf::Rng rng(150);
  for (int trial = 0; trial < 50; ++trial) {
    auto logits = vf::random_tensor(vf::Shape{3, 7}, rng.bits(), -80, 80);
    auto p = vf::softmax(logits);
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        ASSERT_GE(p.at(i, j), 0.0);
        s += p.at(i, j);
      }
      ASSERT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Mse, ValuesAndGradient) {
  auto a = vf::random_tensor(vf::Shape{3, 4}, 160);
  EXPECT_EQ(vf::mse_loss(a, a).loss, 0.0);
  auto one = vf::mse_loss(vf::TensorD::vector({1}), vf::TensorD::vector({0}));
  EXPECT_EQ(one.loss, 1.0);
  EXPECT_EQ(one.grad[0], 2.0);
  auto target = vf::random_tensor(vf::Shape{3, 4}, 161);
  auto r = vf::mse_loss(a, target);
  std::vector<vf::GradProbe> probes{{"pred", &a, r.grad}};
  auto report = vf::grad_check([&] { return vf::mse_loss(a, target).loss; }, probes);
  EXPECT_LT(report.max_relative_error, 1e-6);
  EXPECT_THROW(vf::mse_loss(a, vf::TensorD(vf::Shape{4, 3})), vf::ShapeError);
}

TEST(GradCheck, SingleKernelConv1x1x4x4) {
  auto x = vf::random_tensor(vf::Shape{1, 1, 4, 4}, 170);
  auto w = vf::random_tensor(vf::Shape{1, 1, 3, 3}, 171);
  auto b = vf::random_tensor(vf::Shape{1}, 172);
  auto [y, cache] = vf::conv2d_forward(x, w, b, 1, 0);
  const auto r = vf::random_tensor(y.shape(), 173);
  auto g = vf::conv2d_backward(r, cache);
  std::vector<vf::GradProbe> probes{{"x", &x, g.x}, {"w", &w, g.w}, {"b", &b, g.b}};
  auto report = vf::grad_check(
      [&] { return vf::project(vf::conv2d_infer(x, w, b, 1, 0), r); }, probes);
  EXPECT_LT(report.max_relative_error, 1e-6);
  EXPECT_EQ(report.coordinates, 16u + 9u + 1u);
}

TEST(LayerStack, ForwardBackwardMatchesFiniteDifferences) {
  vf::LayerStack stack{vf::Conv2dLayer{"c1", 1, 1}, vf::ReluLayer{},
                       vf::MaxPoolLayer{2, 2},      vf::FlattenLayer{},
                       vf::DenseLayer{"fc"},        vf::SigmoidLayer{}};
  vf::ParamSet<double> params;
  params["c1.w"] = vf::random_tensor(vf::Shape{2, 1, 3, 3}, 180);
  params["c1.b"] = vf::random_tensor(vf::Shape{2}, 181, 0.05, 0.1);
  params["fc.w"] = vf::random_tensor(vf::Shape{2 * 2 * 3, 3}, 182);
  params["fc.b"] = vf::random_tensor(vf::Shape{3}, 183);
  auto x = vf::random_tensor(vf::Shape{2, 1, 4, 6}, 184);
  vf::StackCache<double> cache;
  auto y = vf::stack_forward(stack, params, x, &cache);
  ASSERT_EQ(y.shape(), (vf::Shape{2, 3}));
  EXPECT_EQ(vf::stack_forward(stack, params, x, static_cast<vf::StackCache<double>*>(nullptr)), y);
  const auto r = vf::random_tensor(y.shape(), 185);
  vf::ParamSet<double> grads;
  auto gx = vf::stack_backward(stack, cache, r, grads);
  std::vector<vf::GradProbe> probes{{"x", &x, gx}};
  for (auto& [k, v] : params) probes.push_back({k, &v, grads.at(k)});
  auto report = vf::grad_check(
      [&] {
        return vf::project(vf::stack_forward(stack, params, x,
                                             static_cast<vf::StackCache<double>*>(nullptr)),
                           r);
      },
      probes);
  EXPECT_LT(report.max_relative_error, 1e-5) << report.worst_name;
}
