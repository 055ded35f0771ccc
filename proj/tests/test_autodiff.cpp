/*
 * Copyright 2026 The Archleak Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include <cmath>

#include "archleak/autodiff.hpp"
#include "gradcheck.hpp"
#include "gtest/gtest.h"

namespace ad = archleak::ad;
using archleak::Rng;
using archleak::Shape;
using archleak::Tensor;
using archleak::testing::gradcheck;

namespace {

Tensor rnd(Rng& rng, Shape s, float lo = -1.0f, float hi = 1.0f) {
  return Tensor::rand_uniform(rng, std::move(s), lo, hi);
}

// Fixed random projection to turn any output into a scalar.
ad::Value project(const ad::Value& v, uint64_t seed) {
  Rng rng(seed);
  Tensor w = Tensor::rand_uniform(rng, v->val.shape, -1.0f, 1.0f);
  return ad::sum_all(ad::mul(v, ad::constant(w)));
}

}  // namespace

TEST(Autodiff, ForwardValues) {
  Rng rng(1);
  auto a = ad::leaf(rnd(rng, {2, 3}), true);
  auto b = ad::leaf(rnd(rng, {2, 3}), true);
  auto s = ad::add(a, b);
  for (int64_t i = 0; i < 6; ++i)
    EXPECT_FLOAT_EQ(s->val.data[i], a->val.data[i] + b->val.data[i]);

  auto sm = ad::softmax_lastdim(ad::leaf(rnd(rng, {4, 5}), true));
  for (int r = 0; r < 4; ++r) {
    double sum = 0;
    for (int c = 0; c < 5; ++c) sum += sm->val.at({r, c});
    EXPECT_NEAR(sum, 1.0, 1e-5);
  }

  // GELU reference points from the tanh formulation.
  auto g0 = ad::gelu(ad::scalar(0.0f));
  EXPECT_NEAR(g0->val.data[0], 0.0, 1e-7);
  auto g1 = ad::gelu(ad::scalar(1.0f));
  EXPECT_NEAR(g1->val.data[0], 0.841192, 1e-5);
  auto gm1 = ad::gelu(ad::scalar(-1.0f));
  EXPECT_NEAR(gm1->val.data[0], -0.158808, 1e-5);
}

TEST(Autodiff, ElementwiseGradients) {
  Rng rng(7);
  auto check = [&](const char* name, auto&& make, Shape sa, Shape sb, float lo,
                   float hi) {
    std::vector<Tensor> ins;
    ins.push_back(rnd(rng, sa, lo, hi));
    if (!sb.empty() || sb != Shape{}) {
    }
    if (sb != Shape{-1}) ins.push_back(rnd(rng, sb, lo, hi));
    auto res = gradcheck(
        [&](const std::vector<ad::Value>& v) {
          return project(make(v), 11);
        },
        ins);
    EXPECT_TRUE(res.ok) << name << ": " << res.detail;
  };

  check("add", [](const std::vector<ad::Value>& v) { return ad::add(v[0], v[1]); },
        {3, 4}, {3, 4}, -1, 1);
  check("add_broadcast",
        [](const std::vector<ad::Value>& v) { return ad::add(v[0], v[1]); }, {2, 3, 4},
        {1, 4}, -1, 1);
  check("mul_broadcast",
        [](const std::vector<ad::Value>& v) { return ad::mul(v[0], v[1]); }, {2, 3, 4},
        {3, 1}, -1, 1);
  check("sub", [](const std::vector<ad::Value>& v) { return ad::sub(v[0], v[1]); },
        {5}, {5}, -1, 1);
}

TEST(Autodiff, UnaryGradients) {
  Rng rng(13);
  struct Case {
    const char* name;
    std::function<ad::Value(const ad::Value&)> f;
    float lo, hi;
  };
  const Case cases[] = {
      {"exp", [](const ad::Value& x) { return ad::exp_v(x); }, -1.0f, 1.0f},
      {"log", [](const ad::Value& x) { return ad::log_v(x); }, 0.5f, 2.0f},
      {"tanh", [](const ad::Value& x) { return ad::tanh_v(x); }, -1.5f, 1.5f},
      {"pow2", [](const ad::Value& x) { return ad::pow_const(x, 2.0f); }, -1.0f, 1.0f},
      {"rsqrt", [](const ad::Value& x) { return ad::pow_const(x, -0.5f); }, 0.5f, 2.0f},
      {"relu", [](const ad::Value& x) { return ad::relu(x); }, 0.2f, 1.0f},
      {"abs", [](const ad::Value& x) { return ad::abs_v(x); }, 0.2f, 1.0f},
      {"gelu", [](const ad::Value& x) { return ad::gelu(x); }, -1.5f, 1.5f},
      {"softmax", [](const ad::Value& x) { return ad::softmax_lastdim(x); }, -1, 1},
      {"log_softmax", [](const ad::Value& x) { return ad::log_softmax_lastdim(x); },
       -1, 1},
  };
  for (const auto& c : cases) {
    auto res = gradcheck(
        [&](const std::vector<ad::Value>& v) { return project(c.f(v[0]), 3); },
        {rnd(rng, {2, 6}, c.lo, c.hi)});
    EXPECT_TRUE(res.ok) << c.name << ": " << res.detail;
  }
}

TEST(Autodiff, ReductionAndShapeGradients) {
  Rng rng(17);
  auto res = gradcheck(
      [](const std::vector<ad::Value>& v) {
        return project(ad::sum_axes(v[0], {0, 2}, false), 5);
      },
      {rnd(rng, {3, 4, 2})});
  EXPECT_TRUE(res.ok) << "sum_axes: " << res.detail;

  res = gradcheck(
      [](const std::vector<ad::Value>& v) {
        return project(ad::broadcast_to(v[0], {4, 3, 5}), 6);
      },
      {rnd(rng, {3, 1})});
  EXPECT_TRUE(res.ok) << "broadcast_to: " << res.detail;

  res = gradcheck(
      [](const std::vector<ad::Value>& v) {
        return project(ad::permute(v[0], {2, 0, 1}), 7);
      },
      {rnd(rng, {2, 3, 4})});
  EXPECT_TRUE(res.ok) << "permute: " << res.detail;

  res = gradcheck(
      [](const std::vector<ad::Value>& v) {
        return project(ad::slice_axis(v[0], 1, 1, 2), 8);
      },
      {rnd(rng, {3, 5})});
  EXPECT_TRUE(res.ok) << "slice: " << res.detail;

  res = gradcheck(
      [](const std::vector<ad::Value>& v) {
        return project(ad::pad_axis(v[0], 0, 2, 1), 9);
      },
      {rnd(rng, {3, 2})});
  EXPECT_TRUE(res.ok) << "pad: " << res.detail;
}

TEST(Autodiff, MatmulGradients) {
  Rng rng(23);
  auto res = gradcheck(
      [](const std::vector<ad::Value>& v) {
        return project(ad::matmul(v[0], v[1]), 4);
      },
      {rnd(rng, {3, 4}), rnd(rng, {4, 2})});
  EXPECT_TRUE(res.ok) << "matmul2d: " << res.detail;

  res = gradcheck(
      [](const std::vector<ad::Value>& v) {
        return project(ad::matmul(v[0], v[1]), 4);
      },
      {rnd(rng, {2, 3, 4}), rnd(rng, {2, 4, 2})});
  EXPECT_TRUE(res.ok) << "matmul3d: " << res.detail;
}

TEST(Autodiff, ConvGradients) {
  Rng rng(29);
  struct G {
    int stride, pad, groups;
    Shape xs, ws;
  };
  const G cases[] = {
      {1, 1, 1, {2, 3, 5, 5}, {4, 3, 3, 3}},
      {2, 3, 1, {1, 2, 9, 9}, {3, 2, 7, 7}},
      {4, 0, 1, {1, 3, 8, 8}, {5, 3, 4, 4}},
      {1, 3, 4, {1, 4, 6, 6}, {4, 1, 7, 7}},  // depthwise
      {2, 1, 2, {1, 4, 5, 5}, {6, 2, 3, 3}},  // grouped strided
  };
  for (const auto& c : cases) {
    ad::ConvGeom geom{c.stride, c.pad, c.groups};
    auto res = gradcheck(
        [&](const std::vector<ad::Value>& v) {
          return project(ad::conv2d(v[0], v[1], geom), 21);
        },
        {rnd(rng, c.xs), rnd(rng, c.ws)});
    EXPECT_TRUE(res.ok) << "conv s" << c.stride << " p" << c.pad << " g" << c.groups
                        << ": " << res.detail;
  }
}

TEST(Autodiff, MaxPoolGradient) {
  Rng rng(31);
  auto res = gradcheck(
      [](const std::vector<ad::Value>& v) {
        return project(ad::maxpool2d(v[0], 3, 2, 1), 2);
      },
      {rnd(rng, {1, 2, 7, 7})},
      // Small eps so perturbations do not flip argmax choices.
      1e-3, 3e-2, 3e-3);
  EXPECT_TRUE(res.ok) << "maxpool: " << res.detail;
}

// Differentiating a function of a gradient: d/dx of ||df/dx||^2-style terms.
// This is the exact pattern gradient inversion relies on.
TEST(Autodiff, SecondOrderThroughGrad) {
  Rng rng(37);

  // f(x, w) = sum(tanh(x w)); s = sum(project(grad_w f)^2) is a function of x.
  auto second = [&](auto&& loss_fn, std::vector<Tensor> ins, const char* name) {
    auto res = gradcheck(
        [&](const std::vector<ad::Value>& v) {
          ad::Value l = loss_fn(v);
          auto gs = ad::grad(l, {v[1]});
          return ad::sum_all(ad::mul(gs[0], gs[0]));
        },
        std::move(ins), 5e-3, 5e-2, 5e-3);
    EXPECT_TRUE(res.ok) << name << ": " << res.detail;
  };

  second(
      [](const std::vector<ad::Value>& v) {
        return ad::sum_all(ad::tanh_v(ad::matmul(v[0], v[1])));
      },
      {rnd(rng, {2, 3}), rnd(rng, {3, 2})}, "matmul-tanh");

  ad::ConvGeom geom{2, 1, 1};
  second(
      [&](const std::vector<ad::Value>& v) {
        return ad::sum_all(ad::gelu(ad::conv2d(v[0], v[1], geom)));
      },
      {rnd(rng, {1, 2, 5, 5}), rnd(rng, {2, 2, 3, 3})}, "conv-gelu");

  second(
      [](const std::vector<ad::Value>& v) {
        auto y = ad::maxpool2d(ad::mul(v[0], v[1]), 2, 2, 0);
        return ad::sum_all(ad::mul(y, y));
      },
      {rnd(rng, {1, 1, 4, 4}, 0.3f, 1.0f), rnd(rng, {1, 1, 4, 4}, 0.3f, 1.0f)},
      "maxpool-square");

  second(
      [](const std::vector<ad::Value>& v) {
        return ad::cross_entropy_mean(
            ad::matmul(v[0], v[1]),
            ad::constant(Tensor({2, 2}, {1.f, 0.f, 0.f, 1.f})));
      },
      {rnd(rng, {2, 3}), rnd(rng, {3, 2})}, "ce-softmax");
}

TEST(Autodiff, CrossEntropyMatchesClosedForm) {
  // Uniform logits over C classes -> CE = log(C).
  Tensor logits({2, 4}, 0.0f);
  Tensor onehot({2, 4});
  onehot.at({0, 1}) = 1.0f;
  onehot.at({1, 3}) = 1.0f;
  auto ce = ad::cross_entropy_mean(ad::constant(logits), ad::constant(onehot));
  EXPECT_NEAR(ce->val.data[0], std::log(4.0), 1e-6);
}

TEST(Autodiff, GradAccumulatesAcrossReuse) {
  // y = x*x + x -> dy/dx = 2x + 1 with x reused by two ops.
  auto x = ad::leaf(Tensor::scalar(3.0f), true);
  auto y = ad::add(ad::mul(x, x), x);
  auto g = ad::grad(y, {x});
  EXPECT_FLOAT_EQ(g[0]->val.data[0], 7.0f);
}

TEST(Autodiff, ConstantSubgraphsArePruned) {
  auto a = ad::constant(Tensor::scalar(2.0f));
  auto b = ad::constant(Tensor::scalar(3.0f));
  auto c = ad::mul(a, b);
  EXPECT_FALSE(c->requires_grad);
  EXPECT_TRUE(c->parents.empty());
}

TEST(Autodiff, ZeroGradForUnreachedLeaf) {
  auto x = ad::leaf(Tensor::scalar(1.0f), true);
  auto z = ad::leaf(Tensor::scalar(5.0f), true);
  auto y = ad::mul(x, x);
  auto g = ad::grad(y, {z});
  EXPECT_FLOAT_EQ(g[0]->val.data[0], 0.0f);
}
