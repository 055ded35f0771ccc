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
#include <algorithm>
#include <set>

#include "archleak/arch.hpp"
#include "gtest/gtest.h"

namespace ad = archleak::ad;
namespace arch = archleak::arch;
using archleak::Rng;
using archleak::Shape;
using archleak::Tensor;
using archleak::nn::ModuleTag;

TEST(ArchSpec, StepOneMatchesBaseline) {
  auto s = arch::spec_for_step(1);
  EXPECT_EQ(s.stage_depths, (std::array<int, 4>{3, 4, 6, 3}));
  EXPECT_EQ(s.stage_channels, (std::array<int, 4>{64, 128, 256, 512}));
  EXPECT_EQ(s.stem.kernel, 7);
  EXPECT_EQ(s.stem.stride, 2);
  EXPECT_TRUE(s.stem.maxpool);
  EXPECT_EQ(s.activation, archleak::nn::Activation::ReLU);
  EXPECT_EQ(s.norm, archleak::nn::NormKind::BatchNorm);
  EXPECT_EQ(s.block_style, arch::BlockStyle::Bottleneck);
}

TEST(ArchSpec, StepFourAppliesPatchify) {
  auto s = arch::spec_for_step(4);
  EXPECT_EQ(s.stem.kernel, 4);
  EXPECT_EQ(s.stem.stride, 4);
  EXPECT_TRUE(s.stem.maxpool);
  EXPECT_EQ(s.stage_channels, (std::array<int, 4>{96, 192, 384, 768}));
  EXPECT_EQ(s.stage_depths, (std::array<int, 4>{3, 3, 9, 3}));
}

TEST(ArchSpec, StepTwelveSwitchesNormAndBias) {
  auto s = arch::spec_for_step(12);
  EXPECT_EQ(s.norm, archleak::nn::NormKind::LayerNorm);
  EXPECT_TRUE(s.conv_bias);
  EXPECT_EQ(s.activation, archleak::nn::Activation::GELU);
  EXPECT_EQ(s.activation_mask, (std::array<bool, 3>{false, true, false}));
  EXPECT_FALSE(s.stem.maxpool);
}

TEST(ArchSpec, ActivationMaskSchedule) {
  for (int k = 1; k <= 9; ++k)
    EXPECT_EQ(arch::spec_for_step(k).activation_mask, (std::array<bool, 3>{true, true, true}))
        << "step " << k;
  for (int k = 10; k <= 14; ++k)
    EXPECT_EQ(arch::spec_for_step(k).activation_mask,
              (std::array<bool, 3>{false, true, false}))
        << "step " << k;
}

TEST(ArchSpec, StepOutOfRangeThrows) {
  EXPECT_THROW(arch::spec_for_step(0), archleak::DomainError);
  EXPECT_THROW(arch::spec_for_step(15), archleak::DomainError);
}

TEST(ArchSpec, LadderLocality) {
  // Fields each step is documented to touch relative to its predecessor.
  const std::map<int, std::set<std::string>> allowed = {
      {2, {"morph_step", "stage_channels"}},
      {3, {"morph_step", "stage_depths"}},
      {4, {"morph_step", "stem"}},
      {5, {"morph_step", "block_style"}},
      {6, {"morph_step", "block_style"}},
      {7, {"morph_step", "block_style", "block_kernel"}},
      {8, {"morph_step", "stem"}},
      {9, {"morph_step", "activation"}},
      {10, {"morph_step", "activation_mask"}},
      {11, {"morph_step", "norm_count"}},
      {12, {"morph_step", "norm", "conv_bias"}},
      {13, {"morph_step", "separate_downsample"}},
      {14, {"morph_step", "stochastic_depth", "layer_scale"}},
  };
  for (int k = 2; k <= 14; ++k) {
    auto diff = arch::diff_fields(arch::spec_for_step(k), arch::spec_for_step(k - 1));
    std::set<std::string> got(diff.begin(), diff.end());
    EXPECT_EQ(got, allowed.at(k)) << "step " << k;
  }
}

TEST(ArchSpec, JsonRoundTrip) {
  for (int k : {1, 6, 12, 14}) {
    auto s = arch::spec_for_step(k);
    auto back = arch::spec_from_json(arch::to_json(s));
    EXPECT_EQ(s, back) << "step " << k;
    EXPECT_EQ(arch::spec_hash(s), arch::spec_hash(back));
  }
  auto v = arch::tiny_vit_spec();
  EXPECT_EQ(v, arch::spec_from_json(arch::to_json(v)));
  EXPECT_NE(arch::spec_hash(v), arch::spec_hash(arch::spec_for_step(1)));
}

TEST(Build, TagPartitionAcrossDeskLadder) {
  for (int k = 1; k <= 14; ++k) {
    auto spec = arch::desk_scale(arch::spec_for_step(k, 4, {3, 16, 16}));
    auto model = arch::build(spec, 0);
    int64_t sum = 0;
    for (const auto& [tag, n] : model.param_counts) sum += n;
    EXPECT_EQ(sum, model.total_params) << "step " << k;
    EXPECT_GT(model.param_counts[ModuleTag::Stem], 0) << "step " << k;
    EXPECT_GT(model.param_counts[ModuleTag::Head], 0) << "step " << k;
    EXPECT_GT(model.param_counts[ModuleTag::Norm], 0) << "step " << k;
  }
}

TEST(Build, TinyViTHasAllFiveRoles) {
  auto model = arch::build(arch::tiny_vit_spec(4, 64, 4, 4), 0);
  for (auto tag : {ModuleTag::Stem, ModuleTag::Attention, ModuleTag::MLP,
                   ModuleTag::Norm, ModuleTag::Head}) {
    EXPECT_GT(model.param_counts[tag], 0) << archleak::nn::tag_name(tag);
  }
  int64_t sum = 0;
  for (const auto& [tag, n] : model.param_counts) sum += n;
  EXPECT_EQ(sum, model.total_params);
}

TEST(Build, ForwardShapeContract) {
  auto model = arch::build(arch::spec_for_step(1, 10, {3, 32, 32}), 0);
  Rng rng(3);
  auto x = ad::constant(Tensor::rand_uniform(rng, {2, 3, 32, 32}));
  auto logits = model.net().forward(x);
  EXPECT_EQ(logits->val.shape, (Shape{2, 10}));

  auto vit = arch::build(arch::tiny_vit_spec(4, 64, 2, 4, 4.0f, 7, {3, 16, 16}), 1);
  auto xv = ad::constant(Tensor::rand_uniform(rng, {3, 3, 16, 16}));
  EXPECT_EQ(vit.net().forward(xv)->val.shape, (Shape{3, 7}));
}

TEST(Build, DeterministicGivenSeed) {
  auto spec = arch::desk_scale(arch::spec_for_step(12, 4, {3, 16, 16}));
  auto a = arch::build(spec, 42);
  auto b = arch::build(spec, 42);
  ASSERT_EQ(a.network->parameters().size(), b.network->parameters().size());
  for (size_t i = 0; i < a.network->parameters().size(); ++i) {
    const auto& pa = a.network->parameters()[i];
    const auto& pb = b.network->parameters()[i];
    EXPECT_EQ(pa.name, pb.name);
    EXPECT_EQ(pa.value->val.data, pb.value->val.data) << pa.name;
  }
  auto c = arch::build(spec, 43);
  bool any_diff = false;
  for (size_t i = 0; i < a.network->parameters().size() && !any_diff; ++i)
    any_diff = a.network->parameters()[i].value->val.data !=
               c.network->parameters()[i].value->val.data;
  EXPECT_TRUE(any_diff);
}

TEST(Build, IndivisibleInputRejected) {
  auto spec = arch::desk_scale(arch::spec_for_step(4, 4, {3, 18, 18}));
  EXPECT_THROW(arch::build(spec, 0), archleak::ShapeError);
  EXPECT_THROW(arch::build(arch::tiny_vit_spec(4, 64, 2, 4, 4.0f, 4, {3, 18, 18}), 0),
               archleak::ShapeError);
}

TEST(ReceptiveField, HandCases) {
  // Single conv k=7, s=2: R = 2*1 + (7-2) = 7.
  EXPECT_EQ(arch::receptive_field_chain({{7, 2}}).total, 7);
  // Two convs k=3, s=2: R = 2*(2*1+1) + 1 = 7.
  EXPECT_EQ(arch::receptive_field_chain({{3, 2}, {3, 2}}).total, 7);
  // ResNet stem: conv7/2 + maxpool3/2 -> 11.
  EXPECT_EQ(arch::receptive_field_chain({{7, 2}, {3, 2}}).total, 11);
}

TEST(ReceptiveField, LadderChainStructure) {
  auto rep = arch::receptive_field(arch::spec_for_step(1));
  ASSERT_GE(rep.per_layer.size(), 2u);
  EXPECT_EQ(rep.per_layer[0].name, "stem.conv");
  EXPECT_EQ(rep.per_layer[1].name, "stem.maxpool");
  EXPECT_FALSE(rep.attention_global);
  EXPECT_GT(rep.total, 11);

  auto rep8 = arch::receptive_field(arch::spec_for_step(8));
  for (const auto& l : rep8.per_layer) EXPECT_NE(l.name, "stem.maxpool");

  auto vit = arch::receptive_field(arch::tiny_vit_spec(4, 64, 4, 4, 4.0f, 10, {3, 32, 32}));
  EXPECT_TRUE(vit.attention_global);
  EXPECT_EQ(vit.total, 32);
}

namespace {

// Gradient-probe oracle: with strictly positive weights and no padding, the
// set of input pixels with nonzero gradient of one interior output unit
// spans exactly the analyzer's receptive field per axis.
void probe_conv_stack(const std::vector<std::pair<int, int>>& ks, uint64_t seed) {
  const auto rep = arch::receptive_field_chain(ks);
  const int64_t rf = rep.total;
  // Make the input wide enough for at least 3 output positions per layer.
  int size = static_cast<int>(rf);
  int64_t stride_prod = 1;
  for (const auto& [k, s] : ks) stride_prod *= s;
  size += static_cast<int>(2 * stride_prod);
  Rng rng(seed);
  auto x = ad::leaf(Tensor::rand_uniform(rng, {1, 1, size, size}, 0.1f, 1.0f), true);
  ad::Value h = x;
  for (const auto& [k, s] : ks) {
    Tensor w = Tensor::rand_uniform(rng, {1, 1, k, k}, 0.1f, 1.0f);
    h = ad::conv2d(h, ad::constant(w), ad::ConvGeom{s, 0, 1});
  }
  const Shape& os = h->val.shape;
  ASSERT_GE(os[2], 2);
  const int ph = os[2] / 2, pw = os[3] / 2;
  ad::Value unit = ad::slice_axis(ad::slice_axis(h, 2, ph, 1), 3, pw, 1);
  ad::Value loss = ad::sum_all(unit);
  auto g = ad::grad(loss, {x})[0]->val;
  int64_t rmin = size, rmax = -1, cmin = size, cmax = -1;
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      if (g.at({0, 0, r, c}) != 0.0f) {
        rmin = std::min<int64_t>(rmin, r);
        rmax = std::max<int64_t>(rmax, r);
        cmin = std::min<int64_t>(cmin, c);
        cmax = std::max<int64_t>(cmax, c);
      }
    }
  }
  EXPECT_EQ(rmax - rmin + 1, rf) << "rows, seed " << seed;
  EXPECT_EQ(cmax - cmin + 1, rf) << "cols, seed " << seed;
}

}  // namespace

TEST(ReceptiveField, GradientProbeOracleOnRandomStacks) {
  Rng pick(2024);
  const int kernels[] = {1, 3, 5, 7};
  for (int trial = 0; trial < 6; ++trial) {
    std::vector<std::pair<int, int>> ks;
    const int depth = 2 + static_cast<int>(pick.randint(3));
    for (int i = 0; i < depth; ++i) {
      ks.emplace_back(kernels[pick.randint(4)], 1 + static_cast<int>(pick.randint(2)));
    }
    probe_conv_stack(ks, 100 + static_cast<uint64_t>(trial));
  }
  // The two hand cases, probed as well.
  probe_conv_stack({{7, 2}}, 7);
  probe_conv_stack({{3, 2}, {3, 2}}, 8);
}
