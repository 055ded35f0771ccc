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
#ifndef ARCHLEAK_ARCH_HPP_
#define ARCHLEAK_ARCH_HPP_

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "archleak/hashio.hpp"
#include "archleak/nn.hpp"
#include "json.hpp"

// Architecture laboratory: declarative specs for the ResNet-50 -> ConvNeXt-T
// morph ladder and a desk-scale ViT, deterministic construction with a total
// parameter-role tagging, and receptive-field analysis.
namespace archleak::arch {

using nn::Activation;
using nn::ModuleTag;
using nn::NormKind;

enum class Family { MorphLadder, TinyViT };
enum class BlockStyle { Bottleneck, DepthwiseBottleneck, InvertedDepthwise, ConvNeXtBlock };
enum class NormCount { Full, Reduced };

struct StemSpec {
  int kernel = 7;
  int stride = 2;
  bool maxpool = true;
  bool operator==(const StemSpec&) const = default;
};

struct VitSpec {
  int patch = 4;
  int dim = 64;
  int depth = 4;
  int heads = 4;
  float mlp_ratio = 4.0f;
  bool operator==(const VitSpec&) const = default;
};

struct ArchSpec {
  Family family = Family::MorphLadder;
  int morph_step = 1;
  std::array<int, 4> stage_depths{3, 4, 6, 3};
  std::array<int, 4> stage_channels{64, 128, 256, 512};
  StemSpec stem;
  BlockStyle block_style = BlockStyle::Bottleneck;
  int block_kernel = 3;
  Activation activation = Activation::ReLU;
  std::array<bool, 3> activation_mask{true, true, true};
  NormKind norm = NormKind::BatchNorm;
  NormCount norm_count = NormCount::Full;
  bool conv_bias = false;
  bool separate_downsample = false;
  bool stochastic_depth = false;
  bool layer_scale = false;
  VitSpec vit;
  int num_classes = 10;
  std::array<int, 3> input_shape{3, 32, 32};

  bool operator==(const ArchSpec&) const = default;
};

// --- enum <-> string -------------------------------------------------------

inline const char* to_string(Family f) {
  return f == Family::MorphLadder ? "MorphLadder" : "TinyViT";
}
inline const char* to_string(BlockStyle b) {
  switch (b) {
    case BlockStyle::Bottleneck: return "Bottleneck";
    case BlockStyle::DepthwiseBottleneck: return "DepthwiseBottleneck";
    case BlockStyle::InvertedDepthwise: return "InvertedDepthwise";
    case BlockStyle::ConvNeXtBlock: return "ConvNeXtBlock";
  }
  return "?";
}
inline const char* to_string(Activation a) {
  return a == Activation::ReLU ? "ReLU" : "GELU";
}
inline const char* to_string(NormKind n) {
  return n == NormKind::BatchNorm ? "BatchNorm" : "LayerNorm";
}
inline const char* to_string(NormCount n) {
  return n == NormCount::Full ? "Full" : "Reduced";
}

inline Family family_from(const std::string& s) {
  if (s == "MorphLadder") return Family::MorphLadder;
  if (s == "TinyViT") return Family::TinyViT;
  throw ConfigError("unknown family: " + s);
}
inline BlockStyle block_style_from(const std::string& s) {
  if (s == "Bottleneck") return BlockStyle::Bottleneck;
  if (s == "DepthwiseBottleneck") return BlockStyle::DepthwiseBottleneck;
  if (s == "InvertedDepthwise") return BlockStyle::InvertedDepthwise;
  if (s == "ConvNeXtBlock") return BlockStyle::ConvNeXtBlock;
  throw ConfigError("unknown block style: " + s);
}
inline Activation activation_from(const std::string& s) {
  if (s == "ReLU") return Activation::ReLU;
  if (s == "GELU") return Activation::GELU;
  throw ConfigError("unknown activation: " + s);
}
inline NormKind norm_from(const std::string& s) {
  if (s == "BatchNorm") return NormKind::BatchNorm;
  if (s == "LayerNorm") return NormKind::LayerNorm;
  throw ConfigError("unknown norm: " + s);
}
inline NormCount norm_count_from(const std::string& s) {
  if (s == "Full") return NormCount::Full;
  if (s == "Reduced") return NormCount::Reduced;
  throw ConfigError("unknown norm count: " + s);
}

// --- serialization ---------------------------------------------------------

inline nlohmann::json to_json(const ArchSpec& s) {
  nlohmann::json j;
  j["family"] = to_string(s.family);
  j["morph_step"] = s.morph_step;
  j["stage_depths"] = s.stage_depths;
  j["stage_channels"] = s.stage_channels;
  j["stem"] = {{"kernel", s.stem.kernel}, {"stride", s.stem.stride}, {"maxpool", s.stem.maxpool}};
  j["block_style"] = to_string(s.block_style);
  j["block_kernel"] = s.block_kernel;
  j["activation"] = to_string(s.activation);
  j["activation_mask"] = s.activation_mask;
  j["norm"] = to_string(s.norm);
  j["norm_count"] = to_string(s.norm_count);
  j["conv_bias"] = s.conv_bias;
  j["separate_downsample"] = s.separate_downsample;
  j["stochastic_depth"] = s.stochastic_depth;
  j["layer_scale"] = s.layer_scale;
  j["vit"] = {{"patch", s.vit.patch}, {"dim", s.vit.dim},     {"depth", s.vit.depth},
              {"heads", s.vit.heads}, {"mlp_ratio", s.vit.mlp_ratio}};
  j["num_classes"] = s.num_classes;
  j["input_shape"] = s.input_shape;
  return j;
}

inline ArchSpec spec_from_json(const nlohmann::json& j) {
  ArchSpec s;
  s.family = family_from(j.at("family").get<std::string>());
  s.morph_step = j.value("morph_step", 1);
  auto arr4 = [&](const char* key, std::array<int, 4>& out) {
    auto v = j.at(key).get<std::vector<int>>();
    if (v.size() != 4) throw ConfigError(std::string(key) + " must have 4 entries");
    std::copy(v.begin(), v.end(), out.begin());
  };
  arr4("stage_depths", s.stage_depths);
  arr4("stage_channels", s.stage_channels);
  const auto& st = j.at("stem");
  s.stem = {st.at("kernel").get<int>(), st.at("stride").get<int>(),
            st.at("maxpool").get<bool>()};
  s.block_style = block_style_from(j.at("block_style").get<std::string>());
  s.block_kernel = j.at("block_kernel").get<int>();
  s.activation = activation_from(j.at("activation").get<std::string>());
  auto mask = j.at("activation_mask").get<std::vector<bool>>();
  if (mask.size() != 3) throw ConfigError("activation_mask must have 3 entries");
  for (int i = 0; i < 3; ++i) s.activation_mask[static_cast<size_t>(i)] = mask[static_cast<size_t>(i)];
  s.norm = norm_from(j.at("norm").get<std::string>());
  s.norm_count = norm_count_from(j.at("norm_count").get<std::string>());
  s.conv_bias = j.at("conv_bias").get<bool>();
  s.separate_downsample = j.at("separate_downsample").get<bool>();
  s.stochastic_depth = j.at("stochastic_depth").get<bool>();
  s.layer_scale = j.at("layer_scale").get<bool>();
  const auto& v = j.at("vit");
  s.vit = {v.at("patch").get<int>(), v.at("dim").get<int>(), v.at("depth").get<int>(),
           v.at("heads").get<int>(), v.at("mlp_ratio").get<float>()};
  s.num_classes = j.at("num_classes").get<int>();
  auto in = j.at("input_shape").get<std::vector<int>>();
  if (in.size() != 3) throw ConfigError("input_shape must have 3 entries");
  std::copy(in.begin(), in.end(), s.input_shape.begin());
  return s;
}

inline uint64_t spec_hash(const ArchSpec& s) { return fnv1a64(to_json(s).dump()); }

inline void validate(const ArchSpec& s) {
  for (int d : s.stage_depths)
    if (d <= 0) throw DomainError("stage_depths entries must be positive");
  for (int c : s.stage_channels)
    if (c <= 0) throw DomainError("stage_channels entries must be positive");
  if (s.num_classes <= 0) throw DomainError("num_classes must be positive");
  for (int d : s.input_shape)
    if (d <= 0) throw DomainError("input_shape entries must be positive");
  if (s.family == Family::TinyViT) {
    if (s.vit.patch <= 0 || s.vit.dim <= 0 || s.vit.depth <= 0 || s.vit.heads <= 0)
      throw DomainError("vit fields must be positive");
    if (s.vit.dim % s.vit.heads != 0)
      throw DomainError("vit.dim must be divisible by vit.heads");
  }
  if (s.stem.kernel <= 0 || s.stem.stride <= 0)
    throw DomainError("stem kernel/stride must be positive");
}

// Names of ArchSpec fields on which two specs differ (used by the ladder
// locality checks and defense audits).
inline std::vector<std::string> diff_fields(const ArchSpec& a, const ArchSpec& b) {
  std::vector<std::string> out;
  if (a.family != b.family) out.push_back("family");
  if (a.morph_step != b.morph_step) out.push_back("morph_step");
  if (a.stage_depths != b.stage_depths) out.push_back("stage_depths");
  if (a.stage_channels != b.stage_channels) out.push_back("stage_channels");
  if (!(a.stem == b.stem)) out.push_back("stem");
  if (a.block_style != b.block_style) out.push_back("block_style");
  if (a.block_kernel != b.block_kernel) out.push_back("block_kernel");
  if (a.activation != b.activation) out.push_back("activation");
  if (a.activation_mask != b.activation_mask) out.push_back("activation_mask");
  if (a.norm != b.norm) out.push_back("norm");
  if (a.norm_count != b.norm_count) out.push_back("norm_count");
  if (a.conv_bias != b.conv_bias) out.push_back("conv_bias");
  if (a.separate_downsample != b.separate_downsample) out.push_back("separate_downsample");
  if (a.stochastic_depth != b.stochastic_depth) out.push_back("stochastic_depth");
  if (a.layer_scale != b.layer_scale) out.push_back("layer_scale");
  if (!(a.vit == b.vit)) out.push_back("vit");
  if (a.num_classes != b.num_classes) out.push_back("num_classes");
  if (a.input_shape != b.input_shape) out.push_back("input_shape");
  return out;
}

// --- the 14-step ladder ----------------------------------------------------

// Declarative spec for one rung of the ResNet-50 -> ConvNeXt-T ladder.
// Step k differs from step k-1 only in the fields that step changes:
//   1 baseline ResNet-50          8 stem loses act+maxpool
//   2 channels (96,192,384,768)   9 ReLU -> GELU
//   3 depths (3,3,9,3)           10 one activation per block
//   4 patchify stem 4x4/4        11 one norm per block
//   5 depthwise middle conv      12 BN -> LN, conv biases on
//   6 inverted bottleneck        13 separated downsampling
//   7 depthwise-first, kernel 7  14 stochastic depth + layer scale
inline ArchSpec spec_for_step(int step, int num_classes = 10,
                              std::array<int, 3> input_shape = {3, 32, 32}) {
  if (step < 1 || step > 14)
    throw DomainError("morph step must be in 1..14, got " + std::to_string(step));
  ArchSpec s;
  s.family = Family::MorphLadder;
  s.morph_step = step;
  s.num_classes = num_classes;
  s.input_shape = input_shape;
  if (step >= 2) s.stage_channels = {96, 192, 384, 768};
  if (step >= 3) s.stage_depths = {3, 3, 9, 3};
  if (step >= 4) s.stem = {4, 4, true};
  if (step >= 5) s.block_style = BlockStyle::DepthwiseBottleneck;
  if (step >= 6) s.block_style = BlockStyle::InvertedDepthwise;
  if (step >= 7) {
    s.block_style = BlockStyle::ConvNeXtBlock;
    s.block_kernel = 7;
  }
  if (step >= 8) s.stem.maxpool = false;
  if (step >= 9) s.activation = Activation::GELU;
  if (step >= 10) s.activation_mask = {false, true, false};
  if (step >= 11) s.norm_count = NormCount::Reduced;
  if (step >= 12) {
    s.norm = NormKind::LayerNorm;
    s.conv_bias = true;
  }
  if (step >= 13) s.separate_downsample = true;
  if (step >= 14) {
    s.stochastic_depth = true;
    s.layer_scale = true;
  }
  return s;
}

inline ArchSpec tiny_vit_spec(int patch = 4, int dim = 64, int depth = 4, int heads = 4,
                              float mlp_ratio = 4.0f, int num_classes = 10,
                              std::array<int, 3> input_shape = {3, 32, 32}) {
  ArchSpec s;
  s.family = Family::TinyViT;
  s.vit = {patch, dim, depth, heads, mlp_ratio};
  s.num_classes = num_classes;
  s.input_shape = input_shape;
  return s;
}

// Shrink a ladder spec to desk scale, preserving every micro design under
// study (stem geometry, block style, activations, norms, biases).
inline ArchSpec desk_scale(ArchSpec s, std::array<int, 4> depths = {1, 1, 1, 1},
                           std::array<int, 4> channels = {8, 16, 24, 32}) {
  s.stage_depths = depths;
  s.stage_channels = channels;
  return s;
}

// --- tagged models ---------------------------------------------------------

struct TaggedModel {
  std::shared_ptr<nn::Network> network;
  ArchSpec spec;
  std::map<std::string, ModuleTag> tags;
  std::map<ModuleTag, int64_t> param_counts;
  int64_t total_params = 0;
  uint64_t hash = 0;

  nn::Network& net() { return *network; }
};

namespace detail {

struct LadderBlock {
  nn::Conv2dLayer conv1, conv2, conv3;
  std::optional<nn::Conv2dLayer> proj;
  std::optional<nn::Norm2d> norm1, norm2, norm3, proj_norm;
  ad::Value layer_scale;  // [1,C,1,1] or null
  std::array<bool, 3> act_mask{};
  Activation act = Activation::ReLU;
  bool stochastic_depth = false;
  float drop_rate = 0.1f;

  ad::Value forward(const ad::Value& x, bool train, Rng* droprng) {
    ad::Value shortcut = x;
    if (proj) {
      shortcut = proj->forward(x);
      if (proj_norm) shortcut = proj_norm->forward(shortcut, train);
    }
    ad::Value h = conv1.forward(x);
    if (norm1) h = norm1->forward(h, train);
    if (act_mask[0]) h = nn::activate(h, act);
    h = conv2.forward(h);
    if (norm2) h = norm2->forward(h, train);
    if (act_mask[1]) h = nn::activate(h, act);
    h = conv3.forward(h);
    if (norm3) h = norm3->forward(h, train);
    if (layer_scale) h = ad::mul(h, layer_scale);
    if (stochastic_depth && train && droprng) {
      // Batch-level stochastic depth: drop the residual branch with
      // probability drop_rate, otherwise rescale to keep expectation.
      if (droprng->uniform() < drop_rate) {
        h = ad::mul_scalar(h, 0.0f);
      } else {
        h = ad::mul_scalar(h, 1.0f / (1.0f - drop_rate));
      }
    }
    ad::Value y = ad::add(shortcut, h);
    if (act_mask[2]) y = nn::activate(y, act);
    return y;
  }
};

struct Downsample {
  nn::Norm2d norm;
  nn::Conv2dLayer conv;
};

}  // namespace detail

// Realizes a MorphLadder spec. Stage layout mirrors the table the ladder is
// taken from: stem (conv [+norm, act, maxpool]), four stages of residual
// blocks, global average pooling, linear head. Downsampling sits in the
// first block of stages 2-4 until `separate_downsample` moves it between
// stages (norm + 2x2/2 conv).
class LadderNet : public nn::Network {
 public:
  LadderNet(const ArchSpec& spec, uint64_t seed) : spec_(spec) {
    validate(spec);
    if (spec.family != Family::MorphLadder)
      throw ConfigError("LadderNet requires a MorphLadder spec");
    Rng rng = Rng::stream(seed, 0x1adde7);
    const int in_ch = spec.input_shape[0];
    // Patchify stems tile the input; reject inputs they cannot tile.
    if (spec.stem.kernel == spec.stem.stride) {
      if (spec.input_shape[1] % spec.stem.stride != 0 ||
          spec.input_shape[2] % spec.stem.stride != 0)
        throw ShapeError("input " + std::to_string(spec.input_shape[1]) + "x" +
                         std::to_string(spec.input_shape[2]) +
                         " is not divisible by the stem stride " +
                         std::to_string(spec.stem.stride));
    }
    const int stem_pad = spec.stem.kernel == spec.stem.stride ? 0 : spec.stem.kernel / 2;
    stem_conv_ = nn::Conv2dLayer::create(reg, "stem.conv", in_ch, spec.stage_channels[0],
                                         spec.stem.kernel, spec.stem.stride, stem_pad,
                                         1, spec.conv_bias, ModuleTag::Stem, rng);
    stem_norm_ = nn::Norm2d::create(reg, "stem.norm", spec.norm, spec.stage_channels[0],
                                    ModuleTag::Stem);

    int ch = spec.stage_channels[0];
    for (int s = 0; s < 4; ++s) {
      const int width = spec.stage_channels[static_cast<size_t>(s)];
      const int out_ch = stage_out_channels(spec.block_style, width);
      if (spec.separate_downsample && s > 0) {
        detail::Downsample ds;
        const std::string base = "ds" + std::to_string(s);
        ds.norm = nn::Norm2d::create(reg, base + ".norm", spec.norm, ch, ModuleTag::Norm);
        ds.conv = nn::Conv2dLayer::create(reg, base + ".conv", ch, out_ch, 2, 2, 0, 1,
                                          spec.conv_bias, ModuleTag::Other, rng);
        downsamples_[static_cast<size_t>(s)] = std::move(ds);
        ch = out_ch;
      }
      for (int b = 0; b < spec.stage_depths[static_cast<size_t>(s)]; ++b) {
        const bool stride2 = !spec.separate_downsample && s > 0 && b == 0;
        blocks_.push_back(make_block(s, b, ch, width, stride2 ? 2 : 1, rng));
        ch = out_ch;
      }
    }
    feature_dim_ = ch;
    head_ = nn::LinearLayer::create(reg, "head", ch, spec.num_classes, true,
                                    ModuleTag::Head, rng);
  }

  ad::Value features(const ad::Value& x, bool train, Rng* droprng) override {
    check_input(x);
    ad::Value h = stem_conv_.forward(x);
    h = stem_norm_.forward(h, train);
    if (spec_.stem.maxpool) {
      h = nn::activate(h, spec_.activation);
      h = ad::maxpool2d(h, 3, 2, 1);
    }
    size_t bi = 0;
    for (int s = 0; s < 4; ++s) {
      if (auto& ds = downsamples_[static_cast<size_t>(s)]) {
        h = ds->norm.forward(h, train);
        h = ds->conv.forward(h);
      }
      for (int b = 0; b < spec_.stage_depths[static_cast<size_t>(s)]; ++b)
        h = blocks_[bi++].forward(h, train, droprng);
    }
    // Global average pool.
    const Shape& hs = h->val.shape;
    const float inv = 1.0f / static_cast<float>(hs[2] * hs[3]);
    ad::Value pooled = ad::mul_scalar(ad::sum_axes(h, {2, 3}, false), inv);
    return pooled;  // [B, C]
  }

  ad::Value head(const ad::Value& feats) override { return head_.forward(feats); }
  int feature_dim() const override { return feature_dim_; }

  static int stage_out_channels(BlockStyle style, int width) {
    switch (style) {
      case BlockStyle::Bottleneck:
      case BlockStyle::DepthwiseBottleneck:
        return 4 * width;
      case BlockStyle::InvertedDepthwise:
      case BlockStyle::ConvNeXtBlock:
        return width;
    }
    return width;
  }

 private:
  void check_input(const ad::Value& x) const {
    const Shape& s = x->val.shape;
    if (s.size() != 4 || s[1] != spec_.input_shape[0] || s[2] != spec_.input_shape[1] ||
        s[3] != spec_.input_shape[2])
      throw ShapeError("input " + shape_str(s) + " does not match spec input (" +
                       std::to_string(spec_.input_shape[0]) + "," +
                       std::to_string(spec_.input_shape[1]) + "," +
                       std::to_string(spec_.input_shape[2]) + ")");
  }

  detail::LadderBlock make_block(int stage, int index, int in_ch, int width, int stride,
                                 Rng& rng) {
    const ArchSpec& sp = spec_;
    const int out_ch = stage_out_channels(sp.block_style, width);
    const int hidden = 4 * width;
    const std::string base = "s" + std::to_string(stage) + ".b" + std::to_string(index);
    detail::LadderBlock blk;
    blk.act = sp.activation;
    blk.act_mask = sp.activation_mask;
    blk.stochastic_depth = sp.stochastic_depth;

    const int k = sp.block_kernel;
    const bool bias = sp.conv_bias;
    int c1_out = 0, c2_out = 0;
    switch (sp.block_style) {
      case BlockStyle::Bottleneck:
        blk.conv1 = nn::Conv2dLayer::create(reg, base + ".c1", in_ch, width, 1, 1, 0, 1,
                                            bias, ModuleTag::Other, rng);
        blk.conv2 = nn::Conv2dLayer::create(reg, base + ".c2", width, width, k, stride,
                                            k / 2, 1, bias, ModuleTag::Other, rng);
        blk.conv3 = nn::Conv2dLayer::create(reg, base + ".c3", width, out_ch, 1, 1, 0, 1,
                                            bias, ModuleTag::Other, rng);
        c1_out = width;
        c2_out = width;
        break;
      case BlockStyle::DepthwiseBottleneck:
        blk.conv1 = nn::Conv2dLayer::create(reg, base + ".c1", in_ch, width, 1, 1, 0, 1,
                                            bias, ModuleTag::Other, rng);
        blk.conv2 = nn::Conv2dLayer::create(reg, base + ".c2", width, width, k, stride,
                                            k / 2, width, bias, ModuleTag::Other, rng);
        blk.conv3 = nn::Conv2dLayer::create(reg, base + ".c3", width, out_ch, 1, 1, 0, 1,
                                            bias, ModuleTag::Other, rng);
        c1_out = width;
        c2_out = width;
        break;
      case BlockStyle::InvertedDepthwise:
        blk.conv1 = nn::Conv2dLayer::create(reg, base + ".c1", in_ch, hidden, 1, 1, 0, 1,
                                            bias, ModuleTag::Other, rng);
        blk.conv2 = nn::Conv2dLayer::create(reg, base + ".c2", hidden, hidden, k, stride,
                                            k / 2, hidden, bias, ModuleTag::Other, rng);
        blk.conv3 = nn::Conv2dLayer::create(reg, base + ".c3", hidden, out_ch, 1, 1, 0,
                                            1, bias, ModuleTag::Other, rng);
        c1_out = hidden;
        c2_out = hidden;
        break;
      case BlockStyle::ConvNeXtBlock:
        blk.conv1 = nn::Conv2dLayer::create(reg, base + ".c1", in_ch, in_ch, k, stride,
                                            k / 2, in_ch, bias, ModuleTag::Other, rng);
        blk.conv2 = nn::Conv2dLayer::create(reg, base + ".c2", in_ch, hidden, 1, 1, 0, 1,
                                            bias, ModuleTag::Other, rng);
        blk.conv3 = nn::Conv2dLayer::create(reg, base + ".c3", hidden, out_ch, 1, 1, 0,
                                            1, bias, ModuleTag::Other, rng);
        c1_out = in_ch;
        c2_out = hidden;
        break;
    }
    blk.norm1 = nn::Norm2d::create(reg, base + ".n1", sp.norm, c1_out, ModuleTag::Norm);
    if (sp.norm_count == NormCount::Full) {
      blk.norm2 = nn::Norm2d::create(reg, base + ".n2", sp.norm, c2_out, ModuleTag::Norm);
      blk.norm3 = nn::Norm2d::create(reg, base + ".n3", sp.norm, out_ch, ModuleTag::Norm);
    }
    if (in_ch != out_ch || stride != 1) {
      blk.proj = nn::Conv2dLayer::create(reg, base + ".proj", in_ch, out_ch, 1, stride,
                                         0, 1, bias, ModuleTag::Other, rng);
      if (sp.norm_count == NormCount::Full)
        blk.proj_norm =
            nn::Norm2d::create(reg, base + ".projn", sp.norm, out_ch, ModuleTag::Norm);
    }
    if (sp.layer_scale) {
      blk.layer_scale =
          reg.add(base + ".ls", Tensor({1, out_ch, 1, 1}, 1e-6f), ModuleTag::Other);
    }
    return blk;
  }

  ArchSpec spec_;
  nn::Conv2dLayer stem_conv_;
  nn::Norm2d stem_norm_;
  std::vector<detail::LadderBlock> blocks_;
  std::array<std::optional<detail::Downsample>, 4> downsamples_;
  nn::LinearLayer head_;
  int feature_dim_ = 0;
};

// A desk-scale ViT with the module layout its segmentation follows:
// patch + position embeddings (Stem), pre-norm transformer blocks with
// multi-head attention (Attention) and feed-forward layers (MLP), the
// pre-attention/pre-MLP normalizations (Norm), and the final norm +
// classifier (Head). Mean pooling over tokens stands in for a class token.
class TinyViTNet : public nn::Network {
 public:
  TinyViTNet(const ArchSpec& spec, uint64_t seed) : spec_(spec) {
    validate(spec);
    if (spec.family != Family::TinyViT)
      throw ConfigError("TinyViTNet requires a TinyViT spec");
    if (spec.input_shape[1] % spec.vit.patch != 0 ||
        spec.input_shape[2] % spec.vit.patch != 0)
      throw ShapeError("input " + std::to_string(spec.input_shape[1]) + "x" +
                       std::to_string(spec.input_shape[2]) +
                       " is not divisible by the patch size " +
                       std::to_string(spec.vit.patch));
    Rng rng = Rng::stream(seed, 0x714177);
    const int d = spec.vit.dim;
    tokens_ = (spec.input_shape[1] / spec.vit.patch) * (spec.input_shape[2] / spec.vit.patch);
    patch_ = nn::Conv2dLayer::create(reg, "stem.patch", spec.input_shape[0], d,
                                     spec.vit.patch, spec.vit.patch, 0, 1, true,
                                     ModuleTag::Stem, rng);
    pos_ = reg.add("stem.pos", Tensor::randn(rng, {1, tokens_, d}, 0.02f),
                   ModuleTag::Stem);
    const int mlp_dim = static_cast<int>(std::lround(spec.vit.mlp_ratio * d));
    for (int i = 0; i < spec.vit.depth; ++i) {
      Block b;
      const std::string base = "blk" + std::to_string(i);
      b.ln1 = nn::LayerNormTokens::create(reg, base + ".ln1", d, ModuleTag::Norm);
      b.attn = nn::AttentionLayer::create(reg, base + ".attn", d, spec.vit.heads,
                                          ModuleTag::Attention, rng);
      b.ln2 = nn::LayerNormTokens::create(reg, base + ".ln2", d, ModuleTag::Norm);
      b.fc1 = nn::LinearLayer::create(reg, base + ".fc1", d, mlp_dim, true,
                                      ModuleTag::MLP, rng);
      b.fc2 = nn::LinearLayer::create(reg, base + ".fc2", mlp_dim, d, true,
                                      ModuleTag::MLP, rng);
      blocks_.push_back(std::move(b));
    }
    final_ln_ = nn::LayerNormTokens::create(reg, "final_ln", d, ModuleTag::Head);
    head_ = nn::LinearLayer::create(reg, "head", d, spec.num_classes, true,
                                    ModuleTag::Head, rng);
  }

  ad::Value features(const ad::Value& x, bool train, Rng* droprng) override {
    (void)train;
    (void)droprng;
    const Shape& s = x->val.shape;
    if (s.size() != 4 || s[1] != spec_.input_shape[0] || s[2] != spec_.input_shape[1] ||
        s[3] != spec_.input_shape[2])
      throw ShapeError("input " + shape_str(s) + " does not match the ViT spec");
    const int B = s[0], d = spec_.vit.dim;
    ad::Value h = patch_.forward(x);  // [B, D, Hp, Wp]
    h = ad::reshape(h, {B, d, tokens_});
    h = ad::permute(h, {0, 2, 1});  // [B, T, D]
    h = ad::add(h, pos_);
    for (auto& b : blocks_) {
      h = ad::add(h, b.attn.forward(b.ln1.forward(h)));
      ad::Value m = b.fc1.forward_tokens(b.ln2.forward(h));
      m = ad::gelu(m);
      m = b.fc2.forward_tokens(m);
      h = ad::add(h, m);
    }
    h = final_ln_.forward(h);
    const float inv = 1.0f / static_cast<float>(tokens_);
    return ad::mul_scalar(ad::sum_axes(h, {1}, false), inv);  // [B, D]
  }

  ad::Value head(const ad::Value& feats) override { return head_.forward(feats); }
  int feature_dim() const override { return spec_.vit.dim; }

 private:
  struct Block {
    nn::LayerNormTokens ln1, ln2;
    nn::AttentionLayer attn;
    nn::LinearLayer fc1, fc2;
  };

  ArchSpec spec_;
  nn::Conv2dLayer patch_;
  ad::Value pos_;
  std::vector<Block> blocks_;
  nn::LayerNormTokens final_ln_;
  nn::LinearLayer head_;
  int tokens_ = 0;
};

// Deterministic construction: (spec, seed) fixes every initial parameter.
inline TaggedModel build(const ArchSpec& spec, uint64_t seed) {
  TaggedModel m;
  m.spec = spec;
  m.hash = spec_hash(spec);
  if (spec.family == Family::MorphLadder) {
    m.network = std::make_shared<LadderNet>(spec, seed);
  } else {
    m.network = std::make_shared<TinyViTNet>(spec, seed);
  }
  for (const auto& p : m.network->parameters()) {
    m.tags[p.name] = p.tag;
    m.param_counts[p.tag] += p.value->val.numel();
    m.total_params += p.value->val.numel();
  }
  return m;
}

// --- receptive fields ------------------------------------------------------

struct RfLayer {
  int index = 0;
  std::string name;
  int kernel = 1;
  int stride = 1;
  int64_t rf = 1;  // field of one final-output unit, in this layer's input coords
};

struct ReceptiveFieldReport {
  std::vector<RfLayer> per_layer;
  int64_t total = 1;
  bool attention_global = false;
};

// Backward recursion R_i = s_{i+1} R_{i+1} + (k_{i+1} - s_{i+1}) over an
// explicit (kernel, stride) chain, output to input.
inline ReceptiveFieldReport receptive_field_chain(
    const std::vector<std::pair<int, int>>& layers_ks,
    const std::vector<std::string>& names = {}) {
  ReceptiveFieldReport rep;
  int64_t r = 1;
  rep.per_layer.resize(layers_ks.size());
  for (int i = static_cast<int>(layers_ks.size()) - 1; i >= 0; --i) {
    const auto [k, s] = layers_ks[static_cast<size_t>(i)];
    r = static_cast<int64_t>(s) * r + (k - s);
    auto& l = rep.per_layer[static_cast<size_t>(i)];
    l.index = i;
    l.kernel = k;
    l.stride = s;
    l.rf = r;
    if (!names.empty()) l.name = names[static_cast<size_t>(i)];
  }
  rep.total = r;
  return rep;
}

// Spatial-layer chain of a MorphLadder spec along the main path.
inline std::pair<std::vector<std::pair<int, int>>, std::vector<std::string>>
ladder_spatial_chain(const ArchSpec& s) {
  std::vector<std::pair<int, int>> ks;
  std::vector<std::string> names;
  auto push = [&](int k, int st, const std::string& n) {
    ks.emplace_back(k, st);
    names.push_back(n);
  };
  push(s.stem.kernel, s.stem.stride, "stem.conv");
  if (s.stem.maxpool) push(3, 2, "stem.maxpool");
  for (int stage = 0; stage < 4; ++stage) {
    if (s.separate_downsample && stage > 0)
      push(2, 2, "ds" + std::to_string(stage) + ".conv");
    for (int b = 0; b < s.stage_depths[static_cast<size_t>(stage)]; ++b) {
      const bool stride2 = !s.separate_downsample && stage > 0 && b == 0;
      const std::string base = "s" + std::to_string(stage) + ".b" + std::to_string(b);
      const int k = s.block_kernel;
      switch (s.block_style) {
        case BlockStyle::Bottleneck:
        case BlockStyle::DepthwiseBottleneck:
        case BlockStyle::InvertedDepthwise:
          push(1, 1, base + ".c1");
          push(k, stride2 ? 2 : 1, base + ".c2");
          push(1, 1, base + ".c3");
          break;
        case BlockStyle::ConvNeXtBlock:
          push(k, stride2 ? 2 : 1, base + ".c1");
          push(1, 1, base + ".c2");
          push(1, 1, base + ".c3");
          break;
      }
    }
  }
  return {ks, names};
}

// Receptive field of one final-feature-map unit. TinyViT attention reads the
// whole token sequence, so its field is the full input extent.
inline ReceptiveFieldReport receptive_field(const ArchSpec& s) {
  validate(s);
  if (s.family == Family::TinyViT) {
    ReceptiveFieldReport rep;
    rep.attention_global = true;
    rep.total = std::max(s.input_shape[1], s.input_shape[2]);
    return rep;
  }
  auto [ks, names] = ladder_spatial_chain(s);
  return receptive_field_chain(ks, names);
}

}  // namespace archleak::arch

#endif  // ARCHLEAK_ARCH_HPP_
