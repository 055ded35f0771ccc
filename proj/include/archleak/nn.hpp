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
#ifndef ARCHLEAK_NN_HPP_
#define ARCHLEAK_NN_HPP_

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "archleak/autodiff.hpp"
#include "archleak/tensor.hpp"

namespace archleak::nn {

// Role of a trainable parameter; the partition over all parameters drives
// gradient selection and layer-targeted defenses.
enum class ModuleTag { Stem, Attention, MLP, Norm, Head, Other };

inline const char* tag_name(ModuleTag t) {
  switch (t) {
    case ModuleTag::Stem: return "Stem";
    case ModuleTag::Attention: return "Attention";
    case ModuleTag::MLP: return "MLP";
    case ModuleTag::Norm: return "Norm";
    case ModuleTag::Head: return "Head";
    case ModuleTag::Other: return "Other";
  }
  return "?";
}

inline ModuleTag tag_from_name(const std::string& s) {
  if (s == "Stem") return ModuleTag::Stem;
  if (s == "Attention") return ModuleTag::Attention;
  if (s == "MLP") return ModuleTag::MLP;
  if (s == "Norm") return ModuleTag::Norm;
  if (s == "Head") return ModuleTag::Head;
  if (s == "Other") return ModuleTag::Other;
  throw DomainError("unknown module tag: " + s);
}

struct Param {
  std::string name;
  ModuleTag tag = ModuleTag::Other;
  ad::Value value;  // leaf with requires_grad
};

class ParamRegistry {
 public:
  ad::Value add(std::string name, Tensor init, ModuleTag tag) {
    for (const auto& p : params)
      if (p.name == name) throw ConfigError("duplicate parameter name: " + name);
    Param p;
    p.name = std::move(name);
    p.tag = tag;
    p.value = ad::leaf(std::move(init), true);
    params.push_back(p);
    return params.back().value;
  }

  int64_t total_count() const {
    int64_t n = 0;
    for (const auto& p : params) n += p.value->val.numel();
    return n;
  }

  std::vector<Param> params;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Conv2dLayer {
  ad::Value w;  // [out, in/groups, k, k]
  ad::Value b;  // [out] or null
  ad::ConvGeom geom;
  int out_channels = 0;
  int kernel = 0;

  static Conv2dLayer create(ParamRegistry& reg, const std::string& name, int in_ch,
                            int out_ch, int kernel, int stride, int pad, int groups,
                            bool bias, ModuleTag tag, Rng& rng) {
    Conv2dLayer l;
    l.geom = ad::ConvGeom{stride, pad, groups};
    l.out_channels = out_ch;
    l.kernel = kernel;
    const int fan_in = (in_ch / groups) * kernel * kernel;
    const float stddev = std::sqrt(2.0f / static_cast<float>(fan_in));
    l.w = reg.add(name + ".w",
                  Tensor::randn(rng, {out_ch, in_ch / groups, kernel, kernel}, stddev),
                  tag);
    if (bias) l.b = reg.add(name + ".b", Tensor({out_ch}), tag);
    return l;
  }

  ad::Value forward(const ad::Value& x) const {
    ad::Value y = ad::conv2d(x, w, geom);
    if (b) y = ad::add(y, ad::reshape(b, {1, out_channels, 1, 1}));
    return y;
  }
};

struct LinearLayer {
  ad::Value w;  // [in, out]
  ad::Value b;  // [out] or null
  int in_dim = 0, out_dim = 0;

  static LinearLayer create(ParamRegistry& reg, const std::string& name, int in_dim,
                            int out_dim, bool bias, ModuleTag tag, Rng& rng) {
    LinearLayer l;
    l.in_dim = in_dim;
    l.out_dim = out_dim;
    const float bound = 1.0f / std::sqrt(static_cast<float>(in_dim));
    l.w = reg.add(name + ".w", Tensor::rand_uniform(rng, {in_dim, out_dim}, -bound, bound),
                  tag);
    if (bias) l.b = reg.add(name + ".b", Tensor({out_dim}), tag);
    return l;
  }

  // x: [B, in] -> [B, out]
  ad::Value forward(const ad::Value& x) const {
    ad::Value y = ad::matmul(x, w);
    if (b) y = ad::add(y, ad::reshape(b, {1, out_dim}));
    return y;
  }

  // x: [B, T, in] -> [B, T, out]
  ad::Value forward_tokens(const ad::Value& x) const {
    const Shape& s = x->val.shape;
    ad::Value flat = ad::reshape(x, {s[0] * s[1], s[2]});
    ad::Value y = forward(flat);
    return ad::reshape(y, {s[0], s[1], out_dim});
  }
};

enum class NormKind { BatchNorm, LayerNorm };

// Normalization over NCHW maps. BatchNorm normalizes each channel over
// (N,H,W) with running statistics for eval; LayerNorm normalizes over the
// channel dimension at each spatial position (the ConvNeXt placement).
struct Norm2d {
  NormKind kind = NormKind::BatchNorm;
  ad::Value gamma, beta;  // [1, C, 1, 1]
  Tensor running_mean, running_var;
  float eps = 1e-5f;
  float momentum = 0.1f;
  int channels = 0;

  static Norm2d create(ParamRegistry& reg, const std::string& name, NormKind kind,
                       int channels, ModuleTag tag) {
    Norm2d n;
    n.kind = kind;
    n.channels = channels;
    n.gamma = reg.add(name + ".g", Tensor({1, channels, 1, 1}, 1.0f), tag);
    n.beta = reg.add(name + ".b", Tensor({1, channels, 1, 1}), tag);
    if (kind == NormKind::BatchNorm) {
      n.running_mean = Tensor({1, channels, 1, 1});
      n.running_var = Tensor({1, channels, 1, 1}, 1.0f);
    }
    return n;
  }

  ad::Value forward(const ad::Value& x, bool train) {
    if (kind == NormKind::LayerNorm) return normalize(x, {1});
    if (train) {
      const Shape& s = x->val.shape;
      const float inv_n = 1.0f / static_cast<float>(s[0] * s[2] * s[3]);
      ad::Value mean = ad::mul_scalar(ad::sum_axes(x, {0, 2, 3}, true), inv_n);
      ad::Value xc = ad::sub(x, mean);
      ad::Value var = ad::mul_scalar(ad::sum_axes(ad::mul(xc, xc), {0, 2, 3}, true), inv_n);
      for (int c = 0; c < channels; ++c) {
        running_mean.data[c] =
            (1 - momentum) * running_mean.data[c] + momentum * mean->val.data[c];
        running_var.data[c] =
            (1 - momentum) * running_var.data[c] + momentum * var->val.data[c];
      }
      ad::Value xhat = ad::mul(xc, ad::pow_const(ad::add_scalar(var, eps), -0.5f));
      return ad::add(ad::mul(xhat, gamma), beta);
    }
    ad::Value xc = ad::sub(x, ad::constant(running_mean));
    ad::Value denom = ad::constant(detail_rsqrt(running_var, eps));
    return ad::add(ad::mul(ad::mul(xc, denom), gamma), beta);
  }

 private:
  static Tensor detail_rsqrt(const Tensor& v, float eps) {
    Tensor out(v.shape);
    for (int64_t i = 0; i < v.numel(); ++i)
      out.data[i] = 1.0f / std::sqrt(v.data[i] + eps);
    return out;
  }

  ad::Value normalize(const ad::Value& x, std::vector<int> axes) {
    int64_t n = 1;
    for (int ax : axes) n *= x->val.shape[static_cast<size_t>(ax)];
    const float inv_n = 1.0f / static_cast<float>(n);
    ad::Value mean = ad::mul_scalar(ad::sum_axes(x, axes, true), inv_n);
    ad::Value xc = ad::sub(x, mean);
    ad::Value var = ad::mul_scalar(ad::sum_axes(ad::mul(xc, xc), axes, true), inv_n);
    ad::Value xhat = ad::mul(xc, ad::pow_const(ad::add_scalar(var, eps), -0.5f));
    return ad::add(ad::mul(xhat, gamma), beta);
  }
};

// LayerNorm over the embedding dim of a [B, T, D] token tensor.
struct LayerNormTokens {
  ad::Value gamma, beta;  // [1, 1, D]
  float eps = 1e-5f;
  int dim = 0;

  static LayerNormTokens create(ParamRegistry& reg, const std::string& name, int dim,
                                ModuleTag tag) {
    LayerNormTokens n;
    n.dim = dim;
    n.gamma = reg.add(name + ".g", Tensor({1, 1, dim}, 1.0f), tag);
    n.beta = reg.add(name + ".b", Tensor({1, 1, dim}), tag);
    return n;
  }

  ad::Value forward(const ad::Value& x) const {
    const float inv_n = 1.0f / static_cast<float>(dim);
    ad::Value mean = ad::mul_scalar(ad::sum_axes(x, {2}, true), inv_n);
    ad::Value xc = ad::sub(x, mean);
    ad::Value var = ad::mul_scalar(ad::sum_axes(ad::mul(xc, xc), {2}, true), inv_n);
    ad::Value xhat = ad::mul(xc, ad::pow_const(ad::add_scalar(var, eps), -0.5f));
    return ad::add(ad::mul(xhat, gamma), beta);
  }
};

enum class Activation { ReLU, GELU };

inline ad::Value activate(const ad::Value& x, Activation a) {
  return a == Activation::ReLU ? ad::relu(x) : ad::gelu(x);
}

// Multi-head self-attention: SoftMax(q k^T / sqrt(d)) v per head.
struct AttentionLayer {
  LinearLayer q, k, v, out;
  int heads = 0;
  int dim = 0;

  static AttentionLayer create(ParamRegistry& reg, const std::string& name, int dim,
                               int heads, ModuleTag tag, Rng& rng) {
    if (dim % heads != 0) throw ConfigError("attention dim not divisible by heads");
    AttentionLayer a;
    a.dim = dim;
    a.heads = heads;
    a.q = LinearLayer::create(reg, name + ".q", dim, dim, true, tag, rng);
    a.k = LinearLayer::create(reg, name + ".k", dim, dim, true, tag, rng);
    a.v = LinearLayer::create(reg, name + ".v", dim, dim, true, tag, rng);
    a.out = LinearLayer::create(reg, name + ".out", dim, dim, true, tag, rng);
    return a;
  }

  ad::Value forward(const ad::Value& x) const {
    const Shape& s = x->val.shape;  // [B, T, D]
    const int B = s[0], T = s[1];
    const int hd = dim / heads;
    auto split = [&](const ad::Value& t) {
      ad::Value r = ad::reshape(t, {B, T, heads, hd});
      r = ad::permute(r, {0, 2, 1, 3});  // [B, H, T, hd]
      return ad::reshape(r, {B * heads, T, hd});
    };
    ad::Value qh = split(q.forward_tokens(x));
    ad::Value kh = split(k.forward_tokens(x));
    ad::Value vh = split(v.forward_tokens(x));
    ad::Value scores = ad::mul_scalar(ad::matmul(qh, ad::transpose_last2(kh)),
                                      1.0f / std::sqrt(static_cast<float>(hd)));
    ad::Value att = ad::softmax_lastdim(scores);
    ad::Value ctx = ad::matmul(att, vh);  // [B*H, T, hd]
    ctx = ad::reshape(ctx, {B, heads, T, hd});
    ctx = ad::permute(ctx, {0, 2, 1, 3});
    ctx = ad::reshape(ctx, {B, T, dim});
    return out.forward_tokens(ctx);
  }
};

// ---------------------------------------------------------------------------
// Network base
// ---------------------------------------------------------------------------

class Network {
 public:
  virtual ~Network() = default;

  // Penultimate representation: [B, feature_dim], post global pooling.
  virtual ad::Value features(const ad::Value& x, bool train, Rng* droprng) = 0;
  virtual ad::Value head(const ad::Value& feats) = 0;
  virtual int feature_dim() const = 0;

  ad::Value forward(const ad::Value& x, bool train = false, Rng* droprng = nullptr) {
    return head(features(x, train, droprng));
  }

  std::vector<Param>& parameters() { return reg.params; }
  const std::vector<Param>& parameters() const { return reg.params; }

  const Param* find_param(const std::string& name) const {
    for (const auto& p : reg.params)
      if (p.name == name) return &p;
    return nullptr;
  }

  ParamRegistry reg;
};

// ---------------------------------------------------------------------------
// Optimizers (data-level updates; gradients come from ad::grad)
// ---------------------------------------------------------------------------

struct GradMap : std::map<std::string, Tensor> {};

struct SgdOptimizer {
  float lr = 0.01f;
  float momentum = 0.0f;
  float weight_decay = 0.0f;
  std::map<std::string, Tensor> velocity;

  void step(std::vector<Param>& params, const GradMap& grads) {
    for (auto& p : params) {
      auto it = grads.find(p.name);
      if (it == grads.end()) continue;
      Tensor g = it->second;
      if (weight_decay != 0.0f)
        for (int64_t i = 0; i < g.numel(); ++i)
          g.data[i] += weight_decay * p.value->val.data[i];
      if (momentum != 0.0f) {
        auto& v = velocity.try_emplace(p.name, Tensor(g.shape)).first->second;
        for (int64_t i = 0; i < g.numel(); ++i) {
          v.data[i] = momentum * v.data[i] + g.data[i];
          p.value->val.data[i] -= lr * v.data[i];
        }
      } else {
        for (int64_t i = 0; i < g.numel(); ++i) p.value->val.data[i] -= lr * g.data[i];
      }
    }
  }
};

struct AdamOptimizer {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
  bool decoupled = false;  // true = AdamW
  int64_t t = 0;
  std::map<std::string, Tensor> m, v;

  void step(std::vector<Param>& params, const GradMap& grads) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& p : params) {
      auto it = grads.find(p.name);
      if (it == grads.end()) continue;
      const Tensor& g0 = it->second;
      auto& mm = m.try_emplace(p.name, Tensor(g0.shape)).first->second;
      auto& vv = v.try_emplace(p.name, Tensor(g0.shape)).first->second;
      for (int64_t i = 0; i < g0.numel(); ++i) {
        float g = g0.data[i];
        if (!decoupled && weight_decay != 0.0f) g += weight_decay * p.value->val.data[i];
        mm.data[i] = beta1 * mm.data[i] + (1 - beta1) * g;
        vv.data[i] = beta2 * vv.data[i] + (1 - beta2) * g * g;
        const double mhat = mm.data[i] / bc1;
        const double vhat = vv.data[i] / bc2;
        float upd = static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
        if (decoupled && weight_decay != 0.0f)
          upd += lr * weight_decay * p.value->val.data[i];
        p.value->val.data[i] -= upd;
      }
    }
  }
};

// Value-level Adam for a single tensor (used by the inversion loop).
struct TensorAdam {
  float lr = 0.1f;
  float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
  int64_t t = 0;
  Tensor m, v;

  void step(Tensor& x, const Tensor& g) {
    if (m.numel() == 0) {
      m = Tensor(x.shape);
      v = Tensor(x.shape);
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (int64_t i = 0; i < x.numel(); ++i) {
      m.data[i] = beta1 * m.data[i] + (1 - beta1) * g.data[i];
      v.data[i] = beta2 * v.data[i] + (1 - beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      x.data[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
};

// Cross-entropy loss of a network on a batch; targets may be soft rows.
inline ad::Value batch_loss(Network& net, const ad::Value& x, const ad::Value& targets,
                            bool train, Rng* droprng = nullptr) {
  return ad::cross_entropy_mean(net.forward(x, train, droprng), targets);
}

// Compute gradients of a scalar loss for every parameter, as plain tensors.
inline GradMap param_grads(const ad::Value& loss, std::vector<Param>& params) {
  std::vector<ad::Value> leaves;
  leaves.reserve(params.size());
  for (auto& p : params) leaves.push_back(p.value);
  auto gs = ad::grad(loss, leaves);
  GradMap out;
  for (size_t i = 0; i < params.size(); ++i) out[params[i].name] = gs[i]->val;
  std::vector<ad::Value> roots = gs;
  roots.push_back(loss);
  ad::free_graph(roots);
  return out;
}

}  // namespace archleak::nn

#endif  // ARCHLEAK_NN_HPP_
