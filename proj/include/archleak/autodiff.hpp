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
#ifndef ARCHLEAK_AUTODIFF_HPP_
#define ARCHLEAK_AUTODIFF_HPP_

#include <algorithm>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "archleak/tensor.hpp"

// Reverse-mode autodiff on a dynamically built graph. Every backward rule is
// itself expressed with graph ops, so differentiating through a gradient
// (as gradient-inversion requires) needs no special casing: call grad() on a
// function of grad() outputs and the chain keeps extending.
namespace archleak::ad {

class Node;
using Value = std::shared_ptr<Node>;
// Maps the incoming gradient (shaped like the node's output) to one gradient
// per parent; null entries mean "no gradient flows to this parent".
using BackwardFn = std::function<std::vector<Value>(const Value&)>;

class Node {
 public:
  Tensor val;
  bool requires_grad = false;
  std::vector<Value> parents;
  BackwardFn backward;
  const char* op = "leaf";
};

inline Value leaf(Tensor v, bool requires_grad = false) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->requires_grad = requires_grad;
  return n;
}

inline Value constant(Tensor v) { return leaf(std::move(v), false); }
inline Value scalar(float v) { return constant(Tensor::scalar(v)); }

inline Value make_op(Tensor out, std::vector<Value> parents, BackwardFn fn,
                     const char* op) {
  auto n = std::make_shared<Node>();
  n->val = std::move(out);
  n->op = op;
  for (const auto& p : parents) {
    if (p && p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(fn);
  }
  return n;
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

Value add(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value reduce_to(const Value& g, const Shape& target);
Value sum_axes(const Value& a, std::vector<int> axes, bool keepdim);
Value broadcast_to(const Value& a, const Shape& target);
Value reshape(const Value& a, Shape target);

namespace detail {

template <class F>
Tensor binary_eval(const Tensor& a, const Tensor& b, F&& f) {
  Shape os = broadcast_shapes(a.shape, b.shape);
  Tensor out(os);
  if (a.shape == b.shape) {
    for (int64_t i = 0; i < out.numel(); ++i)
      out.data[i] = f(a.data[i], b.data[i]);
    return out;
  }
  if (b.numel() == 1) {
    const float bv = b.data.empty() ? 0.0f : b.data[0];
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = f(a.data[i], bv);
    return out;
  }
  if (a.numel() == 1) {
    const float av = a.data.empty() ? 0.0f : a.data[0];
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = f(av, b.data[i]);
    return out;
  }
  const auto sa = broadcast_strides(a.shape, os);
  const auto sb = broadcast_strides(b.shape, os);
  broadcast_walk(os, sa, sb, [&](int64_t lin, int64_t oa, int64_t ob) {
    out.data[lin] = f(a.data[oa], b.data[ob]);
  });
  return out;
}

template <class F>
Tensor unary_eval(const Tensor& a, F&& f) {
  Tensor out(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

}  // namespace detail

inline Value add(const Value& a, const Value& b) {
  Tensor out = detail::binary_eval(a->val, b->val, [](float x, float y) { return x + y; });
  const Shape as = a->val.shape, bs = b->val.shape;
  return make_op(
      std::move(out), {a, b},
      [as, bs](const Value& g) -> std::vector<Value> {
        return {reduce_to(g, as), reduce_to(g, bs)};
      },
      "add");
}

inline Value mul(const Value& a, const Value& b) {
  Tensor out = detail::binary_eval(a->val, b->val, [](float x, float y) { return x * y; });
  return make_op(
      std::move(out), {a, b},
      [a, b](const Value& g) -> std::vector<Value> {
        return {reduce_to(mul(g, b), a->val.shape), reduce_to(mul(g, a), b->val.shape)};
      },
      "mul");
}

inline Value neg(const Value& a) {
  Tensor out = detail::unary_eval(a->val, [](float x) { return -x; });
  return make_op(
      std::move(out), {a},
      [](const Value& g) -> std::vector<Value> { return {neg(g)}; }, "neg");
}

inline Value sub(const Value& a, const Value& b) { return add(a, neg(b)); }

inline Value mul_scalar(const Value& a, float c) { return mul(a, scalar(c)); }
inline Value add_scalar(const Value& a, float c) { return add(a, scalar(c)); }

inline Value pow_const(const Value& a, float p) {
  Tensor out = detail::unary_eval(a->val, [p](float x) { return std::pow(x, p); });
  return make_op(
      std::move(out), {a},
      [a, p](const Value& g) -> std::vector<Value> {
        return {mul(g, mul_scalar(pow_const(a, p - 1.0f), p))};
      },
      "pow");
}

inline Value exp_v(const Value& a) {
  Tensor out = detail::unary_eval(a->val, [](float x) { return std::exp(x); });
  return make_op(
      std::move(out), {a},
      [a](const Value& g) -> std::vector<Value> { return {mul(g, exp_v(a))}; },
      "exp");
}

inline Value log_v(const Value& a) {
  Tensor out = detail::unary_eval(a->val, [](float x) { return std::log(x); });
  return make_op(
      std::move(out), {a},
      [a](const Value& g) -> std::vector<Value> {
        return {mul(g, pow_const(a, -1.0f))};
      },
      "log");
}

inline Value tanh_v(const Value& a) {
  Tensor out = detail::unary_eval(a->val, [](float x) { return std::tanh(x); });
  return make_op(
      std::move(out), {a},
      [a](const Value& g) -> std::vector<Value> {
        Value t = tanh_v(a);
        return {mul(g, sub(scalar(1.0f), mul(t, t)))};
      },
      "tanh");
}

// |x|; subgradient 0 at x == 0.
inline Value abs_v(const Value& a) {
  Tensor out = detail::unary_eval(a->val, [](float x) { return std::fabs(x); });
  Tensor sign = detail::unary_eval(a->val, [](float x) {
    return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f);
  });
  Value sgn = constant(std::move(sign));
  return make_op(
      std::move(out), {a},
      [sgn](const Value& g) -> std::vector<Value> { return {mul(g, sgn)}; },
      "abs");
}

inline Value relu(const Value& a) {
  Tensor out = detail::unary_eval(a->val, [](float x) { return x > 0.0f ? x : 0.0f; });
  Tensor m = detail::unary_eval(a->val, [](float x) { return x > 0.0f ? 1.0f : 0.0f; });
  Value mask = constant(std::move(m));
  return make_op(
      std::move(out), {a},
      [mask](const Value& g) -> std::vector<Value> { return {mul(g, mask)}; },
      "relu");
}

// ---------------------------------------------------------------------------
// Reductions, reshapes
// ---------------------------------------------------------------------------

inline Value sum_axes(const Value& a, std::vector<int> axes, bool keepdim) {
  const Shape& in = a->val.shape;
  const int nd = static_cast<int>(in.size());
  std::vector<bool> reduce(static_cast<size_t>(nd), false);
  for (int ax : axes) {
    if (ax < 0) ax += nd;
    if (ax < 0 || ax >= nd) throw ShapeError("sum_axes: axis out of range");
    reduce[static_cast<size_t>(ax)] = true;
  }
  Shape kept = in;
  for (int i = 0; i < nd; ++i)
    if (reduce[static_cast<size_t>(i)]) kept[static_cast<size_t>(i)] = 1;
  Tensor out(kept);
  {
    // Walk the input linearly; `oo` tracks the (stride-0 on reduced axes)
    // offset into the keepdim output.
    const auto st = broadcast_strides(kept, in);
    const int64_t total = shape_numel(in);
    std::vector<int> idx(in.size(), 0);
    int64_t oo = 0;
    for (int64_t lin = 0; lin < total; ++lin) {
      out.data[oo] += a->val.data[lin];
      for (int d = nd - 1; d >= 0; --d) {
        idx[static_cast<size_t>(d)]++;
        oo += st[static_cast<size_t>(d)];
        if (idx[static_cast<size_t>(d)] < in[static_cast<size_t>(d)]) break;
        oo -= st[static_cast<size_t>(d)] * in[static_cast<size_t>(d)];
        idx[static_cast<size_t>(d)] = 0;
      }
    }
  }
  Shape final_shape = kept;
  if (!keepdim) {
    final_shape.clear();
    for (int i = 0; i < nd; ++i)
      if (!reduce[static_cast<size_t>(i)]) final_shape.push_back(in[static_cast<size_t>(i)]);
  }
  Tensor shaped(final_shape, std::move(out.data));
  Shape in_shape = in, kept_shape = kept;
  return make_op(
      std::move(shaped), {a},
      [in_shape, kept_shape](const Value& g) -> std::vector<Value> {
        return {broadcast_to(reshape(g, kept_shape), in_shape)};
      },
      "sum_axes");
}

inline Value sum_all(const Value& a) {
  const int nd = a->val.ndim();
  std::vector<int> axes(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) axes[static_cast<size_t>(i)] = i;
  Value s = sum_axes(a, axes, false);
  return reshape(s, Shape{});
}

inline Value mean_all(const Value& a) {
  return mul_scalar(sum_all(a), 1.0f / static_cast<float>(a->val.numel()));
}

inline Value broadcast_to(const Value& a, const Shape& target) {
  if (a->val.shape == target) return a;
  Tensor out(target);
  const auto sa = broadcast_strides(a->val.shape, target);
  const std::vector<int64_t> zero(target.size(), 0);
  broadcast_walk(target, sa, zero, [&](int64_t lin, int64_t oa, int64_t) {
    out.data[lin] = a->val.data[oa];
  });
  Shape in_shape = a->val.shape;
  return make_op(
      std::move(out), {a},
      [in_shape](const Value& g) -> std::vector<Value> {
        return {reduce_to(g, in_shape)};
      },
      "broadcast_to");
}

// Sum g down to `target` (the reverse of broadcasting target up to g's shape).
inline Value reduce_to(const Value& g, const Shape& target) {
  if (g->val.shape == target) return g;
  const Shape& gs = g->val.shape;
  const int extra = static_cast<int>(gs.size() - target.size());
  std::vector<int> axes;
  for (int i = 0; i < static_cast<int>(gs.size()); ++i) {
    if (i < extra) {
      axes.push_back(i);
    } else if (target[static_cast<size_t>(i - extra)] == 1 &&
               gs[static_cast<size_t>(i)] != 1) {
      axes.push_back(i);
    }
  }
  Value r = axes.empty() ? g : sum_axes(g, axes, true);
  return reshape(r, target);
}

inline Value reshape(const Value& a, Shape target) {
  if (shape_numel(target) != a->val.numel())
    throw ShapeError("reshape: numel mismatch " + shape_str(a->val.shape) + " -> " +
                     shape_str(target));
  if (a->val.shape == target) return a;
  Tensor out(target, a->val.data);
  Shape in_shape = a->val.shape;
  return make_op(
      std::move(out), {a},
      [in_shape](const Value& g) -> std::vector<Value> {
        return {reshape(g, in_shape)};
      },
      "reshape");
}

inline Value permute(const Value& a, const std::vector<int>& perm) {
  const Shape& in = a->val.shape;
  const int nd = static_cast<int>(in.size());
  if (static_cast<int>(perm.size()) != nd) throw ShapeError("permute: rank mismatch");
  Shape os(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) os[static_cast<size_t>(i)] = in[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  Tensor out(os);
  const auto in_st = shape_strides(in);
  std::vector<int64_t> src_st(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i)
    src_st[static_cast<size_t>(i)] = in_st[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  const std::vector<int64_t> zero(static_cast<size_t>(nd), 0);
  broadcast_walk(os, src_st, zero, [&](int64_t lin, int64_t oa, int64_t) {
    out.data[lin] = a->val.data[oa];
  });
  std::vector<int> inv(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) inv[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
  return make_op(
      std::move(out), {a},
      [inv](const Value& g) -> std::vector<Value> { return {permute(g, inv)}; },
      "permute");
}

inline Value transpose_last2(const Value& a) {
  const int nd = a->val.ndim();
  if (nd < 2) throw ShapeError("transpose_last2: need rank >= 2");
  std::vector<int> perm(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) perm[static_cast<size_t>(i)] = i;
  std::swap(perm[static_cast<size_t>(nd - 1)], perm[static_cast<size_t>(nd - 2)]);
  return permute(a, perm);
}

// ---------------------------------------------------------------------------
// Slicing / padding along one axis (closed adjoint pair)
// ---------------------------------------------------------------------------

inline Value slice_axis(const Value& a, int axis, int start, int len);

inline Value pad_axis(const Value& a, int axis, int before, int after) {
  const Shape& in = a->val.shape;
  const int nd = static_cast<int>(in.size());
  if (axis < 0) axis += nd;
  Shape os = in;
  os[static_cast<size_t>(axis)] += before + after;
  Tensor out(os);
  const auto ist = shape_strides(in);
  const auto ost = shape_strides(os);
  const int64_t outer = std::accumulate(in.begin(), in.begin() + axis, int64_t{1},
                                        std::multiplies<int64_t>());
  const int64_t inner = ist[static_cast<size_t>(axis)];
  for (int64_t o = 0; o < outer; ++o) {
    for (int i = 0; i < in[static_cast<size_t>(axis)]; ++i) {
      const float* src = a->val.data.data() + o * in[static_cast<size_t>(axis)] * inner + i * inner;
      float* dst = out.data.data() + o * os[static_cast<size_t>(axis)] * ost[static_cast<size_t>(axis)] +
                   (i + before) * inner;
      std::copy(src, src + inner, dst);
    }
  }
  const int in_len = in[static_cast<size_t>(axis)];
  return make_op(
      std::move(out), {a},
      [axis, before, in_len](const Value& g) -> std::vector<Value> {
        return {slice_axis(g, axis, before, in_len)};
      },
      "pad_axis");
}

inline Value slice_axis(const Value& a, int axis, int start, int len) {
  const Shape& in = a->val.shape;
  const int nd = static_cast<int>(in.size());
  if (axis < 0) axis += nd;
  if (start < 0 || len < 0 || start + len > in[static_cast<size_t>(axis)])
    throw ShapeError("slice_axis: out of range");
  Shape os = in;
  os[static_cast<size_t>(axis)] = len;
  Tensor out(os);
  const auto ist = shape_strides(in);
  const int64_t inner = ist[static_cast<size_t>(axis)];
  const int64_t outer = std::accumulate(in.begin(), in.begin() + axis, int64_t{1},
                                        std::multiplies<int64_t>());
  for (int64_t o = 0; o < outer; ++o) {
    for (int i = 0; i < len; ++i) {
      const float* src =
          a->val.data.data() + o * in[static_cast<size_t>(axis)] * inner + (start + i) * inner;
      float* dst = out.data.data() + o * len * inner + i * inner;
      std::copy(src, src + inner, dst);
    }
  }
  const int in_len = in[static_cast<size_t>(axis)];
  return make_op(
      std::move(out), {a},
      [axis, start, in_len, len](const Value& g) -> std::vector<Value> {
        return {pad_axis(g, axis, start, in_len - start - len)};
      },
      "slice_axis");
}

// ---------------------------------------------------------------------------
// Matrix multiply: [m,k]x[k,n] or [B,m,k]x[B,k,n]
// ---------------------------------------------------------------------------

inline Value matmul(const Value& a, const Value& b) {
  const Shape& as = a->val.shape;
  const Shape& bs = b->val.shape;
  if (!((as.size() == 2 && bs.size() == 2) || (as.size() == 3 && bs.size() == 3)))
    throw ShapeError("matmul: supports 2Dx2D or batched 3Dx3D, got " + shape_str(as) +
                     " x " + shape_str(bs));
  const bool batched = as.size() == 3;
  const int B = batched ? as[0] : 1;
  const int m = batched ? as[1] : as[0];
  const int k = batched ? as[2] : as[1];
  const int kb = batched ? bs[1] : bs[0];
  const int n = batched ? bs[2] : bs[1];
  if (k != kb || (batched && bs[0] != B))
    throw ShapeError("matmul: inner dims mismatch " + shape_str(as) + " x " + shape_str(bs));
  Shape os = batched ? Shape{B, m, n} : Shape{m, n};
  Tensor out(os);
  const float* pa = a->val.data.data();
  const float* pb = b->val.data.data();
  float* po = out.data.data();
  for (int bb = 0; bb < B; ++bb) {
    const float* A = pa + static_cast<int64_t>(bb) * m * k;
    const float* Bm = pb + static_cast<int64_t>(bb) * k * n;
    float* C = po + static_cast<int64_t>(bb) * m * n;
    for (int i = 0; i < m; ++i) {
      float* crow = C + static_cast<int64_t>(i) * n;
      for (int kk = 0; kk < k; ++kk) {
        const float av = A[static_cast<int64_t>(i) * k + kk];
        if (av == 0.0f) continue;
        const float* brow = Bm + static_cast<int64_t>(kk) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  return make_op(
      std::move(out), {a, b},
      [a, b](const Value& g) -> std::vector<Value> {
        return {matmul(g, transpose_last2(b)), matmul(transpose_last2(a), g)};
      },
      "matmul");
}

// ---------------------------------------------------------------------------
// Convolution triad. conv2d / its input-gradient / its weight-gradient are
// three bilinear maps whose adjoints are each other, so expressing every
// backward through the triad keeps arbitrary-order differentiation exact.
// ---------------------------------------------------------------------------

struct ConvGeom {
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

namespace detail {

inline void conv_check(const Shape& xs, const Shape& ws, const ConvGeom& g) {
  if (xs.size() != 4 || ws.size() != 4) throw ShapeError("conv2d: expects NCHW x OIHW");
  const int ci = xs[1], co = ws[0], cig = ws[1];
  if (ci % g.groups != 0 || co % g.groups != 0)
    throw ShapeError("conv2d: channels not divisible by groups");
  if (cig != ci / g.groups)
    throw ShapeError("conv2d: weight in-channels " + std::to_string(cig) +
                     " != input channels/groups " + std::to_string(ci / g.groups));
}

inline int conv_out(int in, int k, const ConvGeom& g) {
  const int o = (in + 2 * g.pad - k) / g.stride + 1;
  if (o <= 0)
    throw ShapeError("conv2d: non-positive output size (input " + std::to_string(in) +
                     ", kernel " + std::to_string(k) + ")");
  return o;
}

inline Tensor conv2d_eval(const Tensor& x, const Tensor& w, const ConvGeom& g) {
  conv_check(x.shape, w.shape, g);
  const int B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int Co = w.shape[0], Cig = w.shape[1], K = w.shape[2];
  const int Ho = conv_out(H, K, g), Wo = conv_out(W, K, g);
  const int cog = Co / g.groups;
  Tensor y(Shape{B, Co, Ho, Wo});
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Co; ++co) {
      const int grp = co / cog;
      for (int ho = 0; ho < Ho; ++ho) {
        for (int wo = 0; wo < Wo; ++wo) {
          float acc = 0.0f;
          for (int cg = 0; cg < Cig; ++cg) {
            const int ci = grp * Cig + cg;
            const float* xc = x.data.data() +
                              ((static_cast<int64_t>(b) * Ci + ci) * H) * W;
            const float* wc = w.data.data() +
                              ((static_cast<int64_t>(co) * Cig + cg) * K) * K;
            for (int kh = 0; kh < K; ++kh) {
              const int h = ho * g.stride - g.pad + kh;
              if (h < 0 || h >= H) continue;
              for (int kw = 0; kw < K; ++kw) {
                const int ww = wo * g.stride - g.pad + kw;
                if (ww < 0 || ww >= W) continue;
                acc += xc[static_cast<int64_t>(h) * W + ww] * wc[static_cast<int64_t>(kh) * K + kw];
              }
            }
          }
          y.data[(((static_cast<int64_t>(b) * Co + co) * Ho) + ho) * Wo + wo] = acc;
        }
      }
    }
  }
  return y;
}

inline Tensor conv2d_dx_eval(const Tensor& gy, const Tensor& w, int H, int W,
                             const ConvGeom& g) {
  const int B = gy.shape[0], Co = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3];
  const int Cig = w.shape[1], K = w.shape[2];
  const int cog = Co / g.groups;
  const int Ci = Cig * g.groups;
  Tensor dx(Shape{B, Ci, H, W});
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Co; ++co) {
      const int grp = co / cog;
      for (int ho = 0; ho < Ho; ++ho) {
        for (int wo = 0; wo < Wo; ++wo) {
          const float gv =
              gy.data[(((static_cast<int64_t>(b) * Co + co) * Ho) + ho) * Wo + wo];
          if (gv == 0.0f) continue;
          for (int cg = 0; cg < Cig; ++cg) {
            const int ci = grp * Cig + cg;
            float* xc = dx.data.data() + ((static_cast<int64_t>(b) * Ci + ci) * H) * W;
            const float* wc = w.data.data() +
                              ((static_cast<int64_t>(co) * Cig + cg) * K) * K;
            for (int kh = 0; kh < K; ++kh) {
              const int h = ho * g.stride - g.pad + kh;
              if (h < 0 || h >= H) continue;
              for (int kw = 0; kw < K; ++kw) {
                const int ww = wo * g.stride - g.pad + kw;
                if (ww < 0 || ww >= W) continue;
                xc[static_cast<int64_t>(h) * W + ww] += gv * wc[static_cast<int64_t>(kh) * K + kw];
              }
            }
          }
        }
      }
    }
  }
  return dx;
}

inline Tensor conv2d_dw_eval(const Tensor& gy, const Tensor& x, int K,
                             const ConvGeom& g) {
  const int B = gy.shape[0], Co = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3];
  const int Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int Cig = Ci / g.groups;
  const int cog = Co / g.groups;
  Tensor dw(Shape{Co, Cig, K, K});
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Co; ++co) {
      const int grp = co / cog;
      for (int ho = 0; ho < Ho; ++ho) {
        for (int wo = 0; wo < Wo; ++wo) {
          const float gv =
              gy.data[(((static_cast<int64_t>(b) * Co + co) * Ho) + ho) * Wo + wo];
          if (gv == 0.0f) continue;
          for (int cg = 0; cg < Cig; ++cg) {
            const int ci = grp * Cig + cg;
            const float* xc = x.data.data() + ((static_cast<int64_t>(b) * Ci + ci) * H) * W;
            float* wc = dw.data.data() + ((static_cast<int64_t>(co) * Cig + cg) * K) * K;
            for (int kh = 0; kh < K; ++kh) {
              const int h = ho * g.stride - g.pad + kh;
              if (h < 0 || h >= H) continue;
              for (int kw = 0; kw < K; ++kw) {
                const int ww = wo * g.stride - g.pad + kw;
                if (ww < 0 || ww >= W) continue;
                wc[static_cast<int64_t>(kh) * K + kw] += gv * xc[static_cast<int64_t>(h) * W + ww];
              }
            }
          }
        }
      }
    }
  }
  return dw;
}

}  // namespace detail

Value conv2d(const Value& x, const Value& w, const ConvGeom& geom);
Value conv2d_dx(const Value& gy, const Value& w, int H, int W, const ConvGeom& geom);
Value conv2d_dw(const Value& gy, const Value& x, int K, const ConvGeom& geom);

inline Value conv2d(const Value& x, const Value& w, const ConvGeom& geom) {
  Tensor out = detail::conv2d_eval(x->val, w->val, geom);
  const int H = x->val.shape[2], W = x->val.shape[3], K = w->val.shape[2];
  return make_op(
      std::move(out), {x, w},
      [x, w, H, W, K, geom](const Value& g) -> std::vector<Value> {
        return {conv2d_dx(g, w, H, W, geom), conv2d_dw(g, x, K, geom)};
      },
      "conv2d");
}

inline Value conv2d_dx(const Value& gy, const Value& w, int H, int W,
                       const ConvGeom& geom) {
  Tensor out = detail::conv2d_dx_eval(gy->val, w->val, H, W, geom);
  const int K = w->val.shape[2];
  return make_op(
      std::move(out), {gy, w},
      [gy, w, K, geom](const Value& u) -> std::vector<Value> {
        // <conv2d_dx(gy,w), u> == <gy, conv2d(u,w)>.
        return {conv2d(u, w, geom), conv2d_dw(gy, u, K, geom)};
      },
      "conv2d_dx");
}

inline Value conv2d_dw(const Value& gy, const Value& x, int K, const ConvGeom& geom) {
  Tensor out = detail::conv2d_dw_eval(gy->val, x->val, K, geom);
  const int H = x->val.shape[2], W = x->val.shape[3];
  return make_op(
      std::move(out), {gy, x},
      [gy, x, H, W, geom](const Value& v) -> std::vector<Value> {
        // <conv2d_dw(gy,x), v> == <gy, conv2d(x,v)>.
        return {conv2d(x, v, geom), conv2d_dx(gy, v, H, W, geom)};
      },
      "conv2d_dw");
}

// ---------------------------------------------------------------------------
// Max pooling (argmax scatter/gather pair)
// ---------------------------------------------------------------------------

using IndexList = std::shared_ptr<std::vector<int64_t>>;

Value pool_scatter(const Value& g, const IndexList& idx, const Shape& in_shape);
Value pool_gather(const Value& v, const IndexList& idx, const Shape& out_shape);

inline Value maxpool2d(const Value& x, int k, int stride, int pad) {
  const Shape& xs = x->val.shape;
  if (xs.size() != 4) throw ShapeError("maxpool2d: expects NCHW");
  const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  ConvGeom geom{stride, pad, 1};
  const int Ho = detail::conv_out(H, k, geom), Wo = detail::conv_out(W, k, geom);
  Tensor out(Shape{B, C, Ho, Wo});
  auto idx = std::make_shared<std::vector<int64_t>>(out.numel(), -1);
  int64_t oi = 0;
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const float* xc = x->val.data.data() + ((static_cast<int64_t>(b) * C + c) * H) * W;
      const int64_t base = ((static_cast<int64_t>(b) * C + c) * H) * W;
      for (int ho = 0; ho < Ho; ++ho) {
        for (int wo = 0; wo < Wo; ++wo, ++oi) {
          float best = -std::numeric_limits<float>::infinity();
          int64_t besti = -1;
          for (int kh = 0; kh < k; ++kh) {
            const int h = ho * stride - pad + kh;
            if (h < 0 || h >= H) continue;
            for (int kw = 0; kw < k; ++kw) {
              const int w = wo * stride - pad + kw;
              if (w < 0 || w >= W) continue;
              const float v = xc[static_cast<int64_t>(h) * W + w];
              if (v > best) {
                best = v;
                besti = base + static_cast<int64_t>(h) * W + w;
              }
            }
          }
          if (besti < 0) throw ShapeError("maxpool2d: empty window");
          out.data[oi] = best;
          (*idx)[oi] = besti;
        }
      }
    }
  }
  Shape in_shape = xs;
  return make_op(
      std::move(out), {x},
      [idx, in_shape](const Value& g) -> std::vector<Value> {
        return {pool_scatter(g, idx, in_shape)};
      },
      "maxpool2d");
}

inline Value pool_scatter(const Value& g, const IndexList& idx, const Shape& in_shape) {
  Tensor out(in_shape);
  for (int64_t i = 0; i < g->val.numel(); ++i) out.data[(*idx)[i]] += g->val.data[i];
  Shape out_shape = g->val.shape;
  return make_op(
      std::move(out), {g},
      [idx, out_shape](const Value& u) -> std::vector<Value> {
        return {pool_gather(u, idx, out_shape)};
      },
      "pool_scatter");
}

inline Value pool_gather(const Value& v, const IndexList& idx, const Shape& out_shape) {
  Tensor out(out_shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = v->val.data[(*idx)[i]];
  Shape in_shape = v->val.shape;
  return make_op(
      std::move(out), {v},
      [idx, in_shape](const Value& u) -> std::vector<Value> {
        return {pool_scatter(u, idx, in_shape)};
      },
      "pool_gather");
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

// Row max over the last axis, detached from the graph. Softmax is invariant
// to this shift, so treating it as a constant is exact, not an approximation.
inline Value detached_lastdim_max(const Value& a) {
  const Shape& s = a->val.shape;
  const int last = s.back();
  Shape ms = s;
  ms.back() = 1;
  Tensor m(ms);
  const int64_t rows = a->val.numel() / last;
  for (int64_t r = 0; r < rows; ++r) {
    float best = a->val.data[r * last];
    for (int i = 1; i < last; ++i) best = std::max(best, a->val.data[r * last + i]);
    m.data[r] = best;
  }
  return constant(std::move(m));
}

inline Value softmax_lastdim(const Value& a) {
  Value z = sub(a, detached_lastdim_max(a));
  Value e = exp_v(z);
  Value s = sum_axes(e, {-1}, true);
  return mul(e, pow_const(s, -1.0f));
}

inline Value log_softmax_lastdim(const Value& a) {
  Value z = sub(a, detached_lastdim_max(a));
  Value s = sum_axes(exp_v(z), {-1}, true);
  return sub(z, log_v(s));
}

// Mean cross-entropy against (possibly soft) target rows.
inline Value cross_entropy_mean(const Value& logits, const Value& targets) {
  Value lsm = log_softmax_lastdim(logits);
  Value per = neg(sum_axes(mul(targets, lsm), {-1}, false));
  return mean_all(per);
}

inline Value dot_all(const Value& a, const Value& b) { return sum_all(mul(a, b)); }

// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline Value gelu(const Value& x) {
  const float c = 0.7978845608028654f;  // sqrt(2/pi)
  Value x3 = mul(mul(x, x), x);
  Value inner = mul_scalar(add(x, mul_scalar(x3, 0.044715f)), c);
  return mul(mul_scalar(x, 0.5f), add_scalar(tanh_v(inner), 1.0f));
}

// ---------------------------------------------------------------------------
// Gradient driver
// ---------------------------------------------------------------------------

inline std::vector<Node*> topo_from(const Value& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS over the requires_grad subgraph.
  std::vector<std::pair<Node*, size_t>> stack;
  if (root && root->requires_grad) {
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
  }
  while (!stack.empty()) {
    auto& [node, ci] = stack.back();
    if (ci < node->parents.size()) {
      Node* p = node->parents[ci].get();
      ++ci;
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

// Gradients of a scalar root w.r.t. each entry of `wrt`. The returned values
// are themselves graph nodes, so they can be differentiated again.
inline std::vector<Value> grad(const Value& root, const std::vector<Value>& wrt) {
  if (root->val.numel() != 1)
    throw ShapeError("grad: root must be scalar, got " + shape_str(root->val.shape));
  std::unordered_map<Node*, Value> gmap;
  gmap[root.get()] = constant(Tensor(root->val.shape, 1.0f));
  const auto order = topo_from(root);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto gi = gmap.find(node);
    if (gi == gmap.end() || !node->backward) continue;
    std::vector<Value> parts = node->backward(gi->second);
    if (parts.size() != node->parents.size())
      throw Error(std::string("backward arity mismatch in op ") + node->op);
    for (size_t i = 0; i < parts.size(); ++i) {
      const Value& p = node->parents[i];
      if (!p || !p->requires_grad || !parts[i]) continue;
      if (parts[i]->val.shape != p->val.shape)
        throw ShapeError(std::string("backward shape mismatch in op ") + node->op +
                         ": " + shape_str(parts[i]->val.shape) + " vs " +
                         shape_str(p->val.shape));
      auto ex = gmap.find(p.get());
      if (ex == gmap.end()) {
        gmap[p.get()] = parts[i];
      } else {
        ex->second = add(ex->second, parts[i]);
      }
    }
  }
  std::vector<Value> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = gmap.find(w.get());
    if (it == gmap.end()) {
      out.push_back(constant(Tensor(w->val.shape)));
    } else {
      out.push_back(it->second);
    }
  }
  return out;
}

// Break parent edges of everything reachable from `roots`. Graphs built in
// tight loops can otherwise chain deep enough that recursive shared_ptr
// destruction becomes a stack hazard; leaves keep their values.
inline void free_graph(const std::vector<Value>& roots) {
  std::vector<Node*> stack;
  std::unordered_set<Node*> seen;
  for (const auto& r : roots) {
    if (r && seen.insert(r.get()).second) stack.push_back(r.get());
  }
  std::vector<std::vector<Value>> detached;
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    for (auto& p : n->parents) {
      if (p && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    detached.emplace_back(std::move(n->parents));
    n->parents.clear();
    n->backward = nullptr;
  }
}

}  // namespace archleak::ad

#endif  // ARCHLEAK_AUTODIFF_HPP_
