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
#ifndef ARCHLEAK_TENSOR_HPP_
#define ARCHLEAK_TENSOR_HPP_

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace archleak {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  TrainingError(const std::string& msg, int epoch_or_iter)
      : Error(msg), index(epoch_or_iter) {}
  int index;
};

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// Row-major strides.
inline std::vector<int64_t> shape_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// Deterministic, portable PRNG: xoshiro256** seeded with splitmix64.
// std::random distributions are implementation-defined, so all sampling
// is done by hand to keep results identical across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& si : s_) si = splitmix64(x);
    have_cached_ = false;
  }

  // Derive an independent stream from (seed, stream) without correlation.
  static Rng stream(uint64_t seed, uint64_t stream_id) {
    uint64_t x = seed;
    uint64_t a = splitmix64(x);
    x ^= stream_id * 0x9e3779b97f4a7c15ULL;
    uint64_t b = splitmix64(x);
    return Rng(a ^ (b + 0x632be59bd9b4e019ULL));
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform double in [0, 1) with 53 bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (cached second sample).
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double th = 2.0 * M_PI * u2;
    cached_ = r * std::sin(th);
    have_cached_ = true;
    return r * std::cos(th);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Integer in [0, n) without modulo bias.
  int64_t randint(int64_t n) {
    if (n <= 0) throw DomainError("randint: n must be positive");
    const auto un = static_cast<uint64_t>(n);
    __uint128_t m = static_cast<__uint128_t>(next_u64()) * un;
    auto lo = static_cast<uint64_t>(m);
    if (lo < un) {
      const uint64_t t = (0 - un) % un;
      while (lo < t) {
        m = static_cast<__uint128_t>(next_u64()) * un;
        lo = static_cast<uint64_t>(m);
      }
    }
    return static_cast<int64_t>(m >> 64);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[randint(i + 1)]);
    }
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4]{};
  bool have_cached_ = false;
  double cached_ = 0.0;
};

// Dense row-major float tensor. Small and value-semantic; all layout
// decisions (NCHW images, [out,in] weights) live in the ops that use it.
struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
  }
  Tensor(Shape s, float fill) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(shape_numel(shape)), fill);
  }
  Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw ShapeError("tensor data size does not match shape " + shape_str(shape));
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, float v) { return Tensor(std::move(s), v); }
  static Tensor scalar(float v) { return Tensor(Shape{}, std::vector<float>{v}); }

  static Tensor randn(Rng& rng, Shape s, float stddev = 1.0f, float mean = 0.0f) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<float>(rng.normal(mean, stddev));
    return t;
  }
  static Tensor rand_uniform(Rng& rng, Shape s, float lo = 0.0f, float hi = 1.0f) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
  }

  float& at(std::initializer_list<int> idx) {
    return data[static_cast<size_t>(flat(idx))];
  }
  float at(std::initializer_list<int> idx) const {
    return data[static_cast<size_t>(flat(idx))];
  }

  int64_t flat(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != ndim())
      throw ShapeError("index rank mismatch for shape " + shape_str(shape));
    int64_t off = 0, stride = 1;
    auto it = idx.end();
    for (int i = ndim() - 1; i >= 0; --i) {
      --it;
      off += *it * stride;
      stride *= shape[static_cast<size_t>(i)];
    }
    return off;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double sum() const {
    double acc = 0.0;
    for (float v : data) acc += v;
    return acc;
  }
  float min() const {
    float m = data.empty() ? 0.0f : data[0];
    for (float v : data) m = std::min(m, v);
    return m;
  }
  float max() const {
    float m = data.empty() ? 0.0f : data[0];
    for (float v : data) m = std::max(m, v);
    return m;
  }
  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// NumPy-style broadcast of two shapes (right-aligned, 1 stretches).
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (size_t i = 0; i < n; ++i) {
    const int da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const int db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Effective strides of `in` viewed as broadcast to `out` (0 on stretched dims).
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  const auto in_st = shape_strides(in);
  const size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i) {
    if (in[i] == out[i + off]) {
      st[i + off] = in_st[i];
    } else if (in[i] == 1) {
      st[i + off] = 0;
    } else {
      throw ShapeError("cannot broadcast " + shape_str(in) + " to " + shape_str(out));
    }
  }
  return st;
}

// Odometer walk over `out_shape` driving up to three offset accumulators.
// f(out_linear, off_a, off_b) is called once per element in row-major order.
template <class F>
void broadcast_walk(const Shape& out_shape, const std::vector<int64_t>& sa,
                    const std::vector<int64_t>& sb, F&& f) {
  const int nd = static_cast<int>(out_shape.size());
  const int64_t total = shape_numel(out_shape);
  if (nd == 0) {
    if (total == 1) f(0, 0, 0);
    return;
  }
  std::vector<int> idx(static_cast<size_t>(nd), 0);
  int64_t oa = 0, ob = 0;
  for (int64_t lin = 0; lin < total; ++lin) {
    f(lin, oa, ob);
    for (int d = nd - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      oa += sa[static_cast<size_t>(d)];
      ob += sb[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      oa -= sa[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      ob -= sb[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
}

}  // namespace archleak

#endif  // ARCHLEAK_TENSOR_HPP_
