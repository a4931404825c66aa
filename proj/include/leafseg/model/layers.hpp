#pragma once

// Building blocks of the network: named parameter storage, Conv-BN-SiLU,
// CSP (C3) stages, SPP, the Focus stem, and the transformer encoder.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "leafseg/autograd/nn_ops.hpp"
#include "leafseg/error.hpp"

namespace leafseg::model {

using ag::Shape;
using ag::Var;

/// Ordered registry of trainable parameters and running-statistic buffers.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    Var<T> var;
    bool trainable = true;
  };

  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  Var<T> add(const std::string& name, Shape shape, std::vector<T> values, bool trainable = true) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter name " + name);
    auto v = Var<T>::from(std::move(shape), std::move(values), trainable);
    index_[name] = entries_.size();
    names_.push_back(name);
    entries_.push_back({v, trainable});
    return v;
  }

  /// Uniform(-bound, bound) initialization.
  Var<T> uniform(const std::string& name, Shape shape, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<T> v(static_cast<std::size_t>(ag::numel(shape)));
    for (auto& x : v) x = static_cast<T>(u(rng_));
    return add(name, std::move(shape), std::move(v));
  }

  Var<T> normal(const std::string& name, Shape shape, double sd) {
    std::normal_distribution<double> n(0.0, sd);
    std::vector<T> v(static_cast<std::size_t>(ag::numel(shape)));
    for (auto& x : v) x = static_cast<T>(n(rng_));
    return add(name, std::move(shape), std::move(v));
  }

  Var<T> constant(const std::string& name, Shape shape, T value, bool trainable = true) {
    std::vector<T> v(static_cast<std::size_t>(ag::numel(shape)), value);
    return add(name, std::move(shape), std::move(v), trainable);
  }

  const std::vector<std::string>& names() const { return names_; }
  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("no parameter named " + name);
    return entries_[it->second];
  }
  Var<T> get(const std::string& name) const { return entry(name).var; }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Var<T>> trainable() const {
    std::vector<Var<T>> out;
    for (const auto& e : entries_)
      if (e.trainable) out.push_back(e.var);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += static_cast<std::size_t>(e.var.size());
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

 private:
  std::mt19937_64 rng_;
  std::vector<std::string> names_;
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

inline constexpr double kBnMomentum = 0.03;
inline constexpr double kBnEps = 1e-3;

/// Conv (no bias) -> BatchNorm -> SiLU.
template <typename T>
struct ConvBn {
  Var<T> w, gamma, beta, mean, var;
  int k = 1, stride = 1;
  bool act = true;

  ConvBn() = default;
  ConvBn(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k_, int stride_ = 1, bool act_ = true)
      : k(k_), stride(stride_), act(act_) {
    w = ps.uniform(name + ".conv.weight", {cout, cin, k, k}, 1.0 / std::sqrt(static_cast<double>(cin * k * k)));
    gamma = ps.constant(name + ".bn.weight", {cout}, T(1));
    beta = ps.constant(name + ".bn.bias", {cout}, T(0));
    mean = ps.constant(name + ".bn.running_mean", {cout}, T(0), false);
    var = ps.constant(name + ".bn.running_var", {cout}, T(1), false);
  }

  Var<T> operator()(const Var<T>& x, bool training) {
    auto y = ag::conv2d(x, w, Var<T>(), stride, k / 2);
    y = ag::batch_norm2d(y, gamma, beta, mean, var, training, T(kBnMomentum), T(kBnEps));
    return act ? ag::silu(y) : y;
  }
};

/// Plain conv with bias (prediction layers).
template <typename T>
struct Conv {
  Var<T> w, b;
  int k = 1, stride = 1;

  Conv() = default;
  Conv(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k_, int stride_ = 1) : k(k_), stride(stride_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    w = ps.uniform(name + ".weight", {cout, cin, k, k}, bound);
    b = ps.uniform(name + ".bias", {cout}, bound);
  }

  Var<T> operator()(const Var<T>& x) const { return ag::conv2d(x, w, b, stride, stride == k ? 0 : k / 2); }
};

template <typename T>
struct Bottleneck {
  ConvBn<T> cv1, cv2;
  bool shortcut = true;

  Bottleneck(ParamStore<T>& ps, const std::string& name, int c, bool shortcut_)
      : cv1(ps, name + ".cv1", c, c, 1), cv2(ps, name + ".cv2", c, c, 3), shortcut(shortcut_) {}

  Var<T> operator()(const Var<T>& x, bool training) {
    auto y = cv2(cv1(x, training), training);
    return shortcut ? x + y : y;
  }
};

/// CSP bottleneck with three convolutions: the input is split into a
/// processed branch (cv1 + bottlenecks) and a shortcut branch (cv2), then
/// merged by cv3.
template <typename T>
struct C3 {
  ConvBn<T> cv1, cv2, cv3;
  std::vector<Bottleneck<T>> m;

  C3() = default;
  C3(ParamStore<T>& ps, const std::string& name, int cin, int cout, int n, bool shortcut) {
    const int c = cout / 2;
    cv1 = ConvBn<T>(ps, name + ".cv1", cin, c, 1);
    cv2 = ConvBn<T>(ps, name + ".cv2", cin, c, 1);
    for (int i = 0; i < n; ++i) m.emplace_back(ps, name + ".m." + std::to_string(i), c, shortcut);
    cv3 = ConvBn<T>(ps, name + ".cv3", 2 * c, cout, 1);
  }

  Var<T> operator()(const Var<T>& x, bool training) {
    auto a = cv1(x, training);
    for (auto& b : m) a = b(a, training);
    return cv3(ag::concat<T>({a, cv2(x, training)}, 1), training);
  }
};

/// Spatial pyramid pooling: parallel max pools (5, 9, 13) concatenated with
/// the unpooled map.
template <typename T>
struct Spp {
  ConvBn<T> cv1, cv2;

  Spp() = default;
  Spp(ParamStore<T>& ps, const std::string& name, int cin, int cout)
      : cv1(ps, name + ".cv1", cin, cin / 2, 1), cv2(ps, name + ".cv2", cin / 2 * 4, cout, 1) {}

  Var<T> operator()(const Var<T>& x, bool training) {
    auto y = cv1(x, training);
    return cv2(ag::concat<T>({y, ag::max_pool_same(y, 5), ag::max_pool_same(y, 9), ag::max_pool_same(y, 13)}, 1),
               training);
  }
};

/// Focus stem: space-to-depth slicing followed by a 3x3 Conv-BN-SiLU.
template <typename T>
struct Focus {
  ConvBn<T> conv;

  Focus() = default;
  Focus(ParamStore<T>& ps, const std::string& name, int cin, int cout) : conv(ps, name + ".conv", 4 * cin, cout, 3) {}

  Var<T> operator()(const Var<T>& x, bool training) { return conv(ag::space_to_depth2(x), training); }
};

// ---------------------------------------------------------------------------
// Focus slicing on plain rasters.

/// [C, H, W] -> [4C, H/2, W/2]. Output block j holds the parity subsample
/// (dy, dx) = (0,0), (1,0), (0,1), (1,1) for j = 0..3, each block ordered by
/// input channel: out[j*C + c][y][x] = in[c][2y+dy][2x+dx].
template <typename T>
std::vector<T> focus_slice(const std::vector<T>& x, int c, int h, int w) {
  if (h % 2 || w % 2) throw InvalidArgument("focus_slice needs even height and width, got " + std::to_string(h) + "x" +
                                            std::to_string(w));
  if (x.size() != static_cast<std::size_t>(c) * h * w) throw InvalidArgument("focus_slice: buffer size mismatch");
  const int oh = h / 2, ow = w / 2;
  static constexpr int kDy[4] = {0, 1, 0, 1};
  static constexpr int kDx[4] = {0, 0, 1, 1};
  std::vector<T> out(x.size());
  for (int j = 0; j < 4; ++j)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
          out[((static_cast<std::size_t>(j) * c + ch) * oh + y) * ow + xx] =
              x[(static_cast<std::size_t>(ch) * h + 2 * y + kDy[j]) * w + 2 * xx + kDx[j]];
  return out;
}

/// Inverse of focus_slice: [4C, H/2, W/2] -> [C, H, W].
template <typename T>
std::vector<T> focus_unslice(const std::vector<T>& x, int c, int h, int w) {
  const int oh = h / 2, ow = w / 2;
  static constexpr int kDy[4] = {0, 1, 0, 1};
  static constexpr int kDx[4] = {0, 0, 1, 1};
  if (x.size() != static_cast<std::size_t>(c) * h * w || h % 2 || w % 2)
    throw InvalidArgument("focus_unslice: shape mismatch");
  std::vector<T> out(x.size());
  for (int j = 0; j < 4; ++j)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
          out[(static_cast<std::size_t>(ch) * h + 2 * y + kDy[j]) * w + 2 * xx + kDx[j]] =
              x[((static_cast<std::size_t>(j) * c + ch) * oh + y) * ow + xx];
  return out;
}

// ---------------------------------------------------------------------------
// Stem adaptation from 3 to 9 input channels.

enum class AdaptMode { Replicate, Average, Zero };

inline AdaptMode parse_adapt_mode(const std::string& s) {
  if (s == "replicate") return AdaptMode::Replicate;
  if (s == "average") return AdaptMode::Average;
  if (s == "zero") return AdaptMode::Zero;
  throw InvalidArgument("unknown adaptation mode '" + s + "' (replicate, average, zero)");
}

/// Widens a [out, 3, k, k] kernel to [out, 9, k, k]. Channels 0..2 are
/// copied verbatim. Extra channels: Replicate draws from a normal with the
/// standard deviation of w3, Average uses the mean of the three planes, Zero
/// leaves them at 0.
template <typename T>
std::vector<T> adapt_first_conv(const std::vector<T>& w3, int out, int k, AdaptMode mode, std::uint64_t seed = 0) {
  const std::size_t kk = static_cast<std::size_t>(k) * k;
  if (w3.size() != static_cast<std::size_t>(out) * 3 * kk) throw InvalidArgument("adapt_first_conv: w3 must be [out,3,k,k]");
  std::vector<T> w9(static_cast<std::size_t>(out) * 9 * kk, T(0));
  double mean = 0, sq = 0;
  for (T v : w3) mean += static_cast<double>(v);
  mean /= static_cast<double>(w3.size());
  for (T v : w3) sq += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
  const double sd = std::sqrt(sq / static_cast<double>(w3.size()));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, sd > 0 ? sd : 1e-2);
  for (int o = 0; o < out; ++o) {
    const T* src = w3.data() + static_cast<std::size_t>(o) * 3 * kk;
    T* dst = w9.data() + static_cast<std::size_t>(o) * 9 * kk;
    std::copy(src, src + 3 * kk, dst);
    for (int c = 3; c < 9; ++c)
      for (std::size_t i = 0; i < kk; ++i) {
        T& d = dst[c * kk + i];
        switch (mode) {
          case AdaptMode::Replicate: d = static_cast<T>(gauss(rng)); break;
          case AdaptMode::Average: d = (src[i] + src[kk + i] + src[2 * kk + i]) / T(3); break;
          case AdaptMode::Zero: d = T(0); break;
        }
      }
  }
  return w9;
}

// ---------------------------------------------------------------------------
// Transformer encoder.

template <typename T>
struct MhsaWeights {
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;  // [d, d] and [d]
  int heads = 1;

  MhsaWeights() = default;
  MhsaWeights(ParamStore<T>& ps, const std::string& name, int d, int heads_) : heads(heads_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    wq = ps.uniform(name + ".q.weight", {d, d}, bound);
    bq = ps.constant(name + ".q.bias", {d}, T(0));
    wk = ps.uniform(name + ".k.weight", {d, d}, bound);
    bk = ps.constant(name + ".k.bias", {d}, T(0));
    wv = ps.uniform(name + ".v.weight", {d, d}, bound);
    bv = ps.constant(name + ".v.bias", {d}, T(0));
    wo = ps.uniform(name + ".out.weight", {d, d}, bound);
    bo = ps.constant(name + ".out.bias", {d}, T(0));
  }
};

/// Multi-head self-attention over x [B, N, d]. When `attention` is given it
/// receives the softmax weights [B*heads, N, N].
template <typename T>
Var<T> mhsa(const Var<T>& x, const MhsaWeights<T>& p, Var<T>* attention = nullptr) {
  if (x.rank() != 3) throw InvalidArgument("mhsa expects [B, N, d] tokens");
  const std::int64_t B = x.dim(0), N = x.dim(1), d = x.dim(2), h = p.heads, dk = d / h;
  if (d % h != 0) throw InvalidArgument("mhsa: d not divisible by heads");
  auto split = [&](const Var<T>& t) {
    return ag::reshape(ag::permute(ag::reshape(t, {B, N, h, dk}), {0, 2, 1, 3}), {B * h, N, dk});
  };
  auto q = split(ag::linear(x, p.wq, p.bq));
  auto k = split(ag::linear(x, p.wk, p.bk));
  auto v = split(ag::linear(x, p.wv, p.bv));
  auto a = ag::softmax_last(ag::scale(ag::bmm(q, k, false, true), T(1) / std::sqrt(static_cast<T>(dk))));
  if (attention) *attention = a;
  auto o = ag::reshape(ag::permute(ag::reshape(ag::bmm(a, v), {B, h, N, dk}), {0, 2, 1, 3}), {B, N, d});
  return ag::linear(o, p.wo, p.bo);
}

template <typename T>
struct EncoderLayer {
  Var<T> ln1_g, ln1_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  MhsaWeights<T> attn;

  EncoderLayer(ParamStore<T>& ps, const std::string& name, int d, int heads) {
    ln1_g = ps.constant(name + ".ln1.weight", {d}, T(1));
    ln1_b = ps.constant(name + ".ln1.bias", {d}, T(0));
    attn = MhsaWeights<T>(ps, name + ".attn", d, heads);
    ln2_g = ps.constant(name + ".ln2.weight", {d}, T(1));
    ln2_b = ps.constant(name + ".ln2.bias", {d}, T(0));
    fc1_w = ps.uniform(name + ".mlp.fc1.weight", {4 * d, d}, 1.0 / std::sqrt(static_cast<double>(d)));
    fc1_b = ps.constant(name + ".mlp.fc1.bias", {4 * d}, T(0));
    fc2_w = ps.uniform(name + ".mlp.fc2.weight", {d, 4 * d}, 1.0 / std::sqrt(static_cast<double>(4 * d)));
    fc2_b = ps.constant(name + ".mlp.fc2.bias", {d}, T(0));
  }

  /// Pre-norm block: x' = x + MHSA(LN(x)); y = x' + MLP(LN(x')).
  Var<T> operator()(const Var<T>& x, Var<T>* attention = nullptr) const {
    auto z = x + mhsa(ag::layer_norm(x, ln1_g, ln1_b), attn, attention);
    auto m = ag::linear(ag::gelu(ag::linear(ag::layer_norm(z, ln2_g, ln2_b), fc1_w, fc1_b)), fc2_w, fc2_b);
    return z + m;
  }
};

/// Adds the positional embedding pos [N, d] to x [B, N, d] and applies the
/// encoder layers in order.
template <typename T>
Var<T> transformer_encoder(const Var<T>& x, const Var<T>& pos, const std::vector<EncoderLayer<T>>& layers) {
  if (pos.rank() != 2 || x.rank() != 3 || pos.dim(0) != x.dim(1) || pos.dim(1) != x.dim(2))
    throw InvalidArgument("transformer_encoder: tokens " + ag::shape_str(x.shape()) + " vs positions " +
                          ag::shape_str(pos.shape()));
  auto y = x + pos;
  for (const auto& l : layers) y = l(y);
  return y;
}

}  // namespace leafseg::model
