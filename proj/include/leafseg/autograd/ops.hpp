#pragma once

// Elementwise, reduction and shape ops.

#include <cmath>
#include <limits>

#include "leafseg/autograd/tensor.hpp"

namespace leafseg::ag {

namespace detail {

// `b` may equal `a` in shape or match a trailing suffix of it (broadcast over
// the leading dims). Returns the period of `b` within `a`.
inline std::size_t broadcast_period(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return static_cast<std::size_t>(numel(a));
  check(b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin()),
        std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
  return static_cast<std::size_t>(numel(b));
}

template <typename T, typename Fwd, typename DA, typename DB>
Var<T> binary(const Var<T>& a, const Var<T>& b, const char* name, Fwd f, DA da, DB db) {
  const std::size_t period = broadcast_period(a.shape(), b.shape(), name);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i % period]);
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b, period, da, db](Node<T>& o) {
    const auto& av = a.values();
    const auto& bv = b.values();
    if (auto* ga = grad_of(a))
      for (std::size_t i = 0; i < av.size(); ++i)
        (*ga)[i] += o.grad[i] * da(av[i], bv[i % period], o.value[i]);
    if (auto* gb = grad_of(b))
      for (std::size_t i = 0; i < av.size(); ++i)
        (*gb)[i % period] += o.grad[i] * db(av[i], bv[i % period], o.value[i]);
  });
}

// `d` receives (x, y) and returns dy/dx.
template <typename T, typename Fwd, typename D>
Var<T> unary(const Var<T>& a, Fwd f, D d) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result<T>(a.shape(), std::move(out), {a}, [a, d](Node<T>& o) {
    auto* ga = grad_of(a);
    if (!ga) return;
    const auto& av = a.values();
    for (std::size_t i = 0; i < av.size(); ++i) (*ga)[i] += o.grad[i] * d(av[i], o.value[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return detail::binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T x, T y, T) { return -x / (y * y); });
}

// Ties send the gradient to the first argument.
template <typename T>
Var<T> minimum(const Var<T>& a, const Var<T>& b) {
  return detail::binary(
      a, b, "minimum", [](T x, T y) { return std::min(x, y); },
      [](T x, T y, T) { return x <= y ? T(1) : T(0); },
      [](T x, T y, T) { return x <= y ? T(0) : T(1); });
}

template <typename T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  return detail::binary(
      a, b, "maximum", [](T x, T y) { return std::max(x, y); },
      [](T x, T y, T) { return x >= y ? T(1) : T(0); },
      [](T x, T y, T) { return x >= y ? T(0) : T(1); });
}

template <typename T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T> Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> atan(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return std::atan(x); }, [](T x, T) { return T(1) / (T(1) + x * x); });
}

template <typename T>
inline T sigmoid_scalar(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x * sigmoid_scalar(x); },
      [](T x, T) {
        const T s = sigmoid_scalar(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

/// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary(
      a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-T(0.5) * x * x);
      });
}

template <typename T>
Var<T> clamp_min(const Var<T>& a, T lo) {
  return detail::unary(
      a, [lo](T x) { return std::max(x, lo); }, [lo](T x, T) { return x >= lo ? T(1) : T(0); });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  return make_result<T>({}, {s}, {a}, [a](Node<T>& o) {
    if (auto* ga = grad_of(a))
      for (auto& g : *ga) g += o.grad[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  check(a.size() > 0, "mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Copy with a new shape of the same element count.
template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  check(numel(shape) == a.size(),
        "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return make_result<T>(std::move(shape), a.values(), {a}, [a](Node<T>& o) {
    if (auto* ga = grad_of(a))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i];
  });
}

/// Generic axis permutation: out.shape[i] = a.shape[perm[i]].
template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<int>& perm) {
  const auto rank = a.shape().size();
  check(perm.size() == rank, "permute: rank mismatch");
  Shape out_shape(rank);
  std::vector<std::int64_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.shape()[i];
  std::vector<std::int64_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = a.shape()[static_cast<std::size_t>(perm[i])];
    src_stride[i] = in_strides[static_cast<std::size_t>(perm[i])];
  }
  const auto total = static_cast<std::size_t>(a.size());
  std::vector<std::size_t> map(total);
  std::vector<std::int64_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::int64_t src = 0;
    for (std::size_t i = 0; i < rank; ++i) src += idx[i] * src_stride[i];
    map[flat] = static_cast<std::size_t>(src);
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  const auto& av = a.values();
  std::vector<T> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = av[map[i]];
  return make_result<T>(std::move(out_shape), std::move(out), {a},
                        [a, map = std::move(map)](Node<T>& o) {
                          if (auto* ga = grad_of(a))
                            for (std::size_t i = 0; i < map.size(); ++i) (*ga)[map[i]] += o.grad[i];
                        });
}

/// Concatenation along `axis`; all other dims must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  check(!parts.empty(), "concat of nothing");
  const Shape& s0 = parts[0].shape();
  const auto rank = static_cast<int>(s0.size());
  if (axis < 0) axis += rank;
  std::int64_t outer = 1, inner = 1, total_axis = 0;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= s0[static_cast<std::size_t>(i)];
  for (const auto& p : parts) {
    check(p.rank() == rank, "concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis)
        check(p.shape()[static_cast<std::size_t>(i)] == s0[static_cast<std::size_t>(i)],
              "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
    total_axis += p.shape()[static_cast<std::size_t>(axis)];
  }
  Shape out_shape = s0;
  out_shape[static_cast<std::size_t>(axis)] = total_axis;
  std::vector<T> out(static_cast<std::size_t>(outer * total_axis * inner));
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t len = p.shape()[static_cast<std::size_t>(axis)] * inner;
    const auto& pv = p.values();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * len, len, out.begin() + o * total_axis * inner + offset);
    offset += len;
  }
  return make_result<T>(std::move(out_shape), std::move(out), parts,
                        [parts, outer, inner, total_axis](Node<T>& o) {
                          std::int64_t off = 0;
                          for (const auto& p : parts) {
                            const std::int64_t len = p.size() / outer;
                            if (auto* gp = grad_of(p))
                              for (std::int64_t r = 0; r < outer; ++r)
                                for (std::int64_t i = 0; i < len; ++i)
                                  (*gp)[static_cast<std::size_t>(r * len + i)] +=
                                      o.grad[static_cast<std::size_t>(r * total_axis * inner + off + i)];
                            off += len;
                          }
                        });
}

/// Columns [start, start+len) of the last axis.
template <typename T>
Var<T> slice_last(const Var<T>& a, std::int64_t start, std::int64_t len) {
  const std::int64_t width = a.dim(-1);
  check(start >= 0 && len >= 0 && start + len <= width, "slice_last out of range");
  const std::int64_t rows = a.size() / std::max<std::int64_t>(width, 1);
  Shape shape = a.shape();
  shape.back() = len;
  std::vector<T> out(static_cast<std::size_t>(rows * len));
  const auto& av = a.values();
  for (std::int64_t r = 0; r < rows; ++r)
    std::copy_n(av.begin() + r * width + start, len, out.begin() + r * len);
  return make_result<T>(std::move(shape), std::move(out), {a},
                        [a, rows, width, start, len](Node<T>& o) {
                          if (auto* ga = grad_of(a))
                            for (std::int64_t r = 0; r < rows; ++r)
                              for (std::int64_t c = 0; c < len; ++c)
                                (*ga)[static_cast<std::size_t>(r * width + start + c)] +=
                                    o.grad[static_cast<std::size_t>(r * len + c)];
                        });
}

/// Gathers rows of a [rows, width] view of `a` (last axis = width).
template <typename T>
Var<T> index_rows(const Var<T>& a, std::vector<std::int64_t> rows) {
  const std::int64_t width = a.dim(-1);
  const std::int64_t n_rows = a.size() / std::max<std::int64_t>(width, 1);
  std::vector<T> out(rows.size() * static_cast<std::size_t>(width));
  const auto& av = a.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    check(rows[i] >= 0 && rows[i] < n_rows, "index_rows: row out of range");
    std::copy_n(av.begin() + rows[i] * width, width, out.begin() + static_cast<std::int64_t>(i) * width);
  }
  const auto n_out = static_cast<std::int64_t>(rows.size());
  return make_result<T>({n_out, width}, std::move(out), {a},
                        [a, width, rows = std::move(rows)](Node<T>& o) {
                          if (auto* ga = grad_of(a))
                            for (std::size_t i = 0; i < rows.size(); ++i)
                              for (std::int64_t c = 0; c < width; ++c)
                                (*ga)[static_cast<std::size_t>(rows[i] * width + c)] +=
                                    o.grad[i * static_cast<std::size_t>(width) + static_cast<std::size_t>(c)];
                        });
}

/// Sum of w_i * BCE(sigmoid(logit_i), target_i), computed stably.
/// `weights` may be empty (all ones).
template <typename T>
Var<T> bce_with_logits_sum(const Var<T>& logits, std::vector<T> targets, std::vector<T> weights = {}) {
  const auto& x = logits.values();
  check(targets.size() == x.size(), "bce: target size mismatch");
  check(weights.empty() || weights.size() == x.size(), "bce: weight size mismatch");
  T total = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T w = weights.empty() ? T(1) : weights[i];
    if (w == T(0)) continue;
    const T v = x[i];
    // max(v,0) - v*t + log(1 + exp(-|v|))
    total += w * (std::max(v, T(0)) - v * targets[i] + std::log1p(std::exp(-std::abs(v))));
  }
  return make_result<T>({}, {total}, {logits},
                        [logits, targets = std::move(targets), weights = std::move(weights)](Node<T>& o) {
                          auto* g = grad_of(logits);
                          if (!g) return;
                          const auto& x = logits.values();
                          for (std::size_t i = 0; i < x.size(); ++i) {
                            const T w = weights.empty() ? T(1) : weights[i];
                            (*g)[i] += o.grad[0] * w * (sigmoid_scalar(x[i]) - targets[i]);
                          }
                        });
}

}  // namespace leafseg::ag
