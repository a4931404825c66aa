#pragma once

// Dense layer primitives: convolution, normalization, pooling, resampling,
// matrix products and the softmax used by attention. Image tensors are NCHW.

#include <Eigen/Core>

#include "leafseg/autograd/ops.hpp"

namespace leafseg::ag {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// Sequential sum. Eigen's vectorized reductions peel by the runtime address,
// so their rounding would depend on where the allocator placed the buffer.
template <typename T>
T plain_sum(const T* p, std::int64_t n, std::int64_t stride) {
  T s = T(0);
  for (std::int64_t i = 0; i < n; ++i) s += p[i * stride];
  return s;
}

struct ConvGeom {
  std::int64_t batch, in_c, in_h, in_w, out_c, k, stride, pad, out_h, out_w;
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::int64_t hw = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.in_c; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        const T* plane = x + c * g.in_h * g.in_w;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill_n(dst, g.out_w, T(0));
            continue;
          }
          const T* src = plane + iy * g.in_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* dx) {
  const std::int64_t hw = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.in_c; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        T* plane = dx + c * g.in_h * g.in_w;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          T* dst = plane + iy * g.in_w;
          const T* src = row + oy * g.out_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution. x [B,Ci,H,W], weight [Co,Ci,k,k], bias [Co] or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::int64_t stride,
              std::int64_t pad) {
  check(x.rank() == 4 && weight.rank() == 4, "conv2d expects 4-D input and weight");
  check(weight.dim(2) == weight.dim(3), "conv2d: square kernels only");
  check(x.dim(1) == weight.dim(1), "conv2d: input has " + std::to_string(x.dim(1)) +
                                       " channels, weight expects " + std::to_string(weight.dim(1)));
  detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), stride, pad, 0, 0};
  g.out_h = (g.in_h + 2 * pad - g.k) / stride + 1;
  g.out_w = (g.in_w + 2 * pad - g.k) / stride + 1;
  check(g.out_h > 0 && g.out_w > 0, "conv2d: output would be empty for input " + shape_str(x.shape()));
  if (bias.defined()) check(bias.size() == g.out_c, "conv2d: bias size mismatch");

  const std::int64_t hw = g.out_h * g.out_w;
  const std::int64_t kdim = g.in_c * g.k * g.k;
  std::vector<T> out(static_cast<std::size_t>(g.batch * g.out_c * hw));
  std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(kdim * hw));
  detail::CMapMat<T> w(weight.values().data(), g.out_c, kdim);
  for (std::int64_t b = 0; b < g.batch; ++b) {
    const T* xb = x.values().data() + b * g.in_c * g.in_h * g.in_w;
    const T* cp = xb;
    if (!g.pointwise()) {
      detail::im2col(xb, g, col.data());
      cp = col.data();
    }
    detail::MapMat<T> ob(out.data() + b * g.out_c * hw, g.out_c, hw);
    ob.noalias() = w * detail::CMapMat<T>(cp, kdim, hw);
    if (bias.defined())
      for (std::int64_t c = 0; c < g.out_c; ++c) ob.row(c).array() += bias.values()[static_cast<std::size_t>(c)];
  }
  return make_result<T>({g.batch, g.out_c, g.out_h, g.out_w}, std::move(out), {x, weight, bias},
                        [x, weight, bias, g](Node<T>& o) {
                          const std::int64_t hw = g.out_h * g.out_w;
                          const std::int64_t kdim = g.in_c * g.k * g.k;
                          auto* gx = grad_of(x);
                          auto* gw = grad_of(weight);
                          auto* gb = grad_of(bias);
                          std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(kdim * hw));
                          std::vector<T> dcol(gx && !g.pointwise() ? static_cast<std::size_t>(kdim * hw) : 0);
                          detail::CMapMat<T> w(weight.values().data(), g.out_c, kdim);
                          for (std::int64_t b = 0; b < g.batch; ++b) {
                            detail::CMapMat<T> go(o.grad.data() + b * g.out_c * hw, g.out_c, hw);
                            const T* xb = x.values().data() + b * g.in_c * g.in_h * g.in_w;
                            if (gb)
                              for (std::int64_t c = 0; c < g.out_c; ++c) (*gb)[static_cast<std::size_t>(c)] += detail::plain_sum(go.data() + c * hw, hw, 1);
                            if (gw) {
                              const T* cp = xb;
                              if (!g.pointwise()) {
                                detail::im2col(xb, g, col.data());
                                cp = col.data();
                              }
                              detail::MapMat<T>(gw->data(), g.out_c, kdim).noalias() +=
                                  go * detail::CMapMat<T>(cp, kdim, hw).transpose();
                            }
                            if (gx) {
                              T* dxb = gx->data() + b * g.in_c * g.in_h * g.in_w;
                              if (g.pointwise()) {
                                detail::MapMat<T>(dxb, kdim, hw).noalias() += w.transpose() * go;
                              } else {
                                detail::MapMat<T>(dcol.data(), kdim, hw).noalias() = w.transpose() * go;
                                detail::col2im(dcol.data(), g, dxb);
                              }
                            }
                          }
                        });
}

/// Batch normalization over (B, H, W) per channel. In training mode the batch
/// statistics are used and the running buffers are updated in place with
/// `momentum` (fraction of the new statistic); in eval mode the running
/// buffers are used.
template <typename T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Var<T>& running_mean,
                    Var<T>& running_var, bool training, T momentum, T eps) {
  check(x.rank() == 4, "batch_norm2d expects NCHW");
  const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  check(gamma.size() == C && beta.size() == C, "batch_norm2d: parameter size mismatch");
  const auto& xv = x.values();
  std::vector<T> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  const T count = static_cast<T>(B * HW);
  if (training) {
    for (std::int64_t c = 0; c < C; ++c) {
      double s = 0, s2 = 0;
      for (std::int64_t b = 0; b < B; ++b) {
        const T* p = xv.data() + (b * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      for (std::int64_t b = 0; b < B; ++b) {
        const T* p = xv.data() + (b * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) s2 += (p[i] - m) * (p[i] - m);
      }
      const double var = s2 / static_cast<double>(count);
      mean[static_cast<std::size_t>(c)] = static_cast<T>(m);
      invstd[static_cast<std::size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
      auto& rm = running_mean.values()[static_cast<std::size_t>(c)];
      auto& rv = running_var.values()[static_cast<std::size_t>(c)];
      rm = static_cast<T>((1 - static_cast<double>(momentum)) * rm + static_cast<double>(momentum) * m);
      rv = static_cast<T>((1 - static_cast<double>(momentum)) * rv + static_cast<double>(momentum) * unbiased);
    }
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = running_mean.values()[static_cast<std::size_t>(c)];
      invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(running_var.values()[static_cast<std::size_t>(c)] + eps);
    }
  }
  std::vector<T> out(xv.size());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const T a = gamma.values()[ci] * invstd[ci];
      const T shift = beta.values()[ci] - a * mean[ci];
      const T* p = xv.data() + (b * C + c) * HW;
      T* q = out.data() + (b * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) q[i] = a * p[i] + shift;
    }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [x, gamma, beta, mean = std::move(mean), invstd = std::move(invstd), training, B, C,
                         HW](Node<T>& o) {
                          const auto& xv = x.values();
                          auto* gx = grad_of(x);
                          auto* gg = grad_of(gamma);
                          auto* gbeta = grad_of(beta);
                          const T n = static_cast<T>(B * HW);
                          for (std::int64_t c = 0; c < C; ++c) {
                            const auto ci = static_cast<std::size_t>(c);
                            T sum_g = 0, sum_gx = 0;
                            for (std::int64_t b = 0; b < B; ++b) {
                              const T* p = xv.data() + (b * C + c) * HW;
                              const T* go = o.grad.data() + (b * C + c) * HW;
                              for (std::int64_t i = 0; i < HW; ++i) {
                                sum_g += go[i];
                                sum_gx += go[i] * (p[i] - mean[ci]) * invstd[ci];
                              }
                            }
                            if (gg) (*gg)[ci] += sum_gx;
                            if (gbeta) (*gbeta)[ci] += sum_g;
                            if (!gx) continue;
                            const T gam = gamma.values()[ci];
                            for (std::int64_t b = 0; b < B; ++b) {
                              const T* p = xv.data() + (b * C + c) * HW;
                              const T* go = o.grad.data() + (b * C + c) * HW;
                              T* dx = gx->data() + (b * C + c) * HW;
                              if (training) {
                                for (std::int64_t i = 0; i < HW; ++i) {
                                  const T xhat = (p[i] - mean[ci]) * invstd[ci];
                                  dx[i] += gam * invstd[ci] * (go[i] - sum_g / n - xhat * sum_gx / n);
                                }
                              } else {
                                for (std::int64_t i = 0; i < HW; ++i) dx[i] += gam * invstd[ci] * go[i];
                              }
                            }
                          }
                        });
}

/// Max pooling with stride 1 and "same" padding (odd kernel), as used by SPP.
template <typename T>
Var<T> max_pool_same(const Var<T>& x, std::int64_t k) {
  check(x.rank() == 4 && k % 2 == 1, "max_pool_same: NCHW input and odd kernel required");
  const std::int64_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3), r = k / 2;
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  std::vector<std::int32_t> arg(xv.size());
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * H * W;
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t xx = 0; xx < W; ++xx) {
        T best = -std::numeric_limits<T>::infinity();
        std::int32_t bi = 0;
        for (std::int64_t yy = std::max<std::int64_t>(0, y - r); yy <= std::min(H - 1, y + r); ++yy)
          for (std::int64_t x2 = std::max<std::int64_t>(0, xx - r); x2 <= std::min(W - 1, xx + r); ++x2)
            if (src[yy * W + x2] > best) {
              best = src[yy * W + x2];
              bi = static_cast<std::int32_t>(yy * W + x2);
            }
        out[static_cast<std::size_t>(p * H * W + y * W + xx)] = best;
        arg[static_cast<std::size_t>(p * H * W + y * W + xx)] = bi;
      }
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [x, arg = std::move(arg), H, W](Node<T>& o) {
    auto* gx = grad_of(x);
    if (!gx) return;
    const std::int64_t plane = H * W;
    for (std::size_t i = 0; i < arg.size(); ++i)
      (*gx)[static_cast<std::size_t>(static_cast<std::int64_t>(i) / plane * plane + arg[i])] += o.grad[i];
  });
}

/// Nearest-neighbour upsampling by an integer factor.
template <typename T>
Var<T> upsample_nearest(const Var<T>& x, std::int64_t f) {
  check(x.rank() == 4 && f >= 1, "upsample_nearest: NCHW input and factor >= 1 required");
  const std::int64_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(planes * H * W * f * f));
  const auto& xv = x.values();
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t y = 0; y < H * f; ++y)
      for (std::int64_t xx = 0; xx < W * f; ++xx)
        out[static_cast<std::size_t>((p * H * f + y) * W * f + xx)] =
            xv[static_cast<std::size_t>((p * H + y / f) * W + xx / f)];
  return make_result<T>({x.dim(0), x.dim(1), H * f, W * f}, std::move(out), {x},
                        [x, planes, H, W, f](Node<T>& o) {
                          auto* gx = grad_of(x);
                          if (!gx) return;
                          for (std::int64_t p = 0; p < planes; ++p)
                            for (std::int64_t y = 0; y < H * f; ++y)
                              for (std::int64_t xx = 0; xx < W * f; ++xx)
                                (*gx)[static_cast<std::size_t>((p * H + y / f) * W + xx / f)] +=
                                    o.grad[static_cast<std::size_t>((p * H * f + y) * W * f + xx)];
                        });
}

namespace detail {
struct LerpTap {
  std::int64_t i0, i1;
  double w1;
};
// Half-pixel-centre sampling (align_corners = false).
inline std::vector<LerpTap> lerp_taps(std::int64_t in, std::int64_t f) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(in * f));
  for (std::int64_t o = 0; o < in * f; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(f) - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace detail

/// Bilinear upsampling by an integer factor with half-pixel centres.
template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, std::int64_t f) {
  check(x.rank() == 4 && f >= 1, "upsample_bilinear: NCHW input and factor >= 1 required");
  const std::int64_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  auto ty = detail::lerp_taps(H, f);
  auto tx = detail::lerp_taps(W, f);
  const std::int64_t OH = H * f, OW = W * f;
  std::vector<T> out(static_cast<std::size_t>(planes * OH * OW));
  const auto& xv = x.values();
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * H * W;
    T* dst = out.data() + p * OH * OW;
    for (std::int64_t y = 0; y < OH; ++y) {
      const auto& a = ty[static_cast<std::size_t>(y)];
      const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
      for (std::int64_t xx = 0; xx < OW; ++xx) {
        const auto& b = tx[static_cast<std::size_t>(xx)];
        const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
        dst[y * OW + xx] = wy0 * (wx0 * src[a.i0 * W + b.i0] + wx1 * src[a.i0 * W + b.i1]) +
                           wy1 * (wx0 * src[a.i1 * W + b.i0] + wx1 * src[a.i1 * W + b.i1]);
      }
    }
  }
  return make_result<T>({x.dim(0), x.dim(1), OH, OW}, std::move(out), {x},
                        [x, planes, H, W, OH, OW, ty = std::move(ty), tx = std::move(tx)](Node<T>& o) {
                          auto* gx = grad_of(x);
                          if (!gx) return;
                          for (std::int64_t p = 0; p < planes; ++p) {
                            T* dsrc = gx->data() + p * H * W;
                            const T* g = o.grad.data() + p * OH * OW;
                            for (std::int64_t y = 0; y < OH; ++y) {
                              const auto& a = ty[static_cast<std::size_t>(y)];
                              const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
                              for (std::int64_t xx = 0; xx < OW; ++xx) {
                                const auto& b = tx[static_cast<std::size_t>(xx)];
                                const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
                                const T v = g[y * OW + xx];
                                dsrc[a.i0 * W + b.i0] += v * wy0 * wx0;
                                dsrc[a.i0 * W + b.i1] += v * wy0 * wx1;
                                dsrc[a.i1 * W + b.i0] += v * wy1 * wx0;
                                dsrc[a.i1 * W + b.i1] += v * wy1 * wx1;
                              }
                            }
                          }
                        });
}

/// Space-to-depth by 2. Output channel block q (q = 0..3) holds parity
/// subsample (row offset, col offset) = (0,0), (1,0), (0,1), (1,1) of every
/// input channel: out[q*C + c, i, j] = x[c, 2i + dy_q, 2j + dx_q].
template <typename T>
Var<T> space_to_depth2(const Var<T>& x) {
  check(x.rank() == 4, "space_to_depth2 expects NCHW");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(H % 2 == 0 && W % 2 == 0,
        "focus slicing requires even height and width, got " + std::to_string(H) + "x" + std::to_string(W));
  static constexpr std::int64_t dy[4] = {0, 1, 0, 1};
  static constexpr std::int64_t dx[4] = {0, 0, 1, 1};
  const std::int64_t h = H / 2, w = W / 2;
  std::vector<std::size_t> map(static_cast<std::size_t>(x.size()));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t q = 0; q < 4; ++q)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < h; ++i)
          for (std::int64_t j = 0; j < w; ++j)
            map[static_cast<std::size_t>((((b * 4 + q) * C + c) * h + i) * w + j)] =
                static_cast<std::size_t>(((b * C + c) * H + 2 * i + dy[q]) * W + 2 * j + dx[q]);
  std::vector<T> out(map.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = xv[map[i]];
  return make_result<T>({B, 4 * C, h, w}, std::move(out), {x}, [x, map = std::move(map)](Node<T>& o) {
    if (auto* gx = grad_of(x))
      for (std::size_t i = 0; i < map.size(); ++i) (*gx)[map[i]] += o.grad[i];
  });
}

/// x [..., in] times weight [out, in]^T plus bias [out] (bias may be undefined).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const std::int64_t in = weight.dim(1), outf = weight.dim(0);
  check(x.dim(-1) == in, "linear: input features " + std::to_string(x.dim(-1)) + " != " + std::to_string(in));
  const std::int64_t rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = outf;
  std::vector<T> out(static_cast<std::size_t>(rows * outf));
  detail::MapMat<T> om(out.data(), rows, outf);
  om.noalias() = detail::CMapMat<T>(x.values().data(), rows, in) *
                 detail::CMapMat<T>(weight.values().data(), outf, in).transpose();
  if (bias.defined())
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < outf; ++c) om(r, c) += bias.values()[static_cast<std::size_t>(c)];
  return make_result<T>(std::move(shape), std::move(out), {x, weight, bias},
                        [x, weight, bias, rows, in, outf](Node<T>& o) {
                          detail::CMapMat<T> go(o.grad.data(), rows, outf);
                          if (auto* gx = grad_of(x))
                            detail::MapMat<T>(gx->data(), rows, in).noalias() +=
                                go * detail::CMapMat<T>(weight.values().data(), outf, in);
                          if (auto* gw = grad_of(weight))
                            detail::MapMat<T>(gw->data(), outf, in).noalias() +=
                                go.transpose() * detail::CMapMat<T>(x.values().data(), rows, in);
                          if (auto* gb = grad_of(bias))
                            for (std::int64_t c = 0; c < outf; ++c) (*gb)[static_cast<std::size_t>(c)] += detail::plain_sum(go.data() + c, rows, outf);
                        });
}

/// 2-D matrix product a [M,K] x b [K,N].
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
        "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(M * N));
  detail::MapMat<T>(out.data(), M, N).noalias() =
      detail::CMapMat<T>(a.values().data(), M, K) * detail::CMapMat<T>(b.values().data(), K, N);
  return make_result<T>({M, N}, std::move(out), {a, b}, [a, b, M, K, N](Node<T>& o) {
    detail::CMapMat<T> go(o.grad.data(), M, N);
    if (auto* ga = grad_of(a))
      detail::MapMat<T>(ga->data(), M, K).noalias() += go * detail::CMapMat<T>(b.values().data(), K, N).transpose();
    if (auto* gb = grad_of(b))
      detail::MapMat<T>(gb->data(), K, N).noalias() += detail::CMapMat<T>(a.values().data(), M, K).transpose() * go;
  });
}

/// Batched product over the leading axis: a [B,M,K] (or [B,K,M] if trans_a)
/// times b [B,K,N] (or [B,N,K] if trans_b).
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  check(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0), "bmm expects matching [B,.,.] operands");
  const std::int64_t B = a.dim(0);
  const std::int64_t M = trans_a ? a.dim(2) : a.dim(1), K = trans_a ? a.dim(1) : a.dim(2);
  const std::int64_t Kb = trans_b ? b.dim(2) : b.dim(1), N = trans_b ? b.dim(1) : b.dim(2);
  check(K == Kb, "bmm: inner dims " + std::to_string(K) + " vs " + std::to_string(Kb));
  const std::int64_t as = a.dim(1) * a.dim(2), bs = b.dim(1) * b.dim(2);
  std::vector<T> out(static_cast<std::size_t>(B * M * N));
  for (std::int64_t i = 0; i < B; ++i) {
    detail::CMapMat<T> am(a.values().data() + i * as, a.dim(1), a.dim(2));
    detail::CMapMat<T> bm(b.values().data() + i * bs, b.dim(1), b.dim(2));
    detail::MapMat<T> om(out.data() + i * M * N, M, N);
    if (trans_a && trans_b) om.noalias() = am.transpose() * bm.transpose();
    else if (trans_a) om.noalias() = am.transpose() * bm;
    else if (trans_b) om.noalias() = am * bm.transpose();
    else om.noalias() = am * bm;
  }
  return make_result<T>({B, M, N}, std::move(out), {a, b}, [a, b, B, M, N, as, bs, trans_a, trans_b](Node<T>& o) {
    auto* ga = grad_of(a);
    auto* gb = grad_of(b);
    for (std::int64_t i = 0; i < B; ++i) {
      detail::CMapMat<T> go(o.grad.data() + i * M * N, M, N);
      detail::CMapMat<T> am(a.values().data() + i * as, a.dim(1), a.dim(2));
      detail::CMapMat<T> bm(b.values().data() + i * bs, b.dim(1), b.dim(2));
      // op(a) = A, op(b) = Bm, dA = G Bm^T, dBm = A^T G.
      if (ga) {
        detail::MapMat<T> gam(ga->data() + i * as, a.dim(1), a.dim(2));
        if (trans_a) {
          if (trans_b) gam.noalias() += (go * bm).transpose();
          else gam.noalias() += (go * bm.transpose()).transpose();
        } else {
          if (trans_b) gam.noalias() += go * bm;
          else gam.noalias() += go * bm.transpose();
        }
      }
      if (gb) {
        detail::MapMat<T> gbm(gb->data() + i * bs, b.dim(1), b.dim(2));
        if (trans_b) {
          if (trans_a) gbm.noalias() += (am * go).transpose();
          else gbm.noalias() += (am.transpose() * go).transpose();
        } else {
          if (trans_a) gbm.noalias() += am * go;
          else gbm.noalias() += am.transpose() * go;
        }
      }
    }
  });
}

/// Softmax over the last axis.
template <typename T>
Var<T> softmax_last(const Var<T>& x) {
  const std::int64_t n = x.dim(-1), rows = x.size() / std::max<std::int64_t>(n, 1);
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* p = xv.data() + r * n;
    T* q = out.data() + r * n;
    const T m = *std::max_element(p, p + n);
    T s = 0;
    for (std::int64_t i = 0; i < n; ++i) s += (q[i] = std::exp(p[i] - m));
    for (std::int64_t i = 0; i < n; ++i) q[i] /= s;
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [x, n, rows](Node<T>& o) {
    auto* gx = grad_of(x);
    if (!gx) return;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * n;
      const T* g = o.grad.data() + r * n;
      T dot = 0;
      for (std::int64_t i = 0; i < n; ++i) dot += g[i] * y[i];
      T* d = gx->data() + r * n;
      for (std::int64_t i = 0; i < n; ++i) d[i] += y[i] * (g[i] - dot);
    }
  });
}

/// Layer normalization over the last axis with affine gamma/beta.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const std::int64_t n = x.dim(-1), rows = x.size() / std::max<std::int64_t>(n, 1);
  check(gamma.size() == n && beta.size() == n, "layer_norm: parameter size mismatch");
  const auto& xv = x.values();
  std::vector<T> out(xv.size()), xhat(xv.size()), invstd(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* p = xv.data() + r * n;
    T m = 0;
    for (std::int64_t i = 0; i < n; ++i) m += p[i];
    m /= static_cast<T>(n);
    T v = 0;
    for (std::int64_t i = 0; i < n; ++i) v += (p[i] - m) * (p[i] - m);
    v /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(v + eps);
    invstd[static_cast<std::size_t>(r)] = is;
    for (std::int64_t i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(r * n + i);
      xhat[k] = (p[i] - m) * is;
      out[k] = gamma.values()[static_cast<std::size_t>(i)] * xhat[k] + beta.values()[static_cast<std::size_t>(i)];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [x, gamma, beta, n, rows, xhat = std::move(xhat), invstd = std::move(invstd)](Node<T>& o) {
                          auto* gx = grad_of(x);
                          auto* gg = grad_of(gamma);
                          auto* gb = grad_of(beta);
                          for (std::int64_t r = 0; r < rows; ++r) {
                            const T* g = o.grad.data() + r * n;
                            const T* xh = xhat.data() + r * n;
                            T sum_gy = 0, sum_gyx = 0;
                            for (std::int64_t i = 0; i < n; ++i) {
                              const T gy = g[i] * gamma.values()[static_cast<std::size_t>(i)];
                              sum_gy += gy;
                              sum_gyx += gy * xh[i];
                              if (gg) (*gg)[static_cast<std::size_t>(i)] += g[i] * xh[i];
                              if (gb) (*gb)[static_cast<std::size_t>(i)] += g[i];
                            }
                            if (!gx) continue;
                            const T is = invstd[static_cast<std::size_t>(r)];
                            T* d = gx->data() + r * n;
                            for (std::int64_t i = 0; i < n; ++i) {
                              const T gy = g[i] * gamma.values()[static_cast<std::size_t>(i)];
                              d[i] += is * (gy - sum_gy / static_cast<T>(n) - xh[i] * sum_gyx / static_cast<T>(n));
                            }
                          }
                        });
}

}  // namespace leafseg::ag
