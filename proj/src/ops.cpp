#include "picanet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>

#include "picanet/gemm.hpp"

namespace picanet {
namespace ops {
namespace {

template <typename T>
bool any_rg(std::initializer_list<const Tensor<T>*> xs) {
  for (auto* x : xs)
    if (x->defined() && x->requires_grad()) return true;
  return false;
}

// Registers `out` on the tape when gradients can flow; always feeds the NaN
// tracer so a poisoned forward pass can name its first offending op.
template <typename T, typename Fn>
void finish(Tape<T>* tp, const char* name, std::vector<Tensor<T>> outs, bool rg, Fn&& fn) {
  if (!tp) return;
  for (const auto& o : outs) tp->check_output(name, o);
  if (!rg) return;
  for (auto& o : outs) o.set_requires_grad(true);
  tp->record(name, std::move(outs), std::forward<Fn>(fn));
}

// Valid output range [lo, hi) for which ix = ox*stride + base lands in [0, w).
inline std::pair<int, int> valid_span(int base, int stride, int w, int wout) {
  int lo = 0;
  if (base < 0) lo = (-base + stride - 1) / stride;
  int hi = base < w ? std::min(wout, (w - base + stride - 1) / stride) : 0;
  return {lo, std::max(lo, hi)};
}

template <typename T>
void im2col(const T* x, T* col, int cin, int h, int w, int kh, int kw, int stride, int dil,
            int pad, int hout, int wout) {
  for (int ci = 0; ci < cin; ++ci) {
    const T* plane = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        T* row = col + static_cast<std::size_t>((ci * kh + ky) * kw + kx) * hout * wout;
        const int basex = kx * dil - pad;
        const auto [lo, hi] = valid_span(basex, stride, w, wout);
        for (int oy = 0; oy < hout; ++oy) {
          const int iy = oy * stride - pad + ky * dil;
          T* dst = row + static_cast<std::size_t>(oy) * wout;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wout, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * w;
          std::fill(dst, dst + lo, T(0));
          std::fill(dst + hi, dst + wout, T(0));
          if (stride == 1) {
            std::copy(src + lo + basex, src + hi + basex, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride + basex];
          }
        }
      }
  }
}

template <typename T>
void col2im_acc(const T* col, T* dx, int cin, int h, int w, int kh, int kw, int stride, int dil,
                int pad, int hout, int wout) {
  for (int ci = 0; ci < cin; ++ci) {
    T* plane = dx + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = col + static_cast<std::size_t>((ci * kh + ky) * kw + kx) * hout * wout;
        const int basex = kx * dil - pad;
        const auto [lo, hi] = valid_span(basex, stride, w, wout);
        for (int oy = 0; oy < hout; ++oy) {
          const int iy = oy * stride - pad + ky * dil;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * wout;
          T* dst = plane + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            T* __restrict d = dst + lo + basex;
            const T* __restrict s = src + lo;
            for (int k = 0; k < hi - lo; ++k) d[k] += s[k];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * stride + basex] += src[ox];
          }
        }
      }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int dilation, int padding) {
  if (x.rank() != 4 || w.rank() != 4) throw std::invalid_argument("conv2d: expects 4-d x and w");
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) throw std::invalid_argument("conv2d: kernel C_in does not match input");
  if (b.defined() && (b.rank() != 1 || b.dim(0) != cout))
    throw std::invalid_argument("conv2d: bias shape");
  if (stride < 1 || dilation < 1 || padding < 0) throw std::invalid_argument("conv2d: geometry");
  const int hout = spatial_out(h, padding, dilation, kh, stride);
  const int wout = spatial_out(wd, padding, dilation, kw, stride);
  if (hout < 1 || wout < 1) throw std::invalid_argument("conv2d: no valid output positions");

  const std::size_t kdim = static_cast<std::size_t>(cin) * kh * kw;
  const std::size_t nsp = static_cast<std::size_t>(hout) * wout;
  // 1x1 unit-stride convolutions read the input directly as their column
  // matrix; everything else goes through im2col panels that the backward
  // pass reuses. Without a tape the panels live in reusable scratch instead.
  const bool unit = kh == 1 && kw == 1 && stride == 1 && padding == 0;
  std::shared_ptr<std::vector<T>> cols;
  if (!unit) {
    if (tp) {
      cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * kdim * nsp);
    } else {
      thread_local std::vector<T> scratch;
      scratch.resize(static_cast<std::size_t>(n) * kdim * nsp);
      cols = std::shared_ptr<std::vector<T>>(&scratch, [](std::vector<T>*) {});
    }
    for (int i = 0; i < n; ++i)
      im2col(x.data() + static_cast<std::size_t>(i) * cin * h * wd,
             cols->data() + static_cast<std::size_t>(i) * kdim * nsp, cin, h, wd, kh, kw, stride,
             dilation, padding, hout, wout);
  }
  const T* colbase = unit ? x.data() : cols->data();
  Tensor<T> y = Tensor<T>::zeros({n, cout, hout, wout});
  for (int i = 0; i < n; ++i) {
    T* yi = y.data() + static_cast<std::size_t>(i) * cout * nsp;
    gemm_acc(w.data(), colbase + static_cast<std::size_t>(i) * kdim * nsp, yi, cout,
             static_cast<int>(kdim), static_cast<int>(nsp));
    if (b.defined())
      for (int co = 0; co < cout; ++co) {
        const T bv = b.data()[co];
        T* row = yi + static_cast<std::size_t>(co) * nsp;
        for (std::size_t s = 0; s < nsp; ++s) row[s] += bv;
      }
  }

  // Without a tape the closure below is built and immediately dropped, so the
  // scratch alias in `cols` cannot outlive this call.
  const bool rg = any_rg<T>({&x, &w, &b});
  finish(tp, "conv2d", {y}, rg,
         [=]() mutable {
           const T* gy = y.grad_data();
           const T* colb = unit ? x.data() : cols->data();
           if (w.requires_grad()) {
             T* gw = w.grad_data();
             for (int i = 0; i < n; ++i)
               gemm_nt_acc(gy + static_cast<std::size_t>(i) * cout * nsp,
                           colb + static_cast<std::size_t>(i) * kdim * nsp, gw, cout,
                           static_cast<int>(nsp), static_cast<int>(kdim));
           }
           if (b.defined() && b.requires_grad()) {
             T* gb = b.grad_data();
             for (int i = 0; i < n; ++i)
               for (int co = 0; co < cout; ++co) {
                 const T* row = gy + (static_cast<std::size_t>(i) * cout + co) * nsp;
                 T acc = T(0);
                 for (std::size_t s = 0; s < nsp; ++s) acc += row[s];
                 gb[co] += acc;
               }
           }
           if (x.requires_grad()) {
             T* gx = x.grad_data();
             std::vector<T> wt(static_cast<std::size_t>(cout) * kdim);
             transpose(w.data(), wt.data(), cout, static_cast<int>(kdim));
             if (unit) {
               for (int i = 0; i < n; ++i)
                 gemm_acc(wt.data(), gy + static_cast<std::size_t>(i) * cout * nsp,
                          gx + static_cast<std::size_t>(i) * cin * h * wd,
                          static_cast<int>(kdim), cout, static_cast<int>(nsp));
             } else {
               std::vector<T> dcol(kdim * nsp);
               for (int i = 0; i < n; ++i) {
                 std::fill(dcol.begin(), dcol.end(), T(0));
                 gemm_acc(wt.data(), gy + static_cast<std::size_t>(i) * cout * nsp, dcol.data(),
                          static_cast<int>(kdim), cout, static_cast<int>(nsp));
                 col2im_acc(dcol.data(), gx + static_cast<std::size_t>(i) * cin * h * wd, cin, h,
                            wd, kh, kw, stride, dilation, padding, hout, wout);
               }
             }
           }
         });
  return y;
}

template <typename T>
Tensor<T> activation(Tape<T>* tp, const Tensor<T>& x, Act kind) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const T* xv = x.data();
  T* yv = y.data();
  const std::size_t m = x.numel();
  switch (kind) {
    case Act::relu:
      for (std::size_t i = 0; i < m; ++i) yv[i] = xv[i] > T(0) ? xv[i] : T(0);
      break;
    case Act::sigmoid:
      for (std::size_t i = 0; i < m; ++i) yv[i] = T(1) / (T(1) + std::exp(-xv[i]));
      break;
    case Act::tanh:
      for (std::size_t i = 0; i < m; ++i) yv[i] = std::tanh(xv[i]);
      break;
  }
  const char* name = kind == Act::relu ? "relu" : kind == Act::sigmoid ? "sigmoid" : "tanh";
  finish(tp, name, {y}, x.requires_grad(), [=]() mutable {
    const T* gy = y.grad_data();
    const T* ov = y.data();
    T* gx = x.grad_data();
    switch (kind) {
      case Act::relu:
        for (std::size_t i = 0; i < m; ++i) gx[i] += ov[i] > T(0) ? gy[i] : T(0);
        break;
      case Act::sigmoid:
        for (std::size_t i = 0; i < m; ++i) gx[i] += gy[i] * ov[i] * (T(1) - ov[i]);
        break;
      case Act::tanh:
        for (std::size_t i = 0; i < m; ++i) gx[i] += gy[i] * (T(1) - ov[i] * ov[i]);
        break;
    }
  });
  return y;
}

template <typename T>
Tensor<T> channel_softmax(Tape<T>* tp, const Tensor<T>& x) {
  if (x.rank() != 4) throw std::invalid_argument("channel_softmax: expects N x D x H x W");
  const int n = x.dim(0), d = x.dim(1);
  const std::size_t sp = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const T* xv = x.data();
  T* yv = y.data();
  for (int i = 0; i < n; ++i)
    for (std::size_t s = 0; s < sp; ++s) {
      const std::size_t base = static_cast<std::size_t>(i) * d * sp + s;
      T mx = xv[base];
      for (int c = 1; c < d; ++c) mx = std::max(mx, xv[base + c * sp]);
      T sum = T(0);
      for (int c = 0; c < d; ++c) {
        const T e = std::exp(xv[base + c * sp] - mx);
        yv[base + c * sp] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int c = 0; c < d; ++c) yv[base + c * sp] *= inv;
    }
  finish(tp, "channel_softmax", {y}, x.requires_grad(), [=]() mutable {
    const T* gy = y.grad_data();
    const T* ov = y.data();
    T* gx = x.grad_data();
    for (int i = 0; i < n; ++i)
      for (std::size_t s = 0; s < sp; ++s) {
        const std::size_t base = static_cast<std::size_t>(i) * d * sp + s;
        T dot = T(0);
        for (int c = 0; c < d; ++c) dot += gy[base + c * sp] * ov[base + c * sp];
        for (int c = 0; c < d; ++c)
          gx[base + c * sp] += ov[base + c * sp] * (gy[base + c * sp] - dot);
      }
  });
  return y;
}

template <typename T>
Tensor<T> batch_norm(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BNMode mode, Tensor<T>& running_mean,
                     Tensor<T>& running_var, T momentum, T eps) {
  if (x.rank() != 4) throw std::invalid_argument("batch_norm: expects N x C x H x W");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t sp = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t m = static_cast<std::size_t>(n) * sp;
  if (gamma.dim(0) != c || beta.dim(0) != c) throw std::invalid_argument("batch_norm: affine shape");

  Tensor<T> y = Tensor<T>::zeros(x.shape());
  auto mean = std::make_shared<std::vector<T>>(c, T(0));
  auto ivar = std::make_shared<std::vector<T>>(c, T(0));
  const T* xv = x.data();
  T* yv = y.data();

  auto channel_at = [&](const T* buf, int i, int ch) {
    return buf + (static_cast<std::size_t>(i) * c + ch) * sp;
  };

  if (mode == BNMode::train) {
    for (int ch = 0; ch < c; ++ch) {
      T mu = T(0);
      for (int i = 0; i < n; ++i) {
        const T* row = channel_at(xv, i, ch);
        for (std::size_t s = 0; s < sp; ++s) mu += row[s];
      }
      mu /= static_cast<T>(m);
      T var = T(0);
      for (int i = 0; i < n; ++i) {
        const T* row = channel_at(xv, i, ch);
        for (std::size_t s = 0; s < sp; ++s) {
          const T d = row[s] - mu;
          var += d * d;
        }
      }
      var /= static_cast<T>(m);
      (*mean)[ch] = mu;
      (*ivar)[ch] = T(1) / std::sqrt(var + eps);
      const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
      running_mean.data()[ch] = (T(1) - momentum) * running_mean.data()[ch] + momentum * mu;
      running_var.data()[ch] = (T(1) - momentum) * running_var.data()[ch] + momentum * unbiased;
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      (*mean)[ch] = running_mean.data()[ch];
      (*ivar)[ch] = T(1) / std::sqrt(running_var.data()[ch] + eps);
    }
  }
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T mu = (*mean)[ch], iv = (*ivar)[ch];
      const T g = gamma.data()[ch], bb = beta.data()[ch];
      const T* row = channel_at(xv, i, ch);
      T* out = yv + (static_cast<std::size_t>(i) * c + ch) * sp;
      for (std::size_t s = 0; s < sp; ++s) out[s] = g * (row[s] - mu) * iv + bb;
    }

  const bool rg = any_rg<T>({&x, &gamma, &beta});
  finish(tp, "batch_norm", {y}, rg, [=]() mutable {
    const T* gy = y.grad_data();
    const T* xvv = x.data();
    for (int ch = 0; ch < c; ++ch) {
      const T mu = (*mean)[ch], iv = (*ivar)[ch], g = gamma.data()[ch];
      // Per-channel reductions of dy and dy*xhat.
      T sum_dy = T(0), sum_dy_xhat = T(0);
      for (int i = 0; i < n; ++i) {
        const T* xr = xvv + (static_cast<std::size_t>(i) * c + ch) * sp;
        const T* gr = gy + (static_cast<std::size_t>(i) * c + ch) * sp;
        for (std::size_t s = 0; s < sp; ++s) {
          sum_dy += gr[s];
          sum_dy_xhat += gr[s] * (xr[s] - mu) * iv;
        }
      }
      if (gamma.requires_grad()) gamma.grad_data()[ch] += sum_dy_xhat;
      if (beta.requires_grad()) beta.grad_data()[ch] += sum_dy;
      if (x.requires_grad()) {
        T* gx = x.grad_data();
        if (mode == BNMode::train) {
          const T inv_m = T(1) / static_cast<T>(m);
          for (int i = 0; i < n; ++i) {
            const T* xr = xvv + (static_cast<std::size_t>(i) * c + ch) * sp;
            const T* gr = gy + (static_cast<std::size_t>(i) * c + ch) * sp;
            T* gxr = gx + (static_cast<std::size_t>(i) * c + ch) * sp;
            for (std::size_t s = 0; s < sp; ++s) {
              const T xhat = (xr[s] - mu) * iv;
              gxr[s] += g * iv * (gr[s] - inv_m * sum_dy - inv_m * xhat * sum_dy_xhat);
            }
          }
        } else {
          for (int i = 0; i < n; ++i) {
            const T* gr = gy + (static_cast<std::size_t>(i) * c + ch) * sp;
            T* gxr = gx + (static_cast<std::size_t>(i) * c + ch) * sp;
            for (std::size_t s = 0; s < sp; ++s) gxr[s] += g * iv * gr[s];
          }
        }
      }
    }
  });
  return y;
}

namespace {

// Clamped source taps for one output axis of the x2 bilinear kernel:
// src = (o + 0.5)/2 - 0.5; the two taps and weights per output index.
struct UpTap {
  int i0, i1;
  double w0, w1;
};

inline UpTap up_tap(int o, int extent) {
  const double s = 0.5 * o - 0.25;
  const int f = static_cast<int>(std::floor(s));
  const double frac = s - f;
  UpTap t;
  t.i0 = std::clamp(f, 0, extent - 1);
  t.i1 = std::clamp(f + 1, 0, extent - 1);
  t.w0 = 1.0 - frac;
  t.w1 = frac;
  return t;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample2x(Tape<T>* tp, const Tensor<T>& x) {
  if (x.rank() != 4) throw std::invalid_argument("bilinear_upsample2x: expects N x C x H x W");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = 2 * h, wo = 2 * w;
  Tensor<T> y = Tensor<T>::zeros({n, c, ho, wo});
  std::vector<UpTap> ty(ho), tx(wo);
  for (int o = 0; o < ho; ++o) ty[o] = up_tap(o, h);
  for (int o = 0; o < wo; ++o) tx[o] = up_tap(o, w);
  const T* xv = x.data();
  T* yv = y.data();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T* plane = xv + (static_cast<std::size_t>(i) * c + ch) * h * w;
      T* out = yv + (static_cast<std::size_t>(i) * c + ch) * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        const UpTap& a = ty[oy];
        const T* r0 = plane + static_cast<std::size_t>(a.i0) * w;
        const T* r1 = plane + static_cast<std::size_t>(a.i1) * w;
        T* orow = out + static_cast<std::size_t>(oy) * wo;
        for (int ox = 0; ox < wo; ++ox) {
          const UpTap& bx = tx[ox];
          orow[ox] = static_cast<T>(a.w0 * (bx.w0 * r0[bx.i0] + bx.w1 * r0[bx.i1]) +
                                    a.w1 * (bx.w0 * r1[bx.i0] + bx.w1 * r1[bx.i1]));
        }
      }
    }
  finish(tp, "bilinear_upsample2x", {y}, x.requires_grad(), [=]() mutable {
    const T* gy = y.grad_data();
    T* gx = x.grad_data();
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        T* gplane = gx + (static_cast<std::size_t>(i) * c + ch) * h * w;
        const T* grow = gy + (static_cast<std::size_t>(i) * c + ch) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const UpTap& a = ty[oy];
          for (int ox = 0; ox < wo; ++ox) {
            const UpTap& bx = tx[ox];
            const T g = grow[static_cast<std::size_t>(oy) * wo + ox];
            gplane[static_cast<std::size_t>(a.i0) * w + bx.i0] += static_cast<T>(a.w0 * bx.w0) * g;
            gplane[static_cast<std::size_t>(a.i0) * w + bx.i1] += static_cast<T>(a.w0 * bx.w1) * g;
            gplane[static_cast<std::size_t>(a.i1) * w + bx.i0] += static_cast<T>(a.w1 * bx.w0) * g;
            gplane[static_cast<std::size_t>(a.i1) * w + bx.i1] += static_cast<T>(a.w1 * bx.w1) * g;
          }
        }
      }
  });
  return y;
}

template <typename T>
Tensor<T> concat_channels(Tape<T>* tp, const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
  const int n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int ctot = 0;
  for (const auto& x : xs) {
    if (x.rank() != 4 || x.dim(0) != n || x.dim(2) != h || x.dim(3) != w)
      throw std::invalid_argument("concat_channels: batch/spatial extents differ");
    ctot += x.dim(1);
  }
  Tensor<T> y = Tensor<T>::zeros({n, ctot, h, w});
  const std::size_t sp = static_cast<std::size_t>(h) * w;
  T* yv = y.data();
  for (int i = 0; i < n; ++i) {
    std::size_t off = 0;
    for (const auto& x : xs) {
      const std::size_t sz = static_cast<std::size_t>(x.dim(1)) * sp;
      std::memcpy(yv + (static_cast<std::size_t>(i) * ctot) * sp + off,
                  x.data() + static_cast<std::size_t>(i) * sz, sz * sizeof(T));
      off += sz;
    }
  }
  bool rg = false;
  for (const auto& x : xs) rg = rg || x.requires_grad();
  finish(tp, "concat_channels", {y}, rg, [=]() mutable {
    const T* gy = y.grad_data();
    for (int i = 0; i < n; ++i) {
      std::size_t off = 0;
      for (auto x : xs) {
        const std::size_t sz = static_cast<std::size_t>(x.dim(1)) * sp;
        if (x.requires_grad()) {
          T* gx = x.grad_data() + static_cast<std::size_t>(i) * sz;
          const T* src = gy + (static_cast<std::size_t>(i) * ctot) * sp + off;
          for (std::size_t k = 0; k < sz; ++k) gx[k] += src[k];
        }
        off += sz;
      }
    }
  });
  return y;
}

template <typename T>
Tensor<T> max_pool2x2(Tape<T>* tp, const Tensor<T>& x) {
  if (x.rank() != 4) throw std::invalid_argument("max_pool2x2: expects N x C x H x W");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw std::invalid_argument("max_pool2x2: extents must be even");
  const int ho = h / 2, wo = w / 2;
  Tensor<T> y = Tensor<T>::zeros({n, c, ho, wo});
  auto arg = std::make_shared<std::vector<int>>(y.numel());
  const T* xv = x.data();
  T* yv = y.data();
  std::size_t o = 0;
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T* plane = xv + (static_cast<std::size_t>(i) * c + ch) * h * w;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox, ++o) {
          int best = (2 * oy) * w + 2 * ox;
          T bv = plane[best];
          const int cand[3] = {(2 * oy) * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox,
                               (2 * oy + 1) * w + 2 * ox + 1};
          for (int k = 0; k < 3; ++k)
            if (plane[cand[k]] > bv) {
              bv = plane[cand[k]];
              best = cand[k];
            }
          yv[o] = bv;
          (*arg)[o] = best;
        }
    }
  finish(tp, "max_pool2x2", {y}, x.requires_grad(), [=]() mutable {
    const T* gy = y.grad_data();
    T* gx = x.grad_data();
    std::size_t oo = 0;
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        T* gplane = gx + (static_cast<std::size_t>(i) * c + ch) * h * w;
        for (int k = 0; k < ho * wo; ++k, ++oo) gplane[(*arg)[oo]] += gy[oo];
      }
  });
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> lstm_cell(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& h,
                                          const Tensor<T>& c, const LstmParams<T>& p) {
  const int bsz = x.dim(0), in = x.dim(1);
  const int h4 = p.w_ih.dim(0), hid = h4 / 4;
  if (h4 % 4 || p.w_ih.dim(1) != in || p.w_hh.dim(0) != h4 || p.w_hh.dim(1) != hid ||
      p.b.dim(0) != h4 || h.dim(0) != bsz || h.dim(1) != hid || c.dim(0) != bsz ||
      c.dim(1) != hid)
    throw std::invalid_argument("lstm_cell: parameter/state shapes disagree");

  auto gates = std::make_shared<std::vector<T>>(static_cast<std::size_t>(bsz) * h4);
  {
    std::vector<T> iht(static_cast<std::size_t>(in) * h4), hht(static_cast<std::size_t>(hid) * h4);
    transpose(p.w_ih.data(), iht.data(), h4, in);
    transpose(p.w_hh.data(), hht.data(), h4, hid);
    for (int r = 0; r < bsz; ++r)
      std::memcpy(gates->data() + static_cast<std::size_t>(r) * h4, p.b.data(), h4 * sizeof(T));
    gemm_acc(x.data(), iht.data(), gates->data(), bsz, in, h4);
    gemm_acc(h.data(), hht.data(), gates->data(), bsz, hid, h4);
  }
  Tensor<T> hn = Tensor<T>::zeros({bsz, hid});
  Tensor<T> cn = Tensor<T>::zeros({bsz, hid});
  auto tanh_cn = std::make_shared<std::vector<T>>(static_cast<std::size_t>(bsz) * hid);
  for (int r = 0; r < bsz; ++r) {
    T* g = gates->data() + static_cast<std::size_t>(r) * h4;
    const T* cp = c.data() + static_cast<std::size_t>(r) * hid;
    T* co = cn.data() + static_cast<std::size_t>(r) * hid;
    T* ho = hn.data() + static_cast<std::size_t>(r) * hid;
    T* tc = tanh_cn->data() + static_cast<std::size_t>(r) * hid;
    for (int j = 0; j < hid; ++j) {
      // gate order i, f, g, o
      const T gi = T(1) / (T(1) + std::exp(-g[j]));
      const T gf = T(1) / (T(1) + std::exp(-g[hid + j]));
      const T gg = std::tanh(g[2 * hid + j]);
      const T go = T(1) / (T(1) + std::exp(-g[3 * hid + j]));
      g[j] = gi;
      g[hid + j] = gf;
      g[2 * hid + j] = gg;
      g[3 * hid + j] = go;
      co[j] = gf * cp[j] + gi * gg;
      tc[j] = std::tanh(co[j]);
      ho[j] = go * tc[j];
    }
  }
  const bool rg = any_rg<T>({&x, &h, &c, &p.w_ih, &p.w_hh, &p.b});
  Tensor<T> wih = p.w_ih, whh = p.w_hh, bias = p.b;
  finish(tp, "lstm_cell", {hn, cn}, rg, [=]() mutable {
    const T* ghn = hn.grad_data();
    const T* gcn = cn.grad_data();
    std::vector<T> dz(static_cast<std::size_t>(bsz) * h4);
    for (int r = 0; r < bsz; ++r) {
      const T* g = gates->data() + static_cast<std::size_t>(r) * h4;
      const T* tc = tanh_cn->data() + static_cast<std::size_t>(r) * hid;
      const T* cp = c.data() + static_cast<std::size_t>(r) * hid;
      const T* dho = ghn + static_cast<std::size_t>(r) * hid;
      const T* dco = gcn + static_cast<std::size_t>(r) * hid;
      T* z = dz.data() + static_cast<std::size_t>(r) * h4;
      T* gc_prev = c.requires_grad() ? c.grad_data() + static_cast<std::size_t>(r) * hid : nullptr;
      for (int j = 0; j < hid; ++j) {
        const T gi = g[j], gf = g[hid + j], gg = g[2 * hid + j], go = g[3 * hid + j];
        const T dtc = dho[j] * go * (T(1) - tc[j] * tc[j]) + dco[j];
        const T d_i = dtc * gg, d_f = dtc * cp[j], d_g = dtc * gi, d_o = dho[j] * tc[j];
        z[j] = d_i * gi * (T(1) - gi);
        z[hid + j] = d_f * gf * (T(1) - gf);
        z[2 * hid + j] = d_g * (T(1) - gg * gg);
        z[3 * hid + j] = d_o * go * (T(1) - go);
        if (gc_prev) gc_prev[j] += dtc * gf;
      }
    }
    if (x.requires_grad()) gemm_acc(dz.data(), wih.data(), x.grad_data(), bsz, h4, in);
    if (h.requires_grad()) gemm_acc(dz.data(), whh.data(), h.grad_data(), bsz, h4, hid);
    if (wih.requires_grad() || whh.requires_grad() || bias.requires_grad()) {
      std::vector<T> dzt(dz.size());
      transpose(dz.data(), dzt.data(), bsz, h4);
      if (wih.requires_grad()) gemm_acc(dzt.data(), x.data(), wih.grad_data(), h4, bsz, in);
      if (whh.requires_grad()) gemm_acc(dzt.data(), h.data(), whh.grad_data(), h4, bsz, hid);
      if (bias.requires_grad()) {
        T* gb = bias.grad_data();
        for (int j = 0; j < h4; ++j) {
          T acc = T(0);
          for (int r = 0; r < bsz; ++r) acc += dz[static_cast<std::size_t>(r) * h4 + j];
          gb[j] += acc;
        }
      }
    }
  });
  return {hn, cn};
}

template <typename T>
Tensor<T> sum_all(Tape<T>* tp, const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros({1});
  T acc = T(0);
  for (const T& v : x.vals()) acc += v;
  y.data()[0] = acc;
  finish(tp, "sum_all", {y}, x.requires_grad(), [=]() mutable {
    const T g = y.grad_data()[0];
    T* gx = x.grad_data();
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
  });
  return y;
}

template <typename T>
Tensor<T> dot_const(Tape<T>* tp, const Tensor<T>& x, const std::vector<T>& r) {
  if (r.size() != x.numel()) throw std::invalid_argument("dot_const: size mismatch");
  Tensor<T> y = Tensor<T>::zeros({1});
  T acc = T(0);
  const T* xv = x.data();
  for (std::size_t i = 0; i < r.size(); ++i) acc += xv[i] * r[i];
  y.data()[0] = acc;
  finish(tp, "dot_const", {y}, x.requires_grad(), [=]() mutable {
    const T g = y.grad_data()[0];
    T* gx = x.grad_data();
    for (std::size_t i = 0; i < r.size(); ++i) gx[i] += g * r[i];
  });
  return y;
}

template <typename T>
Tensor<T> add(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y.data()[i] = a.data()[i] + b.data()[i];
  finish(tp, "add", {y}, any_rg<T>({&a, &b}), [=]() mutable {
    const T* gy = y.grad_data();
    if (a.requires_grad()) {
      T* ga = a.grad_data();
      for (std::size_t i = 0; i < y.numel(); ++i) ga[i] += gy[i];
    }
    if (b.requires_grad()) {
      T* gb = b.grad_data();
      for (std::size_t i = 0; i < y.numel(); ++i) gb[i] += gy[i];
    }
  });
  return y;
}

template <typename T>
Tensor<T> mul(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("mul: shape mismatch");
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y.data()[i] = a.data()[i] * b.data()[i];
  finish(tp, "mul", {y}, any_rg<T>({&a, &b}), [=]() mutable {
    const T* gy = y.grad_data();
    if (a.requires_grad()) {
      T* ga = a.grad_data();
      for (std::size_t i = 0; i < y.numel(); ++i) ga[i] += gy[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      T* gb = b.grad_data();
      for (std::size_t i = 0; i < y.numel(); ++i) gb[i] += gy[i] * a.data()[i];
    }
  });
  return y;
}

template <typename T>
Tensor<T> bce_mean(Tape<T>* tp, const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) throw std::invalid_argument("bce_mean: shape mismatch");
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  const std::size_t m = pred.numel();
  Tensor<T> y = Tensor<T>::zeros({1});
  T acc = T(0);
  for (std::size_t i = 0; i < m; ++i) {
    const T p = std::clamp(pred.data()[i], lo, hi);
    const T t = target.data()[i];
    acc -= t * std::log(p) + (T(1) - t) * std::log(T(1) - p);
  }
  y.data()[0] = acc / static_cast<T>(m);
  finish(tp, "bce_mean", {y}, pred.requires_grad(), [=]() mutable {
    const T g = y.grad_data()[0] / static_cast<T>(m);
    T* gp = pred.grad_data();
    for (std::size_t i = 0; i < m; ++i) {
      const T raw = pred.data()[i];
      if (raw <= lo || raw >= hi) continue;  // clamp plateau
      const T t = target.data()[i];
      gp[i] += g * (-t / raw + (T(1) - t) / (T(1) - raw));
    }
  });
  return y;
}

template <typename T>
Tensor<T> weighted_sum_scalars(Tape<T>* tp, const std::vector<Tensor<T>>& xs,
                               const std::vector<T>& w) {
  if (xs.size() != w.size() || xs.empty())
    throw std::invalid_argument("weighted_sum_scalars: arity mismatch");
  Tensor<T> y = Tensor<T>::zeros({1});
  T acc = T(0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].numel() != 1) throw std::invalid_argument("weighted_sum_scalars: non-scalar term");
    acc += w[i] * xs[i].data()[0];
  }
  y.data()[0] = acc;
  bool rg = false;
  for (const auto& x : xs) rg = rg || x.requires_grad();
  finish(tp, "weighted_sum_scalars", {y}, rg, [=]() mutable {
    const T g = y.grad_data()[0];
    for (std::size_t i = 0; i < xs.size(); ++i) {
      auto x = xs[i];
      if (x.requires_grad()) x.grad_data()[0] += g * w[i];
    }
  });
  return y;
}

template <typename T>
Tensor<T> take_w(Tape<T>* tp, const Tensor<T>& x, int w) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  Tensor<T> y = Tensor<T>::zeros({n * h, c});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < h; ++r)
        y.data()[(static_cast<std::size_t>(i) * h + r) * c + ch] =
            x.data()[((static_cast<std::size_t>(i) * c + ch) * h + r) * wd + w];
  finish(tp, "take_w", {y}, x.requires_grad(), [=]() mutable {
    const T* gy = y.grad_data();
    T* gx = x.grad_data();
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch)
        for (int r = 0; r < h; ++r)
          gx[((static_cast<std::size_t>(i) * c + ch) * h + r) * wd + w] +=
              gy[(static_cast<std::size_t>(i) * h + r) * c + ch];
  });
  return y;
}

template <typename T>
Tensor<T> take_h(Tape<T>* tp, const Tensor<T>& x, int h) {
  const int n = x.dim(0), c = x.dim(1), hd = x.dim(2), wd = x.dim(3);
  Tensor<T> y = Tensor<T>::zeros({n * wd, c});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int col = 0; col < wd; ++col)
        y.data()[(static_cast<std::size_t>(i) * wd + col) * c + ch] =
            x.data()[((static_cast<std::size_t>(i) * c + ch) * hd + h) * wd + col];
  finish(tp, "take_h", {y}, x.requires_grad(), [=]() mutable {
    const T* gy = y.grad_data();
    T* gx = x.grad_data();
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch)
        for (int col = 0; col < wd; ++col)
          gx[((static_cast<std::size_t>(i) * c + ch) * hd + h) * wd + col] +=
              gy[(static_cast<std::size_t>(i) * wd + col) * c + ch];
  });
  return y;
}

template <typename T>
Tensor<T> stack_w(Tape<T>* tp, const std::vector<Tensor<T>>& cols, int n, int h) {
  const int wd = static_cast<int>(cols.size());
  const int c = cols[0].dim(1);
  Tensor<T> y = Tensor<T>::zeros({n, c, h, wd});
  for (int w = 0; w < wd; ++w) {
    if (cols[w].dim(0) != n * h || cols[w].dim(1) != c)
      throw std::invalid_argument("stack_w: element shape mismatch");
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch)
        for (int r = 0; r < h; ++r)
          y.data()[((static_cast<std::size_t>(i) * c + ch) * h + r) * wd + w] =
              cols[w].data()[(static_cast<std::size_t>(i) * h + r) * c + ch];
  }
  bool rg = false;
  for (const auto& t : cols) rg = rg || t.requires_grad();
  finish(tp, "stack_w", {y}, rg, [=]() mutable {
    const T* gy = y.grad_data();
    for (int w = 0; w < wd; ++w) {
      auto col = cols[w];
      if (!col.requires_grad()) continue;
      T* gc = col.grad_data();
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (int r = 0; r < h; ++r)
            gc[(static_cast<std::size_t>(i) * h + r) * c + ch] +=
                gy[((static_cast<std::size_t>(i) * c + ch) * h + r) * wd + w];
    }
  });
  return y;
}

template <typename T>
Tensor<T> stack_h(Tape<T>* tp, const std::vector<Tensor<T>>& rows, int n, int w) {
  const int hd = static_cast<int>(rows.size());
  const int c = rows[0].dim(1);
  Tensor<T> y = Tensor<T>::zeros({n, c, hd, w});
  for (int h = 0; h < hd; ++h) {
    if (rows[h].dim(0) != n * w || rows[h].dim(1) != c)
      throw std::invalid_argument("stack_h: element shape mismatch");
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch)
        for (int col = 0; col < w; ++col)
          y.data()[((static_cast<std::size_t>(i) * c + ch) * hd + h) * w + col] =
              rows[h].data()[(static_cast<std::size_t>(i) * w + col) * c + ch];
  }
  bool rg = false;
  for (const auto& t : rows) rg = rg || t.requires_grad();
  finish(tp, "stack_h", {y}, rg, [=]() mutable {
    const T* gy = y.grad_data();
    for (int h = 0; h < hd; ++h) {
      auto row = rows[h];
      if (!row.requires_grad()) continue;
      T* gr = row.grad_data();
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (int col = 0; col < w; ++col)
            gr[(static_cast<std::size_t>(i) * w + col) * c + ch] +=
                gy[((static_cast<std::size_t>(i) * c + ch) * hd + h) * w + col];
    }
  });
  return y;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw std::invalid_argument("concat_cols: expects matching 2-d inputs");
  const int rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor<T> y = Tensor<T>::zeros({rows, ca + cb});
  for (int r = 0; r < rows; ++r) {
    std::memcpy(y.data() + static_cast<std::size_t>(r) * (ca + cb),
                a.data() + static_cast<std::size_t>(r) * ca, ca * sizeof(T));
    std::memcpy(y.data() + static_cast<std::size_t>(r) * (ca + cb) + ca,
                b.data() + static_cast<std::size_t>(r) * cb, cb * sizeof(T));
  }
  finish(tp, "concat_cols", {y}, any_rg<T>({&a, &b}), [=]() mutable {
    const T* gy = y.grad_data();
    if (a.requires_grad()) {
      T* ga = a.grad_data();
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < ca; ++j)
          ga[static_cast<std::size_t>(r) * ca + j] += gy[static_cast<std::size_t>(r) * (ca + cb) + j];
    }
    if (b.requires_grad()) {
      T* gb = b.grad_data();
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < cb; ++j)
          gb[static_cast<std::size_t>(r) * cb + j] +=
              gy[static_cast<std::size_t>(r) * (ca + cb) + ca + j];
    }
  });
  return y;
}

#define PICANET_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> conv2d<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                               int, int, int);                                                   \
  template Tensor<T> activation<T>(Tape<T>*, const Tensor<T>&, Act);                            \
  template Tensor<T> channel_softmax<T>(Tape<T>*, const Tensor<T>&);                            \
  template Tensor<T> batch_norm<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&,                \
                                   const Tensor<T>&, BNMode, Tensor<T>&, Tensor<T>&, T, T);     \
  template Tensor<T> bilinear_upsample2x<T>(Tape<T>*, const Tensor<T>&);                        \
  template Tensor<T> concat_channels<T>(Tape<T>*, const std::vector<Tensor<T>>&);               \
  template Tensor<T> max_pool2x2<T>(Tape<T>*, const Tensor<T>&);                                \
  template std::pair<Tensor<T>, Tensor<T>> lstm_cell<T>(Tape<T>*, const Tensor<T>&,             \
                                                        const Tensor<T>&, const Tensor<T>&,     \
                                                        const LstmParams<T>&);                  \
  template Tensor<T> sum_all<T>(Tape<T>*, const Tensor<T>&);                                    \
  template Tensor<T> dot_const<T>(Tape<T>*, const Tensor<T>&, const std::vector<T>&);           \
  template Tensor<T> add<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> mul<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> bce_mean<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> weighted_sum_scalars<T>(Tape<T>*, const std::vector<Tensor<T>>&,           \
                                             const std::vector<T>&);                            \
  template Tensor<T> take_w<T>(Tape<T>*, const Tensor<T>&, int);                                \
  template Tensor<T> take_h<T>(Tape<T>*, const Tensor<T>&, int);                                \
  template Tensor<T> stack_w<T>(Tape<T>*, const std::vector<Tensor<T>>&, int, int);             \
  template Tensor<T> stack_h<T>(Tape<T>*, const std::vector<Tensor<T>>&, int, int);             \
  template Tensor<T> concat_cols<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);

PICANET_INSTANTIATE_OPS(float)
PICANET_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace picanet
