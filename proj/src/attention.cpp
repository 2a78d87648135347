#include "picanet/attention.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace picanet {

std::vector<std::pair<int, int>> attention_positions(int w, int h, int grid_w, int grid_h,
                                                     int d) {
  if (grid_w < 1 || grid_h < 1 || d < 1)
    throw std::invalid_argument("attention_positions: grid and dilation must be >= 1");
  const int span_w = (grid_w - 1) * d + 1, span_h = (grid_h - 1) * d + 1;
  const int off_w = static_cast<int>(std::floor((w - span_w) / 2.0));
  const int off_h = static_cast<int>(std::floor((h - span_h) / 2.0));
  std::vector<std::pair<int, int>> pos;
  pos.reserve(static_cast<std::size_t>(grid_w) * grid_h);
  for (int gy = 0; gy < grid_h; ++gy)
    for (int gx = 0; gx < grid_w; ++gx) pos.emplace_back(off_h + gy * d, off_w + gx * d);
  return pos;
}

namespace ops {
namespace {

template <typename T>
bool any_rg2(const Tensor<T>& a, const Tensor<T>& b) {
  return a.requires_grad() || b.requires_grad();
}

template <typename T, typename Fn>
void finish(Tape<T>* tp, const char* name, Tensor<T> out, bool rg, Fn&& fn) {
  if (!tp) return;
  tp->check_output(name, out);
  if (!rg) return;
  out.set_requires_grad(true);
  tp->record(name, {std::move(out)}, std::forward<Fn>(fn));
}

}  // namespace

template <typename T>
Tensor<T> global_attend(Tape<T>* tp, const Tensor<T>& f, const Tensor<T>& attn,
                        const std::vector<std::pair<int, int>>& positions) {
  const int n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  const int d = attn.dim(1);
  if (static_cast<std::size_t>(d) != positions.size())
    throw std::invalid_argument("global_attend: attention D != number of positions");
  if (attn.dim(0) != n || attn.dim(2) != h || attn.dim(3) != w)
    throw std::invalid_argument("global_attend: attention extents mismatch");
  const std::size_t sp = static_cast<std::size_t>(h) * w;
  Tensor<T> y = Tensor<T>::zeros({n, c, h, w});
  const T* fv = f.data();
  const T* av = attn.data();
  T* yv = y.data();
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) {
      const auto [py, px] = positions[k];
      if (py < 0 || py >= h || px < 0 || px >= w) continue;  // off-map anchor: zero feature
      const T* aplane = av + (static_cast<std::size_t>(i) * d + k) * sp;
      for (int ch = 0; ch < c; ++ch) {
        const T fval = fv[((static_cast<std::size_t>(i) * c + ch) * h + py) * w + px];
        T* out = yv + (static_cast<std::size_t>(i) * c + ch) * sp;
        for (std::size_t s = 0; s < sp; ++s) out[s] += fval * aplane[s];
      }
    }
  finish(tp, "global_attend", y, any_rg2(f, attn), [=]() mutable {
    const T* gy = y.grad_data();
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k) {
        const auto [py, px] = positions[k];
        if (py < 0 || py >= h || px < 0 || px >= w) continue;
        const T* aplane = attn.data() + (static_cast<std::size_t>(i) * d + k) * sp;
        T* ga = attn.requires_grad()
                    ? attn.grad_data() + (static_cast<std::size_t>(i) * d + k) * sp
                    : nullptr;
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t fidx = ((static_cast<std::size_t>(i) * c + ch) * h + py) * w + px;
          const T fval = f.data()[fidx];
          const T* gout = gy + (static_cast<std::size_t>(i) * c + ch) * sp;
          if (f.requires_grad()) {
            T acc = T(0);
            for (std::size_t s = 0; s < sp; ++s) acc += aplane[s] * gout[s];
            f.grad_data()[fidx] += acc;
          }
          if (ga)
            for (std::size_t s = 0; s < sp; ++s) ga[s] += fval * gout[s];
        }
      }
  });
  return y;
}

template <typename T>
Tensor<T> local_attend(Tape<T>* tp, const Tensor<T>& f, const Tensor<T>& attn, int grid_w,
                       int grid_h, int d) {
  if (grid_w % 2 == 0 || grid_h % 2 == 0)
    throw std::invalid_argument("local_attend: grid extents must be odd");
  const int n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  if (attn.dim(1) != grid_w * grid_h)
    throw std::invalid_argument("local_attend: attention D != grid product");
  if (attn.dim(0) != n || attn.dim(2) != h || attn.dim(3) != w)
    throw std::invalid_argument("local_attend: attention extents mismatch");
  const int cy = (grid_h - 1) / 2, cx = (grid_w - 1) / 2;
  const std::size_t sp = static_cast<std::size_t>(h) * w;
  Tensor<T> y = Tensor<T>::zeros({n, c, h, w});
  const T* fv = f.data();
  const T* av = attn.data();
  T* yv = y.data();
  for (int i = 0; i < n; ++i)
    for (int u = 0; u < grid_h; ++u)
      for (int v = 0; v < grid_w; ++v) {
        const int k = u * grid_w + v;
        const int dy = (u - cy) * d, dx = (v - cx) * d;
        const int h0 = std::max(0, -dy), h1 = std::min(h, h - dy);
        const int w0 = std::max(0, -dx), w1 = std::min(w, w - dx);
        const T* aplane = av + (static_cast<std::size_t>(i) * grid_w * grid_h + k) * sp;
        for (int ch = 0; ch < c; ++ch) {
          const T* fplane = fv + (static_cast<std::size_t>(i) * c + ch) * sp;
          T* out = yv + (static_cast<std::size_t>(i) * c + ch) * sp;
          for (int hh = h0; hh < h1; ++hh) {
            const T* frow = fplane + static_cast<std::size_t>(hh + dy) * w + dx;
            const T* arow = aplane + static_cast<std::size_t>(hh) * w;
            T* orow = out + static_cast<std::size_t>(hh) * w;
            for (int ww = w0; ww < w1; ++ww) orow[ww] += arow[ww] * frow[ww];
          }
        }
      }
  finish(tp, "local_attend", y, any_rg2(f, attn), [=]() mutable {
    const T* gy = y.grad_data();
    const int dd = grid_w * grid_h;
    for (int i = 0; i < n; ++i)
      for (int u = 0; u < grid_h; ++u)
        for (int v = 0; v < grid_w; ++v) {
          const int k = u * grid_w + v;
          const int dy = (u - cy) * d, dx = (v - cx) * d;
          const int h0 = std::max(0, -dy), h1 = std::min(h, h - dy);
          const int w0 = std::max(0, -dx), w1 = std::min(w, w - dx);
          const T* aplane = attn.data() + (static_cast<std::size_t>(i) * dd + k) * sp;
          T* ga = attn.requires_grad()
                      ? attn.grad_data() + (static_cast<std::size_t>(i) * dd + k) * sp
                      : nullptr;
          for (int ch = 0; ch < c; ++ch) {
            const T* fplane = f.data() + (static_cast<std::size_t>(i) * c + ch) * sp;
            T* gf = f.requires_grad()
                        ? f.grad_data() + (static_cast<std::size_t>(i) * c + ch) * sp
                        : nullptr;
            const T* gout = gy + (static_cast<std::size_t>(i) * c + ch) * sp;
            for (int hh = h0; hh < h1; ++hh) {
              const std::size_t foff = static_cast<std::size_t>(hh + dy) * w + dx;
              const T* arow = aplane + static_cast<std::size_t>(hh) * w;
              const T* grow = gout + static_cast<std::size_t>(hh) * w;
              for (int ww = w0; ww < w1; ++ww) {
                if (gf) gf[foff + ww] += arow[ww] * grow[ww];
                if (ga) ga[static_cast<std::size_t>(hh) * w + ww] += fplane[foff + ww] * grow[ww];
              }
            }
          }
        }
  });
  return y;
}

template <typename T>
Tensor<T> pooled_context_global(Tape<T>* tp, const Tensor<T>& f, PoolMode mode,
                                const std::vector<std::pair<int, int>>& positions) {
  const int n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  const int d = static_cast<int>(positions.size());
  const std::size_t sp = static_cast<std::size_t>(h) * w;
  Tensor<T> y = Tensor<T>::zeros({n, c, h, w});
  // Context set is pixel-independent, so pool once per (n, c) and broadcast.
  auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(n) * c, -1);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T* fplane = f.data() + (static_cast<std::size_t>(i) * c + ch) * sp;
      T pooled;
      int best = -1;  // -1: the pooled value is a zero-padded tap
      if (mode == PoolMode::avg) {
        T acc = T(0);
        for (int k = 0; k < d; ++k) {
          const auto [py, px] = positions[k];
          if (py >= 0 && py < h && px >= 0 && px < w)
            acc += fplane[static_cast<std::size_t>(py) * w + px];
        }
        pooled = acc / static_cast<T>(d);
      } else {
        T mx = -std::numeric_limits<T>::infinity();
        for (int k = 0; k < d; ++k) {
          const auto [py, px] = positions[k];
          const bool in = py >= 0 && py < h && px >= 0 && px < w;
          const T val = in ? fplane[static_cast<std::size_t>(py) * w + px] : T(0);
          if (val > mx) {
            mx = val;
            best = in ? k : -1;
          }
        }
        pooled = mx;
      }
      (*arg)[static_cast<std::size_t>(i) * c + ch] = best;
      T* out = y.data() + (static_cast<std::size_t>(i) * c + ch) * sp;
      for (std::size_t s = 0; s < sp; ++s) out[s] = pooled;
    }
  finish(tp, "pooled_context_global", y, f.requires_grad(), [=]() mutable {
    const T* gy = y.grad_data();
    T* gf = f.grad_data();
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T* gout = gy + (static_cast<std::size_t>(i) * c + ch) * sp;
        T total = T(0);
        for (std::size_t s = 0; s < sp; ++s) total += gout[s];
        T* gplane = gf + (static_cast<std::size_t>(i) * c + ch) * sp;
        if (mode == PoolMode::avg) {
          const T share = total / static_cast<T>(d);
          for (int k = 0; k < d; ++k) {
            const auto [py, px] = positions[k];
            if (py >= 0 && py < h && px >= 0 && px < w)
              gplane[static_cast<std::size_t>(py) * w + px] += share;
          }
        } else {
          const int best = (*arg)[static_cast<std::size_t>(i) * c + ch];
          if (best >= 0) {
            const auto [py, px] = positions[best];
            gplane[static_cast<std::size_t>(py) * w + px] += total;
          }
        }
      }
  });
  return y;
}

template <typename T>
Tensor<T> pooled_context_local(Tape<T>* tp, const Tensor<T>& f, PoolMode mode, int grid_w,
                               int grid_h, int d) {
  if (grid_w % 2 == 0 || grid_h % 2 == 0)
    throw std::invalid_argument("pooled_context_local: grid extents must be odd");
  const int n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  const int cy = (grid_h - 1) / 2, cx = (grid_w - 1) / 2;
  const int dd = grid_w * grid_h;
  const std::size_t sp = static_cast<std::size_t>(h) * w;
  Tensor<T> y = Tensor<T>::zeros({n, c, h, w});
  auto arg = std::make_shared<std::vector<int>>(y.numel(), -1);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T* fplane = f.data() + (static_cast<std::size_t>(i) * c + ch) * sp;
      T* out = y.data() + (static_cast<std::size_t>(i) * c + ch) * sp;
      int* ap = arg->data() + (static_cast<std::size_t>(i) * c + ch) * sp;
      for (int hh = 0; hh < h; ++hh)
        for (int ww = 0; ww < w; ++ww) {
          if (mode == PoolMode::avg) {
            T acc = T(0);
            for (int u = 0; u < grid_h; ++u) {
              const int yy = hh + (u - cy) * d;
              if (yy < 0 || yy >= h) continue;
              for (int v = 0; v < grid_w; ++v) {
                const int xx = ww + (v - cx) * d;
                if (xx >= 0 && xx < w) acc += fplane[static_cast<std::size_t>(yy) * w + xx];
              }
            }
            out[static_cast<std::size_t>(hh) * w + ww] = acc / static_cast<T>(dd);
          } else {
            T mx = -std::numeric_limits<T>::infinity();
            int best = -1;
            for (int u = 0; u < grid_h; ++u)
              for (int v = 0; v < grid_w; ++v) {
                const int yy = hh + (u - cy) * d, xx = ww + (v - cx) * d;
                const bool in = yy >= 0 && yy < h && xx >= 0 && xx < w;
                const T val = in ? fplane[static_cast<std::size_t>(yy) * w + xx] : T(0);
                if (val > mx) {
                  mx = val;
                  best = in ? static_cast<int>(static_cast<std::size_t>(yy) * w + xx) : -1;
                }
              }
            out[static_cast<std::size_t>(hh) * w + ww] = mx;
            ap[static_cast<std::size_t>(hh) * w + ww] = best;
          }
        }
    }
  finish(tp, "pooled_context_local", y, f.requires_grad(), [=]() mutable {
    const T* gy = y.grad_data();
    T* gf = f.grad_data();
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T* gout = gy + (static_cast<std::size_t>(i) * c + ch) * sp;
        T* gplane = gf + (static_cast<std::size_t>(i) * c + ch) * sp;
        const int* ap = arg->data() + (static_cast<std::size_t>(i) * c + ch) * sp;
        for (int hh = 0; hh < h; ++hh)
          for (int ww = 0; ww < w; ++ww) {
            const T g = gout[static_cast<std::size_t>(hh) * w + ww];
            if (mode == PoolMode::avg) {
              const T share = g / static_cast<T>(dd);
              for (int u = 0; u < grid_h; ++u) {
                const int yy = hh + (u - cy) * d;
                if (yy < 0 || yy >= h) continue;
                for (int v = 0; v < grid_w; ++v) {
                  const int xx = ww + (v - cx) * d;
                  if (xx >= 0 && xx < w) gplane[static_cast<std::size_t>(yy) * w + xx] += share;
                }
              }
            } else {
              const int best = ap[static_cast<std::size_t>(hh) * w + ww];
              if (best >= 0) gplane[best] += g;
            }
          }
      }
  });
  return y;
}

#define PICANET_INSTANTIATE_ATTN(T)                                                          \
  template Tensor<T> global_attend<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&,         \
                                      const std::vector<std::pair<int, int>>&);             \
  template Tensor<T> local_attend<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, int,     \
                                     int, int);                                             \
  template Tensor<T> pooled_context_global<T>(Tape<T>*, const Tensor<T>&, PoolMode,         \
                                              const std::vector<std::pair<int, int>>&);     \
  template Tensor<T> pooled_context_local<T>(Tape<T>*, const Tensor<T>&, PoolMode, int,     \
                                             int, int);

PICANET_INSTANTIATE_ATTN(float)
PICANET_INSTANTIATE_ATTN(double)

}  // namespace ops
}  // namespace picanet
