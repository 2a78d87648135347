#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "picanet/tensor.hpp"

namespace testutil {

template <typename T>
picanet::Tensor<T> randt(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0,
                         double hi = 1.0, bool requires_grad = false) {
  auto t = picanet::Tensor<T>::zeros(std::move(shape), requires_grad);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
double max_abs_diff(const picanet::Tensor<T>& a, const picanet::Tensor<T>& b) {
  if (a.shape() != b.shape()) return 1e30;
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

// max over elements of |a-b| / max(1, |a|, |b|)
template <typename T>
double max_rel_diff(const picanet::Tensor<T>& a, const picanet::Tensor<T>& b) {
  if (a.shape() != b.shape()) return 1e30;
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i], y = b.data()[i];
    m = std::max(m, std::abs(x - y) / std::max({1.0, std::abs(x), std::abs(y)}));
  }
  return m;
}

// Softmax-normalizes D values at every (n, h, w) of an N x D x H x W map so
// tests can feed valid attention fields to the attending ops.
template <typename T>
void normalize_attention(picanet::Tensor<T>& attn) {
  const int n = attn.dim(0), d = attn.dim(1), h = attn.dim(2), w = attn.dim(3);
  const std::size_t sp = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n; ++i)
    for (std::size_t s = 0; s < sp; ++s) {
      double mx = -1e300;
      for (int k = 0; k < d; ++k)
        mx = std::max(mx, static_cast<double>(attn.data()[(static_cast<std::size_t>(i) * d + k) * sp + s]));
      double z = 0;
      for (int k = 0; k < d; ++k) {
        auto& v = attn.data()[(static_cast<std::size_t>(i) * d + k) * sp + s];
        v = static_cast<T>(std::exp(static_cast<double>(v) - mx));
        z += v;
      }
      for (int k = 0; k < d; ++k)
        attn.data()[(static_cast<std::size_t>(i) * d + k) * sp + s] /= static_cast<T>(z);
    }
}

}  // namespace testutil
