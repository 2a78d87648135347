#pragma once

#include <string>

#include "picanet/tensor.hpp"

namespace picanet {

// 8-bit PNGs <-> [0,1] float tensors. Readers accept gray/palette/RGB/RGBA
// inputs and normalize to the requested layout; writers emit 8-bit
// grayscale or RGB with values round(255*v) after clamping to [0,1].

template <typename T>
Tensor<T> read_png_rgb(const std::string& path);  // 3 x H x W

template <typename T>
Tensor<T> read_png_gray(const std::string& path);  // 1 x H x W

template <typename T>
void write_png_gray(const std::string& path, const Tensor<T>& img);  // 1 x H x W or H x W

template <typename T>
void write_png_rgb(const std::string& path, const Tensor<T>& img);  // 3 x H x W

// Bilinear resample to ho x wo with centered sampling (source coordinate
// (o + 0.5) * in/out - 0.5, clamped at the borders). C x H x W.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& img, int ho, int wo);

}  // namespace picanet
