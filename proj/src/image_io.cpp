#include "picanet/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <vector>

namespace picanet {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Decodes any 8/16-bit PNG to packed 8-bit RGB rows.
std::vector<unsigned char> decode_rgb8(const std::string& path, int& w, int& h) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open PNG for reading: " + path);
  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
    throw std::runtime_error("not a PNG file: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  std::vector<unsigned char> out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("PNG decode failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  w = static_cast<int>(png_get_image_width(png, info));
  h = static_cast<int>(png_get_image_height(png, info));
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  out.resize(static_cast<std::size_t>(w) * h * 3);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = out.data() + static_cast<std::size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void encode_png(const std::string& path, const unsigned char* pixels, int w, int h,
                int channels) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open PNG for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("PNG encode failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, w, h, 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y)
    rows[y] = const_cast<png_bytep>(pixels + static_cast<std::size_t>(y) * w * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

template <typename T>
unsigned char to_byte(T v) {
  const double c = std::min(1.0, std::max(0.0, static_cast<double>(v)));
  return static_cast<unsigned char>(std::lround(c * 255.0));
}

}  // namespace

template <typename T>
Tensor<T> read_png_rgb(const std::string& path) {
  int w = 0, h = 0;
  auto rgb = decode_rgb8(path, w, h);
  Tensor<T> t = Tensor<T>::zeros({3, h, w});
  T* d = t.data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) d[c * plane + p] = static_cast<T>(rgb[p * 3 + c] / 255.0);
  return t;
}

template <typename T>
Tensor<T> read_png_gray(const std::string& path) {
  int w = 0, h = 0;
  auto rgb = decode_rgb8(path, w, h);
  Tensor<T> t = Tensor<T>::zeros({1, h, w});
  T* d = t.data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  // Rec. 601 luma for color inputs; pure gray PNGs have r==g==b so the
  // weights are exact there.
  for (std::size_t p = 0; p < plane; ++p)
    d[p] = static_cast<T>(
        (0.299 * rgb[p * 3] + 0.587 * rgb[p * 3 + 1] + 0.114 * rgb[p * 3 + 2]) / 255.0);
  return t;
}

template <typename T>
void write_png_gray(const std::string& path, const Tensor<T>& img) {
  int h, w;
  if (img.rank() == 2) {
    h = img.dim(0), w = img.dim(1);
  } else if (img.rank() == 3 && img.dim(0) == 1) {
    h = img.dim(1), w = img.dim(2);
  } else {
    throw std::invalid_argument("write_png_gray expects H x W or 1 x H x W");
  }
  std::vector<unsigned char> px(static_cast<std::size_t>(h) * w);
  const T* d = img.data();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(d[i]);
  encode_png(path, px.data(), w, h, 1);
}

template <typename T>
void write_png_rgb(const std::string& path, const Tensor<T>& img) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw std::invalid_argument("write_png_rgb expects 3 x H x W");
  const int h = img.dim(1), w = img.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> px(plane * 3);
  const T* d = img.data();
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) px[p * 3 + c] = to_byte(d[c * plane + p]);
  encode_png(path, px.data(), w, h, 3);
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& img, int ho, int wo) {
  if (img.rank() != 3) throw std::invalid_argument("bilinear_resize expects C x H x W");
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("bilinear_resize: extents must be positive");
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (ho == h && wo == w) return img.clone();
  Tensor<T> out = Tensor<T>::zeros({c, ho, wo});
  const double sy = static_cast<double>(h) / ho, sx = static_cast<double>(w) / wo;
  std::vector<int> x0(wo), x1(wo);
  std::vector<double> fx(wo);
  for (int xo = 0; xo < wo; ++xo) {
    double src = (xo + 0.5) * sx - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(w - 1));
    x0[xo] = static_cast<int>(src);
    x1[xo] = std::min(w - 1, x0[xo] + 1);
    fx[xo] = src - x0[xo];
  }
  const T* dv = img.data();
  T* ov = out.data();
  for (int ch = 0; ch < c; ++ch) {
    const T* plane = dv + static_cast<std::size_t>(ch) * h * w;
    T* oplane = ov + static_cast<std::size_t>(ch) * ho * wo;
    for (int yo = 0; yo < ho; ++yo) {
      double src = (yo + 0.5) * sy - 0.5;
      src = std::min(std::max(src, 0.0), static_cast<double>(h - 1));
      const int y0 = static_cast<int>(src);
      const int y1 = std::min(h - 1, y0 + 1);
      const double fy = src - y0;
      const T* r0 = plane + static_cast<std::size_t>(y0) * w;
      const T* r1 = plane + static_cast<std::size_t>(y1) * w;
      T* orow = oplane + static_cast<std::size_t>(yo) * wo;
      for (int xo = 0; xo < wo; ++xo) {
        const double top = r0[x0[xo]] + fx[xo] * (r0[x1[xo]] - r0[x0[xo]]);
        const double bot = r1[x0[xo]] + fx[xo] * (r1[x1[xo]] - r1[x0[xo]]);
        orow[xo] = static_cast<T>(top + fy * (bot - top));
      }
    }
  }
  return out;
}

template Tensor<float> read_png_rgb(const std::string&);
template Tensor<double> read_png_rgb(const std::string&);
template Tensor<float> read_png_gray(const std::string&);
template Tensor<double> read_png_gray(const std::string&);
template void write_png_gray(const std::string&, const Tensor<float>&);
template void write_png_gray(const std::string&, const Tensor<double>&);
template void write_png_rgb(const std::string&, const Tensor<float>&);
template void write_png_rgb(const std::string&, const Tensor<double>&);
template Tensor<float> bilinear_resize(const Tensor<float>&, int, int);
template Tensor<double> bilinear_resize(const Tensor<double>&, int, int);

}  // namespace picanet
