#include "picanet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "picanet/image_io.hpp"

namespace picanet {
namespace {

struct Blob {
  bool polygon = false;
  double cx = 0, cy = 0;
  double rx = 0, ry = 0, cs = 1, sn = 0;          // ellipse
  std::vector<std::pair<double, double>> verts;   // polygon
  double value = 0;                                // base intensity
  double tint[3] = {0, 0, 0};

  bool inside(double x, double y) const {
    if (!polygon) {
      const double dx = x - cx, dy = y - cy;
      const double u = dx * cs + dy * sn, v = -dx * sn + dy * cs;
      return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
    }
    bool in = false;  // ray casting
    for (std::size_t i = 0, j = verts.size() - 1; i < verts.size(); j = i++) {
      const auto& a = verts[i];
      const auto& b = verts[j];
      if ((a.second > y) != (b.second > y) &&
          x < (b.first - a.first) * (y - a.second) / (b.second - a.second) + a.first)
        in = !in;
    }
    return in;
  }
};

}  // namespace

template <typename T>
std::vector<Sample<T>> synth_dataset(std::uint64_t seed, int n, int size) {
  if (n < 1) throw std::invalid_argument("synth_dataset: n must be >= 1");
  if (size < 8) throw std::invalid_argument("synth_dataset: size must be >= 8");
  std::vector<Sample<T>> out;
  out.reserve(n);
  const double S = size;
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(i + 1)));
    std::uniform_real_distribution<double> U(0.0, 1.0);

    std::vector<signed char> owner(static_cast<std::size_t>(size) * size);
    std::vector<Blob> blobs;
    double frac = 0;
    for (int attempt = 0; attempt < 200; ++attempt) {
      blobs.clear();
      const int nb = 1 + (U(rng) < 0.4 ? 1 : 0);
      for (int b = 0; b < nb; ++b) {
        Blob blob;
        blob.polygon = U(rng) < 0.5;
        blob.cx = (0.25 + 0.5 * U(rng)) * S;
        blob.cy = (0.25 + 0.5 * U(rng)) * S;
        if (!blob.polygon) {
          blob.rx = (0.10 + 0.18 * U(rng)) * S;
          blob.ry = (0.10 + 0.18 * U(rng)) * S;
          const double th = U(rng) * 3.14159265358979323846;
          blob.cs = std::cos(th);
          blob.sn = std::sin(th);
        } else {
          const int k = 4 + static_cast<int>(U(rng) * 4.0);  // 4..7 vertices
          std::vector<double> ang(k);
          for (auto& a : ang) a = U(rng) * 2.0 * 3.14159265358979323846;
          std::sort(ang.begin(), ang.end());
          for (double a : ang) {
            const double r = (0.10 + 0.16 * U(rng)) * S;
            blob.verts.emplace_back(blob.cx + r * std::cos(a), blob.cy + r * std::sin(a));
          }
        }
        blobs.push_back(std::move(blob));
      }
      std::fill(owner.begin(), owner.end(), static_cast<signed char>(-1));
      std::size_t fg = 0;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double px = x + 0.5, py = y + 0.5;
          for (int b = static_cast<int>(blobs.size()) - 1; b >= 0; --b)
            if (blobs[static_cast<std::size_t>(b)].inside(px, py)) {
              owner[static_cast<std::size_t>(y) * size + x] = static_cast<signed char>(b);
              ++fg;
              break;
            }
        }
      frac = static_cast<double>(fg) / (S * S);
      if (frac >= 0.05 && frac <= 0.5) break;
    }
    if (frac < 0.05 || frac > 0.5)
      throw std::runtime_error("synth_dataset: could not meet the area-fraction bounds");

    const double g0 = 0.35 + 0.20 * U(rng);
    const double phi = U(rng) * 2.0 * 3.14159265358979323846;
    const double grad_amp = 0.05 + 0.10 * U(rng);
    const double noise_amp = 0.01 + 0.03 * U(rng);
    double bgtint[3];
    for (double& t : bgtint) t = (U(rng) * 2.0 - 1.0) * 0.03;
    for (auto& blob : blobs) {
      const double delta = 0.30 + 0.15 * U(rng);
      blob.value = g0 + (U(rng) < 0.5 ? -delta : delta);
      blob.value = std::min(0.98, std::max(0.02, blob.value));
      for (double& t : blob.tint) t = (U(rng) * 2.0 - 1.0) * 0.08;
    }

    Sample<T> s;
    s.image = Tensor<T>::zeros({3, size, size});
    s.mask = Tensor<T>::zeros({1, size, size});
    s.name = "synth" + std::to_string(i);
    T* img = s.image.data();
    T* msk = s.mask.data();
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    const double gx = std::cos(phi), gy = std::sin(phi);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * size + x;
        const int b = owner[p];
        msk[p] = b >= 0 ? T(1) : T(0);
        const double grad =
            grad_amp * 2.0 * ((x / S - 0.5) * gx + (y / S - 0.5) * gy);
        for (int c = 0; c < 3; ++c) {
          const double noise = (U(rng) * 2.0 - 1.0) * noise_amp;
          double v;
          if (b >= 0) {
            const auto& blob = blobs[static_cast<std::size_t>(b)];
            v = blob.value + blob.tint[c] + noise;
          } else {
            v = g0 + grad + bgtint[c] + noise;
          }
          img[c * plane + p] = static_cast<T>(std::min(1.0, std::max(0.0, v)));
        }
      }
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
Sample<T> augment(const Sample<T>& s, std::mt19937_64& rng) {
  if (s.image.rank() != 3 || s.mask.rank() != 3 || s.image.dim(1) != s.image.dim(2))
    throw std::invalid_argument("augment expects square 3 x S x S samples");
  const int S = s.image.dim(1);
  const int R = S + S / 8;
  std::uniform_int_distribution<int> flipd(0, 1), offd(0, R - S);
  const bool flip = flipd(rng) == 1;
  const int oy = offd(rng);
  const int ox = offd(rng);

  Tensor<T> img = bilinear_resize(s.image, R, R);
  Tensor<T> msk = bilinear_resize(s.mask, R, R);
  for (auto& v : msk.vals()) v = v >= T(0.5) ? T(1) : T(0);

  Sample<T> out;
  out.image = Tensor<T>::zeros({3, S, S});
  out.mask = Tensor<T>::zeros({1, S, S});
  out.name = s.name;
  auto copy = [&](const Tensor<T>& src, Tensor<T>& dst) {
    const int c = src.dim(0);
    const T* sv = src.data();
    T* dv = dst.data();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const int sx = flip ? R - 1 - (ox + x) : ox + x;
          dv[(static_cast<std::size_t>(ch) * S + y) * S + x] =
              sv[(static_cast<std::size_t>(ch) * R + oy + y) * R + sx];
        }
  };
  copy(img, out.image);
  copy(msk, out.mask);
  return out;
}

template <typename T>
std::vector<Sample<T>> load_dataset_dir(const std::string& dir, int size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::invalid_argument("not a directory: " + dir);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string fn = e.path().filename().string();
    if (fn.size() < 4 || fn.substr(fn.size() - 4) != ".png") continue;
    const std::string stem = fn.substr(0, fn.size() - 4);
    if (stem.size() >= 5 && stem.substr(stem.size() - 5) == "_mask") continue;
    names.push_back(stem);
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw std::invalid_argument("no image/mask pairs in " + dir);
  std::string missing;
  for (const auto& n : names)
    if (!fs::exists(fs::path(dir) / (n + "_mask.png"))) missing += (missing.empty() ? "" : ", ") + n;
  if (!missing.empty())
    throw std::invalid_argument("missing mask files for: " + missing);

  std::vector<Sample<T>> out;
  for (const auto& n : names) {
    Sample<T> s;
    s.name = n;
    Tensor<T> img = read_png_rgb<T>((fs::path(dir) / (n + ".png")).string());
    Tensor<T> mask = read_png_gray<T>((fs::path(dir) / (n + "_mask.png")).string());
    // threshold at byte value 128 before any resize
    for (auto& v : mask.vals()) v = v * T(255) >= T(127.5) ? T(1) : T(0);
    s.image = bilinear_resize(img, size, size);
    const int mh = mask.dim(1), mw = mask.dim(2);
    s.mask = Tensor<T>::zeros({1, size, size});
    const T* mv = mask.data();
    T* dv = s.mask.data();
    for (int y = 0; y < size; ++y) {
      const int ys = std::min(mh - 1, static_cast<int>((y + 0.5) * mh / size));
      for (int x = 0; x < size; ++x) {
        const int xs = std::min(mw - 1, static_cast<int>((x + 0.5) * mw / size));
        dv[static_cast<std::size_t>(y) * size + x] = mv[static_cast<std::size_t>(ys) * mw + xs];
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

DatasetSpec parse_dataset_spec(const std::string& s) {
  DatasetSpec spec;
  const std::string prefix = "synthetic:";
  if (s.rfind(prefix, 0) == 0) {
    spec.synthetic = true;
    const std::string rest = s.substr(prefix.size());
    const auto colon = rest.find(':');
    if (colon == std::string::npos)
      throw std::invalid_argument("dataset spec must be synthetic:<seed>:<n>, got " + s);
    try {
      spec.seed = std::stoull(rest.substr(0, colon));
      spec.n = std::stoi(rest.substr(colon + 1));
    } catch (const std::exception&) {
      throw std::invalid_argument("dataset spec must be synthetic:<seed>:<n>, got " + s);
    }
    if (spec.n < 1) throw std::invalid_argument("synthetic dataset needs n >= 1");
  } else {
    spec.dir = s;
  }
  return spec;
}

template <typename T>
std::vector<Sample<T>> load_dataset(const DatasetSpec& spec, int size) {
  return spec.synthetic ? synth_dataset<T>(spec.seed, spec.n, size)
                        : load_dataset_dir<T>(spec.dir, size);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<Sample<T>>& data,
                                           const std::vector<int>& idx) {
  if (idx.empty()) throw std::invalid_argument("make_batch: empty index set");
  const int S = data.at(0).image.dim(1);
  const int n = static_cast<int>(idx.size());
  Tensor<T> images = Tensor<T>::zeros({n, 3, S, S});
  Tensor<T> masks = Tensor<T>::zeros({n, 1, S, S});
  const std::size_t iplane = static_cast<std::size_t>(3) * S * S;
  const std::size_t mplane = static_cast<std::size_t>(S) * S;
  for (int k = 0; k < n; ++k) {
    const auto& s = data.at(static_cast<std::size_t>(idx[static_cast<std::size_t>(k)]));
    if (s.image.dim(1) != S) throw std::invalid_argument("make_batch: extent mismatch");
    std::copy(s.image.data(), s.image.data() + iplane, images.data() + k * iplane);
    std::copy(s.mask.data(), s.mask.data() + mplane, masks.data() + k * mplane);
  }
  return {images, masks};
}

template std::vector<Sample<float>> synth_dataset(std::uint64_t, int, int);
template std::vector<Sample<double>> synth_dataset(std::uint64_t, int, int);
template Sample<float> augment(const Sample<float>&, std::mt19937_64&);
template Sample<double> augment(const Sample<double>&, std::mt19937_64&);
template std::vector<Sample<float>> load_dataset_dir(const std::string&, int);
template std::vector<Sample<double>> load_dataset_dir(const std::string&, int);
template std::vector<Sample<float>> load_dataset(const DatasetSpec&, int);
template std::vector<Sample<double>> load_dataset(const DatasetSpec&, int);
template std::pair<Tensor<float>, Tensor<float>> make_batch(const std::vector<Sample<float>>&,
                                                            const std::vector<int>&);
template std::pair<Tensor<double>, Tensor<double>> make_batch(const std::vector<Sample<double>>&,
                                                              const std::vector<int>&);

}  // namespace picanet
