#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "picanet/tensor.hpp"

namespace picanet {

template <typename T>
struct Sample {
  Tensor<T> image;  // 3 x S x S in [0,1]
  Tensor<T> mask;   // 1 x S x S, values exactly 0 or 1
  std::string name;
};

// Deterministic synthetic saliency pairs: textured background (base gray +
// linear gradient + low-amplitude noise) with 1-2 high-contrast foreground
// blobs (rotated ellipses or convex polygons). Foreground area fraction is
// kept in [0.05, 0.5] by construction (geometry is redrawn until it fits).
// Sample i depends only on (seed, i), not on n.
template <typename T>
std::vector<Sample<T>> synth_dataset(std::uint64_t seed, int n, int size = 64);

// Resize to 9/8 the target (64 -> 72), random horizontal flip, random crop
// back to the original extent. The mask gets the same flip/crop and is
// re-binarized (>= 0.5) after its resize. Consumes three draws from rng:
// flip, row offset, column offset.
template <typename T>
Sample<T> augment(const Sample<T>& s, std::mt19937_64& rng);

// Paired files <name>.png (RGB) + <name>_mask.png (grayscale, thresholded at
// 128); images are resized to size x size (bilinear), masks thresholded then
// nearest-resized so they stay binary. Missing mates abort with a list.
template <typename T>
std::vector<Sample<T>> load_dataset_dir(const std::string& dir, int size = 64);

struct DatasetSpec {
  bool synthetic = false;
  std::uint64_t seed = 0;
  int n = 0;
  std::string dir;
};

// "synthetic:<seed>:<n>" or a directory path.
DatasetSpec parse_dataset_spec(const std::string& s);

template <typename T>
std::vector<Sample<T>> load_dataset(const DatasetSpec& spec, int size = 64);

// Stacks the selected samples into N x 3 x S x S and N x 1 x S x S batches.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<Sample<T>>& data,
                                           const std::vector<int>& idx);

}  // namespace picanet
