#pragma once

#include <utility>
#include <vector>

#include "picanet/ops.hpp"

namespace picanet {

// Normalized per-pixel attention weights: N x D x H x W where D is the
// attention grid product (global A_w*A_h, local W̄*H̄). At every (n,h,w) the D
// weights are non-negative and sum to 1.
template <typename T>
struct AttentionField {
  Tensor<T> weights;
  int grid_w = 0, grid_h = 0;
  int dilation = 1;
};

struct GlobalPiCANetConfig {
  int renet_hidden = 32;
  int attn_grid_w = 6, attn_grid_h = 6;
  int dilation = 3;
  bool use_bn_before_softmax = true;
};

// Defaults are the desk-scale configuration: a 5x5 dilation-2 context kernel
// sees the same 9x9 footprint the 5x5 dilation-2 attention grid attends over.
struct LocalPiCANetConfig {
  int context_kernel = 5;
  int context_dilation = 2;
  int context_channels = 32;
  int attn_grid_w = 5, attn_grid_h = 5;
  int attend_dilation = 2;
};

enum class PoolMode { max, avg };

// Anchor coordinates (row, col) for each attention index, row-major over the
// grid. The grid has spacing d and is centered: offset =
// floor((extent - ((A-1)*d + 1)) / 2) per axis; anchors may fall outside the
// map, where they contribute zero features.
std::vector<std::pair<int, int>> attention_positions(int w, int h, int grid_w, int grid_h, int d);

namespace ops {

// Eq.-2 style global attending: out(n,:,h,w) = sum_i attn(n,i,h,w) * F at
// anchor i (zero vector when the anchor is off-map).
template <typename T>
Tensor<T> global_attend(Tape<T>* tp, const Tensor<T>& f, const Tensor<T>& attn,
                        const std::vector<std::pair<int, int>>& positions);

// Eq.-3 style local attending over the dilated grid_w x grid_h neighborhood
// centered at each pixel, zero padding outside the map. Grid extents must be
// odd so a center tap exists.
template <typename T>
Tensor<T> local_attend(Tape<T>* tp, const Tensor<T>& f, const Tensor<T>& attn, int grid_w,
                       int grid_h, int d);

// Pooling stand-ins for the attending ops (ablation baselines): per-pixel max
// or mean over exactly the context positions the corresponding attending op
// would see, zero-padded taps included.
template <typename T>
Tensor<T> pooled_context_global(Tape<T>* tp, const Tensor<T>& f, PoolMode mode,
                                const std::vector<std::pair<int, int>>& positions);

template <typename T>
Tensor<T> pooled_context_local(Tape<T>* tp, const Tensor<T>& f, PoolMode mode, int grid_w,
                               int grid_h, int d);

}  // namespace ops
}  // namespace picanet
