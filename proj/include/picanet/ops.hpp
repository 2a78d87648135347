#pragma once

#include <utility>
#include <vector>

#include "picanet/tape.hpp"
#include "picanet/tensor.hpp"

namespace picanet {

enum class Act { relu, sigmoid, tanh };
enum class BNMode { train, eval };

template <typename T>
struct LstmParams {
  Tensor<T> w_ih;  // 4H x In, gate order i,f,g,o
  Tensor<T> w_hh;  // 4H x H
  Tensor<T> b;     // 4H
};

namespace ops {

// Cross-correlation with zero padding; x: N x C_in x H x W, w: C_out x C_in x
// k_h x k_w, b: C_out. Output spatial size floor((in+2p-d*(k-1)-1)/s)+1.
template <typename T>
Tensor<T> conv2d(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int dilation, int padding);

template <typename T>
Tensor<T> activation(Tape<T>* tp, const Tensor<T>& x, Act kind);

// Softmax over the channel axis at every (n,h,w); max-subtracted for overflow
// safety (mathematically identical to the plain form).
template <typename T>
Tensor<T> channel_softmax(Tape<T>* tp, const Tensor<T>& x);

// Train mode standardizes with batch statistics (biased variance, eps 1e-5)
// and updates running stats in place with momentum 0.1 (running variance uses
// the unbiased estimate); eval mode uses the running stats.
template <typename T>
Tensor<T> batch_norm(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BNMode mode, Tensor<T>& running_mean,
                     Tensor<T>& running_var, T momentum = T(0.1), T eps = T(1e-5));

// Fixed (non-learned) bilinear kernel; equivalent to a stride-2 transposed
// convolution with the standard 4-tap kernel on a replicate-padded input, so
// constant maps stay constant.
template <typename T>
Tensor<T> bilinear_upsample2x(Tape<T>* tp, const Tensor<T>& x);

template <typename T>
Tensor<T> concat_channels(Tape<T>* tp, const std::vector<Tensor<T>>& xs);

template <typename T>
Tensor<T> max_pool2x2(Tape<T>* tp, const Tensor<T>& x);

// One LSTM step on a batch of rows: x B x In, h/c B x H -> (h', c').
template <typename T>
std::pair<Tensor<T>, Tensor<T>> lstm_cell(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& h,
                                          const Tensor<T>& c, const LstmParams<T>& p);

// --- reductions / glue ---

template <typename T>
Tensor<T> sum_all(Tape<T>* tp, const Tensor<T>& x);

// <x, r> with a constant projection vector; used as a generic scalar head in
// gradient checks (catches bugs a plain sum would miss).
template <typename T>
Tensor<T> dot_const(Tape<T>* tp, const Tensor<T>& x, const std::vector<T>& r);

template <typename T>
Tensor<T> add(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b);

// Mean binary cross-entropy; predictions clamped to [1e-7, 1-1e-7] before the
// logs. target carries no gradient.
template <typename T>
Tensor<T> bce_mean(Tape<T>* tp, const Tensor<T>& pred, const Tensor<T>& target);

// sum_i w_i * scalar_i
template <typename T>
Tensor<T> weighted_sum_scalars(Tape<T>* tp, const std::vector<Tensor<T>>& xs,
                               const std::vector<T>& w);

// --- spatial <-> sequence plumbing for recurrent sweeps ---

// Column w of an N x C x H x W map as a (N*H) x C matrix (row = n*H + h).
template <typename T>
Tensor<T> take_w(Tape<T>* tp, const Tensor<T>& x, int w);

// Row h as a (N*W) x C matrix (row = n*W + w).
template <typename T>
Tensor<T> take_h(Tape<T>* tp, const Tensor<T>& x, int h);

template <typename T>
Tensor<T> stack_w(Tape<T>* tp, const std::vector<Tensor<T>>& cols, int n, int h);

template <typename T>
Tensor<T> stack_h(Tape<T>* tp, const std::vector<Tensor<T>>& rows, int n, int w);

// Concatenate two B x C matrices along the feature axis.
template <typename T>
Tensor<T> concat_cols(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b);

}  // namespace ops
}  // namespace picanet
