#pragma once

#include <cstddef>
#include <vector>

namespace picanet {

// C (M x N) += A (M x K) * B (K x N); all row-major contiguous. Every output
// element is a k-ordered serial sum, so results are bit-reproducible and
// independent of tiling. A is repacked internally into 8-row k-major panels.
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, int M, int K, int N);

// C (M x K) += A (M x N) * B^T where B is (K x N) row-major: both operands
// are walked along their contiguous inner dimension, so no transpose buffer
// is needed. Used for conv weight gradients (gy * columns^T).
template <typename T>
void gemm_nt_acc(const T* A, const T* B, T* C, int M, int N, int K);

template <typename T>
void transpose(const T* src, T* dst, int rows, int cols);

}  // namespace picanet
