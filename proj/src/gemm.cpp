#include "picanet/gemm.hpp"

#include <algorithm>

namespace picanet {
namespace {

// 8 x NR register tile; NR spans two SIMD columns for the target width.
template <typename T>
constexpr int nr_for() {
  return sizeof(T) == 4 ? 32 : 16;
}

template <typename T>
void kernel(const T* __restrict ap, const T* __restrict B, T* __restrict C, int K, int N,
            int n0, int mr) {
  constexpr int MR = 8, NR = nr_for<T>();
  T acc[MR][NR];
  for (int r = 0; r < MR; ++r)
    for (int c = 0; c < NR; ++c) acc[r][c] = T(0);
  for (int k = 0; k < K; ++k) {
    const T* __restrict b = B + static_cast<std::size_t>(k) * N + n0;
    const T* __restrict a = ap + static_cast<std::size_t>(k) * MR;
    for (int r = 0; r < MR; ++r)
      for (int c = 0; c < NR; ++c) acc[r][c] += a[r] * b[c];
  }
  for (int r = 0; r < mr; ++r) {
    T* __restrict crow = C + static_cast<std::size_t>(r) * N + n0;
    for (int c = 0; c < NR; ++c) crow[c] += acc[r][c];
  }
}

}  // namespace

template <typename T>
void gemm_acc(const T* A, const T* B, T* C, int M, int K, int N) {
  constexpr int MR = 8, NR = nr_for<T>();
  thread_local std::vector<T> pack;
  const int tiles = (M + MR - 1) / MR;
  pack.resize(static_cast<std::size_t>(tiles) * MR * K);
  for (int t = 0; t < tiles; ++t) {
    const int m0 = t * MR, mr = std::min(MR, M - m0);
    T* p = pack.data() + static_cast<std::size_t>(t) * MR * K;
    for (int k = 0; k < K; ++k)
      for (int r = 0; r < MR; ++r)
        p[static_cast<std::size_t>(k) * MR + r] =
            r < mr ? A[static_cast<std::size_t>(m0 + r) * K + k] : T(0);
  }
  int n = 0;
  for (; n + NR <= N; n += NR)
    for (int t = 0; t < tiles; ++t)
      kernel<T>(pack.data() + static_cast<std::size_t>(t) * MR * K, B,
                C + static_cast<std::size_t>(t) * MR * N, K, N, n, std::min(MR, M - t * MR));
  if (n < N) {
    const int rem = N - n;
    for (int m = 0; m < M; ++m) {
      T* crow = C + static_cast<std::size_t>(m) * N + n;
      for (int k = 0; k < K; ++k) {
        const T a = A[static_cast<std::size_t>(m) * K + k];
        const T* b = B + static_cast<std::size_t>(k) * N + n;
        for (int j = 0; j < rem; ++j) crow[j] += a * b[j];
      }
    }
  }
}

namespace {

// Dot-product tile: C[r][c] += sum_n A[r][n] * B[c][n] for an MR x KR block.
// Accumulates in VL-wide lanes reduced at the end; lane split and reduction
// order are fixed, so results are reproducible run to run.
template <typename T, int MR, int KR>
void nt_tile(const T* __restrict A, const T* __restrict B, T* __restrict C, int N, int K,
             int mr, int kr) {
  constexpr int VL = sizeof(T) == 4 ? 16 : 8;
  T acc[MR][KR][VL] = {};
  int n = 0;
  if (mr == MR && kr == KR) {  // fixed bounds so the accumulators stay in registers
    for (; n + VL <= N; n += VL)
      for (int r = 0; r < MR; ++r) {
        const T* __restrict a = A + static_cast<std::size_t>(r) * N + n;
        for (int c = 0; c < KR; ++c) {
          const T* __restrict b = B + static_cast<std::size_t>(c) * N + n;
          for (int v = 0; v < VL; ++v) acc[r][c][v] += a[v] * b[v];
        }
      }
  } else {
    for (; n + VL <= N; n += VL)
      for (int r = 0; r < mr; ++r) {
        const T* __restrict a = A + static_cast<std::size_t>(r) * N + n;
        for (int c = 0; c < kr; ++c) {
          const T* __restrict b = B + static_cast<std::size_t>(c) * N + n;
          for (int v = 0; v < VL; ++v) acc[r][c][v] += a[v] * b[v];
        }
      }
  }
  for (int r = 0; r < mr; ++r)
    for (int c = 0; c < kr; ++c) {
      T s = T(0);
      for (int v = 0; v < VL; ++v) s += acc[r][c][v];
      for (int t = n; t < N; ++t)
        s += A[static_cast<std::size_t>(r) * N + t] * B[static_cast<std::size_t>(c) * N + t];
      C[static_cast<std::size_t>(r) * K + c] += s;
    }
}

}  // namespace

template <typename T>
void gemm_nt_acc(const T* A, const T* B, T* C, int M, int N, int K) {
  constexpr int MR = 8, KR = 6;
  for (int m = 0; m < M; m += MR) {
    const int mr = std::min(MR, M - m);
    for (int k = 0; k < K; k += KR) {
      const int kr = std::min(KR, K - k);
      nt_tile<T, MR, KR>(A + static_cast<std::size_t>(m) * N, B + static_cast<std::size_t>(k) * N,
                         C + static_cast<std::size_t>(m) * K + k, N, K, mr, kr);
    }
  }
}

template <typename T>
void transpose(const T* src, T* dst, int rows, int cols) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
}

template void gemm_acc<float>(const float*, const float*, float*, int, int, int);
template void gemm_acc<double>(const double*, const double*, double*, int, int, int);
template void gemm_nt_acc<float>(const float*, const float*, float*, int, int, int);
template void gemm_nt_acc<double>(const double*, const double*, double*, int, int, int);
template void transpose<float>(const float*, float*, int, int);
template void transpose<double>(const double*, double*, int, int);

}  // namespace picanet
