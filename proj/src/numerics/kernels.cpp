// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/numerics/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace clickseg::kernels {
namespace {

// Register-tiled micro kernel: acc[MR][NR] over a packed B panel (kc x NR).
template <typename T, int MR, int NR>
inline void micro_kernel(std::int64_t kc, const T* a, std::int64_t lda, const T* bpanel, T* c,
                         std::int64_t ldc, int rows, int cols) {
  T acc[MR][NR] = {};
  for (std::int64_t p = 0; p < kc; ++p) {
    const T* br = bpanel + p * NR;
    for (int i = 0; i < MR; ++i) {
      const T av = a[i * lda + p];
      for (int j = 0; j < NR; ++j) acc[i][j] += av * br[j];
    }
  }
  for (int i = 0; i < rows; ++i) {
    T* cr = c + i * ldc;
    for (int j = 0; j < cols; ++j) cr[j] += acc[i][j];
  }
}

template <typename T>
struct Tile;
template <>
struct Tile<float> {
  static constexpr int kMR = 4;
  static constexpr int kNR = 32;
};
template <>
struct Tile<double> {
  static constexpr int kMR = 4;
  static constexpr int kNR = 16;
};

}  // namespace

template <typename T>
void gemm(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, std::int64_t lda, const T* b,
          std::int64_t ldb, T* c, std::int64_t ldc, bool accumulate) {
  constexpr int MR = Tile<T>::kMR;
  constexpr int NR = Tile<T>::kNR;
  constexpr std::int64_t KC = 256;
  if (!accumulate) {
    for (std::int64_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, T(0));
  }
  if (m == 0 || n == 0 || k == 0) return;

  // Short-row edge rows reuse a padded copy of A so the kernel never reads
  // past the end of the caller's buffer.
  std::vector<T> bpack(static_cast<std::size_t>(KC * NR));
  std::vector<T> apad(static_cast<std::size_t>(MR * KC));
  for (std::int64_t k0 = 0; k0 < k; k0 += KC) {
    const std::int64_t kc = std::min(KC, k - k0);
    for (std::int64_t j0 = 0; j0 < n; j0 += NR) {
      const int nr = static_cast<int>(std::min<std::int64_t>(NR, n - j0));
      if (nr < NR) std::fill(bpack.begin(), bpack.end(), T(0));
      for (std::int64_t p = 0; p < kc; ++p) {
        std::memcpy(&bpack[static_cast<std::size_t>(p * NR)], b + (k0 + p) * ldb + j0,
                    sizeof(T) * static_cast<std::size_t>(nr));
      }
      std::int64_t i = 0;
      for (; i + MR <= m; i += MR) {
        micro_kernel<T, MR, NR>(kc, a + i * lda + k0, lda, bpack.data(), c + i * ldc + j0, ldc, MR,
                                nr);
      }
      if (i < m) {
        const int rows = static_cast<int>(m - i);
        std::fill(apad.begin(), apad.end(), T(0));
        for (int r = 0; r < rows; ++r) {
          std::memcpy(&apad[static_cast<std::size_t>(r * KC)], a + (i + r) * lda + k0,
                      sizeof(T) * static_cast<std::size_t>(kc));
        }
        micro_kernel<T, MR, NR>(kc, apad.data(), KC, bpack.data(), c + i * ldc + j0, ldc, rows, nr);
      }
    }
  }
}

template <typename T>
void transpose(std::int64_t m, std::int64_t n, const T* in, T* out) {
  constexpr std::int64_t B = 32;
  for (std::int64_t i0 = 0; i0 < m; i0 += B) {
    for (std::int64_t j0 = 0; j0 < n; j0 += B) {
      const std::int64_t i1 = std::min(m, i0 + B), j1 = std::min(n, j0 + B);
      for (std::int64_t i = i0; i < i1; ++i) {
        for (std::int64_t j = j0; j < j1; ++j) out[j * m + i] = in[i * n + j];
      }
    }
  }
}

template void gemm<float>(std::int64_t, std::int64_t, std::int64_t, const float*, std::int64_t,
                          const float*, std::int64_t, float*, std::int64_t, bool);
template void gemm<double>(std::int64_t, std::int64_t, std::int64_t, const double*, std::int64_t,
                           const double*, std::int64_t, double*, std::int64_t, bool);
template void transpose<float>(std::int64_t, std::int64_t, const float*, float*);
template void transpose<double>(std::int64_t, std::int64_t, const double*, double*);

}  // namespace clickseg::kernels
