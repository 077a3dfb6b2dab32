// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// Raw loop kernels shared by the differentiable ops. These operate on plain
// row-major buffers and never touch the tape.

#pragma once

#include <cstdint>

namespace clickseg::kernels {

// C[M,N] (+)= A[M,K] * B[K,N]; all row-major with explicit leading dims.
template <typename T>
void gemm(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, std::int64_t lda, const T* b,
          std::int64_t ldb, T* c, std::int64_t ldc, bool accumulate);

// out[N,M] = in[M,N]ᵀ
template <typename T>
void transpose(std::int64_t m, std::int64_t n, const T* in, T* out);

}  // namespace clickseg::kernels
