// SPDX-License-Identifier: Apache-2.0
//
// Float inner-loop kernels with a scalar reference implementation and an AVX2
// variant selected at runtime. The scalar table defines the semantics; the
// AVX2 table must agree elementwise exactly for non-reduction ops and within
// a small relative tolerance for reductions/GEMM (different summation order,
// explicit fma).
#pragma once

#include <cstddef>
#include <cstdint>
#include <type_traits>

namespace cma::kern {

enum class Backend { Auto, Scalar, Avx2 };

// Division guards denominators at +/-1e-8 (sign preserved, sign(0) == +1) so
// forward passes stay finite.
inline constexpr float kDivEps = 1e-8f;

struct Table {
  const char* name;
  void (*add)(const float* a, const float* b, float* out, size_t n);
  void (*sub)(const float* a, const float* b, float* out, size_t n);
  void (*mul)(const float* a, const float* b, float* out, size_t n);
  void (*div)(const float* a, const float* b, float* out, size_t n);
  // y += alpha * x
  void (*axpy)(float alpha, const float* x, float* y, size_t n);
  void (*scale)(float alpha, float* x, size_t n);
  void (*relu)(const float* x, float* out, size_t n);
  // gx += g where x > 0
  void (*relu_bwd)(const float* x, const float* g, float* gx, size_t n);
  float (*dot)(const float* a, const float* b, size_t n);
  float (*sum)(const float* x, size_t n);
  bool (*has_nonfinite)(const float* x, size_t n);
  // C[m x n] (+)= A[m x k] * B[k x n], all row-major
  void (*gemm)(const float* A, const float* B, float* C, int m, int k, int n,
               bool accumulate);
  // C[m x n] (+)= A[m x k] * B[n x k]^T
  void (*gemm_nt)(const float* A, const float* B, float* C, int m, int k,
                  int n, bool accumulate);
  // C[m x n] (+)= A[k x m]^T * B[k x n]
  void (*gemm_tn)(const float* A, const float* B, float* C, int m, int k,
                  int n, bool accumulate);
  // AdamW step with decoupled weight decay; inv_bc* are 1/(1-beta^t).
  void (*adamw)(float* p, float* m, float* v, const float* g, size_t n,
                float lr, float beta1, float beta2, float eps, float wd,
                float inv_bc1, float inv_bc2);
};

const Table& scalar_table();
bool avx2_compiled();
bool avx2_supported();          // compiled in and reported by the CPU
const Table& avx2_table();      // valid only if avx2_compiled()

// Select the backend. Auto consults CMA_KERNELS (auto|scalar|avx2) and the
// CPU. Selection is process-wide and must happen before worker threads spawn.
void set_backend(Backend b);
const Table& table();
const char* backend_name();

// Deterministic threading for large GEMMs: rows are statically partitioned,
// every output element keeps a single-owner accumulation order, so results
// are bit-identical at any thread count. Thread count from CMA_THREADS
// (default: min(2, hardware)).
int thread_count();

// Worker threads of an outer parallel section set this so nested gemm calls
// stay serial instead of oversubscribing.
void set_serial_gemm(bool serial);
bool serial_gemm();
void gemm(const float* A, const float* B, float* C, int m, int k, int n,
          bool accumulate);
void gemm_nt(const float* A, const float* B, float* C, int m, int k, int n,
             bool accumulate);
void gemm_tn(const float* A, const float* B, float* C, int m, int k, int n,
             bool accumulate);

// Reference loops for the 64-bit shadow mode (and any non-float type).
namespace ref {

template <class T>
void gemm(const T* A, const T* B, T* C, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    T* crow = C + size_t(i) * n;
    if (!acc)
      for (int j = 0; j < n; ++j) crow[j] = T(0);
    for (int kk = 0; kk < k; ++kk) {
      T a = A[size_t(i) * k + kk];
      const T* brow = B + size_t(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

template <class T>
void gemm_nt(const T* A, const T* B, T* C, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      T s = 0;
      const T* arow = A + size_t(i) * k;
      const T* brow = B + size_t(j) * k;
      for (int kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
      if (acc)
        C[size_t(i) * n + j] += s;
      else
        C[size_t(i) * n + j] = s;
    }
}

template <class T>
void gemm_tn(const T* A, const T* B, T* C, int m, int k, int n, bool acc) {
  if (!acc)
    for (size_t i = 0; i < size_t(m) * n; ++i) C[i] = T(0);
  for (int kk = 0; kk < k; ++kk) {
    const T* brow = B + size_t(kk) * n;
    for (int i = 0; i < m; ++i) {
      T a = A[size_t(kk) * m + i];
      T* crow = C + size_t(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

}  // namespace ref

// Type-dispatched entry points used by the tensor ops: float goes through the
// runtime-selected table, every other type through the reference loops.
template <class T>
inline void gemm_t(const T* A, const T* B, T* C, int m, int k, int n,
                   bool acc) {
  if constexpr (std::is_same_v<T, float>)
    gemm(A, B, C, m, k, n, acc);
  else
    ref::gemm(A, B, C, m, k, n, acc);
}

template <class T>
inline void gemm_nt_t(const T* A, const T* B, T* C, int m, int k, int n,
                      bool acc) {
  if constexpr (std::is_same_v<T, float>)
    gemm_nt(A, B, C, m, k, n, acc);
  else
    ref::gemm_nt(A, B, C, m, k, n, acc);
}

template <class T>
inline void gemm_tn_t(const T* A, const T* B, T* C, int m, int k, int n,
                      bool acc) {
  if constexpr (std::is_same_v<T, float>)
    gemm_tn(A, B, C, m, k, n, acc);
  else
    ref::gemm_tn(A, B, C, m, k, n, acc);
}

}  // namespace cma::kern
