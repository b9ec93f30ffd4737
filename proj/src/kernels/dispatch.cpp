// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <thread>
#include <vector>

#include "cma/kernels.hpp"

namespace cma::kern {
namespace {

const Table* g_table = nullptr;

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Table* pick(Backend b) {
  switch (b) {
    case Backend::Scalar:
      return &scalar_table();
    case Backend::Avx2:
      return &avx2_table();
    case Backend::Auto:
    default: {
      if (const char* env = std::getenv("CMA_KERNELS")) {
        if (std::strcmp(env, "scalar") == 0) return &scalar_table();
        if (std::strcmp(env, "avx2") == 0) return &avx2_table();
      }
      return avx2_supported() ? &avx2_table() : &scalar_table();
    }
  }
}

int resolve_threads() {
  if (const char* env = std::getenv("CMA_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1 && v <= 64) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw >= 2 ? 2 : 1;
}

}  // namespace

bool avx2_supported() { return avx2_compiled() && cpu_has_avx2(); }

void set_backend(Backend b) { g_table = pick(b); }

const Table& table() {
  if (!g_table) g_table = pick(Backend::Auto);
  return *g_table;
}

const char* backend_name() { return table().name; }

int thread_count() {
  static int n = resolve_threads();
  return n;
}

namespace {
thread_local bool tl_serial_gemm = false;
}  // namespace

void set_serial_gemm(bool serial) { tl_serial_gemm = serial; }
bool serial_gemm() { return tl_serial_gemm; }

namespace {

// Static row partition; each thread owns a disjoint slab of C, so the result
// does not depend on the thread count.
template <class F>
void rows_parallel(int m, int64_t work, F&& run_rows) {
  int nt = tl_serial_gemm ? 1 : thread_count();
  if (nt <= 1 || work < (1 << 20) || m < 2 * nt) {
    run_rows(0, m);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(nt - 1);
  int chunk = (m + nt - 1) / nt;
  for (int t = 1; t < nt; ++t) {
    int r0 = t * chunk, r1 = std::min(m, r0 + chunk);
    if (r0 < r1) pool.emplace_back([&, r0, r1] { run_rows(r0, r1); });
  }
  run_rows(0, std::min(m, chunk));
  for (auto& th : pool) th.join();
}

}  // namespace

void gemm(const float* A, const float* B, float* C, int m, int k, int n,
          bool acc) {
  rows_parallel(m, int64_t(m) * k * n, [&](int r0, int r1) {
    table().gemm(A + size_t(r0) * k, B, C + size_t(r0) * n, r1 - r0, k, n,
                 acc);
  });
}

void gemm_nt(const float* A, const float* B, float* C, int m, int k, int n,
             bool acc) {
  rows_parallel(m, int64_t(m) * k * n, [&](int r0, int r1) {
    table().gemm_nt(A + size_t(r0) * k, B, C + size_t(r0) * n, r1 - r0, k, n,
                    acc);
  });
}

void gemm_tn(const float* A, const float* B, float* C, int m, int k, int n,
             bool acc) {
  // not row-partitionable without a leading-dimension argument (columns of A
  // are strided); hot paths materialize the transpose and call gemm instead
  table().gemm_tn(A, B, C, m, k, n, acc);
}

}  // namespace cma::kern
