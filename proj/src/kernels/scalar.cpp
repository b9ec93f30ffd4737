// SPDX-License-Identifier: Apache-2.0
//
// Reference kernels. Plain loops, no fma (build keeps -ffp-contract=off), so
// these define the exact semantics the AVX2 variants are tested against.

#include <cmath>

#include "cma/kernels.hpp"

namespace cma::kern {
namespace {

void s_add(const float* a, const float* b, float* o, size_t n) {
  for (size_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
}
void s_sub(const float* a, const float* b, float* o, size_t n) {
  for (size_t i = 0; i < n; ++i) o[i] = a[i] - b[i];
}
void s_mul(const float* a, const float* b, float* o, size_t n) {
  for (size_t i = 0; i < n; ++i) o[i] = a[i] * b[i];
}
void s_div(const float* a, const float* b, float* o, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    float d = b[i];
    if (std::fabs(d) < kDivEps) d = std::copysign(kDivEps, d);
    o[i] = a[i] / d;
  }
}
void s_axpy(float alpha, const float* x, float* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}
void s_scale(float alpha, float* x, size_t n) {
  for (size_t i = 0; i < n; ++i) x[i] *= alpha;
}
void s_relu(const float* x, float* o, size_t n) {
  for (size_t i = 0; i < n; ++i) o[i] = x[i] > 0.0f ? x[i] : 0.0f;
}
void s_relu_bwd(const float* x, const float* g, float* gx, size_t n) {
  for (size_t i = 0; i < n; ++i)
    if (x[i] > 0.0f) gx[i] += g[i];
}
float s_dot(const float* a, const float* b, size_t n) {
  float s = 0.0f;
  for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}
float s_sum(const float* x, size_t n) {
  float s = 0.0f;
  for (size_t i = 0; i < n; ++i) s += x[i];
  return s;
}
bool s_has_nonfinite(const float* x, size_t n) {
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i])) return true;
  return false;
}

void s_gemm(const float* A, const float* B, float* C, int m, int k, int n,
            bool acc) {
  ref::gemm<float>(A, B, C, m, k, n, acc);
}
void s_gemm_nt(const float* A, const float* B, float* C, int m, int k, int n,
               bool acc) {
  ref::gemm_nt<float>(A, B, C, m, k, n, acc);
}
void s_gemm_tn(const float* A, const float* B, float* C, int m, int k, int n,
               bool acc) {
  ref::gemm_tn<float>(A, B, C, m, k, n, acc);
}

void s_adamw(float* p, float* m, float* v, const float* g, size_t n, float lr,
             float beta1, float beta2, float eps, float wd, float inv_bc1,
             float inv_bc2) {
  for (size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0f - beta2) * (g[i] * g[i]);
    float mhat = m[i] * inv_bc1;
    float vhat = v[i] * inv_bc2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
  }
}

const Table kScalar = {
    "scalar", s_add,  s_sub,     s_mul,     s_div,     s_axpy,
    s_scale,  s_relu, s_relu_bwd, s_dot,    s_sum,     s_has_nonfinite,
    s_gemm,   s_gemm_nt, s_gemm_tn, s_adamw,
};

}  // namespace

const Table& scalar_table() { return kScalar; }

}  // namespace cma::kern
