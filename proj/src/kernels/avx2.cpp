// SPDX-License-Identifier: Apache-2.0
//
// AVX2+FMA kernels. Elementwise ops are lane-exact against the scalar table
// (same IEEE operation per element). Reductions and GEMM use fixed
// deterministic accumulation orders that differ from the scalar reference, so
// they are equivalence-tested within tolerance, not bitwise.

#include "cma/kernels.hpp"

#ifdef CMA_BUILD_AVX2

#include <immintrin.h>

#include <cmath>

namespace cma::kern {
namespace {

void v_add(const float* a, const float* b, float* o, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(o + i, _mm256_add_ps(_mm256_loadu_ps(a + i),
                                          _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) o[i] = a[i] + b[i];
}
void v_sub(const float* a, const float* b, float* o, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(o + i, _mm256_sub_ps(_mm256_loadu_ps(a + i),
                                          _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) o[i] = a[i] - b[i];
}
void v_mul(const float* a, const float* b, float* o, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(o + i, _mm256_mul_ps(_mm256_loadu_ps(a + i),
                                          _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) o[i] = a[i] * b[i];
}
void v_div(const float* a, const float* b, float* o, size_t n) {
  const __m256 eps = _mm256_set1_ps(kDivEps);
  const __m256 signmask = _mm256_set1_ps(-0.0f);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 bv = _mm256_loadu_ps(b + i);
    __m256 mag = _mm256_andnot_ps(signmask, bv);
    __m256 sgn = _mm256_and_ps(signmask, bv);
    __m256 small = _mm256_cmp_ps(mag, eps, _CMP_LT_OQ);
    __m256 clamped = _mm256_or_ps(eps, sgn);
    bv = _mm256_blendv_ps(bv, clamped, small);
    _mm256_storeu_ps(o + i, _mm256_div_ps(_mm256_loadu_ps(a + i), bv));
  }
  for (; i < n; ++i) {
    float d = b[i];
    if (std::fabs(d) < kDivEps) d = std::copysign(kDivEps, d);
    o[i] = a[i] / d;
  }
}
void v_axpy(float alpha, const float* x, float* y, size_t n) {
  // mul+add (not fma) so the tail and vector lanes round identically to the
  // scalar reference
  const __m256 av = _mm256_set1_ps(alpha);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 prod = _mm256_mul_ps(av, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}
void v_scale(float alpha, float* x, size_t n) {
  const __m256 av = _mm256_set1_ps(alpha);
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(x + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) x[i] *= alpha;
}
void v_relu(const float* x, float* o, size_t n) {
  const __m256 z = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(o + i, _mm256_max_ps(_mm256_loadu_ps(x + i), z));
  for (; i < n; ++i) o[i] = x[i] > 0.0f ? x[i] : 0.0f;
}
void v_relu_bwd(const float* x, const float* g, float* gx, size_t n) {
  const __m256 z = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 xv = _mm256_loadu_ps(x + i);
    __m256 mask = _mm256_cmp_ps(xv, z, _CMP_GT_OQ);
    __m256 gv = _mm256_and_ps(_mm256_loadu_ps(g + i), mask);
    _mm256_storeu_ps(gx + i, _mm256_add_ps(_mm256_loadu_ps(gx + i), gv));
  }
  for (; i < n; ++i)
    if (x[i] > 0.0f) gx[i] += g[i];
}

float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_hadd_ps(lo, lo);
  lo = _mm_hadd_ps(lo, lo);
  return _mm_cvtss_f32(lo);
}

float v_dot(const float* a, const float* b, size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i),
                           acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8),
                           _mm256_loadu_ps(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i),
                           acc0);
  float s = hsum(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}
float v_sum(const float* x, size_t n) {
  __m256 acc = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float s = hsum(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}
bool v_has_nonfinite(const float* x, size_t n) {
  // finite iff |x| < inf; NaN compares false, so finite lanes set the mask
  const __m256 inf = _mm256_set1_ps(__builtin_inff());
  const __m256 signmask = _mm256_set1_ps(-0.0f);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 mag = _mm256_andnot_ps(signmask, _mm256_loadu_ps(x + i));
    __m256 finite = _mm256_cmp_ps(mag, inf, _CMP_LT_OQ);
    if (_mm256_movemask_ps(finite) != 0xff) return true;
  }
  for (; i < n; ++i)
    if (!std::isfinite(x[i])) return true;
  return false;
}

// 4x16 register-blocked microkernel: per k step, 2 B loads, 4 broadcasts,
// 8 fmas. k is the innermost loop so every C element accumulates in k order.
void v_gemm(const float* A, const float* B, float* C, int m, int k, int n,
            bool acc) {
  int j = 0;
  for (; j + 16 <= n; j += 16) {
    int i = 0;
    for (; i + 4 <= m; i += 4) {
      __m256 c00, c01, c10, c11, c20, c21, c30, c31;
      if (acc) {
        c00 = _mm256_loadu_ps(C + size_t(i) * n + j);
        c01 = _mm256_loadu_ps(C + size_t(i) * n + j + 8);
        c10 = _mm256_loadu_ps(C + size_t(i + 1) * n + j);
        c11 = _mm256_loadu_ps(C + size_t(i + 1) * n + j + 8);
        c20 = _mm256_loadu_ps(C + size_t(i + 2) * n + j);
        c21 = _mm256_loadu_ps(C + size_t(i + 2) * n + j + 8);
        c30 = _mm256_loadu_ps(C + size_t(i + 3) * n + j);
        c31 = _mm256_loadu_ps(C + size_t(i + 3) * n + j + 8);
      } else {
        c00 = c01 = c10 = c11 = c20 = c21 = c30 = c31 = _mm256_setzero_ps();
      }
      const float* a0 = A + size_t(i) * k;
      const float* a1 = A + size_t(i + 1) * k;
      const float* a2 = A + size_t(i + 2) * k;
      const float* a3 = A + size_t(i + 3) * k;
      for (int kk = 0; kk < k; ++kk) {
        const float* brow = B + size_t(kk) * n + j;
        __m256 b0 = _mm256_loadu_ps(brow);
        __m256 b1 = _mm256_loadu_ps(brow + 8);
        __m256 av;
        av = _mm256_set1_ps(a0[kk]);
        c00 = _mm256_fmadd_ps(av, b0, c00);
        c01 = _mm256_fmadd_ps(av, b1, c01);
        av = _mm256_set1_ps(a1[kk]);
        c10 = _mm256_fmadd_ps(av, b0, c10);
        c11 = _mm256_fmadd_ps(av, b1, c11);
        av = _mm256_set1_ps(a2[kk]);
        c20 = _mm256_fmadd_ps(av, b0, c20);
        c21 = _mm256_fmadd_ps(av, b1, c21);
        av = _mm256_set1_ps(a3[kk]);
        c30 = _mm256_fmadd_ps(av, b0, c30);
        c31 = _mm256_fmadd_ps(av, b1, c31);
      }
      _mm256_storeu_ps(C + size_t(i) * n + j, c00);
      _mm256_storeu_ps(C + size_t(i) * n + j + 8, c01);
      _mm256_storeu_ps(C + size_t(i + 1) * n + j, c10);
      _mm256_storeu_ps(C + size_t(i + 1) * n + j + 8, c11);
      _mm256_storeu_ps(C + size_t(i + 2) * n + j, c20);
      _mm256_storeu_ps(C + size_t(i + 2) * n + j + 8, c21);
      _mm256_storeu_ps(C + size_t(i + 3) * n + j, c30);
      _mm256_storeu_ps(C + size_t(i + 3) * n + j + 8, c31);
    }
    for (; i < m; ++i) {
      __m256 c0, c1;
      if (acc) {
        c0 = _mm256_loadu_ps(C + size_t(i) * n + j);
        c1 = _mm256_loadu_ps(C + size_t(i) * n + j + 8);
      } else {
        c0 = c1 = _mm256_setzero_ps();
      }
      const float* arow = A + size_t(i) * k;
      for (int kk = 0; kk < k; ++kk) {
        const float* brow = B + size_t(kk) * n + j;
        __m256 av = _mm256_set1_ps(arow[kk]);
        c0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow), c0);
        c1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 8), c1);
      }
      _mm256_storeu_ps(C + size_t(i) * n + j, c0);
      _mm256_storeu_ps(C + size_t(i) * n + j + 8, c1);
    }
  }
  if (j < n) {
    // narrow column tail, scalar k-order identical to the wide panels
    for (int i = 0; i < m; ++i) {
      const float* arow = A + size_t(i) * k;
      for (int jj = j; jj < n; ++jj) {
        float s = acc ? C[size_t(i) * n + jj] : 0.0f;
        for (int kk = 0; kk < k; ++kk)
          s = std::fma(arow[kk], B[size_t(kk) * n + jj], s);
        C[size_t(i) * n + jj] = s;
      }
    }
  }
}

// rows-of-A dot rows-of-B; 2x4 register tile, 8-wide k
void v_gemm_nt(const float* A, const float* B, float* C, int m, int k, int n,
               bool acc) {
  int i = 0;
  for (; i + 2 <= m; i += 2) {
    const float* a0 = A + size_t(i) * k;
    const float* a1 = A + size_t(i + 1) * k;
    int j = 0;
    for (; j + 4 <= n; j += 4) {
      __m256 s00 = _mm256_setzero_ps(), s01 = _mm256_setzero_ps(),
             s02 = _mm256_setzero_ps(), s03 = _mm256_setzero_ps();
      __m256 s10 = _mm256_setzero_ps(), s11 = _mm256_setzero_ps(),
             s12 = _mm256_setzero_ps(), s13 = _mm256_setzero_ps();
      const float* b0 = B + size_t(j) * k;
      const float* b1 = B + size_t(j + 1) * k;
      const float* b2 = B + size_t(j + 2) * k;
      const float* b3 = B + size_t(j + 3) * k;
      int kk = 0;
      for (; kk + 8 <= k; kk += 8) {
        __m256 av0 = _mm256_loadu_ps(a0 + kk);
        __m256 av1 = _mm256_loadu_ps(a1 + kk);
        __m256 bv = _mm256_loadu_ps(b0 + kk);
        s00 = _mm256_fmadd_ps(av0, bv, s00);
        s10 = _mm256_fmadd_ps(av1, bv, s10);
        bv = _mm256_loadu_ps(b1 + kk);
        s01 = _mm256_fmadd_ps(av0, bv, s01);
        s11 = _mm256_fmadd_ps(av1, bv, s11);
        bv = _mm256_loadu_ps(b2 + kk);
        s02 = _mm256_fmadd_ps(av0, bv, s02);
        s12 = _mm256_fmadd_ps(av1, bv, s12);
        bv = _mm256_loadu_ps(b3 + kk);
        s03 = _mm256_fmadd_ps(av0, bv, s03);
        s13 = _mm256_fmadd_ps(av1, bv, s13);
      }
      float r00 = hsum(s00), r01 = hsum(s01), r02 = hsum(s02), r03 = hsum(s03);
      float r10 = hsum(s10), r11 = hsum(s11), r12 = hsum(s12), r13 = hsum(s13);
      for (; kk < k; ++kk) {
        float av0 = a0[kk], av1 = a1[kk];
        r00 += av0 * b0[kk];
        r01 += av0 * b1[kk];
        r02 += av0 * b2[kk];
        r03 += av0 * b3[kk];
        r10 += av1 * b0[kk];
        r11 += av1 * b1[kk];
        r12 += av1 * b2[kk];
        r13 += av1 * b3[kk];
      }
      float* c0 = C + size_t(i) * n + j;
      float* c1 = C + size_t(i + 1) * n + j;
      if (acc) {
        c0[0] += r00; c0[1] += r01; c0[2] += r02; c0[3] += r03;
        c1[0] += r10; c1[1] += r11; c1[2] += r12; c1[3] += r13;
      } else {
        c0[0] = r00; c0[1] = r01; c0[2] = r02; c0[3] = r03;
        c1[0] = r10; c1[1] = r11; c1[2] = r12; c1[3] = r13;
      }
    }
    for (; j < n; ++j) {
      float r0v = v_dot(a0, B + size_t(j) * k, k);
      float r1v = v_dot(a1, B + size_t(j) * k, k);
      if (acc) {
        C[size_t(i) * n + j] += r0v;
        C[size_t(i + 1) * n + j] += r1v;
      } else {
        C[size_t(i) * n + j] = r0v;
        C[size_t(i + 1) * n + j] = r1v;
      }
    }
  }
  for (; i < m; ++i) {
    const float* arow = A + size_t(i) * k;
    for (int j = 0; j < n; ++j) {
      float r = v_dot(arow, B + size_t(j) * k, k);
      if (acc)
        C[size_t(i) * n + j] += r;
      else
        C[size_t(i) * n + j] = r;
    }
  }
}

void v_gemm_tn(const float* A, const float* B, float* C, int m, int k, int n,
               bool acc) {
  // A is k x m, read column i as strided broadcasts
  for (int i = 0; i < m; ++i) {
    int j = 0;
    for (; j + 32 <= n; j += 32) {
      __m256 c0, c1, c2, c3;
      float* crow = C + size_t(i) * n + j;
      if (acc) {
        c0 = _mm256_loadu_ps(crow);
        c1 = _mm256_loadu_ps(crow + 8);
        c2 = _mm256_loadu_ps(crow + 16);
        c3 = _mm256_loadu_ps(crow + 24);
      } else {
        c0 = c1 = c2 = c3 = _mm256_setzero_ps();
      }
      for (int kk = 0; kk < k; ++kk) {
        __m256 av = _mm256_set1_ps(A[size_t(kk) * m + i]);
        const float* brow = B + size_t(kk) * n + j;
        c0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow), c0);
        c1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 8), c1);
        c2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 16), c2);
        c3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 24), c3);
      }
      _mm256_storeu_ps(crow, c0);
      _mm256_storeu_ps(crow + 8, c1);
      _mm256_storeu_ps(crow + 16, c2);
      _mm256_storeu_ps(crow + 24, c3);
    }
    for (; j < n; ++j) {
      float s = acc ? C[size_t(i) * n + j] : 0.0f;
      for (int kk = 0; kk < k; ++kk)
        s = std::fma(A[size_t(kk) * m + i], B[size_t(kk) * n + j], s);
      C[size_t(i) * n + j] = s;
    }
  }
}

void v_adamw(float* p, float* m, float* v, const float* g, size_t n, float lr,
             float beta1, float beta2, float eps, float wd, float inv_bc1,
             float inv_bc2) {
  const __m256 b1 = _mm256_set1_ps(beta1), ob1 = _mm256_set1_ps(1.0f - beta1);
  const __m256 b2 = _mm256_set1_ps(beta2), ob2 = _mm256_set1_ps(1.0f - beta2);
  const __m256 vlr = _mm256_set1_ps(lr), veps = _mm256_set1_ps(eps);
  const __m256 vwd = _mm256_set1_ps(wd);
  const __m256 ibc1 = _mm256_set1_ps(inv_bc1), ibc2 = _mm256_set1_ps(inv_bc2);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 gv = _mm256_loadu_ps(g + i);
    __m256 mv = _mm256_add_ps(_mm256_mul_ps(b1, _mm256_loadu_ps(m + i)),
                              _mm256_mul_ps(ob1, gv));
    __m256 vv = _mm256_add_ps(_mm256_mul_ps(b2, _mm256_loadu_ps(v + i)),
                              _mm256_mul_ps(ob2, _mm256_mul_ps(gv, gv)));
    _mm256_storeu_ps(m + i, mv);
    _mm256_storeu_ps(v + i, vv);
    __m256 mhat = _mm256_mul_ps(mv, ibc1);
    __m256 vhat = _mm256_mul_ps(vv, ibc2);
    __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(vhat), veps);
    __m256 pv = _mm256_loadu_ps(p + i);
    __m256 upd = _mm256_add_ps(_mm256_div_ps(mhat, denom),
                               _mm256_mul_ps(vwd, pv));
    _mm256_storeu_ps(p + i, _mm256_sub_ps(pv, _mm256_mul_ps(vlr, upd)));
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0f - beta2) * (g[i] * g[i]);
    float mhat = m[i] * inv_bc1;
    float vhat = v[i] * inv_bc2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
  }
}

const Table kAvx2 = {
    "avx2",  v_add,  v_sub,      v_mul,  v_div,  v_axpy,
    v_scale, v_relu, v_relu_bwd, v_dot,  v_sum,  v_has_nonfinite,
    v_gemm,  v_gemm_nt, v_gemm_tn, v_adamw,
};

}  // namespace

bool avx2_compiled() { return true; }
const Table& avx2_table() { return kAvx2; }

}  // namespace cma::kern

#else  // !CMA_BUILD_AVX2

namespace cma::kern {
bool avx2_compiled() { return false; }
const Table& avx2_table() { return scalar_table(); }
}  // namespace cma::kern

#endif
