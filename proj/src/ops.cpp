// SPDX-License-Identifier: Apache-2.0

#include "cma/ops.hpp"

#include <cmath>
#include <cstring>
#include <thread>

#include "cma/kernels.hpp"

namespace cma {
namespace {

template <class T>
bool want_grad(std::initializer_list<const Tensor<T>*> ins) {
  if (!Tape<T>::get().recording()) return false;
  for (auto* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

template <class T>
void finalize(Tensor<T>& out, bool rg, const char* opname) {
  out.set_requires_grad(rg);
  if (Tape<T>::get().check_finite) check_all_finite(out, opname);
}

// elementwise kernels for the generic scalar type
template <class T>
void ew_add(const T* a, const T* b, T* o, size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kern::table().add(a, b, o, n);
  } else {
    for (size_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
  }
}
template <class T>
void ew_axpy(T alpha, const T* x, T* y, size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kern::table().axpy(alpha, x, y, n);
  } else {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
  }
}
template <class T>
T clamp_div_denom(T d) {
  T eps = T(kern::kDivEps);
  if (std::fabs(d) < eps) d = std::copysign(eps, d);
  return d;
}

// ---- broadcasting machinery ----

Shape broadcast_shape(const Shape& a, const Shape& b, const char* opname) {
  size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int da = i < r - ra ? 1 : a[i - (r - ra)];
    int db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(opname) + ": cannot broadcast " +
                       shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides with 0 on broadcast dimensions, aligned to `out`.
std::vector<int64_t> bcast_strides(const Shape& in, const Shape& out) {
  size_t r = out.size(), ri = in.size();
  std::vector<int64_t> st(r, 0);
  int64_t acc = 1;
  for (size_t i = ri; i-- > 0;) {
    size_t oi = i + (r - ri);
    st[oi] = (in[i] == 1 && out[oi] != 1) ? 0 : acc;
    acc *= in[i];
  }
  return st;
}

// Visit every output index of `out_shape`, calling f(out_idx, a_idx, b_idx).
template <class F>
void bcast_iterate(const Shape& out_shape, const std::vector<int64_t>& sa,
                   const std::vector<int64_t>& sb, F&& f) {
  size_t r = out_shape.size();
  int64_t n = numel_of(out_shape);
  std::vector<int> idx(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out_shape[d]) break;
      ia -= int64_t(idx[d]) * sa[d];
      ib -= int64_t(idx[d]) * sb[d];
      idx[d] = 0;
      if (d == 0) return;
    }
  }
}

// Accumulate `g` (shaped like out) into the grad buffer of `in` (shape may be
// broadcast); reduction over broadcast axes.
template <class T>
void reduce_into_grad(const T* g, const Shape& out_shape,
                      const Tensor<T>& in_handle) {
  Tensor<T> in = in_handle;
  T* gi = in.grad();
  if (in.shape() == out_shape) {
    ew_axpy<T>(T(1), g, gi, size_t(numel_of(out_shape)));
    return;
  }
  auto si = bcast_strides(in.shape(), out_shape);
  std::vector<int64_t> zero(out_shape.size(), 0);
  bcast_iterate(out_shape, si, zero,
                [&](int64_t o, int64_t ii, int64_t) { gi[ii] += g[o]; });
}

template <class T, class FwdF, class DaF, class DbF>
Tensor<T> binary_ew(const Tensor<T>& a, const Tensor<T>& b, const char* name,
                    FwdF fwd_one, DaF da_of, DbF db_of, bool same_fast,
                    void (*fast)(const float*, const float*, float*, size_t)) {
  Shape os = broadcast_shape(a.shape(), b.shape(), name);
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  bool b_is_suffix = a.shape() == os && b.numel() < a.numel() &&
                     a.numel() % b.numel() == 0 &&
                     std::equal(b.shape().begin(), b.shape().end(),
                                a.shape().end() - b.rank());
  if (a.shape() == b.shape()) {
    size_t n = size_t(out.numel());
    if constexpr (std::is_same_v<T, float>) {
      if (same_fast) {
        fast(pa, pb, po, n);
      } else {
        for (size_t i = 0; i < n; ++i) po[i] = fwd_one(pa[i], pb[i]);
      }
    } else {
      for (size_t i = 0; i < n; ++i) po[i] = fwd_one(pa[i], pb[i]);
    }
  } else if (b_is_suffix) {
    // bias-style broadcast: b repeats along the leading extents of a
    int64_t rows = a.numel() / b.numel();
    int64_t cols = b.numel();
    for (int64_t r = 0; r < rows; ++r) {
      const T* ar = pa + r * cols;
      T* orow = po + r * cols;
      if constexpr (std::is_same_v<T, float>) {
        if (same_fast) {
          fast(ar, pb, orow, size_t(cols));
          continue;
        }
      }
      for (int64_t j = 0; j < cols; ++j) orow[j] = fwd_one(ar[j], pb[j]);
    }
  } else {
    auto sa = bcast_strides(a.shape(), os);
    auto sb = bcast_strides(b.shape(), os);
    bcast_iterate(os, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
      po[o] = fwd_one(pa[ia], pb[ib]);
    });
  }
  bool rg = want_grad<T>({&a, &b});
  finalize(out, rg, name);
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), ah(a.impl()), bh(b.impl());
      const T* g = oh.grad_vec().data();
      const Shape& osr = oh.shape();
      bool suffix = ah.shape() == osr && bh.numel() < ah.numel() &&
                    ah.numel() % bh.numel() == 0 &&
                    std::equal(bh.shape().begin(), bh.shape().end(),
                               ah.shape().end() - bh.rank());
      if (ah.requires_grad()) {
        if (ah.shape() == osr && bh.shape() == osr) {
          T* ga = ah.grad();
          const T* pa2 = ah.data();
          const T* pb2 = bh.data();
          size_t n = size_t(oh.numel());
          for (size_t i = 0; i < n; ++i) ga[i] += g[i] * da_of(pa2[i], pb2[i]);
        } else if (suffix) {
          T* ga = ah.grad();
          const T* pa2 = ah.data();
          const T* pb2 = bh.data();
          int64_t cols = bh.numel();
          int64_t rows = ah.numel() / cols;
          for (int64_t r = 0; r < rows; ++r) {
            const T* grow = g + r * cols;
            const T* ar = pa2 + r * cols;
            T* gr = ga + r * cols;
            for (int64_t j = 0; j < cols; ++j)
              gr[j] += grow[j] * da_of(ar[j], pb2[j]);
          }
        } else {
          T* ga = ah.grad();
          auto sa2 = bcast_strides(ah.shape(), osr);
          auto sb2 = bcast_strides(bh.shape(), osr);
          const T* pa2 = ah.data();
          const T* pb2 = bh.data();
          bcast_iterate(osr, sa2, sb2, [&](int64_t o, int64_t ia, int64_t ib) {
            ga[ia] += g[o] * da_of(pa2[ia], pb2[ib]);
          });
        }
      }
      if (bh.requires_grad()) {
        T* gb = bh.grad();
        const T* pa2 = ah.data();
        const T* pb2 = bh.data();
        if (suffix) {
          int64_t cols = bh.numel();
          int64_t rows = ah.numel() / cols;
          for (int64_t r = 0; r < rows; ++r) {
            const T* grow = g + r * cols;
            const T* ar = pa2 + r * cols;
            for (int64_t j = 0; j < cols; ++j)
              gb[j] += grow[j] * db_of(ar[j], pb2[j]);
          }
        } else {
          auto sa2 = bcast_strides(ah.shape(), osr);
          auto sb2 = bcast_strides(bh.shape(), osr);
          bcast_iterate(osr, sa2, sb2, [&](int64_t o, int64_t ia, int64_t ib) {
            gb[ib] += g[o] * db_of(pa2[ia], pb2[ib]);
          });
        }
      }
    });
  }
  return out;
}

}  // namespace

template <class T>
void check_all_finite(const Tensor<T>& t, const char* what) {
  bool bad;
  if constexpr (std::is_same_v<T, float>) {
    bad = kern::table().has_nonfinite(t.data(), size_t(t.numel()));
  } else {
    bad = false;
    const T* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
      if (!std::isfinite(p[i])) {
        bad = true;
        break;
      }
  }
  if (bad)
    throw NumericError(std::string(what) + " produced non-finite values");
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew<T>(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T, T) { return T(1); }, [](T, T) { return T(1); }, true,
      kern::table().add);
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew<T>(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T, T) { return T(1); }, [](T, T) { return T(-1); }, true,
      kern::table().sub);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew<T>(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](T, T y) { return y; }, [](T x, T) { return x; }, true,
      kern::table().mul);
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew<T>(
      a, b, "div", [](T x, T y) { return x / clamp_div_denom(y); },
      [](T, T y) { return T(1) / clamp_div_denom(y); },
      [](T x, T y) {
        T d = clamp_div_denom(y);
        return -x / (d * d);
      },
      true, kern::table().div);
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return mul_scalar(x, T(-1));
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] + c;
  bool rg = want_grad<T>({&x});
  finalize(out, rg, "add_scalar");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      ew_axpy<T>(T(1), oh.grad_vec().data(), xh.grad(), size_t(xh.numel()));
    });
  }
  return out;
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] * c;
  bool rg = want_grad<T>({&x});
  finalize(out, rg, "mul_scalar");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      ew_axpy<T>(c, oh.grad_vec().data(), xh.grad(), size_t(xh.numel()));
    });
  }
  return out;
}

// ---- matmul ----

namespace {

// out[k x n] += a^T * g  where a is (m,k), g is (m,n). Materializes the
// transpose for large problems so the threaded nn kernel can run.
template <class T>
void acc_at_b(const T* a, const T* g, T* out, int m, int k, int n) {
  if constexpr (std::is_same_v<T, float>) {
    if (int64_t(m) * k * n >= (1 << 20)) {
      std::vector<float> at(size_t(k) * m);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) at[size_t(j) * m + i] = a[size_t(i) * k + j];
      kern::gemm(at.data(), g, out, k, m, n, true);
      return;
    }
  }
  kern::gemm_tn_t<T>(a, g, out, k, m, n, true);
}

}  // namespace

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3))
    throw ShapeError("matmul: expected matching 2-D or 3-D operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  int batch = a.rank() == 3 ? a.dim(0) : 1;
  int m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  int k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != k2 || (b.rank() == 3 && b.dim(0) != batch))
    throw ShapeError("matmul: dimension mismatch " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  Shape os = a.rank() == 3 ? Shape{batch, m, n} : Shape{m, n};
  Tensor<T> out = Tensor<T>::zeros(os);
  for (int bi = 0; bi < batch; ++bi)
    kern::gemm_t<T>(a.data() + int64_t(bi) * m * k,
                    b.data() + int64_t(bi) * k * n,
                    out.data() + int64_t(bi) * m * n, m, k, n, false);
  bool rg = want_grad<T>({&a, &b});
  finalize(out, rg, "matmul");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), ah(a.impl()), bh(b.impl());
      const T* g = oh.grad_vec().data();
      for (int bi = 0; bi < batch; ++bi) {
        const T* gb_ = g + int64_t(bi) * m * n;
        const T* pa = ah.data() + int64_t(bi) * m * k;
        const T* pb = bh.data() + int64_t(bi) * k * n;
        if (ah.requires_grad())
          kern::gemm_nt_t<T>(gb_, pb, ah.grad() + int64_t(bi) * m * k, m, n, k,
                             true);
        if (bh.requires_grad())
          acc_at_b<T>(pa, gb_, bh.grad() + int64_t(bi) * k * n, m, k, n);
      }
    });
  }
  return out;
}

// ---- conv2d ----

namespace {

template <class T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad,
            int Ho, int Wo, T* col) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + (size_t(c) * k * k + size_t(ky) * k + kx) *
                           (size_t(Ho) * Wo);
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride - pad + ky;
          T* drow = dst + size_t(oy) * Wo;
          if (iy < 0 || iy >= H) {
            for (int ox = 0; ox < Wo; ++ox) drow[ox] = T(0);
            continue;
          }
          const T* src = x + (size_t(c) * H + iy) * W;
          if (stride == 1) {
            // contiguous run: ix = ox - pad + kx for ox in [lo, hi)
            int lo = std::max(0, pad - kx);
            int hi = std::min(Wo, W + pad - kx);
            for (int ox = 0; ox < lo; ++ox) drow[ox] = T(0);
            if (hi > lo)
              std::memcpy(drow + lo, src + lo - pad + kx,
                          size_t(hi - lo) * sizeof(T));
            for (int ox = hi; ox < Wo; ++ox) drow[ox] = T(0);
          } else {
            for (int ox = 0; ox < Wo; ++ox) {
              int ix = ox * stride - pad + kx;
              drow[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im_acc(const T* col, int C, int H, int W, int k, int stride, int pad,
                int Ho, int Wo, T* dx) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + (size_t(c) * k * k + size_t(ky) * k + kx) *
                                 (size_t(Ho) * Wo);
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = dx + (size_t(c) * H + iy) * W;
          const T* srow = src + size_t(oy) * Wo;
          if (stride == 1) {
            int lo = std::max(0, pad - kx);
            int hi = std::min(Wo, W + pad - kx);
            ew_axpy<T>(T(1), srow + lo, dst + lo - pad + kx,
                       size_t(std::max(0, hi - lo)));
          } else {
            for (int ox = 0; ox < Wo; ++ox) {
              int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < W) dst[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int stride, int pad) {
  bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3)
    throw ShapeError("conv2d: input must be (C,H,W) or (B,C,H,W), got " +
                     shape_str(x.shape()));
  if (w.rank() != 4 || w.dim(2) != w.dim(3))
    throw ShapeError("conv2d: weight must be (Co,Ci,k,k), got " +
                     shape_str(w.shape()));
  int B = batched ? x.dim(0) : 1;
  int C = x.dim(batched ? 1 : 0), H = x.dim(batched ? 2 : 1),
      W = x.dim(batched ? 3 : 2);
  int Co = w.dim(0), Ci = w.dim(1), k = w.dim(2);
  if (Ci != C)
    throw ShapeError("conv2d: input channels " + std::to_string(C) +
                     " do not match weight " + shape_str(w.shape()));
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: bad stride/pad");
  int hnum = H + 2 * pad - k, wnum = W + 2 * pad - k;
  if (hnum < 0 || wnum < 0 || hnum % stride != 0 || wnum % stride != 0)
    throw ShapeError("conv2d: non-integral output extent for input " +
                     shape_str(x.shape()) + ", kernel " + std::to_string(k) +
                     ", stride " + std::to_string(stride) + ", pad " +
                     std::to_string(pad));
  int Ho = hnum / stride + 1, Wo = wnum / stride + 1;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Co))
    throw ShapeError("conv2d: bias must be (Co)");

  Shape os = batched ? Shape{B, Co, Ho, Wo} : Shape{Co, Ho, Wo};
  Tensor<T> out = Tensor<T>::zeros(os);
  int ckk = C * k * k;
  int64_t hw = int64_t(Ho) * Wo;
  auto fwd_range = [&](int b0, int b1) {
    std::vector<T> col(size_t(ckk) * hw);
    for (int b = b0; b < b1; ++b) {
      const T* xb = x.data() + int64_t(b) * C * H * W;
      T* ob = out.data() + int64_t(b) * Co * hw;
      im2col(xb, C, H, W, k, stride, pad, Ho, Wo, col.data());
      kern::gemm_t<T>(w.data(), col.data(), ob, Co, ckk, int(hw), false);
      if (bias.defined()) {
        const T* pb = bias.data();
        for (int co = 0; co < Co; ++co) {
          T bv = pb[co];
          T* row = ob + int64_t(co) * hw;
          for (int64_t i = 0; i < hw; ++i) row[i] += bv;
        }
      }
    }
  };
  // independent samples run on separate threads with serial inner gemm;
  // each sample's output has a single owner, so the split stays bit-exact
  int nt = kern::serial_gemm() ? 1 : std::min(kern::thread_count(), B);
  if (nt < 2 || int64_t(B) * Co * ckk * hw < (1 << 22)) {
    fwd_range(0, B);
  } else {
    int half = (B + 1) / 2;
    std::thread worker([&] {
      kern::set_serial_gemm(true);
      fwd_range(half, B);
    });
    kern::set_serial_gemm(true);
    fwd_range(0, half);
    kern::set_serial_gemm(false);
    worker.join();
  }
  bool rg = bias.defined() ? want_grad<T>({&x, &w, &bias})
                           : want_grad<T>({&x, &w});
  finalize(out, rg, "conv2d");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl()), wh(w.impl());
      Tensor<T> bh = bias;
      const T* g = oh.grad_vec().data();
      int ckk2 = C * k * k;
      int64_t hw2 = int64_t(Ho) * Wo;
      std::vector<T> wt;
      if (xh.requires_grad()) {
        // transpose of the (Co, ckk) weight matrix for the nn kernel
        wt.resize(size_t(ckk2) * Co);
        const T* pw = wh.data();
        for (int co = 0; co < Co; ++co)
          for (int q = 0; q < ckk2; ++q)
            wt[size_t(q) * Co + co] = pw[size_t(co) * ckk2 + q];
      }
      bool need_w = wh.requires_grad();
      bool need_x = xh.requires_grad();
      bool need_b = bh.defined() && bh.requires_grad();
      T* dx = need_x ? xh.grad() : nullptr;
      auto bwd_range = [&](int b0, int b1, T* dw_partial, T* db_partial) {
        std::vector<T> colw, dcolw;
        if (need_w) colw.resize(size_t(ckk2) * hw2);
        if (need_x) dcolw.resize(size_t(ckk2) * hw2);
        for (int b = b0; b < b1; ++b) {
          const T* gb_ = g + int64_t(b) * Co * hw2;
          if (need_w) {
            im2col(xh.data() + int64_t(b) * C * H * W, C, H, W, k, stride,
                   pad, Ho, Wo, colw.data());
            kern::gemm_nt_t<T>(gb_, colw.data(), dw_partial, Co, int(hw2),
                               ckk2, true);
          }
          if (need_x) {
            kern::gemm_t<T>(wt.data(), gb_, dcolw.data(), ckk2, Co, int(hw2),
                            false);
            col2im_acc(dcolw.data(), C, H, W, k, stride, pad, Ho, Wo,
                       dx + int64_t(b) * C * H * W);
          }
          if (need_b) {
            for (int co = 0; co < Co; ++co) {
              const T* row = gb_ + int64_t(co) * hw2;
              T s = T(0);
              for (int64_t i = 0; i < hw2; ++i) s += row[i];
              db_partial[co] += s;
            }
          }
        }
      };
      int nt = kern::serial_gemm() ? 1 : std::min(kern::thread_count(), B);
      if (nt < 2 || int64_t(B) * Co * ckk2 * hw2 < (1 << 22)) {
        bwd_range(0, B, need_w ? wh.grad() : nullptr,
                  need_b ? bh.grad() : nullptr);
      } else {
        // per-thread weight/bias partials keep the accumulation race-free;
        // the final merge order is fixed, so runs stay bit-identical
        int half = (B + 1) / 2;
        std::vector<T> dw0, dw1, db0, db1;
        if (need_w) {
          dw0.assign(size_t(Co) * ckk2, T(0));
          dw1.assign(size_t(Co) * ckk2, T(0));
        }
        if (need_b) {
          db0.assign(size_t(Co), T(0));
          db1.assign(size_t(Co), T(0));
        }
        std::thread worker([&] {
          kern::set_serial_gemm(true);
          bwd_range(half, B, need_w ? dw1.data() : nullptr,
                    need_b ? db1.data() : nullptr);
        });
        kern::set_serial_gemm(true);
        bwd_range(0, half, need_w ? dw0.data() : nullptr,
                  need_b ? db0.data() : nullptr);
        kern::set_serial_gemm(false);
        worker.join();
        if (need_w) {
          T* dw = wh.grad();
          for (size_t q = 0; q < dw0.size(); ++q) dw[q] += dw0[q] + dw1[q];
        }
        if (need_b) {
          T* db = bh.grad();
          for (int co = 0; co < Co; ++co) db[co] += db0[size_t(co)] + db1[size_t(co)];
        }
      }
    });
  }
  return out;
}

// ---- shape ops ----

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  Tensor<T> out = Tensor<T>::from(x.vec(), std::move(shape));
  bool rg = want_grad<T>({&x});
  out.set_requires_grad(rg);
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      ew_axpy<T>(T(1), oh.grad_vec().data(), xh.grad(), size_t(xh.numel()));
    });
  }
  return out;
}

namespace {

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// copies x into out laid out by perm; dir=+1 forward, dir=-1 accumulates
// (used for the backward scatter)
template <class T>
void permute_copy(const T* src, T* dst, const Shape& in_shape,
                  const std::vector<int>& perm, bool accumulate_to_src_order) {
  Shape os(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) os[i] = in_shape[size_t(perm[i])];
  auto ist = row_major_strides(in_shape);
  size_t r = perm.size();
  std::vector<int64_t> map(r);
  for (size_t i = 0; i < r; ++i) map[i] = ist[size_t(perm[i])];
  std::vector<int> idx(r, 0);
  int64_t n = numel_of(os);
  int64_t src_i = 0;
  for (int64_t o = 0; o < n; ++o) {
    if (accumulate_to_src_order)
      dst[src_i] += src[o];
    else
      dst[o] = src[src_i];
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      src_i += map[d];
      if (idx[d] < os[d]) break;
      src_i -= int64_t(idx[d]) * map[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  if (int(perm.size()) != x.rank())
    throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (int p : perm) {
    if (p < 0 || p >= x.rank() || seen[size_t(p)])
      throw ShapeError("permute: invalid permutation");
    seen[size_t(p)] = true;
  }
  Shape os(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) os[i] = x.dim(perm[i]);
  Tensor<T> out = Tensor<T>::zeros(os);
  permute_copy(x.data(), out.data(), x.shape(), perm, false);
  bool rg = want_grad<T>({&x});
  out.set_requires_grad(rg);
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      permute_copy(oh.grad_vec().data(), xh.grad(), xh.shape(), perm, true);
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose2d: expected rank 2");
  return permute(x, {1, 0});
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: empty input list");
  int r = xs[0].rank();
  if (axis < 0 || axis >= r) throw ShapeError("concat: bad axis");
  Shape os = xs[0].shape();
  int total = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && t.dim(d) != os[size_t(d)])
        throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) +
                         " vs " + shape_str(os));
    total += t.dim(axis);
  }
  os[size_t(axis)] = total;
  Tensor<T> out = Tensor<T>::zeros(os);
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= os[size_t(d)];
  for (int d = axis + 1; d < r; ++d) inner *= os[size_t(d)];
  int64_t out_row = int64_t(total) * inner;
  int64_t off = 0;
  for (const auto& t : xs) {
    int64_t len = int64_t(t.dim(axis)) * inner;
    const T* src = t.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * out_row + off, src + o * len,
                  size_t(len) * sizeof(T));
    off += len;
  }
  bool rec = Tape<T>::get().recording();
  bool rg = false;
  if (rec)
    for (const auto& t : xs) rg = rg || t.requires_grad();
  finalize(out, rg, "concat");
  if (rg) {
    std::vector<Tensor<T>> ins = xs;
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl());
      const T* g = oh.grad_vec().data();
      int64_t off2 = 0;
      for (auto t : ins) {
        int64_t len = int64_t(t.dim(axis)) * inner;
        if (t.requires_grad()) {
          T* gi = t.grad();
          for (int64_t o = 0; o < outer; ++o)
            ew_axpy<T>(T(1), g + o * out_row + off2, gi + o * len,
                       size_t(len));
        }
        off2 += len;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int len) {
  if (axis < 0 || axis >= x.rank()) throw ShapeError("slice: bad axis");
  if (start < 0 || len <= 0 || start + len > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds for axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  Shape os = x.shape();
  os[size_t(axis)] = len;
  Tensor<T> out = Tensor<T>::zeros(os);
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  int64_t in_row = int64_t(x.dim(axis)) * inner;
  int64_t out_row = int64_t(len) * inner;
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * out_row,
                x.data() + o * in_row + int64_t(start) * inner,
                size_t(out_row) * sizeof(T));
  bool rg = want_grad<T>({&x});
  out.set_requires_grad(rg);
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      const T* g = oh.grad_vec().data();
      T* gi = xh.grad();
      for (int64_t o = 0; o < outer; ++o)
        ew_axpy<T>(T(1), g + o * out_row,
                   gi + o * in_row + int64_t(start) * inner, size_t(out_row));
    });
  }
  return out;
}

// ---- activations ----

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  if constexpr (std::is_same_v<T, float>) {
    kern::table().relu(x.data(), out.data(), size_t(x.numel()));
  } else {
    const T* px = x.data();
    T* po = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] > 0 ? px[i] : T(0);
  }
  bool rg = want_grad<T>({&x});
  finalize(out, rg, "relu");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      if constexpr (std::is_same_v<T, float>) {
        kern::table().relu_bwd(xh.data(), oh.grad_vec().data(), xh.grad(),
                               size_t(xh.numel()));
      } else {
        const T* px = xh.data();
        const T* g = oh.grad_vec().data();
        T* gi = xh.grad();
        for (int64_t i = 0; i < xh.numel(); ++i)
          if (px[i] > 0) gi[i] += g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    T v = px[i];
    po[i] = T(0.5) * v * (T(1) + std::erf(v * T(inv_sqrt2)));
  }
  bool rg = want_grad<T>({&x});
  finalize(out, rg, "gelu");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      const T* px2 = xh.data();
      const T* g = oh.grad_vec().data();
      T* gi = xh.grad();
      for (int64_t i = 0; i < xh.numel(); ++i) {
        T v = px2[i];
        T phi = T(0.5) * (T(1) + std::erf(v * T(inv_sqrt2)));
        T pdf = T(inv_sqrt2pi) * std::exp(T(-0.5) * v * v);
        gi[i] += g[i] * (phi + v * pdf);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    T v = px[i];
    if (v >= 0) {
      T e = std::exp(-v);
      po[i] = T(1) / (T(1) + e);
    } else {
      T e = std::exp(v);
      po[i] = e / (T(1) + e);
    }
  }
  bool rg = want_grad<T>({&x});
  finalize(out, rg, "sigmoid");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      const T* s = oh.data();
      const T* g = oh.grad_vec().data();
      T* gi = xh.grad();
      for (int64_t i = 0; i < xh.numel(); ++i)
        gi[i] += g[i] * s[i] * (T(1) - s[i]);
    });
  }
  return out;
}

namespace {

struct AxisSpan {
  int64_t outer, alen, inner;
};

AxisSpan axis_span(const Shape& s, int axis, const char* opname) {
  if (axis < 0 || axis >= int(s.size()))
    throw ShapeError(std::string(opname) + ": axis " + std::to_string(axis) +
                     " invalid for " + shape_str(s));
  AxisSpan sp{1, s[size_t(axis)], 1};
  for (int d = 0; d < axis; ++d) sp.outer *= s[size_t(d)];
  for (size_t d = size_t(axis) + 1; d < s.size(); ++d) sp.inner *= s[d];
  return sp;
}

}  // namespace

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  auto sp = axis_span(x.shape(), axis, "softmax");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t in = 0; in < sp.inner; ++in) {
      int64_t base = o * sp.alen * sp.inner + in;
      T mx = px[base];
      for (int64_t j = 1; j < sp.alen; ++j)
        mx = std::max(mx, px[base + j * sp.inner]);
      T denom = T(0);
      for (int64_t j = 0; j < sp.alen; ++j) {
        T e = std::exp(px[base + j * sp.inner] - mx);
        po[base + j * sp.inner] = e;
        denom += e;
      }
      for (int64_t j = 0; j < sp.alen; ++j) po[base + j * sp.inner] /= denom;
    }
  }
  bool rg = want_grad<T>({&x});
  finalize(out, rg, "softmax");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      const T* s = oh.data();
      const T* g = oh.grad_vec().data();
      T* gi = xh.grad();
      for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t in = 0; in < sp.inner; ++in) {
          int64_t base = o * sp.alen * sp.inner + in;
          T dot = T(0);
          for (int64_t j = 0; j < sp.alen; ++j)
            dot += g[base + j * sp.inner] * s[base + j * sp.inner];
          for (int64_t j = 0; j < sp.alen; ++j) {
            int64_t idx = base + j * sp.inner;
            gi[idx] += s[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  int r = x.rank();
  int e = x.dim(r - 1);
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != e ||
      beta.dim(0) != e)
    throw ShapeError("layer_norm: gamma/beta must be (" + std::to_string(e) +
                     "), got " + shape_str(gamma.shape()) + " and " +
                     shape_str(beta.shape()));
  int64_t rows = x.numel() / e;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(size_t(x.numel()));
  auto invstd = std::make_shared<std::vector<T>>(size_t(rows));
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  T* po = out.data();
  for (int64_t row = 0; row < rows; ++row) {
    const T* xr = px + row * e;
    T* orow = po + row * e;
    T* hr = xhat->data() + row * e;
    T mu = T(0);
    for (int j = 0; j < e; ++j) mu += xr[j];
    mu /= T(e);
    T var = T(0);
    for (int j = 0; j < e; ++j) {
      T d = xr[j] - mu;
      var += d * d;
    }
    var /= T(e);
    T is = T(1) / std::sqrt(var + eps);
    (*invstd)[size_t(row)] = is;
    for (int j = 0; j < e; ++j) {
      hr[j] = (xr[j] - mu) * is;
      orow[j] = pg[j] * hr[j] + pb[j];
    }
  }
  bool rg = want_grad<T>({&x, &gamma, &beta});
  finalize(out, rg, "layer_norm");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl()), gh(gamma.impl()), bh(beta.impl());
      const T* g = oh.grad_vec().data();
      const T* pg2 = gh.data();
      for (int64_t row = 0; row < rows; ++row) {
        const T* grow = g + row * e;
        const T* hr = xhat->data() + row * e;
        if (gh.requires_grad()) {
          T* gg = gh.grad();
          for (int j = 0; j < e; ++j) gg[j] += grow[j] * hr[j];
        }
        if (bh.requires_grad()) {
          T* gb = bh.grad();
          for (int j = 0; j < e; ++j) gb[j] += grow[j];
        }
        if (xh.requires_grad()) {
          T is = (*invstd)[size_t(row)];
          T m1 = T(0), m2 = T(0);
          for (int j = 0; j < e; ++j) {
            T dh = grow[j] * pg2[j];
            m1 += dh;
            m2 += dh * hr[j];
          }
          m1 /= T(e);
          m2 /= T(e);
          T* gi = xh.grad() + row * e;
          for (int j = 0; j < e; ++j) {
            T dh = grow[j] * pg2[j];
            gi[j] += is * (dh - m1 - hr[j] * m2);
          }
        }
      }
    });
  }
  return out;
}

// ---- reductions ----

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s;
  if constexpr (std::is_same_v<T, float>) {
    s = kern::table().sum(x.data(), size_t(x.numel()));
  } else {
    s = T(0);
    const T* px = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) s += px[i];
  }
  Tensor<T> out = Tensor<T>::scalar(s);
  bool rg = want_grad<T>({&x});
  finalize(out, rg, "sum");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      T g = oh.grad_vec()[0];
      T* gi = xh.grad();
      for (int64_t i = 0; i < xh.numel(); ++i) gi[i] += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  Tensor<T> s = sum(x);
  return mul_scalar(s, T(1) / T(x.numel()));
}

template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis, bool keepdim) {
  auto sp = axis_span(x.shape(), axis, "sum_axis");
  Shape os;
  for (int d = 0; d < x.rank(); ++d) {
    if (d == axis) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(x.dim(d));
    }
  }
  if (os.empty()) os.push_back(1);
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t j = 0; j < sp.alen; ++j) {
      const T* src = px + (o * sp.alen + j) * sp.inner;
      T* dst = po + o * sp.inner;
      for (int64_t in = 0; in < sp.inner; ++in) dst[in] += src[in];
    }
  bool rg = want_grad<T>({&x});
  finalize(out, rg, "sum_axis");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      const T* g = oh.grad_vec().data();
      T* gi = xh.grad();
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t j = 0; j < sp.alen; ++j)
          ew_axpy<T>(T(1), g + o * sp.inner,
                     gi + (o * sp.alen + j) * sp.inner, size_t(sp.inner));
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis, bool keepdim) {
  Tensor<T> s = sum_axis(x, axis, keepdim);
  return mul_scalar(s, T(1) / T(x.dim(axis)));
}

template <class T>
Tensor<T> l1_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("l1_distance: shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const T* pa = a.data();
  const T* pb = b.data();
  int64_t n = a.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += std::fabs(double(pa[i]) - double(pb[i]));
  Tensor<T> out = Tensor<T>::scalar(T(acc / double(n)));
  bool rg = want_grad<T>({&a, &b});
  finalize(out, rg, "l1_distance");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), ah(a.impl()), bh(b.impl());
      T g = oh.grad_vec()[0] / T(n);
      const T* pa2 = ah.data();
      const T* pb2 = bh.data();
      T* ga = ah.requires_grad() ? ah.grad() : nullptr;
      T* gb = bh.requires_grad() ? bh.grad() : nullptr;
      for (int64_t i = 0; i < n; ++i) {
        T d = pa2[i] - pb2[i];
        T sg = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
        if (ga) ga[i] += g * sg;
        if (gb) gb[i] -= g * sg;
      }
    });
  }
  return out;
}

// ---- indexing / resampling ----

template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& ids) {
  if (table.rank() != 2)
    throw ShapeError("embedding_lookup: table must be (V,e)");
  int V = table.dim(0), e = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= V)
      throw ShapeError("embedding_lookup: id " + std::to_string(id) +
                       " out of range [0," + std::to_string(V) + ")");
  int L = int(ids.size());
  if (L == 0) throw ShapeError("embedding_lookup: empty id list");
  Tensor<T> out = Tensor<T>::zeros({L, e});
  for (int i = 0; i < L; ++i)
    std::memcpy(out.data() + int64_t(i) * e,
                table.data() + int64_t(ids[size_t(i)]) * e,
                size_t(e) * sizeof(T));
  bool rg = want_grad<T>({&table});
  finalize(out, rg, "embedding_lookup");
  if (rg) {
    std::vector<int> ids_c = ids;
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), th(table.impl());
      const T* g = oh.grad_vec().data();
      T* gt = th.grad();
      for (int i = 0; i < L; ++i)
        ew_axpy<T>(T(1), g + int64_t(i) * e,
                   gt + int64_t(ids_c[size_t(i)]) * e, size_t(e));
    });
  }
  return out;
}

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("upsample_nearest2x: rank must be >= 2");
  int r = x.rank();
  int H = x.dim(r - 2), W = x.dim(r - 1);
  int64_t ch = x.numel() / (int64_t(H) * W);
  Shape os = x.shape();
  os[size_t(r - 2)] = 2 * H;
  os[size_t(r - 1)] = 2 * W;
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t c = 0; c < ch; ++c) {
    const T* ip = px + c * H * W;
    T* op = po + c * 4 * H * W;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        T v = ip[int64_t(i) * W + j];
        int64_t b0 = int64_t(2 * i) * 2 * W + 2 * j;
        op[b0] = v;
        op[b0 + 1] = v;
        op[b0 + 2 * W] = v;
        op[b0 + 2 * W + 1] = v;
      }
  }
  bool rg = want_grad<T>({&x});
  out.set_requires_grad(rg);
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      const T* g = oh.grad_vec().data();
      T* gi = xh.grad();
      for (int64_t c = 0; c < ch; ++c) {
        const T* gp = g + c * 4 * H * W;
        T* ip = gi + c * H * W;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            int64_t b0 = int64_t(2 * i) * 2 * W + 2 * j;
            ip[int64_t(i) * W + j] +=
                gp[b0] + gp[b0 + 1] + gp[b0 + 2 * W] + gp[b0 + 2 * W + 1];
          }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> resize_nearest(const Tensor<T>& x, int out_h, int out_w) {
  if (x.rank() < 2) throw ShapeError("resize_nearest: rank must be >= 2");
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize_nearest: bad size");
  int r = x.rank();
  int H = x.dim(r - 2), W = x.dim(r - 1);
  int64_t ch = x.numel() / (int64_t(H) * W);
  Shape os = x.shape();
  os[size_t(r - 2)] = out_h;
  os[size_t(r - 1)] = out_w;
  Tensor<T> out = Tensor<T>::zeros(os);
  std::vector<int> ym(out_h), xm(out_w);
  for (int i = 0; i < out_h; ++i) ym[size_t(i)] = int(int64_t(i) * H / out_h);
  for (int j = 0; j < out_w; ++j) xm[size_t(j)] = int(int64_t(j) * W / out_w);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t c = 0; c < ch; ++c) {
    const T* ip = px + c * H * W;
    T* op = po + c * int64_t(out_h) * out_w;
    for (int i = 0; i < out_h; ++i)
      for (int j = 0; j < out_w; ++j)
        op[int64_t(i) * out_w + j] = ip[int64_t(ym[size_t(i)]) * W + xm[size_t(j)]];
  }
  bool rg = want_grad<T>({&x});
  out.set_requires_grad(rg);
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      const T* g = oh.grad_vec().data();
      T* gi = xh.grad();
      for (int64_t c = 0; c < ch; ++c) {
        const T* gp = g + c * int64_t(out_h) * out_w;
        T* ip = gi + c * H * W;
        for (int i = 0; i < out_h; ++i)
          for (int j = 0; j < out_w; ++j)
            ip[int64_t(ym[size_t(i)]) * W + xm[size_t(j)]] +=
                gp[int64_t(i) * out_w + j];
      }
    });
  }
  return out;
}

// ---- pointwise math ----

template <class T>
Tensor<T> log_clamped(const Tensor<T>& x) {
  const T eps = T(1e-8);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i)
    po[i] = std::log(std::max(px[i], eps));
  bool rg = want_grad<T>({&x});
  finalize(out, rg, "log");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      const T* px2 = xh.data();
      const T* g = oh.grad_vec().data();
      T* gi = xh.grad();
      for (int64_t i = 0; i < xh.numel(); ++i)
        if (px2[i] > eps) gi[i] += g[i] / px2[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> clamp_min(const Tensor<T>& x, T c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = std::max(px[i], c);
  bool rg = want_grad<T>({&x});
  finalize(out, rg, "clamp_min");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), xh(x.impl());
      const T* px2 = xh.data();
      const T* g = oh.grad_vec().data();
      T* gi = xh.grad();
      for (int64_t i = 0; i < xh.numel(); ++i)
        if (px2[i] > c) gi[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> cosine_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("cosine_rows: expected (L,e) and (N,e), got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const T eps = T(1e-8);
  int L = a.dim(0), N = b.dim(0), e = a.dim(1);
  auto na = std::make_shared<std::vector<T>>(size_t(L));
  auto nb = std::make_shared<std::vector<T>>(size_t(N));
  for (int i = 0; i < L; ++i) {
    T s = T(0);
    const T* row = a.data() + int64_t(i) * e;
    for (int j = 0; j < e; ++j) s += row[j] * row[j];
    (*na)[size_t(i)] = std::max(std::sqrt(s), eps);
  }
  for (int i = 0; i < N; ++i) {
    T s = T(0);
    const T* row = b.data() + int64_t(i) * e;
    for (int j = 0; j < e; ++j) s += row[j] * row[j];
    (*nb)[size_t(i)] = std::max(std::sqrt(s), eps);
  }
  Tensor<T> out = Tensor<T>::zeros({L, N});
  kern::gemm_nt_t<T>(a.data(), b.data(), out.data(), L, e, N, false);
  T* po = out.data();
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < N; ++j)
      po[int64_t(i) * N + j] /= (*na)[size_t(i)] * (*nb)[size_t(j)];
  bool rg = want_grad<T>({&a, &b});
  finalize(out, rg, "cosine_rows");
  if (rg) {
    Tape<T>::get().record(out.impl(), [=]() {
      Tensor<T> oh(out.impl()), ah(a.impl()), bh(b.impl());
      const T* g = oh.grad_vec().data();
      const T* s = oh.data();
      // gs_ij = g_ij / (na_i * nb_j)
      std::vector<T> gs(size_t(L) * N);
      for (int i = 0; i < L; ++i)
        for (int j = 0; j < N; ++j)
          gs[size_t(i) * N + j] =
              g[int64_t(i) * N + j] / ((*na)[size_t(i)] * (*nb)[size_t(j)]);
      if (ah.requires_grad()) {
        // dA += gs*B - (sum_j g_ij s_ij / na_i^2) * a_i
        std::vector<T> tmp(size_t(L) * e, T(0));
        kern::gemm_t<T>(gs.data(), bh.data(), tmp.data(), L, N, e, false);
        T* ga = ah.grad();
        const T* pa = ah.data();
        for (int i = 0; i < L; ++i) {
          T coef = T(0);
          for (int j = 0; j < N; ++j)
            coef += g[int64_t(i) * N + j] * s[int64_t(i) * N + j];
          coef /= (*na)[size_t(i)] * (*na)[size_t(i)];
          const T* arow = pa + int64_t(i) * e;
          T* grow = ga + int64_t(i) * e;
          const T* trow = tmp.data() + int64_t(i) * e;
          for (int q = 0; q < e; ++q) grow[q] += trow[q] - coef * arow[q];
        }
      }
      if (bh.requires_grad()) {
        std::vector<T> tmp(size_t(N) * e, T(0));
        kern::gemm_tn_t<T>(gs.data(), ah.data(), tmp.data(), N, L, e, false);
        T* gb = bh.grad();
        const T* pb = bh.data();
        for (int j = 0; j < N; ++j) {
          T coef = T(0);
          for (int i = 0; i < L; ++i)
            coef += g[int64_t(i) * N + j] * s[int64_t(i) * N + j];
          coef /= (*nb)[size_t(j)] * (*nb)[size_t(j)];
          const T* brow = pb + int64_t(j) * e;
          T* grow = gb + int64_t(j) * e;
          const T* trow = tmp.data() + int64_t(j) * e;
          for (int q = 0; q < e; ++q) grow[q] += trow[q] - coef * brow[q];
        }
      }
    });
  }
  return out;
}

// ---- explicit instantiations ----

#define CMA_INSTANTIATE_OPS(T)                                                \
  template void check_all_finite<T>(const Tensor<T>&, const char*);          \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> neg<T>(const Tensor<T>&);                               \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                     \
  template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                     \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&,           \
                               const Tensor<T>&, int, int);                  \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                    \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);  \
  template Tensor<T> transpose2d<T>(const Tensor<T>&);                       \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);          \
  template Tensor<T> slice<T>(const Tensor<T>&, int, int, int);              \
  template Tensor<T> relu<T>(const Tensor<T>&);                              \
  template Tensor<T> gelu<T>(const Tensor<T>&);                              \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                           \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                      \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&,       \
                                   const Tensor<T>&, T);                     \
  template Tensor<T> sum<T>(const Tensor<T>&);                               \
  template Tensor<T> mean<T>(const Tensor<T>&);                              \
  template Tensor<T> sum_axis<T>(const Tensor<T>&, int, bool);               \
  template Tensor<T> mean_axis<T>(const Tensor<T>&, int, bool);              \
  template Tensor<T> l1_distance<T>(const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> embedding_lookup<T>(const Tensor<T>&,                   \
                                         const std::vector<int>&);           \
  template Tensor<T> upsample_nearest2x<T>(const Tensor<T>&);                \
  template Tensor<T> resize_nearest<T>(const Tensor<T>&, int, int);          \
  template Tensor<T> log_clamped<T>(const Tensor<T>&);                       \
  template Tensor<T> clamp_min<T>(const Tensor<T>&, T);                      \
  template Tensor<T> cosine_rows<T>(const Tensor<T>&, const Tensor<T>&);

CMA_INSTANTIATE_OPS(float)
CMA_INSTANTIATE_OPS(double)

}  // namespace cma
