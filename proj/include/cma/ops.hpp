// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over Tensor<T>. Every op validates shapes,
// checks outputs for NaN/Inf (error state), and records a backward rule on
// the thread's tape when gradients are required.
#pragma once

#include <vector>

#include "cma/tensor.hpp"

namespace cma {

// ---- elementwise (numpy-style right-aligned broadcasting) ----
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> neg(const Tensor<T>& x);
template <class T> Tensor<T> add_scalar(const Tensor<T>& x, T c);
template <class T> Tensor<T> mul_scalar(const Tensor<T>& x, T c);

// ---- linear algebra ----
// 2-D (m,k)x(k,n), or 3-D with matching leading batch extent
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x: (C,H,W) or (B,C,H,W); w: (Co,Ci,k,k); bias: (Co) or undefined
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int stride, int pad);

// ---- shape ----
template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <class T> Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm);
template <class T> Tensor<T> transpose2d(const Tensor<T>& x);
template <class T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);
template <class T> Tensor<T> slice(const Tensor<T>& x, int axis, int start, int len);

// ---- activations / normalization ----
template <class T> Tensor<T> relu(const Tensor<T>& x);
template <class T> Tensor<T> gelu(const Tensor<T>& x);
template <class T> Tensor<T> sigmoid(const Tensor<T>& x);
template <class T> Tensor<T> softmax(const Tensor<T>& x, int axis);
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps);

// ---- reductions ----
template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x);
template <class T> Tensor<T> sum_axis(const Tensor<T>& x, int axis, bool keepdim);
template <class T> Tensor<T> mean_axis(const Tensor<T>& x, int axis, bool keepdim);

// mean absolute difference over all elements
template <class T> Tensor<T> l1_distance(const Tensor<T>& a, const Tensor<T>& b);

// ---- indexing / resampling ----
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& ids);
template <class T> Tensor<T> upsample_nearest2x(const Tensor<T>& x);
template <class T> Tensor<T> resize_nearest(const Tensor<T>& x, int out_h, int out_w);

// ---- pointwise math ----
// ln(max(x, 1e-8)); the clamp keeps KL/cosine terms finite
template <class T> Tensor<T> log_clamped(const Tensor<T>& x);
template <class T> Tensor<T> clamp_min(const Tensor<T>& x, T c);

// row-pairwise cosine similarity: (L,e),(N,e) -> (L,N); norms clamped at 1e-8
template <class T> Tensor<T> cosine_rows(const Tensor<T>& a, const Tensor<T>& b);

// ---- non-differentiating helpers ----
template <class T> void check_all_finite(const Tensor<T>& t, const char* what);

}  // namespace cma
