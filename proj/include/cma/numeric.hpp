// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "cma/common.hpp"

namespace cma {

// Cyclic Jacobi eigendecomposition of a symmetric n x n matrix (row-major).
// Returns eigenvalues ascending; if evecs is non-null it receives the
// corresponding eigenvectors as columns.
inline void jacobi_eigen_sym(std::vector<double> a, int n,
                             std::vector<double>& evals,
                             std::vector<double>* evecs = nullptr) {
  if (int(a.size()) != n * n) throw ShapeError("jacobi: bad matrix size");
  std::vector<double> v;
  if (evecs) {
    v.assign(size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i) v[size_t(i) * n + i] = 1.0;
  }
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a[size_t(p) * n + q] * a[size_t(p) * n + q];
    if (off < 1e-26) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double apq = a[size_t(p) * n + q];
        if (std::fabs(apq) < 1e-300) continue;
        double app = a[size_t(p) * n + p], aqq = a[size_t(q) * n + q];
        double theta = (aqq - app) / (2 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (int k = 0; k < n; ++k) {
          double akp = a[size_t(k) * n + p], akq = a[size_t(k) * n + q];
          a[size_t(k) * n + p] = c * akp - s * akq;
          a[size_t(k) * n + q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          double apk = a[size_t(p) * n + k], aqk = a[size_t(q) * n + k];
          a[size_t(p) * n + k] = c * apk - s * aqk;
          a[size_t(q) * n + k] = s * apk + c * aqk;
        }
        if (evecs)
          for (int k = 0; k < n; ++k) {
            double vkp = v[size_t(k) * n + p], vkq = v[size_t(k) * n + q];
            v[size_t(k) * n + p] = c * vkp - s * vkq;
            v[size_t(k) * n + q] = s * vkp + c * vkq;
          }
      }
    }
  }
  evals.resize(size_t(n));
  for (int i = 0; i < n; ++i) evals[size_t(i)] = a[size_t(i) * n + i];
  // ascending order, permuting eigenvectors alongside
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[size_t(i)] = i;
  std::sort(idx.begin(), idx.end(),
            [&](int x, int y) { return evals[size_t(x)] < evals[size_t(y)]; });
  std::vector<double> se(n);
  for (int i = 0; i < n; ++i) se[size_t(i)] = evals[size_t(idx[size_t(i)])];
  evals = se;
  if (evecs) {
    evecs->assign(size_t(n) * n, 0.0);
    for (int col = 0; col < n; ++col)
      for (int k = 0; k < n; ++k)
        (*evecs)[size_t(k) * n + col] = v[size_t(k) * n + idx[size_t(col)]];
  }
}

// exact top singular value via eigen of W W^T (rows x rows)
inline double top_singular_value(const float* w, int rows, int cols) {
  std::vector<double> g(size_t(rows) * rows, 0.0);
  for (int i = 0; i < rows; ++i)
    for (int j = i; j < rows; ++j) {
      double s = 0;
      for (int k = 0; k < cols; ++k)
        s += double(w[size_t(i) * cols + k]) * double(w[size_t(j) * cols + k]);
      g[size_t(i) * rows + j] = g[size_t(j) * rows + i] = s;
    }
  std::vector<double> evals;
  jacobi_eigen_sym(g, rows, evals);
  return std::sqrt(std::max(0.0, evals.back()));
}

}  // namespace cma
