// SPDX-License-Identifier: Apache-2.0

#include "cma/discriminator.hpp"

#include <cmath>

namespace cma {
namespace {

template <class T>
Tensor<T> he_conv(Rng& rng, int co, int ci, int k) {
  double std = std::sqrt(2.0 / (double(ci) * k * k));
  Tensor<T> w = Tensor<T>::zeros({co, ci, k, k}, /*requires_grad=*/true);
  for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = T(rng.normal(0.0, std));
  return w;
}

// W flattened to (rows, cols); y = W x or y = W^T x
template <class T>
void matvec(const T* w, int rows, int cols, const T* x, T* y, bool transposed) {
  if (!transposed) {
    for (int r = 0; r < rows; ++r) {
      T s = T(0);
      const T* row = w + size_t(r) * cols;
      for (int c = 0; c < cols; ++c) s += row[c] * x[c];
      y[r] = s;
    }
  } else {
    for (int c = 0; c < cols; ++c) y[c] = T(0);
    for (int r = 0; r < rows; ++r) {
      const T* row = w + size_t(r) * cols;
      for (int c = 0; c < cols; ++c) y[c] += row[c] * x[r];
    }
  }
}

template <class T>
void normalize_vec(std::vector<T>& v) {
  T s = T(0);
  for (T x : v) s += x * x;
  T n = std::sqrt(s);
  if (n < T(1e-12)) n = T(1e-12);
  for (T& x : v) x /= n;
}

}  // namespace

template <class T>
void sn_power_iterate(const Tensor<T>& w, Tensor<T>& u, int steps) {
  int rows = w.dim(0);
  int cols = int(w.numel() / rows);
  std::vector<T> v(cols), unew(rows);
  for (int s = 0; s < steps; ++s) {
    matvec(w.data(), rows, cols, u.data(), v.data(), /*transposed=*/true);
    normalize_vec(v);
    matvec(w.data(), rows, cols, v.data(), unew.data(), /*transposed=*/false);
    normalize_vec(unew);
    std::copy(unew.begin(), unew.end(), u.data());
  }
}

template <class T>
T sn_sigma(const Tensor<T>& w, const Tensor<T>& u) {
  int rows = w.dim(0);
  int cols = int(w.numel() / rows);
  std::vector<T> v(cols), wv(rows);
  matvec(w.data(), rows, cols, u.data(), v.data(), true);
  normalize_vec(v);
  matvec(w.data(), rows, cols, v.data(), wv.data(), false);
  T s = T(0);
  for (int r = 0; r < rows; ++r) s += u.data()[r] * wv[r];
  return s;
}

template <class T>
Tensor<T> spectral_normalize(const Tensor<T>& w, Tensor<T>& u, bool update_u) {
  int rows = w.dim(0);
  int cols = int(w.numel() / rows);
  // v from the pre-update u; u then advances one step (standard SN-GAN order)
  std::vector<T> v(cols);
  matvec(w.data(), rows, cols, u.data(), v.data(), true);
  normalize_vec(v);
  if (update_u) {
    std::vector<T> unew(rows);
    matvec(w.data(), rows, cols, v.data(), unew.data(), false);
    normalize_vec(unew);
    std::copy(unew.begin(), unew.end(), u.data());
  }
  // sigma = u^T W v as a tape expression; u, v constant
  Tensor<T> vt = Tensor<T>::from(std::vector<T>(v.begin(), v.end()),
                                 {cols, 1});
  Tensor<T> ut = u.detach();
  Tensor<T> wm = reshape(w, {rows, cols});
  Tensor<T> wv = matmul(wm, vt);                      // (rows,1)
  Tensor<T> sigma = sum(mul(wv, reshape(ut, {rows, 1})));
  Tensor<T> sigma_c = clamp_min(sigma, T(1e-8));
  return div(w, sigma_c);
}

CropBox square_crop_box(const float* mask, int H, int W) {
  int x0 = W, x1 = -1, y0 = H, y1 = -1;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (mask[size_t(y) * W + x] > 0.5f) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) throw ShapeError("local_crop: empty mask");
  int bw = x1 - x0 + 1, bh = y1 - y0 + 1;
  int side = std::min(std::max(bw, bh), std::min(H, W));
  CropBox b;
  b.side = side;
  b.x0 = std::min(std::max(x0 - (side - bw) / 2, 0), W - side);
  b.y0 = std::min(std::max(y0 - (side - bh) / 2, 0), H - side);
  return b;
}

template <class T>
Tensor<T> local_crop(const Tensor<T>& image, const CropBox& box, int out_size) {
  if (image.rank() != 3)
    throw ShapeError("local_crop: expected (C,H,W), got " +
                     shape_str(image.shape()));
  Tensor<T> rows = slice(image, 1, box.y0, box.side);
  Tensor<T> crop = slice(rows, 2, box.x0, box.side);
  return resize_nearest(crop, out_size, out_size);
}

template <class T>
Discriminator<T>::Discriminator(const DiscriminatorConfig& cfg, uint64_t seed)
    : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0xd15c));
  auto make_sn = [&](int co, int ci, int k) {
    SnConv c;
    c.w = he_conv<T>(rng, co, ci, k);
    c.b = Tensor<T>::zeros({co}, true);
    c.u = Tensor<T>::zeros({co});
    for (int i = 0; i < co; ++i) c.u.data()[i] = T(rng.normal(0.0, 1.0));
    T s = T(0);
    for (int i = 0; i < co; ++i) s += c.u.data()[i] * c.u.data()[i];
    s = std::sqrt(s);
    for (int i = 0; i < co; ++i) c.u.data()[i] /= s;
    return c;
  };
  // stride-2 geometry: 4x4 pad-1 second conv, 2x2 shortcut
  int ci = cfg_.in_channels;
  for (int i = 0; i < 5; ++i) {
    int co = cfg_.widths[size_t(i)];
    blocks_[size_t(i)].c1 = make_sn(co, ci, 3);
    blocks_[size_t(i)].c2 = make_sn(co, co, 4);
    blocks_[size_t(i)].sc = make_sn(co, ci, 2);
    ci = co;
  }
  fc_w_ = Tensor<T>::zeros({ci, 1}, true);
  double std = 1.0 / std::sqrt(double(ci));
  for (int64_t i = 0; i < fc_w_.numel(); ++i)
    fc_w_.data()[i] = T(rng.normal(0.0, std));
  fc_b_ = Tensor<T>::zeros({1}, true);
  fc_u_ = Tensor<T>::filled({ci}, T(1.0 / std::sqrt(double(ci))));
}

template <class T>
Tensor<T> Discriminator<T>::sn_conv(SnConv& c, const Tensor<T>& x, int stride,
                                    int pad, bool update_sn) {
  Tensor<T> what = spectral_normalize(c.w, c.u, update_sn);
  return conv2d(x, what, c.b, stride, pad);
}

template <class T>
Tensor<T> Discriminator<T>::forward(const Tensor<T>& x, bool update_sn) {
  bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3)
    throw ShapeError("discriminator: bad input rank");
  int hw = x.dim(batched ? 2 : 1);
  if (x.dim(batched ? 1 : 0) != cfg_.in_channels || hw != cfg_.input_size ||
      x.dim(batched ? 3 : 2) != cfg_.input_size)
    throw ShapeError("discriminator: input " + shape_str(x.shape()) +
                     " does not match configured resolution " +
                     std::to_string(cfg_.input_size));
  Tensor<T> h = batched ? x : reshape(x, {1, cfg_.in_channels, hw, hw});
  for (auto& blk : blocks_) {
    Tensor<T> main = relu(sn_conv(blk.c1, h, 1, 1, update_sn));
    main = sn_conv(blk.c2, main, 2, 1, update_sn);
    Tensor<T> sc = sn_conv(blk.sc, h, 2, 0, update_sn);
    Tensor<T> merged = add(main, sc);
    if (cfg_.avg_residual) merged = mul_scalar(merged, T(0.5));
    h = relu(merged);
  }
  int B = h.dim(0), C = h.dim(1);
  int sp = h.dim(2) * h.dim(3);
  Tensor<T> pooled = mean_axis(reshape(h, {B, C, sp}), 2, false);  // (B,C)
  // fc_w is (ci,1); viewed as a matrix its top singular value is |fc_w|_2
  Tensor<T> head =
      cfg_.sn_fc ? spectral_normalize(fc_w_, fc_u_, update_sn) : fc_w_;
  Tensor<T> score = add(matmul(pooled, head), fc_b_);  // (B,1)
  return batched ? reshape(score, {B}) : reshape(score, {1});
}

template <class T>
void Discriminator<T>::collect(ParamSet<T>& out, const std::string& prefix) {
  for (int i = 0; i < 5; ++i) {
    Block& b = blocks_[size_t(i)];
    std::string p = prefix + ".block" + std::to_string(i);
    auto one = [&](const char* n, SnConv& c) {
      out.param(p + "." + n + ".w", c.w);
      out.param(p + "." + n + ".b", c.b);
      out.buffer(p + "." + n + ".u", c.u);
    };
    one("c1", b.c1);
    one("c2", b.c2);
    one("sc", b.sc);
  }
  out.param(prefix + ".fc_w", fc_w_);
  out.param(prefix + ".fc_b", fc_b_);
  if (cfg_.sn_fc) out.buffer(prefix + ".fc_u", fc_u_);
}

template <class T>
void Discriminator<T>::power_iterate(int steps) {
  for (auto& blk : blocks_) {
    sn_power_iterate(blk.c1.w, blk.c1.u, steps);
    sn_power_iterate(blk.c2.w, blk.c2.u, steps);
    sn_power_iterate(blk.sc.w, blk.sc.u, steps);
  }
}

template <class T>
std::vector<T> Discriminator<T>::sigma_estimates() const {
  std::vector<T> out;
  for (const auto& blk : blocks_) {
    out.push_back(sn_sigma(blk.c1.w, blk.c1.u));
    out.push_back(sn_sigma(blk.c2.w, blk.c2.u));
    out.push_back(sn_sigma(blk.sc.w, blk.sc.u));
  }
  return out;
}

#define CMA_INST_DISC(T)                                                     \
  template void sn_power_iterate<T>(const Tensor<T>&, Tensor<T>&, int);      \
  template T sn_sigma<T>(const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> spectral_normalize<T>(const Tensor<T>&, Tensor<T>&,     \
                                           bool);                           \
  template Tensor<T> local_crop<T>(const Tensor<T>&, const CropBox&, int);   \
  template class Discriminator<T>;

CMA_INST_DISC(float)
CMA_INST_DISC(double)

}  // namespace cma
