// SPDX-License-Identifier: Apache-2.0

#include "cma/generator.hpp"

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

template <class T>
ResBlock<T> make_block(Rng& rng, int ci, int co, int stride) {
  ResBlock<T> b;
  b.stride = stride;
  b.c1w = he_conv<T>(rng, co, ci, 3);
  b.c1b = Tensor<T>::zeros({co}, true);
  b.c2w = he_conv<T>(rng, co, co, stride == 2 ? 4 : 3);
  b.c2b = Tensor<T>::zeros({co}, true);
  if (ci != co || stride != 1) {
    b.sw = he_conv<T>(rng, co, ci, stride == 2 ? 2 : 1);
    b.sb = Tensor<T>::zeros({co}, true);
  }
  return b;
}

template <class T>
void collect_block(ParamSet<T>& out, const std::string& p,
                   const ResBlock<T>& b) {
  out.param(p + ".c1w", b.c1w);
  out.param(p + ".c1b", b.c1b);
  out.param(p + ".c2w", b.c2w);
  out.param(p + ".c2b", b.c2b);
  if (b.sw.defined()) {
    out.param(p + ".sw", b.sw);
    out.param(p + ".sb", b.sb);
  }
}

}  // namespace

template <class T>
Tensor<T> reshape_priors(const Tensor<T>& v, int grid, int channels) {
  if (v.rank() != 2)
    throw ShapeError("reshape_priors: expected (N,e), got " +
                     shape_str(v.shape()));
  int N = v.dim(0);
  if (grid * grid != N)
    throw ShapeError("reshape_priors: patch count " + std::to_string(N) +
                     " is not a perfect square grid");
  if (v.dim(1) != channels)
    throw ShapeError("reshape_priors: channel mismatch");
  return reshape(transpose2d(v), {channels, grid, grid});
}

template <class T>
Tensor<T> compose_output(const Tensor<T>& restored, const Tensor<T>& corrupted,
                         const Tensor<T>& mask) {
  if (restored.shape() != corrupted.shape())
    throw ShapeError("compose_output: image shape mismatch " +
                     shape_str(restored.shape()) + " vs " +
                     shape_str(corrupted.shape()));
  int r = restored.rank();
  if (mask.rank() != 2 || mask.dim(0) != restored.dim(r - 2) ||
      mask.dim(1) != restored.dim(r - 1))
    throw ShapeError("compose_output: mask " + shape_str(mask.shape()) +
                     " does not match image " + shape_str(restored.shape()));
  Tensor<T> inv = Tensor<T>::zeros(mask.shape());
  for (int64_t i = 0; i < mask.numel(); ++i)
    inv.data()[i] = T(1) - mask.data()[i];
  return add(mul(restored, mask), mul(corrupted, inv));
}

template <class T>
Generator<T>::Generator(const GeneratorConfig& cfg, uint64_t seed)
    : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0x9e4));
  int ci = cfg_.prior_channels;
  const int down_strides[5] = {1, 2, 1, 2, 1};
  for (int i = 0; i < 5; ++i) {
    down_[size_t(i)] = make_block<T>(rng, ci, cfg_.down_widths[size_t(i)],
                                     down_strides[i]);
    ci = cfg_.down_widths[size_t(i)];
  }
  skip_w_ = he_conv<T>(rng, cfg_.skip_channels, cfg_.prior_channels, 1);
  skip_b_ = Tensor<T>::zeros({cfg_.skip_channels}, true);
  int res = cfg_.grid / 4;
  for (int i = 0; i < 5; ++i) {
    if (res < cfg_.image_size) res *= 2;
    int in = ci + (res == cfg_.grid ? cfg_.skip_channels : 0);
    up_[size_t(i)] = make_block<T>(rng, in, cfg_.up_widths[size_t(i)], 1);
    ci = cfg_.up_widths[size_t(i)];
  }
  final_w_ = he_conv<T>(rng, cfg_.out_channels, ci, 1);
  final_b_ = Tensor<T>::zeros({cfg_.out_channels}, true);
}

template <class T>
Tensor<T> Generator<T>::downsample(const Tensor<T>& prior) const {
  bool batched = prior.rank() == 4;
  if (!batched && prior.rank() != 3)
    throw ShapeError("downsample: expected (e,g,g) or (B,e,g,g), got " +
                     shape_str(prior.shape()));
  int g = prior.dim(batched ? 2 : 1);
  if (g != cfg_.grid || prior.dim(batched ? 1 : 0) != cfg_.prior_channels ||
      prior.dim(batched ? 3 : 2) != g)
    throw ShapeError("downsample: prior " + shape_str(prior.shape()) +
                     " does not match configured grid");
  Tensor<T> x = prior;
  for (const auto& b : down_) x = b.forward(x);
  return x;
}

template <class T>
Tensor<T> Generator<T>::upsample(const Tensor<T>& v,
                                 const Tensor<T>& prior) const {
  bool batched = v.rank() == 4;
  if (!batched && v.rank() != 3)
    throw ShapeError("upsample: bad input rank");
  if (prior.rank() != v.rank())
    throw ShapeError("upsample: prior/deep-representation rank mismatch");
  Tensor<T> x = v;
  int res = cfg_.grid / 4;
  int chan_axis = batched ? 1 : 0;
  for (int i = 0; i < 5; ++i) {
    if (res < cfg_.image_size) {
      x = upsample_nearest2x(x);
      res *= 2;
    }
    if (res == cfg_.grid) {
      Tensor<T> proj = conv2d(prior, skip_w_, skip_b_, 1, 0);
      x = concat<T>({x, proj}, chan_axis);
    }
    x = up_[size_t(i)].forward(x);
  }
  return sigmoid(conv2d(x, final_w_, final_b_, 1, 0));
}

template <class T>
void Generator<T>::collect(ParamSet<T>& out, const std::string& prefix) const {
  for (int i = 0; i < 5; ++i)
    collect_block(out, prefix + ".down" + std::to_string(i), down_[size_t(i)]);
  out.param(prefix + ".skip_w", skip_w_);
  out.param(prefix + ".skip_b", skip_b_);
  for (int i = 0; i < 5; ++i)
    collect_block(out, prefix + ".up" + std::to_string(i), up_[size_t(i)]);
  out.param(prefix + ".final_w", final_w_);
  out.param(prefix + ".final_b", final_b_);
}

#define CMA_INST_GEN(T)                                                      \
  template Tensor<T> reshape_priors<T>(const Tensor<T>&, int, int);          \
  template Tensor<T> compose_output<T>(const Tensor<T>&, const Tensor<T>&,   \
                                       const Tensor<T>&);                    \
  template class Generator<T>;

CMA_INST_GEN(float)
CMA_INST_GEN(double)

}  // namespace cma
