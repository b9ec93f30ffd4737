// SPDX-License-Identifier: Apache-2.0
//
// Two-stage CNN image generator: a 5-block residual downsampler over the
// visual-prior grid, then a 5-block residual upsampler that re-injects the
// prior grid through a skip connection and emits a sigmoid image.
#pragma once

#include <array>
#include <vector>

#include "cma/ops.hpp"
#include "cma/params.hpp"

namespace cma {

struct GeneratorConfig {
  int prior_channels = 128;  // encoder hidden size
  int grid = 8;              // sqrt(N)
  std::array<int, 5> down_widths = {24, 48, 96, 128, 128};
  std::array<int, 5> up_widths = {128, 128, 96, 48, 24};
  int out_channels = 3;
  int image_size = 64;
  int skip_channels = 64;  // width of the 1x1-projected prior at injection

  void validate() const {
    if (grid < 4 || grid % 4 != 0)
      throw ConfigError("generator: prior grid " + std::to_string(grid) +
                        " must be divisible by 4 (two stride-2 stages)");
    for (int w : down_widths)
      if (w <= 0) throw ConfigError("generator: bad down width");
    for (int w : up_widths)
      if (w <= 0) throw ConfigError("generator: bad up width");
    if (out_channels <= 0 || skip_channels <= 0 || prior_channels <= 0)
      throw ConfigError("generator: bad channel config");
    // the upsampler doubles from grid/4 at most 5 times and must land on the
    // image size, passing through the prior grid resolution for the skip
    int res = grid / 4;
    bool hit_image = false, hit_grid = false;
    for (int i = 0; i < 5; ++i) {
      if (res < image_size) res *= 2;
      if (res == grid) hit_grid = true;
      if (res == image_size) hit_image = true;
    }
    if (!hit_image)
      throw ConfigError("generator: cannot reach image size " +
                        std::to_string(image_size) + " from grid " +
                        std::to_string(grid) + " in 5 upsample stages");
    if (!hit_grid)
      throw ConfigError(
          "generator: no upsample stage matches the prior grid resolution");
  }
};

// Residual conv block. Stride-2 blocks downsample with a 4x4 pad-1 conv and
// a 2x2 shortcut so output extents stay integral on even sizes; stride-1
// blocks use 3x3 convs and a 1x1 (or identity) shortcut.
template <class T>
struct ResBlock {
  Tensor<T> c1w, c1b, c2w, c2b;
  Tensor<T> sw, sb;  // shortcut projection; undefined when identity
  int stride = 1;

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> h = relu(conv2d(x, c1w, c1b, 1, 1));
    h = conv2d(h, c2w, c2b, stride, 1);
    Tensor<T> s = sw.defined() ? conv2d(x, sw, sb, stride, 0) : x;
    return relu(add(h, s));
  }
};

// (N, e) visual priors onto the (e, g, g) patch grid; row i maps to cell
// (i / g, i % g). Differentiable (transpose + reshape).
template <class T>
Tensor<T> reshape_priors(const Tensor<T>& v, int grid, int channels);

// mask-blend: out = mask*restored + (1-mask)*corrupted, mask (H,W) in {0,1}
template <class T>
Tensor<T> compose_output(const Tensor<T>& restored, const Tensor<T>& corrupted,
                         const Tensor<T>& mask);

template <class T>
class Generator {
 public:
  Generator(const GeneratorConfig& cfg, uint64_t seed);

  // (e,g,g) or (B,e,g,g) -> deep representation at grid/4 resolution
  Tensor<T> downsample(const Tensor<T>& prior) const;

  // deep representation + prior grid -> image in (0,1), (C,H,W)/(B,C,H,W)
  Tensor<T> upsample(const Tensor<T>& v, const Tensor<T>& prior) const;

  Tensor<T> forward(const Tensor<T>& prior) const {
    return upsample(downsample(prior), prior);
  }

  void collect(ParamSet<T>& out, const std::string& prefix) const;
  const GeneratorConfig& config() const { return cfg_; }

 private:
  GeneratorConfig cfg_;
  std::array<ResBlock<T>, 5> down_;
  std::array<ResBlock<T>, 5> up_;
  Tensor<T> skip_w_, skip_b_;    // 1x1 prior projection
  Tensor<T> final_w_, final_b_;  // 1x1 to out_channels
};

using GeneratorF = Generator<float>;

}  // namespace cma
