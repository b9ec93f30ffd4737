// SPDX-License-Identifier: Apache-2.0
//
// Spectrally-normalized residual discriminator: 5 stride-2 conv blocks,
// global average pool, fully connected scalar head. Every conv weight is
// divided by its estimated top singular value (one power-iteration step per
// training forward, persistent left singular vector u).
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cma/ops.hpp"
#include "cma/params.hpp"

namespace cma {

struct DiscriminatorConfig {
  int input_size = 64;
  int in_channels = 3;
  std::array<int, 5> widths = {24, 32, 48, 64, 64};
  // keep the whole map 1-Lipschitz: normalize the FC head like the convs
  // and merge residual branches by averaging instead of adding
  bool sn_fc = true;
  bool avg_residual = true;

  void validate() const {
    if (input_size < 32 || (input_size & (input_size - 1)) != 0)
      throw ConfigError(
          "discriminator: input size must be a power of two >= 32");
    for (int w : widths)
      if (w <= 0) throw ConfigError("discriminator: bad width");
  }
};

// One power-iteration step on W viewed as (rows, cols) = (Co, rest):
// v = normalize(W^T u), u' = normalize(W v). u (shape {Co}) is updated in
// place; it is persistent mutable state, which confines the discriminator
// forward to the training thread.
template <class T>
void sn_power_iterate(const Tensor<T>& w, Tensor<T>& u, int steps);

// sigma estimate u^T W v with v = normalize(W^T u); no state change
template <class T>
T sn_sigma(const Tensor<T>& w, const Tensor<T>& u);

// Normalized weight what = w / max(sigma, 1e-8) as a differentiable tape
// expression (u and v enter as constants). With update_u the persistent u
// advances by one power iteration first.
template <class T>
Tensor<T> spectral_normalize(const Tensor<T>& w, Tensor<T>& u, bool update_u);

// Geometry of the local-discriminator crop: tight mask bbox expanded to a
// square and clipped to the image.
struct CropBox {
  int x0 = 0, y0 = 0, side = 0;
};
CropBox square_crop_box(const float* mask, int H, int W);

// Differentiable crop + nearest resize to (out_size, out_size).
template <class T>
Tensor<T> local_crop(const Tensor<T>& image, const CropBox& box, int out_size);

template <class T>
class Discriminator {
 public:
  Discriminator(const DiscriminatorConfig& cfg, uint64_t seed);

  // (C,h,w) -> scalar score, or (B,C,h,w) -> (B) scores. update_sn runs one
  // power iteration per conv (training mode); evaluation passes keep u fixed.
  Tensor<T> forward(const Tensor<T>& x, bool update_sn);

  void collect(ParamSet<T>& out, const std::string& prefix);
  const DiscriminatorConfig& config() const { return cfg_; }

  // test/diagnostic hooks
  void power_iterate(int steps);
  std::vector<T> sigma_estimates() const;

 private:
  struct SnConv {
    Tensor<T> w, b, u;
  };
  struct Block {
    SnConv c1, c2, sc;
  };

  Tensor<T> sn_conv(SnConv& c, const Tensor<T>& x, int stride, int pad,
                    bool update_sn);

  DiscriminatorConfig cfg_;
  std::array<Block, 5> blocks_;
  Tensor<T> fc_w_, fc_b_, fc_u_;
};

using DiscriminatorF = Discriminator<float>;

}  // namespace cma
