// SPDX-License-Identifier: Apache-2.0
//
// Procedural captioned-shapes dataset, whitespace tokenizer over a closed
// vocabulary, patch slicing, and the two mask protocols (center square /
// object-box union).
#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "cma/tensor.hpp"

namespace cma {

struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;

  std::vector<std::string> words;
  std::unordered_map<std::string, int> index;

  int size() const { return int(words.size()); }
  int id_of(const std::string& w) const {
    auto it = index.find(w);
    return it == index.end() ? kUnk : it->second;
  }

  // fixed 64-word vocabulary covering every caption the synthesizer emits
  static const Vocab& builtin();
};

// lowercase whitespace split, [CLS] prepended, [UNK] for OOV, truncated and
// [PAD]-filled to exactly max_len
std::vector<int> tokenize(const std::string& text, const Vocab& vocab,
                          int max_len);

// half-open pixel box: x0 <= x < x1, y0 <= y < y1
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

struct Mask {
  int h = 0, w = 0;
  std::vector<float> grid;  // 1 = missing

  double area_fraction() const {
    double s = 0;
    for (float v : grid) s += v;
    return s / (double(h) * w);
  }
  int64_t area() const {
    int64_t s = 0;
    for (float v : grid) s += v > 0.5f ? 1 : 0;
    return s;
  }
};

// centered square of side round(sqrt(fraction*H*W)); for odd H-s the extra
// row/column goes below/right
Mask center_mask(int H, int W, double area_fraction = 0.5);

// union of the boxes; empty box list is an error
Mask object_mask(int H, int W, const std::vector<Box>& boxes);

// masked pixels become neutral gray 0.5
Tensor<float> apply_mask(const Tensor<float>& image, const Mask& mask);

// per-patch mask: a patch counts as masked iff more than half of its pixels
// are masked
std::vector<bool> patch_mask_of(const Mask& mask, int patch);

// (C,H,W) -> (N, P*P*C), row-major patch order, (py,px,c) within a row
Tensor<float> patchify(const Tensor<float>& image, int patch);
Tensor<float> unpatchify(const Tensor<float>& patches, int patch, int channels,
                         int H, int W);

struct SynthConfig {
  int image_size = 64;  // 32 or 64
  int channels = 3;
  int patch = 8;
  int max_text_len = 16;
  int min_shapes = 1, max_shapes = 3;

  void validate() const {
    if (image_size != 32 && image_size != 64)
      throw ConfigError("synth: image size must be 32 or 64");
    if (patch <= 0 || image_size % patch != 0)
      throw ConfigError("synth: image size " + std::to_string(image_size) +
                        " not divisible by patch " + std::to_string(patch));
    if (min_shapes < 1 || max_shapes > 3 || min_shapes > max_shapes)
      throw ConfigError("synth: shape count must lie in [1,3]");
    if (max_text_len < 2) throw ConfigError("synth: text length too small");
  }
};

struct Sample {
  Tensor<float> image;  // (C,H,W) in [0,1]
  std::string caption;
  std::vector<int> tokens;  // tokenized caption, length max_text_len
  std::vector<Box> boxes;
  uint64_t seed = 0;
};

// deterministic in seed: 1-3 colored shapes (square/circle/triangle, 8
// colors) on a textured background, template caption naming color, kind and
// coarse 3x3 location of each shape
Sample synth_sample(uint64_t seed, const SynthConfig& cfg);

// line format: seed <tab> caption <tab> x0,y0,x1,y1;x0,y0,x1,y1
void write_manifest(const std::string& path, const std::vector<Sample>& set);

}  // namespace cma
