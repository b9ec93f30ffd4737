// SPDX-License-Identifier: Apache-2.0
//
// Joint vision-and-language transformer encoder. Text tokens and image
// patches are embedded into a shared width, concatenated, and run through a
// pre-norm self-attention stack so the two modalities attend to each other.
// The output splits back into text representations and visual priors.
#pragma once

#include <vector>

#include "cma/ops.hpp"
#include "cma/params.hpp"

namespace cma {

struct EncoderConfig {
  int hidden = 128;        // e
  int layers = 4;
  int heads = 4;
  int ffn = 512;
  int patch = 8;           // P
  int image_size = 64;     // H == W
  int channels = 3;
  int max_text_len = 16;   // L
  int vocab_size = 64;
  double ln_eps = 1e-5;

  int patch_grid() const { return image_size / patch; }
  int patch_count() const { return patch_grid() * patch_grid(); }
  int patch_dim() const { return patch * patch * channels; }

  void validate() const {
    if (hidden <= 0 || layers < 0 || heads <= 0 || ffn <= 0)
      throw ConfigError("encoder: non-positive dimension");
    if (hidden % heads != 0)
      throw ConfigError("encoder: hidden size " + std::to_string(hidden) +
                        " not divisible by heads " + std::to_string(heads));
    if (image_size % patch != 0)
      throw ConfigError("encoder: image size " + std::to_string(image_size) +
                        " not divisible by patch " + std::to_string(patch));
    if (max_text_len < 1 || vocab_size < 4)
      throw ConfigError("encoder: bad text config");
  }
};

template <class T>
struct EncoderOutput {
  Tensor<T> text;    // (L, e)
  Tensor<T> visual;  // (N, e) reconstructed visual priors
};

template <class T>
class VlEncoder {
 public:
  VlEncoder(const EncoderConfig& cfg, uint64_t seed);

  // token ids -> (L, e); lookup + position + text-type embedding
  Tensor<T> embed_text(const std::vector<int>& ids) const;

  // flattened patches (N, P*P*C) -> (N, e); masked rows are replaced by the
  // learned [Vmask] vector after projection, then position/type added
  Tensor<T> embed_patches(const Tensor<T>& patches,
                          const std::vector<bool>& patch_mask) const;

  EncoderOutput<T> encode(const Tensor<T>& tbar, const Tensor<T>& vbar) const;

  EncoderOutput<T> forward(const std::vector<int>& ids,
                           const Tensor<T>& patches,
                           const std::vector<bool>& patch_mask) const {
    return encode(embed_text(ids), embed_patches(patches, patch_mask));
  }

  // Batched forward over B samples: ids B x L (uniform L), patches
  // (B,N,P*P*C). Row-wise math is identical to the per-sample path; this
  // exists so a training batch runs through B-times-larger GEMMs instead of
  // B separate passes. Outputs (B,L,e) and (B,N,e).
  EncoderOutput<T> forward_batch(
      const std::vector<std::vector<int>>& ids, const Tensor<T>& patches,
      const std::vector<std::vector<bool>>& patch_masks) const;

  void collect(ParamSet<T>& out, const std::string& prefix) const;

  const EncoderConfig& config() const { return cfg_; }
  Tensor<T>& vmask() { return vmask_; }
  void set_vmask(const Tensor<T>& t) { vmask_ = t; }

  // when set, encode() appends each layer's attention probabilities
  void capture_attention(std::vector<Tensor<T>>* sink) { attn_sink_ = sink; }

 private:
  struct Layer {
    Tensor<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ln2_g, ln2_b, w1, b1, w2, b2;
  };

  EncoderConfig cfg_;
  Tensor<T> word_emb_;   // (V, e)
  Tensor<T> pos_text_;   // (L, e)
  Tensor<T> pos_img_;    // (N, e)
  Tensor<T> type_emb_;   // (2, e): row 0 text, row 1 image
  Tensor<T> proj_w_;     // (P*P*C, e)
  Tensor<T> proj_b_;     // (e)
  Tensor<T> vmask_;      // (e)
  std::vector<Layer> layers_;
  std::vector<Tensor<T>>* attn_sink_ = nullptr;
};

using VlEncoderF = VlEncoder<float>;

}  // namespace cma
