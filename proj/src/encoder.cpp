// SPDX-License-Identifier: Apache-2.0

#include "cma/encoder.hpp"

#include <cmath>

namespace cma {
namespace {

template <class T>
Tensor<T> init_normal(Rng& rng, Shape shape, double stddev) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = T(rng.normal(0.0, stddev));
  return t;
}

template <class T>
Tensor<T> init_const(Shape shape, T v) {
  return Tensor<T>::filled(std::move(shape), v, /*requires_grad=*/true);
}

}  // namespace

template <class T>
VlEncoder<T>::VlEncoder(const EncoderConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0xe11c));
  int e = cfg_.hidden;
  const double emb_std = 0.02;
  word_emb_ = init_normal<T>(rng, {cfg_.vocab_size, e}, emb_std);
  pos_text_ = init_normal<T>(rng, {cfg_.max_text_len, e}, emb_std);
  pos_img_ = init_normal<T>(rng, {cfg_.patch_count(), e}, emb_std);
  type_emb_ = init_normal<T>(rng, {2, e}, emb_std);
  proj_w_ = init_normal<T>(rng, {cfg_.patch_dim(), e},
                           1.0 / std::sqrt(double(cfg_.patch_dim())));
  proj_b_ = init_const<T>({e}, T(0));
  vmask_ = init_normal<T>(rng, {e}, emb_std);
  double wstd = 1.0 / std::sqrt(double(e));
  layers_.resize(size_t(cfg_.layers));
  for (auto& l : layers_) {
    l.ln1_g = init_const<T>({e}, T(1));
    l.ln1_b = init_const<T>({e}, T(0));
    l.wq = init_normal<T>(rng, {e, e}, wstd);
    l.bq = init_const<T>({e}, T(0));
    l.wk = init_normal<T>(rng, {e, e}, wstd);
    l.bk = init_const<T>({e}, T(0));
    l.wv = init_normal<T>(rng, {e, e}, wstd);
    l.bv = init_const<T>({e}, T(0));
    l.wo = init_normal<T>(rng, {e, e}, wstd);
    l.bo = init_const<T>({e}, T(0));
    l.ln2_g = init_const<T>({e}, T(1));
    l.ln2_b = init_const<T>({e}, T(0));
    l.w1 = init_normal<T>(rng, {e, cfg_.ffn}, wstd);
    l.b1 = init_const<T>({cfg_.ffn}, T(0));
    l.w2 = init_normal<T>(rng, {cfg_.ffn, e},
                          1.0 / std::sqrt(double(cfg_.ffn)));
    l.b2 = init_const<T>({e}, T(0));
  }
}

template <class T>
Tensor<T> VlEncoder<T>::embed_text(const std::vector<int>& ids) const {
  int L = int(ids.size());
  if (L < 1 || L > cfg_.max_text_len)
    throw ShapeError("embed_text: got " + std::to_string(L) +
                     " ids, max is " + std::to_string(cfg_.max_text_len));
  for (int id : ids)
    if (id < 0 || id >= cfg_.vocab_size)
      throw ShapeError("embed_text: token id " + std::to_string(id) +
                       " outside vocab of size " +
                       std::to_string(cfg_.vocab_size));
  Tensor<T> tok = embedding_lookup(word_emb_, ids);
  Tensor<T> pos = slice(pos_text_, 0, 0, L);
  Tensor<T> type = reshape(slice(type_emb_, 0, 0, 1), {cfg_.hidden});
  return add(add(tok, pos), type);
}

template <class T>
Tensor<T> VlEncoder<T>::embed_patches(const Tensor<T>& patches,
                                      const std::vector<bool>& patch_mask) const {
  int N = cfg_.patch_count();
  if (patches.rank() != 2 || patches.dim(0) != N ||
      patches.dim(1) != cfg_.patch_dim())
    throw ShapeError("embed_patches: expected (" + std::to_string(N) + "," +
                     std::to_string(cfg_.patch_dim()) + "), got " +
                     shape_str(patches.shape()));
  if (int(patch_mask.size()) != N)
    throw ShapeError("embed_patches: patch mask length mismatch");
  Tensor<T> proj = add(matmul(patches, proj_w_), proj_b_);
  // blend projected rows with the learned mask token: a row is either fully
  // kept or fully replaced
  bool any_masked = false;
  for (bool m : patch_mask) any_masked = any_masked || m;
  Tensor<T> mixed = proj;
  if (any_masked) {
    Tensor<T> keep = Tensor<T>::zeros({N, 1});
    Tensor<T> drop = Tensor<T>::zeros({N, 1});
    for (int i = 0; i < N; ++i) {
      keep.data()[i] = patch_mask[size_t(i)] ? T(0) : T(1);
      drop.data()[i] = patch_mask[size_t(i)] ? T(1) : T(0);
    }
    Tensor<T> vm = reshape(vmask_, {1, cfg_.hidden});
    mixed = add(mul(proj, keep), mul(vm, drop));
  }
  Tensor<T> type = reshape(slice(type_emb_, 0, 1, 1), {cfg_.hidden});
  return add(add(mixed, pos_img_), type);
}

template <class T>
EncoderOutput<T> VlEncoder<T>::encode(const Tensor<T>& tbar,
                                      const Tensor<T>& vbar) const {
  if (tbar.rank() != 2 || vbar.rank() != 2 ||
      tbar.dim(1) != cfg_.hidden || vbar.dim(1) != cfg_.hidden)
    throw ShapeError("encode: expected (L,e) and (N,e), got " +
                     shape_str(tbar.shape()) + " and " +
                     shape_str(vbar.shape()));
  int L = tbar.dim(0);
  int N = vbar.dim(0);
  int S = L + N;
  int e = cfg_.hidden;
  int h = cfg_.heads;
  int dh = e / h;
  T eps = T(cfg_.ln_eps);
  T scale = T(1.0 / std::sqrt(double(dh)));

  Tensor<T> x = concat<T>({tbar, vbar}, 0);
  for (size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    try {
      Tensor<T> xn = layer_norm(x, l.ln1_g, l.ln1_b, eps);
      Tensor<T> q = add(matmul(xn, l.wq), l.bq);
      Tensor<T> k = add(matmul(xn, l.wk), l.bk);
      Tensor<T> v = add(matmul(xn, l.wv), l.bv);
      auto heads_of = [&](const Tensor<T>& m) {
        return permute(reshape(m, {S, h, dh}), {1, 0, 2});  // (h,S,dh)
      };
      Tensor<T> q3 = heads_of(q), k3 = heads_of(k), v3 = heads_of(v);
      Tensor<T> scores =
          mul_scalar(matmul(q3, permute(k3, {0, 2, 1})), scale);  // (h,S,S)
      Tensor<T> probs = softmax(scores, 2);
      if (attn_sink_) attn_sink_->push_back(probs.detach());
      Tensor<T> ctx = matmul(probs, v3);                      // (h,S,dh)
      Tensor<T> merged = reshape(permute(ctx, {1, 0, 2}), {S, e});
      x = add(x, add(matmul(merged, l.wo), l.bo));

      Tensor<T> xn2 = layer_norm(x, l.ln2_g, l.ln2_b, eps);
      Tensor<T> hdn = gelu(add(matmul(xn2, l.w1), l.b1));
      x = add(x, add(matmul(hdn, l.w2), l.b2));
    } catch (const NumericError& err) {
      throw NumericError("encoder layer " + std::to_string(li) + ": " +
                         err.what());
    }
  }
  EncoderOutput<T> out;
  out.text = slice(x, 0, 0, L);
  out.visual = slice(x, 0, L, N);
  return out;
}

template <class T>
EncoderOutput<T> VlEncoder<T>::forward_batch(
    const std::vector<std::vector<int>>& ids, const Tensor<T>& patches,
    const std::vector<std::vector<bool>>& patch_masks) const {
  int B = int(ids.size());
  if (B < 1 || int(patch_masks.size()) != B)
    throw ShapeError("forward_batch: inconsistent batch");
  int L = int(ids[0].size());
  int N = cfg_.patch_count();
  int e = cfg_.hidden;
  if (patches.rank() != 3 || patches.dim(0) != B || patches.dim(1) != N ||
      patches.dim(2) != cfg_.patch_dim())
    throw ShapeError("forward_batch: expected (B,N,P*P*C) patches, got " +
                     shape_str(patches.shape()));
  std::vector<int> flat_ids;
  flat_ids.reserve(size_t(B) * L);
  for (const auto& row : ids) {
    if (int(row.size()) != L)
      throw ShapeError("forward_batch: ragged token rows");
    for (int id : row) flat_ids.push_back(id);
  }
  for (int id : flat_ids)
    if (id < 0 || id >= cfg_.vocab_size)
      throw ShapeError("forward_batch: token id out of range");

  Tensor<T> type_t = reshape(slice(type_emb_, 0, 0, 1), {e});
  Tensor<T> type_v = reshape(slice(type_emb_, 0, 1, 1), {e});

  Tensor<T> tok = reshape(embedding_lookup(word_emb_, flat_ids), {B, L, e});
  Tensor<T> pos = slice(pos_text_, 0, 0, L);
  Tensor<T> tbar = add(add(tok, pos), type_t);

  Tensor<T> flat_p = reshape(patches, {B * N, cfg_.patch_dim()});
  Tensor<T> proj = add(matmul(flat_p, proj_w_), proj_b_);
  bool any_masked = false;
  for (const auto& pm : patch_masks) {
    if (int(pm.size()) != N)
      throw ShapeError("forward_batch: patch mask length mismatch");
    for (bool m : pm) any_masked = any_masked || m;
  }
  if (any_masked) {
    Tensor<T> keep = Tensor<T>::zeros({B * N, 1});
    Tensor<T> drop = Tensor<T>::zeros({B * N, 1});
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < N; ++i) {
        bool m = patch_masks[size_t(b)][size_t(i)];
        keep.data()[int64_t(b) * N + i] = m ? T(0) : T(1);
        drop.data()[int64_t(b) * N + i] = m ? T(1) : T(0);
      }
    Tensor<T> vm = reshape(vmask_, {1, e});
    proj = add(mul(proj, keep), mul(vm, drop));
  }
  Tensor<T> vbar =
      add(add(reshape(proj, {B, N, e}), pos_img_), type_v);

  int S = L + N;
  int h = cfg_.heads;
  int dh = e / h;
  T eps = T(cfg_.ln_eps);
  T scale = T(1.0 / std::sqrt(double(dh)));
  Tensor<T> x = concat<T>({tbar, vbar}, 1);  // (B,S,e)
  for (size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    try {
      Tensor<T> xn = layer_norm(x, l.ln1_g, l.ln1_b, eps);
      Tensor<T> xn2d = reshape(xn, {B * S, e});
      auto heads_of = [&](const Tensor<T>& w, const Tensor<T>& b) {
        Tensor<T> y = add(matmul(xn2d, w), b);
        return reshape(permute(reshape(y, {B, S, h, dh}), {0, 2, 1, 3}),
                       {B * h, S, dh});
      };
      Tensor<T> q3 = heads_of(l.wq, l.bq);
      Tensor<T> k3 = heads_of(l.wk, l.bk);
      Tensor<T> v3 = heads_of(l.wv, l.bv);
      Tensor<T> scores =
          mul_scalar(matmul(q3, permute(k3, {0, 2, 1})), scale);
      Tensor<T> probs = softmax(scores, 2);
      if (attn_sink_) attn_sink_->push_back(probs.detach());
      Tensor<T> ctx = matmul(probs, v3);  // (B*h,S,dh)
      Tensor<T> merged = reshape(
          permute(reshape(ctx, {B, h, S, dh}), {0, 2, 1, 3}), {B * S, e});
      Tensor<T> attn_out = add(matmul(merged, l.wo), l.bo);
      x = add(x, reshape(attn_out, {B, S, e}));

      Tensor<T> xm = layer_norm(x, l.ln2_g, l.ln2_b, eps);
      Tensor<T> hdn = gelu(add(matmul(reshape(xm, {B * S, e}), l.w1), l.b1));
      Tensor<T> ffn = add(matmul(hdn, l.w2), l.b2);
      x = add(x, reshape(ffn, {B, S, e}));
    } catch (const NumericError& err) {
      throw NumericError("encoder layer " + std::to_string(li) + ": " +
                         err.what());
    }
  }
  EncoderOutput<T> out;
  out.text = slice(x, 1, 0, L);
  out.visual = slice(x, 1, L, N);
  return out;
}

template <class T>
void VlEncoder<T>::collect(ParamSet<T>& out, const std::string& prefix) const {
  out.param(prefix + ".word_emb", word_emb_);
  out.param(prefix + ".pos_text", pos_text_);
  out.param(prefix + ".pos_img", pos_img_);
  out.param(prefix + ".type_emb", type_emb_);
  out.param(prefix + ".proj_w", proj_w_);
  out.param(prefix + ".proj_b", proj_b_);
  out.param(prefix + ".vmask", vmask_);
  for (size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    std::string p = prefix + ".layer" + std::to_string(i);
    out.param(p + ".ln1_g", l.ln1_g);
    out.param(p + ".ln1_b", l.ln1_b);
    out.param(p + ".wq", l.wq);
    out.param(p + ".bq", l.bq);
    out.param(p + ".wk", l.wk);
    out.param(p + ".bk", l.bk);
    out.param(p + ".wv", l.wv);
    out.param(p + ".bv", l.bv);
    out.param(p + ".wo", l.wo);
    out.param(p + ".bo", l.bo);
    out.param(p + ".ln2_g", l.ln2_g);
    out.param(p + ".ln2_b", l.ln2_b);
    out.param(p + ".w1", l.w1);
    out.param(p + ".b1", l.b1);
    out.param(p + ".w2", l.w2);
    out.param(p + ".b2", l.b2);
  }
}

template class VlEncoder<float>;
template class VlEncoder<double>;

}  // namespace cma
