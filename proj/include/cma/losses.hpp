// SPDX-License-Identifier: Apache-2.0
//
// The five training objectives and their weighted combinations: cross-modal
// alignment distillation, in-sample distillation, word-patch alignment
// (entropic OT), l1 reconstruction, and global/local hinge adversarial terms.
#pragma once

#include <string>

#include "cma/ops.hpp"
#include "cma/ot.hpp"

namespace cma {

struct LossWeights {
  double lambda = 2.0;  // CMAD and ISD share this weight
  double alpha = 1.0;   // WPA
  double beta = 1.0;    // l1 reconstruction
  double gamma = 0.1;   // both adversarial terms

  // optional split overrides; negative means "use the joint value"
  double lambda_cmad = -1.0, lambda_isd = -1.0;
  double gamma_global = -1.0, gamma_local = -1.0;

  double w_cmad() const { return lambda_cmad >= 0 ? lambda_cmad : lambda; }
  double w_isd() const { return lambda_isd >= 0 ? lambda_isd : lambda; }
  double w_gadv() const { return gamma_global >= 0 ? gamma_global : gamma; }
  double w_ladv() const { return gamma_local >= 0 ? gamma_local : gamma; }

  void validate() const {
    if (lambda < 0 || alpha < 0 || beta < 0 || gamma < 0)
      throw ConfigError("loss weights must be nonnegative");
  }
};

// All eight components of one step plus the weighted totals. Doubles, so the
// combination identities hold to full precision.
struct LossRecord {
  double cmad = 0, isd = 0, wpa = 0, l1 = 0;
  double g_adv_g = 0, l_adv_g = 0, g_adv_d = 0, l_adv_d = 0;
  double total_g = 0, total_d = 0;

  static const char* csv_header() {
    return "step,cmad,isd,wpa,l1,g_adv_g,l_adv_g,g_adv_d,l_adv_d,total_g,"
           "total_d";
  }
  std::string csv_row(int64_t step) const;
};

// total_g = wc*cmad + wi*isd + alpha*wpa + beta*l1 + gg*g_adv_g + gl*l_adv_g,
// evaluated left-to-right; the trainer composes the tape loss in the same
// order so the record satisfies the identity exactly
double total_g(const LossRecord& r, const LossWeights& w);
// total_d = gg*g_adv_d + gl*l_adv_d
double total_d(const LossRecord& r, const LossWeights& w);

// L x N map of cosine similarities between text tokens and image patches
template <class T>
Tensor<T> correlation_map(const Tensor<T>& text, const Tensor<T>& visual);

// mean squared difference between correlation maps; the target map is
// detached so gradient flows only into the student map
template <class T>
Tensor<T> cmad_loss(const Tensor<T>& map_student, const Tensor<T>& map_teacher);

// mean over patches of KL(p_teacher || p_student) with per-row softmax over
// the embedding axis; teacher detached
template <class T>
Tensor<T> isd_loss(const Tensor<T>& visual_teacher,
                   const Tensor<T>& visual_student);

// entropic OT between patch and token representations under uniform
// marginals (pads excluded: the first n_tokens rows of text are real).
// Returns <plan, cost>; the plan is a constant, gradient flows through the
// cost matrix.
template <class T>
Tensor<T> wpa_loss(const Tensor<T>& visual, const Tensor<T>& text,
                   int n_tokens, const SinkhornOptions& opt,
                   SinkhornResult* diag = nullptr);

// mean absolute error between restored and ground-truth images
template <class T>
Tensor<T> l1_loss(const Tensor<T>& restored, const Tensor<T>& ground_truth);

// generator side: mean(-D(fake)); discriminator side:
// mean(relu(1 - D(real))) + mean(relu(1 + D(fake)))
template <class T>
Tensor<T> hinge_g(const Tensor<T>& fake_scores);
template <class T>
Tensor<T> hinge_d(const Tensor<T>& real_scores, const Tensor<T>& fake_scores);

}  // namespace cma
