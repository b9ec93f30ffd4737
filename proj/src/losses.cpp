// SPDX-License-Identifier: Apache-2.0

#include "cma/losses.hpp"

#include <cstdio>

namespace cma {

std::string LossRecord::csv_row(int64_t step) const {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,"
                "%.10g",
                (long long)step, cmad, isd, wpa, l1, g_adv_g, l_adv_g, g_adv_d,
                l_adv_d, total_g, total_d);
  return buf;
}

double total_g(const LossRecord& r, const LossWeights& w) {
  return w.w_cmad() * r.cmad + w.w_isd() * r.isd + w.alpha * r.wpa +
         w.beta * r.l1 + w.w_gadv() * r.g_adv_g + w.w_ladv() * r.l_adv_g;
}

double total_d(const LossRecord& r, const LossWeights& w) {
  return w.w_gadv() * r.g_adv_d + w.w_ladv() * r.l_adv_d;
}

template <class T>
Tensor<T> correlation_map(const Tensor<T>& text, const Tensor<T>& visual) {
  return cosine_rows(text, visual);
}

template <class T>
Tensor<T> cmad_loss(const Tensor<T>& map_student,
                    const Tensor<T>& map_teacher) {
  if (map_student.shape() != map_teacher.shape())
    throw ShapeError("cmad_loss: map shapes differ, " +
                     shape_str(map_student.shape()) + " vs " +
                     shape_str(map_teacher.shape()));
  Tensor<T> target = map_teacher.detach();
  Tensor<T> d = sub(map_student, target);
  return mean(mul(d, d));
}

template <class T>
Tensor<T> isd_loss(const Tensor<T>& visual_teacher,
                   const Tensor<T>& visual_student) {
  if (visual_teacher.shape() != visual_student.shape() ||
      visual_teacher.rank() != 2)
    throw ShapeError("isd_loss: expected matching (N,e) inputs");
  int N = visual_teacher.dim(0);
  Tensor<T> p_teacher = softmax(visual_teacher.detach(), 1);
  Tensor<T> p_student = softmax(visual_student, 1);
  Tensor<T> kl_terms =
      mul(p_teacher, sub(log_clamped(p_teacher), log_clamped(p_student)));
  return mul_scalar(sum(kl_terms), T(1) / T(N));
}

template <class T>
Tensor<T> wpa_loss(const Tensor<T>& visual, const Tensor<T>& text,
                   int n_tokens, const SinkhornOptions& opt,
                   SinkhornResult* diag) {
  if (visual.rank() != 2 || text.rank() != 2 ||
      visual.dim(1) != text.dim(1))
    throw ShapeError("wpa_loss: expected (N,e) and (L,e)");
  if (n_tokens < 1 || n_tokens > text.dim(0))
    throw ShapeError("wpa_loss: bad non-pad token count");
  Tensor<T> kept =
      n_tokens == text.dim(0) ? text : slice(text, 0, 0, n_tokens);
  int N = visual.dim(0), L = n_tokens;
  // cost 1 - cosine, differentiable
  Tensor<T> cost_t = add_scalar(neg(cosine_rows(visual, kept)), T(1));

  std::vector<double> cost(size_t(N) * L);
  for (int64_t i = 0; i < cost_t.numel(); ++i)
    cost[size_t(i)] = double(cost_t.data()[i]);
  std::vector<double> a(size_t(N), 1.0 / N), b(size_t(L), 1.0 / L);
  SinkhornResult res = sinkhorn(cost, N, L, a, b, opt);
  if (diag) *diag = res;

  Tensor<T> plan = Tensor<T>::zeros({N, L});
  for (size_t i = 0; i < res.plan.size(); ++i)
    plan.data()[i] = T(res.plan[i]);
  return sum(mul(cost_t, plan));
}

template <class T>
Tensor<T> l1_loss(const Tensor<T>& restored, const Tensor<T>& ground_truth) {
  if (restored.shape() != ground_truth.shape())
    throw ShapeError("l1_loss: shape mismatch " +
                     shape_str(restored.shape()) + " vs " +
                     shape_str(ground_truth.shape()));
  return l1_distance(restored, ground_truth);
}

template <class T>
Tensor<T> hinge_g(const Tensor<T>& fake_scores) {
  return mean(neg(fake_scores));
}

template <class T>
Tensor<T> hinge_d(const Tensor<T>& real_scores, const Tensor<T>& fake_scores) {
  Tensor<T> real_term = mean(relu(add_scalar(neg(real_scores), T(1))));
  Tensor<T> fake_term = mean(relu(add_scalar(fake_scores, T(1))));
  return add(real_term, fake_term);
}

#define CMA_INST_LOSSES(T)                                                    \
  template Tensor<T> correlation_map<T>(const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> cmad_loss<T>(const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> isd_loss<T>(const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> wpa_loss<T>(const Tensor<T>&, const Tensor<T>&, int,    \
                                 const SinkhornOptions&, SinkhornResult*);   \
  template Tensor<T> l1_loss<T>(const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> hinge_g<T>(const Tensor<T>&);                           \
  template Tensor<T> hinge_d<T>(const Tensor<T>&, const Tensor<T>&);

CMA_INST_LOSSES(float)
CMA_INST_LOSSES(double)

}  // namespace cma
