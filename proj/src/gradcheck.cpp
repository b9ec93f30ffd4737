// SPDX-License-Identifier: Apache-2.0

#include "cma/gradcheck.hpp"

#include <cmath>

#include "cma/common.hpp"

namespace cma {

template <class T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                  const Tensor<T>& x0, T h) {
  check_all_finite(x0, "grad_check input");
  Tensor<T> x = x0.detach();
  x.set_requires_grad(true);

  std::vector<T> analytic;
  {
    TapeFrame<T> frame;
    Tensor<T> y = f(x);
    if (y.numel() != 1)
      throw NumericError("grad_check: f must return a scalar, got " +
                         shape_str(y.shape()));
    Tape<T>::get().backward(y);
    analytic.assign(x.grad_vec().begin(), x.grad_vec().end());
    if (analytic.empty()) analytic.assign(size_t(x.numel()), T(0));
  }

  double worst = 0.0;
  {
    NoGrad<T> ng;
    for (int64_t i = 0; i < x.numel(); ++i) {
      T saved = x.data()[i];
      x.data()[i] = saved + h;
      T up = f(x).item();
      x.data()[i] = saved - h;
      T dn = f(x).item();
      x.data()[i] = saved;
      double numeric = (double(up) - double(dn)) / (2.0 * double(h));
      double a = double(analytic[size_t(i)]);
      double err = std::fabs(a - numeric) /
                   std::max(1e-8, std::fabs(a) + std::fabs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

template <class T>
double grad_check_param(const std::function<Tensor<T>()>& f, Tensor<T> param,
                        T h) {
  std::vector<T> analytic;
  param.zero_grad();
  {
    TapeFrame<T> frame;
    Tensor<T> y = f();
    if (y.numel() != 1)
      throw NumericError("grad_check_param: f must return a scalar");
    Tape<T>::get().backward(y);
    analytic.assign(param.grad_vec().begin(), param.grad_vec().end());
    if (analytic.empty()) analytic.assign(size_t(param.numel()), T(0));
  }
  param.zero_grad();
  double worst = 0.0;
  {
    NoGrad<T> ng;
    for (int64_t i = 0; i < param.numel(); ++i) {
      T saved = param.data()[i];
      param.data()[i] = saved + h;
      T up = f().item();
      param.data()[i] = saved - h;
      T dn = f().item();
      param.data()[i] = saved;
      double numeric = (double(up) - double(dn)) / (2.0 * double(h));
      double a = double(analytic[size_t(i)]);
      double err = std::fabs(a - numeric) /
                   std::max(1e-8, std::fabs(a) + std::fabs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

template double grad_check<float>(
    const std::function<Tensor<float>(const Tensor<float>&)>&,
    const Tensor<float>&, float);
template double grad_check<double>(
    const std::function<Tensor<double>(const Tensor<double>&)>&,
    const Tensor<double>&, double);
template double grad_check_param<float>(
    const std::function<Tensor<float>()>&, Tensor<float>, float);
template double grad_check_param<double>(
    const std::function<Tensor<double>()>&, Tensor<double>, double);

namespace {

using D = double;
using Td = Tensor<double>;

Td rand_t(Rng& rng, Shape s, double lo = -1.5, double hi = 1.5) {
  Td t = Td::zeros(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

using Fn = std::function<Td(const Td&)>;

}  // namespace

std::vector<GradCheckResult> gradcheck_op_battery(uint64_t seed) {
  const double h = 1e-5;
  std::vector<GradCheckResult> out;
  Rng rng(seed);

  auto run = [&](const std::string& name, const Fn& f, const Td& x) {
    double worst = 0.0;
    Td xi = x;
    for (int rep = 0; rep < 10; ++rep) {
      worst = std::max(worst, grad_check<double>(f, xi, h));
      xi = rand_t(rng, x.shape());
    }
    out.push_back({name, worst});
  };

  // weighting tensors are fixed up front so every f is deterministic across
  // the repeated finite-difference evaluations
  Td b_like = rand_t(rng, {3, 4});
  Td w234 = rand_t(rng, {2, 3, 4});
  Td w246 = rand_t(rng, {2, 4, 6});
  Td w157 = rand_t(rng, {1, 5, 7});
  Td w4 = rand_t(rng, {4});
  Td w64 = rand_t(rng, {6, 4});
  Td w43 = rand_t(rng, {4, 3});
  Td w34 = rand_t(rng, {3, 4});
  run("add", [&](const Td& x) { return sum(add(x, b_like)); }, rand_t(rng, {3, 4}));
  run("sub", [&](const Td& x) { return sum(sub(b_like, x)); }, rand_t(rng, {3, 4}));
  run("mul", [&](const Td& x) { return sum(mul(x, b_like)); }, rand_t(rng, {3, 4}));
  run("mul_broadcast", [&](const Td& x) { return sum(mul(w234, x)); },
      rand_t(rng, {4}));
  run("div", [&](const Td& x) { return sum(div(b_like, x)); },
      rand_t(rng, {3, 4}, 0.5, 2.0));
  run("neg", [&](const Td& x) { return sum(neg(x)); }, rand_t(rng, {5}));
  Td mm_b = rand_t(rng, {4, 3});
  run("matmul", [&](const Td& x) { return sum(matmul(x, mm_b)); }, rand_t(rng, {2, 4}));
  run("matmul_rhs", [&](const Td& x) { return sum(matmul(mm_b, x)); }, rand_t(rng, {3, 5}));
  Td cw = rand_t(rng, {2, 3, 3, 3}, -0.5, 0.5);
  Td cb = rand_t(rng, {2});
  run("conv2d_x",
      [&](const Td& x) { return sum(conv2d(x, cw, cb, 1, 1)); },
      rand_t(rng, {3, 5, 5}));
  Td cx = rand_t(rng, {3, 5, 5});
  run("conv2d_w",
      [&](const Td& w) { return sum(conv2d(cx, w, cb, 2, 1)); },
      rand_t(rng, {2, 3, 3, 3}, -0.5, 0.5));
  run("upsample2x", [&](const Td& x) { return sum(mul(upsample_nearest2x(x), w246)); },
      rand_t(rng, {2, 2, 3}));
  run("resize_nearest", [&](const Td& x) { return sum(mul(resize_nearest(x, 5, 7), w157)); },
      rand_t(rng, {1, 3, 4}));
  run("relu", [&](const Td& x) { return sum(relu(x)); }, rand_t(rng, {4, 4}));
  run("gelu", [&](const Td& x) { return sum(gelu(x)); }, rand_t(rng, {4, 4}));
  run("sigmoid", [&](const Td& x) { return sum(mul(sigmoid(x), b_like)); }, rand_t(rng, {3, 4}));
  run("softmax", [&](const Td& x) { return sum(mul(softmax(x, 1), b_like)); }, rand_t(rng, {3, 4}));
  Td gmm = rand_t(rng, {4}, 0.5, 1.5), bt = rand_t(rng, {4});
  run("layer_norm_x", [&](const Td& x) { return sum(mul(layer_norm(x, gmm, bt, 1e-5), b_like)); },
      rand_t(rng, {3, 4}));
  Td lx = rand_t(rng, {3, 4});
  run("layer_norm_gamma", [&](const Td& g) { return sum(mul(layer_norm(lx, g, bt, 1e-5), b_like)); },
      rand_t(rng, {4}));
  run("sum", [&](const Td& x) { return sum(x); }, rand_t(rng, {7}));
  run("mean", [&](const Td& x) { return mean(x); }, rand_t(rng, {7}));
  run("sum_axis", [&](const Td& x) { return sum(mul(sum_axis(x, 0, false), w4)); },
      rand_t(rng, {3, 4}));
  Td l1b = rand_t(rng, {3, 4});
  run("l1_distance", [&](const Td& x) { return l1_distance(x, l1b); }, rand_t(rng, {3, 4}));
  run("concat", [&](const Td& x) { return sum(mul(concat<double>({x, b_like}, 0), w64)); },
      rand_t(rng, {3, 4}));
  run("slice", [&](const Td& x) { return sum(slice(x, 1, 1, 2)); }, rand_t(rng, {3, 4}));
  run("reshape", [&](const Td& x) { return sum(mul(reshape(x, {4, 3}), w43)); },
      rand_t(rng, {3, 4}));
  run("permute", [&](const Td& x) { return sum(mul(permute(x, {1, 0}), w43)); },
      rand_t(rng, {3, 4}));
  std::vector<int> ids{0, 2, 1, 2};
  run("embedding_lookup", [&](const Td& t) { return sum(mul(embedding_lookup(t, ids), w43)); },
      rand_t(rng, {3, 3}));
  Td cosb = rand_t(rng, {4, 5});
  run("cosine_rows_a", [&](const Td& x) { return sum(mul(cosine_rows(x, cosb), w34)); },
      rand_t(rng, {3, 5}));
  Td cosa = rand_t(rng, {3, 5});
  run("cosine_rows_b", [&](const Td& x) { return sum(mul(cosine_rows(cosa, x), w34)); },
      rand_t(rng, {4, 5}));
  run("log", [&](const Td& x) { return sum(log_clamped(x)); }, rand_t(rng, {6}, 0.2, 3.0));
  run("clamp_min", [&](const Td& x) { return sum(clamp_min(x, 0.1)); },
      rand_t(rng, {6}, 0.3, 2.0));
  return out;
}

}  // namespace cma
