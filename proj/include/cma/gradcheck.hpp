// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cma/ops.hpp"

namespace cma {

// Max over elements of |analytic - central difference| divided by
// max(1e-8, |analytic| + |numeric|). f must return a scalar tensor.
// Training runs in 32-bit; gradient checks use T=double (the shadow mode)
// because central differences are unreliable at float precision.
template <class T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                  const Tensor<T>& x0, T h);

// Same check against a module parameter: f() evaluates the model as-is; the
// parameter's data is perturbed in place for the central differences.
template <class T>
double grad_check_param(const std::function<Tensor<T>()>& f, Tensor<T> param,
                        T h);

struct GradCheckResult {
  std::string name;
  double max_rel_err;
};

// Finite-difference battery over the whole differentiable op set, run in the
// 64-bit shadow mode at several random points each.
std::vector<GradCheckResult> gradcheck_op_battery(uint64_t seed);

// End-to-end check through encoder -> generator -> discriminators -> losses
// at a tiny configuration.
std::vector<GradCheckResult> gradcheck_pipeline(uint64_t seed);

}  // namespace cma
