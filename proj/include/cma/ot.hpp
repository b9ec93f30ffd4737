// SPDX-License-Identifier: Apache-2.0
//
// Entropic optimal transport (log-domain Sinkhorn with epsilon scaling) and
// an exact small-instance solver used as its independent oracle.
#pragma once

#include <vector>

#include "cma/common.hpp"

namespace cma {

struct SinkhornOptions {
  double epsilon = 0.05;
  int max_iters = 200;
  double tol = 1e-6;  // L-inf marginal violation target
};

struct SinkhornResult {
  std::vector<double> plan;  // n x m, row-major
  double value = 0.0;        // <plan, cost>
  int iterations = 0;
  bool converged = false;
  double marginal_err = 0.0;
};

// min_{T in Pi(a,b)} <T, C> + eps*KL regularization, solved in the log
// domain. Marginals must be positive and sum to the same mass. On
// non-convergence the best iterate is returned and a warning is printed.
SinkhornResult sinkhorn(const std::vector<double>& cost, int n, int m,
                        const std::vector<double>& a,
                        const std::vector<double>& b,
                        const SinkhornOptions& opt);

// Exact transport optimum via successive shortest-path min-cost flow.
// Restricted to n*m <= 25; marginals must sum to equal mass.
double exact_ot_oracle(const std::vector<double>& cost, int n, int m,
                       const std::vector<double>& a,
                       const std::vector<double>& b);

}  // namespace cma
