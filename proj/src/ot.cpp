// SPDX-License-Identifier: Apache-2.0

#include "cma/ot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace cma {
namespace {

void validate_marginals(const std::vector<double>& a,
                        const std::vector<double>& b, int n, int m,
                        const char* who) {
  if (int(a.size()) != n || int(b.size()) != m)
    throw ShapeError(std::string(who) + ": marginal lengths do not match");
  double sa = 0, sb = 0;
  for (double x : a) {
    if (x < 0) throw NumericError(std::string(who) + ": negative marginal");
    sa += x;
  }
  for (double x : b) {
    if (x < 0) throw NumericError(std::string(who) + ": negative marginal");
    sb += x;
  }
  if (std::fabs(sa - sb) > 1e-9)
    throw NumericError(std::string(who) +
                       ": marginals do not sum to equal mass (" +
                       std::to_string(sa) + " vs " + std::to_string(sb) + ")");
}

double lse(const double* vals, int count) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < count; ++i) mx = std::max(mx, vals[i]);
  if (!std::isfinite(mx)) return mx;
  double s = 0;
  for (int i = 0; i < count; ++i) s += std::exp(vals[i] - mx);
  return mx + std::log(s);
}

}  // namespace

SinkhornResult sinkhorn(const std::vector<double>& cost, int n, int m,
                        const std::vector<double>& a,
                        const std::vector<double>& b,
                        const SinkhornOptions& opt) {
  if (int(cost.size()) != n * m)
    throw ShapeError("sinkhorn: cost size does not match n*m");
  validate_marginals(a, b, n, m, "sinkhorn");
  if (opt.epsilon <= 0) throw NumericError("sinkhorn: epsilon must be > 0");
  for (double x : a)
    if (x == 0) throw NumericError("sinkhorn: zero marginal entry");
  for (double x : b)
    if (x == 0) throw NumericError("sinkhorn: zero marginal entry");

  std::vector<double> f(n, 0.0), g(m, 0.0), scratch(std::max(n, m));
  std::vector<double> log_a(n), log_b(m);
  for (int i = 0; i < n; ++i) log_a[size_t(i)] = std::log(a[size_t(i)]);
  for (int j = 0; j < m; ++j) log_b[size_t(j)] = std::log(b[size_t(j)]);

  SinkhornResult res;
  res.plan.assign(size_t(n) * m, 0.0);

  auto plan_and_violation = [&](double eps) {
    double verr = 0.0;
    std::vector<double> colsum(m, 0.0);
    for (int i = 0; i < n; ++i) {
      double rowsum = 0.0;
      for (int j = 0; j < m; ++j) {
        double t = std::exp((f[size_t(i)] + g[size_t(j)] -
                             cost[size_t(i) * m + j]) /
                            eps);
        res.plan[size_t(i) * m + j] = t;
        rowsum += t;
        colsum[size_t(j)] += t;
      }
      verr = std::max(verr, std::fabs(rowsum - a[size_t(i)]));
    }
    for (int j = 0; j < m; ++j)
      verr = std::max(verr, std::fabs(colsum[size_t(j)] - b[size_t(j)]));
    return verr;
  };

  // epsilon scaling: start coarse, halve down to the target, warm-starting
  // the potentials at each level
  std::vector<double> levels;
  double e = std::max(opt.epsilon, 1.0);
  while (e > opt.epsilon * 1.5) {
    levels.push_back(e);
    e *= 0.5;
  }
  levels.push_back(opt.epsilon);

  int iters = 0;
  bool done = false;
  for (size_t li = 0; li < levels.size() && !done; ++li) {
    double eps = levels[li];
    bool final_level = li + 1 == levels.size();
    while (iters < opt.max_iters) {
      ++iters;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j)
          scratch[size_t(j)] =
              (g[size_t(j)] - cost[size_t(i) * m + j]) / eps;
        f[size_t(i)] = eps * (log_a[size_t(i)] - lse(scratch.data(), m));
      }
      for (int j = 0; j < m; ++j) {
        for (int i = 0; i < n; ++i)
          scratch[size_t(i)] =
              (f[size_t(i)] - cost[size_t(i) * m + j]) / eps;
        g[size_t(j)] = eps * (log_b[size_t(j)] - lse(scratch.data(), n));
      }
      double verr = plan_and_violation(eps);
      if (verr < opt.tol) {
        if (final_level) {
          res.converged = true;
          done = true;
        }
        break;
      }
      // spend only a slice of the budget on coarse levels
      if (!final_level && iters >= opt.max_iters / 4) break;
    }
  }
  res.iterations = iters;
  res.marginal_err = plan_and_violation(levels.back());
  res.value = 0.0;
  for (size_t i = 0; i < res.plan.size(); ++i)
    res.value += res.plan[i] * cost[i];
  if (!res.converged)
    std::fprintf(stderr,
                 "warning: sinkhorn did not converge in %d iterations "
                 "(marginal violation %.3e); using best iterate\n",
                 res.iterations, res.marginal_err);
  return res;
}

double exact_ot_oracle(const std::vector<double>& cost, int n, int m,
                       const std::vector<double>& a,
                       const std::vector<double>& b) {
  if (n * m > 25)
    throw ConfigError("exact_ot_oracle: instance larger than 25 cells");
  if (int(cost.size()) != n * m)
    throw ShapeError("exact_ot_oracle: cost size does not match n*m");
  validate_marginals(a, b, n, m, "exact_ot_oracle");

  std::vector<double> rs = a, rd = b;              // remaining supply/demand
  std::vector<double> flow(size_t(n) * m, 0.0);    // current transport plan
  const double inf = std::numeric_limits<double>::infinity();
  double mass = 0;
  for (double x : a) mass += x;
  if (mass == 0) return 0.0;

  int guard = 0;
  while (true) {
    double remaining = 0;
    for (double x : rs) remaining += std::max(x, 0.0);
    if (remaining <= 1e-14 * std::max(mass, 1.0)) break;
    if (++guard > 100000)
      throw NumericError("exact_ot_oracle: augmentation limit exceeded");

    // Bellman-Ford over the residual bipartite graph; nodes: 0..n-1 sources,
    // n..n+m-1 sinks
    int V = n + m;
    std::vector<double> dist(size_t(V), inf);
    std::vector<int> parent(size_t(V), -1);
    for (int i = 0; i < n; ++i)
      if (rs[size_t(i)] > 1e-15) dist[size_t(i)] = 0.0;
    for (int round = 0; round < V; ++round) {
      bool changed = false;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
          double c = cost[size_t(i) * m + j];
          if (dist[size_t(i)] + c < dist[size_t(n + j)] - 1e-15) {
            dist[size_t(n + j)] = dist[size_t(i)] + c;
            parent[size_t(n + j)] = i;
            changed = true;
          }
          if (flow[size_t(i) * m + j] > 1e-15 &&
              dist[size_t(n + j)] - c < dist[size_t(i)] - 1e-15) {
            dist[size_t(i)] = dist[size_t(n + j)] - c;
            parent[size_t(i)] = n + j;
            changed = true;
          }
        }
      if (!changed) break;
    }

    int best = -1;
    for (int j = 0; j < m; ++j)
      if (rd[size_t(j)] > 1e-15 && std::isfinite(dist[size_t(n + j)]) &&
          (best < 0 || dist[size_t(n + j)] < dist[size_t(n + best)]))
        best = j;
    if (best < 0)
      throw NumericError("exact_ot_oracle: no augmenting path found");

    // reconstruct sink -> ... -> source, take the bottleneck, augment
    std::vector<int> chain;
    for (int node = n + best; node >= 0; node = parent[size_t(node)])
      chain.push_back(node);
    int src = chain.back();
    if (src >= n)
      throw NumericError("exact_ot_oracle: path does not end at a source");
    double delta = std::min(rd[size_t(best)], rs[size_t(src)]);
    for (size_t q = 0; q + 1 < chain.size(); ++q) {
      int to = chain[q], from = chain[q + 1];
      if (from >= n)  // backward edge j(from) -> i(to): bounded by its flow
        delta = std::min(delta, flow[size_t(to) * m + (from - n)]);
    }
    for (size_t q = 0; q + 1 < chain.size(); ++q) {
      int to = chain[q], from = chain[q + 1];
      if (from < n)
        flow[size_t(from) * m + (to - n)] += delta;  // forward i -> j
      else
        flow[size_t(to) * m + (from - n)] -= delta;  // backward j -> i
    }
    rs[size_t(src)] -= delta;
    rd[size_t(best)] -= delta;
  }

  double value = 0;
  for (size_t i = 0; i < flow.size(); ++i) value += flow[i] * cost[i];
  return value;
}

}  // namespace cma
