// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cma/gradcheck.hpp"
#include "cma/losses.hpp"

using namespace cma;

namespace {

template <class T>
Tensor<T> rand_t(Rng& rng, Shape s, double lo = -1, double hi = 1) {
  Tensor<T> t = Tensor<T>::zeros(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = T(rng.uniform(lo, hi));
  return t;
}

// scalar-loop cosine oracle
double cos_oracle(const float* a, const float* b, int e) {
  double num = 0, na = 0, nb = 0;
  for (int q = 0; q < e; ++q) {
    num += double(a[q]) * b[q];
    na += double(a[q]) * a[q];
    nb += double(b[q]) * b[q];
  }
  return num / (std::max(std::sqrt(na), 1e-8) * std::max(std::sqrt(nb), 1e-8));
}

// enumerate all basic feasible solutions (spanning-tree supports) of the
// 4x4 transport polytope and return the value of each feasible vertex plan
std::vector<double> vertex_plan_values(const std::vector<double>& cost,
                                       const std::vector<double>& a,
                                       const std::vector<double>& b) {
  const int n = 4, m = 4, cells = n * m, basis = n + m - 1;
  std::vector<double> values;
  std::vector<int> pick(basis);
  std::function<void(int, int)> rec = [&](int start, int depth) {
    if (depth == basis) {
      // solve the tree flows: iteratively peel degree-1 rows/columns
      std::vector<double> rs = a, cs = b, flow(cells, 0.0);
      std::vector<bool> used(cells, false);
      for (int q = 0; q < basis; ++q) used[size_t(pick[size_t(q)])] = true;
      std::vector<bool> done(cells, false);
      bool progress = true;
      int solved = 0;
      while (progress) {
        progress = false;
        for (int i = 0; i < n; ++i) {
          int cnt = 0, last = -1;
          for (int j = 0; j < m; ++j)
            if (used[size_t(i * m + j)] && !done[size_t(i * m + j)]) {
              ++cnt;
              last = j;
            }
          if (cnt == 1) {
            flow[size_t(i * m + last)] = rs[size_t(i)];
            cs[size_t(last)] -= rs[size_t(i)];
            rs[size_t(i)] = 0;
            done[size_t(i * m + last)] = true;
            ++solved;
            progress = true;
          }
        }
        for (int j = 0; j < m; ++j) {
          int cnt = 0, last = -1;
          for (int i = 0; i < n; ++i)
            if (used[size_t(i * m + j)] && !done[size_t(i * m + j)]) {
              ++cnt;
              last = i;
            }
          if (cnt == 1) {
            flow[size_t(last * m + j)] = cs[size_t(j)];
            rs[size_t(last)] -= cs[size_t(j)];
            cs[size_t(j)] = 0;
            done[size_t(last * m + j)] = true;
            ++solved;
            progress = true;
          }
        }
      }
      if (solved != basis) return;  // support contains a cycle
      for (double f : flow)
        if (f < -1e-12) return;  // infeasible vertex
      double v = 0;
      for (int q = 0; q < cells; ++q) v += flow[size_t(q)] * cost[size_t(q)];
      values.push_back(v);
      return;
    }
    for (int c = start; c < cells; ++c) {
      pick[size_t(depth)] = c;
      rec(c + 1, depth + 1);
    }
  };
  rec(0, 0);
  return values;
}

}  // namespace

TEST_CASE("correlation map: identical, orthogonal, and random vs oracle") {
  Tensor<float> t = Tensor<float>::zeros({3, 4});
  for (int i = 0; i < 3; ++i)
    for (int q = 0; q < 4; ++q) t.data()[i * 4 + q] = float(q + 1);
  Tensor<float> v = Tensor<float>::zeros({5, 4});
  for (int i = 0; i < 5; ++i)
    for (int q = 0; q < 4; ++q) v.data()[i * 4 + q] = float(2 * (q + 1));
  Tensor<float> m = correlation_map(t, v);
  REQUIRE(m.shape() == Shape{3, 5});
  for (int64_t i = 0; i < m.numel(); ++i)
    CHECK(m.data()[i] == doctest::Approx(1.0).epsilon(1e-5));

  Tensor<float> e1 = Tensor<float>::from({1, 0, 0, 0, 1, 0}, {2, 3});
  Tensor<float> e2 = Tensor<float>::from({0, 0, 1}, {1, 3});
  Tensor<float> z = correlation_map(e1, e2);
  CHECK(z.data()[0] == doctest::Approx(0.0));
  CHECK(z.data()[1] == doctest::Approx(0.0));

  Rng rng(51);
  Tensor<float> tr = rand_t<float>(rng, {3, 7});
  Tensor<float> vr = rand_t<float>(rng, {4, 7});
  Tensor<float> mr = correlation_map(tr, vr);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      double expect = cos_oracle(tr.data() + i * 7, vr.data() + j * 7, 7);
      CHECK(std::fabs(mr.data()[i * 4 + j] - expect) < 1e-6);
      CHECK(mr.data()[i * 4 + j] >= -1.0f - 1e-6f);
      CHECK(mr.data()[i * 4 + j] <= 1.0f + 1e-6f);
    }
}

TEST_CASE("cmad loss values and teacher detachment") {
  Rng rng(52);
  Tensor<float> m = rand_t<float>(rng, {3, 4});
  CHECK(cmad_loss(m, m).item() == 0.0f);

  Tensor<float> r = Tensor<float>::from({1}, {1, 1});
  Tensor<float> o = Tensor<float>::from({-1}, {1, 1});
  CHECK(cmad_loss(r, o).item() == doctest::Approx(4.0));

  Tensor<float> a = rand_t<float>(rng, {4, 6});
  Tensor<float> b = rand_t<float>(rng, {4, 6});
  double expect = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = double(a.data()[i]) - double(b.data()[i]);
    expect += d * d;
  }
  expect /= double(a.numel());
  CHECK(cmad_loss(a, b).item() == doctest::Approx(expect).epsilon(1e-6));

  // gradient flows only into the student map
  auto& tape = Tape<float>::get();
  tape.clear();
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  a.zero_grad();
  b.zero_grad();
  tape.backward(cmad_loss(a, b));
  bool a_has = false, b_has = false;
  for (float g : a.grad_vec()) a_has = a_has || g != 0;
  for (float g : b.grad_vec()) b_has = b_has || g != 0;
  CHECK(a_has);
  CHECK(!b_has);
  tape.clear();

  CHECK_THROWS_AS(cmad_loss(a, rand_t<float>(rng, {3, 6})), ShapeError);
}

TEST_CASE("isd loss closed forms") {
  Rng rng(53);
  Tensor<float> v = rand_t<float>(rng, {4, 5});
  CHECK(isd_loss(v, v).item() == doctest::Approx(0.0).epsilon(1e-9));

  // teacher row softmaxes to ~[1,0]; student row to [0.5,0.5]
  Tensor<float> vo = Tensor<float>::from({40, 0}, {1, 2});
  Tensor<float> vr = Tensor<float>::from({0, 0}, {1, 2});
  CHECK(isd_loss(vo, vr).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-5));

  // Gibbs: nonnegative up to float noise
  for (int t = 0; t < 20; ++t) {
    Tensor<float> x = rand_t<float>(rng, {3, 6}, -2, 2);
    Tensor<float> y = rand_t<float>(rng, {3, 6}, -2, 2);
    CHECK(isd_loss(x, y).item() >= -1e-9f);
  }
}

TEST_CASE("exact ot oracle basic identities") {
  // cost 1 - I with uniform marginals: the diagonal plan costs zero
  int n = 4;
  std::vector<double> cost(16, 1.0);
  for (int i = 0; i < n; ++i) cost[size_t(i * n + i)] = 0.0;
  std::vector<double> u(4, 0.25);
  CHECK(exact_ot_oracle(cost, 4, 4, u, u) == doctest::Approx(0.0).epsilon(1e-12));

  // 1 x m: the plan is forced to the demand row
  std::vector<double> c1 = {0.3, 0.9, 0.1};
  std::vector<double> a1 = {1.0};
  std::vector<double> b1 = {0.2, 0.5, 0.3};
  double expect = 0.2 * 0.3 + 0.5 * 0.9 + 0.3 * 0.1;
  CHECK(exact_ot_oracle(c1, 1, 3, a1, b1) == doctest::Approx(expect));

  CHECK_THROWS_AS(exact_ot_oracle(std::vector<double>(36, 1.0), 6, 6,
                                  std::vector<double>(6, 1.0 / 6),
                                  std::vector<double>(6, 1.0 / 6)),
                  ConfigError);
  CHECK_THROWS_AS(exact_ot_oracle(c1, 1, 3, {2.0}, b1), NumericError);
}

TEST_CASE("oracle value is <= every vertex plan (4x4 enumeration)") {
  Rng rng(54);
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<double> cost(16);
    for (auto& c : cost) c = rng.uniform(0.0, 2.0);
    std::vector<double> a(4), b(4);
    double sa = 0, sb = 0;
    for (auto& x : a) {
      x = rng.uniform(0.1, 1.0);
      sa += x;
    }
    for (auto& x : b) {
      x = rng.uniform(0.1, 1.0);
      sb += x;
    }
    for (auto& x : a) x /= sa;
    for (auto& x : b) x /= sb;
    double opt = exact_ot_oracle(cost, 4, 4, a, b);
    auto vertices = vertex_plan_values(cost, a, b);
    REQUIRE(!vertices.empty());
    double best = 1e300;
    for (double v : vertices) {
      CHECK(opt <= v + 1e-9);
      best = std::min(best, v);
    }
    // the optimum is attained at a vertex
    CHECK(opt == doctest::Approx(best).epsilon(1e-9));
  }
}

TEST_CASE("sinkhorn: trivial plans and the crossing example") {
  SinkhornOptions opt;
  opt.epsilon = 1e-3;
  opt.max_iters = 20000;
  opt.tol = 1e-7;

  std::vector<double> zero(6, 0.0);
  auto rz = sinkhorn(zero, 2, 3, {0.5, 0.5}, {0.4, 0.3, 0.3}, opt);
  CHECK(std::fabs(rz.value) < 1e-9);

  // constant cost: any feasible plan pays c * mass
  std::vector<double> cc(6, 0.77);
  auto rc = sinkhorn(cc, 2, 3, {0.5, 0.5}, {0.4, 0.3, 0.3}, opt);
  CHECK(rc.value == doctest::Approx(0.77).epsilon(1e-6));

  // 2x2 crossing cost: exact optimum is 0
  std::vector<double> cx = {0, 1, 1, 0};
  auto r = sinkhorn(cx, 2, 2, {0.5, 0.5}, {0.5, 0.5}, opt);
  CHECK(std::fabs(r.value - 0.0) < 1e-3);
  CHECK(r.marginal_err <= 1e-4);
}

TEST_CASE("sinkhorn converges to the oracle as epsilon shrinks") {
  Rng rng(55);
  for (int trial = 0; trial < 5; ++trial) {
    int n = rng.uniform_int(2, 5), m = rng.uniform_int(2, 5);
    std::vector<double> cost(size_t(n) * m);
    for (auto& c : cost) c = rng.uniform(0.0, 2.0);
    std::vector<double> a(size_t(n), 1.0 / n), b(size_t(m), 1.0 / m);
    double exact = exact_ot_oracle(cost, n, m, a, b);

    double prev = 1e300;
    for (double eps : {1e-1, 1e-2, 1e-3}) {
      SinkhornOptions opt;
      opt.epsilon = eps;
      opt.max_iters = 50000;
      opt.tol = 1e-8;
      auto r = sinkhorn(cost, n, m, a, b, opt);
      CHECK(r.value <= prev + 1e-9);   // monotone toward the optimum
      CHECK(r.value >= exact - 1e-6);  // entropic value upper-bounds it
      prev = r.value;
      // plan marginals
      for (int i = 0; i < n; ++i) {
        double rs = 0;
        for (int j = 0; j < m; ++j) rs += r.plan[size_t(i) * m + j];
        CHECK(std::fabs(rs - a[size_t(i)]) <= 1e-4);
      }
      for (int j = 0; j < m; ++j) {
        double cs = 0;
        for (int i = 0; i < n; ++i) cs += r.plan[size_t(i) * m + j];
        CHECK(std::fabs(cs - b[size_t(j)]) <= 1e-4);
      }
    }
    CHECK(std::fabs(prev - exact) <= 1e-3);
  }
}

TEST_CASE("wpa loss: aligned pairs cost nothing, plan bounds hold") {
  SinkhornOptions opt;  // training defaults
  Rng rng(56);

  // visual rows equal to a text row: all cosines 1, cost 0
  Tensor<float> t = Tensor<float>::zeros({3, 4});
  for (int i = 0; i < 3; ++i)
    for (int q = 0; q < 4; ++q) t.data()[i * 4 + q] = float(q + 1);
  Tensor<float> v = Tensor<float>::zeros({4, 4});
  for (int i = 0; i < 4; ++i)
    for (int q = 0; q < 4; ++q) v.data()[i * 4 + q] = float(3 * (q + 1));
  CHECK(std::fabs(wpa_loss(v, t, 3, opt).item()) < 1e-5);

  // random instance stays within [0,2] (cost entries in [0,2], unit mass)
  Tensor<float> tv = rand_t<float>(rng, {5, 6});
  Tensor<float> tt = rand_t<float>(rng, {4, 6});
  SinkhornResult diag;
  float val = wpa_loss(tv, tt, 3, opt, &diag).item();
  CHECK(val >= -1e-6f);
  CHECK(val <= 2.0f + 1e-6f);
  CHECK(diag.marginal_err <= 1e-4);
  CHECK_THROWS_AS(wpa_loss(tv, tt, 0, opt), ShapeError);
}

TEST_CASE("hinge losses") {
  Tensor<float> s1 = Tensor<float>::from({0.3f}, {1});
  CHECK(hinge_g(s1).item() == doctest::Approx(-0.3));
  Tensor<float> s2 = Tensor<float>::from({1, -1}, {2});
  CHECK(hinge_g(s2).item() == doctest::Approx(0.0));

  Rng rng(57);
  Tensor<float> fake = rand_t<float>(rng, {7}, -2, 2);
  double oracle = 0;
  for (int i = 0; i < 7; ++i) oracle -= double(fake.data()[i]);
  oracle /= 7;
  CHECK(hinge_g(fake).item() == doctest::Approx(oracle).epsilon(1e-6));

  Tensor<float> real1 = Tensor<float>::from({1}, {1});
  Tensor<float> fake1 = Tensor<float>::from({-1}, {1});
  CHECK(hinge_d(real1, fake1).item() == doctest::Approx(0.0));
  Tensor<float> z = Tensor<float>::from({0}, {1});
  CHECK(hinge_d(z, z).item() == doctest::Approx(2.0));

  Tensor<float> real = rand_t<float>(rng, {5}, -2, 2);
  double od = 0;
  for (int i = 0; i < 5; ++i)
    od += std::max(0.0, 1.0 - double(real.data()[i])) / 5;
  for (int i = 0; i < 7; ++i)
    od += std::max(0.0, 1.0 + double(fake.data()[i])) / 7;
  CHECK(hinge_d(real, fake).item() == doctest::Approx(od).epsilon(1e-6));
}

TEST_CASE("weighted totals match the stated combination") {
  LossWeights w;  // defaults: lambda 2, alpha 1, beta 1, gamma 0.1
  LossRecord r;
  CHECK(total_g(r, w) == 0.0);
  CHECK(total_d(r, w) == 0.0);

  r.cmad = r.isd = r.wpa = r.l1 = r.g_adv_g = r.l_adv_g = 1.0;
  CHECK(std::fabs(total_g(r, w) - 6.2) <= 1e-9);

  r.g_adv_d = r.l_adv_d = 1.0;
  CHECK(std::fabs(total_d(r, w) - 0.2) <= 1e-9);

  LossWeights wg0 = w;
  wg0.gamma = 0.0;
  CHECK(total_g(r, wg0) == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(total_d(r, wg0) == 0.0);

  // bit-exact identity for arbitrary records
  Rng rng(58);
  for (int t = 0; t < 10; ++t) {
    LossRecord q;
    q.cmad = rng.uniform();
    q.isd = rng.uniform();
    q.wpa = rng.uniform();
    q.l1 = rng.uniform();
    q.g_adv_g = rng.uniform(-1, 1);
    q.l_adv_g = rng.uniform(-1, 1);
    q.g_adv_d = rng.uniform();
    q.l_adv_d = rng.uniform();
    q.total_g = total_g(q, w);
    q.total_d = total_d(q, w);
    CHECK(q.total_g == total_g(q, w));
    CHECK(q.total_d == total_d(q, w));
    CHECK(q.total_d == w.w_gadv() * q.g_adv_d + w.w_ladv() * q.l_adv_d);
  }

  LossWeights bad;
  bad.gamma = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("losses pass the shadow gradient check with teachers detached") {
  Rng rng(59);
  Tensor<double> teacher_map = rand_t<double>(rng, {3, 4});
  auto f_cmad = [&](const Tensor<double>& m) {
    return cmad_loss(m, teacher_map);
  };
  CHECK(grad_check<double>(f_cmad, rand_t<double>(rng, {3, 4}), 1e-5) <= 1e-4);

  Tensor<double> teacher_v = rand_t<double>(rng, {3, 5});
  auto f_isd = [&](const Tensor<double>& v) { return isd_loss(teacher_v, v); };
  CHECK(grad_check<double>(f_isd, rand_t<double>(rng, {3, 5}), 1e-5) <= 1e-4);

  auto f_l1 = [&](const Tensor<double>& x) { return l1_loss(x, teacher_v); };
  CHECK(grad_check<double>(f_l1, rand_t<double>(rng, {3, 5}), 1e-5) <= 1e-4);

  auto f_hg = [&](const Tensor<double>& s) { return hinge_g(s); };
  CHECK(grad_check<double>(f_hg, rand_t<double>(rng, {4}), 1e-5) <= 1e-4);
  Tensor<double> fr = rand_t<double>(rng, {4});
  auto f_hd = [&](const Tensor<double>& s) { return hinge_d(fr, s); };
  CHECK(grad_check<double>(f_hd, rand_t<double>(rng, {4}), 1e-5) <= 1e-4);

  // wpa differentiates through the cost matrix with the plan held constant;
  // freeze the plan from the base point and check that path
  Tensor<double> text = rand_t<double>(rng, {3, 5});
  Tensor<double> v0 = rand_t<double>(rng, {4, 5});
  SinkhornOptions opt;
  SinkhornResult plan0;
  (void)wpa_loss(v0, text, 3, opt, &plan0);
  Tensor<double> plan_t = Tensor<double>::zeros({4, 3});
  for (size_t i = 0; i < plan0.plan.size(); ++i)
    plan_t.data()[i] = plan0.plan[i];
  auto f_wpa = [&](const Tensor<double>& v) {
    Tensor<double> cost = add_scalar(neg(cosine_rows(v, text)), 1.0);
    return sum(mul(cost, plan_t));
  };
  CHECK(grad_check<double>(f_wpa, v0, 1e-5) <= 1e-4);
}

TEST_CASE("loss record csv row shape") {
  LossRecord r;
  r.cmad = 0.5;
  r.total_g = 1.25;
  std::string row = r.csv_row(17);
  CHECK(row.substr(0, 3) == "17,");
  int commas = 0;
  for (char c : row) commas += c == ',';
  CHECK(commas == 10);
  CHECK(std::string(LossRecord::csv_header()) ==
        "step,cmad,isd,wpa,l1,g_adv_g,l_adv_g,g_adv_d,l_adv_d,total_g,"
        "total_d");
}
