// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "cma/generator.hpp"
#include "cma/gradcheck.hpp"

using namespace cma;

namespace {

GeneratorConfig tiny_gc() {
  GeneratorConfig gc;
  gc.prior_channels = 8;
  gc.grid = 4;
  gc.down_widths = {6, 6, 8, 8, 8};
  gc.up_widths = {8, 8, 6, 6, 6};
  gc.out_channels = 3;
  gc.image_size = 8;
  gc.skip_channels = 4;
  return gc;
}

template <class T>
Tensor<T> rand_t(Rng& rng, Shape s, double lo = -1, double hi = 1) {
  Tensor<T> t = Tensor<T>::zeros(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = T(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("reshape_priors layout and round trip") {
  Tensor<float> v = Tensor<float>::zeros({64, 128});
  for (int64_t i = 0; i < v.numel(); ++i) v.data()[i] = float(i);
  Tensor<float> grid = reshape_priors(v, 8, 128);
  CHECK(grid.shape() == Shape{128, 8, 8});
  // row 9 lands at cell (1,1): grid[c][1][1] == v[9][c]
  for (int c = 0; c < 128; ++c)
    CHECK(grid.data()[(c * 8 + 1) * 8 + 1] == v.data()[9 * 128 + c]);

  // inverse: transpose the (e, N) view back
  Tensor<float> back = transpose2d(reshape(grid, {128, 64}));
  CHECK(std::memcmp(back.data(), v.data(), size_t(v.numel()) * sizeof(float)) ==
        0);

  CHECK_THROWS_AS(reshape_priors(Tensor<float>::zeros({60, 128}), 8, 128),
                  ShapeError);
}

TEST_CASE("downsample spatial arithmetic and zero propagation") {
  GeneratorConfig gc = tiny_gc();
  Generator<float> gen(gc, 21);
  Tensor<float> prior = Tensor<float>::zeros({8, 4, 4});
  Tensor<float> v = gen.downsample(prior);
  CHECK(v.shape() == Shape{8, 1, 1});  // grid/4

  // biases are zero-initialized, so a zero prior stays exactly zero through
  // every residual block
  for (int64_t i = 0; i < v.numel(); ++i) CHECK(v.data()[i] == 0.0f);

  GeneratorConfig desk;
  desk.prior_channels = 16;
  desk.grid = 8;
  desk.down_widths = {4, 4, 4, 4, 4};
  desk.up_widths = {4, 4, 4, 4, 4};
  desk.image_size = 64;
  desk.skip_channels = 4;
  Generator<float> gend(desk, 22);
  Tensor<float> vd = gend.downsample(Tensor<float>::zeros({16, 8, 8}));
  CHECK(vd.shape() == Shape{4, 2, 2});
}

TEST_CASE("upsample output shape, range, and skip sensitivity") {
  GeneratorConfig gc = tiny_gc();
  Generator<float> gen(gc, 23);
  Rng rng(11);
  Tensor<float> prior = rand_t<float>(rng, {8, 4, 4});
  Tensor<float> img = gen.forward(prior);
  CHECK(img.shape() == Shape{3, 8, 8});
  for (int64_t i = 0; i < img.numel(); ++i) {
    CHECK(img.data()[i] > 0.0f);
    CHECK(img.data()[i] < 1.0f);
  }

  // zeroing the skip projection changes the output
  ParamSet<float> ps;
  gen.collect(ps, "g");
  Tensor<float> skip_w;
  for (auto& [n, t] : ps.params)
    if (n == "g.skip_w") skip_w = t;
  REQUIRE(skip_w.defined());
  std::vector<float> saved(skip_w.data(), skip_w.data() + skip_w.numel());
  std::fill(skip_w.data(), skip_w.data() + skip_w.numel(), 0.0f);
  Tensor<float> img0 = gen.forward(prior);
  double dd = 0;
  for (int64_t i = 0; i < img.numel(); ++i) {
    double d = img.data()[i] - img0.data()[i];
    dd += d * d;
  }
  CHECK(std::sqrt(dd) > 1e-6);
  std::copy(saved.begin(), saved.end(), skip_w.data());
}

TEST_CASE("gradient flows to both the deep representation and the skip prior") {
  GeneratorConfig gc = tiny_gc();
  Generator<float> gen(gc, 24);
  Rng rng(12);
  auto& tape = Tape<float>::get();
  tape.clear();
  Tensor<float> prior = rand_t<float>(rng, {8, 4, 4});
  prior.set_requires_grad(true);
  Tensor<float> v = gen.downsample(prior);
  Tensor<float> vleaf = v.detach();
  vleaf.set_requires_grad(true);
  Tensor<float> img = gen.upsample(vleaf, prior);
  tape.backward(sum(img));
  bool v_has = false, p_has = false;
  for (float g : vleaf.grad_vec()) v_has = v_has || g != 0;
  for (float g : prior.grad_vec()) p_has = p_has || g != 0;
  CHECK(v_has);
  CHECK(p_has);
  tape.clear();
}

TEST_CASE("downsample and full generator pass the shadow gradient check") {
  GeneratorConfig gc = tiny_gc();
  gc.down_widths = {4, 4, 4, 4, 4};
  gc.up_widths = {4, 4, 4, 4, 4};
  gc.skip_channels = 2;
  Generator<double> gen(gc, 25);
  Rng rng(13);
  Tensor<double> w = rand_t<double>(rng, {4, 1, 1});
  auto fd = [&](const Tensor<double>& prior) {
    return sum(mul(gen.downsample(prior), w));
  };
  Tensor<double> p0 = rand_t<double>(rng, {8, 4, 4}, -0.5, 0.5);
  CHECK(grad_check<double>(fd, p0, 1e-5) <= 1e-4);

  Tensor<double> wi = rand_t<double>(rng, {3, 8, 8});
  auto fg = [&](const Tensor<double>& prior) {
    return sum(mul(gen.forward(prior), wi));
  };
  CHECK(grad_check<double>(fg, p0, 1e-5) <= 1e-4);
}

TEST_CASE("1000 random forward passes stay in range with no NaN") {
  GeneratorConfig gc = tiny_gc();
  Generator<float> gen(gc, 26);
  Rng rng(14);
  NoGrad<float> ng;
  for (int t = 0; t < 1000; ++t) {
    Tensor<float> prior = rand_t<float>(rng, {8, 4, 4}, -2, 2);
    Tensor<float> img = gen.forward(prior);
    bool ok = true;
    for (int64_t i = 0; i < img.numel(); ++i)
      ok = ok && std::isfinite(img.data()[i]) && img.data()[i] >= 0.0f &&
           img.data()[i] <= 1.0f;
    CHECK(ok);
  }
}

TEST_CASE("compose_output blends by mask") {
  Rng rng(15);
  Tensor<float> restored = rand_t<float>(rng, {3, 4, 4}, 0, 1);
  Tensor<float> corrupted = rand_t<float>(rng, {3, 4, 4}, 0, 1);

  Tensor<float> empty = Tensor<float>::zeros({4, 4});
  Tensor<float> out = compose_output(restored, corrupted, empty);
  CHECK(std::memcmp(out.data(), corrupted.data(),
                    size_t(out.numel()) * sizeof(float)) == 0);

  Tensor<float> full = Tensor<float>::filled({4, 4}, 1.0f);
  out = compose_output(restored, corrupted, full);
  CHECK(std::memcmp(out.data(), restored.data(),
                    size_t(out.numel()) * sizeof(float)) == 0);

  Tensor<float> half = Tensor<float>::zeros({4, 4});
  for (int x = 0; x < 4; ++x) half.data()[x] = 1.0f;  // first row masked
  out = compose_output(restored, corrupted, half);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        float expect = y == 0 ? restored.data()[(c * 4 + y) * 4 + x]
                              : corrupted.data()[(c * 4 + y) * 4 + x];
        CHECK(out.data()[(c * 4 + y) * 4 + x] == expect);
      }

  CHECK_THROWS_AS(
      compose_output(restored, corrupted, Tensor<float>::zeros({3, 4})),
      ShapeError);
}

TEST_CASE("config validation rejects impossible geometry") {
  GeneratorConfig bad = tiny_gc();
  bad.grid = 6;  // not divisible by 4
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  GeneratorConfig bad2 = tiny_gc();
  bad2.image_size = 10;  // unreachable by doubling
  CHECK_THROWS_AS(bad2.validate(), ConfigError);
}
