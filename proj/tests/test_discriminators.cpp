// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "cma/discriminator.hpp"
#include "cma/gradcheck.hpp"
#include "cma/numeric.hpp"

using namespace cma;

namespace {

DiscriminatorConfig tiny_dc() {
  DiscriminatorConfig dc;
  dc.input_size = 32;
  dc.in_channels = 3;
  dc.widths = {4, 4, 6, 6, 6};
  return dc;
}

template <class T>
Tensor<T> rand_t(Rng& rng, Shape s, double lo = -1, double hi = 1) {
  Tensor<T> t = Tensor<T>::zeros(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = T(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("power iteration recovers known singular values") {
  // diag(3,1) as a 1x1-kernel conv weight
  Tensor<float> w = Tensor<float>::from({3, 0, 0, 1}, {2, 2, 1, 1});
  Tensor<float> u = Tensor<float>::from({0.8f, 0.6f}, {2});
  sn_power_iterate(w, u, 20);
  CHECK(std::fabs(sn_sigma(w, u) - 3.0f) < 1e-3);

  // orthogonal (rotation) matrix: sigma == 1 regardless of u
  float c = std::cos(0.7f), s = std::sin(0.7f);
  Tensor<float> rot = Tensor<float>::from({c, -s, s, c}, {2, 2, 1, 1});
  Tensor<float> u2 = Tensor<float>::from({1, 0}, {2});
  sn_power_iterate(rot, u2, 5);
  CHECK(std::fabs(sn_sigma(rot, u2) - 1.0f) < 1e-5);
}

TEST_CASE("normalized weight has top singular value near one") {
  Rng rng(31);
  Tensor<float> w = rand_t<float>(rng, {6, 5, 3, 3});
  Tensor<float> u = rand_t<float>(rng, {6});
  float n = 0;
  for (int i = 0; i < 6; ++i) n += u.data()[i] * u.data()[i];
  for (int i = 0; i < 6; ++i) u.data()[i] /= std::sqrt(n);
  sn_power_iterate(w, u, 50);
  Tensor<float> what = spectral_normalize(w, u, false);
  CHECK(top_singular_value(what.data(), 6, 45) <= 1.0f + 1e-2);

  // zero weight: sigma clamps rather than dividing by zero
  Tensor<float> z = Tensor<float>::zeros({2, 2, 1, 1});
  Tensor<float> uz = Tensor<float>::from({1, 0}, {2});
  Tensor<float> zn = spectral_normalize(z, uz, false);
  for (int64_t i = 0; i < zn.numel(); ++i) CHECK(zn.data()[i] == 0.0f);
}

TEST_CASE("after 50 power iterations sigma is within 1% of the SVD oracle") {
  Discriminator<float> d(tiny_dc(), 41);
  d.power_iterate(50);
  ParamSet<float> ps;
  d.collect(ps, "d");
  std::vector<std::pair<Tensor<float>, Tensor<float>>> wu;
  for (size_t i = 0; i < ps.params.size(); ++i) {
    const auto& [n, t] = ps.params[i];
    if (n.size() > 2 && n.substr(n.size() - 2) == ".w") {
      std::string un = n.substr(0, n.size() - 2) + ".u";
      for (auto& [bn, bt] : ps.buffers)
        if (bn == un) wu.emplace_back(t, bt);
    }
  }
  REQUIRE(wu.size() == 15);  // 5 blocks x 3 convs
  for (auto& [w, u] : wu) {
    int rows = w.dim(0);
    int cols = int(w.numel() / rows);
    double exact = top_singular_value(w.data(), rows, cols);
    double est = sn_sigma(w, u);
    CHECK(std::fabs(est - exact) / exact < 0.01);
  }
}

TEST_CASE("forward is deterministic and order-preserving over a batch") {
  Discriminator<float> d(tiny_dc(), 42);
  Rng rng(33);
  Tensor<float> x = rand_t<float>(rng, {3, 32, 32}, 0, 1);
  float s1 = d.forward(x, false).item();
  float s2 = d.forward(x, false).item();
  CHECK(s1 == s2);

  Tensor<float> batch = rand_t<float>(rng, {4, 3, 32, 32}, 0, 1);
  Tensor<float> scores = d.forward(batch, false);
  REQUIRE(scores.shape() == Shape{4});
  for (int b = 0; b < 4; ++b) {
    Tensor<float> one = Tensor<float>::zeros({3, 32, 32});
    std::copy(batch.data() + b * 3 * 32 * 32,
              batch.data() + (b + 1) * 3 * 32 * 32, one.data());
    CHECK(d.forward(one, false).item() ==
          doctest::Approx(scores.data()[b]).epsilon(1e-5));
  }

  CHECK_THROWS_AS(d.forward(Tensor<float>::zeros({3, 16, 16}), false),
                  ShapeError);
}

TEST_CASE("training forward advances u deterministically") {
  Discriminator<float> d1(tiny_dc(), 43);
  Discriminator<float> d2(tiny_dc(), 43);
  Rng rng(34);
  Tensor<float> x = rand_t<float>(rng, {3, 32, 32}, 0, 1);
  Tape<float>::get().clear();
  float a = d1.forward(x, true).item();
  float b = d2.forward(x, true).item();
  CHECK(a == b);
  auto sa = d1.sigma_estimates();
  auto sb = d2.sigma_estimates();
  for (size_t i = 0; i < sa.size(); ++i) CHECK(sa[i] == sb[i]);
  Tape<float>::get().clear();
}

TEST_CASE("discriminator passes the shadow gradient check at tiny config") {
  DiscriminatorConfig dc = tiny_dc();
  Discriminator<double> d(dc, 44);
  Rng rng(35);
  Tensor<double> x = rand_t<double>(rng, {3, 32, 32}, 0, 1);
  Tensor<double> fixed = x.detach();

  ParamSet<double> ps;
  d.collect(ps, "d");
  Tensor<double> c1w, fcw;
  for (auto& [n, t] : ps.params) {
    if (n == "d.block0.c1.w") c1w = t;
    if (n == "d.fc_w") fcw = t;
  }
  auto f = [&]() { return d.forward(fixed, false); };
  CHECK(grad_check_param<double>(f, fcw, 1e-5) <= 1e-4);
  CHECK(grad_check_param<double>(f, c1w, 1e-5) <= 1e-4);

  // and with respect to the input image (few elements via a small crop graph)
  auto fx = [&](const Tensor<double>& small) {
    Tensor<double> up = resize_nearest(small, 32, 32);
    return d.forward(up, false);
  };
  Tensor<double> sm = rand_t<double>(rng, {3, 4, 4}, 0, 1);
  CHECK(grad_check<double>(fx, sm, 1e-5) <= 1e-4);
}

TEST_CASE("local crop geometry") {
  // center 23x23 mask on 32x32: tight box is already square
  std::vector<float> mask(32 * 32, 0.0f);
  for (int y = 4; y < 27; ++y)
    for (int x = 4; x < 27; ++x) mask[size_t(y) * 32 + x] = 1.0f;
  CropBox b = square_crop_box(mask.data(), 32, 32);
  CHECK(b.side == 23);
  CHECK(b.x0 == 4);
  CHECK(b.y0 == 4);

  Rng rng(36);
  Tensor<float> img = rand_t<float>(rng, {3, 32, 32}, 0, 1);
  Tensor<float> crop = local_crop(img, b, 32);
  CHECK(crop.shape() == Shape{3, 32, 32});

  // full mask: crop == whole image (nearest resize at equal size is identity)
  std::vector<float> full(32 * 32, 1.0f);
  CropBox fb = square_crop_box(full.data(), 32, 32);
  CHECK(fb.side == 32);
  Tensor<float> crop2 = local_crop(img, fb, 32);
  for (int64_t i = 0; i < img.numel(); ++i)
    CHECK(crop2.data()[i] == img.data()[i]);

  // rectangular mask expands to a square containing it
  std::vector<float> rect(32 * 32, 0.0f);
  for (int y = 10; y < 14; ++y)
    for (int x = 2; x < 22; ++x) rect[size_t(y) * 32 + x] = 1.0f;
  CropBox rb = square_crop_box(rect.data(), 32, 32);
  CHECK(rb.side == 20);
  CHECK(rb.x0 <= 2);
  CHECK(rb.x0 + rb.side >= 22);
  CHECK(rb.y0 <= 10);
  CHECK(rb.y0 + rb.side >= 14);

  std::vector<float> empty(32 * 32, 0.0f);
  CHECK_THROWS_AS(square_crop_box(empty.data(), 32, 32), ShapeError);
}

TEST_CASE("empirical lipschitz ratio is finite and logged") {
  Discriminator<float> d(tiny_dc(), 45);
  d.power_iterate(20);
  Rng rng(37);
  double worst = 0;
  NoGrad<float> ng;
  for (int t = 0; t < 100; ++t) {
    Tensor<float> x = rand_t<float>(rng, {3, 32, 32}, 0, 1);
    Tensor<float> y = rand_t<float>(rng, {3, 32, 32}, 0, 1);
    float dx = d.forward(x, false).item() - d.forward(y, false).item();
    double nn = 0;
    for (int64_t i = 0; i < x.numel(); ++i) {
      double dd = x.data()[i] - y.data()[i];
      nn += dd * dd;
    }
    worst = std::max(worst, std::fabs(double(dx)) / std::sqrt(nn));
  }
  std::printf("[lipschitz] max |D(x)-D(y)|/|x-y| over 100 pairs: %.4f\n",
              worst);
  CHECK(std::isfinite(worst));
}
