// SPDX-License-Identifier: Apache-2.0

#include "cma/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "cma/image_io.hpp"
#include "cma/numeric.hpp"
#include "cma/ops.hpp"

namespace cma {

FeatureExtractor::FeatureExtractor(uint64_t seed, int in_channels,
                                   int feature_dim)
    : in_channels_(in_channels), dim_(feature_dim) {
  Rng rng(mix_seed(seed, 0xfea7));
  int widths[4] = {16, 32, 48, feature_dim};
  auto he = [&](int co, int ci, int k) {
    Tensor<float> w = Tensor<float>::zeros({co, ci, k, k});
    double std = std::sqrt(2.0 / (double(ci) * k * k));
    for (int64_t i = 0; i < w.numel(); ++i)
      w.data()[i] = float(rng.normal(0.0, std));
    return w;
  };
  w1_ = he(widths[0], in_channels, 4);
  b1_ = Tensor<float>::zeros({widths[0]});
  w2_ = he(widths[1], widths[0], 4);
  b2_ = Tensor<float>::zeros({widths[1]});
  w3_ = he(widths[2], widths[1], 4);
  b3_ = Tensor<float>::zeros({widths[2]});
  w4_ = he(widths[3], widths[2], 4);
  b4_ = Tensor<float>::zeros({widths[3]});
}

std::vector<float> FeatureExtractor::extract(const Tensor<float>& image) const {
  if (image.rank() != 3 || image.dim(0) != in_channels_)
    throw ShapeError("feature extractor: expected (" +
                     std::to_string(in_channels_) + ",H,W), got " +
                     shape_str(image.shape()));
  if (image.dim(1) % 16 != 0 || image.dim(2) % 16 != 0)
    throw ShapeError("feature extractor: extents must be divisible by 16");
  NoGrad<float> ng;
  Tensor<float> h = relu(conv2d(image, w1_, b1_, 2, 1));
  h = relu(conv2d(h, w2_, b2_, 2, 1));
  h = relu(conv2d(h, w3_, b3_, 2, 1));
  h = relu(conv2d(h, w4_, b4_, 2, 1));
  int C = h.dim(0);
  int sp = h.dim(1) * h.dim(2);
  std::vector<float> out(C);
  const float* p = h.data();
  for (int c = 0; c < C; ++c) {
    double s = 0;
    for (int i = 0; i < sp; ++i) s += p[size_t(c) * sp + i];
    out[size_t(c)] = float(s / sp);
  }
  return out;
}

void FeatureSet::add(const std::vector<float>& row) {
  if (n == 0 && d == 0) d = int(row.size());
  if (int(row.size()) != d)
    throw ShapeError("feature set: inconsistent feature dimension");
  data.insert(data.end(), row.begin(), row.end());
  ++n;
}

double psnr(const Tensor<float>& x, const Tensor<float>& y, double peak) {
  if (x.shape() != y.shape())
    throw ShapeError("psnr: shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(y.shape()));
  double mse = 0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double d = double(x.data()[i]) - double(y.data()[i]);
    mse += d * d;
  }
  mse /= double(x.numel());
  if (mse == 0.0) return 99.0;
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const Tensor<float>& x, const Tensor<float>& y, double peak) {
  if (x.shape() != y.shape() || x.rank() != 3)
    throw ShapeError("ssim: expected matching (C,H,W) images");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int win = 7;
  if (H < win || W < win)
    throw ShapeError("ssim: image smaller than the 7x7 window");
  std::vector<double> gx(size_t(H) * W, 0.0), gy(size_t(H) * W, 0.0);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double sx = 0, sy = 0;
      for (int c = 0; c < C; ++c) {
        sx += x.data()[(size_t(c) * H + i) * W + j];
        sy += y.data()[(size_t(c) * H + i) * W + j];
      }
      gx[size_t(i) * W + j] = sx / C;
      gy[size_t(i) * W + j] = sy / C;
    }
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const double wn = double(win) * win;
  double acc = 0;
  int64_t count = 0;
  for (int i = 0; i + win <= H; ++i)
    for (int j = 0; j + win <= W; ++j) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (int u = 0; u < win; ++u)
        for (int v = 0; v < win; ++v) {
          double a = gx[size_t(i + u) * W + j + v];
          double b = gy[size_t(i + u) * W + j + v];
          mx += a;
          my += b;
          xx += a * a;
          yy += b * b;
          xy += a * b;
        }
      mx /= wn;
      my /= wn;
      double vx = xx / wn - mx * mx;
      double vy = yy / wn - my * my;
      double cov = xy / wn - mx * my;
      double s = ((2 * mx * my + c1) * (2 * cov + c2)) /
                 ((mx * mx + my * my + c1) * (vx + vy + c2));
      acc += s;
      ++count;
    }
  return acc / double(count);
}

double tv(const Tensor<float>& x) {
  if (x.rank() != 3) throw ShapeError("tv: expected (C,H,W)");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  double acc = 0;
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const float* p = x.data() + (size_t(c) * H + i) * W + j;
        if (j > 0) acc += std::fabs(double(p[0]) - double(p[-1]));
        if (i > 0) acc += std::fabs(double(p[0]) - double(p[-W]));
      }
  return acc / (double(C) * H * W);
}

namespace {

struct Gaussian {
  std::vector<double> mu;   // d
  std::vector<double> cov;  // d x d, unbiased
};

Gaussian fit_gaussian(const FeatureSet& s) {
  Gaussian g;
  int n = s.n, d = s.d;
  g.mu.assign(size_t(d), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) g.mu[size_t(j)] += s.data[size_t(i) * d + j];
  for (double& m : g.mu) m /= n;
  g.cov.assign(size_t(d) * d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < d; ++p) {
      double dp = s.data[size_t(i) * d + p] - g.mu[size_t(p)];
      for (int q = p; q < d; ++q) {
        double dq = s.data[size_t(i) * d + q] - g.mu[size_t(q)];
        g.cov[size_t(p) * d + q] += dp * dq;
      }
    }
  for (int p = 0; p < d; ++p)
    for (int q = p; q < d; ++q) {
      double v = g.cov[size_t(p) * d + q] / std::max(1, n - 1);
      g.cov[size_t(p) * d + q] = v;
      g.cov[size_t(q) * d + p] = v;
    }
  return g;
}

// A^(1/2) for symmetric PSD A via eigendecomposition, eigenvalues clamped
std::vector<double> sym_sqrt(const std::vector<double>& a, int d) {
  std::vector<double> evals, evecs;
  jacobi_eigen_sym(a, d, evals, &evecs);
  std::vector<double> out(size_t(d) * d, 0.0);
  for (int k = 0; k < d; ++k) {
    double s = std::sqrt(std::max(0.0, evals[size_t(k)]));
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        out[size_t(i) * d + j] +=
            s * evecs[size_t(i) * d + k] * evecs[size_t(j) * d + k];
  }
  return out;
}

std::vector<double> matmul_d(const std::vector<double>& a,
                             const std::vector<double>& b, int d) {
  std::vector<double> c(size_t(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int k = 0; k < d; ++k) {
      double av = a[size_t(i) * d + k];
      for (int j = 0; j < d; ++j) c[size_t(i) * d + j] += av * b[size_t(k) * d + j];
    }
  return c;
}

}  // namespace

double fid(const FeatureSet& a, const FeatureSet& b) {
  if (a.n < 2 || b.n < 2)
    throw ShapeError("fid: need at least 2 samples per set");
  if (a.d != b.d) throw ShapeError("fid: feature dimension mismatch");
  int d = a.d;
  Gaussian ga = fit_gaussian(a), gb = fit_gaussian(b);
  double mean_term = 0;
  for (int i = 0; i < d; ++i) {
    double dm = ga.mu[size_t(i)] - gb.mu[size_t(i)];
    mean_term += dm * dm;
  }
  // tr(sqrt(Sa Sb)) = tr(sqrt(Sa^1/2 Sb Sa^1/2)), the symmetrized product
  std::vector<double> ra = sym_sqrt(ga.cov, d);
  std::vector<double> inner = matmul_d(matmul_d(ra, gb.cov, d), ra, d);
  // symmetrize against round-off before the eigensolve
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      double v = 0.5 * (inner[size_t(i) * d + j] + inner[size_t(j) * d + i]);
      inner[size_t(i) * d + j] = inner[size_t(j) * d + i] = v;
    }
  std::vector<double> evals;
  jacobi_eigen_sym(inner, d, evals);
  double tr_sqrt = 0;
  for (double e : evals) tr_sqrt += std::sqrt(std::max(0.0, e));
  double tr_a = 0, tr_b = 0;
  for (int i = 0; i < d; ++i) {
    tr_a += ga.cov[size_t(i) * d + i];
    tr_b += gb.cov[size_t(i) * d + i];
  }
  return mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
}

double kid(const FeatureSet& a, const FeatureSet& b) {
  if (a.n < 2 || b.n < 2)
    throw ShapeError("kid: need at least 2 samples per set");
  if (a.d != b.d) throw ShapeError("kid: feature dimension mismatch");
  int n = a.n, m = b.n, d = a.d;
  auto kern = [&](const float* x, const float* y) {
    double dot = 0;
    for (int q = 0; q < d; ++q) dot += double(x[q]) * double(y[q]);
    double v = dot / d + 1.0;
    return v * v * v;
  };
  double kaa = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) kaa += kern(&a.data[size_t(i) * d], &a.data[size_t(j) * d]);
  kaa /= double(n) * (n - 1);
  double kbb = 0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      if (i != j) kbb += kern(&b.data[size_t(i) * d], &b.data[size_t(j) * d]);
  kbb /= double(m) * (m - 1);
  double kab = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      kab += kern(&a.data[size_t(i) * d], &b.data[size_t(j) * d]);
  kab /= double(n) * m;
  return kaa + kbb - 2.0 * kab;
}

std::string MetricReport::csv_row(const std::string& method) const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g",
                method.c_str(), l1_pct, fid, kid, tv_pct, psnr, ssim_pct);
  return buf;
}

MetricReport evaluate_pairs(
    const std::vector<std::pair<Tensor<float>, Tensor<float>>>& restored_gt,
    const FeatureExtractor& fx) {
  if (restored_gt.size() < 2)
    throw ShapeError("evaluate: need at least 2 image pairs");
  MetricReport rep;
  FeatureSet fa, fb;
  double l1_acc = 0, psnr_acc = 0, ssim_acc = 0, tv_acc = 0;
  for (const auto& [restored, gt] : restored_gt) {
    if (restored.shape() != gt.shape())
      throw ShapeError("evaluate: pair shape mismatch");
    PairMetrics pm;
    double l1 = 0;
    for (int64_t i = 0; i < restored.numel(); ++i)
      l1 += std::fabs(double(restored.data()[i]) - double(gt.data()[i]));
    pm.l1 = l1 / double(restored.numel());
    pm.psnr = psnr(restored, gt);
    pm.ssim = ssim(restored, gt);
    pm.tv_restored = tv(restored);
    rep.per_pair.push_back(pm);
    l1_acc += pm.l1;
    psnr_acc += pm.psnr;
    ssim_acc += pm.ssim;
    tv_acc += pm.tv_restored;
    fa.add(fx.extract(restored));
    fb.add(fx.extract(gt));
  }
  rep.pairs = int(restored_gt.size());
  rep.l1_pct = 100.0 * l1_acc / rep.pairs;
  rep.psnr = psnr_acc / rep.pairs;
  rep.ssim_pct = 100.0 * ssim_acc / rep.pairs;
  rep.tv_pct = 100.0 * tv_acc / rep.pairs;
  rep.fid = fid(fa, fb);
  rep.kid = kid(fa, fb);
  return rep;
}

MetricReport evaluate_dir(const std::string& restored_dir,
                          const std::string& gt_dir) {
  namespace fs = std::filesystem;
  std::map<std::string, fs::path> restored, gt;
  try {
    for (const auto& e : fs::directory_iterator(restored_dir))
      if (e.path().extension() == ".ppm")
        restored[e.path().filename().string()] = e.path();
    for (const auto& e : fs::directory_iterator(gt_dir))
      if (e.path().extension() == ".ppm")
        gt[e.path().filename().string()] = e.path();
  } catch (const fs::filesystem_error& err) {
    throw IoError(std::string("evaluate_dir: ") + err.what());
  }
  std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs;
  std::vector<std::string> names;
  for (const auto& [name, rp] : restored) {
    auto it = gt.find(name);
    if (it == gt.end()) continue;
    pairs.emplace_back(read_ppm(rp.string()), read_ppm(it->second.string()));
    names.push_back(name);
  }
  if (pairs.size() < 2)
    throw IoError("evaluate_dir: fewer than 2 matching pairs between " +
                  restored_dir + " and " + gt_dir);
  FeatureExtractor fx;
  MetricReport rep = evaluate_pairs(pairs, fx);
  for (size_t i = 0; i < names.size(); ++i)
    rep.per_pair[i].name = names[i];
  return rep;
}

void write_metric_report(const std::string& path, const MetricReport& report,
                         const std::string& method) {
  std::ofstream f(path);
  if (!f) throw IoError("write_metric_report: cannot open " + path);
  f << MetricReport::csv_header() << '\n' << report.csv_row(method) << '\n';
}

}  // namespace cma
