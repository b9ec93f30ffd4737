// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics: L1, FID, KID, TV, PSNR, SSIM. FID/KID embed images
// with a frozen random conv feature extractor (fixed seed), so their
// absolute values are internally comparable across runs of this project but
// not against Inception-based numbers.
#pragma once

#include <string>
#include <vector>

#include "cma/tensor.hpp"

namespace cma {

class FeatureExtractor {
 public:
  explicit FeatureExtractor(uint64_t seed = 77, int in_channels = 3,
                            int feature_dim = 64);
  // (C,H,W) in [0,1], H and W divisible by 16 -> feature vector of dim()
  std::vector<float> extract(const Tensor<float>& image) const;
  int dim() const { return dim_; }

 private:
  int in_channels_, dim_;
  Tensor<float> w1_, b1_, w2_, b2_, w3_, b3_, w4_, b4_;
};

struct FeatureSet {
  int n = 0, d = 0;
  std::vector<float> data;  // n x d row-major
  void add(const std::vector<float>& row);
};

// 10*log10(peak^2 / MSE); 99.0 dB sentinel when MSE == 0
double psnr(const Tensor<float>& x, const Tensor<float>& y, double peak = 1.0);

// mean over channels to grayscale, 7x7 uniform window, valid positions,
// C1=(0.01 peak)^2, C2=(0.03 peak)^2
double ssim(const Tensor<float>& x, const Tensor<float>& y, double peak = 1.0);

// anisotropic total variation, backward differences, boundary terms
// omitted, mean over all pixels and channels
double tv(const Tensor<float>& x);

// Frechet distance |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)); the
// matrix square root goes through the symmetrized product, eigenvalues
// clamped at zero
double fid(const FeatureSet& a, const FeatureSet& b);

// unbiased MMD^2 with polynomial kernel k(x,y) = (x.y/d + 1)^3
double kid(const FeatureSet& a, const FeatureSet& b);

struct PairMetrics {
  std::string name;
  double l1 = 0, psnr = 0, ssim = 0, tv_restored = 0;
};

struct MetricReport {
  double l1_pct = 0, fid = 0, kid = 0, tv_pct = 0, psnr = 0, ssim_pct = 0;
  int pairs = 0;
  std::vector<PairMetrics> per_pair;

  static const char* csv_header() {
    return "method,l1_pct,fid,kid,tv_pct,psnr,ssim_pct";
  }
  std::string csv_row(const std::string& method) const;
};

MetricReport evaluate_pairs(
    const std::vector<std::pair<Tensor<float>, Tensor<float>>>& restored_gt,
    const FeatureExtractor& fx);

// pairs files by name across the two directories (PPM images)
MetricReport evaluate_dir(const std::string& restored_dir,
                          const std::string& gt_dir);

void write_metric_report(const std::string& path, const MetricReport& report,
                         const std::string& method);

}  // namespace cma
