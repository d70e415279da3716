#pragma once

// Multimodal anomaly maps (gradient magnitude similarity, SSIM, residual),
// their fusion and thresholding, and the evaluation metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "fmrnet/imaging.hpp"

namespace fmrnet::inspect {

enum class SsimMode { covariance, strict };

struct InspectionConfig {
  double c0 = 1e-4;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
  int ssim_window = 11;
  double ssim_sigma = 1.5;
  SsimMode ssim_mode = SsimMode::covariance;
  int median_kernel = 3;  // 0 or 1 disables
  bool normalize_maps = true;
  double k_sigma = 3.0;

  void validate() const {
    if (!(c0 > 0 && c1 > 0 && c2 > 0)) throw std::invalid_argument("stability constants must be positive");
    if (ssim_window < 1 || ssim_window % 2 == 0) throw std::invalid_argument("SSIM window must be odd");
    if (!(ssim_sigma > 0)) throw std::invalid_argument("SSIM sigma must be positive");
    if (median_kernel > 1 && median_kernel % 2 == 0) throw std::invalid_argument("median kernel must be odd");
  }
};

namespace detail {

inline cv::Mat view(Map2D& m) { return cv::Mat(static_cast<int>(m.rows()), static_cast<int>(m.cols()), CV_64F, m.data()); }
inline cv::Mat view(const Map2D& m) {
  return cv::Mat(static_cast<int>(m.rows()), static_cast<int>(m.cols()), CV_64F, const_cast<double*>(m.data()));
}

inline Map2D correlate(const Map2D& src, const cv::Mat& kernel) {
  Map2D out(src.rows(), src.cols());
  cv::Mat dst = view(out);
  cv::filter2D(view(src), dst, CV_64F, kernel, cv::Point(-1, -1), 0.0, cv::BORDER_REFLECT_101);
  return out;
}

inline Map2D gaussian(const Map2D& src, int window, double sigma) {
  Map2D out(src.rows(), src.cols());
  cv::Mat dst = view(out);
  const cv::Mat g = cv::getGaussianKernel(window, sigma, CV_64F);
  cv::sepFilter2D(view(src), dst, CV_64F, g, g, cv::Point(-1, -1), 0.0, cv::BORDER_REFLECT_101);
  return out;
}

inline void require_same(const Map2D& a, const Map2D& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace detail

// 3x3 Prewitt kernels scaled by 1/3 (unit response to a unit step).
inline cv::Mat prewitt_x() {
  return (cv::Mat_<double>(3, 3) << -1, 0, 1, -1, 0, 1, -1, 0, 1) / 3.0;
}
inline cv::Mat prewitt_y() {
  return (cv::Mat_<double>(3, 3) << -1, -1, -1, 0, 0, 0, 1, 1, 1) / 3.0;
}

inline Map2D gradient_magnitude(const Map2D& img) {
  const Map2D gx = detail::correlate(img, prewitt_x());
  const Map2D gy = detail::correlate(img, prewitt_y());
  return (gx.square() + gy.square()).sqrt();
}

inline Map2D gms_map(const Map2D& a, const Map2D& b, double c0) {
  detail::require_same(a, b, "gms_map");
  const Map2D ga = gradient_magnitude(a), gb = gradient_magnitude(b);
  return (2.0 * ga * gb + c0) / (ga.square() + gb.square() + c0);
}

inline Map2D ssim_map(const Map2D& a, const Map2D& b, const InspectionConfig& cfg) {
  detail::require_same(a, b, "ssim_map");
  const int w = cfg.ssim_window;
  const double s = cfg.ssim_sigma;
  const Map2D mu_a = detail::gaussian(a, w, s), mu_b = detail::gaussian(b, w, s);
  const Map2D var_a = detail::gaussian(a * a, w, s) - mu_a.square();
  const Map2D var_b = detail::gaussian(b * b, w, s) - mu_b.square();
  Map2D cross;
  if (cfg.ssim_mode == SsimMode::covariance) {
    cross = detail::gaussian(a * b, w, s) - mu_a * mu_b;
  } else {
    cross = var_a.max(0.0).sqrt() * var_b.max(0.0).sqrt();
  }
  return ((2.0 * mu_a * mu_b + cfg.c1) * (2.0 * cross + cfg.c2)) /
         ((mu_a.square() + mu_b.square() + cfg.c1) * (var_a + var_b + cfg.c2));
}

// Channel-mean absolute difference.
inline Map2D residual_map(const Image& a, const Image& b) {
  if (a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels())
    throw std::invalid_argument("residual_map: shape mismatch");
  Map2D out = Map2D::Zero(a.height(), a.width());
  for (int c = 0; c < a.channels(); ++c)
    for (int y = 0; y < a.height(); ++y)
      for (int x = 0; x < a.width(); ++x) out(y, x) += std::abs(static_cast<double>(a.at(c, y, x)) - b.at(c, y, x));
  return out / a.channels();
}

struct AnomalyMapSet {
  Map2D gms;       // A_m1 = 1 - GMS
  Map2D ssim;      // A_m2 = 1 - SSIM
  Map2D residual;  // A_m3
  Map2D fused;     // empty until fuse()
};

// Raw modality maps of a candidate and its reconstruction. Multichannel
// inputs are compared on their channel mean for GMS and SSIM.
inline AnomalyMapSet anomaly_maps(const Image& candidate, const Image& rec, const InspectionConfig& cfg) {
  const Map2D a = candidate.luminance(), b = rec.luminance();
  AnomalyMapSet m;
  m.gms = 1.0 - gms_map(a, b, cfg.c0);
  m.ssim = 1.0 - ssim_map(a, b, cfg);
  m.residual = residual_map(candidate, rec);
  return m;
}

inline Map2D median_filter(const Map2D& m, int kernel) {
  if (kernel <= 1) return m;
  if (kernel % 2 == 0) throw std::invalid_argument("median kernel must be odd");
  cv::Mat src;
  detail::view(m).convertTo(src, CV_32F);
  cv::Mat dst;
  if (kernel <= 5) {
    cv::medianBlur(src, dst, kernel);
  } else {
    throw std::invalid_argument("median kernel larger than 5 is not supported for float maps");
  }
  Map2D out(m.rows(), m.cols());
  cv::Mat o = detail::view(out);
  dst.convertTo(o, CV_64F);
  return out;
}

inline Map2D minmax_normalize(const Map2D& m) {
  const double lo = m.minCoeff(), hi = m.maxCoeff();
  if (!(hi > lo)) return Map2D::Zero(m.rows(), m.cols());
  return (m - lo) / (hi - lo);
}

// Product of the (optionally median-filtered and min-max normalized) maps.
inline Map2D fuse(const AnomalyMapSet& maps, const InspectionConfig& cfg) {
  detail::require_same(maps.gms, maps.ssim, "fuse");
  detail::require_same(maps.gms, maps.residual, "fuse");
  Map2D out = Map2D::Ones(maps.gms.rows(), maps.gms.cols());
  for (const Map2D* m : {&maps.gms, &maps.ssim, &maps.residual}) {
    Map2D x = median_filter(*m, cfg.median_kernel);
    if (cfg.normalize_maps) x = minmax_normalize(x);
    out *= x;
  }
  return out;
}

inline AnomalyMapSet& fuse_in_place(AnomalyMapSet& maps, const InspectionConfig& cfg) {
  maps.fused = fuse(maps, cfg);
  return maps;
}

struct Threshold {
  double value = 0.0;
  double mean = 0.0;
  double stddev = 0.0;
};

inline Threshold ksigma_threshold(const Map2D& a, double k) {
  Threshold t;
  t.mean = a.mean();
  t.stddev = std::sqrt((a - t.mean).square().mean());
  t.value = t.mean + k * t.stddev;
  return t;
}

// 1 where A > mean(A) + k std(A) (population std).
inline Map2D binarize_ksigma(const Map2D& a, double k, Threshold* used = nullptr) {
  const auto t = ksigma_threshold(a, k);
  if (used) *used = t;
  return (a > t.value).cast<double>();
}

// Mann-Whitney form with midranks for ties.
inline double auc_roc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc_roc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t npos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) pos_rank_sum += midrank, ++npos;
    i = j;
  }
  const std::size_t nneg = scores.size() - npos;
  if (npos == 0 || nneg == 0) throw std::invalid_argument("auc_roc: need both positive and negative samples");
  const double np = static_cast<double>(npos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(nneg));
}

struct PrfResult {
  double precision = 0, recall = 0, f1 = 0;
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  bool precision_undefined = false;  // no predicted positives
  bool recall_undefined = false;     // no actual positives
  bool f1_undefined = false;
};

// Pixelwise counts; values > 0.5 are positives. Undefined ratios become 0 and
// raise the matching flag.
inline PrfResult prf(const Map2D& mask, const Map2D& truth) {
  detail::require_same(mask, truth, "prf");
  PrfResult r;
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    const bool p = mask.data()[i] > 0.5, t = truth.data()[i] > 0.5;
    if (p && t) ++r.tp;
    else if (p) ++r.fp;
    else if (t) ++r.fn;
    else ++r.tn;
  }
  if (r.tp + r.fp == 0) r.precision_undefined = true;
  else r.precision = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp);
  if (r.tp + r.fn == 0) r.recall_undefined = true;
  else r.recall = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
  if (r.precision + r.recall > 0) r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  else r.f1_undefined = true;
  return r;
}

struct EvalReport {
  double auc_roc = 0, precision = 0, recall = 0, f1 = 0;
  double threshold = 0;
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

}  // namespace fmrnet::inspect
