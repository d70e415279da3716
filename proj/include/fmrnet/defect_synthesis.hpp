#pragma once

// Artificial defect generation:
//   I_s = lambda * [(1 - I_m) . I_o + I_m . I_d] + (1 - lambda) * I_d

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/imgproc.hpp>

#include "fmrnet/imaging.hpp"
#include "fmrnet/procedural.hpp"

namespace fmrnet::synth {

enum class DefectMode { occlusion, destructive };
enum class MaskShape { ellipse, polygon, brushstroke };

inline std::string to_string(MaskShape s) {
  switch (s) {
    case MaskShape::ellipse: return "ellipse";
    case MaskShape::polygon: return "polygon";
    default: return "brushstroke";
  }
}

inline MaskShape parse_mask_shape(const std::string& s) {
  if (s == "ellipse") return MaskShape::ellipse;
  if (s == "polygon") return MaskShape::polygon;
  if (s == "brushstroke") return MaskShape::brushstroke;
  throw std::invalid_argument("unknown mask shape '" + s + "'");
}

struct SyntheticDefectSpec {
  double lambda = 1.0;
  Image mask;            // binary, same shape as I_o
  Image anomaly_source;  // I_d
  DefectMode mode = DefectMode::destructive;
};

struct MaskSpec {
  std::vector<MaskShape> shapes{MaskShape::ellipse, MaskShape::polygon, MaskShape::brushstroke};
  int count = 1;
  double area_min = 0.02;
  double area_max = 0.25;
  std::uint64_t seed = 0;
};

// Evaluates the compositing equation elementwise and clips to [0,1].
inline Image composite(const Image& original, const SyntheticDefectSpec& spec) {
  const Image& m = spec.mask;
  const Image& d = spec.anomaly_source;
  auto same = [&](const Image& x) {
    return x.height() == original.height() && x.width() == original.width() && x.channels() == original.channels();
  };
  if (!same(m) || !same(d)) throw std::invalid_argument("composite: I_o, I_m and I_d must share one shape");
  if (!(spec.lambda > 0.0 && spec.lambda <= 1.0)) throw std::invalid_argument("composite: lambda must lie in (0,1]");
  Image out(original.height(), original.width(), original.channels());
  const double lam = spec.lambda;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double io = original.values()[i], im = m.values()[i], id = d.values()[i];
    const double v = lam * ((1.0 - im) * io + im * id) + (1.0 - lam) * id;
    out.values()[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

inline double mask_fraction(const Image& mask) {
  double on = 0.0;
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) on += mask.at(0, y, x) > 0.5f ? 1.0 : 0.0;
  return on / (static_cast<double>(mask.height()) * mask.width());
}

namespace detail {

inline void draw_shape(cv::Mat& canvas, MaskShape shape, double area, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int h = canvas.rows, w = canvas.cols;
  const cv::Point2d center(u(rng) * w, u(rng) * h);
  switch (shape) {
    case MaskShape::ellipse: {
      const double aspect = 0.35 + 0.65 * u(rng);
      const double a = std::sqrt(area / (std::numbers::pi * aspect));
      cv::ellipse(canvas, cv::Point(static_cast<int>(center.x), static_cast<int>(center.y)),
                  cv::Size(std::max(1, static_cast<int>(std::lround(a))), std::max(1, static_cast<int>(std::lround(a * aspect)))),
                  180.0 * u(rng), 0.0, 360.0, cv::Scalar(255), cv::FILLED);
      break;
    }
    case MaskShape::polygon: {
      std::uniform_int_distribution<int> nv(5, 9);
      const int n = nv(rng);
      std::vector<double> ang(static_cast<std::size_t>(n)), rad(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) ang[i] = 2.0 * std::numbers::pi * u(rng), rad[i] = 0.5 + 0.5 * u(rng);
      std::sort(ang.begin(), ang.end());
      std::vector<cv::Point2d> unit(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) unit[i] = {rad[i] * std::cos(ang[i]), rad[i] * std::sin(ang[i])};
      double unit_area = 0.0;
      for (int i = 0; i < n; ++i) {
        const auto& p = unit[i];
        const auto& q = unit[(i + 1) % n];
        unit_area += p.x * q.y - q.x * p.y;
      }
      unit_area = std::max(std::abs(unit_area) / 2.0, 1e-3);
      const double s = std::sqrt(area / unit_area);
      std::vector<cv::Point> pts;
      for (const auto& p : unit)
        pts.emplace_back(static_cast<int>(std::lround(center.x + s * p.x)), static_cast<int>(std::lround(center.y + s * p.y)));
      cv::fillPoly(canvas, std::vector<std::vector<cv::Point>>{pts}, cv::Scalar(255));
      break;
    }
    case MaskShape::brushstroke: {
      const int thickness = std::max(2, static_cast<int>(std::lround(std::min(h, w) / 16.0 * (1.0 + u(rng)))));
      double length = area / thickness;
      double heading = 2.0 * std::numbers::pi * u(rng);
      cv::Point2d p = center;
      std::normal_distribution<double> turn(0.0, 0.6);
      const double step = std::max(2.0, std::min(h, w) / 10.0);
      while (length > 0.0) {
        heading += turn(rng);
        const double l = std::min(step, length);
        cv::Point2d q(p.x + l * std::cos(heading), p.y + l * std::sin(heading));
        if (q.x < 0 || q.x >= w || q.y < 0 || q.y >= h) {
          heading += std::numbers::pi;  // bounce off the border
          q = cv::Point2d(std::clamp(q.x, 0.0, w - 1.0), std::clamp(q.y, 0.0, h - 1.0));
        }
        cv::line(canvas, cv::Point(static_cast<int>(p.x), static_cast<int>(p.y)),
                 cv::Point(static_cast<int>(q.x), static_cast<int>(q.y)), cv::Scalar(255), thickness);
        p = q;
        length -= l;
      }
      break;
    }
  }
}

}  // namespace detail

// Binary mask (identical across channels) whose area fraction falls within
// the configured range, widened by 10% at both ends.
inline Image random_mask(const MaskSpec& spec, int height, int width, int channels) {
  if (!(spec.area_min > 0.0 && spec.area_max < 1.0 && spec.area_min <= spec.area_max))
    throw std::invalid_argument("mask area range must lie inside (0,1)");
  if (spec.shapes.empty() || spec.count < 1) throw std::invalid_argument("mask spec needs a shape family and count >= 1");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double lo = spec.area_min * 0.9, hi = spec.area_max * 1.1;
  const double target = spec.area_min + (spec.area_max - spec.area_min) * u(rng);
  double gain = 1.0;
  constexpr int kAttempts = 64;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    cv::Mat canvas = cv::Mat::zeros(height, width, CV_8U);
    std::uniform_int_distribution<std::size_t> pick(0, spec.shapes.size() - 1);
    const double per_shape = gain * target * height * width / spec.count;
    for (int i = 0; i < spec.count; ++i) detail::draw_shape(canvas, spec.shapes[pick(rng)], per_shape, rng);
    const double frac = cv::countNonZero(canvas) / (static_cast<double>(height) * width);
    if (frac >= lo && frac <= hi) {
      Image mask(height, width, channels);
      for (int c = 0; c < channels; ++c)
        for (int y = 0; y < height; ++y)
          for (int x = 0; x < width; ++x) mask.at(c, y, x) = canvas.at<unsigned char>(y, x) ? 1.0f : 0.0f;
      return mask;
    }
    gain *= frac > 0.0 ? std::clamp(target / frac, 0.5, 2.0) : 2.0;
  }
  throw std::runtime_error("random_mask: could not satisfy area range after " + std::to_string(kAttempts) +
                           " attempts");
}

// Natural-image pool with a procedural fallback.
class AnomalySourcePool {
 public:
  AnomalySourcePool() = default;
  AnomalySourcePool(std::vector<fs::path> images, bool procedural_fallback)
      : images_(std::move(images)), procedural_(procedural_fallback) {}

  static AnomalySourcePool procedural() { return AnomalySourcePool({}, true); }

  static AnomalySourcePool from_directory(const fs::path& dir, bool procedural_fallback = true) {
    std::vector<fs::path> files;
    if (fs::is_directory(dir))
      for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    return AnomalySourcePool(std::move(files), procedural_fallback);
  }

  bool empty() const noexcept { return images_.empty() && !procedural_; }
  std::size_t size() const noexcept { return images_.size(); }

  // Picks a source and crops a height x width window from it.
  Image sample(std::uint64_t seed, int height, int width, int channels) const {
    std::mt19937_64 rng(seed);
    if (images_.empty()) {
      if (!procedural_) throw std::runtime_error("anomaly source pool is empty and procedural fallback is off");
      return procedural::anomaly_texture(height, width, channels, rng);
    }
    std::uniform_int_distribution<std::size_t> pick(0, images_.size() - 1);
    Image src = load_image(images_[pick(rng)], channels);
    if (src.height() < height || src.width() < width) {
      const double s = std::max(static_cast<double>(height) / src.height(), static_cast<double>(width) / src.width());
      src = resize_image(src, static_cast<int>(std::ceil(src.height() * s)), static_cast<int>(std::ceil(src.width() * s)));
    }
    std::uniform_int_distribution<int> oy(0, src.height() - height), ox(0, src.width() - width);
    return src.crop(oy(rng), ox(rng), height, width);
  }

 private:
  std::vector<fs::path> images_;
  bool procedural_ = true;
};

struct SynthConfig {
  double lambda_min = 0.3;
  double lambda_max = 0.9;
  double occlusion_probability = 0.5;  // otherwise destructive
  MaskSpec mask;
};

struct TrainingPair {
  Image synthetic;  // I_s
  Image clean;      // I_o
  Image mask;       // generating region
  DefectMode mode = DefectMode::destructive;
  double lambda = 1.0;
};

// Destructive defects replace the masked texture (lambda = 1). Occlusion
// defects blend the source into the masked region only: the anomaly source is
// restricted to the region (I_o elsewhere) and composited with an empty mask,
// so inside the region I_s = lambda I_o + (1 - lambda) I_d.
inline TrainingPair make_training_pair(const Image& clean, const SynthConfig& cfg, const AnomalySourcePool& pool,
                                       std::uint64_t seed, std::optional<DefectMode> force_mode = std::nullopt) {
  if (!(cfg.lambda_min > 0.0 && cfg.lambda_max < 1.0 && cfg.lambda_min <= cfg.lambda_max))
    throw std::invalid_argument("occlusion lambda range must lie inside (0,1)");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TrainingPair out;
  out.clean = clean;
  out.mode = force_mode.value_or(u(rng) < cfg.occlusion_probability ? DefectMode::occlusion : DefectMode::destructive);
  MaskSpec ms = cfg.mask;
  ms.seed = rng();
  out.mask = random_mask(ms, clean.height(), clean.width(), clean.channels());
  Image source = pool.sample(rng(), clean.height(), clean.width(), clean.channels());
  SyntheticDefectSpec spec;
  spec.mode = out.mode;
  if (out.mode == DefectMode::destructive) {
    spec.lambda = 1.0;
    spec.mask = out.mask;
    spec.anomaly_source = std::move(source);
  } else {
    spec.lambda = cfg.lambda_min + (cfg.lambda_max - cfg.lambda_min) * u(rng);
    spec.mask = Image(clean.height(), clean.width(), clean.channels(), 0.0f);
    Image restricted = clean;
    for (std::size_t i = 0; i < restricted.size(); ++i)
      if (out.mask.values()[i] > 0.5f) restricted.values()[i] = source.values()[i];
    spec.anomaly_source = std::move(restricted);
  }
  out.lambda = spec.lambda;
  out.synthetic = composite(clean, spec);
  return out;
}

}  // namespace fmrnet::synth
