#pragma once

// Procedural textures: the striped corpus used for desk-scale runs and the
// anomaly sources (blotches, gradients, stripes) used when no natural-image
// pool is configured.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "fmrnet/imaging.hpp"

namespace fmrnet::procedural {

struct StripeParams {
  double period = 8.0;
  double period_jitter = 0.5;
  double angle = 0.0;          // radians; 0 gives vertical stripes
  double angle_jitter = 0.05;
  double contrast = 0.35;
  double mean = 0.5;
  double noise = 0.02;
};

inline Image striped_texture(int height, int width, int channels, const StripeParams& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, p.noise);
  const double period = p.period + p.period_jitter * u(rng);
  const double angle = p.angle + p.angle_jitter * u(rng);
  const double phase = phase_dist(rng);
  const double cx = std::cos(angle), sy = std::sin(angle);
  Image img(height, width, channels);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double base = p.mean + p.contrast * std::sin(2.0 * std::numbers::pi * (x * cx + y * sy) / period + phase);
      for (int c = 0; c < channels; ++c)
        img.at(c, y, x) = static_cast<float>(std::clamp(base + noise(rng), 0.0, 1.0));
    }
  return img;
}

// Sum of bilinearly upsampled random grids at several scales.
inline Image blotches(int height, int width, int channels, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Map2D acc = Map2D::Zero(height, width);
  double amp = 1.0, total = 0.0;
  for (int octave = 0; octave < 3; ++octave) {
    const int cells = 2 << octave;
    Map2D grid(cells + 1, cells + 1);
    for (Eigen::Index i = 0; i < grid.size(); ++i) grid.data()[i] = u(rng);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double gy = static_cast<double>(y) / height * cells, gx = static_cast<double>(x) / width * cells;
        const int iy = static_cast<int>(gy), ix = static_cast<int>(gx);
        const double fy = gy - iy, fx = gx - ix;
        const double v = (1 - fy) * ((1 - fx) * grid(iy, ix) + fx * grid(iy, ix + 1)) +
                         fy * ((1 - fx) * grid(iy + 1, ix) + fx * grid(iy + 1, ix + 1));
        acc(y, x) += amp * v;
      }
    total += amp;
    amp *= 0.5;
  }
  acc /= total;
  // stretch to the full range so blotches have strong contrast
  const double lo = acc.minCoeff(), hi = acc.maxCoeff();
  if (hi > lo) acc = (acc - lo) / (hi - lo);
  Image img(height, width, channels);
  std::uniform_real_distribution<double> tint(0.6, 1.0);
  for (int c = 0; c < channels; ++c) {
    const double t = channels == 1 ? 1.0 : tint(rng);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) img.at(c, y, x) = static_cast<float>(acc(y, x) * t);
  }
  return img;
}

inline Image gradient(int height, int width, int channels, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double angle = 2.0 * std::numbers::pi * u(rng);
  const double a = u(rng), b = u(rng);
  const double cx = std::cos(angle), sy = std::sin(angle);
  const double span = std::abs(cx) * width + std::abs(sy) * height;
  Image img(height, width, channels);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double t = ((x - width / 2.0) * cx + (y - height / 2.0) * sy) / span + 0.5;
      t = std::clamp(t, 0.0, 1.0);
      for (int c = 0; c < channels; ++c) img.at(c, y, x) = static_cast<float>(a + (b - a) * t);
    }
  return img;
}

inline Image random_stripes(int height, int width, int channels, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  StripeParams p;
  p.period = 3.0 + 10.0 * u(rng);
  p.period_jitter = 0.0;
  p.angle = std::numbers::pi * u(rng);
  p.angle_jitter = 0.0;
  p.contrast = 0.2 + 0.3 * u(rng);
  p.mean = 0.2 + 0.6 * u(rng);
  p.noise = 0.05;
  return striped_texture(height, width, channels, p, rng);
}

// One of the anomaly source families, chosen uniformly.
inline Image anomaly_texture(int height, int width, int channels, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> family(0, 2);
  switch (family(rng)) {
    case 0: return blotches(height, width, channels, rng);
    case 1: return gradient(height, width, channels, rng);
    default: return random_stripes(height, width, channels, rng);
  }
}

}  // namespace fmrnet::procedural
