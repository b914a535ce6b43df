#pragma once

// Point-cloud datasets for the 2D experiments.

#include <vector>

#include "direl/linalg.hpp"

namespace direl {

struct PointCloud {
  DenseMatrix points;  // N x d, one point per row

  int size() const { return points.rows(); }
  int dim() const { return points.cols(); }
};

// column-per-point batch used by field/layer evaluation
inline DenseMatrix to_batch(const PointCloud& pc) { return transpose(pc.points); }

inline PointCloud from_batch(const DenseMatrix& batch) { return {transpose(batch)}; }

// S-curve in [-4, 4]^2: t ~ U[-3pi/2, 3pi/2], point = (4 sin t,
// 2 sgn(t)(cos t - 1)), plus isotropic Gaussian noise of the given scale.
inline PointCloud make_scurve(int n, double noise, uint64_t seed) {
  if (n < 1) throw std::invalid_argument("make_scurve: n must be >= 1");
  PointCloud pc{DenseMatrix(n, 2)};
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(-1.5 * M_PI, 1.5 * M_PI);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const double t = unif(rng);
    const double sgn = t >= 0.0 ? 1.0 : -1.0;
    const double g1 = gauss(rng);
    const double g2 = gauss(rng);
    pc.points(i, 0) = 4.0 * std::sin(t) + noise * g1;
    pc.points(i, 1) = 2.0 * sgn * (std::cos(t) - 1.0) + noise * g2;
  }
  return pc;
}

// Circle of the given radius centered at the origin; angles are evenly
// spaced, the seed drives only the noise.
inline PointCloud make_circle(int n, double radius, double noise, uint64_t seed) {
  if (n < 1) throw std::invalid_argument("make_circle: n must be >= 1");
  if (!(radius > 0.0)) throw std::invalid_argument("make_circle: radius must be positive");
  PointCloud pc{DenseMatrix(n, 2)};
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const double phi = 2.0 * M_PI * i / n;
    const double g1 = gauss(rng);
    const double g2 = gauss(rng);
    pc.points(i, 0) = radius * std::cos(phi) + noise * g1;
    pc.points(i, 1) = radius * std::sin(phi) + noise * g2;
  }
  return pc;
}

// Uniform cloud on an axis-aligned box (used as evolution start states).
inline PointCloud uniform_cloud(int n, int d, double lo, double hi, uint64_t seed) {
  if (n < 1 || d < 1) throw std::invalid_argument("uniform_cloud: n and d must be >= 1");
  PointCloud pc{DenseMatrix(n, d)};
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(lo, hi);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) pc.points(i, j) = unif(rng);
  return pc;
}

// Mean over columns of `a` of the distance to the nearest column of `ref`.
inline double mean_nearest_distance(const DenseMatrix& a, const DenseMatrix& ref) {
  if (a.rows() != ref.rows()) throw std::invalid_argument("mean_nearest_distance: dim mismatch");
  if (a.cols() == 0 || ref.cols() == 0) return 0.0;
  const int d = a.rows();
  double acc = 0.0;
  for (int j = 0; j < a.cols(); ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < ref.cols(); ++k) {
      double dist = 0.0;
      for (int i = 0; i < d; ++i) {
        const double diff = a(i, j) - ref(i, k);
        dist += diff * diff;
      }
      best = std::min(best, dist);
    }
    acc += std::sqrt(best);
  }
  return acc / a.cols();
}

}  // namespace direl
