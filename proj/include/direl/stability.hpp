#pragma once

// Stability function of the theta scheme, its inverse, region predicates and
// complex-grid evaluation for region/contour export.

#include <cmath>
#include <vector>

#include "direl/core.hpp"

namespace direl {

struct ThetaScheme {
  double theta = 0.0;
  double fp_tol = 1e-10;
  int fp_max_iter = 100;
  int newton_max_iter = 25;

  ThetaScheme() = default;
  explicit ThetaScheme(double th, double tol = 1e-10, int max_iter = 100)
      : theta(th), fp_tol(tol), fp_max_iter(max_iter) {
    validate();
  }

  void validate() const {
    if (!(theta >= 0.0 && theta <= 1.0))
      throw std::invalid_argument("ThetaScheme: theta must lie in [0, 1]");
    if (!(fp_tol > 0.0)) throw std::invalid_argument("ThetaScheme: fp_tol must be positive");
    if (fp_max_iter < 1) throw std::invalid_argument("ThetaScheme: fp_max_iter must be >= 1");
  }
};

// R_theta(z) = (1 + (1-theta) z) / (1 - theta z)
inline Complex stab_value(double theta, Complex z) {
  const Complex num = 1.0 + (1.0 - theta) * z;
  const Complex den = 1.0 - theta * z;
  if (std::abs(den) == 0.0) throw pole_error("stab_value: z is the pole 1/theta");
  const Complex r = num / den;
  if (!std::isfinite(r.real()) || !std::isfinite(r.imag()))
    throw pole_error("stab_value: evaluation overflowed at the pole");
  return r;
}

// R_theta^{-1}(z) = (1 - z) / (theta (1 - z) - 1)
inline Complex stab_inverse(double theta, Complex z) {
  const Complex num = 1.0 - z;
  const Complex den = theta * num - 1.0;
  if (std::abs(den) == 0.0) throw pole_error("stab_inverse: z is the pole 1 - 1/theta");
  const Complex r = num / den;
  if (!std::isfinite(r.real()) || !std::isfinite(r.imag()))
    throw pole_error("stab_inverse: evaluation overflowed at the pole");
  return r;
}

inline double stab_inverse_real(double theta, double z) {
  const Complex c = stab_inverse(theta, Complex(z, 0.0));
  return c.real();
}

struct RegionCell {
  double magnitude = 0.0;  // |R_theta(z)|
  bool inside = false;     // |R_theta(z)| < 1
  bool pole = false;
};

inline RegionCell classify_point(double theta, Complex z) {
  RegionCell cell;
  try {
    cell.magnitude = std::abs(stab_value(theta, z));
    cell.inside = cell.magnitude < 1.0;
  } catch (const pole_error&) {
    cell.magnitude = std::numeric_limits<double>::infinity();
    cell.inside = false;
    cell.pole = true;
  }
  return cell;
}

// Stability region membership: |R_theta(z)| < 1.  A pole is not in the region.
inline bool in_region(double theta, Complex z) { return classify_point(theta, z).inside; }

struct RegionGrid {
  double re_min = 0.0, re_max = 0.0;
  double im_min = 0.0, im_max = 0.0;
  int n = 0;
  // row-major over (im, re): index = i_im * n + j_re
  std::vector<double> magnitude;
  std::vector<uint8_t> inside;
  std::vector<uint8_t> pole;

  double re_at(int j) const { return re_min + (re_max - re_min) * j / (n - 1); }
  double im_at(int i) const { return im_min + (im_max - im_min) * i / (n - 1); }
  size_t index(int i, int j) const { return static_cast<size_t>(i) * n + j; }
};

inline RegionGrid region_grid(double theta, double re_min, double re_max, double im_min,
                              double im_max, int n) {
  if (n < 2) throw std::invalid_argument("region_grid: n must be >= 2");
  RegionGrid g;
  g.re_min = re_min;
  g.re_max = re_max;
  g.im_min = im_min;
  g.im_max = im_max;
  g.n = n;
  const size_t cells = static_cast<size_t>(n) * n;
  g.magnitude.resize(cells);
  g.inside.resize(cells);
  g.pole.resize(cells);
  for (int i = 0; i < n; ++i) {
    const double im = g.im_at(i);
    for (int j = 0; j < n; ++j) {
      const RegionCell c = classify_point(theta, Complex(g.re_at(j), im));
      const size_t t = g.index(i, j);
      g.magnitude[t] = c.magnitude;
      g.inside[t] = c.inside ? 1 : 0;
      g.pole[t] = c.pole ? 1 : 0;
    }
  }
  return g;
}

// Disk B(c, r) on the real axis with the stability-function values that
// produced it: c = R^{-1}(c_hat), r = max(0, R^{-1}(L) - c).
struct StabilityDisk {
  double c = 0.0;
  double r = 0.0;
  double c_hat = 0.0;
  double L = 0.0;

  static StabilityDisk from_targets(double theta, double c_hat, double L) {
    if (!(c_hat > 0.0) || !(L > 0.0))
      throw std::invalid_argument("StabilityDisk: c_hat and L must be positive");
    StabilityDisk d;
    d.c_hat = c_hat;
    d.L = L;
    d.c = stab_inverse_real(theta, c_hat);
    d.r = std::max(0.0, stab_inverse_real(theta, L) - d.c);
    return d;
  }
};

struct DiskSupResult {
  double sup = 0.0;
  Complex argmax;
};

// Max of |R_theta| over the disk boundary by exhaustive sampling; phi = 0
// (the rightmost point c + r) is always included in the sample set.  The max
// over the closed disk equals the boundary max (maximum modulus principle).
inline DiskSupResult disk_sup_detail(double theta, const StabilityDisk& disk, int samples = 4096) {
  if (samples < 1) throw std::invalid_argument("disk_sup: samples must be >= 1");
  if (disk.r < 0.0) throw std::invalid_argument("disk_sup: negative radius");
  if (theta > 0.0) {
    const double pole = 1.0 / theta;
    if (std::abs(pole - disk.c) <= disk.r)
      throw pole_error("disk_sup: pole of R_theta lies inside the disk");
  }
  DiskSupResult best;
  if (disk.r == 0.0) {
    best.argmax = Complex(disk.c, 0.0);
    best.sup = std::abs(stab_value(theta, best.argmax));
    return best;
  }
  best.sup = -1.0;
  const double two_pi = 2.0 * M_PI;
  for (int k = 0; k < samples; ++k) {
    const double phi = two_pi * k / samples;
    const Complex z(disk.c + disk.r * std::cos(phi), disk.r * std::sin(phi));
    const double v = std::abs(stab_value(theta, z));
    if (v > best.sup) {
      best.sup = v;
      best.argmax = z;
    }
  }
  return best;
}

inline double disk_sup(double theta, const StabilityDisk& disk, int samples = 4096) {
  return disk_sup_detail(theta, disk, samples).sup;
}

}  // namespace direl
