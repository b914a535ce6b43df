#pragma once

// Self-contained dense linear algebra for desk-scale dimensions (d <= ~16):
// row-major matrices, partial-pivot LU, Hessenberg + shifted-QR eigenvalues,
// power-iteration spectral norms and the stochastic Hutchinson estimator.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <vector>

#include "direl/core.hpp"

namespace direl {

class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), a_(static_cast<size_t>(rows) * cols, fill) {
    if (rows < 0 || cols < 0) throw std::invalid_argument("DenseMatrix: negative dimension");
  }

  static DenseMatrix identity(int n) {
    DenseMatrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static DenseMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const int r = static_cast<int>(rows.size());
    const int c = r == 0 ? 0 : static_cast<int>(rows.begin()->size());
    DenseMatrix m(r, c);
    int i = 0;
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != c)
        throw std::invalid_argument("DenseMatrix::from_rows: ragged rows");
      int j = 0;
      for (double x : row) m(i, j++) = x;
      ++i;
    }
    return m;
  }

  static DenseMatrix column(std::span<const double> v) {
    DenseMatrix m(static_cast<int>(v.size()), 1);
    std::copy(v.begin(), v.end(), m.a_.begin());
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return a_.size(); }
  bool empty() const { return a_.empty(); }
  bool square() const { return rows_ == cols_; }

  double& operator()(int i, int j) { return a_[static_cast<size_t>(i) * cols_ + j]; }
  double operator()(int i, int j) const { return a_[static_cast<size_t>(i) * cols_ + j]; }

  double* data() { return a_.data(); }
  const double* data() const { return a_.data(); }
  std::span<double> flat() { return a_; }
  std::span<const double> flat() const { return a_; }

  std::span<double> row(int i) { return {a_.data() + static_cast<size_t>(i) * cols_, static_cast<size_t>(cols_)}; }
  std::span<const double> row(int i) const {
    return {a_.data() + static_cast<size_t>(i) * cols_, static_cast<size_t>(cols_)};
  }

  bool all_finite() const {
    for (double x : a_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  friend bool operator==(const DenseMatrix& a, const DenseMatrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.a_ == b.a_;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> a_;
};

// ---------------------------------------------------------------------------
// vector helpers

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double norm_inf(std::span<const double> a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

inline void scale_in_place(std::span<double> a, double k) {
  for (double& x : a) x *= k;
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

// ---------------------------------------------------------------------------
// matrix helpers

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  DenseMatrix c(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    double* ci = c.data() + static_cast<size_t>(i) * c.cols();
    for (int k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* bk = b.data() + static_cast<size_t>(k) * b.cols();
      for (int j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

inline std::vector<double> matvec(const DenseMatrix& a, std::span<const double> x) {
  if (a.cols() != static_cast<int>(x.size()))
    throw std::invalid_argument("matvec: dimension mismatch");
  std::vector<double> y(a.rows(), 0.0);
  for (int i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
  return y;
}

inline std::vector<double> matvec_transposed(const DenseMatrix& a, std::span<const double> x) {
  if (a.rows() != static_cast<int>(x.size()))
    throw std::invalid_argument("matvec_transposed: dimension mismatch");
  std::vector<double> y(a.cols(), 0.0);
  for (int i = 0; i < a.rows(); ++i) axpy(x[i], a.row(i), y);
  return y;
}

inline DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix t(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline DenseMatrix scaled(const DenseMatrix& a, double k) {
  DenseMatrix c = a;
  scale_in_place(c.flat(), k);
  return c;
}

inline DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("add: shape mismatch");
  DenseMatrix c = a;
  for (size_t i = 0; i < c.size(); ++i) c.flat()[i] += b.flat()[i];
  return c;
}

inline DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("sub: shape mismatch");
  DenseMatrix c = a;
  for (size_t i = 0; i < c.size(); ++i) c.flat()[i] -= b.flat()[i];
  return c;
}

inline double frobenius_norm_sq(const DenseMatrix& a) { return dot(a.flat(), a.flat()); }
inline double frobenius_norm(const DenseMatrix& a) { return std::sqrt(frobenius_norm_sq(a)); }

inline double max_abs(const DenseMatrix& a) { return norm_inf(a.flat()); }

inline std::vector<double> get_col(const DenseMatrix& a, int j) {
  std::vector<double> c(a.rows());
  for (int i = 0; i < a.rows(); ++i) c[i] = a(i, j);
  return c;
}

inline void set_col(DenseMatrix& a, int j, std::span<const double> v) {
  for (int i = 0; i < a.rows(); ++i) a(i, j) = v[i];
}

// ---------------------------------------------------------------------------
// LU factorization (partial pivoting)

class LuFactor {
 public:
  static LuFactor factor(const DenseMatrix& a) {
    if (!a.square()) throw std::invalid_argument("LuFactor: matrix must be square");
    LuFactor f;
    f.n_ = a.rows();
    f.lu_ = a;
    f.piv_.resize(f.n_);
    // Pivot threshold scales with the largest entry (desk-scale conditioning).
    const double threshold = 1e-12 * max_abs(a);
    for (int k = 0; k < f.n_; ++k) {
      int p = k;
      double best = std::abs(f.lu_(k, k));
      for (int i = k + 1; i < f.n_; ++i) {
        const double v = std::abs(f.lu_(i, k));
        if (v > best) {
          best = v;
          p = i;
        }
      }
      if (best <= threshold)
        throw singular_error("LU factorization: pivot below threshold (singular matrix)");
      if (p != k) {
        for (int j = 0; j < f.n_; ++j) std::swap(f.lu_(k, j), f.lu_(p, j));
        f.parity_ = -f.parity_;
      }
      f.piv_[k] = p;
      const double inv = 1.0 / f.lu_(k, k);
      for (int i = k + 1; i < f.n_; ++i) {
        const double m = f.lu_(i, k) * inv;
        f.lu_(i, k) = m;
        if (m == 0.0) continue;
        for (int j = k + 1; j < f.n_; ++j) f.lu_(i, j) -= m * f.lu_(k, j);
      }
    }
    return f;
  }

  int dim() const { return n_; }

  std::vector<double> solve(std::span<const double> b) const {
    if (static_cast<int>(b.size()) != n_) throw std::invalid_argument("LuFactor::solve: size mismatch");
    std::vector<double> x(b.begin(), b.end());
    // apply the recorded interchanges first, then the triangular solves
    for (int k = 0; k < n_; ++k) std::swap(x[k], x[piv_[k]]);
    for (int k = 0; k < n_; ++k)
      for (int i = k + 1; i < n_; ++i) x[i] -= lu_(i, k) * x[k];
    for (int i = n_ - 1; i >= 0; --i) {
      for (int j = i + 1; j < n_; ++j) x[i] -= lu_(i, j) * x[j];
      x[i] /= lu_(i, i);
    }
    return x;
  }

  DenseMatrix solve_matrix(const DenseMatrix& b) const {
    if (b.rows() != n_) throw std::invalid_argument("LuFactor::solve_matrix: size mismatch");
    DenseMatrix x(n_, b.cols());
    std::vector<double> col(n_);
    for (int j = 0; j < b.cols(); ++j) {
      for (int i = 0; i < n_; ++i) col[i] = b(i, j);
      auto sol = solve(col);
      set_col(x, j, sol);
    }
    return x;
  }

  double determinant() const {
    double d = parity_;
    for (int i = 0; i < n_; ++i) d *= lu_(i, i);
    return d;
  }

 private:
  int n_ = 0;
  DenseMatrix lu_;
  std::vector<int> piv_;
  double parity_ = 1.0;
};

inline std::vector<double> lu_solve(const DenseMatrix& a, std::span<const double> b) {
  if (a.rows() != static_cast<int>(b.size()))
    throw std::invalid_argument("lu_solve: right-hand side size mismatch");
  return LuFactor::factor(a).solve(b);
}

// ---------------------------------------------------------------------------
// eigenvalues: Householder Hessenberg reduction + shifted QR (Francis double
// shift, eigenvalues only).  Classic EISPACK hqr structure; see Trefethen &
// Bau, "Numerical Linear Algebra", Lectures 26 and 38.

namespace detail {

inline void hessenberg_reduce(DenseMatrix& h) {
  const int n = h.rows();
  std::vector<double> v(n, 0.0);
  for (int k = 0; k + 2 < n; ++k) {
    double scale = 0.0;
    for (int i = k + 1; i < n; ++i) scale = std::max(scale, std::abs(h(i, k)));
    if (scale == 0.0) continue;
    double xnorm = 0.0;
    for (int i = k + 1; i < n; ++i) {
      const double t = h(i, k) / scale;
      xnorm += t * t;
    }
    xnorm = scale * std::sqrt(xnorm);
    const double x1 = h(k + 1, k);
    const double alpha = x1 >= 0.0 ? -xnorm : xnorm;
    v[k + 1] = x1 - alpha;
    for (int i = k + 2; i < n; ++i) v[i] = h(i, k);
    double vnorm = 0.0;
    for (int i = k + 1; i < n; ++i) vnorm += v[i] * v[i];
    vnorm = std::sqrt(vnorm);
    if (vnorm == 0.0) continue;
    for (int i = k + 1; i < n; ++i) v[i] /= vnorm;
    // left reflection on rows k+1..n-1
    for (int j = k; j < n; ++j) {
      double s = 0.0;
      for (int i = k + 1; i < n; ++i) s += v[i] * h(i, j);
      s *= 2.0;
      for (int i = k + 1; i < n; ++i) h(i, j) -= s * v[i];
    }
    // right reflection on columns k+1..n-1
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = k + 1; j < n; ++j) s += h(i, j) * v[j];
      s *= 2.0;
      for (int j = k + 1; j < n; ++j) h(i, j) -= s * v[j];
    }
    h(k + 1, k) = alpha;
    for (int i = k + 2; i < n; ++i) h(i, k) = 0.0;
  }
}

// Eigenvalues of an upper Hessenberg matrix, written into (wr, wi).
inline void hqr_eigenvalues(DenseMatrix& h, std::vector<double>& wr, std::vector<double>& wi) {
  const int n = h.rows();
  wr.assign(n, 0.0);
  wi.assign(n, 0.0);
  const double eps = std::numeric_limits<double>::epsilon();
  double anorm = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = std::max(i - 1, 0); j < n; ++j) anorm += std::abs(h(i, j));
  if (anorm == 0.0) return;  // zero matrix
  int nn = n - 1;
  double t = 0.0;
  while (nn >= 0) {
    int its = 0;
    int l = 0;
    do {
      for (l = nn; l >= 1; --l) {
        double s = std::abs(h(l - 1, l - 1)) + std::abs(h(l, l));
        if (s == 0.0) s = anorm;
        if (std::abs(h(l, l - 1)) <= eps * s) {
          h(l, l - 1) = 0.0;
          break;
        }
      }
      if (l < 0) l = 0;
      double x = h(nn, nn);
      if (l == nn) {
        wr[nn] = x + t;
        wi[nn] = 0.0;
        --nn;
      } else {
        double y = h(nn - 1, nn - 1);
        double w = h(nn, nn - 1) * h(nn - 1, nn);
        if (l == nn - 1) {
          const double p = 0.5 * (y - x);
          const double q = p * p + w;
          double z = std::sqrt(std::abs(q));
          x += t;
          if (q >= 0.0) {
            z = p + (p >= 0.0 ? z : -z);
            wr[nn - 1] = wr[nn] = x + z;
            if (z != 0.0) wr[nn] = x - w / z;
            wi[nn - 1] = wi[nn] = 0.0;
          } else {
            wr[nn - 1] = wr[nn] = x + p;
            wi[nn] = z;
            wi[nn - 1] = -z;
          }
          nn -= 2;
        } else {
          if (its == 60)
            throw convergence_error("eigenvalues: QR iteration budget exhausted");
          if (its > 0 && its % 10 == 0) {
            // exceptional shift
            t += x;
            for (int i = 0; i <= nn; ++i) h(i, i) -= x;
            const double s = std::abs(h(nn, nn - 1)) + std::abs(h(nn - 1, nn - 2));
            y = x = 0.75 * s;
            w = -0.4375 * s * s;
          }
          ++its;
          int m = 0;
          double p = 0.0, q = 0.0, r = 0.0, z = 0.0;
          for (m = nn - 2; m >= l; --m) {
            z = h(m, m);
            const double rr = x - z;
            const double ss = y - z;
            p = (rr * ss - w) / h(m + 1, m) + h(m, m + 1);
            q = h(m + 1, m + 1) - z - rr - ss;
            r = h(m + 2, m + 1);
            const double sc = std::abs(p) + std::abs(q) + std::abs(r);
            p /= sc;
            q /= sc;
            r /= sc;
            if (m == l) break;
            const double u = std::abs(h(m, m - 1)) * (std::abs(q) + std::abs(r));
            const double v = std::abs(p) *
                             (std::abs(h(m - 1, m - 1)) + std::abs(z) + std::abs(h(m + 1, m + 1)));
            if (u <= eps * v) break;
          }
          if (m < l) m = l;
          for (int i = m + 2; i <= nn; ++i) {
            h(i, i - 2) = 0.0;
            if (i != m + 2) h(i, i - 3) = 0.0;
          }
          for (int k = m; k <= nn - 1; ++k) {
            if (k != m) {
              p = h(k, k - 1);
              q = h(k + 1, k - 1);
              r = (k != nn - 1) ? h(k + 2, k - 1) : 0.0;
              x = std::abs(p) + std::abs(q) + std::abs(r);
              if (x != 0.0) {
                p /= x;
                q /= x;
                r /= x;
              }
            }
            const double sg = std::sqrt(p * p + q * q + r * r);
            const double s = p >= 0.0 ? sg : -sg;
            if (s == 0.0) continue;
            if (k == m) {
              if (l != m) h(k, k - 1) = -h(k, k - 1);
            } else {
              h(k, k - 1) = -s * x;
            }
            p += s;
            x = p / s;
            y = q / s;
            z = r / s;
            q /= p;
            r /= p;
            for (int j = k; j <= nn; ++j) {
              double pp = h(k, j) + q * h(k + 1, j);
              if (k != nn - 1) {
                pp += r * h(k + 2, j);
                h(k + 2, j) -= pp * z;
              }
              h(k + 1, j) -= pp * y;
              h(k, j) -= pp * x;
            }
            const int mmin = nn < k + 3 ? nn : k + 3;
            for (int i = l; i <= mmin; ++i) {
              double pp = x * h(i, k) + y * h(i, k + 1);
              if (k != nn - 1) {
                pp += z * h(i, k + 2);
                h(i, k + 2) -= pp * r;
              }
              h(i, k + 1) -= pp * q;
              h(i, k) -= pp;
            }
          }
        }
      }
    } while (l < nn - 1);
  }
}

// Complex LU with a pivot floor instead of a singularity error; only used by
// inverse iteration where (M - lambda I) is near-singular on purpose.
class ComplexLu {
 public:
  static ComplexLu factor_with_floor(std::vector<Complex> a, int n, double floor_value) {
    ComplexLu f;
    f.n_ = n;
    f.a_ = std::move(a);
    f.piv_.resize(n);
    for (int k = 0; k < n; ++k) {
      int p = k;
      double best = std::abs(f.at(k, k));
      for (int i = k + 1; i < n; ++i) {
        const double v = std::abs(f.at(i, k));
        if (v > best) {
          best = v;
          p = i;
        }
      }
      if (p != k)
        for (int j = 0; j < n; ++j) std::swap(f.at(k, j), f.at(p, j));
      f.piv_[k] = p;
      if (std::abs(f.at(k, k)) < floor_value) f.at(k, k) = Complex(floor_value, 0.0);
      const Complex inv = 1.0 / f.at(k, k);
      for (int i = k + 1; i < n; ++i) {
        const Complex m = f.at(i, k) * inv;
        f.at(i, k) = m;
        for (int j = k + 1; j < n; ++j) f.at(i, j) -= m * f.at(k, j);
      }
    }
    return f;
  }

  std::vector<Complex> solve(std::vector<Complex> x) const {
    for (int k = 0; k < n_; ++k) std::swap(x[k], x[piv_[k]]);
    for (int k = 0; k < n_; ++k)
      for (int i = k + 1; i < n_; ++i) x[i] -= at(i, k) * x[k];
    for (int i = n_ - 1; i >= 0; --i) {
      for (int j = i + 1; j < n_; ++j) x[i] -= at(i, j) * x[j];
      x[i] /= at(i, i);
    }
    return x;
  }

 private:
  Complex& at(int i, int j) { return a_[static_cast<size_t>(i) * n_ + j]; }
  const Complex& at(int i, int j) const { return a_[static_cast<size_t>(i) * n_ + j]; }

  int n_ = 0;
  std::vector<Complex> a_;
  std::vector<int> piv_;
};

}  // namespace detail

struct EigenDecomposition {
  std::vector<Complex> values;
  std::vector<std::vector<Complex>> vectors;  // one per value when requested
  bool has_vectors = false;
};

namespace detail {

inline std::vector<Complex> inverse_iteration_vector(const DenseMatrix& m, Complex lambda,
                                                     double tol, Rng& rng) {
  const int n = m.rows();
  const double scale = std::max(frobenius_norm(m), 1.0);
  std::vector<Complex> a(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a[static_cast<size_t>(i) * n + j] = Complex(m(i, j), 0.0);
  for (int i = 0; i < n; ++i) a[static_cast<size_t>(i) * n + i] -= lambda;
  const double floor_value = std::numeric_limits<double>::epsilon() * scale;
  const auto lu = ComplexLu::factor_with_floor(std::move(a), n, floor_value);

  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int attempt = 0; attempt < 3; ++attempt) {
    std::vector<Complex> v(n);
    for (auto& x : v) x = Complex(gauss(rng), gauss(rng));
    for (int it = 0; it < 8; ++it) {
      v = lu.solve(std::move(v));
      double nv = 0.0;
      for (const auto& x : v) nv += std::norm(x);
      nv = std::sqrt(nv);
      if (nv == 0.0) break;
      for (auto& x : v) x /= nv;
      // residual ||Mv - lambda v||
      double res = 0.0;
      for (int i = 0; i < n; ++i) {
        Complex r = -lambda * v[i];
        for (int j = 0; j < n; ++j) r += m(i, j) * v[j];
        res += std::norm(r);
      }
      if (std::sqrt(res) <= tol * scale) return v;
    }
  }
  throw convergence_error("eigenvalues: inverse iteration failed to reach residual tolerance");
}

}  // namespace detail

// All eigenvalues of a real square matrix; conjugate-closed for real input.
// With `with_vectors`, eigenvectors are refined by inverse iteration until
// ||Mv - lambda v|| <= tol * ||M||_F.
inline EigenDecomposition eigenvalues(const DenseMatrix& m, double tol = 1e-10,
                                      bool with_vectors = false) {
  if (!m.square() || m.rows() < 1)
    throw std::invalid_argument("eigenvalues: matrix must be square, dimension >= 1");
  const int n = m.rows();
  EigenDecomposition out;
  if (n == 1) {
    out.values = {Complex(m(0, 0), 0.0)};
  } else if (n == 2) {
    // closed-form quadratic
    const double tr = m(0, 0) + m(1, 1);
    const double det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
    const double half = 0.5 * tr;
    const double disc = half * half - det;
    if (disc >= 0.0) {
      const double root = std::sqrt(disc);
      const double q = half + (half >= 0.0 ? root : -root);
      double l1 = q;
      double l2 = (q != 0.0) ? det / q : half - root;
      out.values = {Complex(l1, 0.0), Complex(l2, 0.0)};
    } else {
      const double im = std::sqrt(-disc);
      out.values = {Complex(half, im), Complex(half, -im)};
    }
  } else {
    DenseMatrix h = m;
    detail::hessenberg_reduce(h);
    std::vector<double> wr, wi;
    detail::hqr_eigenvalues(h, wr, wi);
    out.values.reserve(n);
    for (int i = 0; i < n; ++i) out.values.emplace_back(wr[i], wi[i]);
  }
  std::sort(out.values.begin(), out.values.end(), [](const Complex& a, const Complex& b) {
    if (a.real() != b.real()) return a.real() > b.real();
    return a.imag() > b.imag();
  });
  if (with_vectors) {
    Rng rng(0xD1CE5EEDull ^ static_cast<uint64_t>(n));
    out.vectors.reserve(n);
    for (const Complex& lambda : out.values)
      out.vectors.push_back(detail::inverse_iteration_vector(m, lambda, tol, rng));
    out.has_vectors = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// spectral norm via power iteration on M^T M

struct SpectralEstimate {
  double sigma = 0.0;
  SolveReport report;
};

// Largest singular value.  The estimate sequence sigma_k = ||M v_k|| is
// nondecreasing (Rayleigh quotients of M^T M under power iteration), so the
// relative gap is a sound stopping rule.  `trace` records sigma_k when given.
inline SpectralEstimate spectral_norm(const DenseMatrix& m, double tol = 1e-9, int max_iter = 200,
                                      std::vector<double>* trace = nullptr) {
  if (m.empty()) throw std::invalid_argument("spectral_norm: empty matrix");
  SpectralEstimate est;
  est.report.method = SolveMethod::power_iteration;
  Rng rng(0x5EC7A11Dull ^ (static_cast<uint64_t>(m.rows()) << 32) ^ static_cast<uint64_t>(m.cols()));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(m.cols());
  for (auto& x : v) x = gauss(rng);
  const double vn = norm2(v);
  scale_in_place(v, 1.0 / vn);
  double sigma_prev = 0.0;
  for (int it = 1; it <= max_iter; ++it) {
    std::vector<double> u = matvec(m, v);
    const double sigma = norm2(u);
    est.report.iterations = it;
    if (trace) trace->push_back(sigma);
    if (sigma == 0.0) {
      // v lies in the null space; for a zero matrix this is exact
      est.sigma = 0.0;
      est.report.residual = 0.0;
      est.report.converged = true;
      return est;
    }
    scale_in_place(u, 1.0 / sigma);
    std::vector<double> w = matvec_transposed(m, u);
    const double wn = norm2(w);
    if (wn > 0.0) {
      v = std::move(w);
      scale_in_place(v, 1.0 / wn);
    }
    est.sigma = sigma;
    est.report.residual = std::abs(sigma - sigma_prev);
    if (it > 1 && est.report.residual <= tol * std::max(sigma, 1e-300)) {
      est.report.converged = true;
      return est;
    }
    sigma_prev = sigma;
  }
  est.report.converged = false;  // budget exhausted: flagged best estimate
  return est;
}

// Warm-start refresh used by spectrally normalized layers: updates the
// persistent left/right vectors in place, returns the estimate u^T W v.
inline double spectral_refresh(const DenseMatrix& w, std::vector<double>& u, std::vector<double>& v,
                               int iters) {
  for (int it = 0; it < iters; ++it) {
    std::vector<double> uu = matvec(w, v);
    const double nu = norm2(uu);
    if (nu == 0.0) return 0.0;
    scale_in_place(uu, 1.0 / nu);
    u = std::move(uu);
    std::vector<double> vv = matvec_transposed(w, u);
    const double nv = norm2(vv);
    if (nv == 0.0) return 0.0;
    scale_in_place(vv, 1.0 / nv);
    v = std::move(vv);
  }
  return dot(u, matvec(w, v));
}

// ---------------------------------------------------------------------------
// Hutchinson estimator of ||M||_F^2 = Tr(M^T M) with Rademacher probes:
// (1/probes) * sum_k ||M v_k||^2, unbiased since E[v v^T] = I.

using LinearMapAction = std::function<void(std::span<const double>, std::span<double>)>;

inline double hutchinson_frobenius_sq(const LinearMapAction& apply, int dim, int probes, Rng& rng) {
  if (probes < 1) throw std::invalid_argument("hutchinson_frobenius_sq: probes must be >= 1");
  if (dim == 0) return 0.0;
  std::vector<double> probe(dim), image(dim);
  double acc = 0.0;
  for (int k = 0; k < probes; ++k) {
    for (int i = 0; i < dim; ++i) probe[i] = (rng() & 1ull) ? 1.0 : -1.0;
    std::fill(image.begin(), image.end(), 0.0);
    apply(probe, image);
    acc += dot(image, image);
  }
  return acc / probes;
}

// ---------------------------------------------------------------------------
// central finite differences (verification oracle)

inline std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& f, std::span<const double> x,
    double h = 1e-5) {
  if (h <= 0.0) throw std::invalid_argument("finite_difference_gradient: h must be positive");
  std::vector<double> xp(x.begin(), x.end());
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace direl
