#pragma once

// The four regularizers of the dissipative-manifold objective: vector-field
// magnitude, stability-transformed trace/eigenvalue concentration, orthogonal
// perturbation attraction and adjoint-trajectory attraction.  Each has a plain
// evaluation path (any field) and a tape path (localized fields) for
// gradients.

#include <vector>

#include "direl/layer.hpp"

namespace direl {

struct RegWeights {
  double w_f = 1.0;
  double w_lambda = 0.01;
  double w_n = 1.0;
  double w_adj = 1.0;
  double alpha_max = 0.5;   // perturbation distance band (0, alpha_max]
  double eps_scale = 1e-2;  // scale of the gradient-uniqueness jitter
  int adjoint_steps = 1;    // backward steps beyond the j = 0 term
  int probes = 64;          // Hutchinson probes for the estimator path
  bool normalize_n = true;  // scale n to unit length before applying alpha

  void validate() const {
    if (w_f < 0 || w_lambda < 0 || w_n < 0 || w_adj < 0)
      throw std::invalid_argument("RegWeights: weights must be nonnegative");
    if (!(alpha_max > 0.0)) throw std::invalid_argument("RegWeights: alpha_max must be positive");
    if (!(eps_scale > 0.0)) throw std::invalid_argument("RegWeights: eps_scale must be positive");
    if (adjoint_steps < 0) throw std::invalid_argument("RegWeights: adjoint_steps must be >= 0");
    if (probes < 1) throw std::invalid_argument("RegWeights: probes must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// R_F = mean_j ||F(x_j)||^2

template <VectorFieldLike F>
double r_f_value(const F& f, const DenseMatrix& x) {
  if (x.cols() == 0) return 0.0;
  const DenseMatrix y = f.eval_batch(x);
  return frobenius_norm_sq(y) / x.cols();
}

inline int r_f_on_tape(StagedField& sf, const StagedEval& ev) {
  Tape& t = *sf.tape;
  const int n = t.value(ev.x_id).cols();
  return t.scale_const(t.frob_sq(ev.f_id), 1.0 / n);
}

// ---------------------------------------------------------------------------
// R_lambda = mean_j || (I - theta J_j)^{-1} (I + (1-theta) J_j) ||_F^2
// (Frobenius norm of R_theta applied to the Jacobian; bounds the squared
// eigenvalue magnitudes of the propagation matrix from above)

namespace detail {

// R_theta(J) = (I - theta J)^{-1} (I + (1-theta) J)
inline DenseMatrix stability_transform(const DenseMatrix& j, double theta) {
  const int d = j.rows();
  DenseMatrix b = scaled(j, 1.0 - theta);
  for (int i = 0; i < d; ++i) b(i, i) += 1.0;
  if (theta == 0.0) return b;
  DenseMatrix a = scaled(j, -theta);
  for (int i = 0; i < d; ++i) a(i, i) += 1.0;
  return LuFactor::factor(a).solve_matrix(b);
}

}  // namespace detail

template <VectorFieldLike F>
double r_lambda_value(const F& f, const DenseMatrix& x, const ThetaScheme& scheme) {
  if (x.cols() == 0) return 0.0;
  double acc = 0.0;
  for (int j = 0; j < x.cols(); ++j) {
    const DenseMatrix jac = f.jacobian(get_col(x, j));
    try {
      acc += frobenius_norm_sq(detail::stability_transform(jac, scheme.theta));
    } catch (const singular_error&) {
      throw singular_error("r_lambda: (I - theta J) is singular at batch point " +
                           std::to_string(j));
    }
  }
  return acc / x.cols();
}

// Stochastic estimate of the same quantity with Rademacher probes applying
// v -> (I - theta J)^{-1} (I + (1-theta) J) v per point.  Evaluation only.
template <VectorFieldLike F>
double r_lambda_hutchinson(const F& f, const DenseMatrix& x, const ThetaScheme& scheme, int probes,
                           Rng& rng) {
  if (x.cols() == 0) return 0.0;
  const int d = f.dim();
  const double theta = scheme.theta;
  double acc = 0.0;
  for (int j = 0; j < x.cols(); ++j) {
    const DenseMatrix jac = f.jacobian(get_col(x, j));
    DenseMatrix a = scaled(jac, -theta);
    for (int i = 0; i < d; ++i) a(i, i) += 1.0;
    const LuFactor lu = LuFactor::factor(a);
    const LinearMapAction apply = [&](std::span<const double> in, std::span<double> out) {
      std::vector<double> b = matvec(jac, in);
      scale_in_place(b, 1.0 - theta);
      for (int i = 0; i < d; ++i) b[i] += in[i];
      const std::vector<double> sol = theta == 0.0 ? b : lu.solve(b);
      std::copy(sol.begin(), sol.end(), out.begin());
    };
    acc += hutchinson_frobenius_sq(apply, d, probes, rng);
  }
  return acc / x.cols();
}

// Differentiable exact path; the Jacobians are assembled on the tape per
// batch point, so this is restricted to small dimensions.
inline int r_lambda_on_tape(StagedField& sf, const StagedEval& ev) {
  Tape& t = *sf.tape;
  const LocalizedField& f = *sf.field;
  if (f.dim() > 8)
    throw std::invalid_argument("r_lambda_on_tape: exact path supports dimension <= 8");
  const double theta = f.scheme.theta;
  const int n = t.value(ev.x_id).cols();
  int acc = -1;
  for (int j = 0; j < n; ++j) {
    const int jac = jacobian_on_tape(sf, ev, j);
    const int b = t.add(sf.identity_const(), t.scale_const(jac, 1.0 - theta));
    int m = b;
    if (theta != 0.0) {
      const int a = t.sub(sf.identity_const(), t.scale_const(jac, theta));
      m = t.solve_mat(a, b);
    }
    const int term = t.frob_sq(m);
    acc = acc < 0 ? term : t.add(acc, term);
  }
  if (acc < 0) return t.constant_scalar(0.0);
  return t.scale_const(acc, 1.0 / n);
}

// ---------------------------------------------------------------------------
// orthogonal directions: n = grad_x ||F(x + eps)||^2 = 2 J(x+eps)^T F(x+eps)

struct NormalDirection {
  std::vector<double> n;
  bool degenerate = false;  // gradient norm under 1e-12: no usable direction
};

template <VectorFieldLike F>
NormalDirection normal_direction(const F& f, std::span<const double> x, double eps_scale, Rng& rng,
                                 bool normalize = true) {
  const int d = f.dim();
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> p(x.begin(), x.end());
  for (int i = 0; i < d; ++i) p[i] += eps_scale * gauss(rng);
  const std::vector<double> fp = f.eval_point(p);
  const DenseMatrix jac = f.jacobian(p);
  std::vector<double> g = matvec_transposed(jac, fp);
  scale_in_place(g, 2.0);
  NormalDirection out;
  const double gn = norm2(g);
  if (gn < 1e-12) {
    out.n.assign(d, 0.0);
    out.degenerate = true;
    return out;
  }
  if (normalize) scale_in_place(g, 1.0 / gn);
  out.n = std::move(g);
  return out;
}

// Per-point draws of the off-manifold anchors x + alpha n used by R_n and
// R_adj.  Degenerate points keep alpha = 0 so they fall back to the plain
// field magnitude at x.
struct OffManifoldSample {
  DenseMatrix p0;       // x + alpha n
  DenseMatrix alpha_n;  // alpha n
  std::vector<uint8_t> degenerate;
};

template <VectorFieldLike F>
OffManifoldSample sample_off_manifold(const F& f, const DenseMatrix& x, const RegWeights& w,
                                      Rng& rng) {
  const int d = x.rows();
  const int n = x.cols();
  OffManifoldSample s;
  s.p0 = x;
  s.alpha_n = DenseMatrix(d, n);
  s.degenerate.assign(n, 0);
  std::uniform_real_distribution<double> unif(0.0, w.alpha_max);
  for (int j = 0; j < n; ++j) {
    const NormalDirection nd = normal_direction(f, get_col(x, j), w.eps_scale, rng, w.normalize_n);
    const double alpha = w.alpha_max - unif(rng);  // (0, alpha_max]
    if (nd.degenerate) {
      s.degenerate[j] = 1;
      continue;
    }
    for (int i = 0; i < d; ++i) {
      const double an = alpha * nd.n[i];
      s.alpha_n(i, j) = an;
      s.p0(i, j) += an;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// R_n = mean_j ||F(x_j + alpha n_j) + alpha n_j||^2

template <VectorFieldLike F>
double r_n_value_with(const F& f, const OffManifoldSample& s) {
  if (s.p0.cols() == 0) return 0.0;
  DenseMatrix y = f.eval_batch(s.p0);
  for (size_t i = 0; i < y.size(); ++i) y.flat()[i] += s.alpha_n.flat()[i];
  return frobenius_norm_sq(y) / s.p0.cols();
}

template <VectorFieldLike F>
double r_n_value(const F& f, const DenseMatrix& x, const RegWeights& w, Rng& rng) {
  return r_n_value_with(f, sample_off_manifold(f, x, w, rng));
}

inline int r_n_on_tape(StagedField& sf, const OffManifoldSample& s) {
  Tape& t = *sf.tape;
  const int n = s.p0.cols();
  StagedEval ev = eval_on_tape(sf, t.constant(s.p0));
  const int sum = t.frob_sq(t.add(ev.f_id, t.constant(s.alpha_n)));
  return t.scale_const(sum, 1.0 / std::max(n, 1));
}

// ---------------------------------------------------------------------------
// R_adj = mean_j sum_k ||F(x_j^(k)) + x_j^(k) - x_j||^2 along the adjoint
// trajectory started at x_j + alpha n_j (the k = 0 term reproduces R_n).
// Trajectory points are sample locations: they carry no gradient.

struct RAdjResult {
  double value = 0.0;
  bool truncated = false;  // adjoint solver failed; sum stops at the last converged step
};

namespace detail {

// Trajectory batches X_0 .. X_steps (possibly fewer on solver failure).
template <VectorFieldLike F>
std::pair<std::vector<DenseMatrix>, bool> adjoint_sample_states(const F& f, const DenseMatrix& p0,
                                                                int steps,
                                                                const ThetaScheme& scheme) {
  std::vector<DenseMatrix> states;
  states.push_back(p0);
  bool truncated = false;
  if (steps > 0) {
    const Trajectory tr = adjoint_trajectory(f, p0, steps, scheme);
    truncated = !tr.complete;
    for (size_t i = 1; i < tr.states.size(); ++i) states.push_back(tr.states[i]);
  }
  return {std::move(states), truncated};
}

}  // namespace detail

template <VectorFieldLike F>
RAdjResult r_adj_value_with(const F& f, const DenseMatrix& x, const OffManifoldSample& s,
                            const ThetaScheme& scheme, int steps) {
  RAdjResult out;
  if (x.cols() == 0) return out;
  auto [states, truncated] = detail::adjoint_sample_states(f, s.p0, steps, scheme);
  out.truncated = truncated;
  double acc = 0.0;
  for (const DenseMatrix& xk : states) {
    DenseMatrix y = f.eval_batch(xk);
    for (size_t i = 0; i < y.size(); ++i) y.flat()[i] += xk.flat()[i] - x.flat()[i];
    acc += frobenius_norm_sq(y);
  }
  out.value = acc / x.cols();
  return out;
}

template <VectorFieldLike F>
RAdjResult r_adj_value(const F& f, const DenseMatrix& x, const RegWeights& w,
                       const ThetaScheme& scheme, Rng& rng) {
  return r_adj_value_with(f, x, sample_off_manifold(f, x, w, rng), scheme, w.adjoint_steps);
}

struct RAdjTapeResult {
  int node = -1;
  bool truncated = false;
};

inline RAdjTapeResult r_adj_on_tape(StagedField& sf, const DenseMatrix& x,
                                    const OffManifoldSample& s, const ThetaScheme& scheme,
                                    int steps) {
  Tape& t = *sf.tape;
  RAdjTapeResult out;
  auto [states, truncated] = detail::adjoint_sample_states(*sf.field, s.p0, steps, scheme);
  out.truncated = truncated;
  int acc = -1;
  for (const DenseMatrix& xk : states) {
    DenseMatrix offset = xk;  // x_k - x, constant on the tape
    for (size_t i = 0; i < offset.size(); ++i) offset.flat()[i] -= x.flat()[i];
    StagedEval ev = eval_on_tape(sf, t.constant(xk));
    const int term = t.frob_sq(t.add(ev.f_id, t.constant(offset)));
    acc = acc < 0 ? term : t.add(acc, term);
  }
  out.node = acc < 0 ? t.constant_scalar(0.0) : t.scale_const(acc, 1.0 / std::max(x.cols(), 1));
  return out;
}

}  // namespace direl
