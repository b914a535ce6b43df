#pragma once

// The implicit residual layer y = x + F(gamma, (1-theta) x + theta y): forward
// solve, backward-in-time (adjoint) solve, multi-step evolution and
// perturbation propagation.  Solves are Picard fixed-point iterations with a
// per-point Newton fallback when the map fails to contract.

#include <vector>

#include "direl/field.hpp"

namespace direl {

namespace detail {

// (1-theta) x + theta y
inline DenseMatrix combine_state(const DenseMatrix& x, const DenseMatrix& y, double theta) {
  DenseMatrix z = x;
  scale_in_place(z.flat(), 1.0 - theta);
  for (size_t i = 0; i < z.size(); ++i) z.flat()[i] += theta * y.flat()[i];
  return z;
}

// Generic implicit solve for s = fixed + sign * F(mix_fixed*fixed + mix_var*s)
// covering the forward solve (s=y, fixed=x, sign=+1, mix_fixed=1-theta,
// mix_var=theta) and the backward relation (s=x, fixed=y, sign=-1,
// mix_fixed=theta, mix_var=1-theta).
template <VectorFieldLike F>
struct ImplicitSolve {
  const F& field;
  const ThetaScheme& scheme;

  std::pair<DenseMatrix, SolveReport> run(const DenseMatrix& fixed, double sign, double mix_fixed,
                                          double mix_var) const {
    const int d = fixed.rows();
    const int n = fixed.cols();
    SolveReport rep;
    DenseMatrix s = fixed;
    double first_inc = -1.0;
    for (int it = 1; it <= scheme.fp_max_iter; ++it) {
      DenseMatrix z = scaled(fixed, mix_fixed);
      for (size_t i = 0; i < z.size(); ++i) z.flat()[i] += mix_var * s.flat()[i];
      DenseMatrix s_new = field.eval_batch(z);
      scale_in_place(s_new.flat(), sign);
      for (size_t i = 0; i < s_new.size(); ++i) s_new.flat()[i] += fixed.flat()[i];
      double max_inc = 0.0;
      for (int j = 0; j < n; ++j) {
        double inc = 0.0;
        for (int i = 0; i < d; ++i) {
          const double dd = s_new(i, j) - s(i, j);
          inc += dd * dd;
        }
        max_inc = std::max(max_inc, std::sqrt(inc));
      }
      rep.iterations = it;
      rep.residual = max_inc;
      // the increment is the defining residual of the current iterate s
      if (max_inc <= scheme.fp_tol) {
        rep.converged = true;
        return {std::move(s), rep};
      }
      if (!std::isfinite(max_inc)) {
        s = std::move(s_new);
        break;
      }
      if (first_inc < 0.0) first_inc = max_inc;
      s = std::move(s_new);
      if (it >= 3 && max_inc > first_inc) break;  // not contracting, go to Newton
    }

    // Newton on G(s_j) = s_j - fixed_j - sign * F(z_j); G' = I - sign*mix_var*J
    const int picard_iters = rep.iterations;
    rep.method = SolveMethod::newton;
    rep.converged = true;
    int worst_iters = 0;
    double worst_res = 0.0;
    std::vector<double> sj(d), gvec(d), zj(d);
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < d; ++i) sj[i] = s(i, j);
      if (!std::isfinite(norm2(sj)))
        for (int i = 0; i < d; ++i) sj[i] = fixed(i, j);  // restart from the input
      bool ok = false;
      double res = 0.0;
      int nit = 0;
      for (; nit <= scheme.newton_max_iter; ++nit) {
        for (int i = 0; i < d; ++i) zj[i] = mix_fixed * fixed(i, j) + mix_var * sj[i];
        const std::vector<double> fz = field.eval_point(zj);
        for (int i = 0; i < d; ++i) gvec[i] = sj[i] - fixed(i, j) - sign * fz[i];
        res = norm2(gvec);
        if (res <= scheme.fp_tol) {
          ok = true;
          break;
        }
        if (nit == scheme.newton_max_iter) break;
        DenseMatrix a = field.jacobian(zj);
        scale_in_place(a.flat(), -sign * mix_var);
        for (int i = 0; i < d; ++i) a(i, i) += 1.0;
        std::vector<double> step;
        try {
          step = lu_solve(a, gvec);
        } catch (const singular_error&) {
          break;
        }
        for (int i = 0; i < d; ++i) sj[i] -= step[i];
        if (!std::isfinite(norm2(sj))) break;
      }
      worst_iters = std::max(worst_iters, nit);
      worst_res = std::max(worst_res, res);
      if (!ok) rep.converged = false;
      for (int i = 0; i < d; ++i) s(i, j) = sj[i];
    }
    rep.iterations = picard_iters + worst_iters;
    rep.residual = worst_res;
    return {std::move(s), rep};
  }
};

}  // namespace detail

struct LayerResult {
  DenseMatrix state;
  SolveReport report;
};

// Solve y = x + F((1-theta) x + theta y) for each batch column.
// theta = 0 is explicit: exactly one field evaluation.
template <VectorFieldLike F>
LayerResult forward(const F& f, const DenseMatrix& x, const ThetaScheme& scheme) {
  if (x.rows() != f.dim()) throw std::invalid_argument("forward: dimension mismatch");
  if (!x.all_finite()) throw std::invalid_argument("forward: input must be finite");
  const double theta = scheme.theta;
  if (theta == 0.0) {
    DenseMatrix y = f.eval_batch(x);
    for (size_t i = 0; i < y.size(); ++i) y.flat()[i] += x.flat()[i];
    return {std::move(y), SolveReport{1, 0.0, true, SolveMethod::fixed_point}};
  }
  detail::ImplicitSolve<F> solver{f, scheme};
  auto [y, rep] = solver.run(x, +1.0, 1.0 - theta, theta);
  return {std::move(y), rep};
}

// Solve the backward relation x = y - F((1-theta) x + theta y).
// theta = 1 is explicit: x = y - F(y).
template <VectorFieldLike F>
LayerResult adjoint_step(const F& f, const DenseMatrix& y, const ThetaScheme& scheme) {
  if (y.rows() != f.dim()) throw std::invalid_argument("adjoint_step: dimension mismatch");
  if (!y.all_finite()) throw std::invalid_argument("adjoint_step: input must be finite");
  const double theta = scheme.theta;
  if (theta == 1.0) {
    DenseMatrix fz = f.eval_batch(y);
    DenseMatrix x = y;
    for (size_t i = 0; i < x.size(); ++i) x.flat()[i] -= fz.flat()[i];
    return {std::move(x), SolveReport{1, 0.0, true, SolveMethod::fixed_point}};
  }
  detail::ImplicitSolve<F> solver{f, scheme};
  auto [x, rep] = solver.run(y, -1.0, theta, 1.0 - theta);
  return {std::move(x), rep};
}

// || (I - theta J)^{-1} (I + (1-theta) J) dx || for a unit direction dx,
// with J evaluated at z = (1-theta) x + theta y along the solved trajectory.
// For an eigenvector direction with eigenvalue lambda this is |R_theta(lambda)|.
template <VectorFieldLike F>
double perturbation_gain(const F& f, std::span<const double> x, const ThetaScheme& scheme,
                         std::span<const double> dx) {
  if (std::abs(norm2(dx) - 1.0) > 1e-9)
    throw std::invalid_argument("perturbation_gain: dx must be a unit vector");
  const DenseMatrix xb = DenseMatrix::column(x);
  const LayerResult fw = forward(f, xb, scheme);
  const DenseMatrix z = detail::combine_state(xb, fw.state, scheme.theta);
  const DenseMatrix j = f.jacobian(get_col(z, 0));
  std::vector<double> b = matvec(j, dx);
  scale_in_place(b, 1.0 - scheme.theta);
  for (size_t i = 0; i < b.size(); ++i) b[i] += dx[i];
  DenseMatrix a = scaled(j, -scheme.theta);
  for (int i = 0; i < a.rows(); ++i) a(i, i) += 1.0;
  const std::vector<double> g = lu_solve(a, b);  // singular (I - theta J) throws
  return norm2(g);
}

enum class Direction { forward, adjoint };

struct Trajectory {
  std::vector<int> times;
  std::vector<DenseMatrix> states;  // d x N batches
  Direction direction = Direction::forward;
  bool complete = true;
  int failed_step = -1;  // step index of the first solver failure
  SolveReport report;
};

// Repeated forward application; records t = 0, multiples of record_every and
// the final step.
template <VectorFieldLike F>
Trajectory evolve(const F& f, const DenseMatrix& x0, int steps, int record_every,
                  const ThetaScheme& scheme) {
  if (steps < 0) throw std::invalid_argument("evolve: steps must be >= 0");
  if (record_every <= 0) record_every = steps > 0 ? steps : 1;
  Trajectory tr;
  tr.direction = Direction::forward;
  tr.times.push_back(0);
  tr.states.push_back(x0);
  DenseMatrix x = x0;
  for (int t = 1; t <= steps; ++t) {
    LayerResult step = forward(f, x, scheme);
    tr.report.absorb(step.report);
    x = std::move(step.state);
    if (!step.report.converged) {
      tr.complete = false;
      tr.failed_step = t;
      tr.times.push_back(t);
      tr.states.push_back(x);
      return tr;
    }
    if (t % record_every == 0 || t == steps) {
      tr.times.push_back(t);
      tr.states.push_back(x);
    }
  }
  return tr;
}

// Backward-in-time trajectory x_1..x_steps (plus the start state at t = 0).
template <VectorFieldLike F>
Trajectory adjoint_trajectory(const F& f, const DenseMatrix& x0, int steps,
                              const ThetaScheme& scheme) {
  if (steps < 1) throw std::invalid_argument("adjoint_trajectory: steps must be >= 1");
  Trajectory tr;
  tr.direction = Direction::adjoint;
  tr.times.push_back(0);
  tr.states.push_back(x0);
  DenseMatrix x = x0;
  for (int t = 1; t <= steps; ++t) {
    LayerResult step = adjoint_step(f, x, scheme);
    tr.report.absorb(step.report);
    if (!step.report.converged) {
      tr.complete = false;
      tr.failed_step = t;
      return tr;  // truncated before the failed state
    }
    x = std::move(step.state);
    tr.times.push_back(t);
    tr.states.push_back(x);
  }
  return tr;
}

// ---------------------------------------------------------------------------
// differentiable forward solve
//
// theta = 0 is recorded as the explicit graph x + F(x).  For theta > 0 the
// solution y* is computed numerically, then recorded as a custom node whose
// backward pass applies the implicit-function-theorem adjoint:
//   (I - theta J) dy = (I + (1-theta) J) dx + F_gamma dgamma
// so with w = (I - theta J^T)^{-1} ybar,
//   xbar += (I + (1-theta) J)^T w,  gammabar += d(w^T F(gamma, z*))/dgamma.

inline int forward_on_tape(StagedField& sf, int x_id, const ThetaScheme& scheme,
                           SolveReport* report = nullptr) {
  Tape& t = *sf.tape;
  const LocalizedField& f = *sf.field;
  const double theta = scheme.theta;
  if (theta == 0.0) {
    StagedEval ev = eval_on_tape(sf, x_id);
    if (report) *report = SolveReport{1, 0.0, true, SolveMethod::fixed_point};
    return t.add(x_id, ev.f_id);
  }
  const DenseMatrix& x = t.value(x_id);
  LayerResult fw = forward(f, x, scheme);
  if (report) *report = fw.report;
  if (!fw.report.converged)
    log_warn("forward_on_tape: solve did not converge; gradient is approximate");
  const DenseMatrix z = detail::combine_state(x, fw.state, theta);
  const int d = x.rows();
  const int n = x.cols();

  auto jacobians = std::make_shared<std::vector<DenseMatrix>>();
  auto factors = std::make_shared<std::vector<LuFactor>>();
  jacobians->reserve(n);
  factors->reserve(n);
  for (int j = 0; j < n; ++j) {
    DenseMatrix jac = f.jacobian(get_col(z, j));
    DenseMatrix at = transpose(jac);       // (I - theta J)^T = I - theta J^T
    scale_in_place(at.flat(), -theta);
    for (int i = 0; i < d; ++i) at(i, i) += 1.0;
    factors->push_back(LuFactor::factor(at));
    jacobians->push_back(std::move(jac));
  }

  const LocalizedField* field_ptr = sf.field;
  const std::vector<int> w_ids = sf.w_ids;
  const std::vector<int> b_ids = sf.b_ids;
  const int gamma_c_id = sf.gamma_c_id;
  const int gamma_L_id = sf.gamma_L_id;
  CustomBackward back = [=](Tape& tape, const DenseMatrix& g) {
    DenseMatrix wmat(d, n);
    DenseMatrix xbar(d, n);
    for (int j = 0; j < n; ++j) {
      const std::vector<double> w = (*factors)[j].solve(get_col(g, j));
      set_col(wmat, j, w);
      // (I + (1-theta) J)^T w = w + (1-theta) J^T w
      std::vector<double> xb = matvec_transposed((*jacobians)[j], w);
      scale_in_place(xb, 1.0 - theta);
      axpy(1.0, w, xb);
      set_col(xbar, j, xb);
    }
    tape.accumulate_adjoint(x_id, xbar);
    // parameter adjoints through F(gamma, z*) at the converged state
    Tape sub;
    StagedField sf2 = stage(sub, *field_ptr);
    StagedEval ev2 = eval_on_tape(sf2, sub.constant(z));
    const int contraction = sub.dot_all(sub.constant(wmat), ev2.f_id);
    sub.backward(contraction);
    for (size_t i = 0; i < w_ids.size(); ++i) {
      const DenseMatrix& gw = sub.adjoint(sf2.w_ids[i]);
      if (!gw.empty()) tape.accumulate_adjoint(w_ids[i], gw);
      const DenseMatrix& gb = sub.adjoint(sf2.b_ids[i]);
      if (!gb.empty()) tape.accumulate_adjoint(b_ids[i], gb);
    }
    const DenseMatrix& gc = sub.adjoint(sf2.gamma_c_id);
    if (!gc.empty()) tape.accumulate_adjoint(gamma_c_id, gc);
    const DenseMatrix& gl = sub.adjoint(sf2.gamma_L_id);
    if (!gl.empty()) tape.accumulate_adjoint(gamma_L_id, gl);
  };
  return t.custom(std::move(fw.state), std::move(back));
}

}  // namespace direl
