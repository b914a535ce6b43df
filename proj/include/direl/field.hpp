#pragma once

// Parameterized vector fields.  The localized field F(gamma, x) = c*x +
// r*Ftilde(gamma, x) wraps a spectrally normalized MLP so that the Jacobian
// eigenvalues stay inside the disk B(c, r); (c, r) are expressed through the
// inverse stability function and learned via gamma_c, gamma_L.

#include <concepts>
#include <span>
#include <vector>

#include "direl/autodiff.hpp"
#include "direl/linalg.hpp"
#include "direl/stability.hpp"

namespace direl {

template <class F>
concept VectorFieldLike = requires(const F& f, std::span<const double> x, const DenseMatrix& batch) {
  { f.dim() } -> std::convertible_to<int>;
  { f.eval_point(x) } -> std::same_as<std::vector<double>>;
  { f.eval_batch(batch) } -> std::same_as<DenseMatrix>;
  { f.jacobian(x) } -> std::same_as<DenseMatrix>;
};

// ---------------------------------------------------------------------------
// test doubles / analytic fields

// F(x) = A x + shift * x; Jacobian A + shift*I everywhere.
struct LinearField {
  DenseMatrix a;
  double shift = 0.0;

  int dim() const { return a.rows(); }

  std::vector<double> eval_point(std::span<const double> x) const {
    std::vector<double> y = matvec(a, x);
    axpy(shift, x, y);
    return y;
  }

  DenseMatrix eval_batch(const DenseMatrix& batch) const {
    DenseMatrix y = matmul(a, batch);
    if (shift != 0.0)
      for (size_t i = 0; i < y.size(); ++i) y.flat()[i] += shift * batch.flat()[i];
    return y;
  }

  DenseMatrix jacobian(std::span<const double>) const {
    DenseMatrix j = a;
    for (int i = 0; i < j.rows(); ++i) j(i, i) += shift;
    return j;
  }
};

// F identically zero (the r = 0, c = 0 double).
struct ZeroField {
  int d = 2;
  int dim() const { return d; }
  std::vector<double> eval_point(std::span<const double>) const {
    return std::vector<double>(d, 0.0);
  }
  DenseMatrix eval_batch(const DenseMatrix& batch) const {
    return DenseMatrix(d, batch.cols());
  }
  DenseMatrix jacobian(std::span<const double>) const { return DenseMatrix(d, d); }
};

// ---------------------------------------------------------------------------
// spectrally normalized MLP

inline constexpr double kSigmaSkipThreshold = 1e-8;  // skip normalization below this

struct MlpLayer {
  DenseMatrix w;
  std::vector<double> b;
  // persistent power-iteration state (warm start across training steps)
  std::vector<double> u, v;
};

struct MlpField {
  int d = 0;
  Activation activation = Activation::tanh_fn;
  std::vector<MlpLayer> layers;

  // Normalized-weight cache.  Weight/state mutations go through set_params /
  // refresh_spectral_state / construction, which bump param_stamp; direct
  // layer edits must bump it too.  Single-writer, like the parameters.
  uint64_t param_stamp = 1;
  mutable uint64_t cache_stamp = 0;
  mutable std::vector<DenseMatrix> wt_cache;
};

// Current spectral-norm estimate u^T W v from the persistent state.
inline double layer_sigma(const MlpLayer& l) { return dot(l.u, matvec(l.w, l.v)); }

inline void refresh_spectral_state(MlpField& f, int iters) {
  for (auto& l : f.layers) spectral_refresh(l.w, l.u, l.v, iters);
  ++f.param_stamp;
}

// Verification-mode refresh: iterate until the estimate stabilizes.
inline void refresh_spectral_state_to_tol(MlpField& f, double tol = 1e-9, int min_iters = 50,
                                          int max_iters = 2000) {
  for (auto& l : f.layers) {
    double prev = layer_sigma(l);
    for (int it = 1; it <= max_iters; ++it) {
      const double s = spectral_refresh(l.w, l.u, l.v, 1);
      if (it >= min_iters && std::abs(s - prev) <= tol * std::max(std::abs(s), 1e-300)) break;
      prev = s;
    }
  }
  ++f.param_stamp;
}

// gamma_tilde_i = gamma_i / (|sigma| * ||gamma_i||), with the norm taken from
// the persistent power-iteration estimate.  Near-zero weights are returned
// unchanged: such a layer already contributes a near-zero map.
inline DenseMatrix normalized_weight(const MlpField& f, int i) {
  const MlpLayer& l = f.layers[i];
  const double s = layer_sigma(l);
  if (s < kSigmaSkipThreshold) return l.w;
  return scaled(l.w, 1.0 / (act_deriv_bound(f.activation) * s));
}

inline const std::vector<DenseMatrix>& normalized_weights_cached(const MlpField& f) {
  if (f.cache_stamp != f.param_stamp) {
    f.wt_cache.clear();
    f.wt_cache.reserve(f.layers.size());
    for (size_t i = 0; i < f.layers.size(); ++i)
      f.wt_cache.push_back(normalized_weight(f, static_cast<int>(i)));
    f.cache_stamp = f.param_stamp;
  }
  return f.wt_cache;
}

// Converges the power-iteration state, then returns all normalized weights.
inline std::vector<DenseMatrix> normalize_weights(MlpField& f, double tol = 1e-9) {
  refresh_spectral_state_to_tol(f, tol);
  std::vector<DenseMatrix> out;
  out.reserve(f.layers.size());
  for (size_t i = 0; i < f.layers.size(); ++i)
    out.push_back(normalized_weight(f, static_cast<int>(i)));
  return out;
}

inline DenseMatrix mlp_eval_batch(const MlpField& f, const DenseMatrix& x) {
  if (x.rows() != f.d) throw std::invalid_argument("mlp_eval_batch: dimension mismatch");
  const auto& wt = normalized_weights_cached(f);
  DenseMatrix a = x;
  for (size_t i = 0; i < f.layers.size(); ++i) {
    a = matmul(wt[i], a);
    const MlpLayer& l = f.layers[i];
    for (int r = 0; r < a.rows(); ++r) {
      const double br = l.b[r];
      for (int c = 0; c < a.cols(); ++c) a(r, c) = act_value(f.activation, a(r, c) + br);
    }
  }
  return a;
}

// Jacobian of the normalized MLP: D_n Wt_n ... D_1 Wt_1 with D_i the
// activation-derivative diagonals at the pre-activations.
inline DenseMatrix mlp_jacobian(const MlpField& f, std::span<const double> x) {
  const auto& wt = normalized_weights_cached(f);
  std::vector<double> a(x.begin(), x.end());
  DenseMatrix j;
  for (size_t i = 0; i < f.layers.size(); ++i) {
    const MlpLayer& l = f.layers[i];
    std::vector<double> z = matvec(wt[i], a);
    for (size_t r = 0; r < z.size(); ++r) z[r] += l.b[r];
    DenseMatrix dw = wt[i];
    for (int r = 0; r < dw.rows(); ++r) {
      const double d = act_deriv(f.activation, z[r]);
      for (int c = 0; c < dw.cols(); ++c) dw(r, c) *= d;
    }
    j = (i == 0) ? std::move(dw) : matmul(dw, j);
    a.resize(z.size());
    for (size_t r = 0; r < z.size(); ++r) a[r] = act_value(f.activation, z[r]);
  }
  return j;
}

// ---------------------------------------------------------------------------
// localization

enum class LocalizationMode { ranged, dissipative };

inline const char* to_string(LocalizationMode m) {
  return m == LocalizationMode::ranged ? "ranged" : "dissipative";
}

inline LocalizationMode parse_localization_mode(const std::string& s) {
  if (s == "ranged") return LocalizationMode::ranged;
  if (s == "dissipative") return LocalizationMode::dissipative;
  throw config_error("unknown localization mode: " + s);
}

struct LocalizationParams {
  LocalizationMode mode = LocalizationMode::ranged;
  double gamma_c = 0.0;
  double gamma_L = 0.0;
  // range bounds (ranged mode only)
  double c_hat_1 = 0.5;
  double c_hat_2 = 1.0;
  double L_1 = 1.0;
  double L_2 = 5.0;

  void validate() const {
    if (mode == LocalizationMode::ranged &&
        !(c_hat_1 > 0.0 && c_hat_2 > 0.0 && L_1 > 0.0 && L_2 > 0.0))
      throw std::invalid_argument("LocalizationParams: range bounds must be positive");
  }
};

struct Localization {
  double c = 0.0;
  double r = 0.0;
  double c_hat = 0.0;
  double L = 0.0;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// (c_hat, L) from the learnable scalars, then c = R^{-1}(c_hat),
// r = max(0, R^{-1}(L) - c).
inline Localization localization(const LocalizationParams& p, double theta) {
  Localization l;
  if (p.mode == LocalizationMode::ranged) {
    l.c_hat = p.c_hat_1 + sigmoid(p.gamma_c) * (p.c_hat_2 - p.c_hat_1);
    l.L = p.L_1 + sigmoid(p.gamma_L) * (p.L_2 - p.L_1);
  } else {
    l.c_hat = 1.0 - sigmoid(p.gamma_c);
    l.L = 1.0 - sigmoid(p.gamma_L);
  }
  if (theta == 1.0 && (l.c_hat <= 0.0 || l.L <= 0.0))
    throw std::domain_error("localization: theta = 1 requires positive c_hat and L");
  l.c = stab_inverse_real(theta, l.c_hat);
  l.r = std::max(0.0, stab_inverse_real(theta, l.L) - l.c);
  return l;
}

// ---------------------------------------------------------------------------
// the localized field

struct LocalizedField {
  MlpField base;
  LocalizationParams loc;
  ThetaScheme scheme;

  int dim() const { return base.d; }

  Localization localize() const { return localization(loc, scheme.theta); }

  DenseMatrix eval_batch(const DenseMatrix& x) const {
    const Localization l = localize();
    DenseMatrix y = mlp_eval_batch(base, x);
    scale_in_place(y.flat(), l.r);
    for (size_t i = 0; i < y.size(); ++i) y.flat()[i] += l.c * x.flat()[i];
    return y;
  }

  std::vector<double> eval_point(std::span<const double> x) const {
    const DenseMatrix y = eval_batch(DenseMatrix::column(x));
    return std::vector<double>(y.flat().begin(), y.flat().end());
  }

  DenseMatrix jacobian(std::span<const double> x) const {
    const Localization l = localize();
    DenseMatrix j = mlp_jacobian(base, x);
    scale_in_place(j.flat(), l.r);
    for (int i = 0; i < j.rows(); ++i) j(i, i) += l.c;
    return j;
  }
};

struct LipschitzBound {
  double value = 0.0;
  bool certified = true;  // false: estimated by boundary sampling
};

// sup over B(c, r) of |R_theta|; equals max(c_hat, L) when c > R^{-1}(0).
inline LipschitzBound lipschitz_bound(const LocalizedField& f) {
  const Localization l = f.localize();
  const double theta = f.scheme.theta;
  bool pre_ok = true;
  if (theta < 1.0) pre_ok = l.c > stab_inverse_real(theta, 0.0);
  // theta = 1: R^{-1}(0) is the pole at -infinity, so the precondition holds.
  if (pre_ok) return {std::max(l.c_hat, l.L), true};
  StabilityDisk d;
  d.c = l.c;
  d.r = l.r;
  d.c_hat = l.c_hat;
  d.L = l.L;
  return {disk_sup(theta, d), false};
}

// ---------------------------------------------------------------------------
// construction

inline LocalizedField make_localized_field(int d, std::span<const int> hidden_widths,
                                           Activation activation, const LocalizationParams& loc,
                                           const ThetaScheme& scheme, uint64_t seed) {
  if (d < 1) throw std::invalid_argument("make_localized_field: dimension must be >= 1");
  loc.validate();
  scheme.validate();
  LocalizedField f;
  f.base.d = d;
  f.base.activation = activation;
  f.loc = loc;
  f.scheme = scheme;
  Rng rng(seed ^ 0xF1E1D5EEDull);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<int> dims;
  dims.push_back(d);
  for (int w : hidden_widths) {
    if (w < 1) throw std::invalid_argument("make_localized_field: widths must be >= 1");
    dims.push_back(w);
  }
  dims.push_back(d);
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    MlpLayer l;
    const int rows = dims[i + 1];
    const int cols = dims[i];
    l.w = DenseMatrix(rows, cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
    for (double& x : l.w.flat()) x = scale * gauss(rng);
    l.b.assign(rows, 0.0);
    l.u.resize(rows);
    l.v.resize(cols);
    for (double& x : l.u) x = gauss(rng);
    for (double& x : l.v) x = gauss(rng);
    scale_in_place(l.u, 1.0 / norm2(l.u));
    scale_in_place(l.v, 1.0 / norm2(l.v));
    f.base.layers.push_back(std::move(l));
  }
  // start from unit spectral norm: converge the estimate, divide it out
  refresh_spectral_state_to_tol(f.base);
  for (auto& l : f.base.layers) {
    const double s = layer_sigma(l);
    if (s >= kSigmaSkipThreshold) scale_in_place(l.w.flat(), 1.0 / s);
  }
  ++f.base.param_stamp;
  return f;
}

// ---------------------------------------------------------------------------
// flat parameter vector (optimizer and finite-difference order:
// per layer W row-major then b, then gamma_c, gamma_L)

inline size_t param_count(const LocalizedField& f) {
  size_t n = 2;
  for (const auto& l : f.base.layers) n += l.w.size() + l.b.size();
  return n;
}

inline std::vector<double> collect_params(const LocalizedField& f) {
  std::vector<double> p;
  p.reserve(param_count(f));
  for (const auto& l : f.base.layers) {
    p.insert(p.end(), l.w.flat().begin(), l.w.flat().end());
    p.insert(p.end(), l.b.begin(), l.b.end());
  }
  p.push_back(f.loc.gamma_c);
  p.push_back(f.loc.gamma_L);
  return p;
}

inline void set_params(LocalizedField& f, std::span<const double> p) {
  if (p.size() != param_count(f)) throw std::invalid_argument("set_params: size mismatch");
  size_t k = 0;
  for (auto& l : f.base.layers) {
    for (double& x : l.w.flat()) x = p[k++];
    for (double& x : l.b) x = p[k++];
  }
  f.loc.gamma_c = p[k++];
  f.loc.gamma_L = p[k++];
  ++f.base.param_stamp;
}

// ---------------------------------------------------------------------------
// tape staging

struct StagedField {
  Tape* tape = nullptr;
  const LocalizedField* field = nullptr;
  std::vector<int> w_ids, b_ids;
  int gamma_c_id = -1;
  int gamma_L_id = -1;
  std::vector<int> wtil_ids;
  int c_hat_id = -1, L_id = -1, c_id = -1, r_id = -1;
  int identity_id = -1;

  int identity_const() {
    if (identity_id < 0) identity_id = tape->constant(DenseMatrix::identity(field->dim()));
    return identity_id;
  }
};

struct StagedEval {
  int x_id = -1;
  int ftil_id = -1;
  int f_id = -1;
  std::vector<int> z_ids;  // pre-activation batches per layer
};

inline StagedField stage(Tape& t, const LocalizedField& f) {
  StagedField sf;
  sf.tape = &t;
  sf.field = &f;
  const double bound = act_deriv_bound(f.base.activation);
  for (const auto& l : f.base.layers) {
    const int w_id = t.leaf(l.w);
    const int b_id = t.leaf(DenseMatrix::column(l.b));
    sf.w_ids.push_back(w_id);
    sf.b_ids.push_back(b_id);
    if (layer_sigma(l) < kSigmaSkipThreshold) {
      sf.wtil_ids.push_back(w_id);
    } else {
      // sigma = u^T W v, differentiable as d sigma / d W = u v^T
      const int u_c = t.constant(DenseMatrix::column(l.u));
      const int v_c = t.constant(DenseMatrix::column(l.v));
      const int s = t.dot_all(u_c, t.matmul(w_id, v_c));
      sf.wtil_ids.push_back(t.div_scalar(w_id, t.scale_const(s, bound)));
    }
  }
  sf.gamma_c_id = t.scalar_leaf(f.loc.gamma_c);
  sf.gamma_L_id = t.scalar_leaf(f.loc.gamma_L);
  const int sc = t.act(sf.gamma_c_id, Activation::sigmoid);
  const int sl = t.act(sf.gamma_L_id, Activation::sigmoid);
  if (f.loc.mode == LocalizationMode::ranged) {
    sf.c_hat_id = t.add_const(t.scale_const(sc, f.loc.c_hat_2 - f.loc.c_hat_1), f.loc.c_hat_1);
    sf.L_id = t.add_const(t.scale_const(sl, f.loc.L_2 - f.loc.L_1), f.loc.L_1);
  } else {
    sf.c_hat_id = t.add_const(t.scale_const(sc, -1.0), 1.0);
    sf.L_id = t.add_const(t.scale_const(sl, -1.0), 1.0);
  }
  const double theta = f.scheme.theta;
  auto stab_inverse_node = [&](int z) {
    const int num = t.add_const(t.scale_const(z, -1.0), 1.0);          // 1 - z
    const int den = t.add_const(t.scale_const(num, theta), -1.0);      // theta (1 - z) - 1
    return t.div_elem(num, den);
  };
  sf.c_id = stab_inverse_node(sf.c_hat_id);
  const int rinv_L = stab_inverse_node(sf.L_id);
  sf.r_id = t.act(t.sub(rinv_L, sf.c_id), Activation::relu);
  return sf;
}

inline StagedEval eval_on_tape(StagedField& sf, int x_id) {
  Tape& t = *sf.tape;
  const MlpField& base = sf.field->base;
  StagedEval ev;
  ev.x_id = x_id;
  int a = x_id;
  for (size_t i = 0; i < base.layers.size(); ++i) {
    const int z = t.add_colvec(t.matmul(sf.wtil_ids[i], a), sf.b_ids[i]);
    ev.z_ids.push_back(z);
    a = t.act(z, base.activation);
  }
  ev.ftil_id = a;
  ev.f_id = t.add(t.mul_scalar(sf.c_id, x_id), t.mul_scalar(sf.r_id, a));
  return ev;
}

// d x d Jacobian node for batch column `point`, reusing the pre-activations
// of an existing staged evaluation.
inline int jacobian_on_tape(StagedField& sf, const StagedEval& ev, int point) {
  Tape& t = *sf.tape;
  const MlpField& base = sf.field->base;
  int jt = -1;
  for (size_t i = 0; i < base.layers.size(); ++i) {
    const int d_i = t.act_prime(t.col(ev.z_ids[i], point), base.activation);
    const int dw = t.row_scale(d_i, sf.wtil_ids[i]);
    jt = (i == 0) ? dw : t.matmul(dw, jt);
  }
  const int c_part = t.mul_scalar(sf.c_id, sf.identity_const());
  return t.add(c_part, t.mul_scalar(sf.r_id, jt));
}

inline std::vector<double> collect_gradients(const StagedField& sf, const Tape& t) {
  std::vector<double> g;
  g.reserve(param_count(*sf.field));
  for (size_t i = 0; i < sf.w_ids.size(); ++i) {
    const DenseMatrix gw = t.adjoint_or_zero(sf.w_ids[i]);
    g.insert(g.end(), gw.flat().begin(), gw.flat().end());
    const DenseMatrix gb = t.adjoint_or_zero(sf.b_ids[i]);
    g.insert(g.end(), gb.flat().begin(), gb.flat().end());
  }
  g.push_back(t.adjoint_or_zero(sf.gamma_c_id)(0, 0));
  g.push_back(t.adjoint_or_zero(sf.gamma_L_id)(0, 0));
  return g;
}

}  // namespace direl
