#pragma once

// Reverse-mode differentiation tape over dense arrays.  Scalars are 1x1
// matrices; the operation set is exactly what small affine/activation
// compositions, Jacobian assembly and the stability transform need.

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "direl/linalg.hpp"

namespace direl {

enum class Activation { identity, tanh_fn, relu, sigmoid };

inline double act_value(Activation f, double x) {
  switch (f) {
    case Activation::identity: return x;
    case Activation::tanh_fn: return std::tanh(x);
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
  }
  return x;
}

inline double act_deriv(Activation f, double x) {
  switch (f) {
    case Activation::identity: return 1.0;
    case Activation::tanh_fn: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;  // subgradient 0 at the kink
    case Activation::sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 - s);
    }
  }
  return 1.0;
}

inline double act_second(Activation f, double x) {
  switch (f) {
    case Activation::identity: return 0.0;
    case Activation::tanh_fn: {
      const double t = std::tanh(x);
      return -2.0 * t * (1.0 - t * t);
    }
    case Activation::relu: return 0.0;
    case Activation::sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 - s) * (1.0 - 2.0 * s);
    }
  }
  return 0.0;
}

// sup |sigma'|; taken as 1 for the supported activations.
inline double act_deriv_bound(Activation) { return 1.0; }

inline const char* to_string(Activation f) {
  switch (f) {
    case Activation::identity: return "identity";
    case Activation::tanh_fn: return "tanh";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "tanh") return Activation::tanh_fn;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  throw config_error("unknown activation: " + s);
}

class Tape;
using CustomBackward = std::function<void(Tape&, const DenseMatrix&)>;

class Tape {
  enum class Op {
    leaf,
    add,
    sub,
    add_const,
    scale_const,
    mul_elem,
    div_elem,
    mul_scalar,
    div_scalar,
    matmul,
    add_colvec,
    act,
    act_prime,
    row_scale,
    col,
    dot_all,
    frob_sq,
    solve_mat,
    custom
  };

  struct Node {
    Op op;
    int a = -1;
    int b = -1;
    int j = 0;          // column index for Op::col
    double k = 0.0;     // constant for add_const / scale_const
    Activation fn = Activation::identity;
    bool requires_grad = true;
    DenseMatrix val;
    std::shared_ptr<std::pair<LuFactor, LuFactor>> lu;  // solve_mat: LU of A and A^T
    std::shared_ptr<CustomBackward> back;
  };

 public:
  Tape() = default;
  void reserve(size_t n) { nodes_.reserve(n); }
  size_t size() const { return nodes_.size(); }

  int leaf(DenseMatrix v, bool requires_grad = true) {
    Node n;
    n.op = Op::leaf;
    n.requires_grad = requires_grad;
    n.val = std::move(v);
    return push(std::move(n));
  }

  int constant(DenseMatrix v) { return leaf(std::move(v), false); }

  int scalar_leaf(double v, bool requires_grad = true) {
    DenseMatrix m(1, 1);
    m(0, 0) = v;
    return leaf(std::move(m), requires_grad);
  }

  int constant_scalar(double v) { return scalar_leaf(v, false); }

  int add(int a, int b) {
    require_same_shape(a, b, "add");
    Node n = binary(Op::add, a, b);
    n.val = direl::add(val(a), val(b));
    return push(std::move(n));
  }

  int sub(int a, int b) {
    require_same_shape(a, b, "sub");
    Node n = binary(Op::sub, a, b);
    n.val = direl::sub(val(a), val(b));
    return push(std::move(n));
  }

  int add_const(int a, double k) {
    Node n = unary(Op::add_const, a);
    n.k = k;
    n.val = val(a);
    for (double& x : n.val.flat()) x += k;
    return push(std::move(n));
  }

  int scale_const(int a, double k) {
    Node n = unary(Op::scale_const, a);
    n.k = k;
    n.val = scaled(val(a), k);
    return push(std::move(n));
  }

  int mul_elem(int a, int b) {
    require_same_shape(a, b, "mul_elem");
    Node n = binary(Op::mul_elem, a, b);
    n.val = val(a);
    for (size_t i = 0; i < n.val.size(); ++i) n.val.flat()[i] *= val(b).flat()[i];
    return push(std::move(n));
  }

  int div_elem(int a, int b) {
    require_same_shape(a, b, "div_elem");
    Node n = binary(Op::div_elem, a, b);
    n.val = val(a);
    for (size_t i = 0; i < n.val.size(); ++i) n.val.flat()[i] /= val(b).flat()[i];
    return push(std::move(n));
  }

  int mul_scalar(int s, int a) {
    require_scalar(s, "mul_scalar");
    Node n = binary(Op::mul_scalar, s, a);
    n.val = scaled(val(a), scalar(s));
    return push(std::move(n));
  }

  int div_scalar(int a, int s) {
    require_scalar(s, "div_scalar");
    Node n = binary(Op::div_scalar, a, s);
    n.val = scaled(val(a), 1.0 / scalar(s));
    return push(std::move(n));
  }

  int matmul(int a, int b) {
    Node n = binary(Op::matmul, a, b);
    n.val = direl::matmul(val(a), val(b));
    return push(std::move(n));
  }

  // A + b * ones(1, cols): broadcast a column vector across all columns.
  int add_colvec(int a, int b) {
    if (val(b).cols() != 1 || val(b).rows() != val(a).rows())
      throw std::invalid_argument("Tape::add_colvec: b must be a matching column vector");
    Node n = binary(Op::add_colvec, a, b);
    n.val = val(a);
    for (int i = 0; i < n.val.rows(); ++i) {
      const double bi = val(b)(i, 0);
      for (int j = 0; j < n.val.cols(); ++j) n.val(i, j) += bi;
    }
    return push(std::move(n));
  }

  int act(int a, Activation fn) {
    Node n = unary(Op::act, a);
    n.fn = fn;
    n.val = val(a);
    for (double& x : n.val.flat()) x = act_value(fn, x);
    return push(std::move(n));
  }

  // sigma'(a) elementwise; differentiable once more via sigma''.
  int act_prime(int a, Activation fn) {
    Node n = unary(Op::act_prime, a);
    n.fn = fn;
    n.val = val(a);
    for (double& x : n.val.flat()) x = act_deriv(fn, x);
    return push(std::move(n));
  }

  // diag(v) * A with v a column vector.
  int row_scale(int v, int a) {
    if (val(v).cols() != 1 || val(v).rows() != val(a).rows())
      throw std::invalid_argument("Tape::row_scale: v must be a matching column vector");
    Node n = binary(Op::row_scale, v, a);
    n.val = val(a);
    for (int i = 0; i < n.val.rows(); ++i) {
      const double vi = val(v)(i, 0);
      for (int j = 0; j < n.val.cols(); ++j) n.val(i, j) *= vi;
    }
    return push(std::move(n));
  }

  int col(int a, int j) {
    if (j < 0 || j >= val(a).cols()) throw std::invalid_argument("Tape::col: index out of range");
    Node n = unary(Op::col, a);
    n.j = j;
    n.val = DenseMatrix(val(a).rows(), 1);
    for (int i = 0; i < n.val.rows(); ++i) n.val(i, 0) = val(a)(i, j);
    return push(std::move(n));
  }

  // full contraction sum_ij a_ij b_ij
  int dot_all(int a, int b) {
    require_same_shape(a, b, "dot_all");
    Node n = binary(Op::dot_all, a, b);
    n.val = DenseMatrix(1, 1);
    n.val(0, 0) = dot(val(a).flat(), val(b).flat());
    return push(std::move(n));
  }

  int frob_sq(int a) {
    Node n = unary(Op::frob_sq, a);
    n.val = DenseMatrix(1, 1);
    n.val(0, 0) = dot(val(a).flat(), val(a).flat());
    return push(std::move(n));
  }

  // X = A^{-1} B.  Saves LU of A and A^T for the adjoint pass.
  int solve_mat(int a, int b) {
    Node n = binary(Op::solve_mat, a, b);
    auto lu = std::make_shared<std::pair<LuFactor, LuFactor>>(LuFactor::factor(val(a)),
                                                              LuFactor::factor(transpose(val(a))));
    n.val = lu->first.solve_matrix(val(b));
    n.lu = std::move(lu);
    return push(std::move(n));
  }

  // Node with caller-supplied value and backward closure.  The closure
  // receives the output adjoint and accumulates into earlier nodes.
  int custom(DenseMatrix value, CustomBackward back) {
    Node n;
    n.op = Op::custom;
    n.val = std::move(value);
    n.back = std::make_shared<CustomBackward>(std::move(back));
    return push(std::move(n));
  }

  const DenseMatrix& value(int id) const { return nodes_[id].val; }

  double scalar_value(int id) const {
    require_scalar(id, "scalar_value");
    return nodes_[id].val(0, 0);
  }

  // Propagate adjoints from a scalar output down to all leaves.
  void backward(int output) {
    require_scalar(output, "backward (output must be scalar)");
    adj_.assign(nodes_.size(), DenseMatrix());
    has_adj_.assign(nodes_.size(), 0);
    DenseMatrix seed(1, 1);
    seed(0, 0) = 1.0;
    adj_[output] = std::move(seed);
    has_adj_[output] = 1;
    for (int i = output; i >= 0; --i) {
      if (!has_adj_[i]) continue;
      step_backward(i);
    }
  }

  const DenseMatrix& adjoint(int id) const {
    static const DenseMatrix kEmpty;
    if (id < 0 || id >= static_cast<int>(adj_.size()) || !has_adj_[id]) return kEmpty;
    return adj_[id];
  }

  // Adjoint of `id` or a zero matrix of its value shape when nothing flowed.
  DenseMatrix adjoint_or_zero(int id) const {
    const DenseMatrix& g = adjoint(id);
    if (!g.empty()) return g;
    return DenseMatrix(value(id).rows(), value(id).cols());
  }

  void accumulate_adjoint(int id, const DenseMatrix& g) {
    const Node& n = nodes_[id];
    if (n.op == Op::leaf && !n.requires_grad) return;
    if (g.rows() != n.val.rows() || g.cols() != n.val.cols())
      throw std::invalid_argument("Tape::accumulate_adjoint: shape mismatch");
    if (!has_adj_[id]) {
      adj_[id] = g;
      has_adj_[id] = 1;
      return;
    }
    for (size_t i = 0; i < g.size(); ++i) adj_[id].flat()[i] += g.flat()[i];
  }

 private:
  Node unary(Op op, int a) const {
    check_id(a);
    Node n;
    n.op = op;
    n.a = a;
    return n;
  }

  Node binary(Op op, int a, int b) const {
    check_id(a);
    check_id(b);
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    return n;
  }

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void check_id(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("Tape: node id out of range");
  }

  void require_scalar(int id, const char* where) const {
    check_id(id);
    if (nodes_[id].val.rows() != 1 || nodes_[id].val.cols() != 1)
      throw std::invalid_argument(std::string("Tape::") + where + ": node is not scalar");
  }

  void require_same_shape(int a, int b, const char* where) const {
    check_id(a);
    check_id(b);
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw std::invalid_argument(std::string("Tape::") + where + ": shape mismatch");
  }

  const DenseMatrix& val(int id) const { return nodes_[id].val; }
  double scalar(int id) const { return nodes_[id].val(0, 0); }

  void add_to(int id, DenseMatrix g) {
    const Node& n = nodes_[id];
    if (n.op == Op::leaf && !n.requires_grad) return;  // constants drop their adjoints
    if (!has_adj_[id]) {
      adj_[id] = std::move(g);
      has_adj_[id] = 1;
      return;
    }
    for (size_t i = 0; i < g.size(); ++i) adj_[id].flat()[i] += g.flat()[i];
  }

  void step_backward(int i) {
    const Node& n = nodes_[i];
    const DenseMatrix& g = adj_[i];
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::add:
        add_to(n.a, g);
        add_to(n.b, g);
        break;
      case Op::sub: {
        add_to(n.a, g);
        add_to(n.b, scaled(g, -1.0));
        break;
      }
      case Op::add_const:
        add_to(n.a, g);
        break;
      case Op::scale_const:
        add_to(n.a, scaled(g, n.k));
        break;
      case Op::mul_elem: {
        DenseMatrix ga = g, gb = g;
        for (size_t t = 0; t < g.size(); ++t) {
          ga.flat()[t] *= val(n.b).flat()[t];
          gb.flat()[t] *= val(n.a).flat()[t];
        }
        add_to(n.a, std::move(ga));
        add_to(n.b, std::move(gb));
        break;
      }
      case Op::div_elem: {
        // out = a / b:  da = g / b, db = -g * out / b
        DenseMatrix ga = g, gb = g;
        for (size_t t = 0; t < g.size(); ++t) {
          const double bi = val(n.b).flat()[t];
          ga.flat()[t] /= bi;
          gb.flat()[t] *= -n.val.flat()[t] / bi;
        }
        add_to(n.a, std::move(ga));
        add_to(n.b, std::move(gb));
        break;
      }
      case Op::mul_scalar: {
        // out = s * A
        DenseMatrix gs(1, 1);
        gs(0, 0) = dot(g.flat(), val(n.b).flat());
        add_to(n.a, std::move(gs));
        add_to(n.b, scaled(g, scalar(n.a)));
        break;
      }
      case Op::div_scalar: {
        // out = A / s
        const double s = scalar(n.b);
        add_to(n.a, scaled(g, 1.0 / s));
        DenseMatrix gs(1, 1);
        gs(0, 0) = -dot(g.flat(), n.val.flat()) / s;
        add_to(n.b, std::move(gs));
        break;
      }
      case Op::matmul: {
        add_to(n.a, direl::matmul(g, transpose(val(n.b))));
        add_to(n.b, direl::matmul(transpose(val(n.a)), g));
        break;
      }
      case Op::add_colvec: {
        add_to(n.a, g);
        DenseMatrix gb(g.rows(), 1);
        for (int r = 0; r < g.rows(); ++r) {
          double s = 0.0;
          for (int c = 0; c < g.cols(); ++c) s += g(r, c);
          gb(r, 0) = s;
        }
        add_to(n.b, std::move(gb));
        break;
      }
      case Op::act: {
        DenseMatrix ga = g;
        const DenseMatrix& z = val(n.a);
        for (size_t t = 0; t < g.size(); ++t) ga.flat()[t] *= act_deriv(n.fn, z.flat()[t]);
        add_to(n.a, std::move(ga));
        break;
      }
      case Op::act_prime: {
        DenseMatrix ga = g;
        const DenseMatrix& z = val(n.a);
        for (size_t t = 0; t < g.size(); ++t) ga.flat()[t] *= act_second(n.fn, z.flat()[t]);
        add_to(n.a, std::move(ga));
        break;
      }
      case Op::row_scale: {
        // out = diag(v) A
        const DenseMatrix& a = val(n.b);
        const DenseMatrix& v = val(n.a);
        DenseMatrix gv(v.rows(), 1);
        DenseMatrix ga = g;
        for (int r = 0; r < a.rows(); ++r) {
          double s = 0.0;
          for (int c = 0; c < a.cols(); ++c) {
            s += g(r, c) * a(r, c);
            ga(r, c) *= v(r, 0);
          }
          gv(r, 0) = s;
        }
        add_to(n.a, std::move(gv));
        add_to(n.b, std::move(ga));
        break;
      }
      case Op::col: {
        DenseMatrix ga(val(n.a).rows(), val(n.a).cols());
        for (int r = 0; r < ga.rows(); ++r) ga(r, n.j) = g(r, 0);
        add_to(n.a, std::move(ga));
        break;
      }
      case Op::dot_all: {
        const double gs = g(0, 0);
        add_to(n.a, scaled(val(n.b), gs));
        add_to(n.b, scaled(val(n.a), gs));
        break;
      }
      case Op::frob_sq: {
        add_to(n.a, scaled(val(n.a), 2.0 * g(0, 0)));
        break;
      }
      case Op::solve_mat: {
        // X = A^{-1} B:  dB = A^{-T} G, dA = -(A^{-T} G) X^T
        const DenseMatrix w = n.lu->second.solve_matrix(g);
        add_to(n.b, w);
        add_to(n.a, scaled(direl::matmul(w, transpose(n.val)), -1.0));
        break;
      }
      case Op::custom:
        (*n.back)(*this, g);
        break;
    }
  }

  std::vector<Node> nodes_;
  std::vector<DenseMatrix> adj_;
  std::vector<char> has_adj_;
};

}  // namespace direl
