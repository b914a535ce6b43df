#include <catch2/catch_amalgamated.hpp>

#include "direl/field.hpp"
#include "field_fixtures.hpp"

using namespace direl;
using direl::testing::field_with_weights;
using direl::testing::max_rel_err;
using direl::testing::random_batch;
using direl::testing::random_field;

TEST_CASE("normalize_weights: diag(4,4) with tanh becomes diag(1,1)") {
  LocalizationParams loc;
  LocalizedField f = field_with_weights({DenseMatrix::from_rows({{4, 0}, {0, 4}})},
                                        Activation::tanh_fn, loc, ThetaScheme(0.0));
  const auto views = normalize_weights(f.base);
  REQUIRE(views.size() == 1);
  CHECK(views[0](0, 0) == Catch::Approx(1.0).epsilon(1e-8));
  CHECK(views[0](1, 1) == Catch::Approx(1.0).epsilon(1e-8));
  CHECK(views[0](0, 1) == Catch::Approx(0.0).margin(1e-12));
  // original parameters untouched
  CHECK(f.base.layers[0].w(0, 0) == 4.0);
}

TEST_CASE("normalize_weights: idempotent on an already-normalized matrix") {
  Rng rng(3);
  LocalizedField f = random_field(rng, 0.0);
  const auto first = normalize_weights(f.base);
  LocalizedField g = f;
  for (size_t i = 0; i < first.size(); ++i) g.base.layers[i].w = first[i];
  const auto second = normalize_weights(g.base);
  for (size_t i = 0; i < first.size(); ++i)
    CHECK(frobenius_norm(sub(second[i], first[i])) < 1e-6 * std::max(1.0, frobenius_norm(first[i])));
}

TEST_CASE("normalize_weights: near-zero weights are left alone") {
  LocalizationParams loc;
  LocalizedField f = field_with_weights({scaled(DenseMatrix::identity(2), 1e-12)},
                                        Activation::tanh_fn, loc, ThetaScheme(0.0));
  const auto views = normalize_weights(f.base);
  CHECK(views[0](0, 0) == Catch::Approx(1e-12));
}

TEST_CASE("supported activations all use derivative bound 1") {
  CHECK(act_deriv_bound(Activation::relu) == 1.0);
  CHECK(act_deriv_bound(Activation::tanh_fn) == 1.0);
  CHECK(act_deriv_bound(Activation::sigmoid) == 1.0);
}

TEST_CASE("localization: hand cases") {
  SECTION("dissipative, gamma_c = 0, theta = 0") {
    LocalizationParams p;
    p.mode = LocalizationMode::dissipative;
    const Localization l = localization(p, 0.0);
    CHECK(l.c_hat == Catch::Approx(0.5));
    CHECK(l.c == Catch::Approx(-0.5));
  }
  SECTION("r clamps at zero when R^{-1}(L) < c") {
    LocalizationParams p;
    p.c_hat_1 = p.c_hat_2 = 1.5;
    p.L_1 = p.L_2 = 0.5;
    const Localization l = localization(p, 0.0);
    CHECK(l.r == 0.0);
  }
  SECTION("degenerate range pins c_hat") {
    LocalizationParams p;
    p.c_hat_1 = p.c_hat_2 = 0.8;
    for (double g : {-5.0, 0.0, 5.0}) {
      p.gamma_c = g;
      CHECK(localization(p, 0.3).c_hat == Catch::Approx(0.8));
    }
  }
  SECTION("c_hat is strictly increasing in gamma_c when c_hat_2 > c_hat_1") {
    LocalizationParams p;
    double prev = -1.0;
    for (double g = -4.0; g <= 4.0; g += 0.5) {
      p.gamma_c = g;
      const double ch = localization(p, 0.0).c_hat;
      CHECK(ch > prev);
      prev = ch;
    }
  }
  SECTION("invalid ranged bounds are rejected") {
    LocalizationParams p;
    p.L_1 = -1.0;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  }
}

TEST_CASE("eval: r = 0 reduces to pure scaling") {
  LocalizationParams loc;
  loc.c_hat_1 = loc.c_hat_2 = 0.6;
  loc.L_1 = loc.L_2 = 0.3;  // below c_hat, so r = 0
  Rng rng(4);
  LocalizedField f = random_field(rng, 0.0);
  f.loc = loc;
  const Localization l = f.localize();
  REQUIRE(l.r == 0.0);
  const DenseMatrix x = random_batch(2, 20, rng);
  const DenseMatrix y = f.eval_batch(x);
  for (size_t i = 0; i < y.size(); ++i) CHECK(y.flat()[i] == l.c * x.flat()[i]);
}

TEST_CASE("eval: zero weights and biases with tanh give c*x") {
  LocalizationParams loc;
  LocalizedField f = field_with_weights({DenseMatrix(3, 2), DenseMatrix(2, 3)},
                                        Activation::tanh_fn, loc, ThetaScheme(0.0));
  Rng rng(5);
  const DenseMatrix x = random_batch(2, 10, rng);
  const Localization l = f.localize();
  const DenseMatrix y = f.eval_batch(x);
  for (size_t i = 0; i < y.size(); ++i)
    CHECK(y.flat()[i] == Catch::Approx(l.c * x.flat()[i]).margin(1e-15));
}

TEST_CASE("eval: field is (|c| + r)-Lipschitz over random pairs") {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    LocalizedField f = random_field(rng, 0.25 * trial, LocalizationMode::ranged, {16, 16});
    normalize_weights(f.base);
    const Localization l = f.localize();
    const double bound = std::abs(l.c) + l.r;
    for (int k = 0; k < 200; ++k) {
      const DenseMatrix a = random_batch(2, 1, rng, 4.0);
      const DenseMatrix b = random_batch(2, 1, rng, 4.0);
      const auto fa = f.eval_point(get_col(a, 0));
      const auto fb = f.eval_point(get_col(b, 0));
      double dy = 0.0, dx = 0.0;
      for (int i = 0; i < 2; ++i) {
        dy += (fa[i] - fb[i]) * (fa[i] - fb[i]);
        dx += (a(i, 0) - b(i, 0)) * (a(i, 0) - b(i, 0));
      }
      CHECK(std::sqrt(dy) <= bound * std::sqrt(dx) * (1.0 + 1e-6) + 1e-12);
    }
  }
}

TEST_CASE("jacobian: r = 0 gives c I") {
  LocalizationParams loc;
  loc.c_hat_1 = loc.c_hat_2 = 0.7;
  loc.L_1 = loc.L_2 = 0.2;
  Rng rng(8);
  LocalizedField f = random_field(rng, 0.5);
  f.loc = loc;
  const Localization l = f.localize();
  const DenseMatrix j = f.jacobian(std::vector<double>{0.3, -1.2});
  CHECK(j(0, 0) == Catch::Approx(l.c));
  CHECK(j(1, 1) == Catch::Approx(l.c));
  CHECK(j(0, 1) == 0.0);
}

TEST_CASE("jacobian: linear single layer with identity activation") {
  const DenseMatrix a = DenseMatrix::from_rows({{0.4, -0.2}, {0.1, 0.3}});
  LocalizationParams loc;
  LocalizedField f = field_with_weights({a}, Activation::identity, loc, ThetaScheme(0.0));
  const Localization l = f.localize();
  const double sigma = spectral_norm(a, 1e-12, 1000).sigma;
  const DenseMatrix j = f.jacobian(std::vector<double>{1.0, 2.0});
  // J = c I + r A / ||A||
  for (int i = 0; i < 2; ++i)
    for (int k = 0; k < 2; ++k) {
      const double want = (i == k ? l.c : 0.0) + l.r * a(i, k) / sigma;
      CHECK(j(i, k) == Catch::Approx(want).epsilon(1e-7));
    }
}

TEST_CASE("jacobian matches finite differences") {
  Rng rng(11);
  for (double theta : {0.0, 0.5, 1.0}) {
    LocalizedField f = random_field(rng, theta, LocalizationMode::ranged, {8, 8});
    const std::vector<double> x = {0.7, -0.4};
    const DenseMatrix j = f.jacobian(x);
    for (int out = 0; out < 2; ++out) {
      const auto fo = [&](std::span<const double> q) { return f.eval_point(q)[out]; };
      const auto row = finite_difference_gradient(fo, x, 1e-6);
      for (int in = 0; in < 2; ++in)
        CHECK(std::abs(j(out, in) - row[in]) < 1e-5 * std::max(1.0, std::abs(row[in])));
    }
  }
}

TEST_CASE("uniform normalization: Jacobian of the normalized MLP stays within 1 + 5e-3") {
  Rng rng(21);
  for (int trial = 0; trial < 4; ++trial) {
    LocalizedField f = random_field(rng, 0.0, LocalizationMode::ranged, {16, 16});
    normalize_weights(f.base);
    for (int k = 0; k < 250; ++k) {
      const DenseMatrix x = random_batch(2, 1, rng, 4.0);
      const DenseMatrix j = mlp_jacobian(f.base, get_col(x, 0));
      CHECK(spectral_norm(j, 1e-10, 500).sigma <= 1.0 + 5e-3);
    }
  }
}

TEST_CASE("eigenvalue containment in B(c, r)") {
  Rng rng(22);
  for (double theta : {0.0, 0.25, 0.5, 1.0}) {
    LocalizedField f = random_field(rng, theta, LocalizationMode::ranged, {8, 8});
    normalize_weights(f.base);
    const Localization l = f.localize();
    for (int k = 0; k < 250; ++k) {
      const DenseMatrix x = random_batch(2, 1, rng, 4.0);
      const auto e = eigenvalues(f.jacobian(get_col(x, 0)));
      for (const Complex& lam : e.values)
        CHECK(std::abs(lam - Complex(l.c, 0)) <= l.r + 1e-6 * (1.0 + l.r));
    }
  }
}

TEST_CASE("dissipative mode: |R_theta(lambda)| stays below max(c_hat, L) < 1") {
  Rng rng(23);
  for (double theta : {0.0, 0.5, 1.0}) {
    LocalizedField f = random_field(rng, theta, LocalizationMode::dissipative, {8});
    normalize_weights(f.base);
    const Localization l = f.localize();
    const double bound = std::max(l.c_hat, l.L);
    REQUIRE(bound < 1.0);
    for (int k = 0; k < 200; ++k) {
      const DenseMatrix x = random_batch(2, 1, rng, 4.0);
      const auto e = eigenvalues(f.jacobian(get_col(x, 0)));
      for (const Complex& lam : e.values)
        CHECK(std::abs(stab_value(theta, lam)) <= bound + 1e-6);
    }
  }
}

TEST_CASE("lipschitz_bound") {
  Rng rng(24);
  SECTION("dissipative mode is below 1") {
    for (double theta : {0.0, 0.5, 1.0}) {
      LocalizedField f = random_field(rng, theta, LocalizationMode::dissipative);
      const LipschitzBound b = lipschitz_bound(f);
      CHECK(b.certified);
      CHECK(b.value < 1.0);
    }
  }
  SECTION("ranged mode with L in [1, 5]") {
    LocalizedField f = random_field(rng, 0.0, LocalizationMode::ranged);
    const Localization l = f.localize();
    const LipschitzBound b = lipschitz_bound(f);
    CHECK(b.value >= std::max(l.c_hat, 1.0) - 1e-12);
    CHECK(b.value <= 5.0);
  }
  SECTION("r = 0 returns c_hat") {
    LocalizedField f = random_field(rng, 0.0);
    f.loc.c_hat_1 = f.loc.c_hat_2 = 0.9;
    f.loc.L_1 = f.loc.L_2 = 0.1;
    CHECK(lipschitz_bound(f).value == Catch::Approx(0.9));
  }
}

TEST_CASE("localization gradients through (c, r) match finite differences") {
  Rng rng(25);
  for (double theta : {0.0, 0.25, 0.5, 1.0}) {
    for (auto mode : {LocalizationMode::ranged, LocalizationMode::dissipative}) {
      LocalizedField f = random_field(rng, theta, mode);
      // scalar probe loss c^2 + 3 r^2 exercises both localization outputs
      const auto loss_at = [&](double gc, double gl) {
        LocalizationParams p = f.loc;
        p.gamma_c = gc;
        p.gamma_L = gl;
        const Localization l = localization(p, theta);
        return l.c * l.c + 3.0 * l.r * l.r;
      };
      Tape t;
      StagedField sf = stage(t, f);
      const int loss = t.add(t.frob_sq(sf.c_id), t.scale_const(t.frob_sq(sf.r_id), 3.0));
      t.backward(loss);
      const double g_c = t.adjoint_or_zero(sf.gamma_c_id)(0, 0);
      const double g_l = t.adjoint_or_zero(sf.gamma_L_id)(0, 0);
      const double h = 1e-6;
      const double fd_c =
          (loss_at(f.loc.gamma_c + h, f.loc.gamma_L) - loss_at(f.loc.gamma_c - h, f.loc.gamma_L)) /
          (2 * h);
      const double fd_l =
          (loss_at(f.loc.gamma_c, f.loc.gamma_L + h) - loss_at(f.loc.gamma_c, f.loc.gamma_L - h)) /
          (2 * h);
      CHECK(std::abs(g_c - fd_c) < 1e-4 * std::max(1.0, std::abs(fd_c)));
      CHECK(std::abs(g_l - fd_l) < 1e-4 * std::max(1.0, std::abs(fd_l)));
    }
  }
}

TEST_CASE("tape evaluation matches the plain path") {
  Rng rng(26);
  LocalizedField f = random_field(rng, 0.5, LocalizationMode::ranged, {8, 8});
  const DenseMatrix x = random_batch(2, 30, rng);
  const DenseMatrix plain = f.eval_batch(x);
  Tape t;
  StagedField sf = stage(t, f);
  const StagedEval ev = eval_on_tape(sf, t.constant(x));
  const DenseMatrix& taped = t.value(ev.f_id);
  CHECK(frobenius_norm(sub(plain, taped)) < 1e-13 * std::max(1.0, frobenius_norm(plain)));
}

TEST_CASE("param vector round trip") {
  Rng rng(27);
  LocalizedField f = random_field(rng, 0.0, LocalizationMode::ranged, {4, 4});
  const auto p = collect_params(f);
  CHECK(p.size() == param_count(f));
  LocalizedField g = f;
  std::vector<double> q(p);
  for (double& x : q) x += 0.25;
  set_params(g, q);
  CHECK(collect_params(g) == q);
  set_params(g, p);
  CHECK(collect_params(g) == p);
  CHECK_THROWS_AS(set_params(g, std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("field construction validates inputs") {
  LocalizationParams loc;
  CHECK_THROWS_AS(
      make_localized_field(0, std::vector<int>{4}, Activation::tanh_fn, loc, ThetaScheme(0.0), 1),
      std::invalid_argument);
  CHECK_THROWS_AS(
      make_localized_field(2, std::vector<int>{0}, Activation::tanh_fn, loc, ThetaScheme(0.0), 1),
      std::invalid_argument);
}
