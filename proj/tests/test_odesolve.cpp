#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "lmt/odesolve.hpp"
#include "lmt/rng.hpp"
#include "oracles.hpp"

using namespace lmt;

namespace {

const OdeFunc kZeroField = [](double, std::span<const double>,
                              std::span<double> dz) {
  std::fill(dz.begin(), dz.end(), 0.0);
};

const OdeFunc kExpField = [](double, std::span<const double> z,
                             std::span<double> dz) {
  for (std::size_t i = 0; i < z.size(); ++i) dz[i] = z[i];
};

const OdeFunc kRotationField = [](double, std::span<const double> z,
                                  std::span<double> dz) {
  dz[0] = -z[1];
  dz[1] = z[0];
};

}  // namespace

TEST_CASE("a zero field leaves the state unchanged with zero error",
          "[odesolve]") {
  std::vector<double> z = {1.0, -2.0, 3.5};
  auto [z5, err] = step_dopri5(kZeroField, z, 0.0, 0.3);
  REQUIRE(z5 == z);
  REQUIRE(err == 0.0);
}

TEST_CASE("one dopri5 step on dz=z matches the exponential", "[odesolve]") {
  std::vector<double> z = {1.0};
  auto [z5, err] = step_dopri5(kExpField, z, 0.0, 0.1);
  REQUIRE(std::abs(z5[0] - std::exp(0.1)) < 1e-8);
  REQUIRE(err > 0.0);
  REQUIRE_THROWS_AS(step_dopri5(kExpField, z, 0.0, 0.0),
                    std::invalid_argument);
}

TEST_CASE("local error estimate decays at fifth order", "[odesolve]") {
  std::vector<double> z = {1.0};
  // fixed scale so the estimate is proportional to the raw truncation error
  const double atol = 1.0, rtol = 0.0;
  std::vector<double> hs = {0.2, 0.1, 0.05, 0.025};
  std::vector<double> errs;
  for (double h : hs)
    errs.push_back(step_dopri5(kExpField, z, 0.0, h, rtol, atol).err);
  for (std::size_t i = 0; i + 1 < errs.size(); ++i) {
    const double order = std::log2(errs[i] / errs[i + 1]);
    REQUIRE(order > 4.7);
    REQUIRE(order < 5.3);
  }
}

TEST_CASE("dz=z over a unit interval reaches e", "[odesolve]") {
  SolverConfig cfg;
  cfg.rtol = 1e-7;
  cfg.atol = 1e-9;
  std::vector<double> z0 = {1.0};
  auto res = solve_ivp(kExpField, z0, 0.0, 1.0, cfg);
  REQUIRE(std::abs(res.z1[0] - std::exp(1.0)) < 1e-6);
  REQUIRE(res.accepted > 0);
}

TEST_CASE("the rotation field lands on the quarter turn", "[odesolve]") {
  SolverConfig cfg;
  std::vector<double> z0 = {1.0, 0.0};
  auto res = solve_ivp(kRotationField, z0, 0.0, kPi / 2.0, cfg);
  REQUIRE(std::abs(res.z1[0] - 0.0) < 1e-5);
  REQUIRE(std::abs(res.z1[1] - 1.0) < 1e-5);
}

TEST_CASE("zero horizon returns the initial state bit-identically",
          "[odesolve]") {
  SolverConfig cfg;
  std::vector<double> z0 = {0.1, 0.2, 0.3};
  auto res = solve_ivp(kExpField, z0, 0.7, 0.7, cfg);
  REQUIRE(res.z1 == z0);
  REQUIRE(res.accepted == 0);
}

TEST_CASE("reversed horizons are rejected", "[odesolve]") {
  SolverConfig cfg;
  std::vector<double> z0 = {1.0};
  REQUIRE_THROWS_AS(solve_ivp(kExpField, z0, 1.0, 0.0, cfg),
                    std::invalid_argument);
}

TEST_CASE("accuracy improves monotonically as rtol tightens", "[odesolve]") {
  std::vector<double> z0 = {1.0};
  double prev_err = 1e9;
  for (double rtol : {1e-3, 1e-5, 1e-7, 1e-9}) {
    SolverConfig cfg;
    cfg.rtol = rtol;
    cfg.atol = rtol * 1e-2;
    auto res = solve_ivp(kExpField, z0, 0.0, 1.0, cfg);
    const double err = std::abs(res.z1[0] - std::exp(1.0));
    REQUIRE(err < prev_err);
    prev_err = err;
  }
}

TEST_CASE("linear systems scale linearly in the initial state", "[odesolve]") {
  SolverConfig cfg;
  cfg.rtol = 1e-9;
  cfg.atol = 1e-12;
  std::vector<double> z0 = {0.3, -0.7};
  auto base = solve_ivp(kRotationField, z0, 0.0, 0.9, cfg);
  const double alpha = 3.7;
  std::vector<double> scaled = {alpha * z0[0], alpha * z0[1]};
  auto big = solve_ivp(kRotationField, scaled, 0.0, 0.9, cfg);
  for (int i = 0; i < 2; ++i)
    REQUIRE(std::abs(big.z1[static_cast<std::size_t>(i)] -
                     alpha * base.z1[static_cast<std::size_t>(i)]) < 1e-8);
}

TEST_CASE("forward then reversed solve returns to the start", "[odesolve]") {
  SolverConfig cfg;
  cfg.rtol = 1e-9;
  cfg.atol = 1e-11;
  std::vector<double> z0 = {1.0, 0.25};
  const double T = 1.3;
  auto fwd = solve_ivp(kRotationField, z0, 0.0, T, cfg);
  // integrate the time-reversed field forward over the same horizon
  OdeFunc reversed = [&](double, std::span<const double> z,
                         std::span<double> dz) {
    kRotationField(0.0, z, dz);
    for (double& v : dz) v = -v;
  };
  auto back = solve_ivp(reversed, fwd.z1, 0.0, T, cfg);
  REQUIRE(std::abs(back.z1[0] - z0[0]) < 1e-5);
  REQUIRE(std::abs(back.z1[1] - z0[1]) < 1e-5);
}

TEST_CASE("the step limit reports stiffness with position", "[odesolve]") {
  SolverConfig cfg;
  cfg.max_steps = 10;
  cfg.rtol = 1e-12;
  cfg.atol = 1e-14;
  std::vector<double> z0 = {1.0};
  REQUIRE_THROWS_WITH(solve_ivp(kExpField, z0, 0.0, 50.0, cfg),
                      Catch::Matchers::ContainsSubstring("t="));
}

TEST_CASE("rk4 integrates the exponential accurately", "[odesolve]") {
  SolverConfig cfg;
  cfg.method = OdeMethod::kRk4;
  cfg.h0 = 0.01;
  std::vector<double> z0 = {1.0};
  auto res = solve_ivp(kExpField, z0, 0.0, 1.0, cfg);
  REQUIRE(std::abs(res.z1[0] - std::exp(1.0)) < 1e-8);
  REQUIRE(res.accepted == 100);
}

TEST_CASE("rk4 global error decays at fourth order", "[odesolve]") {
  std::vector<double> z0 = {1.0};
  auto run = [&](double h) {
    SolverConfig cfg;
    cfg.method = OdeMethod::kRk4;
    cfg.h0 = h;
    return std::abs(solve_ivp(kExpField, z0, 0.0, 1.0, cfg).z1[0] -
                    std::exp(1.0));
  };
  const double order = std::log2(run(0.02) / run(0.01));
  REQUIRE(order > 3.7);
  REQUIRE(order < 4.3);
}

namespace {

// dz/dt = a*z with a single parameter a: the closed form z(t1) = z0*e^(a*T)
// gives dL/dz0 = e^(a*T) and dL/da = z0*T*e^(a*T) for L = z(t1).
struct ScalarLinearSystem final : OdeSystem {
  double a = 1.0;
  std::size_t state_dim() const override { return 1; }
  std::size_t param_dim() const override { return 1; }
  void eval(double, std::span<const double> z,
            std::span<double> dz) const override {
    dz[0] = a * z[0];
  }
  void vjp(double, std::span<const double> z, std::span<const double> adj,
           std::span<double> jz, std::span<double> jtheta) const override {
    jz[0] = adj[0] * a;
    jtheta[0] = adj[0] * z[0];
  }
};

struct ZeroSystem final : OdeSystem {
  std::size_t state_dim() const override { return 2; }
  std::size_t param_dim() const override { return 3; }
  void eval(double, std::span<const double>,
            std::span<double> dz) const override {
    std::fill(dz.begin(), dz.end(), 0.0);
  }
  void vjp(double, std::span<const double>, std::span<const double>,
           std::span<double> jz, std::span<double> jtheta) const override {
    std::fill(jz.begin(), jz.end(), 0.0);
    std::fill(jtheta.begin(), jtheta.end(), 0.0);
  }
};

// One tanh hidden layer: f(z) = W2 * tanh(W1 z + b1). All Jacobian products
// are transcribed by hand, independent of the autodiff library.
struct TanhMlpSystem final : OdeSystem {
  std::size_t n, m;
  std::vector<double> w1, b1, w2;  // w1: m*n, b1: m, w2: n*m

  TanhMlpSystem(std::size_t n_, std::size_t m_, lmt::Rng& rng) : n(n_), m(m_) {
    w1.resize(m * n);
    b1.resize(m);
    w2.resize(n * m);
    for (double& v : w1) v = rng.normal(0.0, 0.8);
    for (double& v : b1) v = rng.normal(0.0, 0.2);
    for (double& v : w2) v = rng.normal(0.0, 0.8);
  }

  std::size_t state_dim() const override { return n; }
  std::size_t param_dim() const override { return w1.size() + b1.size() + w2.size(); }

  void hidden(std::span<const double> z, std::vector<double>& h) const {
    h.assign(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      double acc = b1[i];
      for (std::size_t j = 0; j < n; ++j) acc += w1[i * n + j] * z[j];
      h[i] = std::tanh(acc);
    }
  }

  void eval(double, std::span<const double> z,
            std::span<double> dz) const override {
    std::vector<double> h;
    hidden(z, h);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += w2[i * m + j] * h[j];
      dz[i] = acc;
    }
  }

  void vjp(double, std::span<const double> z, std::span<const double> adj,
           std::span<double> jz, std::span<double> jtheta) const override {
    std::vector<double> h;
    hidden(z, h);
    // u_j = (adj^T W2)_j * (1 - h_j^2)
    std::vector<double> u(m);
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += adj[i] * w2[i * m + j];
      u[j] = acc * (1.0 - h[j] * h[j]);
    }
    for (std::size_t k = 0; k < n; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += u[j] * w1[j * n + k];
      jz[k] = acc;
    }
    // layout: [w1 | b1 | w2]
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t k = 0; k < n; ++k) jtheta[j * n + k] = u[j] * z[k];
    for (std::size_t j = 0; j < m; ++j) jtheta[w1.size() + j] = u[j];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        jtheta[w1.size() + b1.size() + i * m + j] = adj[i] * h[j];
  }

  std::span<double> param(std::size_t flat_index) {
    if (flat_index < w1.size()) return {&w1[flat_index], 1};
    flat_index -= w1.size();
    if (flat_index < b1.size()) return {&b1[flat_index], 1};
    flat_index -= b1.size();
    return {&w2[flat_index], 1};
  }
};

}  // namespace

TEST_CASE("adjoint recovers the analytic linear-system gradients",
          "[odesolve]") {
  ScalarLinearSystem sys;
  SolverConfig cfg;
  cfg.rtol = 1e-10;
  cfg.atol = 1e-12;
  std::vector<double> z0 = {1.0};
  std::vector<double> seed = {1.0};
  auto g = adjoint_grad(sys, z0, 0.0, 1.0, seed, cfg);
  REQUIRE(std::abs(g.dz0[0] - std::exp(1.0)) < 1e-7);
  REQUIRE(std::abs(g.dtheta[0] - std::exp(1.0)) < 1e-7);
}

TEST_CASE("a zero field passes the loss gradient straight through",
          "[odesolve]") {
  ZeroSystem sys;
  SolverConfig cfg;
  std::vector<double> z0 = {0.4, -0.2};
  std::vector<double> seed = {1.5, -2.5};
  auto g = adjoint_grad(sys, z0, 0.0, 2.0, seed, cfg);
  REQUIRE(g.dz0 == seed);
  for (double v : g.dtheta) REQUIRE(v == 0.0);
}

TEST_CASE("adjoint gradients of a tanh net match finite differences",
          "[odesolve]") {
  Rng rng(71);
  TanhMlpSystem sys(3, 5, rng);
  SolverConfig cfg;
  cfg.rtol = 1e-8;
  cfg.atol = 1e-10;
  std::vector<double> z0 = {0.3, -0.5, 0.8};
  const double t1 = 0.7;
  // L = sum of weighted terminal components
  std::vector<double> seed = {1.0, -0.5, 2.0};

  OdeFunc f = [&](double t, std::span<const double> z, std::span<double> dz) {
    sys.eval(t, z, dz);
  };
  auto loss = [&]() {
    auto res = solve_ivp(f, z0, 0.0, t1, cfg);
    double acc = 0.0;
    for (std::size_t i = 0; i < 3; ++i) acc += seed[i] * res.z1[i];
    return acc;
  };

  auto g = adjoint_grad(sys, z0, 0.0, t1, seed, cfg);

  for (std::size_t i = 0; i < 3; ++i) {
    const double orig = z0[i];
    const double h = 1e-5;
    z0[i] = orig + h;
    const double lp = loss();
    z0[i] = orig - h;
    const double lm = loss();
    z0[i] = orig;
    const double fd = (lp - lm) / (2.0 * h);
    REQUIRE(oracle::rel_err(g.dz0[i], fd) < 1e-3);
  }

  Rng pick(5);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t idx = pick.uniform_index(sys.param_dim());
    auto slot = sys.param(idx);
    const double orig = slot[0];
    const double h = 1e-5;
    slot[0] = orig + h;
    const double lp = loss();
    slot[0] = orig - h;
    const double lm = loss();
    slot[0] = orig;
    const double fd = (lp - lm) / (2.0 * h);
    REQUIRE(oracle::rel_err(g.dtheta[idx], fd) < 1e-3);
  }
}

TEST_CASE("solver method names parse", "[odesolve]") {
  REQUIRE(ode_method_from_string("rk4") == OdeMethod::kRk4);
  REQUIRE(ode_method_from_string("dopri5") == OdeMethod::kDopri5);
  REQUIRE_THROWS_AS(ode_method_from_string("euler"), std::invalid_argument);
}
