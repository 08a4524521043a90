#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lmt {

// Right-hand side u(t, z): writes dz/dt into dz. Parameters, if any, are
// captured by the callable.
using OdeFunc =
    std::function<void(double t, std::span<const double> z, std::span<double> dz)>;

enum class OdeMethod { kRk4, kDopri5 };

inline OdeMethod ode_method_from_string(const std::string& s) {
  if (s == "rk4") return OdeMethod::kRk4;
  if (s == "dopri5") return OdeMethod::kDopri5;
  throw std::invalid_argument("unknown ode method: " + s);
}

struct SolverConfig {
  OdeMethod method = OdeMethod::kDopri5;
  double rtol = 1e-5;
  double atol = 1e-6;
  double h0 = 0.0;  // <= 0 selects the startup heuristic
  int max_steps = 100000;
  double safety = 0.9;
};

struct IvpResult {
  std::vector<double> z1;
  int accepted = 0;
  int rejected = 0;
};

namespace dopri {

// Dormand-Prince 5(4) tableau. The last stage evaluates at the accepted
// solution (first-same-as-last), so one f evaluation per accepted step is
// reused.
inline constexpr double c2 = 1.0 / 5.0, c3 = 3.0 / 10.0, c4 = 4.0 / 5.0,
                        c5 = 8.0 / 9.0;
inline constexpr double a21 = 1.0 / 5.0;
inline constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
inline constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
inline constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0,
                        a53 = 64448.0 / 6561.0, a54 = -212.0 / 729.0;
inline constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0,
                        a63 = 46732.0 / 5247.0, a64 = 49.0 / 176.0,
                        a65 = -5103.0 / 18656.0;
inline constexpr double b1 = 35.0 / 384.0, b3 = 500.0 / 1113.0,
                        b4 = 125.0 / 192.0, b5 = -2187.0 / 6784.0,
                        b6 = 11.0 / 84.0;
// b - b_hat: weights of the embedded 4th-order error estimate
inline constexpr double d1 = 71.0 / 57600.0, d3 = -71.0 / 16695.0,
                        d4 = 71.0 / 1920.0, d5 = -17253.0 / 339200.0,
                        d6 = 22.0 / 525.0, d7 = -1.0 / 40.0;

struct Workspace {
  std::vector<double> k1, k2, k3, k4, k5, k6, k7, ytmp, z5;
  explicit Workspace(std::size_t n)
      : k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), ytmp(n), z5(n) {}
};

// One 5(4) step from (t, z) with k1 = f(t, z) already evaluated. Fills
// w.z5 and w.k7 = f(t+h, z5); returns the scaled RMS error estimate.
inline double step(const OdeFunc& f, std::span<const double> z, double t,
                   double h, double rtol, double atol, Workspace& w) {
  const std::size_t n = z.size();
  for (std::size_t i = 0; i < n; ++i) w.ytmp[i] = z[i] + h * a21 * w.k1[i];
  f(t + c2 * h, w.ytmp, w.k2);
  for (std::size_t i = 0; i < n; ++i)
    w.ytmp[i] = z[i] + h * (a31 * w.k1[i] + a32 * w.k2[i]);
  f(t + c3 * h, w.ytmp, w.k3);
  for (std::size_t i = 0; i < n; ++i)
    w.ytmp[i] = z[i] + h * (a41 * w.k1[i] + a42 * w.k2[i] + a43 * w.k3[i]);
  f(t + c4 * h, w.ytmp, w.k4);
  for (std::size_t i = 0; i < n; ++i)
    w.ytmp[i] = z[i] + h * (a51 * w.k1[i] + a52 * w.k2[i] + a53 * w.k3[i] +
                            a54 * w.k4[i]);
  f(t + c5 * h, w.ytmp, w.k5);
  for (std::size_t i = 0; i < n; ++i)
    w.ytmp[i] = z[i] + h * (a61 * w.k1[i] + a62 * w.k2[i] + a63 * w.k3[i] +
                            a64 * w.k4[i] + a65 * w.k5[i]);
  f(t + h, w.ytmp, w.k6);
  for (std::size_t i = 0; i < n; ++i)
    w.z5[i] = z[i] + h * (b1 * w.k1[i] + b3 * w.k3[i] + b4 * w.k4[i] +
                          b5 * w.k5[i] + b6 * w.k6[i]);
  f(t + h, w.z5, w.k7);

  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = h * (d1 * w.k1[i] + d3 * w.k3[i] + d4 * w.k4[i] +
                          d5 * w.k5[i] + d6 * w.k6[i] + d7 * w.k7[i]);
    const double sc =
        atol + rtol * std::max(std::abs(z[i]), std::abs(w.z5[i]));
    acc += (e / sc) * (e / sc);
  }
  return std::sqrt(acc / static_cast<double>(n));
}

// Startup step size from the scaled norms of z0, f0 and a trial Euler step.
inline double initial_step(const OdeFunc& f, std::span<const double> z0,
                           double t0, double hmax, double rtol, double atol) {
  const std::size_t n = z0.size();
  std::vector<double> f0(n), z1(n), f1(n);
  f(t0, z0, f0);
  double d0 = 0.0, d1n = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double sc = atol + rtol * std::abs(z0[i]);
    d0 += (z0[i] / sc) * (z0[i] / sc);
    d1n += (f0[i] / sc) * (f0[i] / sc);
  }
  d0 = std::sqrt(d0 / static_cast<double>(n));
  d1n = std::sqrt(d1n / static_cast<double>(n));
  double h = (d0 < 1e-5 || d1n < 1e-5) ? 1e-6 : 0.01 * (d0 / d1n);
  h = std::min(h, hmax);
  for (std::size_t i = 0; i < n; ++i) z1[i] = z0[i] + h * f0[i];
  f(t0 + h, z1, f1);
  double d2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double sc = atol + rtol * std::abs(z0[i]);
    d2 += ((f1[i] - f0[i]) / sc) * ((f1[i] - f0[i]) / sc);
  }
  d2 = std::sqrt(d2 / static_cast<double>(n)) / h;
  const double dm = std::max(d1n, d2);
  const double h1 =
      dm <= 1e-15 ? std::max(1e-6, h * 1e-3) : std::pow(0.01 / dm, 0.2);
  h = std::min({100.0 * h, h1, hmax});
  if (!std::isfinite(h) || h <= 0.0) h = hmax / 100.0;
  return h;
}

}  // namespace dopri

// One standalone embedded step; exposed for direct inspection in tests.
struct Dopri5Step {
  std::vector<double> z5;
  double err = 0.0;
};

inline Dopri5Step step_dopri5(const OdeFunc& f, std::span<const double> z,
                              double t, double h, double rtol = 1e-5,
                              double atol = 1e-6) {
  if (h == 0.0) throw std::invalid_argument("step_dopri5: h must be nonzero");
  dopri::Workspace w(z.size());
  f(t, z, w.k1);
  const double err = dopri::step(f, z, t, h, rtol, atol, w);
  return {std::move(w.z5), err};
}

inline void rk4_step(const OdeFunc& f, std::span<const double> z, double t,
                     double h, std::span<double> out) {
  const std::size_t n = z.size();
  std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);
  f(t, z, k1);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = z[i] + 0.5 * h * k1[i];
  f(t + 0.5 * h, tmp, k2);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = z[i] + 0.5 * h * k2[i];
  f(t + 0.5 * h, tmp, k3);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = z[i] + h * k3[i];
  f(t + h, tmp, k4);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = z[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

inline IvpResult solve_ivp(const OdeFunc& f, std::span<const double> z0,
                           double t0, double t1, const SolverConfig& config) {
  if (t1 < t0)
    throw std::invalid_argument("solve_ivp: t1 < t0 (" + std::to_string(t1) +
                                " < " + std::to_string(t0) + ")");
  for (double v : z0)
    if (!std::isfinite(v))
      throw std::invalid_argument("solve_ivp: non-finite initial state");
  IvpResult res;
  res.z1.assign(z0.begin(), z0.end());
  if (t0 == t1) return res;

  const double horizon = t1 - t0;
  if (config.method == OdeMethod::kRk4) {
    const double base = config.h0 > 0.0 ? config.h0 : horizon / 100.0;
    const long n_steps =
        std::max(1L, static_cast<long>(std::ceil(horizon / base)));
    if (n_steps > config.max_steps)
      throw std::runtime_error("solve_ivp: rk4 needs " +
                               std::to_string(n_steps) + " steps, cap is " +
                               std::to_string(config.max_steps));
    const double h = horizon / static_cast<double>(n_steps);
    std::vector<double> next(res.z1.size());
    for (long s = 0; s < n_steps; ++s) {
      rk4_step(f, res.z1, t0 + h * static_cast<double>(s), h, next);
      res.z1.swap(next);
      ++res.accepted;
    }
    for (double v : res.z1)
      if (!std::isfinite(v))
        throw std::runtime_error("solve_ivp: non-finite state after rk4");
    return res;
  }

  // adaptive dopri5 with PI step control
  const std::size_t n = res.z1.size();
  dopri::Workspace w(n);
  double t = t0;
  double h = config.h0 > 0.0
                 ? std::min(config.h0, horizon)
                 : dopri::initial_step(f, res.z1, t0, horizon, config.rtol,
                                       config.atol);
  constexpr double kBeta = 0.04;            // PI stabilization
  constexpr double kExpo1 = 0.2 - kBeta * 0.75;
  constexpr double kMaxShrink = 0.2, kMaxGrow = 5.0;
  double facold = 1e-4;
  bool rejected_last = false;
  bool last = false;

  f(t, res.z1, w.k1);
  while (!last) {
    if (res.accepted + res.rejected >= config.max_steps)
      throw std::runtime_error(
          "solve_ivp: step limit reached (stiffness suspected) at t=" +
          std::to_string(t) + ", h=" + std::to_string(h));
    if (h >= t1 - t) {
      h = t1 - t;
      last = true;
    }
    const double err =
        dopri::step(f, res.z1, t, h, config.rtol, config.atol, w);
    if (!std::isfinite(err))
      throw std::runtime_error(
          "solve_ivp: non-finite state, last good t=" + std::to_string(t));
    const double fac11 = std::pow(err, kExpo1);
    if (err <= 1.0) {
      t += h;
      res.z1 = w.z5;
      w.k1.swap(w.k7);
      ++res.accepted;
      double fac = fac11 / std::pow(facold, kBeta);
      fac = std::clamp(fac / config.safety, 1.0 / kMaxGrow, 1.0 / kMaxShrink);
      double hnew = h / fac;
      facold = std::max(err, 1e-4);
      if (rejected_last) hnew = std::min(hnew, h);
      rejected_last = false;
      h = hnew;
    } else {
      h = h / std::min(1.0 / kMaxShrink, fac11 / config.safety);
      rejected_last = true;
      last = false;
      ++res.rejected;
    }
  }
  return res;
}

// Dynamics with parameters: evaluation plus the two vector-Jacobian
// products needed by the adjoint system.
struct OdeSystem {
  virtual ~OdeSystem() = default;
  virtual std::size_t state_dim() const = 0;
  virtual std::size_t param_dim() const = 0;
  virtual void eval(double t, std::span<const double> z,
                    std::span<double> dz) const = 0;
  // overwrites jz = a^T df/dz and jtheta = a^T df/dtheta
  virtual void vjp(double t, std::span<const double> z,
                   std::span<const double> a, std::span<double> jz,
                   std::span<double> jtheta) const = 0;
};

struct AdjointResult {
  std::vector<double> dz0;
  std::vector<double> dtheta;
};

// Gradients of L(z(t1)) via the augmented backward ODE. The state is
// [z, a, g]; substituting t = t1 - s turns the backward sweep into a
// forward solve over s in [0, t1-t0]:
//   dz/ds = -f(t, z),  da/ds = +a^T df/dz,  dg/ds = +a^T df/dtheta,
// starting from z(t1), a = dL/dz1, g = 0. At s = t1-t0, a = dL/dz0 and
// g = dL/dtheta.
inline AdjointResult adjoint_grad(const OdeSystem& sys,
                                  std::span<const double> z0, double t0,
                                  double t1, std::span<const double> dL_dz1,
                                  const SolverConfig& config,
                                  std::span<const double> z1_hint = {}) {
  const std::size_t n = sys.state_dim();
  const std::size_t p = sys.param_dim();
  if (z0.size() != n || dL_dz1.size() != n)
    throw std::invalid_argument("adjoint_grad: state size mismatch");

  std::vector<double> z1;
  if (z1_hint.size() == n) {
    z1.assign(z1_hint.begin(), z1_hint.end());
  } else {
    OdeFunc fwd = [&sys](double t, std::span<const double> z,
                         std::span<double> dz) { sys.eval(t, z, dz); };
    z1 = solve_ivp(fwd, z0, t0, t1, config).z1;
  }

  AdjointResult out;
  out.dz0.assign(dL_dz1.begin(), dL_dz1.end());
  out.dtheta.assign(p, 0.0);
  if (t0 == t1) return out;

  std::vector<double> aug(2 * n + p, 0.0);
  std::copy(z1.begin(), z1.end(), aug.begin());
  std::copy(dL_dz1.begin(), dL_dz1.end(), aug.begin() + static_cast<long>(n));

  std::vector<double> fz(n);
  OdeFunc aug_f = [&](double s, std::span<const double> y,
                      std::span<double> dy) {
    const double t = t1 - s;
    auto z = y.subspan(0, n);
    auto a = y.subspan(n, n);
    sys.eval(t, z, fz);
    for (std::size_t i = 0; i < n; ++i) dy[i] = -fz[i];
    auto jz = dy.subspan(n, n);
    auto jtheta = dy.subspan(2 * n, p);
    sys.vjp(t, z, a, jz, jtheta);
  };
  IvpResult back = solve_ivp(aug_f, aug, 0.0, t1 - t0, config);
  out.dz0.assign(back.z1.begin() + static_cast<long>(n),
                 back.z1.begin() + static_cast<long>(2 * n));
  out.dtheta.assign(back.z1.begin() + static_cast<long>(2 * n), back.z1.end());
  return out;
}

}  // namespace lmt
