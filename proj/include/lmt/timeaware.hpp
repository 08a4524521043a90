#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lmt/odesolve.hpp"
#include "lmt/rng.hpp"
#include "lmt/tensor.hpp"

namespace lmt {

// Latent-state dynamics u(t, z): two affine layers with tanh, the scalar
// time appended as an extra input column.
struct NodeDynamics {
  std::size_t dim = 0;
  std::size_t hidden = 64;
  Tensor w1, b1, w2, b2;

  NodeDynamics() = default;

  NodeDynamics(std::size_t dim_, std::size_t hidden_, Rng& rng)
      : dim(dim_), hidden(hidden_) {
    w1 = Tensor::randn({dim + 1, hidden}, rng,
                       1.0 / std::sqrt(static_cast<double>(dim + 1)));
    b1 = Tensor::zeros({1, hidden});
    w2 = Tensor::randn({hidden, dim}, rng,
                       0.1 / std::sqrt(static_cast<double>(hidden)));
    b2 = Tensor::zeros({1, dim});
  }

  std::vector<Tensor*> params() { return {&w1, &b1, &w2, &b2}; }

  std::vector<const Tensor*> params() const { return {&w1, &b1, &w2, &b2}; }

  std::vector<std::pair<std::string, Tensor*>> named_params(
      const std::string& prefix = "node.") {
    return {{prefix + "w1", &w1},
            {prefix + "b1", &b1},
            {prefix + "w2", &w2},
            {prefix + "b2", &b2}};
  }

  std::size_t flat_size() const {
    return w1.numel() + b1.numel() + w2.numel() + b2.numel();
  }

  void detach_all() {
    w1.detach();
    b1.detach();
    w2.detach();
    b2.detach();
  }

  // rows of z with per-row time t_col appended as a constant column
  Tensor forward(const Tensor& z, const std::vector<double>& t_col) const {
    Tensor x = concat_col(z, t_col);
    Tensor h = lmt::tanh(add_rowwise(matmul(x, w1), b1));
    return lmt::tanh(add_rowwise(matmul(h, w2), b2));
  }
};

// The whole batch as one ODE system over the shared rescaled clock
// s in [0, 1]: row i lives at physical time t0[i] + s*dt[i] and moves at
// dz_i/ds = dt[i] * u(t_phys, z_i), so rows with different horizons
// integrate jointly. Holds a detached snapshot of the dynamics parameters;
// vjp replays the forward on a local tape seeded with the incoming adjoint
// row.
class BatchedNodeSystem final : public OdeSystem {
 public:
  BatchedNodeSystem(const NodeDynamics& dyn, std::vector<double> t0s,
                    std::vector<double> dts)
      : dyn_(dyn), t0s_(std::move(t0s)), dts_(std::move(dts)) {
    if (t0s_.size() != dts_.size())
      throw std::invalid_argument("BatchedNodeSystem: t0/dt size mismatch");
    dyn_.detach_all();
  }

  std::size_t batch() const { return t0s_.size(); }
  std::size_t state_dim() const override { return batch() * dyn_.dim; }
  std::size_t param_dim() const override { return dyn_.flat_size(); }

  void eval(double s, std::span<const double> z,
            std::span<double> dz) const override {
    Tensor zt({batch(), dyn_.dim}, {z.begin(), z.end()});
    Tensor u = rowscale(dyn_.forward(zt, times_at(s)), dts_);
    std::copy(u.data.begin(), u.data.end(), dz.begin());
  }

  void vjp(double s, std::span<const double> z, std::span<const double> a,
           std::span<double> jz, std::span<double> jtheta) const override {
    dyn_.detach_all();
    Tape tape;
    for (Tensor* p : dyn_.params()) tape.watch(*p);
    Tensor zt({batch(), dyn_.dim}, {z.begin(), z.end()});
    tape.watch(zt);
    Tensor u = rowscale(dyn_.forward(zt, times_at(s)), dts_);
    Tensor seed({batch(), dyn_.dim}, {a.begin(), a.end()});
    tape.backward(sum(mul(u, seed)));
    auto gz = tape.grad(zt);
    std::copy(gz.begin(), gz.end(), jz.begin());
    std::size_t off = 0;
    for (Tensor* p : dyn_.params()) {
      auto gp = tape.grad(*p);
      std::copy(gp.begin(), gp.end(), jtheta.begin() + static_cast<long>(off));
      off += p->numel();
    }
    dyn_.detach_all();
  }

 private:
  std::vector<double> times_at(double s) const {
    std::vector<double> t(batch());
    for (std::size_t i = 0; i < batch(); ++i) t[i] = t0s_[i] + s * dts_[i];
    return t;
  }

  mutable NodeDynamics dyn_;
  std::vector<double> t0s_, dts_;
};

struct NodeConfig {
  SolverConfig solver;
  bool adjoint = true;   // false: differentiate through fixed rk4 steps
  int discrete_steps = 20;
};

namespace detail {

// Taped fixed-step rk4 over the rescaled clock; gradients flow through the
// recorded ops, which is the discretize-then-differentiate route.
inline Tensor node_forward_discrete(const NodeDynamics& dyn, const Tensor& z_ti,
                                    const std::vector<double>& t_start,
                                    const std::vector<double>& dts,
                                    int steps) {
  auto eval = [&](const Tensor& z, double s) {
    std::vector<double> t(dts.size());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = t_start[i] + s * dts[i];
    return rowscale(dyn.forward(z, t), dts);
  };
  Tensor z = z_ti;
  const double h = 1.0 / static_cast<double>(steps);
  for (int k = 0; k < steps; ++k) {
    const double s = h * static_cast<double>(k);
    Tensor k1 = eval(z, s);
    Tensor k2 = eval(add(z, scale(k1, 0.5 * h)), s + 0.5 * h);
    Tensor k3 = eval(add(z, scale(k2, 0.5 * h)), s + 0.5 * h);
    Tensor k4 = eval(add(z, scale(k3, h)), s + h);
    Tensor incr = add(add(k1, k4), scale(add(k2, k3), 2.0));
    z = add(z, scale(incr, h / 6.0));
  }
  return z;
}

}  // namespace detail

// Propagates each latent row from t_start[i] to t_target[i] through the
// dynamics net. Recorded on the caller's tape as one op whose backward pass
// runs the adjoint system (default), or unrolled through taped rk4 steps.
inline Tensor node_forward(const NodeDynamics& dyn, const Tensor& z_ti,
                           const std::vector<double>& t_start,
                           const std::vector<double>& t_target,
                           const NodeConfig& cfg = {}) {
  const std::size_t b = z_ti.rows();
  if (t_start.size() != b || t_target.size() != b)
    throw std::invalid_argument("node_forward: time vectors must match rows");
  if (z_ti.cols() != dyn.dim)
    throw std::invalid_argument("node_forward: latent width " +
                                std::to_string(z_ti.cols()) +
                                " does not match dynamics dim " +
                                std::to_string(dyn.dim));
  std::vector<double> dts(b);
  for (std::size_t i = 0; i < b; ++i) {
    dts[i] = t_target[i] - t_start[i];
    if (dts[i] < 0.0)
      throw std::invalid_argument(
          "node_forward: t_target < t_start for row " + std::to_string(i));
  }

  if (!cfg.adjoint)
    return detail::node_forward_discrete(dyn, z_ti, t_start, dts,
                                         cfg.discrete_steps);

  auto sys = std::make_shared<BatchedNodeSystem>(dyn, t_start, dts);
  IvpResult fwd;
  try {
    fwd = solve_ivp(
        [&sys](double s, std::span<const double> z, std::span<double> dz) {
          sys->eval(s, z, dz);
        },
        z_ti.data, 0.0, 1.0, cfg.solver);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string("node_forward: ") + e.what() +
                             " (batch of " + std::to_string(b) + ")");
  }

  std::vector<const Tensor*> inputs = {&z_ti};
  for (const Tensor* p : dyn.params()) inputs.push_back(p);
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->tracked()) continue;
    if (tape != nullptr && tape != t->tape)
      throw std::invalid_argument("node_forward: operands on different tapes");
    tape = t->tape;
  }

  Tensor out({b, dyn.dim}, fwd.z1);
  lmt::detail::attach_output(out, tape);
  if (tape) {
    const int z_id = z_ti.tracked() ? z_ti.tape_id : -1;
    std::vector<std::pair<int, std::size_t>> param_slots;
    for (const Tensor* p : dyn.params())
      param_slots.emplace_back(p->tracked() ? p->tape_id : -1, p->numel());
    const int out_id = out.tape_id;
    std::vector<double> z0_data = z_ti.data;
    std::vector<double> z1_data = fwd.z1;
    SolverConfig solver = cfg.solver;
    tape->record([sys, z_id, param_slots, out_id, z0_data, z1_data,
                  solver](Tape& t) {
      auto go = t.grad_of(out_id);
      AdjointResult g = adjoint_grad(*sys, z0_data, 0.0, 1.0, go, solver,
                                     z1_data);
      if (z_id >= 0) {
        auto gz = t.grad_of(z_id);
        for (std::size_t i = 0; i < gz.size(); ++i) gz[i] += g.dz0[i];
      }
      std::size_t off = 0;
      for (auto [pid, len] : param_slots) {
        if (pid >= 0) {
          auto gp = t.grad_of(pid);
          for (std::size_t i = 0; i < len; ++i) gp[i] += g.dtheta[off + i];
        }
        off += len;
      }
    });
  }
  return out;
}

inline Tensor node_forward(const NodeDynamics& dyn, const Tensor& z_ti,
                           double t_start, double t_target,
                           const NodeConfig& cfg = {}) {
  const std::size_t b = z_ti.rows();
  return node_forward(dyn, z_ti, std::vector<double>(b, t_start),
                      std::vector<double>(b, t_target), cfg);
}

// Memory discount for elapsed time: 1 at dt=0, strictly decreasing, -> 0.
inline double elapsed_discount(double dt) {
  if (dt < 0.0)
    throw std::invalid_argument("elapsed_discount: negative elapsed time");
  return 1.0 / std::log(std::exp(1.0) + dt);
}

// LSTM cell with a time-discounted short-term memory component and learned
// initial states; one step maps (z_ti, dt) to the predicted next latent.
struct TLstmCell {
  std::size_t dim = 0;
  Tensor wd, bd;              // short-term subspace decomposition
  Tensor wi, ui, bi;          // input gate
  Tensor wf, uf, bf;          // forget gate
  Tensor wo, uo, bo;          // output gate
  Tensor wc, uc, bc;          // candidate
  Tensor h0, c0;              // learned initial hidden/cell rows
  Tensor wout, bout;          // output projection

  TLstmCell() = default;

  TLstmCell(std::size_t dim_, Rng& rng) : dim(dim_) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
    auto mat = [&] { return Tensor::randn({dim, dim}, rng, sd); };
    auto row = [&] { return Tensor::zeros({1, dim}); };
    wd = mat(); bd = row();
    wi = mat(); ui = mat(); bi = row();
    wf = mat(); uf = mat(); bf = Tensor::full({1, dim}, 1.0);
    wo = mat(); uo = mat(); bo = row();
    wc = mat(); uc = mat(); bc = row();
    h0 = row(); c0 = row();
    wout = mat(); bout = row();
  }

  std::vector<Tensor*> params() {
    return {&wd, &bd, &wi, &ui, &bi, &wf, &uf, &bf, &wo, &uo,
            &bo, &wc, &uc, &bc, &h0, &c0, &wout, &bout};
  }

  std::vector<std::pair<std::string, Tensor*>> named_params(
      const std::string& prefix = "tlstm.") {
    static const char* names[] = {"wd", "bd", "wi", "ui", "bi", "wf",
                                  "uf", "bf", "wo", "uo", "bo", "wc",
                                  "uc", "bc", "h0", "c0", "wout", "bout"};
    std::vector<std::pair<std::string, Tensor*>> out;
    auto ps = params();
    for (std::size_t i = 0; i < ps.size(); ++i)
      out.emplace_back(prefix + names[i], ps[i]);
    return out;
  }
};

// One time-modulated step: the short-term part of the previous cell state
// is discounted by elapsed_discount(dt) before a standard LSTM update on
// input z_ti; the new hidden state is projected to the next latent.
inline Tensor tlstm_forward(const TLstmCell& cell, const Tensor& z_ti,
                            const std::vector<double>& delta_t) {
  const std::size_t b = z_ti.rows();
  if (delta_t.size() != b)
    throw std::invalid_argument("tlstm_forward: delta_t must match rows");
  if (z_ti.cols() != cell.dim)
    throw std::invalid_argument("tlstm_forward: input width mismatch");
  std::vector<double> g(b);
  for (std::size_t i = 0; i < b; ++i) g[i] = elapsed_discount(delta_t[i]);

  Tensor h_prev = tile_rows(cell.h0, b);
  Tensor c_prev = tile_rows(cell.c0, b);

  Tensor c_short = lmt::tanh(add_rowwise(matmul(c_prev, cell.wd), cell.bd));
  Tensor c_adj = add(sub(c_prev, c_short), rowscale(c_short, g));

  auto gate = [&](const Tensor& w, const Tensor& u, const Tensor& bias) {
    return add_rowwise(add(matmul(z_ti, w), matmul(h_prev, u)), bias);
  };
  Tensor i_g = sigmoid(gate(cell.wi, cell.ui, cell.bi));
  Tensor f_g = sigmoid(gate(cell.wf, cell.uf, cell.bf));
  Tensor o_g = sigmoid(gate(cell.wo, cell.uo, cell.bo));
  Tensor cand = lmt::tanh(gate(cell.wc, cell.uc, cell.bc));

  Tensor c_new = add(mul(f_g, c_adj), mul(i_g, cand));
  Tensor h_new = mul(o_g, lmt::tanh(c_new));
  return add_rowwise(matmul(h_new, cell.wout), cell.bout);
}

inline Tensor tlstm_forward(const TLstmCell& cell, const Tensor& z_ti,
                            double delta_t) {
  return tlstm_forward(cell, z_ti,
                       std::vector<double>(z_ti.rows(), delta_t));
}

}  // namespace lmt
