#pragma once

#include <cmath>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmt/progression.hpp"
#include "lmt/rng.hpp"
#include "lmt/tensor.hpp"

namespace lmt {

// One mixing decision: the convex weight, the layer it is applied at
// (0 = raw inputs), and the Beta concentration it was drawn with.
struct MixDraw {
  double lambda = 1.0;
  int layer_k = 0;
  double alpha = 1.0;
};

// Draw from the symmetric Beta(alpha, alpha), clamped to [0, 1].
inline double sample_lambda(double alpha, Rng& rng) {
  if (alpha <= 0.0)
    throw std::invalid_argument("sample_lambda: alpha must be > 0, got " +
                                std::to_string(alpha));
  double v = rng.beta(alpha, alpha);
  return std::clamp(v, 0.0, 1.0);
}

// Uniform draw from the eligible layer set.
inline int select_mix_layer(const std::vector<int>& eligible, Rng& rng) {
  if (eligible.empty())
    throw std::invalid_argument("select_mix_layer: eligible set is empty");
  return eligible[rng.uniform_index(eligible.size())];
}

// lambda*a + (1-lambda)*b, arranged so that mix(x, x, l) == x bitwise for
// any l, the l ∈ {0, 1} endpoints are exact, and mix(a, b, l) ==
// mix(b, a, 1-l) whenever 1-(1-l) round-trips (it does for l >= 0.5 and for
// the usual dyadic values).
inline double mix(double a, double b, double lambda) {
  if (lambda == 0.5) return 0.5 * a + 0.5 * b;
  if (lambda > 0.5) return a + (1.0 - lambda) * (b - a);
  return b + lambda * (a - b);
}

// Elementwise convex combination; differentiable through both inputs.
inline Tensor mix(const Tensor& a, const Tensor& b, double lambda) {
  detail::require_same_shape(a, b, "mix");
  Tape* tape = detail::result_tape({&a, &b});
  Tensor out(a.shape);
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = mix(a[i], b[i], lambda);
  detail::attach_output(out, tape);
  if (tape) {
    const int ia = a.tracked() ? a.tape_id : -1;
    const int ib = b.tracked() ? b.tape_id : -1;
    const int io = out.tape_id;
    tape->record([ia, ib, io, lambda](Tape& t) {
      auto go = t.grad_of(io);
      if (ia >= 0) {
        auto ga = t.grad_of(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += lambda * go[i];
      }
      if (ib >= 0) {
        auto gb = t.grad_of(ib);
        for (std::size_t i = 0; i < go.size(); ++i)
          gb[i] += (1.0 - lambda) * go[i];
      }
    });
  }
  return out;
}

// Row-wise variant: row i uses its own weight lambdas[i].
inline Tensor mix_rows(const Tensor& a, const Tensor& b,
                       const std::vector<double>& lambdas) {
  detail::require_same_shape(a, b, "mix_rows");
  const std::size_t r = a.rows(), c = a.cols();
  if (lambdas.size() != r)
    throw std::invalid_argument("mix_rows: got " +
                                std::to_string(lambdas.size()) +
                                " weights for " + std::to_string(r) + " rows");
  Tape* tape = detail::result_tape({&a, &b});
  Tensor out(a.shape);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out.at(i, j) = mix(a.at(i, j), b.at(i, j), lambdas[i]);
  detail::attach_output(out, tape);
  if (tape) {
    const int ia = a.tracked() ? a.tape_id : -1;
    const int ib = b.tracked() ? b.tape_id : -1;
    const int io = out.tape_id;
    tape->record([ia, ib, io, r, c, lambdas](Tape& t) {
      auto go = t.grad_of(io);
      if (ia >= 0) {
        auto ga = t.grad_of(ia);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            ga[i * c + j] += lambdas[i] * go[i * c + j];
      }
      if (ib >= 0) {
        auto gb = t.grad_of(ib);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            gb[i * c + j] += (1.0 - lambdas[i]) * go[i * c + j];
      }
    });
  }
  return out;
}

// Encodes a (possibly fractional) severity value as a probability vector:
// the mass is split between the neighboring integer grades, so integer
// values reduce to exact one-hot vectors. Values outside the grade range are
// clamped with a warning.
inline std::vector<double> soft_label(double severity_value,
                                      int num_grades = kNumGrades) {
  if (num_grades < 2)
    throw std::invalid_argument("soft_label: need at least 2 grades");
  const double hi = static_cast<double>(num_grades - 1);
  if (severity_value < 0.0 || severity_value > hi) {
    std::cerr << "soft_label: clamping out-of-range severity "
              << severity_value << " to [0, " << hi << "]\n";
    severity_value = std::clamp(severity_value, 0.0, hi);
  }
  std::vector<double> label(static_cast<std::size_t>(num_grades), 0.0);
  const double lo = std::floor(severity_value);
  const double frac = severity_value - lo;
  const auto lo_idx = static_cast<std::size_t>(lo);
  if (frac == 0.0) {
    label[lo_idx] = 1.0;
  } else {
    label[lo_idx] = 1.0 - frac;
    label[lo_idx + 1] = frac;
  }
  return label;
}

}  // namespace lmt
