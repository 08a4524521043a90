#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "lmt/mixing.hpp"
#include "lmt/rng.hpp"
#include "oracles.hpp"

using namespace lmt;

namespace {

// P(X < c) for X ~ Beta(alpha, alpha), by quadrature. The substitution
// x = c*u^(1/alpha) removes the x^(alpha-1) singularity at 0, leaving a
// smooth integrand handled by Simpson's rule.
double beta_cdf_quadrature(double alpha, double c) {
  const int n = 100000;  // even
  auto integrand = [&](double u) {
    double x = c * std::pow(u, 1.0 / alpha);
    return std::pow(1.0 - x, alpha - 1.0);
  };
  double acc = integrand(0.0) + integrand(1.0);
  for (int i = 1; i < n; ++i)
    acc += integrand(static_cast<double>(i) / n) * (i % 2 ? 4.0 : 2.0);
  const double integral = acc / (3.0 * n);
  const double numer = std::pow(c, alpha) / alpha * integral;
  const double beta_fn = std::exp(2.0 * std::lgamma(alpha) - std::lgamma(2.0 * alpha));
  return numer / beta_fn;
}

}  // namespace

TEST_CASE("lambda sampling rejects nonpositive alpha", "[mixing]") {
  Rng rng(1);
  REQUIRE_THROWS_AS(sample_lambda(0.0, rng), std::invalid_argument);
  REQUIRE_THROWS_AS(sample_lambda(-1.0, rng), std::invalid_argument);
}

TEST_CASE("alpha 1 gives a uniform mean of one half", "[mixing]") {
  Rng rng(2);
  const int n = 100000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += sample_lambda(1.0, rng);
  REQUIRE(std::abs(sum / n - 0.5) < 0.01);
}

TEST_CASE("symmetric Beta has mean one half for any alpha", "[mixing]") {
  for (double alpha : {0.2, 0.5, 2.0, 10.0}) {
    Rng rng(3);
    const int n = 100000;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += sample_lambda(alpha, rng);
    REQUIRE(std::abs(sum / n - 0.5) < 0.01);
  }
}

TEST_CASE("alpha 0.2 tail mass matches quadrature of the density", "[mixing]") {
  Rng rng(4);
  const int n = 100000;
  int tail = 0;
  for (int i = 0; i < n; ++i) {
    double l = sample_lambda(0.2, rng);
    if (l < 0.1 || l > 0.9) ++tail;
  }
  // by symmetry the two tails carry equal mass
  const double expect = 2.0 * beta_cdf_quadrature(0.2, 0.1);
  REQUIRE(std::abs(static_cast<double>(tail) / n - expect) < 0.02);
}

TEST_CASE("every sampled lambda lies in the unit interval", "[mixing]") {
  Rng rng(5);
  for (double alpha : {0.2, 1.0, 10.0})
    for (int i = 0; i < 1000; ++i) {
      double l = sample_lambda(alpha, rng);
      REQUIRE(l >= 0.0);
      REQUIRE(l <= 1.0);
    }
}

TEST_CASE("layer selection draws uniformly from the eligible set", "[mixing]") {
  Rng rng(6);
  std::vector<int> single = {2};
  for (int i = 0; i < 100; ++i) REQUIRE(select_mix_layer(single, rng) == 2);

  std::vector<int> empty;
  REQUIRE_THROWS_AS(select_mix_layer(empty, rng), std::invalid_argument);

  std::vector<int> s = {1, 2, 3};
  std::vector<int> counts(4, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(select_mix_layer(s, rng))];
  REQUIRE(counts[0] == 0);
  const double p = 1.0 / 3.0;
  const double sigma = std::sqrt(n * p * (1.0 - p));
  for (int k = 1; k <= 3; ++k)
    REQUIRE(std::abs(counts[static_cast<std::size_t>(k)] - n * p) < 3.0 * sigma);
}

TEST_CASE("layer 0 denotes input mixing", "[mixing]") {
  Rng rng(7);
  std::vector<int> s = {0};
  REQUIRE(select_mix_layer(s, rng) == 0);
}

TEST_CASE("mix endpoints and idempotence", "[mixing]") {
  Rng rng(8);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({3, 4}, rng);

  Tensor at_one = mix(a, b, 1.0);
  REQUIRE(at_one.data == a.data);

  REQUIRE(mix(Tensor::scalar(0.0), Tensor::scalar(2.0), 0.5).value() == 1.0);

  for (double l : {0.0, 0.3, 0.9}) {
    Tensor same = mix(a, a, l);
    REQUIRE(same.data == a.data);
  }
}

TEST_CASE("mix symmetry is exact", "[mixing]") {
  Rng rng(9);
  Tensor a = Tensor::randn({2, 5}, rng);
  Tensor b = Tensor::randn({2, 5}, rng);
  for (double l : {0.0, 0.25, 0.5, 0.8, 1.0}) {
    Tensor ab = mix(a, b, l);
    Tensor ba = mix(b, a, 1.0 - l);
    REQUIRE(ab.data == ba.data);
  }
}

TEST_CASE("mix rejects mismatched shapes", "[mixing]") {
  Tensor a({2, 2});
  Tensor b({2, 3});
  REQUIRE_THROWS_AS(mix(a, b, 0.5), std::invalid_argument);
}

TEST_CASE("mix gradients are the convex weights", "[mixing]") {
  Rng rng(10);
  Tensor a = Tensor::randn({2, 3}, rng);
  Tensor b = Tensor::randn({2, 3}, rng);
  Tape tape;
  tape.watch(a);
  tape.watch(b);
  const double l = 0.7;
  Tensor s = sum(mix(a, b, l));
  tape.backward(s);
  for (double g : tape.grad(a)) REQUIRE(std::abs(g - l) < 1e-15);
  for (double g : tape.grad(b)) REQUIRE(std::abs(g - (1.0 - l)) < 1e-15);
}

TEST_CASE("scalar mix matches the tensor op", "[mixing]") {
  REQUIRE(mix(3.0, 5.0, 0.25) == 0.25 * 3.0 + 0.75 * 5.0);
}

TEST_CASE("mix_rows applies one weight per row", "[mixing]") {
  Tensor a({2, 2}, {1, 1, 1, 1});
  Tensor b({2, 2}, {3, 3, 3, 3});
  Tensor m = mix_rows(a, b, {1.0, 0.5});
  REQUIRE(m.data == std::vector<double>{1, 1, 2, 2});
  REQUIRE_THROWS_AS(mix_rows(a, b, {1.0}), std::invalid_argument);

  Tape tape;
  tape.watch(a);
  tape.watch(b);
  Tensor s = sum(mix_rows(a, b, {0.25, 0.75}));
  tape.backward(s);
  auto ga = tape.grad(a);
  REQUIRE(ga[0] == 0.25);
  REQUIRE(ga[2] == 0.75);
  auto gb = tape.grad(b);
  REQUIRE(gb[0] == 0.75);
  REQUIRE(gb[2] == 0.25);
}

TEST_CASE("soft labels encode integers as one-hot", "[mixing]") {
  REQUIRE(soft_label(2.0) == std::vector<double>{0, 0, 1, 0, 0});
  REQUIRE(soft_label(0.0) == std::vector<double>{1, 0, 0, 0, 0});
  REQUIRE(soft_label(4.0) == std::vector<double>{0, 0, 0, 0, 1});
}

TEST_CASE("soft labels split mass between adjacent grades", "[mixing]") {
  auto l = soft_label(0.75);
  REQUIRE(std::abs(l[0] - 0.25) < 1e-15);
  REQUIRE(std::abs(l[1] - 0.75) < 1e-15);
  REQUIRE(l[2] == 0.0);
  REQUIRE(l[3] == 0.0);
  REQUIRE(l[4] == 0.0);
}

TEST_CASE("soft labels sum to one with at most two adjacent nonzeros",
          "[mixing]") {
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    double v = rng.uniform(0.0, 4.0);
    auto l = soft_label(v);
    double s = 0.0;
    int nonzero = 0;
    int first = -1, last = -1;
    for (int j = 0; j < 5; ++j) {
      s += l[static_cast<std::size_t>(j)];
      if (l[static_cast<std::size_t>(j)] > 0.0) {
        ++nonzero;
        if (first < 0) first = j;
        last = j;
      }
    }
    REQUIRE(std::abs(s - 1.0) < 1e-12);
    REQUIRE(nonzero <= 2);
    REQUIRE(last - first <= 1);
  }
}

TEST_CASE("out-of-range severity is clamped", "[mixing]") {
  REQUIRE(soft_label(4.7) == std::vector<double>{0, 0, 0, 0, 1});
  REQUIRE(soft_label(-0.3) == std::vector<double>{1, 0, 0, 0, 0});
}

TEST_CASE("linear profile composes with soft labels on adjacent grades",
          "[mixing]") {
  // for |s_i - s_ip1| <= 1 the soft label of the interpolated severity is
  // exactly the mix of the endpoint one-hots with the interpolation weight
  const double t_i = 0.2, t_ip1 = 1.4;
  for (int a = 0; a <= 4; ++a)
    for (int b = std::max(0, a - 1); b <= std::min(4, a + 1); ++b)
      for (int k = 0; k <= 20; ++k) {
        const double t = t_i + (t_ip1 - t_i) * k / 20.0;
        const double frac = (t - t_i) / (t_ip1 - t_i);
        auto lhs = soft_label(
            interpolate_severity(ProfileKind::kLinear, a, b, t_i, t_ip1, t));
        auto ea = soft_label(static_cast<double>(a));
        auto eb = soft_label(static_cast<double>(b));
        for (std::size_t j = 0; j < 5; ++j) {
          double rhs = mix(ea[j], eb[j], 1.0 - frac);
          REQUIRE(std::abs(lhs[j] - rhs) < 1e-12);
        }
      }
}
