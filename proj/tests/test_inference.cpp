#include <doctest.h>

#include <cmath>
#include <vector>

#include "crt/error.hpp"
#include "crt/inference.hpp"

using namespace crt;

namespace {

// Student t density integrated by composite Simpson from 0 to x.
double t_density(double t, double df) {
  return std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * M_PI) *
         std::pow(1 + t * t / df, -(df + 1) / 2);
}

double t_cdf_simpson(double x, double df) {
  const int n = 20000;
  double h = x / n, s = t_density(0, df) + t_density(x, df);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * t_density(i * h, df);
  return 0.5 + s * h / 3;
}

double t_quantile_oracle(double p, double df) {
  double lo = 0, hi = 20;
  for (int i = 0; i < 80; ++i) {
    double mid = 0.5 * (lo + hi);
    (t_cdf_simpson(mid, df) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

} // namespace

TEST_SUITE("inference") {

TEST_CASE("ic_se of {-1, 1} is 1") {
  std::vector<double> ic{-1.0, 1.0};
  auto r = ic_se(ic);
  CHECK(r.se == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_FALSE(r.degenerate);
}

TEST_CASE("ic_se needs two values and flags zero spread") {
  std::vector<double> one{0.3};
  CHECK_THROWS_AS(ic_se(one), EstimationError);
  std::vector<double> flat{0.2, 0.2, 0.2};
  CHECK(ic_se(flat).degenerate);
}

TEST_CASE("t critical value at df 26 against Simpson integration") {
  double oracle = t_quantile_oracle(0.975, 26);
  CHECK(oracle == doctest::Approx(2.0555).epsilon(1e-3));
  CHECK(student_t_quantile(0.975, 26) == doctest::Approx(oracle).epsilon(1e-8));
  for (double df : {3.0, 10.0, 26.0}) {
    for (double x : {0.3, 1.0, 2.5}) CHECK(student_t_cdf(x, df) == doctest::Approx(t_cdf_simpson(x, df)).epsilon(1e-9));
  }
}

TEST_CASE("large df t approaches the normal") {
  CHECK(student_t_quantile(0.975, 1e6) == doctest::Approx(1.959964).epsilon(1e-5));
  CHECK(normal_quantile(0.975) == doctest::Approx(1.959963984540054).epsilon(1e-12));
}

TEST_CASE("normal quantile inverts the erfc-based cdf") {
  for (double p : {1e-10, 0.001, 0.05, 0.3, 0.5, 0.77, 0.999}) {
    double z = normal_quantile(p);
    CHECK(0.5 * std::erfc(-z / std::sqrt(2.0)) == doctest::Approx(p).epsilon(1e-12));
  }
}

TEST_CASE("incomplete beta symmetric identity and closed forms") {
  CHECK(incomplete_beta(2, 2, 0.5) == doctest::Approx(0.5).epsilon(1e-14));
  // I_x(1, b) = 1 - (1-x)^b
  CHECK(incomplete_beta(1, 3.5, 0.3) == doctest::Approx(1 - std::pow(0.7, 3.5)).epsilon(1e-13));
  CHECK(incomplete_beta(4, 7, 0.2) + incomplete_beta(7, 4, 0.8) == doctest::Approx(1.0).epsilon(1e-13));
}

TEST_CASE("one-sided p at t = 0 is exactly one half") {
  auto r = t_inference(0.0, 0.3, 26, Sidedness::one_upper);
  CHECK(r.p == 0.5);
  CHECK(t_inference(0.0, 0.3, 26, Sidedness::one_lower).p == 0.5);
  CHECK(t_inference(0.0, 0.3, 26, Sidedness::two).p == 1.0);
}

TEST_CASE("zero standard error collapses the p-value") {
  CHECK(t_inference(0.2, 0.0, 26, Sidedness::one_upper).p == 0.0);
  CHECK(t_inference(-0.2, 0.0, 26, Sidedness::one_upper).p == 1.0);
  CHECK(t_inference(0.2, 0.0, 26, Sidedness::one_upper).degenerate);
}

TEST_CASE("ratio transform uses the delta method on the log scale") {
  std::vector<double> ic1{0.1, -0.1}, ic0{0.05, -0.05};
  auto t = transform_scale(0.7, 0.5, ic1, ic0, Scale::risk_ratio);
  CHECK(t.effect == doctest::Approx(1.4));
  CHECK(t.analysis_estimate == doctest::Approx(0.33647223662121289).epsilon(1e-12));
  CHECK(t.ic[0] == doctest::Approx(0.1 / 0.7 - 0.05 / 0.5));
  CHECK_THROWS_AS(transform_scale(0.7, 0.0, ic1, ic0, Scale::risk_ratio), EstimationError);
  auto d = transform_scale(0.7, 0.5, ic1, ic0, Scale::risk_difference);
  CHECK(d.effect == doctest::Approx(0.2));
  CHECK(d.ic[1] == doctest::Approx(-0.05));
}

TEST_CASE("make_effect orients the one-sided p by direction") {
  std::vector<double> ic1{0.1, -0.2, 0.15, -0.05}, ic0{-0.1, 0.05, 0.02, 0.03};
  auto up = make_effect(0.7, 0.5, ic1, ic0, Scale::risk_ratio, Direction::increase, 2);
  auto down = make_effect(0.7, 0.5, ic1, ic0, Scale::risk_ratio, Direction::decrease, 2);
  CHECK(up.p_one_sided + down.p_one_sided == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(up.p_one_sided < 0.5);
  CHECK(up.ci.lower < 1.4);
  CHECK(up.ci.upper > 1.4);
  // CI is symmetric on the log scale.
  CHECK(std::log(up.ci.upper) - std::log(1.4) == doctest::Approx(std::log(1.4) - std::log(up.ci.lower)));
}

TEST_CASE("scale and sidedness parsers accept aliases") {
  CHECK(parse_scale("rr") == Scale::risk_ratio);
  CHECK(parse_scale("rd") == Scale::risk_difference);
  CHECK(parse_sidedness("two") == Sidedness::two);
  CHECK_THROWS_AS(parse_scale("odds"), ConfigError);
}

}
