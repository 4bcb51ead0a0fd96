#include <doctest.h>

#include <cmath>

#include "crt/error.hpp"
#include "crt/power.hpp"

using namespace crt;

namespace {

constexpr double kZ975 = 1.959963984540054;
constexpr double kZ95 = 1.6448536269514722;
constexpr double kZ80 = 0.8416212335729143;

double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

} // namespace

TEST_SUITE("power") {

TEST_CASE("design parameters give 14 clinics per arm") {
  PowerParams p;  // pi0 0.65, RR 1.24, m 50, k 0.175, two-sided 5%, 80% power
  CHECK(p.pi1() == doctest::Approx(0.806));
  const double a = 0.65, b = 0.806;
  double oracle = std::pow(kZ975 + kZ80, 2) *
                  ((a * (1 - a) + b * (1 - b)) / 50 + 0.175 * 0.175 * (a * a + b * b)) / ((a - b) * (a - b));
  auto c = clusters_per_arm(p);
  CHECK(c.raw == doctest::Approx(oracle).epsilon(1e-10));
  CHECK(c.raw == doctest::Approx(13.0658).epsilon(1e-4));
  CHECK(c.clusters == 14);

  p.correction = Correction::plus_one;
  auto c1 = clusters_per_arm(p);
  CHECK(c1.raw == doctest::Approx(oracle + 1).epsilon(1e-10));
  CHECK(c1.clusters == 15);
}

TEST_CASE("one-sided tests need fewer clinics") {
  PowerParams p;
  p.sided = Sidedness::one_upper;
  const double a = 0.65, b = 0.806;
  double oracle = std::pow(kZ95 + kZ80, 2) *
                  ((a * (1 - a) + b * (1 - b)) / 50 + 0.175 * 0.175 * (a * a + b * b)) / ((a - b) * (a - b));
  CHECK(clusters_per_arm(p).raw == doctest::Approx(oracle).epsilon(1e-10));
  CHECK(clusters_per_arm(p).clusters < 14);
}

TEST_CASE("no clustering and huge clinics reduce to the two-proportion formula") {
  PowerParams p;
  p.k = 0;
  p.m = 1e6;
  const double a = 0.65, b = 0.806;
  double n_individual = std::pow(kZ975 + kZ80, 2) * (a * (1 - a) + b * (1 - b)) / ((a - b) * (a - b));
  CHECK(clusters_per_arm(p).raw * p.m == doctest::Approx(n_individual).epsilon(1e-10));
}

TEST_CASE("between-clinic term scales with k squared") {
  PowerParams p;
  p.m = 1e12;  // remove the within-clinic term
  p.k = 0.1;
  double r1 = clusters_per_arm(p).raw;
  p.k = 0.3;
  double r3 = clusters_per_arm(p).raw;
  CHECK(r3 / r1 == doctest::Approx(9.0).epsilon(1e-6));
}

TEST_CASE("power and sample size are inverse") {
  PowerParams p;
  for (double m : {25.0, 50.0, 200.0})
    for (double k : {0.0, 0.125, 0.175, 0.25}) {
      p.m = m;
      p.k = k;
      for (auto corr : {Correction::none, Correction::plus_one}) {
        p.correction = corr;
        auto c = clusters_per_arm(p);
        if (c.clusters >= 2) CHECK(power_given_design(c.clusters, p) >= 0.8 - 1e-12);
        if (c.clusters - 1 >= 2) CHECK(power_given_design(c.clusters - 1, p) < 0.8);
        // Exact inversion at the unrounded count.
        PowerParams q = p;
        q.power = 0.9;
        double raw = clusters_per_arm(q).raw;
        double eff = raw - (corr == Correction::plus_one ? 1 : 0);
        double d = 0.65 - 0.806;
        double var = (0.65 * 0.35 + 0.806 * 0.194) / m + k * k * (0.65 * 0.65 + 0.806 * 0.806);
        CHECK(phi(std::sqrt(eff * d * d / var) - kZ975) == doctest::Approx(0.9).epsilon(1e-9));
      }
    }
}

TEST_CASE("power curve is monotone in m and decreasing in k") {
  PowerParams p;
  const double ks[] = {0.125, 0.175};
  const double ms[] = {25, 50, 75, 100, 150, 200};
  auto curve = power_curve(p, 14, ks, ms);
  REQUIRE(curve.size() == 12);
  for (std::size_t i = 1; i < 6; ++i) {
    CHECK(curve[i].power > curve[i - 1].power);
    CHECK(curve[6 + i].power > curve[6 + i - 1].power);
  }
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(curve[i].k == 0.125);
    CHECK(curve[i].power > curve[6 + i].power);
  }
  CHECK(curve[7].power == doctest::Approx(power_given_design(14, p)));
}

TEST_CASE("invalid designs are rejected") {
  PowerParams p;
  p.relative_effect = 1.0;
  CHECK_THROWS_AS(clusters_per_arm(p), ConfigError);
  p = {};
  p.pi0 = 1.0;
  CHECK_THROWS_AS(clusters_per_arm(p), ConfigError);
  p = {};
  p.k = -0.1;
  CHECK_THROWS_AS(clusters_per_arm(p), ConfigError);
  p = {};
  CHECK_THROWS_AS(power_given_design(1, p), ConfigError);
  CHECK(parse_correction("plus_one") == Correction::plus_one);
  CHECK_THROWS_AS(parse_correction("plus-two"), ConfigError);
}

}
