#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "crt/error.hpp"
#include "crt/two_stage.hpp"

using namespace crt;

namespace {

struct Design {
  std::vector<ClinicEndpoint> endpoints;
  std::vector<ClinicRecord> clinics;
};

Design design(const std::vector<double>& y1, const std::vector<double>& y0) {
  Design d;
  int k = 0;
  auto add = [&](double y, Arm arm) {
    std::string id = "C" + std::to_string(k++);
    d.endpoints.push_back({id, arm, y, 40, std::nullopt, std::nullopt, 1.0});
    d.clinics.push_back({id, Country::kenya, arm, "S", 100 + 10 * k, 0.5 + 0.01 * k});
  };
  for (double y : y1) add(y, Arm::intervention);
  for (double y : y0) add(y, Arm::control);
  return d;
}

Design random_design(int per_arm, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.3, 0.9);
  std::vector<double> a, b;
  for (int i = 0; i < per_arm; ++i) {
    a.push_back(u(rng));
    b.push_back(u(rng));
  }
  auto d = design(a, b);
  std::uniform_int_distribution<long> n(20, 70);
  for (auto& e : d.endpoints) e.n_included = n(rng);
  return d;
}

ClusterSample sample(const std::string& id, Arm arm, std::vector<double> y, std::vector<int> delta = {}) {
  ClusterSample c;
  c.clinic_id = id;
  c.arm = arm;
  c.y = std::move(y);
  c.delta = delta.empty() ? std::vector<int>(c.y.size(), 1) : std::move(delta);
  c.m.assign(c.y.size(), 0);
  c.w = Covariates(c.y.size());
  std::vector<double> age;
  for (std::size_t i = 0; i < c.y.size(); ++i) age.push_back(15.0 + double(i % 10));
  c.w.add("age", age, true);
  return c;
}

} // namespace

TEST_SUITE("two_stage") {

TEST_CASE("hand example: RR 1.4") {
  auto d = design({0.8, 0.6}, {0.5, 0.5});
  auto e = stage2_effect(d.endpoints, d.clinics, "none", Stage2Options{});
  CHECK(e.psi1 == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(e.psi0 == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(e.effect == doctest::Approx(1.4).epsilon(1e-12));
  CHECK(e.df == 2);
}

TEST_CASE("unadjusted stage 2 is the weighted contrast of arm means") {
  auto d = random_design(14, 3);
  for (WeightScheme ws : {WeightScheme::equal, WeightScheme::size}) {
    Stage2Options opt;
    opt.weights = ws;
    auto e = stage2_effect(d.endpoints, d.clinics, "none", opt);
    double s1 = 0, w1 = 0, s0 = 0, w0 = 0, wsum = 0;
    for (const auto& c : d.endpoints) wsum += ws == WeightScheme::size ? double(c.n_included) : 1.0;
    const double mean_w = wsum / double(d.endpoints.size());
    for (const auto& c : d.endpoints) {
      double a = (ws == WeightScheme::size ? double(c.n_included) : 1.0) / mean_w;
      (c.arm == Arm::intervention ? s1 : s0) += a * c.y;
      (c.arm == Arm::intervention ? w1 : w0) += a;
    }
    CHECK(std::fabs(e.psi1 - s1 / w1) <= 1e-10);
    CHECK(std::fabs(e.psi0 - s0 / w0) <= 1e-10);
    CHECK(std::fabs(e.effect - (s1 / w1) / (s0 / w0)) <= 1e-10);
  }
}

TEST_CASE("identical endpoints give the null") {
  auto d = design({0.6, 0.6, 0.6}, {0.6, 0.6, 0.6});
  auto rr = stage2_effect(d.endpoints, d.clinics, "none", Stage2Options{});
  CHECK(rr.effect == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rr.p_one_sided >= 0.5);
  Stage2Options diff;
  diff.scale = Scale::risk_difference;
  auto rd = stage2_effect(d.endpoints, d.clinics, "none", diff);
  CHECK(std::fabs(rd.effect) <= 1e-12);
}

TEST_CASE("size weights with equal counts match equal weights") {
  auto d = random_design(6, 9);
  for (auto& e : d.endpoints) e.n_included = 33;
  Stage2Options sz;
  sz.weights = WeightScheme::size;
  auto a = stage2_effect(d.endpoints, d.clinics, kAdjSuppression, Stage2Options{});
  auto b = stage2_effect(d.endpoints, d.clinics, kAdjSuppression, sz);
  CHECK(std::fabs(a.effect - b.effect) <= 1e-12);
  CHECK(std::fabs(a.se - b.se) <= 1e-12);
}

TEST_CASE("estimates do not depend on clinic order") {
  auto d = random_design(7, 5);
  auto a = stage2_effect(d.endpoints, d.clinics, kAdjYouth, Stage2Options{});
  std::reverse(d.endpoints.begin(), d.endpoints.end());
  std::rotate(d.clinics.begin(), d.clinics.begin() + 3, d.clinics.end());
  auto b = stage2_effect(d.endpoints, d.clinics, kAdjYouth, Stage2Options{});
  CHECK(a.effect == doctest::Approx(b.effect).epsilon(1e-12));
  CHECK(a.se == doctest::Approx(b.se).epsilon(1e-10));
}

TEST_CASE("ratio with a zero control mean is an estimation error") {
  auto d = design({0.3, 0.4}, {0.0, 0.0});
  CHECK_THROWS_AS(stage2_effect(d.endpoints, d.clinics, "none", Stage2Options{}), EstimationError);
}

TEST_CASE("adaptive selection picks a covariate that explains the endpoint exactly") {
  auto d = random_design(8, 13);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.2, 0.9);
  for (std::size_t i = 0; i < d.endpoints.size(); ++i) {
    double x = u(rng);
    d.clinics[i].baseline_suppression_proportion = x;
    d.endpoints[i].y = 0.1 + 0.1 * (d.endpoints[i].arm == Arm::intervention) + 0.6 * x;
  }
  auto cand = default_clinic_candidates();
  auto sel = adaptive_prespec(d.endpoints, d.clinics, cand, Stage2Options{});
  CHECK(sel.selected == std::string(kAdjSuppression));
  for (const auto& s : {sel.selected}) CHECK(std::find(cand.begin(), cand.end(), s) != cand.end());
}

TEST_CASE("tied candidates go to the first listed, constant candidates are skipped") {
  auto d = random_design(8, 21);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.2, 0.9);
  for (std::size_t i = 0; i < d.endpoints.size(); ++i) {
    double x = u(rng);
    d.clinics[i].baseline_suppression_proportion = x;
    d.clinics[i].n_youth_in_care_baseline = 0;
    d.endpoints[i].y = 0.1 + 0.6 * x;
  }
  auto cand = default_clinic_candidates();
  auto sel = adaptive_prespec(d.endpoints, d.clinics, cand, Stage2Options{});
  CHECK(std::isnan(sel.cv_variance[1]));
  CHECK_FALSE(sel.diagnostics.empty());
  CHECK(sel.selected == std::string(kAdjSuppression));

  // Only constant candidates: nothing beats "none".
  for (auto& c : d.clinics) c.baseline_suppression_proportion = 0.5;
  CHECK(adaptive_prespec(d.endpoints, d.clinics, cand, Stage2Options{}).selected == "none");
}

TEST_CASE("stage 1 empirical proportion") {
  auto c = sample("A", Arm::intervention, {1, 1, 1, 1, 1, 1, 1, 0, 0, 0});
  auto e = stage1_endpoint(c, Stage1Options{});
  CHECK(e.y == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(e.n_included == 10);
}

TEST_CASE("stage 1 TMLE under full measurement equals the empirical proportion") {
  auto c = sample("A", Arm::control, {1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 0, 1});
  Stage1Options o;
  o.method = Stage1Method::tmle_missing;
  auto e = stage1_endpoint(c, o);
  CHECK(std::fabs(e.y - 8.0 / 12.0) <= 1e-10);
}

TEST_CASE("stage 1 on an empty clinic names the clinic") {
  auto c = sample("EMPTY", Arm::control, {});
  CHECK_THROWS_WITH_AS(stage1_endpoint(c, Stage1Options{}), doctest::Contains("EMPTY"), DataError);
}

TEST_CASE("parallel stage 1 matches the serial reference") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u;
  std::vector<ClusterSample> cs;
  for (int j = 0; j < 10; ++j) {
    std::vector<double> y;
    std::vector<int> delta;
    for (int i = 0; i < 30; ++i) {
      delta.push_back(u(rng) < 0.8);
      y.push_back(delta.back() ? double(u(rng) < 0.6) : 0.0);
    }
    cs.push_back(sample("C" + std::to_string(j), j % 2 ? Arm::intervention : Arm::control, y, delta));
  }
  Stage1Options o;
  o.method = Stage1Method::tmle_missing;
  o.tmle.outcome = LearnerConfig::glm_only();
  o.tmle.missingness = LearnerConfig::glm_only();
  auto a = stage1_endpoints(cs, o);
  auto b = stage1_endpoints_serial(cs, o);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].clinic_id == b[i].clinic_id);
    CHECK(a[i].y == b[i].y);
  }
}

TEST_CASE("two-stage wrapper composes stage 1 and stage 2") {
  std::vector<ClusterSample> cs{sample("A", Arm::intervention, {1, 1, 1, 1, 0}),
                                sample("B", Arm::intervention, {1, 1, 1, 0, 0}),
                                sample("C", Arm::control, {1, 1, 0, 0, 0}),
                                sample("D", Arm::control, {1, 1, 1, 0, 0})};
  std::vector<ClinicRecord> cl{{"A", Country::kenya, Arm::intervention, "S1", 10, 0.5},
                               {"B", Country::kenya, Arm::intervention, "S2", 20, 0.6},
                               {"C", Country::kenya, Arm::control, "S1", 30, 0.7},
                               {"D", Country::kenya, Arm::control, "S2", 40, 0.4}};
  TwoStageOptions o;
  o.adaptive = false;
  auto r = two_stage_estimate(cs, cl, o);
  CHECK(r.effect.psi1 == doctest::Approx(0.7));
  CHECK(r.effect.psi0 == doctest::Approx(0.5));
  auto manual = stage2_effect(r.stage1, cl, "none", o.stage2);
  CHECK(manual.effect == r.effect.effect);
}

}
