#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "crt/error.hpp"
#include "crt/simulation.hpp"

using namespace crt;

namespace {

// Moments of expit(mu + sigma Z) by composite Simpson on [-12, 12].
std::pair<double, double> moments_oracle(double mu, double sigma) {
  const int n = 6000;
  const double a = -12, b = 12, h = (b - a) / n;
  double m1 = 0, m2 = 0;
  for (int i = 0; i <= n; ++i) {
    double z = a + i * h;
    double w = (i == 0 || i == n) ? 1 : (i % 2 ? 4 : 2);
    double dens = std::exp(-0.5 * z * z) / std::sqrt(2 * M_PI);
    double p = 1 / (1 + std::exp(-(mu + sigma * z)));
    m1 += w * p * dens;
    m2 += w * p * p * dens;
  }
  m1 *= h / 3;
  m2 *= h / 3;
  return {m1, std::sqrt(m2 - m1 * m1) / m1};
}

std::string dump(const TrialData& d) {
  std::ostringstream o;
  write_participants(o, d.participants);
  write_clinics(o, d.clinics);
  return o.str();
}

TrialSimSpec small_spec() {
  TrialSimSpec s;
  s.clinics_per_arm = 4;
  s.m = 20;
  s.withdrawal_rate = 0.02;
  s.outmigration_rate = 0.03;
  s.transfer_rate = 0.03;
  s.late_enrollment_rate = 0.05;
  return s;
}

} // namespace

TEST_SUITE("simulation") {

TEST_CASE("logit-normal calibration hits the requested mean and CV") {
  for (auto [pi, k] : {std::pair{0.65, 0.175}, {0.806, 0.175}, {0.65, 0.125}, {0.3, 0.5}, {0.9, 0.05}}) {
    auto ln = calibrate_logit_normal(pi, k);
    auto [mean, cv] = moments_oracle(ln.mu, ln.sigma);
    CHECK(mean == doctest::Approx(pi).epsilon(1e-6));
    CHECK(cv == doctest::Approx(k).epsilon(1e-5));
  }
  auto flat = calibrate_logit_normal(0.65, 0.0);
  CHECK(flat.sigma == 0.0);
  CHECK(1 / (1 + std::exp(-flat.mu)) == doctest::Approx(0.65).epsilon(1e-10));
}

TEST_CASE("infeasible coefficient of variation is rejected") {
  // For a proportion with mean 0.9 the CV cannot reach sqrt(0.1 / 0.9).
  CHECK_THROWS_AS(calibrate_logit_normal(0.9, 0.34), ConfigError);
  CHECK_THROWS_AS(calibrate_logit_normal(0.9, 0.5), ConfigError);
  CHECK_NOTHROW(calibrate_logit_normal(0.9, 0.3));
}

TEST_CASE("drawn clinic proportions reproduce k") {
  std::mt19937_64 rng(99);
  auto p = draw_clinic_proportions(0.65, 0.175, 10000, rng);
  double m = 0, v = 0;
  for (double x : p) m += x;
  m /= double(p.size());
  for (double x : p) v += (x - m) * (x - m);
  double cv = std::sqrt(v / double(p.size() - 1)) / m;
  CHECK(std::abs(cv - 0.175) < 0.05 * 0.175);
  CHECK(std::abs(m - 0.65) < 0.01);
}

TEST_CASE("replicate seeds are deterministic and distinct") {
  CHECK(derive_seed(7, 3) == derive_seed(7, 3));
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(derive_seed(7, i));
  CHECK(seen.size() == 1000);
  CHECK(derive_seed(7, 0) != derive_seed(8, 0));
}

TEST_CASE("same seed gives byte-identical trials") {
  auto s = small_spec();
  auto a = synth_trial(s, 5);
  auto b = synth_trial(s, 5);
  CHECK(dump(a.data) == dump(b.data));
  CHECK(a.psi1 == b.psi1);
  CHECK(dump(synth_trial(s, 6).data) != dump(a.data));
  s.seed = 8;
  CHECK(dump(synth_trial(s, 5).data) != dump(a.data));
}

TEST_CASE("synthetic trials satisfy the data invariants") {
  auto t = synth_trial(small_spec(), 1);
  CHECK(t.data.clinics.size() == 8);
  int treated = 0;
  for (const auto& c : t.data.clinics) treated += c.arm == Arm::intervention;
  CHECK(treated == 4);
  std::ostringstream o;
  write_participants(o, t.data.participants);
  std::istringstream in(o.str());
  auto parsed = parse_participants(in);
  CHECK(parsed.rejected.empty());
  CHECK(parsed.records.size() == t.data.participants.size());
  CHECK(t.true_rr() == doctest::Approx(t.psi1 / t.psi0));
}

TEST_CASE("zero-noise trials are estimated exactly") {
  TrialSimSpec s;
  s.clinics_per_arm = 4;
  s.m = 40;
  s.k = 0;
  s.pi0 = 0.5;
  s.pi1 = 0.75;
  s.beta_age = 0;
  s.beta_baseline_suppressed = 0;
  s.outcome_mode = OutcomeMode::deterministic;
  s.replicates = 3;
  auto cfg = SimAnalysisConfig::defaults();
  auto oc = operating_characteristics_serial(s, cfg);
  REQUIRE(oc.records.size() == 3 * cfg.estimators.size());
  for (const auto& r : oc.records) {
    INFO(r.estimator << " replicate " << r.replicate << " " << r.note);
    REQUIRE(r.ok);
    CHECK(r.truth == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(r.estimate == doctest::Approx(r.truth).epsilon(1e-9));
  }
}

TEST_CASE("parallel operating characteristics equal the serial reference") {
  auto s = small_spec();
  s.replicates = 6;
  auto cfg = SimAnalysisConfig::defaults();
  auto par = operating_characteristics(s, cfg);
  auto ser = operating_characteristics_serial(s, cfg);
  REQUIRE(par.records.size() == ser.records.size());
  for (std::size_t i = 0; i < par.records.size(); ++i) {
    CHECK(par.records[i].estimator == ser.records[i].estimator);
    CHECK(par.records[i].estimate == ser.records[i].estimate);
    CHECK(par.records[i].p_one_sided == ser.records[i].p_one_sided);
  }
  for (std::size_t e = 0; e < par.summaries.size(); ++e) {
    CHECK(par.summaries[e].rejection_rate == ser.summaries[e].rejection_rate);
    CHECK(par.summaries[e].bias == ser.summaries[e].bias);
  }
}

TEST_CASE("spec configuration") {
  KeyValueConfig c;
  c.set("pi0", "0.6");
  c.set("rr", "1.2");
  c.set("k", "0.1");
  auto s = TrialSimSpec::from_config(c);
  CHECK(s.pi1 == doctest::Approx(0.72));
  CHECK(s.hash() == TrialSimSpec::from_config(c).hash());
  s.beta_age = 0.5;
  s.outcome_mode = OutcomeMode::deterministic;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  TrialSimSpec bad;
  bad.withdrawal_rate = 0.6;
  bad.transfer_rate = 0.6;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

}
