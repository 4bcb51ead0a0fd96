#include <doctest.h>

#include <algorithm>
#include <set>

#include "crt/error.hpp"
#include "crt/runner.hpp"
#include "crt/simulation.hpp"

using namespace crt;

namespace {

TrialSimSpec base_spec() {
  TrialSimSpec s;
  s.clinics_per_arm = 6;
  s.m = 30;
  s.pi0 = 0.6;
  s.pi1 = 0.72;
  s.seed = 31;
  return s;
}

TrialData trial(const TrialSimSpec& s, std::uint64_t rep = 0) { return synth_trial(s, rep).data; }

AnalysisPlan fast(AnalysisPlan p) {
  p.learners = LearnerConfig::glm_only();
  return p;
}

} // namespace

TEST_SUITE("runner") {

TEST_CASE("every preset validates and has a distinct hash") {
  std::set<std::string> hashes;
  for (const auto& name : preset_names()) {
    INFO(name);
    auto p = preset(name);
    CHECK(p.name == name);
    CHECK_NOTHROW(p.validate());
    hashes.insert(p.hash());
  }
  CHECK(hashes.size() == preset_names().size());
  CHECK_THROWS_AS(preset("primary_typo"), ConfigError);
}

TEST_CASE("plan configuration rejects unknown keys and bad combinations") {
  KeyValueConfig c;
  c.set("preset", "primary");
  c.set("weigths", "size");
  CHECK_THROWS_WITH_AS(AnalysisPlan::from_config(c), doctest::Contains("weigths"), ConfigError);

  KeyValueConfig sub;
  sub.set("preset", "primary");
  sub.set("subgroup_variable", "sex");
  sub.set("subgroup_level", "female");
  CHECK_THROWS_AS(AnalysisPlan::from_config(sub), ConfigError);  // subgroups are single-stage

  KeyValueConfig ok;
  ok.set("preset", "primary");
  ok.set("weights", "size");
  auto p = AnalysisPlan::from_config(ok);
  CHECK(p.weights == WeightScheme::size);
  CHECK(p.hash() != preset("primary").hash());
}

TEST_CASE("run is deterministic and records provenance") {
  auto data = trial(base_spec());
  auto plan = fast(preset("primary"));
  auto a = run_plan(plan, data);
  auto b = run_plan(plan, data);
  REQUIRE(a.estimable);
  CHECK(a.effect.effect == b.effect.effect);
  CHECK(a.provenance.data_hash == data_hash(data));
  CHECK(a.provenance.spec_hash == plan.hash());
  CHECK(a.effect.n_clusters == 12);
  CHECK(a.effect.df == 10);

  auto shuffled = data;
  std::reverse(shuffled.participants.begin(), shuffled.participants.end());
  CHECK(data_hash(shuffled) == data_hash(data));
}

TEST_CASE("subgroup analysis equals the analysis of pre-filtered data") {
  auto data = trial(base_spec());
  auto plan = fast(preset("subgroup_sex_female"));
  auto sub = run_plan(plan, data);
  REQUIRE(sub.estimable);

  TrialData filtered = data;
  std::erase_if(filtered.participants, [](const ParticipantRecord& r) { return r.sex != Sex::female; });
  auto whole = plan;
  whole.subgroup.reset();
  auto ref = run_plan(whole, filtered);
  REQUIRE(ref.estimable);
  CHECK(sub.effect.effect == doctest::Approx(ref.effect.effect).epsilon(1e-10));
  CHECK(sub.effect.se == doctest::Approx(ref.effect.se).epsilon(1e-10));
  CHECK(sub.n_rows == ref.n_rows);
}

TEST_CASE("mortality with no deaths is reported as inestimable") {
  auto s = base_spec();
  s.died_fraction = 0;
  auto data = trial(s);
  for (auto& p : data.participants) p.death_date.reset();
  auto r = run_plan(fast(preset("mortality")), data);
  CHECK_FALSE(r.estimable);
  CHECK_FALSE(r.note.empty());
}

TEST_CASE("secondary population equals primary without transfers or late enrollment") {
  auto data = trial(base_spec());
  for (auto& p : data.participants) {
    p.transfer_date.reset();
    p.outmigration_date.reset();
  }
  auto primary = fast(preset("primary"));
  auto secondary = primary;
  secondary.population = PopulationSpec::secondary();
  auto a = run_plan(primary, data);
  auto b = run_plan(secondary, data);
  REQUIRE(a.estimable);
  REQUIRE(b.estimable);
  CHECK(a.n_rows == b.n_rows);
  CHECK(b.effect.effect == doctest::Approx(a.effect.effect).epsilon(1e-12));
}

TEST_CASE("satisfaction shifted by one point gives a difference of one") {
  auto s = base_spec();
  s.survey_response_rate = 1.0;
  auto data = trial(s);
  REQUIRE_FALSE(data.survey.empty());
  std::set<std::string> treated;
  for (const auto& c : data.clinics)
    if (c.arm == Arm::intervention) treated.insert(c.clinic_id);
  std::set<std::string> reversed;
  for (const auto& it : data.survey)
    if (it.reverse_coded) reversed.insert(it.question_id);
  for (auto& p : data.participants) {
    bool t = treated.count(p.clinic_id) > 0;
    for (auto& r : p.satisfaction) {
      int score = t ? 4 : 3;
      r.score = reversed.count(r.question_id) ? 6 - score : score;
    }
  }
  auto res = run_satisfaction(data);
  REQUIRE(res.effects.size() == data.survey.size() + 1);
  for (const auto& e : res.effects) {
    INFO(e.label << " " << e.result.note);
    REQUIRE(e.result.estimable);
    CHECK(e.result.effect.effect == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(e.result.effect.psi1 == doctest::Approx(4.0).epsilon(1e-9));
  }
}

TEST_CASE("unadjusted predictor risk ratio equals the ratio of outcome rates") {
  auto data = trial(base_spec());
  PredictorOptions opt;
  opt.adjustment.clear();
  opt.predictors = {"alcohol", "parent"};
  auto rows = run_predictor_analysis(data, Arm::control, opt);
  REQUIRE(rows.size() == 4);

  PopulationSpec pop = opt.population;
  pop.missing_handling = MissingHandling::failure;
  auto set = select_population(data.participants, data.clinics, pop, data.database_closure);
  for (const auto& row : rows) {
    if (row.adjusted) continue;
    INFO(row.predictor << " " << row.note);
    REQUIRE(row.estimable);
    double f[2] = {0, 0}, n[2] = {0, 0};
    for (const auto& r : set.rows) {
      if (r.arm != Arm::control) continue;
      bool z = row.predictor == "alcohol" ? r.record.alcohol_use == "any" : r.record.n_children.value_or(0) > 0;
      auto st = r.classification.status;
      n[z] += 1;
      f[z] += st != EndpointStatus::suppressed && st != EndpointStatus::transfer_success;
    }
    CHECK(row.rr == doctest::Approx((f[1] / n[1]) / (f[0] / n[0])).epsilon(1e-8));
    CHECK(row.n == long(n[0] + n[1]));
  }
}

TEST_CASE("predictor with a single level is skipped") {
  auto data = trial(base_spec());
  for (auto& p : data.participants) p.alcohol_use = "none";
  PredictorOptions opt;
  opt.predictors = {"alcohol"};
  auto rows = run_predictor_analysis(data, Arm::intervention, opt);
  REQUIRE(rows.size() == 2);
  CHECK_FALSE(rows[0].estimable);
}

TEST_CASE("DTG suite notes when everyone started on DTG") {
  auto data = trial(base_spec());
  for (auto& p : data.participants) p.art_regimen_baseline = "TDF/3TC/DTG";
  auto suite = run_dtg_suite(data, PopulationSpec::primary());
  CHECK(suite.effects.empty());
  CHECK(suite.note.find("DTG") != std::string::npos);

  auto normal = run_dtg_suite(trial(base_spec()), PopulationSpec::primary());
  CHECK(normal.note.empty());
  CHECK(normal.effects.size() == 7);
  CHECK_FALSE(normal.km.empty());
}

TEST_CASE("excluded clinics are dropped from the analysis") {
  auto data = trial(base_spec());
  auto plan = fast(preset("primary"));
  plan.exclude_clinics = {data.clinics[0].clinic_id};
  auto r = run_plan(plan, data);
  REQUIRE(r.estimable);
  CHECK(r.effect.n_clusters == 11);
}

}
