#include <doctest.h>

#include <numeric>
#include <sstream>

#include "crt/config.hpp"
#include "crt/dates.hpp"
#include "crt/error.hpp"
#include "crt/trial_data.hpp"

using namespace crt;

namespace {

Date d(const char* s) { return parse_date(s); }

ParticipantRecord person(const std::string& id, Date enrolled, const std::string& clinic = "A") {
  ParticipantRecord r;
  r.participant_id = id;
  r.clinic_id = clinic;
  r.enrollment_date = enrolled;
  r.age = 20;
  return r;
}

std::vector<ClinicRecord> two_clinics() {
  ClinicRecord a{"A", Country::kenya, Arm::intervention, "S1", 100, 0.8};
  ClinicRecord b{"B", Country::kenya, Arm::control, "S1", 120, 0.7};
  return {a, b};
}

const char* kHeader =
    "participant_id,clinic_id,enrollment_date,age,sex,country,baseline_care_status,death_date,"
    "contact_dates,viral_loads\n";

} // namespace

TEST_SUITE("trial_data") {

TEST_CASE("dates parse strictly and round trip") {
  CHECK(format_date(d("2020-02-29")) == "2020-02-29");
  CHECK_THROWS_AS(parse_date("2019-02-29"), DataError);
  CHECK_THROWS_AS(parse_date("2019-6-1"), DataError);
  CHECK(days_between(d("2019-06-01"), d("2021-05-31")) == 730);
}

TEST_CASE("config parsing with includes and overrides") {
  auto cfg = KeyValueConfig::parse("# comment\na = 1\nb = x, y ,z\na = 2\n");
  CHECK(cfg.get_int("a", 0) == 2);
  CHECK(cfg.get_list("b") == std::vector<std::string>{"x", "y", "z"});
  CHECK(cfg.get_or("missing", "dflt") == "dflt");
  CHECK_THROWS_AS(KeyValueConfig::parse("novalue\n"), ConfigError);
  CHECK(cfg.unknown_keys({"a"}) == std::vector<std::string>{"b"});
}

TEST_CASE("endpoint window arithmetic") {
  auto w = endpoint_window(d("2019-06-01"), d("2022-03-01"));
  CHECK(format_date(w.two_year_mark) == "2021-05-31");
  CHECK(format_date(w.start) == "2021-03-02");
  CHECK(format_date(w.end) == "2021-11-27");

  auto capped = endpoint_window(d("2019-12-01"), d("2022-03-01"));
  CHECK(format_date(capped.end) == "2022-03-01");
  CHECK(days_between(capped.start, capped.two_year_mark) == 90);

  CHECK_THROWS_AS(endpoint_window(d("2021-06-01"), d("2022-03-01")), UnevaluableWindow);
}

TEST_CASE("window end never passes closure and start is 90 days before the mark") {
  for (Date e = d("2019-01-01"); e < d("2020-06-01"); e += Days{17}) {
    auto w = endpoint_window(e, d("2022-03-01"));
    CHECK(w.end <= d("2022-03-01"));
    CHECK(days_between(w.start, w.two_year_mark) == 90);
  }
}

TEST_CASE("classification branches") {
  auto spec = PopulationSpec::primary();
  auto r = person("p", d("2019-06-01"));
  auto w = endpoint_window(r.enrollment_date, d("2022-03-01"));

  r.viral_loads = {{d("2021-05-01"), 350}};
  CHECK(classify_endpoint(r, spec, w).status == EndpointStatus::suppressed);
  r.viral_loads = {{d("2021-05-01"), 400}};
  CHECK(classify_endpoint(r, spec, w).status == EndpointStatus::unsuppressed);

  r.viral_loads = {{d("2021-07-01"), 100}};
  r.death_date = d("2021-04-01");
  CHECK(classify_endpoint(r, spec, w).status == EndpointStatus::died);
  spec.death_handling = DeathHandling::censor;
  CHECK(classify_endpoint(r, spec, w).status == EndpointStatus::censored);
  spec = PopulationSpec::primary();

  r.death_date.reset();
  r.viral_loads.clear();
  CHECK(classify_endpoint(r, spec, w).status == EndpointStatus::missing_vl);

  r.outmigration_date = d("2020-01-01");
  CHECK(classify_endpoint(r, spec, w).status == EndpointStatus::excluded_outmigrated);
  CHECK(classify_endpoint(r, PopulationSpec::secondary(), w).status == EndpointStatus::missing_vl);
  r.outmigration_date.reset();

  r.transfer_date = d("2020-01-01");
  CHECK(classify_endpoint(r, spec, w).status == EndpointStatus::excluded_transferred);
  spec.transfer_handling = TransferHandling::success;
  CHECK(classify_endpoint(r, spec, w).status == EndpointStatus::transfer_success);
  r.transfer_date.reset();

  r.withdrawal_date = d("2019-07-01");
  CHECK(classify_endpoint(r, spec, w).status == EndpointStatus::excluded_withdrawn);
}

TEST_CASE("closest viral load to the mark wins, earlier date on ties") {
  auto r = person("p", d("2019-06-01"));
  auto w = endpoint_window(r.enrollment_date, d("2022-03-01"));
  r.viral_loads = {{d("2021-05-21"), 5000}, {d("2021-06-10"), 20}, {d("2021-03-05"), 10}};
  auto c = classify_endpoint(r, PopulationSpec::primary(), w);
  CHECK(c.status == EndpointStatus::unsuppressed);
  CHECK(format_date(c.endpoint_vl->date) == "2021-05-21");
  r.viral_loads = {{d("2021-05-21"), 5000}, {d("2021-06-10"), 20}};
  CHECK(format_date(classify_endpoint(r, PopulationSpec::primary(), w).endpoint_vl->date) == "2021-05-21");
}

TEST_CASE("suppression at 50 implies suppression at 400") {
  auto r = person("p", d("2019-06-01"));
  auto w = endpoint_window(r.enrollment_date, d("2022-03-01"));
  auto low = PopulationSpec::primary();
  low.vl_threshold = 50;
  for (double copies : {0.0, 20.0, 49.0, 50.0, 120.0, 399.0, 400.0, 1e5}) {
    r.viral_loads = {{d("2021-05-01"), copies}};
    if (classify_endpoint(r, low, w).status == EndpointStatus::suppressed)
      CHECK(classify_endpoint(r, PopulationSpec::primary(), w).status == EndpointStatus::suppressed);
  }
}

TEST_CASE("care status") {
  Date e = d("2020-01-01");
  CHECK(classify_care_status(e - Days{90}, std::nullopt, e) == CareStatus::recently_engaged);
  CHECK(classify_care_status(e - Days{183}, std::nullopt, e) == CareStatus::recently_engaged);
  CHECK(classify_care_status(e - Days{400}, e - Days{60}, e) == CareStatus::engaged);
  CHECK(classify_care_status(e - Days{400}, e - Days{184}, e) == CareStatus::re_engaging);
  CHECK(classify_care_status(e - Days{400}, std::nullopt, e) == CareStatus::re_engaging);
}

TEST_CASE("engagement indicators") {
  auto r = person("p", d("2019-06-01"));
  auto w = endpoint_window(r.enrollment_date, d("2022-03-01"));
  // Gaps of exactly 120 days up to the window start.
  for (Date c = r.enrollment_date + Days{120}; c < w.start; c += Days{120}) r.contact_dates.push_back(c);
  long tail = days_between(r.contact_dates.back(), w.start);
  REQUIRE(tail <= 120);
  auto e = engagement_indicators(r, w);
  CHECK(e.retained);
  CHECK_FALSE(e.lapse_time.has_value());

  auto g = person("g", d("2019-06-01"));
  g.contact_dates = {g.enrollment_date + Days{100}, g.enrollment_date + Days{221}};
  for (Date c = g.enrollment_date + Days{300}; c < w.start; c += Days{100}) g.contact_dates.push_back(c);
  auto ge = engagement_indicators(g, w);
  CHECK_FALSE(ge.retained);
  REQUIRE(ge.lapse_time.has_value());
  CHECK(*ge.lapse_time == 221);

  auto h = person("h", d("2019-06-01"));
  h.contact_dates = {w.start - Days{150}};
  CHECK(engagement_indicators(h, w).engaged_2y);
  h.contact_dates = {w.start - Days{184}};
  CHECK_FALSE(engagement_indicators(h, w).engaged_2y);
  h.contact_dates = {w.start - Days{183}};
  CHECK(engagement_indicators(h, w).engaged_2y);
}

TEST_CASE("ingestion sorts contacts and rejects invariant violations") {
  std::stringstream in;
  in << kHeader
     << "p1,A,2019-07-01,19,female,Kenya,engaged,,2019-10-01;2019-08-01,2020-01-02:30\n"
     << "p2,A,2019-07-01,19,female,Kenya,engaged,2019-01-01,,\n"
     << "p3,B,2019-08-01,22,male,Uganda,re_engaging,,,\n";
  auto res = parse_participants(in);
  REQUIRE(res.records.size() == 2);
  CHECK(res.records[0].contact_dates[0] < res.records[0].contact_dates[1]);
  REQUIRE(res.rejected.size() == 1);
  CHECK(res.rejected[0].participant_id == "p2");

  std::stringstream dup;
  dup << kHeader << "p1,A,2019-07-01,19,female,Kenya,engaged,,,\np1,A,2019-07-01,19,female,Kenya,engaged,,,\n";
  CHECK_THROWS_WITH_AS(parse_participants(dup), doctest::Contains("p1"), DataError);

  std::stringstream missing;
  missing << "participant_id,clinic_id\np1,A\n";
  CHECK_THROWS_AS(parse_participants(missing), DataError);
}

TEST_CASE("write then parse round trips") {
  auto r = person("p9", d("2019-07-01"));
  r.viral_loads = {{d("2021-06-30"), 123.5}};
  r.contact_dates = {d("2019-09-01")};
  r.satisfaction = {{"Q1", 4}};
  r.baseline_suppressed = true;
  std::vector<ParticipantRecord> rows{r};
  std::stringstream s;
  write_participants(s, rows);
  auto back = parse_participants(s);
  REQUIRE(back.records.size() == 1);
  CHECK(back.records[0].viral_loads[0].copies == 123.5);
  CHECK(back.records[0].satisfaction[0].score == 4);
  CHECK(back.records[0].baseline_suppressed == std::optional<bool>(true));
}

TEST_CASE("clinic validation") {
  auto c = two_clinics();
  CHECK_NOTHROW(validate_clinics(c));
  c[1].arm = Arm::intervention;
  CHECK_THROWS_AS(validate_clinics(c), DataError);
  c = two_clinics();
  c[0].baseline_suppression_proportion = 1.2;
  CHECK_THROWS_AS(validate_clinics(c), DataError);
}

TEST_CASE("population selection") {
  auto clinics = two_clinics();
  std::vector<ParticipantRecord> rs;
  auto w = person("w", d("2019-07-01"));
  w.withdrawal_date = d("2019-09-01");
  rs.push_back(w);
  rs.push_back(person("late", d("2019-12-15"), "B"));
  auto t = person("t", d("2019-07-01"));
  t.transfer_date = d("2020-05-01");
  rs.push_back(t);
  rs.push_back(person("ok", d("2019-07-01"), "B"));

  auto prim = select_population(rs, clinics, PopulationSpec::primary());
  CHECK(prim.rows.size() == 1);
  CHECK(prim.exclusion_counts[EndpointStatus::excluded_withdrawn] == 1);
  CHECK(prim.exclusion_counts[EndpointStatus::excluded_late_enrollment] == 1);
  CHECK(prim.exclusion_counts[EndpointStatus::excluded_transferred] == 1);

  auto sec = select_population(rs, clinics, PopulationSpec::secondary());
  CHECK(sec.rows.size() == 3);
  for (const auto& r : prim.rows) {
    bool found = false;
    for (const auto& s : sec.rows) found |= s.record.participant_id == r.record.participant_id;
    CHECK(found);
  }

  auto succ = PopulationSpec::primary();
  succ.transfer_handling = TransferHandling::success;
  auto ss = select_population(rs, clinics, succ);
  CHECK(ss.rows.size() == 2);

  rs.push_back(person("orphan", d("2019-07-01"), "Z"));
  CHECK_THROWS_AS(select_population(rs, clinics, PopulationSpec::primary()), DataError);

  auto bad = PopulationSpec::primary();
  bad.transfer_handling = TransferHandling::include;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("ascertainment categories partition each grouping") {
  auto clinics = two_clinics();
  std::vector<ParticipantRecord> rs;
  const char* ids[] = {"a", "b", "c", "d", "e", "f", "g"};
  for (int i = 0; i < 7; ++i) {
    auto r = person(ids[i], d("2019-07-01"), i % 2 ? "A" : "B");
    if (i == 0) r.outmigration_date = d("2020-01-01");
    if (i == 1) r.transfer_date = d("2020-01-01");
    if (i == 2) r.death_date = d("2020-03-01");
    if (i >= 3 && i <= 5) r.viral_loads = {{d("2021-06-20"), i == 5 ? 9000.0 : 20.0}};
    rs.push_back(r);
  }
  auto set = select_population(rs, clinics, PopulationSpec::secondary());
  auto tab = ascertainment_table(set);
  REQUIRE(tab.size() == 3);
  CHECK(tab[0].total == 7);
  CHECK(tab[0].counts[static_cast<int>(AscertainmentCategory::outmigrated)] == 1);
  CHECK(tab[0].counts[static_cast<int>(AscertainmentCategory::transferred)] == 1);
  CHECK(tab[0].counts[static_cast<int>(AscertainmentCategory::died)] == 1);
  CHECK(tab[0].counts[static_cast<int>(AscertainmentCategory::measured)] == 3);
  CHECK(tab[0].counts[static_cast<int>(AscertainmentCategory::missing)] == 1);
  for (const auto& row : tab) {
    double sum = std::accumulate(row.proportions.begin(), row.proportions.end(), 0.0);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::accumulate(row.counts.begin(), row.counts.end(), std::size_t{0}) == row.total);
  }
}

TEST_CASE("baseline table echoes a single participant and handles constants") {
  auto clinics = two_clinics();
  std::vector<ParticipantRecord> rs{person("x", d("2019-07-01"))};
  auto set = select_population(rs, clinics, PopulationSpec::primary());
  auto tab = baseline_table(set.rows, clinics, Grouping::overall);
  bool saw_age = false;
  for (const auto& r : tab) {
    if (r.variable == "age") {
      saw_age = true;
      CHECK(r.median == 20);
      CHECK(r.q1 == 20);
      CHECK(r.q3 == 20);
    }
  }
  CHECK(saw_age);
  CHECK(quantile({1, 2, 3, 4}, 0.25) == doctest::Approx(1.75));
}

TEST_CASE("covariates impute missing baseline suppression with an indicator") {
  auto clinics = two_clinics();
  std::vector<ParticipantRecord> rs;
  for (int i = 0; i < 4; ++i) {
    auto r = person("p" + std::to_string(i), d("2019-07-01"));
    if (i < 3) r.baseline_suppressed = i != 0;
    rs.push_back(r);
  }
  auto set = select_population(rs, clinics, PopulationSpec::primary());
  std::vector<const AnalysisRow*> ptr;
  for (const auto& r : set.rows) ptr.push_back(&r);
  std::vector<std::string> names{"baseline_suppressed"};
  auto cov = build_covariates(ptr, names);
  REQUIRE(cov.find("baseline_suppressed_missing"));
  CHECK(cov.find("baseline_suppressed")->values[3] == 1.0);
  CHECK(cov.find("baseline_suppressed_missing")->values[3] == 1.0);
}

}
