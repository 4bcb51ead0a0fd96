// Acceptance checks. One PASS/FAIL line per criterion; pass criterion numbers
// as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crt/learners.hpp"
#include "crt/power.hpp"
#include "crt/report.hpp"
#include "crt/simulation.hpp"
#include "crt/survival.hpp"
#include "crt/tmle.hpp"
#include "crt/trial_data.hpp"
#include "crt/two_stage.hpp"

using namespace crt;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances.
constexpr double kRawClusters = 13.07, kRawClustersTol = 0.05;
constexpr double kPowerRuntimeMs = 1.0;
constexpr double kPowerSpreadMax = 0.05;
constexpr double kTypeOneMax = 0.0597;
constexpr double kSimMinutesMax = 5.0;
constexpr double kCoverageLo = 0.93, kCoverageHi = 0.97;
constexpr double kVarianceRatioMax = 0.9;
constexpr double kPrognosticR2Min = 0.5;
constexpr double kOracleTol = 1e-10;
constexpr double kTCrit = 2.0555, kTCritTol = 1e-3;
constexpr double kPipelineSecondsMax = 10.0;

const fs::path kSource = CRT_SOURCE_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 6) {
  std::ostringstream o;
  o.precision(prec);
  o << v;
  return o.str();
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

TrialSimSpec load_spec(const std::string& name) {
  return TrialSimSpec::from_config(KeyValueConfig::load(kSource / "data" / "specs" / name));
}

SimAnalysisConfig load_analysis(const std::string& name) {
  return SimAnalysisConfig::from_config(KeyValueConfig::load(kSource / "data" / "specs" / name));
}

const EstimatorSummary& summary_for(const OperatingCharacteristics& oc, const std::string& label) {
  for (const auto& s : oc.summaries)
    if (s.estimator == label) return s;
  throw std::runtime_error("no summary for " + label);
}

// ---------------------------------------------------------------------------

Outcome power_reproduction() {
  PowerParams p;
  p.pi0 = 0.65;
  p.relative_effect = 1.24;
  p.m = 50;
  p.k = 0.175;
  p.alpha = 0.05;
  p.power = 0.80;
  p.sided = Sidedness::two;
  p.correction = Correction::none;
  auto t0 = Clock::now();
  auto c = clusters_per_arm(p);
  double ms = seconds_since(t0) * 1e3;
  p.correction = Correction::plus_one;
  auto c1 = clusters_per_arm(p);
  bool ok = c.clusters == 14 && std::fabs(c.raw - kRawClusters) <= kRawClustersTol && c1.clusters == 15 &&
            ms < kPowerRuntimeMs;
  return {ok, "clusters=" + std::to_string(c.clusters) + " raw=" + fmt(c.raw) +
                  " plus_one=" + std::to_string(c1.clusters) + " runtime_ms=" + fmt(ms, 3)};
}

Outcome power_insensitivity() {
  PowerParams p;
  const int clusters = clusters_per_arm(p).clusters;
  double lo = 1, hi = 0;
  bool k_order = true;
  std::string detail = "clusters=" + std::to_string(clusters);
  for (double m : {50.0, 100.0, 200.0}) {
    p.m = m;
    p.k = 0.175;
    double base = power_given_design(clusters, p);
    p.k = 0.125;
    double weak = power_given_design(clusters, p);
    lo = std::min(lo, base);
    hi = std::max(hi, base);
    k_order = k_order && weak > base;
    detail += " m" + fmt(m) + "=" + fmt(base, 4) + "/" + fmt(weak, 4);
  }
  double spread = hi - lo;
  detail += " spread=" + fmt(spread, 4) + " limit=" + fmt(kPowerSpreadMax) +
            " k0.125>k0.175=" + (k_order ? "yes" : "no");
  return {spread < kPowerSpreadMax && k_order, detail};
}

Outcome type_one_error() {
  auto spec = load_spec("null.cfg");
  auto analysis = load_analysis("analysis_null.cfg");
  auto t0 = Clock::now();
  auto oc = operating_characteristics(spec, analysis);
  double minutes = seconds_since(t0) / 60;
  bool ok = minutes < kSimMinutesMax && oc.replicates == 2000;
  std::string detail = "reps=" + std::to_string(oc.replicates);
  for (const char* label : {"primary", "sens_single_stage"}) {
    const auto& s = summary_for(oc, label);
    ok = ok && s.rejection_rate <= kTypeOneMax && s.failures == 0;
    detail += std::string(" ") + label + "=" + fmt(s.rejection_rate, 4) + "(mcse " + fmt(s.rejection_mcse, 2) +
              ", failures " + std::to_string(s.failures) + ")";
  }
  detail += " minutes=" + fmt(minutes, 3);
  return {ok, detail};
}

Outcome ci_coverage() {
  auto spec = load_spec("alt.cfg");
  SimAnalysisConfig analysis = load_analysis("analysis_null.cfg");
  analysis.estimators.resize(1);  // primary
  auto oc = operating_characteristics(spec, analysis);
  const auto& s = summary_for(oc, "primary");
  bool ok = s.coverage >= kCoverageLo && s.coverage <= kCoverageHi && s.failures == 0;
  return {ok, "coverage=" + fmt(s.coverage, 4) + " mcse=" + fmt(s.coverage_mcse, 2) +
                  " mean_true_rr=" + fmt(oc.mean_truth, 4) + " reps=" + std::to_string(oc.replicates)};
}

Outcome efficiency() {
  auto spec = load_spec("prognostic.cfg");
  // Share of the between-clinic variance in true control proportions explained
  // linearly by the clinic covariate, pooled over the first 200 trials.
  std::vector<double> x, y;
  auto cal = calibrate(spec);
  for (std::uint64_t r = 0; r < 200; ++r) {
    auto t = synth_trial(spec, r, cal);
    for (std::size_t j = 0; j < t.data.clinics.size(); ++j) {
      x.push_back(t.data.clinics[j].baseline_suppression_proportion);
      y.push_back(t.truth0[j]);
    }
  }
  const double n = double(x.size());
  double mx = std::accumulate(x.begin(), x.end(), 0.0) / n, my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  double r2 = sxy * sxy / (sxx * syy);

  auto oc = operating_characteristics(spec, load_analysis("analysis_efficiency.cfg"));
  const auto& adj = summary_for(oc, "primary");
  const auto& un = summary_for(oc, "primary_unadjusted");
  double ratio = adj.variance / un.variance;
  std::string sel;
  for (const auto& [k, v] : adj.selections) sel += " " + k + ":" + std::to_string(v);
  return {r2 >= kPrognosticR2Min && ratio <= kVarianceRatioMax && adj.failures == 0 && un.failures == 0,
          "covariate_r2=" + fmt(r2, 3) + " var_adjusted=" + fmt(adj.variance, 4) + " var_unadjusted=" +
              fmt(un.variance, 4) + " ratio=" + fmt(ratio, 4) + " selected{" + sel + " }"};
}

Outcome oracle_equivalences() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u;
  std::map<std::string, double> err;

  {  // unadjusted two-stage vs weighted arm means
    std::vector<ClinicEndpoint> eps;
    std::vector<ClinicRecord> clinics;
    std::uniform_int_distribution<long> size(20, 70);
    for (int j = 0; j < 28; ++j) {
      Arm arm = j < 14 ? Arm::intervention : Arm::control;
      std::string id = "K" + std::to_string(j);
      eps.push_back({id, arm, 0.3 + 0.6 * u(rng), size(rng)});
      clinics.push_back({id, Country::kenya, arm, "S", 100 + j, 0.5 + 0.01 * j});
    }
    double worst = 0;
    for (WeightScheme ws : {WeightScheme::equal, WeightScheme::size}) {
      Stage2Options opt;
      opt.weights = ws;
      auto e = stage2_effect(eps, clinics, "none", opt);
      double s[2] = {0, 0}, w[2] = {0, 0};
      for (const auto& c : eps) {
        double a = ws == WeightScheme::size ? double(c.n_included) : 1.0;
        int g = c.arm == Arm::intervention;
        s[g] += a * c.y;
        w[g] += a;
      }
      worst = std::max({worst, std::fabs(e.psi1 - s[1] / w[1]), std::fabs(e.psi0 - s[0] / w[0]),
                        std::fabs(e.effect - (s[1] / w[1]) / (s[0] / w[0]))});
    }
    err["two_stage_unadjusted"] = worst;
  }
  {  // TMLE with every outcome measured
    const int n = 150;
    std::vector<double> a(n), y(n);
    std::vector<int> delta(n, 1);
    for (int i = 0; i < n; ++i) {
      a[i] = u(rng);
      y[i] = u(rng) < 0.3 + 0.4 * a[i];
    }
    Covariates w(n);
    w.add("a", a, true);
    auto fit = tmle_mean_missing(w, delta, y, TmleOptions{});
    err["tmle_full_measurement"] = std::fabs(fit.estimate - std::accumulate(y.begin(), y.end(), 0.0) / n);
  }
  {  // Kaplan-Meier without censoring
    std::vector<TimeToEvent> d;
    std::uniform_int_distribution<long> t(1, 60);
    for (int i = 0; i < 80; ++i) d.push_back({t(rng), true, EventKind::death});
    auto c = km_fit(d);
    double worst = 0;
    for (long s = 0; s <= 65; ++s) {
      double above = 0;
      for (const auto& x : d) above += x.time > s;
      worst = std::max(worst, std::fabs(survival_at(c, double(s)) - above / double(d.size())));
    }
    err["km_no_censoring"] = worst;
  }
  {  // Super Learner with one candidate
    const std::size_t n = 250;
    std::normal_distribution<double> z;
    std::vector<double> a(n), b(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = z(rng);
      b[i] = u(rng) < 0.4;
      y[i] = u(rng) < 1 / (1 + std::exp(-(0.3 + 0.8 * a[i] + 0.6 * b[i])));
    }
    Covariates x(n);
    x.add("a", a, true);
    x.add("b", b, false);
    auto sl = super_learner(x, y, std::vector<LearnerSpec>{{LearnerKind::glm}}, 10, 4).predict(x);
    auto direct = fit_glm(x, y).predict(x);
    double worst = 0;
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::fabs(sl[i] - direct[i]));
    err["super_learner_one_candidate"] = worst;
  }
  {  // sequential TMLE on a saturated 2x2x2 table
    const int n = 1600;
    std::vector<double> wv(n), y(n);
    std::vector<int> m(n), delta(n);
    for (int i = 0; i < n; ++i) {
      wv[i] = u(rng) < 0.5;
      m[i] = u(rng) < (wv[i] ? 0.3 : 0.1);
      delta[i] = u(rng) < (m[i] ? 0.5 : 0.85);
      y[i] = delta[i] ? (u(rng) < 0.4 + 0.3 * wv[i] - 0.2 * m[i]) : 0.0;
    }
    double cnt[2] = {0, 0}, cnt_m[2][2] = {}, obs[2][2] = {}, sy[2][2] = {};
    for (int i = 0; i < n; ++i) {
      int a = int(wv[i]), b = m[i];
      cnt[a] += 1;
      cnt_m[a][b] += 1;
      if (delta[i]) {
        obs[a][b] += 1;
        sy[a][b] += y[i];
      }
    }
    double hand = 0;
    for (int a = 0; a < 2; ++a) {
      double inner = 0;
      for (int b = 0; b < 2; ++b) inner += cnt_m[a][b] / cnt[a] * sy[a][b] / obs[a][b];
      hand += cnt[a] / n * inner;
    }
    Covariates w(n);
    w.add("w", wv, false);
    TmleOptions o;
    o.outcome = LearnerConfig::glm_only();
    o.missingness = LearnerConfig::glm_only();
    err["sequential_2x2x2"] = std::fabs(tmle_sequential(w, m, delta, y, o, true).estimate - hand);
  }

  bool ok = true;
  std::string detail;
  for (const auto& [k, v] : err) {
    ok = ok && v <= kOracleTol;
    detail += k + "=" + fmt(v, 3) + " ";
  }
  detail += "tol=" + fmt(kOracleTol);
  return {ok, detail};
}

Outcome inference_constants() {
  double t = student_t_quantile(0.975, 26);
  // Orient a zero statistic: the one-sided p-value must be exactly one half.
  double p0 = 1 - student_t_cdf(0.0, 26);
  bool ok = std::fabs(t - kTCrit) <= kTCritTol && p0 == 0.5;
  return {ok, "t_0.975,26=" + fmt(t, 8) + " p_one(t=0)=" + fmt(p0, 17)};
}

std::vector<std::map<std::string, std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string f;
    while (std::getline(ss, f, ',')) out.push_back(f);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  auto header = split(line);
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split(line);
    f.resize(header.size());
    std::map<std::string, std::string> r;
    for (std::size_t i = 0; i < header.size(); ++i) r[header[i]] = f[i];
    rows.push_back(r);
  }
  return rows;
}

Outcome golden_endpoints() {
  auto dir = kSource / "tests" / "golden";
  auto load = load_trial(dir);
  if (!load.rejected.empty()) return {false, "golden rows rejected at ingestion"};
  const auto& data = load.data;

  auto statuses = [&](PopulationSpec spec) {
    auto set = select_population(data.participants, data.clinics, spec, data.database_closure);
    std::map<std::string, const AnalysisRow*> out;
    for (const auto& r : set.rows) out[r.record.participant_id] = &r;
    for (const auto& r : set.excluded) out[r.record.participant_id] = &r;
    return std::make_pair(std::move(set), std::move(out));
  };
  PopulationSpec p50;
  p50.vl_threshold = 50;
  PopulationSpec sens;
  sens.transfer_handling = TransferHandling::success;
  sens.death_handling = DeathHandling::censor;
  auto [s400, primary400] = statuses(PopulationSpec::primary());
  auto [s50, primary50] = statuses(p50);
  auto [ssec, secondary] = statuses(PopulationSpec::secondary());
  auto [ssens, sensitivity] = statuses(sens);

  std::set<std::string> seen;
  std::vector<std::string> mismatches;
  auto expect = load_trial(dir).data.participants.size();
  auto rows = read_csv(dir / "expected.csv");
  auto check = [&](const std::string& id, const std::string& what, const std::string& got,
                   const std::string& want) {
    if (got != want) mismatches.push_back(id + ":" + what + " got " + got + " want " + want);
  };
  for (const auto& e : rows) {
    const auto& id = e.at("participant_id");
    if (!primary400.count(id)) {
      mismatches.push_back(id + ": not loaded");
      continue;
    }
    auto st = [](const AnalysisRow* r) { return std::string(to_string(r->classification.status)); };
    check(id, "primary_400", st(primary400[id]), e.at("primary_400"));
    check(id, "primary_50", st(primary50[id]), e.at("primary_50"));
    check(id, "secondary_400", st(secondary[id]), e.at("secondary_400"));
    check(id, "sensitivity", st(sensitivity[id]), e.at("sensitivity"));
    for (const auto* r : {primary400[id], primary50[id], secondary[id], sensitivity[id]}) seen.insert(st(r));
    const auto& vl = secondary[id]->classification.endpoint_vl;
    check(id, "endpoint_vl_date", vl ? format_date(vl->date) : "", e.at("endpoint_vl_date"));

    const auto& rec = secondary[id]->record;
    std::string retained, engaged, lapse;
    try {
      auto eng = engagement_indicators(rec, endpoint_window(rec.enrollment_date, data.database_closure));
      retained = eng.retained ? "1" : "0";
      engaged = eng.engaged_2y ? "1" : "0";
      lapse = eng.lapse_time ? std::to_string(*eng.lapse_time) : "";
    } catch (const UnevaluableWindow&) {
    }
    check(id, "retained", retained, e.at("retained"));
    check(id, "engaged_2y", engaged, e.at("engaged_2y"));
    check(id, "lapse_day", lapse, e.at("lapse_day"));
  }
  const std::size_t all_statuses = 11;
  bool ok = mismatches.empty() && rows.size() == 40 && expect == 40 && seen.size() == all_statuses;
  std::string detail = "rows=" + std::to_string(rows.size()) + " statuses_covered=" + std::to_string(seen.size()) +
                       "/" + std::to_string(all_statuses) + " mismatches=" + std::to_string(mismatches.size());
  for (std::size_t i = 0; i < std::min<std::size_t>(mismatches.size(), 5); ++i) detail += " [" + mismatches[i] + "]";
  return {ok, detail};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& f : fs::recursive_directory_iterator(dir)) {
    if (!f.is_regular_file()) continue;
    std::ifstream in(f.path(), std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    out[fs::relative(f.path(), dir).string()] = s.str();
  }
  return out;
}

Outcome pipeline_determinism() {
  auto data_dir = kSource / "data" / "synthetic";
  auto base = fs::temp_directory_path() / "crt_acceptance_pipeline";
  fs::remove_all(base);
  double worst = 0;
  std::size_t files = 0;
  for (const char* run : {"a", "b"}) {
    auto t0 = Clock::now();
    auto load = load_trial(data_dir);
    auto bundle = build_report(load.data);
    auto res = emit_report(bundle, base / run);
    worst = std::max(worst, seconds_since(t0));
    files = res.files.size();
  }
  auto a = snapshot(base / "a"), b = snapshot(base / "b");
  bool same = a == b;
  fs::remove_all(base);
  return {same && worst < kPipelineSecondsMax && files > 0,
          "files=" + std::to_string(files) + " identical=" + (same ? "yes" : "no") +
              " slowest_run_s=" + fmt(worst, 3)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

} // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "power_reproduction", power_reproduction},
      {2, "power_insensitivity", power_insensitivity},
      {3, "type_one_error", type_one_error},
      {4, "ci_coverage", ci_coverage},
      {5, "efficiency", efficiency},
      {6, "oracle_equivalences", oracle_equivalences},
      {7, "inference_constants", inference_constants},
      {8, "golden_endpoints", golden_endpoints},
      {9, "pipeline_determinism", pipeline_determinism},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
