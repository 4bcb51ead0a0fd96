#include "crt/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "crt/error.hpp"
#include "crt/learners.hpp"

namespace crt {

// ---------------------------------------------------------------------------
// Spec

const std::vector<std::string>& sim_spec_keys() {
  static const std::vector<std::string> keys{
      "clinics_per_arm", "m", "m_min", "m_max", "pi0", "pi1", "rr", "k", "prognostic_r2",
      "beta_baseline_suppressed", "beta_age", "outcome_mode", "died_fraction", "missing_fraction",
      "withdrawal_rate", "outmigration_rate", "transfer_rate", "late_enrollment_rate",
      "dtg_baseline_fraction", "dtg_switch_monthly_hazard", "dtg_switch_hazard_ratio",
      "second_line_monthly_hazard", "lapse_probability_control", "lapse_probability_intervention",
      "birth_probability", "survey_response_rate", "satisfaction_shift", "enrollment_start",
      "enrollment_days", "database_closure", "replicates", "seed"};
  return keys;
}

TrialSimSpec TrialSimSpec::from_config(const KeyValueConfig& c) {
  TrialSimSpec s;
  s.clinics_per_arm = static_cast<int>(c.get_int("clinics_per_arm", s.clinics_per_arm));
  s.m = static_cast<int>(c.get_int("m", s.m));
  s.m_min = static_cast<int>(c.get_int("m_min", s.m_min));
  s.m_max = static_cast<int>(c.get_int("m_max", s.m_max));
  s.pi0 = c.get_double("pi0", s.pi0);
  s.pi1 = c.has("rr") ? s.pi0 * c.get_double("rr", 1.0) : c.get_double("pi1", s.pi0);
  s.k = c.get_double("k", s.k);
  s.prognostic_r2 = c.get_double("prognostic_r2", s.prognostic_r2);
  s.beta_baseline_suppressed = c.get_double("beta_baseline_suppressed", s.beta_baseline_suppressed);
  s.beta_age = c.get_double("beta_age", s.beta_age);
  if (auto v = c.get("outcome_mode")) {
    if (*v == "random") s.outcome_mode = OutcomeMode::random;
    else if (*v == "deterministic") s.outcome_mode = OutcomeMode::deterministic;
    else throw ConfigError("outcome_mode must be random or deterministic");
  }
  s.died_fraction = c.get_double("died_fraction", s.died_fraction);
  s.missing_fraction = c.get_double("missing_fraction", s.missing_fraction);
  s.withdrawal_rate = c.get_double("withdrawal_rate", s.withdrawal_rate);
  s.outmigration_rate = c.get_double("outmigration_rate", s.outmigration_rate);
  s.transfer_rate = c.get_double("transfer_rate", s.transfer_rate);
  s.late_enrollment_rate = c.get_double("late_enrollment_rate", s.late_enrollment_rate);
  s.dtg_baseline_fraction = c.get_double("dtg_baseline_fraction", s.dtg_baseline_fraction);
  s.dtg_switch_monthly_hazard = c.get_double("dtg_switch_monthly_hazard", s.dtg_switch_monthly_hazard);
  s.dtg_switch_hazard_ratio = c.get_double("dtg_switch_hazard_ratio", s.dtg_switch_hazard_ratio);
  s.second_line_monthly_hazard = c.get_double("second_line_monthly_hazard", s.second_line_monthly_hazard);
  s.lapse_probability_control = c.get_double("lapse_probability_control", s.lapse_probability_control);
  s.lapse_probability_intervention =
      c.get_double("lapse_probability_intervention", s.lapse_probability_intervention);
  s.birth_probability = c.get_double("birth_probability", s.birth_probability);
  s.survey_response_rate = c.get_double("survey_response_rate", s.survey_response_rate);
  s.satisfaction_shift = c.get_double("satisfaction_shift", s.satisfaction_shift);
  if (auto v = c.get("enrollment_start")) s.enrollment_start = parse_date(*v);
  s.enrollment_days = static_cast<int>(c.get_int("enrollment_days", s.enrollment_days));
  if (auto v = c.get("database_closure")) s.database_closure = parse_date(*v);
  s.replicates = static_cast<int>(c.get_int("replicates", s.replicates));
  s.seed = static_cast<std::uint64_t>(c.get_int("seed", static_cast<long>(s.seed)));
  s.validate();
  return s;
}

void TrialSimSpec::validate() const {
  auto prob = [](double v, const char* name) {
    if (!(v >= 0 && v <= 1)) throw ConfigError(std::string(name) + " must lie in [0,1]");
  };
  if (clinics_per_arm < 2) throw ConfigError("clinics_per_arm must be >= 2");
  if (m_max > m_min ? m_min < 1 : m < 1) throw ConfigError("participants per clinic must be >= 1");
  if (!(pi0 > 0 && pi0 < 1 && pi1 > 0 && pi1 < 1)) throw ConfigError("pi0 and pi1 must lie in (0,1)");
  if (!(k >= 0)) throw ConfigError("k must be >= 0");
  prob(prognostic_r2, "prognostic_r2");
  prob(died_fraction, "died_fraction");
  prob(missing_fraction, "missing_fraction");
  if (died_fraction + missing_fraction > 1) throw ConfigError("died_fraction + missing_fraction > 1");
  prob(withdrawal_rate, "withdrawal_rate");
  prob(outmigration_rate, "outmigration_rate");
  prob(transfer_rate, "transfer_rate");
  prob(late_enrollment_rate, "late_enrollment_rate");
  prob(dtg_baseline_fraction, "dtg_baseline_fraction");
  prob(lapse_probability_control, "lapse_probability_control");
  prob(lapse_probability_intervention, "lapse_probability_intervention");
  prob(birth_probability, "birth_probability");
  prob(survey_response_rate, "survey_response_rate");
  if (withdrawal_rate + outmigration_rate + transfer_rate > 1)
    throw ConfigError("exclusion rates sum above 1");
  if (outcome_mode == OutcomeMode::deterministic && (beta_age != 0 || beta_baseline_suppressed != 0))
    throw ConfigError("deterministic outcomes need beta_age = beta_baseline_suppressed = 0");
  if (replicates < 1) throw ConfigError("replicates must be >= 1");
  if (enrollment_days < 1) throw ConfigError("enrollment_days must be >= 1");
}

std::string TrialSimSpec::canonical() const {
  std::ostringstream o;
  o << std::setprecision(17);
  o << "clinics_per_arm=" << clinics_per_arm << "\nm=" << m << "\nm_min=" << m_min
    << "\nm_max=" << m_max << "\npi0=" << pi0 << "\npi1=" << pi1 << "\nk=" << k
    << "\nprognostic_r2=" << prognostic_r2 << "\nbeta_baseline_suppressed=" << beta_baseline_suppressed
    << "\nbeta_age=" << beta_age << "\noutcome_mode="
    << (outcome_mode == OutcomeMode::random ? "random" : "deterministic")
    << "\ndied_fraction=" << died_fraction << "\nmissing_fraction=" << missing_fraction
    << "\nwithdrawal_rate=" << withdrawal_rate << "\noutmigration_rate=" << outmigration_rate
    << "\ntransfer_rate=" << transfer_rate << "\nlate_enrollment_rate=" << late_enrollment_rate
    << "\ndtg_baseline_fraction=" << dtg_baseline_fraction
    << "\ndtg_switch_monthly_hazard=" << dtg_switch_monthly_hazard
    << "\ndtg_switch_hazard_ratio=" << dtg_switch_hazard_ratio
    << "\nsecond_line_monthly_hazard=" << second_line_monthly_hazard
    << "\nlapse_probability_control=" << lapse_probability_control
    << "\nlapse_probability_intervention=" << lapse_probability_intervention
    << "\nbirth_probability=" << birth_probability << "\nsurvey_response_rate=" << survey_response_rate
    << "\nsatisfaction_shift=" << satisfaction_shift
    << "\nenrollment_start=" << format_date(enrollment_start) << "\nenrollment_days=" << enrollment_days
    << "\ndatabase_closure=" << format_date(database_closure) << "\nreplicates=" << replicates
    << "\nseed=" << seed << '\n';
  return o.str();
}

std::string TrialSimSpec::hash() const { return hex64(fnv1a64(canonical())); }

// ---------------------------------------------------------------------------
// Logit-normal calibration

std::pair<double, double> logit_normal_moments(const LogitNormal& ln) {
  if (ln.sigma == 0) return {expit(ln.mu), 0.0};
  constexpr int kPoints = 801;
  constexpr double kLimit = 8.0;
  const double h = 2 * kLimit / (kPoints - 1);
  double m1 = 0, m2 = 0;
  for (int i = 0; i < kPoints; ++i) {
    double z = -kLimit + i * h;
    double w = (i == 0 || i == kPoints - 1 ? 0.5 : 1.0) * std::exp(-0.5 * z * z);
    double p = expit(ln.mu + ln.sigma * z);
    m1 += w * p;
    m2 += w * p * p;
  }
  const double norm = h / std::sqrt(2 * M_PI);
  m1 *= norm;
  m2 *= norm;
  double var = std::max(0.0, m2 - m1 * m1);
  return {m1, std::sqrt(var) / m1};
}

namespace {

double mu_for_mean(double pi, double sigma) {
  double lo = -40, hi = 40;
  for (int i = 0; i < 100 && hi - lo > 1e-12; ++i) {
    double mid = 0.5 * (lo + hi);
    (logit_normal_moments({mid, sigma}).first < pi ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

} // namespace

LogitNormal calibrate_logit_normal(double pi, double k) {
  if (!(pi > 0 && pi < 1)) throw ConfigError("clinic mean proportion must lie in (0,1)");
  if (!(k >= 0)) throw ConfigError("coefficient of variation must be >= 0");
  if (k == 0) return {logit(pi), 0.0};
  const double kmax = std::sqrt((1 - pi) / pi);
  if (k >= kmax)
    throw ConfigError("k = " + std::to_string(k) + " is infeasible for mean " + std::to_string(pi) +
                      " (proportions would leave (0,1))");
  double lo = 0, hi = 1;
  while (logit_normal_moments({mu_for_mean(pi, hi), hi}).second < k) {
    hi *= 2;
    if (hi > 64) throw ConfigError("k is infeasible for the logit-normal clinic model");
  }
  while (hi - lo > 1e-7) {
    double mid = 0.5 * (lo + hi);
    (logit_normal_moments({mu_for_mean(pi, mid), mid}).second < k ? lo : hi) = mid;
  }
  double sigma = 0.5 * (lo + hi);
  return {mu_for_mean(pi, sigma), sigma};
}

std::vector<double> draw_clinic_proportions(double pi, double k, std::size_t n, std::mt19937_64& rng) {
  auto ln = calibrate_logit_normal(pi, k);
  std::normal_distribution<double> z;
  std::vector<double> out(n);
  for (auto& p : out) p = expit(ln.mu + ln.sigma * z(rng));
  return out;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  auto mix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return mix(master ^ mix(index + 1));
}

SimCalibration calibrate(const TrialSimSpec& spec) {
  return {calibrate_logit_normal(spec.pi0, spec.k), calibrate_logit_normal(spec.pi1, spec.k)};
}

// ---------------------------------------------------------------------------
// Synthetic trial

namespace {

class Draw {
public:
  explicit Draw(std::uint64_t seed) : rng_(seed) {}
  double unif() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }
  bool bern(double p) { return unif() < p; }
  long integer(long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(rng_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng_); }
  template <class T>
  const T& pick(const std::vector<T>& v) { return v[static_cast<std::size_t>(integer(0, long(v.size()) - 1))]; }
  /// Days until an exponential event with the given monthly hazard.
  long exponential_days(double monthly_hazard) {
    if (monthly_hazard <= 0) return std::numeric_limits<long>::max() / 4;
    double u = unif();
    return 1 + static_cast<long>(-std::log1p(-u) / monthly_hazard * kDaysPerMonth);
  }

private:
  std::mt19937_64 rng_;
};

Date add_days(Date d, long n) { return d + Days{n}; }

std::string clinic_name(int i) {
  std::ostringstream o;
  o << 'C' << std::setw(2) << std::setfill('0') << i + 1;
  return o.str();
}

const std::vector<SurveyItem> kSurvey{{"Q1", false}, {"Q2", false}, {"Q3", true},
                                      {"Q4", false}, {"Q5", false}};

} // namespace

SyntheticTrial synth_trial(const TrialSimSpec& spec, std::uint64_t replicate) {
  return synth_trial(spec, replicate, calibrate(spec));
}

SyntheticTrial synth_trial(const TrialSimSpec& spec, std::uint64_t replicate,
                           const SimCalibration& cal) {
  spec.validate();
  Draw rng(derive_seed(spec.seed, replicate));
  SyntheticTrial out;
  out.data.database_closure = spec.database_closure;
  out.data.survey = kSurvey;

  const int n_clinics = 2 * spec.clinics_per_arm;
  const double rho = std::sqrt(spec.prognostic_r2);

  struct ClinicDraw {
    double e = 0, p0 = 0, p1 = 0, bsp = 0, sat = 0;
    int m = 0;
  };
  std::vector<ClinicDraw> cd(n_clinics);
  for (int s = 0; s < spec.clinics_per_arm; ++s) {
    int treated = static_cast<int>(rng.integer(0, 1));
    for (int t = 0; t < 2; ++t) {
      int j = 2 * s + t;
      ClinicRecord c;
      c.clinic_id = clinic_name(j);
      c.stratum_id = "S" + clinic_name(s).substr(1);
      c.country = s < (spec.clinics_per_arm + 1) / 2 ? Country::kenya : Country::uganda;
      c.arm = t == treated ? Arm::intervention : Arm::control;
      double x = rng.normal(), nu = rng.normal();
      auto& d = cd[j];
      d.e = rho * x + std::sqrt(1 - rho * rho) * nu;
      d.p0 = expit(cal.arm0.mu + cal.arm0.sigma * d.e);
      d.p1 = expit(cal.arm1.mu + cal.arm1.sigma * d.e);
      d.bsp = expit(logit(0.75) + 0.8 * x);
      d.m = spec.m_max > spec.m_min ? static_cast<int>(rng.integer(spec.m_min, spec.m_max)) : spec.m;
      d.sat = 3.4 + 0.25 * rng.normal() + (c.arm == Arm::intervention ? spec.satisfaction_shift : 0.0);
      c.baseline_suppression_proportion = std::round(d.bsp * 1000) / 1000;
      c.n_youth_in_care_baseline = static_cast<long>(std::lround(d.m * (2.0 + 3.0 * rng.unif())));
      out.data.clinics.push_back(c);
    }
  }

  const std::vector<std::string> education{"none", "primary", "secondary", "tertiary"};
  const std::vector<std::string> employment{"employed", "unemployed", "student"};
  const std::vector<std::string> marital{"single", "married", "other"};
  const Date cutoff = default_enrollment_cutoff();

  out.truth0.assign(n_clinics, 0.0);
  out.truth1.assign(n_clinics, 0.0);
  for (int j = 0; j < n_clinics; ++j) {
    const auto& clinic = out.data.clinics[j];
    const auto& d = cd[j];
    const bool treated = clinic.arm == Arm::intervention;
    const double pj = treated ? d.p1 : d.p0;
    std::vector<std::size_t> analyzable;
    double t0 = 0, t1 = 0;

    for (int i = 0; i < d.m; ++i) {
      ParticipantRecord r;
      std::ostringstream id;
      id << clinic.clinic_id << '-' << std::setw(3) << std::setfill('0') << i + 1;
      r.participant_id = id.str();
      r.clinic_id = clinic.clinic_id;
      r.country = clinic.country;
      bool late = rng.bern(spec.late_enrollment_rate);
      r.enrollment_date = late ? add_days(cutoff, rng.integer(0, 89))
                               : add_days(spec.enrollment_start, rng.integer(0, spec.enrollment_days - 1));
      if (!late && r.enrollment_date >= cutoff) r.enrollment_date = add_days(cutoff, -1);
      r.age = static_cast<int>(rng.integer(15, 24));
      r.sex = rng.bern(0.7) ? Sex::female : Sex::male;
      r.education = rng.pick(education);
      r.employment = rng.pick(employment);
      r.marital_status = rng.pick(marital);
      r.n_children = r.sex == Sex::female ? static_cast<int>(rng.integer(0, 2)) : 0;
      r.alcohol_use = rng.bern(0.25) ? "any" : "none";
      r.mobility = rng.bern(0.2) ? "mobile" : "stable";
      r.art_regimen_baseline = rng.bern(spec.dtg_baseline_fraction) ? "TDF/3TC/DTG" : "TDF/3TC/EFV";
      bool bs = rng.bern(d.bsp);
      if (!rng.bern(0.03)) r.baseline_suppressed = bs;

      // Care status from ART start and the last visit.
      double u = rng.unif();
      if (u < 0.3) {
        r.art_start_date = add_days(r.enrollment_date, -rng.integer(0, 150));
      } else {
        r.art_start_date = add_days(r.enrollment_date, -rng.integer(200, 2000));
        if (u < 0.8) r.last_visit_date = add_days(r.enrollment_date, -rng.integer(14, 170));
        else if (rng.bern(0.5)) r.last_visit_date = add_days(r.enrollment_date, -rng.integer(200, 400));
      }
      r.baseline_care_status = classify_care_status(*r.art_start_date, r.last_visit_date, r.enrollment_date);

      // Individual success probabilities under each arm.
      double shift = spec.beta_baseline_suppressed * (double(bs) - d.bsp) +
                     spec.beta_age * (double(r.age) - 19.5);
      double s0 = expit(logit(d.p0) + shift), s1 = expit(logit(d.p1) + shift);
      double s = treated ? s1 : s0;

      auto window = endpoint_window(r.enrollment_date, spec.database_closure);
      // Exclusion events (mutually exclusive) then the endpoint draw.
      double ex = rng.unif();
      bool excluded = late;
      if (ex < spec.withdrawal_rate) {
        r.withdrawal_date = add_days(r.enrollment_date, rng.integer(30, 400));
        excluded = true;
      } else if (ex < spec.withdrawal_rate + spec.outmigration_rate) {
        r.outmigration_date = add_days(r.enrollment_date, rng.integer(60, days_between(r.enrollment_date, window.end) - 1));
        excluded = true;
      } else if (ex < spec.withdrawal_rate + spec.outmigration_rate + spec.transfer_rate) {
        r.transfer_date = add_days(r.enrollment_date, rng.integer(60, days_between(r.enrollment_date, window.end) - 1));
        excluded = true;
      }
      if (!excluded) {
        analyzable.push_back(out.data.participants.size());
        t0 += s0;
        t1 += s1;
      }

      bool success = spec.outcome_mode == OutcomeMode::random ? rng.bern(s) : false;
      double ft = rng.unif();
      const long span = days_between(window.start, window.end);
      auto in_window = [&](long offset_from_mark) {
        Date dt = add_days(window.two_year_mark, offset_from_mark);
        return std::clamp(dt, window.start, window.end);
      };
      r.viral_loads.push_back({add_days(r.enrollment_date, rng.integer(150, 250)),
                               rng.bern(0.7) ? 30.0 + rng.integer(0, 300) : 1000.0 + rng.integer(0, 50000)});
      Date alive_until = spec.database_closure;
      if (success) {
        double copies = rng.bern(0.6) ? double(rng.integer(20, 49)) : double(rng.integer(50, 399));
        r.viral_loads.push_back({in_window(rng.integer(-60, 90)), copies});
      } else if (ft < spec.died_fraction) {
        r.death_date = add_days(r.enrollment_date, rng.integer(30, days_between(r.enrollment_date, window.start) - 1));
        alive_until = *r.death_date;
      } else if (ft < spec.died_fraction + spec.missing_fraction) {
        // No endpoint viral load.
      } else {
        r.viral_loads.push_back({in_window(rng.integer(-60, 90)), double(rng.integer(400, 200000))});
      }
      (void)span;

      // Clinic contacts with an optional lapse.
      double lapse_p = treated ? spec.lapse_probability_intervention : spec.lapse_probability_control;
      Date last = std::min(alive_until, window.end);
      Date cur = r.enrollment_date;
      bool lapse = rng.bern(lapse_p);
      long lapse_at = rng.integer(60, 500);
      while (true) {
        long gap = rng.integer(30, 110);
        if (lapse && days_between(r.enrollment_date, cur) >= lapse_at) {
          gap = rng.integer(121, 240);
          lapse = false;
        }
        cur = add_days(cur, gap);
        if (cur > last) break;
        r.contact_dates.push_back(cur);
      }

      if (!r.on_dtg_baseline()) {
        double hz = spec.dtg_switch_monthly_hazard * (treated ? spec.dtg_switch_hazard_ratio : 1.0);
        Date sw = add_days(r.enrollment_date, rng.exponential_days(hz));
        if (sw < alive_until) r.dtg_switch_date = sw;
      }
      Date sl = add_days(r.enrollment_date, rng.exponential_days(spec.second_line_monthly_hazard));
      if (sl < alive_until) r.second_line_date = sl;
      if (r.sex == Sex::female && rng.bern(spec.birth_probability))
        r.birth_dates.push_back(add_days(r.enrollment_date, rng.integer(60, days_between(r.enrollment_date, window.end))));
      if (!r.death_date && rng.bern(spec.survey_response_rate)) {
        for (const auto& item : kSurvey) {
          double v = d.sat + 0.9 * rng.normal();
          int score = static_cast<int>(std::clamp(std::lround(v), 1L, 5L));
          if (item.reverse_coded) score = 6 - score;
          r.satisfaction.push_back({item.question_id, score});
        }
      }
      out.data.participants.push_back(std::move(r));
    }

    if (spec.outcome_mode == OutcomeMode::deterministic) {
      // Exactly round(p * n) successes among analyzable participants.
      long want = std::lround(pj * double(analyzable.size()));
      for (std::size_t a = 0; a < analyzable.size(); ++a) {
        auto& r = out.data.participants[analyzable[a]];
        auto window = endpoint_window(r.enrollment_date, spec.database_closure);
        r.death_date.reset();
        r.viral_loads.resize(1);
        r.viral_loads.push_back({window.two_year_mark, long(a) < want ? 100.0 : 5000.0});
      }
      // The realized count is the truth: there is no outcome noise left.
      t0 = double(std::lround(d.p0 * double(analyzable.size())));
      t1 = double(std::lround(d.p1 * double(analyzable.size())));
    }
    if (!analyzable.empty()) {
      out.truth0[j] = t0 / double(analyzable.size());
      out.truth1[j] = t1 / double(analyzable.size());
    }
  }
  out.psi0 = std::accumulate(out.truth0.begin(), out.truth0.end(), 0.0) / n_clinics;
  out.psi1 = std::accumulate(out.truth1.begin(), out.truth1.end(), 0.0) / n_clinics;
  return out;
}

// ---------------------------------------------------------------------------
// Operating characteristics

SimAnalysisConfig SimAnalysisConfig::defaults() {
  SimAnalysisConfig c;
  for (const char* name : {"primary", "sens_single_stage", "primary_unadjusted"}) {
    auto p = preset(name);
    p.learners = LearnerConfig::glm_only();
    c.estimators.push_back({name, p});
  }
  return c;
}

SimAnalysisConfig SimAnalysisConfig::from_config(const KeyValueConfig& cfg) {
  SimAnalysisConfig c = defaults();
  if (cfg.has("estimators")) {
    c.estimators.clear();
    for (const auto& name : cfg.get_list("estimators")) {
      auto p = preset(name);
      p.learners = LearnerConfig::glm_only();
      c.estimators.push_back({name, p});
    }
  }
  if (cfg.has("learners")) {
    LearnerConfig l;
    l.candidates.clear();
    for (const auto& k : cfg.get_list("learners")) l.candidates.push_back({parse_learner_kind(k)});
    for (auto& e : c.estimators) e.plan.learners = l;
  }
  c.alpha = cfg.get_double("alpha", c.alpha);
  return c;
}

namespace {

std::vector<ReplicateRecord> run_replicate(const TrialSimSpec& spec, const SimCalibration& cal,
                                           const SimAnalysisConfig& analysis, std::uint64_t rep) {
  std::vector<ReplicateRecord> recs;
  SyntheticTrial trial;
  std::string synth_error;
  try {
    trial = synth_trial(spec, rep, cal);
  } catch (const std::exception& e) {
    synth_error = e.what();
  }
  for (const auto& est : analysis.estimators) {
    ReplicateRecord r;
    r.replicate = rep;
    r.estimator = est.label;
    bool ratio = est.plan.scale == Scale::risk_ratio;
    r.truth = ratio ? trial.true_rr() : trial.true_rd();
    if (!synth_error.empty()) {
      r.note = synth_error;
      recs.push_back(r);
      continue;
    }
    try {
      auto res = run_plan(est.plan, trial.data, spec.hash() + ":" + std::to_string(rep));
      if (!res.estimable) {
        r.note = res.note;
      } else {
        r.ok = true;
        r.estimate = res.effect.effect;
        r.ci = res.effect.ci;
        r.p_one_sided = res.effect.p_one_sided;
        r.selected = res.selected;
      }
    } catch (const std::exception& e) {
      r.note = e.what();
    }
    recs.push_back(r);
  }
  return recs;
}

OperatingCharacteristics summarize(const TrialSimSpec& spec, const SimAnalysisConfig& analysis,
                                   std::vector<std::vector<ReplicateRecord>> per_rep) {
  OperatingCharacteristics oc;
  oc.spec_hash = spec.hash();
  oc.replicates = spec.replicates;
  double truth_sum = 0;
  for (auto& v : per_rep) {
    if (!v.empty()) truth_sum += v.front().truth;
    for (auto& r : v) oc.records.push_back(std::move(r));
  }
  oc.mean_truth = truth_sum / double(per_rep.size());

  for (std::size_t e = 0; e < analysis.estimators.size(); ++e) {
    EstimatorSummary s;
    s.estimator = analysis.estimators[e].label;
    bool ratio = analysis.estimators[e].plan.scale == Scale::risk_ratio;
    std::vector<double> est, err;
    long reject = 0, cover = 0;
    for (std::size_t i = e; i < oc.records.size(); i += analysis.estimators.size()) {
      const auto& r = oc.records[i];
      if (!r.ok) {
        ++s.failures;
        continue;
      }
      double a = ratio ? std::log(r.estimate) : r.estimate;
      double t = ratio ? std::log(r.truth) : r.truth;
      est.push_back(a);
      err.push_back(a - t);
      reject += r.p_one_sided < analysis.alpha;
      cover += r.ci.lower <= r.truth && r.truth <= r.ci.upper;
      s.selections[r.selected]++;
    }
    s.replicates = static_cast<long>(est.size());
    if (!est.empty()) {
      const double n = double(est.size());
      s.rejection_rate = reject / n;
      s.rejection_mcse = std::sqrt(s.rejection_rate * (1 - s.rejection_rate) / n);
      s.coverage = cover / n;
      s.coverage_mcse = std::sqrt(s.coverage * (1 - s.coverage) / n);
      s.mean_estimate = std::accumulate(est.begin(), est.end(), 0.0) / n;
      s.bias = std::accumulate(err.begin(), err.end(), 0.0) / n;
      double ss = 0, se = 0;
      for (double v : est) ss += (v - s.mean_estimate) * (v - s.mean_estimate);
      for (double v : err) se += (v - s.bias) * (v - s.bias);
      s.variance = n > 1 ? ss / (n - 1) : 0.0;
      s.bias_mcse = n > 1 ? std::sqrt(se / (n - 1) / n) : 0.0;
    }
    oc.summaries.push_back(std::move(s));
  }
  return oc;
}

} // namespace

OperatingCharacteristics operating_characteristics_serial(const TrialSimSpec& spec,
                                                          const SimAnalysisConfig& analysis) {
  spec.validate();
  auto cal = calibrate(spec);
  std::vector<std::vector<ReplicateRecord>> per_rep(spec.replicates);
  for (int r = 0; r < spec.replicates; ++r) per_rep[r] = run_replicate(spec, cal, analysis, r);
  return summarize(spec, analysis, std::move(per_rep));
}

OperatingCharacteristics operating_characteristics(const TrialSimSpec& spec,
                                                   const SimAnalysisConfig& analysis) {
  spec.validate();
  auto cal = calibrate(spec);
  std::vector<std::vector<ReplicateRecord>> per_rep(spec.replicates);
  const long n = spec.replicates;
#pragma omp parallel for schedule(dynamic)
  for (long r = 0; r < n; ++r) per_rep[r] = run_replicate(spec, cal, analysis, r);
  return summarize(spec, analysis, std::move(per_rep));
}

} // namespace crt
