#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "crt/config.hpp"
#include "crt/runner.hpp"
#include "crt/trial_data.hpp"

namespace crt {

enum class OutcomeMode { random, deterministic };

struct TrialSimSpec {
  int clinics_per_arm = 14;
  int m = 50;          // participants per clinic (fixed unless m_max > m_min)
  int m_min = 0;
  int m_max = 0;
  double pi0 = 0.65;   // mean clinic success probability, control
  double pi1 = 0.65;   // mean clinic success probability, intervention
  double k = 0.175;    // between-clinic coefficient of variation (both arms)
  /// Share of the between-clinic logit variance explained by the observed
  /// clinic covariate baseline_suppression_proportion.
  double prognostic_r2 = 0.0;
  double beta_baseline_suppressed = 0.8;  // individual logit effects
  double beta_age = -0.1;                 // per year of age
  OutcomeMode outcome_mode = OutcomeMode::random;
  // Failure composition: share of failures that died / lack an endpoint VL.
  double died_fraction = 0.05;
  double missing_fraction = 0.3;
  double withdrawal_rate = 0.0;
  double outmigration_rate = 0.0;
  double transfer_rate = 0.0;
  double late_enrollment_rate = 0.0;
  double dtg_baseline_fraction = 0.3;
  double dtg_switch_monthly_hazard = 0.04;
  double dtg_switch_hazard_ratio = 1.0;  // intervention vs control
  double second_line_monthly_hazard = 0.003;
  double lapse_probability_control = 0.3;
  double lapse_probability_intervention = 0.2;
  double birth_probability = 0.15;
  double survey_response_rate = 0.7;
  double satisfaction_shift = 0.0;       // intervention shift on the 1-5 scale
  Date enrollment_start = make_date(2019, 6, 1);
  int enrollment_days = 180;
  Date database_closure = default_database_closure();
  int replicates = 2000;
  std::uint64_t seed = 7;

  static TrialSimSpec from_config(const KeyValueConfig& cfg);
  void validate() const;
  std::string canonical() const;
  std::string hash() const;
};

const std::vector<std::string>& sim_spec_keys();

struct LogitNormal {
  double mu = 0.0;
  double sigma = 0.0;
};

/// E[expit(mu + sigma Z)] and its coefficient of variation, Z ~ N(0,1).
std::pair<double, double> logit_normal_moments(const LogitNormal& ln);

/// (mu, sigma) with mean `pi` and coefficient of variation `k`, by nested
/// bisection. Throws ConfigError when no such distribution exists.
LogitNormal calibrate_logit_normal(double pi, double k);

/// n clinic proportions from the calibrated distribution.
std::vector<double> draw_clinic_proportions(double pi, double k, std::size_t n, std::mt19937_64& rng);

/// splitmix64-derived per-replicate seed.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

struct SimCalibration {
  LogitNormal arm0, arm1;
};
SimCalibration calibrate(const TrialSimSpec& spec);

struct SyntheticTrial {
  TrialData data;
  /// Expected clinic success proportion under each arm, over analyzable participants.
  std::vector<double> truth1, truth0;
  double psi1 = 0.0, psi0 = 0.0;  // equal-weight means of the above
  double true_rr() const { return psi1 / psi0; }
  double true_rd() const { return psi1 - psi0; }
};

SyntheticTrial synth_trial(const TrialSimSpec& spec, std::uint64_t replicate);
SyntheticTrial synth_trial(const TrialSimSpec& spec, std::uint64_t replicate,
                           const SimCalibration& calibration);

struct SimEstimator {
  std::string label;
  AnalysisPlan plan;
};

struct SimAnalysisConfig {
  std::vector<SimEstimator> estimators;
  double alpha = 0.05;

  /// primary (two-stage adaptive), sens_single_stage (glm working model) and
  /// primary_unadjusted.
  static SimAnalysisConfig defaults();
  /// `estimators` lists preset names; `learners` overrides every plan's learners.
  static SimAnalysisConfig from_config(const KeyValueConfig& cfg);
};

struct ReplicateRecord {
  std::uint64_t replicate = 0;
  std::string estimator;
  bool ok = false;
  std::string note;
  double truth = 0.0;  // true RR (or RD on the difference scale)
  double estimate = 0.0;
  Interval ci;
  double p_one_sided = 1.0;
  std::string selected;
};

struct EstimatorSummary {
  std::string estimator;
  long replicates = 0;
  long failures = 0;
  double rejection_rate = 0.0, rejection_mcse = 0.0;
  double mean_estimate = 0.0;           // on the analysis scale (log for ratios)
  double bias = 0.0, bias_mcse = 0.0;   // analysis scale
  double coverage = 0.0, coverage_mcse = 0.0;
  double variance = 0.0;                // Monte Carlo variance on the analysis scale
  std::map<std::string, long> selections;
};

struct OperatingCharacteristics {
  std::string spec_hash;
  long replicates = 0;
  double mean_truth = 0.0;
  std::vector<EstimatorSummary> summaries;
  std::vector<ReplicateRecord> records;  // replicate-major, estimator order within
};

/// Replicates run in parallel with per-replicate seeds; results do not depend
/// on the thread count.
OperatingCharacteristics operating_characteristics(const TrialSimSpec& spec,
                                                   const SimAnalysisConfig& analysis);
/// Serial reference implementation.
OperatingCharacteristics operating_characteristics_serial(const TrialSimSpec& spec,
                                                          const SimAnalysisConfig& analysis);

} // namespace crt
