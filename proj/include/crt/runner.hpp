#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "crt/config.hpp"
#include "crt/survival.hpp"
#include "crt/tmle.hpp"
#include "crt/trial_data.hpp"
#include "crt/two_stage.hpp"

namespace crt {

enum class EndpointKind {
  viral_suppression,
  mortality,
  transfer,
  engaged_2y,
  retained,
  lapse,
  dtg_switch,
  second_line_switch,
  joint_switch_and_suppression,
  satisfaction_mean,
};
std::string_view to_string(EndpointKind k);
EndpointKind parse_endpoint_kind(std::string_view s);
bool is_time_to_event(EndpointKind k);

struct EndpointSpec {
  EndpointKind kind = EndpointKind::viral_suppression;
  double horizon_months = 24.0;       // time-to-event kinds
  std::optional<Direction> direction; // default from kind
  std::optional<Sidedness> sided;     // default: one-sided toward the benefit
  std::string item = "composite";     // satisfaction question id or "composite"

  Direction benefit() const;
  /// Sidedness of the reported primary p-value.
  Sidedness test() const;
};

enum class Estimator { two_stage, single_stage };
std::string_view to_string(Estimator e);
Estimator parse_estimator(std::string_view s);

/// Baseline subgroup: country, sex, age_group, baseline_care_status,
/// baseline_art_regimen, baseline_suppression.
struct Subgroup {
  std::string variable;
  std::string level;
};

/// Post-baseline stratifier: dtg_switch, second_line, engaged_2y,
/// postpartum_6m, postpartum_12m; level "yes" or "no".
struct Stratum {
  std::string variable;
  std::string level;
};

struct AnalysisPlan {
  std::string name = "custom";
  EndpointSpec endpoint;
  PopulationSpec population;
  Estimator estimator = Estimator::two_stage;
  Stage1Method stage1 = Stage1Method::empirical;
  std::vector<std::string> stage1_adjustment = {"age", "sex", "baseline_suppressed"};
  LearnerConfig learners;
  bool adaptive = true;
  bool include_both = false;
  std::string fixed_adjustment = "none";
  WeightScheme weights = WeightScheme::equal;
  Scale scale = Scale::risk_ratio;
  std::vector<std::string> individual_candidates = {"age", "sex", "baseline_suppressed"};
  std::optional<Subgroup> subgroup;
  std::optional<Stratum> stratum;
  bool exclude_dtg_baseline = false;
  std::vector<std::string> exclude_clinics;
  std::uint64_t seed = 20190601;

  static AnalysisPlan from_config(const KeyValueConfig& cfg);
  /// Throws ConfigError on inconsistent settings.
  void validate() const;
  std::string canonical() const;
  std::string hash() const;
};

/// Keys understood by AnalysisPlan::from_config.
const std::vector<std::string>& plan_keys();

std::vector<std::string> preset_names();
/// Throws ConfigError for an unknown name.
AnalysisPlan preset(std::string_view name);

struct Provenance {
  std::string plan;
  std::string spec_hash;
  std::uint64_t seed = 0;
  std::string data_hash;
};

struct PlanResult {
  Provenance provenance;
  EndpointSpec endpoint;
  Estimator estimator = Estimator::two_stage;
  bool estimable = true;
  std::string note;
  EffectEstimate effect;
  std::vector<ClinicEndpoint> stage1;
  std::vector<std::string> candidates;
  std::vector<double> cv_variance;
  std::string selected = "none";
  std::vector<std::string> diagnostics;
  std::size_t n_rows = 0;
  std::size_t n_excluded_endpoint = 0;  // rows without a usable endpoint value (e.g. no survey responses)
};

/// Order-independent hash of the participant and clinic tables.
std::string data_hash(const TrialData& data);

PlanResult run_plan(const AnalysisPlan& plan, const TrialData& data);
/// Same, with a caller-supplied data key (e.g. simulation spec hash and replicate).
PlanResult run_plan(const AnalysisPlan& plan, const TrialData& data, const std::string& data_key);

// ---------------------------------------------------------------------------
// Predictor analyses

enum class PredictorOutcome { failure, nonsuppression_or_death, suppression };
std::string_view to_string(PredictorOutcome o);
PredictorOutcome parse_predictor_outcome(std::string_view s);

/// Binary predictors: occupation, marital_status, parent, alcohol, mobility.
const std::vector<std::string>& default_predictors();

struct PredictorRow {
  std::string arm;
  std::string predictor;
  std::string outcome;
  bool adjusted = false;
  bool estimable = true;
  std::string note;
  double rr = 0.0;
  Interval ci;
  double p_two_sided = 1.0;
  double psi1 = 0.0, psi0 = 0.0;
  long n = 0;
};

struct PredictorOptions {
  PopulationSpec population;
  std::vector<std::string> predictors = default_predictors();
  std::vector<std::string> adjustment = {"country", "sex", "age", "baseline_care_status"};
  PredictorOutcome outcome = PredictorOutcome::failure;
  bool exclude_missing = false;
  LearnerConfig learners = LearnerConfig::glm_only();
};

std::vector<PredictorRow> run_predictor_analysis(const TrialData& data, Arm arm,
                                                 const PredictorOptions& options);

// ---------------------------------------------------------------------------
// DTG roll-out

struct CountRow {
  std::string group;
  std::string measure;
  std::size_t count = 0;
  std::size_t total = 0;
  double proportion = 0.0;
};

struct KMTable {
  std::string group;
  KMCurve curve;
};

struct LabeledResult {
  std::string label;
  PlanResult result;
};

struct DtgSuite {
  std::string population;
  std::string note;
  std::vector<CountRow> descriptives;
  std::vector<KMTable> km;
  std::vector<LabeledResult> effects;
};

DtgSuite run_dtg_suite(const TrialData& data, const PopulationSpec& population);

// ---------------------------------------------------------------------------
// Satisfaction

struct SatisfactionResult {
  std::vector<LabeledResult> effects;  // composite first, then each item
  std::size_t n_no_response = 0;
};

SatisfactionResult run_satisfaction(const TrialData& data,
                                    const PopulationSpec& population = PopulationSpec::primary());

/// Kaplan-Meier curves pooled over clinics for one event kind, by `grouping`
/// ("arm", "sex", "clinic" or "overall").
std::vector<KMTable> km_by_group(const AnalysisSet& set, std::span<const AnalysisRow* const> rows,
                                 EventKind kind, std::string_view grouping);

} // namespace crt
