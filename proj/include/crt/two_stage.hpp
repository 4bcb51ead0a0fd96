#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crt/inference.hpp"
#include "crt/tmle.hpp"
#include "crt/trial_data.hpp"

namespace crt {

enum class Stage1Method { empirical, tmle_missing, tmle_sequential };
enum class WeightScheme { equal, size };

std::string_view to_string(Stage1Method m);
std::string_view to_string(WeightScheme w);
Stage1Method parse_stage1_method(std::string_view s);
WeightScheme parse_weight_scheme(std::string_view s);

/// Participant-level inputs for one clinic.
struct ClusterSample {
  std::string clinic_id;
  Arm arm = Arm::control;
  Covariates w;            // stage-1 adjustment covariates
  std::vector<int> m;      // post-baseline outmigration (sequential method only)
  std::vector<int> delta;  // 1 = endpoint observed
  std::vector<double> y;
};

struct ClinicEndpoint {
  std::string clinic_id;
  Arm arm = Arm::control;
  double y = 0.0;
  long n_included = 0;
  std::optional<double> se;
  std::optional<Interval> ci;
  double alpha = 1.0;
};

struct Stage1Options {
  Stage1Method method = Stage1Method::empirical;
  TmleOptions tmle;
};

/// One endpoint per clinic, computed in parallel across clinics.
std::vector<ClinicEndpoint> stage1_endpoints(std::span<const ClusterSample> clinics,
                                             const Stage1Options& options);
/// Serial reference implementation with identical results.
std::vector<ClinicEndpoint> stage1_endpoints_serial(std::span<const ClusterSample> clinics,
                                                    const Stage1Options& options);
ClinicEndpoint stage1_endpoint(const ClusterSample& clinic, const Stage1Options& options);

/// Clinic-level adjustment candidates.
inline constexpr std::string_view kAdjNone = "none";
inline constexpr std::string_view kAdjYouth = "n_youth_in_care_baseline";
inline constexpr std::string_view kAdjSuppression = "baseline_suppression_proportion";
inline constexpr std::string_view kAdjBoth = "both";

/// The default candidate list; `include_both` adds the two-covariate set.
std::vector<std::string> default_clinic_candidates(bool include_both = false);

struct Stage2Options {
  WeightScheme weights = WeightScheme::equal;
  Scale scale = Scale::risk_ratio;
  Direction direction = Direction::increase;
  /// Range of the clinic endpoint; mapped to [0,1] for the fluctuation.
  double y_min = 0.0;
  double y_max = 1.0;
};

struct PrespecResult {
  std::string selected = "none";
  std::vector<std::string> candidates;
  std::vector<double> cv_variance;  // NaN for skipped candidates
  std::vector<std::string> diagnostics;
};

/// Leave-one-clinic-out choice of the stage-2 adjustment minimizing the
/// cross-validated influence-curve variance. Ties go to "none", then to the
/// earliest listed candidate.
PrespecResult adaptive_prespec(std::span<const ClinicEndpoint> endpoints,
                               std::span<const ClinicRecord> clinics,
                               std::span<const std::string> candidates,
                               const Stage2Options& options);

/// Cluster-level TMLE contrasting arms, with df = clinics - 2.
EffectEstimate stage2_effect(std::span<const ClinicEndpoint> endpoints,
                             std::span<const ClinicRecord> clinics, std::string_view adjustment,
                             const Stage2Options& options);

struct TwoStageOptions {
  Stage1Options stage1;
  Stage2Options stage2;
  bool adaptive = true;
  std::vector<std::string> candidates = default_clinic_candidates();
  std::string fixed_adjustment = "none";  // used when adaptive is off
  bool parallel = true;
};

struct TwoStageResult {
  std::vector<ClinicEndpoint> stage1;
  PrespecResult selection;
  EffectEstimate effect;
};

TwoStageResult two_stage_estimate(std::span<const ClusterSample> clinics,
                                  std::span<const ClinicRecord> clinic_records,
                                  const TwoStageOptions& options);

/// Runs stage 2 (with selection) on clinic endpoints computed elsewhere.
TwoStageResult two_stage_from_endpoints(std::vector<ClinicEndpoint> endpoints,
                                        std::span<const ClinicRecord> clinic_records,
                                        const TwoStageOptions& options);

} // namespace crt
