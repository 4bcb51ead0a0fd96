#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crt/covariates.hpp"
#include "crt/inference.hpp"
#include "crt/learners.hpp"

namespace crt {

inline constexpr double kPropensityLower = 0.025;
inline constexpr double kPropensityUpper = 0.975;

struct LearnerConfig {
  std::vector<LearnerSpec> candidates = {{LearnerKind::glm}, {LearnerKind::gam}, {LearnerKind::mean}};
  int folds = 10;
  std::uint64_t seed = 20190601;
  EnsembleMode mode = EnsembleMode::convex;

  /// Only a glm candidate, no cross-validation.
  static LearnerConfig glm_only();
};

/// A single candidate is fitted directly; otherwise a super learner.
EnsembleModel fit_ensemble(const LearnerConfig& config, const Covariates& x,
                           std::span<const double> y);

struct TmleOptions {
  LearnerConfig outcome;
  LearnerConfig missingness;
  double g_lower = kPropensityLower;
  double g_upper = kPropensityUpper;
  /// Outcome range; values are mapped to [0,1] before fitting and back afterwards.
  double y_min = 0.0;
  double y_max = 1.0;
};

struct TmleFit {
  double estimate = 0.0;
  std::vector<double> ic;  // one per row, mean zero
  double epsilon = 0.0;
  double g_min = 1.0;
  double g_max = 1.0;
  std::size_t n_truncated = 0;  // propensities moved to a bound
};

/// E[Y] under missingness: delta[i] = 1 when y[i] is observed.
TmleFit tmle_mean_missing(const Covariates& w, std::span<const int> delta,
                          std::span<const double> y, const TmleOptions& options = {});

/// Two time-point sequential TMLE. M is a post-baseline indicator (outmigration)
/// between W and measurement. With `interactions` the inner regression also
/// includes M x W products.
TmleFit tmle_sequential(const Covariates& w, std::span<const int> m, std::span<const int> delta,
                        std::span<const double> y, const TmleOptions& options = {},
                        bool interactions = true);

struct IndividualData {
  std::vector<int> cluster;  // cluster index per row
  Covariates w;              // adjustment set (may be empty)
  std::vector<int> z;        // exposure / arm
  std::vector<int> delta;    // 1 = outcome observed
  std::vector<double> y;
};

struct IndividualOptions {
  TmleOptions tmle;
  Scale scale = Scale::risk_ratio;
  Direction direction = Direction::increase;
  /// Model the measurement mechanism; otherwise rows with delta = 0 are dropped.
  bool adjust_missing = false;
  /// Known exposure probability; empty means estimate P(Z=1|W) (non-randomized exposure).
  std::optional<double> g_z = 0.5;
};

struct IndividualFit {
  EffectEstimate effect;
  TmleFit arm1, arm0;  // per-row ICs before cluster aggregation
  std::vector<double> cluster_ic1, cluster_ic0;
};

/// Pooled individual-level TMLE of E[Y(1)] and E[Y(0)] with cluster-summed
/// influence curves and df = clusters - 2.
IndividualFit tmle_effect_individual(const IndividualData& data, const IndividualOptions& options);

/// Sums row-level ICs within cluster and scales by J/n so the cluster-level
/// variance estimates the variance of the pooled mean.
std::vector<double> aggregate_ic(std::span<const double> ic, std::span<const int> cluster,
                                 int n_clusters);

struct SelectionResult {
  std::string selected = "none";
  std::vector<std::string> candidates;
  std::vector<double> cv_variance;  // parallel to candidates; NaN when skipped
  std::vector<std::string> diagnostics;
};

/// Leave-one-cluster-out choice of the single-stage adjustment covariate.
/// `pool` holds every candidate column; "none" is always considered.
SelectionResult select_individual_adjustment(const IndividualData& data, const Covariates& pool,
                                             std::span<const std::string> candidates,
                                             const IndividualOptions& options);

} // namespace crt
