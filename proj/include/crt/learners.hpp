#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crt/covariates.hpp"

namespace crt {

/// Bounds applied to every learner prediction.
inline constexpr double kPredictionLower = 0.005;
inline constexpr double kPredictionUpper = 0.995;

double expit(double x);
double logit(double p);
inline double bound_prediction(double p) {
  return p < kPredictionLower ? kPredictionLower : (p > kPredictionUpper ? kPredictionUpper : p);
}

enum class LearnerKind { glm, gam, mean };
std::string_view to_string(LearnerKind k);
LearnerKind parse_learner_kind(std::string_view s);

struct LearnerSpec {
  LearnerKind kind = LearnerKind::glm;
  double ridge = 0.0;  // glm only
  int spline_df = 4;   // gam only
};

struct FitInfo {
  int iterations = 0;
  bool converged = true;
  bool ridge_fallback = false;
  bool knots_reduced = false;
  bool intercept_only = false;
  std::vector<std::string> dropped_columns;
};

/// How one design column is derived from an input covariate.
struct DesignColumn {
  std::string name;
  std::string source;
  int spline_term = -1;  // -1: the covariate itself; k >= 0: k-th truncated natural-spline term
  double center = 0.0;
  double scale = 1.0;
};

struct DesignMatrix {
  Eigen::MatrixXd x;  // first column is the intercept
  std::vector<std::string> names;
};

/// A fitted prediction function. Immutable after construction.
class FittedLearner {
public:
  LearnerKind kind = LearnerKind::mean;
  FitInfo info;

  /// Predicted probabilities bounded to [kPredictionLower, kPredictionUpper].
  std::vector<double> predict(const Covariates& x) const;
  DesignMatrix design(const Covariates& x) const;

  const Eigen::VectorXd& coefficients() const { return beta_; }
  const std::vector<DesignColumn>& columns() const { return columns_; }

  static FittedLearner make(LearnerKind kind, FitInfo info, std::vector<DesignColumn> columns,
                            std::vector<std::vector<double>> knots, Eigen::VectorXd beta,
                            double mean);

private:
  std::vector<DesignColumn> columns_;
  std::vector<std::vector<double>> knots_;  // parallel to columns_ (empty unless spline term)
  Eigen::VectorXd beta_;
  double mean_ = 0.5;
};

/// Logistic regression by iteratively reweighted least squares. Non-intercept
/// coefficients carry an L2 penalty `ridge`. On separation or a singular
/// Hessian the fit is repeated with ridge 1e-4 and `info.ridge_fallback` set.
/// Outcomes may be fractional (quasi-binomial).
FittedLearner fit_glm(const Covariates& x, std::span<const double> y, double ridge = 0.0,
                      std::span<const double> weights = {});

/// Natural cubic spline expansion of every numeric covariate (spline_df + 1
/// knots at quantiles), followed by a ridge-1e-4 logistic fit. Identical to
/// fit_glm when no numeric covariate is present.
FittedLearner fit_gam(const Covariates& x, std::span<const double> y, int spline_df = 4);

FittedLearner fit_mean(std::span<const double> y);

FittedLearner fit_learner(const LearnerSpec& spec, const Covariates& x, std::span<const double> y);

/// Natural cubic spline terms beyond the linear one at value `v` for sorted knots.
std::vector<double> natural_spline_terms(double v, std::span<const double> knots);

/// Mean negative Bernoulli log-likelihood.
double bernoulli_risk(std::span<const double> y, std::span<const double> p);

enum class EnsembleMode { convex, discrete };

struct EnsembleModel {
  std::vector<LearnerSpec> specs;
  std::vector<FittedLearner> fits;
  std::vector<double> weights;
  std::vector<double> cv_risk;
  double ensemble_cv_risk = 0.0;
  int folds = 0;
  std::uint64_t seed = 0;

  std::vector<double> predict(const Covariates& x) const;
};

/// Fold labels 0..V-1, balanced within the y >= 0.5 and y < 0.5 strata.
std::vector<int> stratified_folds(std::span<const double> y, int folds, std::uint64_t seed);

/// Minimizes the Bernoulli risk of a convex combination of the columns of
/// `predictions` by pairwise coordinate descent on the simplex, starting at
/// the best vertex.
std::vector<double> simplex_weights(const Eigen::MatrixXd& predictions, std::span<const double> y,
                                    double tolerance = 1e-8);

/// V-fold cross-validated ensemble. Falls back to leave-one-out when n < V.
EnsembleModel super_learner(const Covariates& x, std::span<const double> y,
                            std::span<const LearnerSpec> candidates, int folds,
                            std::uint64_t seed, EnsembleMode mode = EnsembleMode::convex);

/// Logistic regression of y on H with a fixed offset and no intercept:
/// solves sum_i w_i H_i (y_i - expit(offset_i + H_i eps)) = 0 by Newton's method.
Eigen::VectorXd fit_offset_logistic(const Eigen::MatrixXd& h, std::span<const double> offset,
                                    std::span<const double> y, std::span<const double> weights = {});

} // namespace crt
