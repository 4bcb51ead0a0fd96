#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace crt {

enum class Scale { risk_ratio, risk_difference, mean_difference };
enum class Sidedness { one_upper, one_lower, two };
/// Direction in which the intervention is expected to move the endpoint.
enum class Direction { increase, decrease };

std::string_view to_string(Scale s);
std::string_view to_string(Sidedness s);
std::string_view to_string(Direction d);
Scale parse_scale(std::string_view s);
Sidedness parse_sidedness(std::string_view s);
Direction parse_direction(std::string_view s);

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

struct EffectEstimate {
  double psi1 = 0.0;
  double psi0 = 0.0;
  double psi1_se = 0.0;
  double psi0_se = 0.0;
  Interval psi1_ci;
  Interval psi0_ci;
  Scale scale = Scale::risk_ratio;
  double effect = 0.0;    // ratio or difference on the natural scale
  double se = 0.0;        // on the analysis scale (log for ratios)
  double t_stat = 0.0;
  int df = 1;
  Interval ci;            // natural scale
  Direction direction = Direction::increase;
  double p_one_sided = 1.0;  // small values favor `direction`
  double p_two_sided = 1.0;
  bool degenerate = false;   // zero standard error
  std::string adjustment = "none";
  std::string weights = "equal";
  int n_clusters = 0;
  long n_participants = 0;
};

double normal_cdf(double z);
double normal_quantile(double p);

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
double incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double df);
double student_t_quantile(double p, double df);

struct IcSe {
  double se = 0.0;
  bool degenerate = false;
};

/// Sample standard deviation over sqrt(n). Needs >= 2 values.
IcSe ic_se(std::span<const double> ic);

struct TResult {
  Interval ci;
  double p = 1.0;
  double t_stat = 0.0;
  bool degenerate = false;
};

/// t-based CI around `estimate` and the p-value of H0: value = 0 for the
/// requested sidedness. With se == 0 the p-value collapses to 0 or 1.
TResult t_inference(double estimate, double se, int df, Sidedness sided, double level = 0.95);

struct ScaleTransform {
  double effect = 0.0;           // natural scale
  double analysis_estimate = 0;  // log(ratio) or difference
  std::vector<double> ic;        // influence curve on the analysis scale
};

/// Difference: ic1 - ic0. Ratio: log(psi1/psi0) with delta-method ic1/psi1 - ic0/psi0.
/// Throws EstimationError when psi0 == 0 on the ratio scale.
ScaleTransform transform_scale(double psi1, double psi0, std::span<const double> ic1,
                               std::span<const double> ic0, Scale scale);

/// Fills effect, se, t, CI and p-values from arm estimates and per-unit
/// influence curves (df = units - 2).
EffectEstimate make_effect(double psi1, double psi0, std::span<const double> ic1,
                           std::span<const double> ic0, Scale scale, Direction direction,
                           int df);

} // namespace crt
