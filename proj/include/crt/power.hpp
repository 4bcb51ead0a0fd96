#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "crt/inference.hpp"

namespace crt {

enum class Correction { none, plus_one };
std::string_view to_string(Correction c);
Correction parse_correction(std::string_view s);

struct PowerParams {
  double pi0 = 0.65;
  double relative_effect = 1.24;  // pi1 = pi0 * relative_effect, capped at 1
  double m = 50;                  // participants per clinic
  double k = 0.175;               // between-clinic coefficient of variation
  double alpha = 0.05;
  double power = 0.80;
  Sidedness sided = Sidedness::two;
  Correction correction = Correction::none;

  double pi1() const;
  /// Throws ConfigError when the parameters are out of range or pi1 == pi0.
  void validate() const;
};

struct ClusterCount {
  double raw = 0.0;  // formula value before rounding up
  int clusters = 0;  // per arm
};

/// Hayes-Moulton clusters per arm for a proportion endpoint.
ClusterCount clusters_per_arm(const PowerParams& p);

/// Power achieved with c clusters per arm (inverts the sample-size formula).
double power_given_design(int c, const PowerParams& p);

struct PowerCurvePoint {
  double k = 0.0;
  double m = 0.0;
  int clusters = 0;
  double power = 0.0;
};

/// Power over a grid of k and m at a fixed number of clusters per arm.
std::vector<PowerCurvePoint> power_curve(const PowerParams& base, int clusters,
                                         std::span<const double> ks, std::span<const double> ms);

} // namespace crt
