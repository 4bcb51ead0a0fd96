#include "crt/power.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "crt/error.hpp"

namespace crt {

std::string_view to_string(Correction c) { return c == Correction::none ? "none" : "plus_one"; }

Correction parse_correction(std::string_view s) {
  if (s == "none") return Correction::none;
  if (s == "plus_one") return Correction::plus_one;
  throw ConfigError("unknown correction '" + std::string(s) + "'");
}

double PowerParams::pi1() const { return std::min(1.0, pi0 * relative_effect); }

void PowerParams::validate() const {
  if (!(pi0 > 0 && pi0 < 1)) throw ConfigError("pi0 must lie in (0,1)");
  if (!(relative_effect > 0)) throw ConfigError("relative effect must be positive");
  if (pi1() == pi0) throw ConfigError("pi1 equals pi0: no finite sample size detects a null effect");
  if (!(k >= 0)) throw ConfigError("k must be >= 0");
  if (!(m >= 1)) throw ConfigError("m must be >= 1");
  if (!(alpha > 0 && alpha < 1)) throw ConfigError("alpha must lie in (0,1)");
  if (!(power > 0 && power < 1)) throw ConfigError("power must lie in (0,1)");
}

namespace {

double z_alpha(const PowerParams& p) {
  return normal_quantile(1 - (p.sided == Sidedness::two ? p.alpha / 2 : p.alpha));
}

double variance_term(const PowerParams& p) {
  const double a = p.pi0, b = p.pi1();
  return a * (1 - a) / p.m + b * (1 - b) / p.m + p.k * p.k * (a * a + b * b);
}

double correction(const PowerParams& p) { return p.correction == Correction::plus_one ? 1.0 : 0.0; }

} // namespace

ClusterCount clusters_per_arm(const PowerParams& p) {
  p.validate();
  const double d = p.pi0 - p.pi1();
  const double z = z_alpha(p) + normal_quantile(p.power);
  ClusterCount c;
  c.raw = correction(p) + z * z * variance_term(p) / (d * d);
  c.clusters = static_cast<int>(std::ceil(c.raw - 1e-12));
  return c;
}

double power_given_design(int c, const PowerParams& p) {
  p.validate();
  if (c < 2) throw ConfigError("power needs at least 2 clusters per arm");
  double eff = double(c) - correction(p);
  if (eff <= 0) return 0.0;
  const double d = p.pi0 - p.pi1();
  double zb = std::sqrt(eff * d * d / variance_term(p)) - z_alpha(p);
  return normal_cdf(zb);
}

std::vector<PowerCurvePoint> power_curve(const PowerParams& base, int clusters,
                                         std::span<const double> ks, std::span<const double> ms) {
  std::vector<PowerCurvePoint> out;
  for (double k : ks)
    for (double m : ms) {
      PowerParams p = base;
      p.k = k;
      p.m = m;
      out.push_back({k, m, clusters, power_given_design(clusters, p)});
    }
  return out;
}

} // namespace crt
