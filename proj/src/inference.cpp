#include "crt/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "crt/error.hpp"

namespace crt {

std::string_view to_string(Scale s) {
  switch (s) {
    case Scale::risk_ratio: return "risk_ratio";
    case Scale::risk_difference: return "risk_difference";
    case Scale::mean_difference: return "mean_difference";
  }
  return "?";
}

std::string_view to_string(Sidedness s) {
  switch (s) {
    case Sidedness::one_upper: return "one_upper";
    case Sidedness::one_lower: return "one_lower";
    case Sidedness::two: return "two";
  }
  return "?";
}

std::string_view to_string(Direction d) { return d == Direction::increase ? "increase" : "decrease"; }

Scale parse_scale(std::string_view s) {
  if (s == "risk_ratio" || s == "rr") return Scale::risk_ratio;
  if (s == "risk_difference" || s == "rd") return Scale::risk_difference;
  if (s == "mean_difference" || s == "md") return Scale::mean_difference;
  throw ConfigError("unknown scale '" + std::string(s) + "'");
}

Sidedness parse_sidedness(std::string_view s) {
  if (s == "one_upper" || s == "one") return Sidedness::one_upper;
  if (s == "one_lower") return Sidedness::one_lower;
  if (s == "two") return Sidedness::two;
  throw ConfigError("unknown sidedness '" + std::string(s) + "'");
}

Direction parse_direction(std::string_view s) {
  if (s == "increase") return Direction::increase;
  if (s == "decrease") return Direction::decrease;
  throw ConfigError("unknown direction '" + std::string(s) + "'");
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double normal_quantile(double p) {
  if (p <= 0) return -std::numeric_limits<double>::infinity();
  if (p >= 1) return std::numeric_limits<double>::infinity();
  // Acklam's rational approximation, then two Halley refinements.
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01, -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                             3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= 1 - plow) {
    double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    double q = std::sqrt(-2 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  for (int i = 0; i < 2; ++i) {
    double e = normal_cdf(x) - p;
    double u = e * std::sqrt(2 * M_PI) * std::exp(x * x / 2);
    x = x - u / (1 + x * u / 2);
  }
  return x;
}

namespace {

double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1, d = 1 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1) < kEps) break;
  }
  return h;
}

} // namespace

double incomplete_beta(double a, double b, double x) {
  if (x <= 0) return 0.0;
  if (x >= 1) return 1.0;
  double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                     b * std::log1p(-x);
  double front = std::exp(log_front);
  if (x < (a + 1) / (a + b + 2)) return front * beta_continued_fraction(a, b, x) / a;
  return 1 - front * beta_continued_fraction(b, a, 1 - x) / b;
}

double student_t_cdf(double t, double df) {
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  double x = df / (df + t * t);
  double tail = 0.5 * incomplete_beta(df / 2, 0.5, x);
  return t > 0 ? 1 - tail : tail;
}

double student_t_quantile(double p, double df) {
  if (p <= 0) return -std::numeric_limits<double>::infinity();
  if (p >= 1) return std::numeric_limits<double>::infinity();
  if (p == 0.5) return 0.0;
  // Bracket around the normal quantile, then bisect on the CDF.
  double z = normal_quantile(p);
  double lo = z, hi = z;
  while (student_t_cdf(lo, df) > p) lo = lo * 2 - 1;
  while (student_t_cdf(hi, df) < p) hi = hi * 2 + 1;
  for (int i = 0; i < 200 && hi - lo > 1e-14 * std::max(1.0, std::fabs(hi)); ++i) {
    double mid = 0.5 * (lo + hi);
    (student_t_cdf(mid, df) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

IcSe ic_se(std::span<const double> ic) {
  if (ic.size() < 2) throw EstimationError("influence-curve SE needs at least 2 units");
  const double n = double(ic.size());
  double mean = std::accumulate(ic.begin(), ic.end(), 0.0) / n;
  double ss = 0, scale = 0;
  for (double v : ic) {
    ss += (v - mean) * (v - mean);
    scale = std::max(scale, std::fabs(v));
  }
  IcSe out;
  out.se = std::sqrt(ss / (n - 1)) / std::sqrt(n);
  // Spread at rounding level counts as none.
  if (out.se <= 1e-13 * scale) out.se = 0.0;
  out.degenerate = !(out.se > 0);
  return out;
}

TResult t_inference(double estimate, double se, int df, Sidedness sided, double level) {
  if (se < 0 || df < 1) throw EstimationError("t_inference needs se >= 0 and df >= 1");
  TResult r;
  double crit = student_t_quantile(1 - (1 - level) / 2, df);
  r.ci = {estimate - crit * se, estimate + crit * se};
  if (se == 0) {
    r.degenerate = true;
    r.t_stat = estimate > 0 ? std::numeric_limits<double>::infinity()
                            : (estimate < 0 ? -std::numeric_limits<double>::infinity() : 0.0);
    switch (sided) {
      case Sidedness::one_upper: r.p = estimate > 0 ? 0.0 : 1.0; break;
      case Sidedness::one_lower: r.p = estimate < 0 ? 0.0 : 1.0; break;
      case Sidedness::two: r.p = estimate != 0 ? 0.0 : 1.0; break;
    }
    return r;
  }
  r.t_stat = estimate / se;
  switch (sided) {
    case Sidedness::one_upper: r.p = 1 - student_t_cdf(r.t_stat, df); break;
    case Sidedness::one_lower: r.p = student_t_cdf(r.t_stat, df); break;
    case Sidedness::two: r.p = 2 * student_t_cdf(-std::fabs(r.t_stat), df); break;
  }
  if (r.p > 1) r.p = 1;
  return r;
}

ScaleTransform transform_scale(double psi1, double psi0, std::span<const double> ic1,
                               std::span<const double> ic0, Scale scale) {
  ScaleTransform out;
  out.ic.resize(ic1.size());
  if (scale == Scale::risk_ratio) {
    if (!(psi0 > 0) || !(psi1 > 0))
      throw EstimationError("risk ratio undefined with a zero arm estimate; use the difference scale");
    out.effect = psi1 / psi0;
    out.analysis_estimate = std::log(out.effect);
    for (std::size_t i = 0; i < ic1.size(); ++i) out.ic[i] = ic1[i] / psi1 - ic0[i] / psi0;
  } else {
    out.effect = psi1 - psi0;
    out.analysis_estimate = out.effect;
    for (std::size_t i = 0; i < ic1.size(); ++i) out.ic[i] = ic1[i] - ic0[i];
  }
  return out;
}

EffectEstimate make_effect(double psi1, double psi0, std::span<const double> ic1,
                           std::span<const double> ic0, Scale scale, Direction direction, int df) {
  EffectEstimate e;
  e.psi1 = psi1;
  e.psi0 = psi0;
  e.scale = scale;
  e.direction = direction;
  e.df = df;
  e.n_clusters = static_cast<int>(ic1.size());

  auto arm1 = ic_se(ic1), arm0 = ic_se(ic0);
  e.psi1_se = arm1.se;
  e.psi0_se = arm0.se;
  e.psi1_ci = t_inference(psi1, arm1.se, df, Sidedness::two).ci;
  e.psi0_ci = t_inference(psi0, arm0.se, df, Sidedness::two).ci;

  auto tr = transform_scale(psi1, psi0, ic1, ic0, scale);
  auto se = ic_se(tr.ic);
  // Below this the spread is rounding noise on any analysis scale used here.
  constexpr double kNumericalZero = 1e-12;
  if (se.se < kNumericalZero) {
    se = {0.0, true};
    if (std::fabs(tr.analysis_estimate) < kNumericalZero) tr.analysis_estimate = 0.0;
  }
  e.effect = tr.effect;
  e.se = se.se;
  e.degenerate = se.degenerate;
  auto one = t_inference(tr.analysis_estimate, se.se, df,
                         direction == Direction::increase ? Sidedness::one_upper
                                                          : Sidedness::one_lower);
  auto two = t_inference(tr.analysis_estimate, se.se, df, Sidedness::two);
  e.t_stat = one.t_stat;
  e.p_one_sided = one.p;
  e.p_two_sided = two.p;
  e.ci = two.ci;
  if (scale == Scale::risk_ratio) e.ci = {std::exp(two.ci.lower), std::exp(two.ci.upper)};
  return e;
}

} // namespace crt
