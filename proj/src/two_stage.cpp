#include "crt/two_stage.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <numeric>

#include "crt/error.hpp"

namespace crt {

std::string_view to_string(Stage1Method m) {
  switch (m) {
    case Stage1Method::empirical: return "empirical";
    case Stage1Method::tmle_missing: return "tmle_missing";
    case Stage1Method::tmle_sequential: return "tmle_sequential";
  }
  return "?";
}

std::string_view to_string(WeightScheme w) { return w == WeightScheme::equal ? "equal" : "size"; }

Stage1Method parse_stage1_method(std::string_view s) {
  if (s == "empirical") return Stage1Method::empirical;
  if (s == "tmle_missing") return Stage1Method::tmle_missing;
  if (s == "tmle_sequential") return Stage1Method::tmle_sequential;
  throw ConfigError("unknown stage-1 method '" + std::string(s) + "'");
}

WeightScheme parse_weight_scheme(std::string_view s) {
  if (s == "equal") return WeightScheme::equal;
  if (s == "size") return WeightScheme::size;
  throw ConfigError("unknown weight scheme '" + std::string(s) + "'");
}

ClinicEndpoint stage1_endpoint(const ClusterSample& c, const Stage1Options& o) {
  const std::size_t n = c.y.size();
  if (c.delta.size() != n) throw DataError("clinic " + c.clinic_id + ": column lengths differ");
  ClinicEndpoint e;
  e.clinic_id = c.clinic_id;
  e.arm = c.arm;
  e.n_included = static_cast<long>(n);
  if (n == 0)
    throw DataError("clinic " + c.clinic_id +
                    " has no included participants for this endpoint; revise the population spec");
  const double z = normal_quantile(0.975);

  if (o.method == Stage1Method::empirical) {
    double sum = 0, sq = 0;
    long k = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (c.delta[i]) sum += c.y[i], sq += c.y[i] * c.y[i], ++k;
    if (k == 0) throw DataError("clinic " + c.clinic_id + " has no measured endpoints");
    e.y = sum / double(k);
    if (k > 1) {
      double var = std::max(0.0, (sq - k * e.y * e.y) / double(k - 1));
      e.se = std::sqrt(var / double(k));
      e.ci = Interval{e.y - z * *e.se, e.y + z * *e.se};
    }
    return e;
  }

  TmleFit fit;
  if (o.method == Stage1Method::tmle_missing) {
    fit = tmle_mean_missing(c.w, c.delta, c.y, o.tmle);
  } else {
    if (c.m.size() != n) throw DataError("clinic " + c.clinic_id + ": outmigration column missing");
    fit = tmle_sequential(c.w, c.m, c.delta, c.y, o.tmle);
  }
  e.y = fit.estimate;
  if (n > 1) {
    auto s = ic_se(fit.ic);
    e.se = s.se;
    e.ci = Interval{e.y - z * s.se, e.y + z * s.se};
  }
  return e;
}

std::vector<ClinicEndpoint> stage1_endpoints_serial(std::span<const ClusterSample> clinics,
                                                    const Stage1Options& options) {
  std::vector<ClinicEndpoint> out;
  out.reserve(clinics.size());
  for (const auto& c : clinics) out.push_back(stage1_endpoint(c, options));
  return out;
}

std::vector<ClinicEndpoint> stage1_endpoints(std::span<const ClusterSample> clinics,
                                             const Stage1Options& options) {
  const long n = static_cast<long>(clinics.size());
  std::vector<ClinicEndpoint> out(clinics.size());
  std::vector<std::exception_ptr> errors(clinics.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    try {
      out[i] = stage1_endpoint(clinics[i], options);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  // Report the first failing clinic in input order, as the serial path would.
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::vector<std::string> default_clinic_candidates(bool include_both) {
  std::vector<std::string> c{std::string(kAdjNone), std::string(kAdjYouth),
                             std::string(kAdjSuppression)};
  if (include_both) c.emplace_back(kAdjBoth);
  return c;
}

namespace {

constexpr double kGz = 0.5;

struct Stage2Data {
  std::vector<double> y;      // scaled to [0,1]
  std::vector<int> a;
  std::vector<double> alpha;  // mean 1
  Eigen::MatrixXd cov;        // clinic covariates for the adjustment (no intercept)
};

std::vector<double> clinic_covariate(std::span<const ClinicEndpoint> eps,
                                     const std::map<std::string, const ClinicRecord*>& by_id,
                                     std::string_view name) {
  std::vector<double> v;
  for (const auto& e : eps) {
    auto it = by_id.find(e.clinic_id);
    if (it == by_id.end()) throw DataError("no clinic record for endpoint " + e.clinic_id);
    if (name == kAdjYouth) v.push_back(double(it->second->n_youth_in_care_baseline));
    else if (name == kAdjSuppression) v.push_back(it->second->baseline_suppression_proportion);
    else throw ConfigError("unknown clinic adjustment '" + std::string(name) + "'");
  }
  return v;
}

std::vector<std::string> expand(std::string_view adj) {
  if (adj == kAdjNone) return {};
  if (adj == kAdjBoth) return {std::string(kAdjYouth), std::string(kAdjSuppression)};
  return {std::string(adj)};
}

Stage2Data prepare(std::span<const ClinicEndpoint> eps, std::span<const ClinicRecord> clinics,
                   std::string_view adjustment, const Stage2Options& o) {
  if (!(o.y_max > o.y_min)) throw ConfigError("stage-2 outcome range must have y_max > y_min");
  std::map<std::string, const ClinicRecord*> by_id;
  for (const auto& c : clinics) by_id[c.clinic_id] = &c;
  Stage2Data d;
  const std::size_t n = eps.size();
  double total = 0;
  bool a1 = false, a0 = false;
  for (const auto& e : eps) {
    double s = (e.y - o.y_min) / (o.y_max - o.y_min);
    if (s < -1e-12 || s > 1 + 1e-12)
      throw DataError("clinic " + e.clinic_id + " endpoint outside the declared range");
    d.y.push_back(std::clamp(s, 0.0, 1.0));
    d.a.push_back(e.arm == Arm::intervention);
    (e.arm == Arm::intervention ? a1 : a0) = true;
    if (o.weights == WeightScheme::size && e.n_included <= 0)
      throw DataError("size weights need n_included > 0 (clinic " + e.clinic_id + ")");
    d.alpha.push_back(o.weights == WeightScheme::size ? double(e.n_included) : 1.0);
    total += d.alpha.back();
  }
  if (!a1 || !a0) throw EstimationError("stage 2 needs clinics in both arms");
  for (double& a : d.alpha) a *= double(n) / total;
  auto names = expand(adjustment);
  d.cov.resize(n, names.size());
  for (std::size_t j = 0; j < names.size(); ++j) {
    auto v = clinic_covariate(eps, by_id, names[j]);
    for (std::size_t i = 0; i < n; ++i) d.cov(i, j) = v[i];
  }
  return d;
}

/// Weighted least squares fit of y on (1, a, cov) over `rows`.
Eigen::VectorXd working_fit(const Stage2Data& d, std::span<const std::size_t> rows) {
  const Eigen::Index p = 2 + d.cov.cols();
  Eigen::MatrixXd x(rows.size(), p);
  Eigen::VectorXd y(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    auto i = rows[k];
    double sw = std::sqrt(d.alpha[i]);
    x(k, 0) = sw;
    x(k, 1) = sw * d.a[i];
    for (Eigen::Index j = 0; j < d.cov.cols(); ++j) x(k, 2 + j) = sw * d.cov(i, j);
    y(k) = sw * d.y[i];
  }
  return x.colPivHouseholderQr().solve(y);
}

double working_predict(const Eigen::VectorXd& beta, const Stage2Data& d, std::size_t i, double a) {
  double v = beta(0) + beta(1) * a;
  for (Eigen::Index j = 0; j < d.cov.cols(); ++j) v += beta(2 + j) * d.cov(i, j);
  return bound_prediction(v);
}

bool constant_covariates(const Stage2Data& d) {
  for (Eigen::Index j = 0; j < d.cov.cols(); ++j)
    if (d.cov.col(j).maxCoeff() == d.cov.col(j).minCoeff()) return true;
  return false;
}

} // namespace

EffectEstimate stage2_effect(std::span<const ClinicEndpoint> endpoints,
                             std::span<const ClinicRecord> clinics, std::string_view adjustment,
                             const Stage2Options& o) {
  auto d = prepare(endpoints, clinics, adjustment, o);
  const std::size_t n = d.y.size();
  if (n < 3) throw EstimationError("stage 2 needs at least 3 clinics");
  if (o.scale == Scale::risk_ratio) {
    // Bounded working-model predictions would otherwise hide a zero arm mean.
    double sum[2] = {0, 0}, wsum[2] = {0, 0};
    for (std::size_t i = 0; i < n; ++i) {
      sum[d.a[i] ? 1 : 0] += d.alpha[i] * d.y[i];
      wsum[d.a[i] ? 1 : 0] += d.alpha[i];
    }
    for (int a = 0; a < 2; ++a)
      if (wsum[a] > 0 && o.y_min + (o.y_max - o.y_min) * sum[a] / wsum[a] <= 0)
        throw EstimationError(std::string(a ? "intervention" : "control") +
                              " arm mean is 0; the ratio is undefined");
  }
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  auto beta = working_fit(d, rows);

  std::vector<double> q(n), q1(n), q0(n), off(n);
  Eigen::MatrixXd h(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    q1[i] = working_predict(beta, d, i, 1.0);
    q0[i] = working_predict(beta, d, i, 0.0);
    q[i] = d.a[i] ? q1[i] : q0[i];
    off[i] = logit(q[i]);
    h(i, 0) = d.a[i] / kGz;
    h(i, 1) = (1 - d.a[i]) / (1 - kGz);
  }
  Eigen::VectorXd eps = fit_offset_logistic(h, off, d.y, d.alpha);

  const double range = o.y_max - o.y_min;
  std::vector<double> s1(n), s0(n);
  double m1 = 0, m0 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    s1[i] = expit(logit(q1[i]) + eps(0) / kGz);
    s0[i] = expit(logit(q0[i]) + eps(1) / (1 - kGz));
    m1 += d.alpha[i] * s1[i];
    m0 += d.alpha[i] * s0[i];
  }
  m1 /= double(n);
  m0 /= double(n);
  std::vector<double> ic1(n), ic0(n);
  for (std::size_t i = 0; i < n; ++i) {
    double r = d.y[i] - (d.a[i] ? s1[i] : s0[i]);
    ic1[i] = range * (d.alpha[i] * (h(i, 0) * r + s1[i]) - m1);
    ic0[i] = range * (d.alpha[i] * (h(i, 1) * r + s0[i]) - m0);
  }
  auto e = make_effect(o.y_min + range * m1, o.y_min + range * m0, ic1, ic0, o.scale, o.direction,
                       static_cast<int>(n) - 2);
  e.adjustment = std::string(adjustment);
  e.weights = std::string(to_string(o.weights));
  for (const auto& ep : endpoints) e.n_participants += ep.n_included;
  return e;
}

PrespecResult adaptive_prespec(std::span<const ClinicEndpoint> endpoints,
                               std::span<const ClinicRecord> clinics,
                               std::span<const std::string> candidates, const Stage2Options& o) {
  if (endpoints.size() < 4) throw EstimationError("adaptive pre-specification needs at least 4 clinics");
  PrespecResult res;
  res.candidates.emplace_back(kAdjNone);
  for (const auto& c : candidates) {
    if (c != kAdjNone && c != kAdjYouth && c != kAdjSuppression && c != kAdjBoth)
      throw ConfigError("adjustment candidate '" + c + "' is not in the prespecified set");
    if (std::find(res.candidates.begin(), res.candidates.end(), c) == res.candidates.end())
      res.candidates.push_back(c);
  }

  const std::size_t n = endpoints.size();
  double best = std::numeric_limits<double>::infinity();
  for (const auto& cand : res.candidates) {
    auto d = prepare(endpoints, clinics, cand, o);
    if (constant_covariates(d)) {
      res.cv_variance.push_back(std::numeric_limits<double>::quiet_NaN());
      res.diagnostics.push_back("candidate '" + cand + "' is constant across clinics; skipped");
      continue;
    }
    double total = 0;
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      std::vector<std::size_t> train;
      int n1 = 0;
      for (std::size_t k = 0; k < n; ++k)
        if (k != i) train.push_back(k), n1 += d.a[k];
      int n0 = static_cast<int>(train.size()) - n1;
      if (n1 < 1 || n0 < 1 || train.size() < std::size_t(3 + d.cov.cols())) {
        ok = false;
        break;
      }
      auto beta = working_fit(d, train);
      double p1 = 0, p0 = 0, wsum = 0;
      for (auto k : train) {
        p1 += d.alpha[k] * working_predict(beta, d, k, 1.0);
        p0 += d.alpha[k] * working_predict(beta, d, k, 0.0);
        wsum += d.alpha[k];
      }
      p1 /= wsum;
      p0 /= wsum;
      double q1 = working_predict(beta, d, i, 1.0), q0 = working_predict(beta, d, i, 0.0);
      double r = d.y[i] - (d.a[i] ? q1 : q0);
      double d1 = d.alpha[i] * (d.a[i] * r / kGz + q1) - p1;
      double d0 = d.alpha[i] * ((1 - d.a[i]) * r / (1 - kGz) + q0) - p0;
      double ic = o.scale == Scale::risk_ratio ? d1 / p1 - d0 / p0 : d1 - d0;
      total += ic * ic;
    }
    if (!ok) {
      res.cv_variance.push_back(std::numeric_limits<double>::quiet_NaN());
      res.diagnostics.push_back("candidate '" + cand + "': too few clinics per arm for leave-one-out");
      continue;
    }
    double v = total / double(n);
    res.cv_variance.push_back(v);
    if (v < best * (1 - 1e-12)) {
      best = v;
      res.selected = cand;
    }
  }
  return res;
}

TwoStageResult two_stage_from_endpoints(std::vector<ClinicEndpoint> endpoints,
                                        std::span<const ClinicRecord> clinic_records,
                                        const TwoStageOptions& o) {
  TwoStageResult r;
  r.stage1 = std::move(endpoints);
  if (o.adaptive) {
    r.selection = adaptive_prespec(r.stage1, clinic_records, o.candidates, o.stage2);
  } else {
    r.selection.selected = o.fixed_adjustment;
    r.selection.candidates = {o.fixed_adjustment};
  }
  r.effect = stage2_effect(r.stage1, clinic_records, r.selection.selected, o.stage2);
  double total = 0;
  for (const auto& e : r.stage1)
    total += o.stage2.weights == WeightScheme::size ? double(e.n_included) : 1.0;
  for (auto& e : r.stage1)
    e.alpha = (o.stage2.weights == WeightScheme::size ? double(e.n_included) : 1.0) *
              double(r.stage1.size()) / total;
  return r;
}

TwoStageResult two_stage_estimate(std::span<const ClusterSample> clinics,
                                  std::span<const ClinicRecord> clinic_records,
                                  const TwoStageOptions& o) {
  auto eps = o.parallel ? stage1_endpoints(clinics, o.stage1) : stage1_endpoints_serial(clinics, o.stage1);
  return two_stage_from_endpoints(std::move(eps), clinic_records, o);
}

} // namespace crt
