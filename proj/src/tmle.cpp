#include "crt/tmle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>

#include "crt/error.hpp"

namespace crt {

LearnerConfig LearnerConfig::glm_only() {
  LearnerConfig c;
  c.candidates = {{LearnerKind::glm}};
  return c;
}

EnsembleModel fit_ensemble(const LearnerConfig& config, const Covariates& x,
                           std::span<const double> y) {
  if (config.candidates.size() == 1) {
    EnsembleModel m;
    m.specs = config.candidates;
    m.fits.push_back(fit_learner(config.candidates[0], x, y));
    m.weights = {1.0};
    m.seed = config.seed;
    return m;
  }
  return super_learner(x, y, config.candidates, config.folds, config.seed, config.mode);
}

namespace {

double to_unit(double v, const TmleOptions& o) {
  double r = (v - o.y_min) / (o.y_max - o.y_min);
  if (r < -1e-12 || r > 1 + 1e-12)
    throw DataError("outcome " + std::to_string(v) + " outside [" + std::to_string(o.y_min) + ", " +
                    std::to_string(o.y_max) + "]");
  return std::clamp(r, 0.0, 1.0);
}

void check_options(const TmleOptions& o) {
  if (!(o.y_max > o.y_min)) throw ConfigError("outcome range must have y_max > y_min");
  if (!(o.g_lower > 0 && o.g_lower < o.g_upper && o.g_upper < 1))
    throw ConfigError("propensity bounds must satisfy 0 < lower < upper < 1");
}

std::vector<std::size_t> observed_rows(std::span<const int> delta) {
  std::vector<std::size_t> obs;
  for (std::size_t i = 0; i < delta.size(); ++i)
    if (delta[i]) obs.push_back(i);
  return obs;
}

struct Propensity {
  std::vector<double> g;
  double g_min = 1, g_max = 1;
  std::size_t truncated = 0;
};

Propensity bound_propensity(std::vector<double> g, const TmleOptions& o) {
  Propensity p;
  p.g_min = std::numeric_limits<double>::infinity();
  p.g_max = -p.g_min;
  for (double& v : g) {
    if (v < o.g_lower) v = o.g_lower, ++p.truncated;
    if (v > o.g_upper) v = o.g_upper, ++p.truncated;
    p.g_min = std::min(p.g_min, v);
    p.g_max = std::max(p.g_max, v);
  }
  p.g = std::move(g);
  return p;
}

/// P(delta = 1 | x) for every row of x, or 1 when nothing is missing.
Propensity measurement_propensity(const Covariates& x, std::span<const int> delta,
                                  const TmleOptions& o) {
  bool all = std::all_of(delta.begin(), delta.end(), [](int d) { return d != 0; });
  if (all) return {std::vector<double>(delta.size(), 1.0), 1.0, 1.0, 0};
  std::vector<double> d(delta.begin(), delta.end());
  return bound_propensity(fit_ensemble(o.missingness, x, d).predict(x), o);
}

/// Targets Q with a single clever covariate Δ/g; returns the fitted epsilon.
double fluctuate_missing(std::span<const double> q, std::span<const double> g,
                         std::span<const int> delta, std::span<const double> y) {
  auto obs = observed_rows(delta);
  Eigen::MatrixXd h(obs.size(), 1);
  std::vector<double> off(obs.size()), yo(obs.size());
  for (std::size_t k = 0; k < obs.size(); ++k) {
    h(k, 0) = 1.0 / g[obs[k]];
    off[k] = logit(q[obs[k]]);
    yo[k] = y[obs[k]];
  }
  return fit_offset_logistic(h, off, yo)(0);
}

TmleFit finish_mean(std::vector<double> qstar, std::span<const double> g,
                    std::span<const int> delta, std::span<const double> y, double eps,
                    const Propensity& prop, const TmleOptions& o) {
  const std::size_t n = qstar.size();
  TmleFit fit;
  fit.epsilon = eps;
  fit.g_min = prop.g_min;
  fit.g_max = prop.g_max;
  fit.n_truncated = prop.truncated;
  double est = std::accumulate(qstar.begin(), qstar.end(), 0.0) / double(n);
  const double range = o.y_max - o.y_min;
  fit.ic.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double resid = delta[i] ? (y[i] - qstar[i]) / g[i] : 0.0;
    fit.ic[i] = range * (resid + qstar[i] - est);
  }
  fit.estimate = o.y_min + range * est;
  return fit;
}

} // namespace

TmleFit tmle_mean_missing(const Covariates& w, std::span<const int> delta, std::span<const double> y,
                          const TmleOptions& options) {
  check_options(options);
  const std::size_t n = delta.size();
  if (w.rows() != n || y.size() != n) throw DataError("tmle_mean_missing: row count mismatch");
  auto obs = observed_rows(delta);
  if (obs.empty()) throw EstimationError("no observed outcomes; the mean is not estimable");

  std::vector<double> ys(n, 0.0), yo;
  for (auto i : obs) ys[i] = to_unit(y[i], options), yo.push_back(ys[i]);

  auto qfit = fit_ensemble(options.outcome, w.subset_rows(obs), yo);
  auto q = qfit.predict(w);
  auto prop = measurement_propensity(w, delta, options);
  double eps = fluctuate_missing(q, prop.g, delta, ys);

  std::vector<double> qstar(n);
  for (std::size_t i = 0; i < n; ++i) qstar[i] = expit(logit(q[i]) + eps / prop.g[i]);
  return finish_mean(std::move(qstar), prop.g, delta, ys, eps, prop, options);
}

TmleFit tmle_sequential(const Covariates& w, std::span<const int> m, std::span<const int> delta,
                        std::span<const double> y, const TmleOptions& options, bool interactions) {
  check_options(options);
  const std::size_t n = delta.size();
  if (w.rows() != n || y.size() != n || m.size() != n)
    throw DataError("tmle_sequential: row count mismatch");
  auto obs = observed_rows(delta);
  if (obs.empty()) throw EstimationError("no observed outcomes; the mean is not estimable");

  std::vector<double> ys(n, 0.0), yo;
  for (auto i : obs) ys[i] = to_unit(y[i], options), yo.push_back(ys[i]);

  Covariates wm = w.with_column("outmigration", std::vector<double>(m.begin(), m.end()), false);
  if (interactions) {
    for (const auto& col : w.columns()) {
      std::vector<double> prod(n);
      for (std::size_t i = 0; i < n; ++i) prod[i] = col.values[i] * m[i];
      wm = wm.with_column("outmigration_x_" + col.name, std::move(prod), col.numeric);
    }
  }

  // Inner stage: E[Y | Δ=1, W, M] targeted with Δ/g(W, M).
  auto q2 = fit_ensemble(options.outcome, wm.subset_rows(obs), yo).predict(wm);
  auto prop = measurement_propensity(wm, delta, options);
  double eps = fluctuate_missing(q2, prop.g, delta, ys);
  std::vector<double> q2star(n);
  for (std::size_t i = 0; i < n; ++i) q2star[i] = expit(logit(q2[i]) + eps / prop.g[i]);

  // Outer stage: regress the targeted inner prediction on W, then an
  // intercept fluctuation so the plug-in mean matches the inner mean.
  auto q1 = fit_ensemble(options.outcome, w, q2star).predict(w);
  Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(n, 1);
  std::vector<double> off(n);
  for (std::size_t i = 0; i < n; ++i) off[i] = logit(q1[i]);
  double eps1 = fit_offset_logistic(ones, off, q2star)(0);
  std::vector<double> q1star(n);
  for (std::size_t i = 0; i < n; ++i) q1star[i] = expit(off[i] + eps1);

  const double range = options.y_max - options.y_min;
  double est = std::accumulate(q1star.begin(), q1star.end(), 0.0) / double(n);
  TmleFit fit;
  fit.epsilon = eps;
  fit.g_min = prop.g_min;
  fit.g_max = prop.g_max;
  fit.n_truncated = prop.truncated;
  fit.ic.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double inner = delta[i] ? (ys[i] - q2star[i]) / prop.g[i] : 0.0;
    fit.ic[i] = range * (inner + (q2star[i] - q1star[i]) + q1star[i] - est);
  }
  fit.estimate = options.y_min + range * est;
  return fit;
}

std::vector<double> aggregate_ic(std::span<const double> ic, std::span<const int> cluster,
                                 int n_clusters) {
  std::vector<double> out(n_clusters, 0.0);
  const double scale = double(n_clusters) / double(ic.size());
  for (std::size_t i = 0; i < ic.size(); ++i) out.at(cluster[i]) += scale * ic[i];
  return out;
}

namespace {

constexpr const char* kExposure = "exposure";

/// Rows used by the individual-level estimator and clusters relabeled 0..J-1.
struct Prepared {
  std::vector<std::size_t> rows;
  std::vector<int> cluster;
  int n_clusters = 0;
};

Prepared prepare(const IndividualData& d, bool adjust_missing) {
  const std::size_t n = d.y.size();
  if (d.cluster.size() != n || d.z.size() != n || d.delta.size() != n || d.w.rows() != n)
    throw DataError("individual data: column lengths differ");
  Prepared p;
  std::map<int, int> relabel;
  for (std::size_t i = 0; i < n; ++i) {
    if (!adjust_missing && !d.delta[i]) continue;
    p.rows.push_back(i);
    relabel.emplace(d.cluster[i], 0);
  }
  int next = 0;
  for (auto& [k, v] : relabel) v = next++;
  p.n_clusters = next;
  for (auto i : p.rows) p.cluster.push_back(relabel[d.cluster[i]]);
  return p;
}

/// Initial fits shared by the full estimator and the cross-validated selector.
struct Nuisance {
  std::vector<double> q_obs, q1, q0;  // outcome regression at Z, 1, 0
  std::vector<double> gz;             // P(Z=1|W)
  std::vector<double> gd1, gd0;       // P(Δ=1|Z=z,W)
  Propensity gd_diag;
};

struct Frame {
  Covariates wz;  // W plus the exposure column
  std::vector<int> z, delta;
  std::vector<double> y;
};

Frame make_frame(const IndividualData& d, std::span<const std::size_t> rows,
                 const Covariates& w_rows, const TmleOptions& o) {
  Frame f;
  std::vector<double> zc;
  for (auto i : rows) {
    f.z.push_back(d.z[i]);
    f.delta.push_back(d.delta[i]);
    f.y.push_back(d.delta[i] ? to_unit(d.y[i], o) : 0.0);
    zc.push_back(d.z[i]);
  }
  f.wz = w_rows.with_column(kExposure, std::move(zc), false);
  return f;
}

struct NuisanceModels {
  EnsembleModel q;
  std::optional<EnsembleModel> gz, gd;
  std::vector<std::string> wnames;
};

NuisanceModels fit_models(const Frame& train, const IndividualOptions& opt) {
  NuisanceModels m;
  std::vector<std::size_t> obs;
  std::vector<double> yo;
  for (std::size_t i = 0; i < train.y.size(); ++i)
    if (train.delta[i]) obs.push_back(i), yo.push_back(train.y[i]);
  if (obs.empty()) throw EstimationError("no observed outcomes");
  m.q = fit_ensemble(opt.tmle.outcome, train.wz.subset_rows(obs), yo);
  for (const auto& c : train.wz.columns())
    if (c.name != kExposure) m.wnames.push_back(c.name);
  if (!opt.g_z) {
    std::vector<double> zd(train.z.begin(), train.z.end());
    m.gz = fit_ensemble(opt.tmle.missingness, train.wz.select(m.wnames), zd);
  }
  bool all = std::all_of(train.delta.begin(), train.delta.end(), [](int v) { return v != 0; });
  if (opt.adjust_missing && !all) {
    std::vector<double> dd(train.delta.begin(), train.delta.end());
    m.gd = fit_ensemble(opt.tmle.missingness, train.wz, dd);
  }
  return m;
}

Nuisance evaluate(const NuisanceModels& m, const Frame& eval, const IndividualOptions& opt) {
  Nuisance nu;
  auto x1 = eval.wz.with_constant(kExposure, 1.0), x0 = eval.wz.with_constant(kExposure, 0.0);
  nu.q_obs = m.q.predict(eval.wz);
  nu.q1 = m.q.predict(x1);
  nu.q0 = m.q.predict(x0);
  const std::size_t n = eval.y.size();
  if (m.gz)
    nu.gz = bound_propensity(m.gz->predict(eval.wz.select(m.wnames)), opt.tmle).g;
  else
    nu.gz.assign(n, *opt.g_z);
  if (m.gd) {
    std::vector<double> both = m.gd->predict(x1);
    auto g0 = m.gd->predict(x0);
    both.insert(both.end(), g0.begin(), g0.end());
    nu.gd_diag = bound_propensity(std::move(both), opt.tmle);
    nu.gd1.assign(nu.gd_diag.g.begin(), nu.gd_diag.g.begin() + n);
    nu.gd0.assign(nu.gd_diag.g.begin() + n, nu.gd_diag.g.end());
  } else {
    nu.gd1.assign(n, 1.0);
    nu.gd0.assign(n, 1.0);
  }
  return nu;
}

} // namespace

IndividualFit tmle_effect_individual(const IndividualData& data, const IndividualOptions& opt) {
  check_options(opt.tmle);
  auto prep = prepare(data, opt.adjust_missing);
  const std::size_t n = prep.rows.size();
  std::size_t n1 = 0;
  for (auto i : prep.rows) n1 += data.z[i] != 0;
  if (n1 == 0 || n1 == n) throw EstimationError("both exposure groups must be present");
  if (prep.n_clusters < 3) throw EstimationError("cluster-level inference needs at least 3 clusters");

  auto frame = make_frame(data, prep.rows, data.w.subset_rows(prep.rows), opt.tmle);
  if (opt.scale == Scale::risk_ratio) {
    // An exposure group with no observed positive outcome has mean 0 and no ratio.
    bool pos[2] = {false, false};
    for (std::size_t i = 0; i < n; ++i)
      if (frame.delta[i] && frame.y[i] > 0) pos[frame.z[i] ? 1 : 0] = true;
    if (opt.tmle.y_min == 0.0 && (!pos[0] || !pos[1]))
      throw EstimationError(std::string(!pos[1] ? "exposed" : "unexposed") +
                            " group has no observed events; the ratio is undefined");
  }
  auto nu = evaluate(fit_models(frame, opt), frame, opt);

  // Two-dimensional fluctuation on the observed rows.
  std::vector<double> h1(n), h0(n), c1(n), c0(n);
  for (std::size_t i = 0; i < n; ++i) {
    c1[i] = 1.0 / (nu.gz[i] * nu.gd1[i]);
    c0[i] = 1.0 / ((1 - nu.gz[i]) * nu.gd0[i]);
    h1[i] = frame.delta[i] && frame.z[i] ? c1[i] : 0.0;
    h0[i] = frame.delta[i] && !frame.z[i] ? c0[i] : 0.0;
  }
  auto obs = observed_rows(frame.delta);
  Eigen::MatrixXd h(obs.size(), 2);
  std::vector<double> off(obs.size()), yo(obs.size());
  for (std::size_t k = 0; k < obs.size(); ++k) {
    auto i = obs[k];
    h(k, 0) = h1[i];
    h(k, 1) = h0[i];
    off[k] = logit(nu.q_obs[i]);
    yo[k] = frame.y[i];
  }
  Eigen::VectorXd eps = fit_offset_logistic(h, off, yo);

  std::vector<double> q1s(n), q0s(n), qos(n);
  for (std::size_t i = 0; i < n; ++i) {
    q1s[i] = expit(logit(nu.q1[i]) + eps(0) * c1[i]);
    q0s[i] = expit(logit(nu.q0[i]) + eps(1) * c0[i]);
    qos[i] = frame.z[i] ? q1s[i] : q0s[i];
  }
  const double range = opt.tmle.y_max - opt.tmle.y_min;
  double m1 = std::accumulate(q1s.begin(), q1s.end(), 0.0) / double(n);
  double m0 = std::accumulate(q0s.begin(), q0s.end(), 0.0) / double(n);

  IndividualFit out;
  out.arm1.estimate = opt.tmle.y_min + range * m1;
  out.arm0.estimate = opt.tmle.y_min + range * m0;
  out.arm1.epsilon = eps(0);
  out.arm0.epsilon = eps(1);
  out.arm1.ic.resize(n);
  out.arm0.ic.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double r = frame.y[i] - qos[i];
    out.arm1.ic[i] = range * (h1[i] * r + q1s[i] - m1);
    out.arm0.ic[i] = range * (h0[i] * r + q0s[i] - m0);
  }
  for (auto* a : {&out.arm1, &out.arm0}) {
    a->g_min = nu.gd_diag.g_min;
    a->g_max = nu.gd_diag.g_max;
    a->n_truncated = nu.gd_diag.truncated;
  }

  out.cluster_ic1 = aggregate_ic(out.arm1.ic, prep.cluster, prep.n_clusters);
  out.cluster_ic0 = aggregate_ic(out.arm0.ic, prep.cluster, prep.n_clusters);
  out.effect = make_effect(out.arm1.estimate, out.arm0.estimate, out.cluster_ic1, out.cluster_ic0,
                           opt.scale, opt.direction, prep.n_clusters - 2);
  out.effect.n_participants = static_cast<long>(n);
  auto names = data.w.names();
  out.effect.adjustment = names.empty() ? "none" : "";
  for (std::size_t j = 0; j < names.size(); ++j)
    out.effect.adjustment += (j ? "+" : "") + names[j];
  return out;
}

SelectionResult select_individual_adjustment(const IndividualData& data, const Covariates& pool,
                                             std::span<const std::string> candidates,
                                             const IndividualOptions& opt) {
  check_options(opt.tmle);
  SelectionResult res;
  res.candidates.push_back("none");
  for (const auto& c : candidates)
    if (c != "none" && std::find(res.candidates.begin(), res.candidates.end(), c) == res.candidates.end())
      res.candidates.push_back(c);

  auto prep = prepare(data, opt.adjust_missing);
  const std::size_t n = prep.rows.size();
  const int J = prep.n_clusters;
  if (J < 4) throw EstimationError("adaptive selection needs at least 4 clusters");
  Covariates pool_rows = pool.subset_rows(prep.rows);

  double best = std::numeric_limits<double>::infinity();
  for (const auto& cand : res.candidates) {
    std::vector<std::string> cols;
    if (cand != "none") {
      for (const auto& c : pool.columns())
        if (c.name == cand || c.name.rfind(cand + "_", 0) == 0) cols.push_back(c.name);
      if (cols.empty()) throw ConfigError("adjustment candidate '" + cand + "' not in covariate pool");
    }
    Covariates w = pool_rows.select(cols);
    bool constant = !cols.empty();
    for (const auto& c : w.columns())
      for (double v : c.values)
        if (v != c.values[0]) constant = false;
    if (constant) {
      res.cv_variance.push_back(std::numeric_limits<double>::quiet_NaN());
      res.diagnostics.push_back("candidate '" + cand + "' is constant; skipped");
      continue;
    }
    auto frame = make_frame(data, prep.rows, w, opt.tmle);

    std::vector<double> cic(J, 0.0);
    bool failed = false;
    for (int j = 0; j < J && !failed; ++j) {
      std::vector<std::size_t> tr, te;
      for (std::size_t i = 0; i < n; ++i) (prep.cluster[i] == j ? te : tr).push_back(i);
      auto sub = [&](const std::vector<std::size_t>& idx) {
        Frame s;
        s.wz = frame.wz.subset_rows(idx);
        for (auto i : idx) s.z.push_back(frame.z[i]), s.delta.push_back(frame.delta[i]),
            s.y.push_back(frame.y[i]);
        return s;
      };
      Frame ftr = sub(tr), fte = sub(te);
      bool z1 = false, z0 = false;
      for (int z : ftr.z) (z ? z1 : z0) = true;
      if (!z1 || !z0) { failed = true; break; }
      auto models = fit_models(ftr, opt);
      auto ntr = evaluate(models, ftr, opt);
      double p1 = std::accumulate(ntr.q1.begin(), ntr.q1.end(), 0.0) / double(tr.size());
      double p0 = std::accumulate(ntr.q0.begin(), ntr.q0.end(), 0.0) / double(tr.size());
      auto nte = evaluate(models, fte, opt);
      for (std::size_t k = 0; k < te.size(); ++k) {
        double r = fte.delta[k] ? fte.y[k] - nte.q_obs[k] : 0.0;
        double d1 = (fte.z[k] ? r / (nte.gz[k] * nte.gd1[k]) : 0.0) + nte.q1[k] - p1;
        double d0 = (fte.z[k] ? 0.0 : r / ((1 - nte.gz[k]) * nte.gd0[k])) + nte.q0[k] - p0;
        double d = opt.scale == Scale::risk_ratio ? d1 / p1 - d0 / p0 : d1 - d0;
        cic[j] += double(J) / double(n) * d;
      }
    }
    if (failed) {
      res.cv_variance.push_back(std::numeric_limits<double>::quiet_NaN());
      res.diagnostics.push_back("candidate '" + cand + "': a held-out fold lost an exposure group");
      continue;
    }
    double v = 0;
    for (double c : cic) v += c * c;
    v /= J;
    res.cv_variance.push_back(v);
    if (v < best * (1 - 1e-12)) {
      best = v;
      res.selected = cand;
    }
  }
  return res;
}

} // namespace crt
