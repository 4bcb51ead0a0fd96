#include "crt/learners.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "crt/error.hpp"

namespace crt {

namespace {

constexpr int kMaxIrlsIterations = 100;
constexpr double kIrlsTolerance = 1e-8;
constexpr double kFallbackRidge = 1e-4;
constexpr double kSeparationEta = 30.0;

double weight_at(std::span<const double> w, std::size_t i) { return w.empty() ? 1.0 : w[i]; }

double cube_plus(double v) { return v > 0 ? v * v * v : 0.0; }

double quantile_of(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  double h = double(v.size() - 1) * p;
  auto lo = static_cast<std::size_t>(std::floor(h));
  auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - double(lo)) * (v[hi] - v[lo]);
}

bool is_constant(const std::vector<double>& v) {
  if (v.empty()) return true;
  auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  return *mx - *mn <= 1e-12 * (1.0 + std::fabs(*mx));
}

// Penalized negative log-likelihood (ridge on all but the intercept).
double objective(const Eigen::VectorXd& eta, const Eigen::VectorXd& beta, std::span<const double> y,
                 std::span<const double> w, double ridge) {
  double obj = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    double e = eta(i);
    // log(1 + exp(e)) evaluated stably
    double log1pexp = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
    obj -= weight_at(w, i) * (y[i] * e - log1pexp);
  }
  if (ridge > 0) obj += 0.5 * ridge * beta.tail(beta.size() - 1).squaredNorm();
  return obj;
}

struct IrlsResult {
  Eigen::VectorXd beta;
  int iterations = 0;
  bool converged = false;
  bool separated = false;
  bool singular = false;
};

IrlsResult irls(const Eigen::MatrixXd& x, std::span<const double> y, std::span<const double> w,
                double ridge, bool detect_separation) {
  const Eigen::Index n = x.rows(), p = x.cols();
  IrlsResult r;
  r.beta = Eigen::VectorXd::Zero(p);
  double sw = 0, swy = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    sw += weight_at(w, i);
    swy += weight_at(w, i) * y[i];
  }
  r.beta(0) = logit(std::clamp(swy / sw, 1e-6, 1 - 1e-6));

  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(p, ridge);
  penalty(0) = 0.0;
  Eigen::VectorXd eta = x * r.beta;
  double obj = objective(eta, r.beta, y, w, ridge);

  for (int it = 1; it <= kMaxIrlsIterations; ++it) {
    r.iterations = it;
    if (detect_separation && eta.cwiseAbs().maxCoeff() > kSeparationEta) {
      r.separated = true;
      return r;
    }
    Eigen::VectorXd resid(n), wt(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      double mu = expit(eta(i));
      resid(i) = weight_at(w, i) * (y[i] - mu);
      wt(i) = weight_at(w, i) * std::max(mu * (1 - mu), 1e-12);
    }
    Eigen::VectorXd grad = x.transpose() * resid - penalty.cwiseProduct(r.beta);
    Eigen::MatrixXd hess = x.transpose() * wt.asDiagonal() * x;
    hess.diagonal() += penalty;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(hess);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().minCoeff() <= 1e-10 * std::max(1.0, ldlt.vectorD().maxCoeff())) {
      r.singular = true;
      return r;
    }
    Eigen::VectorXd delta = ldlt.solve(grad);
    if (!delta.allFinite()) {
      r.singular = true;
      return r;
    }
    // Step halving keeps the penalized likelihood monotone.
    double step = 1.0;
    Eigen::VectorXd next = r.beta + delta;
    Eigen::VectorXd next_eta = x * next;
    double next_obj = objective(next_eta, next, y, w, ridge);
    for (int h = 0; h < 30 && next_obj > obj + 1e-12 * std::fabs(obj); ++h) {
      step *= 0.5;
      next = r.beta + step * delta;
      next_eta = x * next;
      next_obj = objective(next_eta, next, y, w, ridge);
    }
    double change = (step * delta).cwiseAbs().maxCoeff();
    r.beta = next;
    eta = std::move(next_eta);
    obj = next_obj;
    if (change < kIrlsTolerance) {
      r.converged = true;
      return r;
    }
  }
  return r;
}

std::vector<double> raw_values(const Covariates& x, const DesignColumn& col,
                               const std::vector<double>& knots) {
  const Column* c = x.find(col.source);
  if (!c) throw ConfigError("prediction frame lacks covariate '" + col.source + "'");
  if (col.spline_term < 0) return c->values;
  std::vector<double> out(c->values.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = natural_spline_terms(c->values[i], knots)[col.spline_term];
  return out;
}

FittedLearner fit_design(LearnerKind kind, std::vector<DesignColumn> candidates,
                         std::vector<std::vector<double>> candidate_knots, const Covariates& x,
                         std::span<const double> y, double ridge, std::span<const double> weights,
                         FitInfo info) {
  if (y.empty()) throw EstimationError("cannot fit a learner on zero observations");
  if (y.size() != x.rows()) throw std::invalid_argument("outcome and covariate row counts differ");

  std::vector<DesignColumn> kept;
  std::vector<std::vector<double>> kept_knots;
  std::vector<std::vector<double>> values;
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    auto v = raw_values(x, candidates[j], candidate_knots[j]);
    if (is_constant(v)) {
      info.dropped_columns.push_back(candidates[j].name);
      continue;
    }
    double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
    double ss = 0;
    for (double a : v) ss += (a - mean) * (a - mean);
    candidates[j].center = mean;
    candidates[j].scale = std::sqrt(ss / double(v.size()));
    kept.push_back(candidates[j]);
    kept_knots.push_back(candidate_knots[j]);
    values.push_back(std::move(v));
  }

  bool y_constant = std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
  if (y_constant) {
    info.intercept_only = true;
    info.iterations = 0;
    Eigen::VectorXd beta(1);
    beta(0) = logit(bound_prediction(y[0]));
    return FittedLearner::make(kind, std::move(info), {}, {}, std::move(beta), 0.5);
  }

  const Eigen::Index n = static_cast<Eigen::Index>(y.size());
  Eigen::MatrixXd design(n, 1 + kept.size());
  design.col(0).setOnes();
  for (std::size_t j = 0; j < kept.size(); ++j)
    for (Eigen::Index i = 0; i < n; ++i)
      design(i, j + 1) = (values[j][i] - kept[j].center) / kept[j].scale;

  IrlsResult r = irls(design, y, weights, ridge, ridge == 0.0);
  if (r.separated || r.singular || !r.converged) {
    info.ridge_fallback = true;
    r = irls(design, y, weights, std::max(ridge, kFallbackRidge), false);
  }
  info.iterations = r.iterations;
  info.converged = r.converged;
  return FittedLearner::make(kind, std::move(info), std::move(kept), std::move(kept_knots),
                             std::move(r.beta), 0.5);
}

} // namespace

double expit(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

std::string_view to_string(LearnerKind k) {
  switch (k) {
    case LearnerKind::glm: return "glm";
    case LearnerKind::gam: return "gam";
    case LearnerKind::mean: return "mean";
  }
  return "?";
}

LearnerKind parse_learner_kind(std::string_view s) {
  if (s == "glm") return LearnerKind::glm;
  if (s == "gam") return LearnerKind::gam;
  if (s == "mean") return LearnerKind::mean;
  throw ConfigError("unknown learner '" + std::string(s) + "'");
}

FittedLearner FittedLearner::make(LearnerKind kind, FitInfo info, std::vector<DesignColumn> columns,
                                  std::vector<std::vector<double>> knots, Eigen::VectorXd beta,
                                  double mean) {
  FittedLearner f;
  f.kind = kind;
  f.info = std::move(info);
  f.columns_ = std::move(columns);
  f.knots_ = std::move(knots);
  f.beta_ = std::move(beta);
  f.mean_ = mean;
  return f;
}

DesignMatrix FittedLearner::design(const Covariates& x) const {
  DesignMatrix d;
  const Eigen::Index n = static_cast<Eigen::Index>(x.rows());
  d.x.resize(n, 1 + columns_.size());
  d.x.col(0).setOnes();
  d.names.push_back("(intercept)");
  for (std::size_t j = 0; j < columns_.size(); ++j) {
    auto v = raw_values(x, columns_[j], knots_[j]);
    for (Eigen::Index i = 0; i < n; ++i)
      d.x(i, j + 1) = (v[i] - columns_[j].center) / columns_[j].scale;
    d.names.push_back(columns_[j].name);
  }
  return d;
}

std::vector<double> FittedLearner::predict(const Covariates& x) const {
  std::vector<double> out(x.rows());
  if (beta_.size() == 0) {
    std::fill(out.begin(), out.end(), bound_prediction(mean_));
    return out;
  }
  if (columns_.empty()) {
    std::fill(out.begin(), out.end(), bound_prediction(expit(beta_(0))));
    return out;
  }
  Eigen::VectorXd eta = design(x).x * beta_;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = bound_prediction(expit(eta(i)));
  return out;
}

FittedLearner fit_glm(const Covariates& x, std::span<const double> y, double ridge,
                      std::span<const double> weights) {
  std::vector<DesignColumn> cols;
  for (const auto& c : x.columns()) cols.push_back({c.name, c.name, -1, 0.0, 1.0});
  std::vector<std::vector<double>> knots(cols.size());
  return fit_design(LearnerKind::glm, std::move(cols), std::move(knots), x, y, ridge, weights, {});
}

std::vector<double> natural_spline_terms(double v, std::span<const double> knots) {
  const std::size_t k = knots.size();
  if (k < 3) return {};
  auto d = [&](std::size_t j) {
    return (cube_plus(v - knots[j]) - cube_plus(v - knots[k - 1])) / (knots[k - 1] - knots[j]);
  };
  const double last = d(k - 2);
  std::vector<double> out(k - 2);
  for (std::size_t j = 0; j + 2 < k; ++j) out[j] = d(j) - last;
  return out;
}

FittedLearner fit_gam(const Covariates& x, std::span<const double> y, int spline_df) {
  bool any_numeric = std::any_of(x.columns().begin(), x.columns().end(),
                                 [](const Column& c) { return c.numeric; });
  if (!any_numeric) {
    FittedLearner f = fit_glm(x, y, 0.0);
    f.kind = LearnerKind::gam;
    return f;
  }
  FitInfo info;
  std::vector<DesignColumn> cols;
  std::vector<std::vector<double>> knots;
  const std::size_t wanted = static_cast<std::size_t>(std::max(spline_df, 1)) + 1;
  for (const auto& c : x.columns()) {
    cols.push_back({c.name, c.name, -1, 0.0, 1.0});
    knots.emplace_back();
    if (!c.numeric) continue;
    std::vector<double> kn;
    for (std::size_t q = 0; q < wanted; ++q) {
      double v = quantile_of(c.values, double(q) / double(wanted - 1));
      if (kn.empty() || v > kn.back()) kn.push_back(v);
    }
    if (kn.size() < wanted) info.knots_reduced = true;
    if (kn.size() < 3) continue;
    for (std::size_t t = 0; t + 2 < kn.size(); ++t) {
      cols.push_back({c.name + "_ns" + std::to_string(t + 1), c.name, int(t), 0.0, 1.0});
      knots.push_back(kn);
    }
  }
  return fit_design(LearnerKind::gam, std::move(cols), std::move(knots), x, y, kFallbackRidge, {},
                    std::move(info));
}

FittedLearner fit_mean(std::span<const double> y) {
  if (y.empty()) throw EstimationError("cannot fit a mean on zero observations");
  double m = std::accumulate(y.begin(), y.end(), 0.0) / double(y.size());
  return FittedLearner::make(LearnerKind::mean, {}, {}, {}, Eigen::VectorXd(), m);
}

FittedLearner fit_learner(const LearnerSpec& spec, const Covariates& x, std::span<const double> y) {
  switch (spec.kind) {
    case LearnerKind::glm: return fit_glm(x, y, spec.ridge);
    case LearnerKind::gam: return fit_gam(x, y, spec.spline_df);
    case LearnerKind::mean: return fit_mean(y);
  }
  throw ConfigError("unknown learner kind");
}

double bernoulli_risk(std::span<const double> y, std::span<const double> p) {
  double risk = 0;
  for (std::size_t i = 0; i < y.size(); ++i)
    risk -= y[i] * std::log(p[i]) + (1 - y[i]) * std::log1p(-p[i]);
  return risk / double(y.size());
}

std::vector<int> stratified_folds(std::span<const double> y, int folds, std::uint64_t seed) {
  std::vector<std::size_t> hi, lo;
  for (std::size_t i = 0; i < y.size(); ++i) (y[i] >= 0.5 ? hi : lo).push_back(i);
  std::mt19937_64 rng(seed);
  std::shuffle(hi.begin(), hi.end(), rng);
  std::shuffle(lo.begin(), lo.end(), rng);
  std::vector<int> fold(y.size());
  std::size_t pos = 0;
  for (auto* group : {&hi, &lo})
    for (auto i : *group) fold[i] = static_cast<int>(pos++ % static_cast<std::size_t>(folds));
  return fold;
}

std::vector<double> simplex_weights(const Eigen::MatrixXd& z, std::span<const double> y,
                                    double tolerance) {
  const Eigen::Index n = z.rows(), k = z.cols();
  std::vector<double> w(k, 0.0);
  if (k == 1) return {1.0};

  auto risk_of = [&](const Eigen::VectorXd& p) {
    double r = 0;
    for (Eigen::Index i = 0; i < n; ++i) r -= y[i] * std::log(p(i)) + (1 - y[i]) * std::log1p(-p(i));
    return r / double(n);
  };
  Eigen::Index best = 0;
  double best_risk = risk_of(z.col(0));
  for (Eigen::Index j = 1; j < k; ++j) {
    double r = risk_of(z.col(j));
    if (r < best_risk) best_risk = r, best = j;
  }
  w[best] = 1.0;
  Eigen::VectorXd p = z.col(best);
  double current = best_risk;

  for (int sweep = 0; sweep < 1000; ++sweep) {
    const double before = current;
    for (Eigen::Index a = 0; a < k; ++a) {
      for (Eigen::Index b = 0; b < k; ++b) {
        if (a == b || w[b] <= 0) continue;
        // Move mass t in [0, w_b] from b to a.
        Eigen::VectorXd dir = z.col(a) - z.col(b);
        auto slope = [&](double t) {
          double g = 0;
          for (Eigen::Index i = 0; i < n; ++i) {
            double q = p(i) + t * dir(i);
            g -= (y[i] / q - (1 - y[i]) / (1 - q)) * dir(i);
          }
          return g / double(n);
        };
        double lo = 0.0, hi = w[b];
        if (slope(lo) >= 0) continue;
        double t = hi;
        if (slope(hi) > 0) {
          for (int it = 0; it < 100; ++it) {
            double mid = 0.5 * (lo + hi);
            (slope(mid) > 0 ? hi : lo) = mid;
          }
          t = 0.5 * (lo + hi);
        }
        Eigen::VectorXd cand = p + t * dir;
        double r = risk_of(cand);
        if (r < current) {
          w[a] += t;
          w[b] -= t;
          if (w[b] < 1e-15) w[b] = 0.0;
          p = cand;
          current = r;
        }
      }
    }
    if (before - current < tolerance) break;
  }
  double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= total;
  return w;
}

std::vector<double> EnsembleModel::predict(const Covariates& x) const {
  if (fits.size() == 1) return fits[0].predict(x);
  std::vector<double> out(x.rows(), 0.0);
  for (std::size_t k = 0; k < fits.size(); ++k) {
    if (weights[k] == 0.0) continue;
    auto p = fits[k].predict(x);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights[k] * p[i];
  }
  for (auto& v : out) v = bound_prediction(v);
  return out;
}

EnsembleModel super_learner(const Covariates& x, std::span<const double> y,
                            std::span<const LearnerSpec> candidates, int folds, std::uint64_t seed,
                            EnsembleMode mode) {
  if (candidates.empty()) throw ConfigError("super learner needs at least one candidate");
  if (folds < 2) throw ConfigError("super learner needs at least 2 folds");
  const std::size_t n = y.size();
  if (n == 0) throw EstimationError("super learner on zero observations");

  EnsembleModel model;
  model.specs.assign(candidates.begin(), candidates.end());
  model.seed = seed;
  model.folds = static_cast<int>(std::min<std::size_t>(folds, n));
  const std::size_t k = candidates.size();

  Eigen::MatrixXd cv_pred(n, k);
  if (n >= 2) {
    auto fold = stratified_folds(y, model.folds, seed);
    for (int v = 0; v < model.folds; ++v) {
      std::vector<std::size_t> train, test;
      for (std::size_t i = 0; i < n; ++i) (fold[i] == v ? test : train).push_back(i);
      if (test.empty()) continue;
      Covariates xtr = x.subset_rows(train), xte = x.subset_rows(test);
      std::vector<double> ytr;
      for (auto i : train) ytr.push_back(y[i]);
      for (std::size_t c = 0; c < k; ++c) {
        auto pred = fit_learner(candidates[c], xtr, ytr).predict(xte);
        for (std::size_t t = 0; t < test.size(); ++t) cv_pred(test[t], c) = pred[t];
      }
    }
  } else {
    cv_pred.setConstant(bound_prediction(y[0]));
  }

  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> col(cv_pred.col(c).data(), cv_pred.col(c).data() + n);
    model.cv_risk.push_back(bernoulli_risk(y, col));
  }
  if (k == 1) {
    model.weights = {1.0};
  } else if (mode == EnsembleMode::discrete) {
    model.weights.assign(k, 0.0);
    model.weights[std::min_element(model.cv_risk.begin(), model.cv_risk.end()) -
                  model.cv_risk.begin()] = 1.0;
  } else {
    model.weights = simplex_weights(cv_pred, y);
  }
  Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(model.weights.data(), k);
  Eigen::VectorXd ens = cv_pred * w;
  model.ensemble_cv_risk = bernoulli_risk(y, std::span<const double>(ens.data(), n));

  for (std::size_t c = 0; c < k; ++c) model.fits.push_back(fit_learner(candidates[c], x, y));
  return model;
}

Eigen::VectorXd fit_offset_logistic(const Eigen::MatrixXd& h, std::span<const double> offset,
                                    std::span<const double> y, std::span<const double> weights) {
  const Eigen::Index n = h.rows(), d = h.cols();
  Eigen::VectorXd eps = Eigen::VectorXd::Zero(d);
  std::vector<Eigen::Index> active;
  for (Eigen::Index j = 0; j < d; ++j) {
    double norm = 0;
    for (Eigen::Index i = 0; i < n; ++i) norm += weight_at(weights, i) * h(i, j) * h(i, j);
    if (norm > 0) active.push_back(j);
  }
  if (active.empty()) return eps;
  const Eigen::Index m = static_cast<Eigen::Index>(active.size());

  auto loglik = [&](const Eigen::VectorXd& e) {
    double ll = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double eta = offset[i] + h.row(i).dot(e);
      double log1pexp = eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
      ll += weight_at(weights, i) * (y[i] * eta - log1pexp);
    }
    return ll;
  };

  double ll = loglik(eps);
  for (int it = 0; it < 200; ++it) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(m);
    Eigen::MatrixXd info = Eigen::MatrixXd::Zero(m, m);
    for (Eigen::Index i = 0; i < n; ++i) {
      double wi = weight_at(weights, i);
      if (wi == 0) continue;
      double mu = expit(offset[i] + h.row(i).dot(eps));
      double v = std::max(mu * (1 - mu), 1e-300);
      for (Eigen::Index a = 0; a < m; ++a) {
        double ha = h(i, active[a]);
        grad(a) += wi * ha * (y[i] - mu);
        for (Eigen::Index b = 0; b < m; ++b) info(a, b) += wi * v * ha * h(i, active[b]);
      }
    }
    Eigen::VectorXd step = info.ldlt().solve(grad);
    if (!step.allFinite()) break;
    Eigen::VectorXd full = Eigen::VectorXd::Zero(d);
    for (Eigen::Index a = 0; a < m; ++a) full(active[a]) = step(a);
    double scale = 1.0;
    Eigen::VectorXd next = eps + full;
    double next_ll = loglik(next);
    for (int half = 0; half < 40 && next_ll < ll - 1e-14 * std::fabs(ll); ++half) {
      scale *= 0.5;
      next = eps + scale * full;
      next_ll = loglik(next);
    }
    eps = next;
    ll = next_ll;
    if ((scale * full).cwiseAbs().maxCoeff() < 1e-13 * std::max(1.0, eps.cwiseAbs().maxCoeff()))
      break;
  }
  return eps;
}

} // namespace crt
