#include "crt/runner.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "crt/error.hpp"

namespace crt {

// ---------------------------------------------------------------------------
// Names

std::string_view to_string(EndpointKind k) {
  switch (k) {
    case EndpointKind::viral_suppression: return "viral_suppression";
    case EndpointKind::mortality: return "mortality";
    case EndpointKind::transfer: return "transfer";
    case EndpointKind::engaged_2y: return "engaged_2y";
    case EndpointKind::retained: return "retained";
    case EndpointKind::lapse: return "lapse";
    case EndpointKind::dtg_switch: return "dtg_switch";
    case EndpointKind::second_line_switch: return "second_line_switch";
    case EndpointKind::joint_switch_and_suppression: return "joint_switch_and_suppression";
    case EndpointKind::satisfaction_mean: return "satisfaction_mean";
  }
  return "?";
}

EndpointKind parse_endpoint_kind(std::string_view s) {
  for (auto k : {EndpointKind::viral_suppression, EndpointKind::mortality, EndpointKind::transfer,
                 EndpointKind::engaged_2y, EndpointKind::retained, EndpointKind::lapse,
                 EndpointKind::dtg_switch, EndpointKind::second_line_switch,
                 EndpointKind::joint_switch_and_suppression, EndpointKind::satisfaction_mean})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown endpoint '" + std::string(s) + "'");
}

bool is_time_to_event(EndpointKind k) {
  return k == EndpointKind::lapse || k == EndpointKind::dtg_switch ||
         k == EndpointKind::second_line_switch;
}

Direction EndpointSpec::benefit() const {
  if (direction) return *direction;
  return kind == EndpointKind::mortality || kind == EndpointKind::lapse ? Direction::decrease
                                                                        : Direction::increase;
}

Sidedness EndpointSpec::test() const {
  if (sided) return *sided;
  if (kind == EndpointKind::dtg_switch || kind == EndpointKind::second_line_switch ||
      kind == EndpointKind::lapse)
    return Sidedness::two;
  return benefit() == Direction::increase ? Sidedness::one_upper : Sidedness::one_lower;
}

std::string_view to_string(Estimator e) {
  return e == Estimator::two_stage ? "two_stage" : "single_stage";
}

Estimator parse_estimator(std::string_view s) {
  if (s == "two_stage") return Estimator::two_stage;
  if (s == "single_stage") return Estimator::single_stage;
  throw ConfigError("unknown estimator '" + std::string(s) + "'");
}

std::string_view to_string(PredictorOutcome o) {
  switch (o) {
    case PredictorOutcome::failure: return "failure";
    case PredictorOutcome::nonsuppression_or_death: return "nonsuppression_or_death";
    case PredictorOutcome::suppression: return "suppression";
  }
  return "?";
}

PredictorOutcome parse_predictor_outcome(std::string_view s) {
  for (auto o : {PredictorOutcome::failure, PredictorOutcome::nonsuppression_or_death,
                 PredictorOutcome::suppression})
    if (s == to_string(o)) return o;
  throw ConfigError("unknown predictor outcome '" + std::string(s) + "'");
}

const std::vector<std::string>& default_predictors() {
  static const std::vector<std::string> p{"occupation", "marital_status", "parent", "alcohol",
                                          "mobility"};
  return p;
}

namespace {

const std::vector<std::string> kSubgroupVariables{"country", "sex", "age_group",
                                                  "baseline_care_status", "baseline_art_regimen",
                                                  "baseline_suppression"};
const std::vector<std::string> kStratumVariables{"dtg_switch", "second_line", "engaged_2y",
                                                 "postpartum_6m", "postpartum_12m"};
const std::vector<std::string> kIndividualCandidates{"age", "sex", "baseline_suppressed"};

bool contains(const std::vector<std::string>& v, std::string_view s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

std::string join(const std::vector<std::string>& v, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? std::string(1, sep) : "") + v[i];
  return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Plans

const std::vector<std::string>& plan_keys() {
  static const std::vector<std::string> keys{
      "preset", "name", "endpoint", "horizon_months", "direction", "sided", "item", "population",
      "enrollment_cutoff", "vl_threshold", "transfer_handling", "death_handling",
      "missing_handling", "estimator", "stage1", "stage1_adjustment", "learners", "learner_folds",
      "ensemble", "adaptive", "include_both", "fixed_adjustment", "weights", "scale",
      "individual_candidates", "subgroup_variable", "subgroup_level", "stratify_by", "stratum",
      "exclude_dtg_baseline", "exclude_clinics", "seed"};
  return keys;
}

AnalysisPlan AnalysisPlan::from_config(const KeyValueConfig& cfg) {
  AnalysisPlan p = cfg.has("preset") ? preset(*cfg.get("preset")) : AnalysisPlan{};
  if (auto v = cfg.get("name")) p.name = *v;
  if (auto v = cfg.get("endpoint")) p.endpoint.kind = parse_endpoint_kind(*v);
  p.endpoint.horizon_months = cfg.get_double("horizon_months", p.endpoint.horizon_months);
  if (auto v = cfg.get("direction")) p.endpoint.direction = parse_direction(*v);
  if (auto v = cfg.get("sided")) p.endpoint.sided = parse_sidedness(*v);
  if (auto v = cfg.get("item")) p.endpoint.item = *v;
  if (auto v = cfg.get("population"))
    p.population = parse_population(*v) == Population::primary ? PopulationSpec::primary()
                                                                : PopulationSpec::secondary();
  if (auto v = cfg.get("enrollment_cutoff"))
    p.population.enrollment_cutoff = *v == "none" ? std::nullopt : std::optional<Date>(parse_date(*v));
  p.population.vl_threshold = cfg.get_double("vl_threshold", p.population.vl_threshold);
  if (auto v = cfg.get("transfer_handling")) p.population.transfer_handling = parse_transfer_handling(*v);
  if (auto v = cfg.get("death_handling")) p.population.death_handling = parse_death_handling(*v);
  if (auto v = cfg.get("missing_handling")) p.population.missing_handling = parse_missing_handling(*v);
  if (auto v = cfg.get("estimator")) p.estimator = parse_estimator(*v);
  if (auto v = cfg.get("stage1")) p.stage1 = parse_stage1_method(*v);
  if (cfg.has("stage1_adjustment")) p.stage1_adjustment = cfg.get_list("stage1_adjustment");
  if (cfg.has("learners")) {
    p.learners.candidates.clear();
    for (const auto& l : cfg.get_list("learners"))
      p.learners.candidates.push_back({parse_learner_kind(l)});
  }
  p.learners.folds = static_cast<int>(cfg.get_int("learner_folds", p.learners.folds));
  if (auto v = cfg.get("ensemble")) {
    if (*v == "convex") p.learners.mode = EnsembleMode::convex;
    else if (*v == "discrete") p.learners.mode = EnsembleMode::discrete;
    else throw ConfigError("ensemble must be convex or discrete");
  }
  p.adaptive = cfg.get_bool("adaptive", p.adaptive);
  p.include_both = cfg.get_bool("include_both", p.include_both);
  if (auto v = cfg.get("fixed_adjustment")) p.fixed_adjustment = *v;
  if (auto v = cfg.get("weights")) p.weights = parse_weight_scheme(*v);
  if (auto v = cfg.get("scale")) p.scale = parse_scale(*v);
  if (cfg.has("individual_candidates")) p.individual_candidates = cfg.get_list("individual_candidates");
  if (cfg.has("subgroup_variable") || cfg.has("subgroup_level"))
    p.subgroup = Subgroup{cfg.get_or("subgroup_variable", ""), cfg.get_or("subgroup_level", "")};
  if (cfg.has("stratify_by") || cfg.has("stratum"))
    p.stratum = Stratum{cfg.get_or("stratify_by", ""), cfg.get_or("stratum", "")};
  p.exclude_dtg_baseline = cfg.get_bool("exclude_dtg_baseline", p.exclude_dtg_baseline);
  if (cfg.has("exclude_clinics")) p.exclude_clinics = cfg.get_list("exclude_clinics");
  p.seed = static_cast<std::uint64_t>(cfg.get_int("seed", static_cast<long>(p.seed)));
  p.learners.seed = p.seed;
  if (auto unknown = cfg.unknown_keys(plan_keys()); !unknown.empty())
    throw ConfigError("unknown plan key(s): " + join(unknown));
  p.validate();
  return p;
}

void AnalysisPlan::validate() const {
  population.validate();
  if (learners.candidates.empty()) throw ConfigError("plan needs at least one learner");
  if (subgroup) {
    if (!contains(kSubgroupVariables, subgroup->variable))
      throw ConfigError("subgroup variable '" + subgroup->variable + "' is not prespecified");
    if (estimator != Estimator::single_stage)
      throw ConfigError("subgroup analyses use estimator=single_stage");
  }
  if (stratum) {
    if (!contains(kStratumVariables, stratum->variable))
      throw ConfigError("unknown stratify_by '" + stratum->variable + "'");
    if (stratum->level != "yes" && stratum->level != "no")
      throw ConfigError("stratum must be yes or no");
  }
  if (is_time_to_event(endpoint.kind) && estimator != Estimator::two_stage)
    throw ConfigError("time-to-event endpoints use estimator=two_stage");
  if (is_time_to_event(endpoint.kind) && !(endpoint.horizon_months > 0))
    throw ConfigError("horizon_months must be positive");
  if (endpoint.kind == EndpointKind::transfer &&
      population.transfer_handling != TransferHandling::include)
    throw ConfigError("the transfer endpoint needs transfer_handling=include (secondary population)");
  if (endpoint.kind == EndpointKind::satisfaction_mean && scale != Scale::mean_difference)
    throw ConfigError("satisfaction endpoints use scale=mean_difference");
  if (endpoint.kind != EndpointKind::satisfaction_mean && scale == Scale::mean_difference)
    throw ConfigError("mean_difference applies to satisfaction endpoints only");
  for (const auto& c : individual_candidates)
    if (!contains(kIndividualCandidates, c))
      throw ConfigError("individual adjustment candidate '" + c + "' is not prespecified");
  for (const auto& c : stage1_adjustment)
    if (c != "age" && c != "sex" && c != "baseline_suppressed" && c != "outmigration")
      throw ConfigError("stage-1 adjustment '" + c + "' is not prespecified");
  if (!adaptive && fixed_adjustment != kAdjNone && fixed_adjustment != kAdjYouth &&
      fixed_adjustment != kAdjSuppression && fixed_adjustment != kAdjBoth)
    throw ConfigError("fixed_adjustment '" + fixed_adjustment + "' is not prespecified");
}

std::string AnalysisPlan::canonical() const {
  std::ostringstream o;
  o << "endpoint=" << to_string(endpoint.kind) << '\n'
    << "horizon_months=" << endpoint.horizon_months << '\n'
    << "direction=" << to_string(endpoint.benefit()) << '\n'
    << "sided=" << to_string(endpoint.test()) << '\n'
    << "item=" << endpoint.item << '\n'
    << population.canonical() << '\n'
    << "estimator=" << to_string(estimator) << '\n'
    << "stage1=" << to_string(stage1) << '\n'
    << "stage1_adjustment=" << join(stage1_adjustment) << '\n'
    << "learners=";
  for (std::size_t i = 0; i < learners.candidates.size(); ++i)
    o << (i ? "," : "") << to_string(learners.candidates[i].kind);
  o << "\nlearner_folds=" << learners.folds << '\n'
    << "ensemble=" << (learners.mode == EnsembleMode::convex ? "convex" : "discrete") << '\n'
    << "adaptive=" << adaptive << '\n'
    << "include_both=" << include_both << '\n'
    << "fixed_adjustment=" << fixed_adjustment << '\n'
    << "weights=" << to_string(weights) << '\n'
    << "scale=" << to_string(scale) << '\n'
    << "individual_candidates=" << join(individual_candidates) << '\n'
    << "subgroup=" << (subgroup ? subgroup->variable + ":" + subgroup->level : "") << '\n'
    << "stratum=" << (stratum ? stratum->variable + ":" + stratum->level : "") << '\n'
    << "exclude_dtg_baseline=" << exclude_dtg_baseline << '\n'
    << "exclude_clinics=" << join(exclude_clinics) << '\n'
    << "seed=" << seed << '\n';
  return o.str();
}

std::string AnalysisPlan::hash() const { return hex64(fnv1a64(canonical())); }

// ---------------------------------------------------------------------------
// Presets

namespace {

struct PresetDef {
  std::string name;
  AnalysisPlan plan;
};

AnalysisPlan base_plan(std::string name) {
  AnalysisPlan p;
  p.name = std::move(name);
  return p;
}

std::string horizon_label(double h) { return std::to_string(static_cast<int>(h)) + "m"; }

std::vector<PresetDef> build_presets() {
  std::vector<PresetDef> out;
  auto add = [&](AnalysisPlan p) { out.push_back({p.name, std::move(p)}); };

  add(base_plan("primary"));
  {
    auto p = base_plan("primary_difference");
    p.scale = Scale::risk_difference;
    add(p);
  }
  {
    auto p = base_plan("primary_unadjusted");
    p.adaptive = false;
    add(p);
  }
  {
    auto p = base_plan("secondary_population");
    p.population = PopulationSpec::secondary();
    add(p);
  }
  {
    auto p = base_plan("secondary_sequential");
    p.population = PopulationSpec::secondary();
    p.population.missing_handling = MissingHandling::adjust;
    p.stage1 = Stage1Method::tmle_sequential;
    add(p);
  }
  {
    auto p = base_plan("sens_exclude_missing");
    p.population.missing_handling = MissingHandling::exclude;
    add(p);
  }
  {
    auto p = base_plan("sens_adjust_missing");
    p.population.missing_handling = MissingHandling::adjust;
    p.stage1 = Stage1Method::tmle_missing;
    add(p);
  }
  {
    auto p = base_plan("sens_transfer_success");
    p.population.transfer_handling = TransferHandling::success;
    add(p);
  }
  {
    auto p = base_plan("sens_censor_death");
    p.population.death_handling = DeathHandling::censor;
    p.stage1 = Stage1Method::tmle_missing;
    add(p);
  }
  {
    auto p = base_plan("sens_size_weights");
    p.weights = WeightScheme::size;
    add(p);
  }
  {
    auto p = base_plan("sens_single_stage");
    p.estimator = Estimator::single_stage;
    add(p);
  }
  {
    auto p = base_plan("sens_threshold_50");
    p.population.vl_threshold = 50;
    add(p);
  }

  const std::vector<std::pair<std::string, std::vector<std::string>>> groups{
      {"country", {"kenya", "uganda"}},
      {"sex", {"female", "male"}},
      {"age_group", {"15-19", "20-24"}},
      {"baseline_care_status", {"recently_engaged", "engaged", "re_engaging"}},
      {"baseline_art_regimen", {"dtg", "non_dtg"}},
      {"baseline_suppression", {"suppressed", "unsuppressed"}}};
  for (const auto& [var, levels] : groups)
    for (const auto& lvl : levels) {
      auto p = base_plan("subgroup_" + var + "_" + lvl);
      p.estimator = Estimator::single_stage;
      p.subgroup = Subgroup{var, lvl};
      add(p);
    }

  for (double h : {6.0, 12.0, 18.0, 24.0}) {
    auto p = base_plan("dtg_switch_" + horizon_label(h));
    p.endpoint.kind = EndpointKind::dtg_switch;
    p.endpoint.horizon_months = h;
    p.exclude_dtg_baseline = true;
    add(p);
  }
  for (std::string lvl : {"yes", "no"}) {
    auto p = base_plan(std::string("dtg_stratum_") + (lvl == "yes" ? "switched" : "not_switched"));
    p.exclude_dtg_baseline = true;
    p.stratum = Stratum{"dtg_switch", lvl};
    add(p);
  }
  {
    auto p = base_plan("dtg_joint");
    p.endpoint.kind = EndpointKind::joint_switch_and_suppression;
    p.exclude_dtg_baseline = true;
    add(p);
  }
  {
    auto p = base_plan("mediator_second_line_24m");
    p.endpoint.kind = EndpointKind::second_line_switch;
    add(p);
  }
  for (std::string var : {"second_line", "engaged_2y", "postpartum_6m", "postpartum_12m"})
    for (std::string lvl : {"yes", "no"}) {
      auto p = base_plan("mediator_" + var + "_" + lvl);
      p.estimator = Estimator::single_stage;
      p.stratum = Stratum{var, lvl};
      add(p);
    }

  {
    auto p = base_plan("mortality");
    p.endpoint.kind = EndpointKind::mortality;
    p.estimator = Estimator::single_stage;
    add(p);
  }
  {
    auto p = base_plan("transfers");
    p.endpoint.kind = EndpointKind::transfer;
    p.estimator = Estimator::single_stage;
    p.population = PopulationSpec::secondary();
    add(p);
  }
  {
    auto p = base_plan("engaged_2y");
    p.endpoint.kind = EndpointKind::engaged_2y;
    p.estimator = Estimator::single_stage;
    add(p);
  }
  {
    auto p = base_plan("engaged_2y_sensitivity");
    p.endpoint.kind = EndpointKind::engaged_2y;
    p.estimator = Estimator::single_stage;
    p.population.transfer_handling = TransferHandling::success;
    p.population.death_handling = DeathHandling::censor;
    add(p);
  }
  {
    auto p = base_plan("retained");
    p.endpoint.kind = EndpointKind::retained;
    p.estimator = Estimator::single_stage;
    add(p);
  }
  for (double h : {6.0, 12.0, 18.0, 24.0}) {
    auto p = base_plan("lapse_" + horizon_label(h));
    p.endpoint.kind = EndpointKind::lapse;
    p.endpoint.horizon_months = h;
    add(p);
  }
  {
    auto p = base_plan("satisfaction_composite");
    p.endpoint.kind = EndpointKind::satisfaction_mean;
    p.scale = Scale::mean_difference;
    add(p);
  }
  return out;
}

const std::vector<PresetDef>& presets() {
  static const std::vector<PresetDef> p = build_presets();
  return p;
}

} // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& p : presets()) out.push_back(p.name);
  return out;
}

AnalysisPlan preset(std::string_view name) {
  for (const auto& p : presets())
    if (p.name == name) return p.plan;
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Outcome construction

namespace {

struct Outcome {
  int delta = 1;
  double y = 0.0;
};

Date endpoint_date(const AnalysisRow& r) {
  if (r.classification.endpoint_vl) return r.classification.endpoint_vl->date;
  return r.window->end;
}

bool event_by_endpoint(const std::optional<Date>& d, const AnalysisRow& r) {
  return d && *d <= endpoint_date(r);
}

bool birth_within(const AnalysisRow& r, long days) {
  Date end = endpoint_date(r);
  for (Date b : r.record.birth_dates)
    if (b <= end && days_between(b, end) <= days) return true;
  return false;
}

bool in_stratum(const AnalysisRow& r, const Stratum& s) {
  bool yes = false;
  if (s.variable == "dtg_switch") yes = event_by_endpoint(r.record.dtg_switch_date, r);
  else if (s.variable == "second_line") yes = event_by_endpoint(r.record.second_line_date, r);
  else if (s.variable == "engaged_2y") yes = engagement_indicators(r.record, *r.window).engaged_2y;
  else if (s.variable == "postpartum_6m") yes = birth_within(r, kSixMonthDays);
  else if (s.variable == "postpartum_12m") yes = birth_within(r, 365);
  return yes == (s.level == "yes");
}

std::string subgroup_level(const ParticipantRecord& r, const std::string& var) {
  if (var == "country") return r.country == Country::kenya ? "kenya" : "uganda";
  if (var == "sex") return std::string(to_string(r.sex));
  if (var == "age_group") return r.age <= 19 ? "15-19" : "20-24";
  if (var == "baseline_care_status") return std::string(to_string(r.baseline_care_status));
  if (var == "baseline_art_regimen") return r.on_dtg_baseline() ? "dtg" : "non_dtg";
  if (var == "baseline_suppression")
    return r.baseline_suppressed ? (*r.baseline_suppressed ? "suppressed" : "unsuppressed") : "unknown";
  throw ConfigError("unknown subgroup variable '" + var + "'");
}

/// Suppression-type outcome from the classification under the plan's rules.
std::optional<Outcome> suppression_outcome(const AnalysisRow& r, MissingHandling mh) {
  switch (r.classification.status) {
    case EndpointStatus::suppressed:
    case EndpointStatus::transfer_success: return Outcome{1, 1.0};
    case EndpointStatus::unsuppressed:
    case EndpointStatus::died: return Outcome{1, 0.0};
    case EndpointStatus::missing_vl:
      return mh == MissingHandling::failure ? Outcome{1, 0.0} : Outcome{0, 0.0};
    case EndpointStatus::censored: return Outcome{0, 0.0};
    default: return std::nullopt;
  }
}

double item_score(const SurveyResponse& s, const std::vector<SurveyItem>& items) {
  for (const auto& it : items)
    if (it.question_id == s.question_id && it.reverse_coded) return 6.0 - s.score;
  return s.score;
}

std::optional<Outcome> outcome_for(const AnalysisPlan& plan, const AnalysisRow& r,
                                   const std::vector<SurveyItem>& items) {
  const auto& rec = r.record;
  switch (plan.endpoint.kind) {
    case EndpointKind::viral_suppression:
      return suppression_outcome(r, plan.population.missing_handling);
    case EndpointKind::joint_switch_and_suppression: {
      auto o = suppression_outcome(r, plan.population.missing_handling);
      if (o && o->delta) o->y = o->y * event_by_endpoint(rec.dtg_switch_date, r);
      return o;
    }
    case EndpointKind::mortality: {
      Date mark = r.window->two_year_mark;
      return Outcome{1, double(rec.death_date && *rec.death_date <= mark)};
    }
    case EndpointKind::transfer: {
      Date mark = r.window->two_year_mark;
      return Outcome{1, double(rec.transfer_date && *rec.transfer_date <= mark)};
    }
    case EndpointKind::engaged_2y:
    case EndpointKind::retained: {
      if (r.classification.status == EndpointStatus::transfer_success) return Outcome{1, 1.0};
      if (plan.population.death_handling == DeathHandling::censor && rec.death_date &&
          *rec.death_date < r.window->start)
        return Outcome{0, 0.0};
      auto e = engagement_indicators(rec, *r.window);
      return Outcome{1, double(plan.endpoint.kind == EndpointKind::engaged_2y ? e.engaged_2y : e.retained)};
    }
    case EndpointKind::satisfaction_mean: {
      double sum = 0;
      int n = 0;
      for (const auto& s : rec.satisfaction) {
        if (plan.endpoint.item != "composite" && s.question_id != plan.endpoint.item) continue;
        sum += item_score(s, items);
        ++n;
      }
      if (n == 0) return std::nullopt;
      return Outcome{1, sum / n};
    }
    default: return std::nullopt;
  }
}

std::vector<const AnalysisRow*> plan_rows(const AnalysisPlan& plan, const AnalysisSet& set) {
  std::vector<const AnalysisRow*> rows;
  for (const auto& r : set.rows) {
    if (plan.exclude_dtg_baseline && r.record.on_dtg_baseline()) continue;
    if (plan.subgroup && subgroup_level(r.record, plan.subgroup->variable) != plan.subgroup->level)
      continue;
    if (plan.stratum && !in_stratum(r, *plan.stratum)) continue;
    rows.push_back(&r);
  }
  return rows;
}

TrialData drop_clinics(const TrialData& data, const std::vector<std::string>& ids) {
  if (ids.empty()) return data;
  std::set<std::string> drop(ids.begin(), ids.end());
  TrialData out;
  out.survey = data.survey;
  out.database_closure = data.database_closure;
  for (const auto& c : data.clinics)
    if (!drop.count(c.clinic_id)) out.clinics.push_back(c);
  for (const auto& p : data.participants)
    if (!drop.count(p.clinic_id)) out.participants.push_back(p);
  if (out.clinics.size() + drop.size() != data.clinics.size())
    throw ConfigError("exclude_clinics names an unknown clinic");
  return out;
}

double y_max_for(EndpointKind k) { return k == EndpointKind::satisfaction_mean ? 5.0 : 1.0; }
double y_min_for(EndpointKind k) { return k == EndpointKind::satisfaction_mean ? 1.0 : 0.0; }

TmleOptions tmle_options(const AnalysisPlan& plan) {
  TmleOptions o;
  o.outcome = plan.learners;
  o.missingness = plan.learners;
  o.y_min = y_min_for(plan.endpoint.kind);
  o.y_max = y_max_for(plan.endpoint.kind);
  return o;
}

TwoStageOptions two_stage_options(const AnalysisPlan& plan) {
  TwoStageOptions o;
  o.stage1.method = plan.stage1;
  o.stage1.tmle = tmle_options(plan);
  o.stage2.weights = plan.weights;
  o.stage2.scale = plan.scale;
  o.stage2.direction = plan.endpoint.benefit();
  o.stage2.y_min = y_min_for(plan.endpoint.kind);
  o.stage2.y_max = y_max_for(plan.endpoint.kind);
  o.adaptive = plan.adaptive;
  o.candidates = default_clinic_candidates(plan.include_both);
  o.fixed_adjustment = plan.fixed_adjustment;
  return o;
}

/// Rejects ratio contrasts when an arm has no events at all.
void check_ratio_estimable(const AnalysisPlan& plan, std::span<const AnalysisRow* const> rows,
                           const std::vector<Outcome>& outcomes) {
  if (plan.scale != Scale::risk_ratio) return;
  double s[2] = {0, 0};
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (outcomes[i].delta) s[rows[i]->arm == Arm::intervention] += outcomes[i].y;
  if (s[0] == 0 || s[1] == 0)
    throw EstimationError("no events in the " + std::string(s[0] == 0 ? "control" : "intervention") +
                          " arm; the risk ratio is inestimable");
}

void run_two_stage(const AnalysisPlan& plan, const AnalysisSet& set,
                   const std::vector<const AnalysisRow*>& rows, const std::vector<Outcome>& outs,
                   PlanResult& res) {
  auto opts = two_stage_options(plan);
  std::vector<std::vector<std::size_t>> by_clinic(set.clinics.size());
  for (std::size_t i = 0; i < rows.size(); ++i) by_clinic[rows[i]->clinic_index].push_back(i);

  std::vector<ClusterSample> samples;
  for (std::size_t j = 0; j < set.clinics.size(); ++j) {
    ClusterSample c;
    c.clinic_id = set.clinics[j].clinic_id;
    c.arm = set.clinics[j].arm;
    std::vector<const AnalysisRow*> crow;
    for (auto i : by_clinic[j]) {
      crow.push_back(rows[i]);
      c.delta.push_back(outs[i].delta);
      c.y.push_back(outs[i].y);
    }
    if (crow.empty())
      throw DataError("clinic " + c.clinic_id +
                      " has no participants in this analysis cell; use estimator=single_stage");
    if (plan.stage1 != Stage1Method::empirical) {
      c.w = build_covariates(crow, plan.stage1_adjustment);
      auto m = build_covariates(crow, std::vector<std::string>{"outmigration"});
      for (double v : m.column(0).values) c.m.push_back(static_cast<int>(v));
    }
    samples.push_back(std::move(c));
  }
  auto r = two_stage_estimate(samples, set.clinics, opts);
  res.stage1 = std::move(r.stage1);
  res.effect = r.effect;
  res.selected = r.selection.selected;
  res.candidates = r.selection.candidates;
  res.cv_variance = r.selection.cv_variance;
  res.diagnostics.insert(res.diagnostics.end(), r.selection.diagnostics.begin(),
                         r.selection.diagnostics.end());
}

void run_single_stage(const AnalysisPlan& plan, const std::vector<const AnalysisRow*>& rows,
                      const std::vector<Outcome>& outs, PlanResult& res) {
  IndividualData d;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    d.cluster.push_back(static_cast<int>(rows[i]->clinic_index));
    d.z.push_back(rows[i]->arm == Arm::intervention);
    d.delta.push_back(outs[i].delta);
    d.y.push_back(outs[i].y);
  }
  IndividualOptions opt;
  opt.tmle = tmle_options(plan);
  opt.scale = plan.scale;
  opt.direction = plan.endpoint.benefit();
  opt.adjust_missing = std::any_of(d.delta.begin(), d.delta.end(), [](int v) { return v == 0; });
  Covariates pool = build_covariates(rows, plan.individual_candidates);

  std::string selected = "none";
  if (plan.adaptive) {
    IndividualOptions sel = opt;
    sel.tmle.outcome = LearnerConfig::glm_only();
    sel.tmle.missingness = LearnerConfig::glm_only();
    d.w = Covariates(rows.size());
    auto s = select_individual_adjustment(d, pool, plan.individual_candidates, sel);
    selected = s.selected;
    res.candidates = s.candidates;
    res.cv_variance = s.cv_variance;
    res.diagnostics.insert(res.diagnostics.end(), s.diagnostics.begin(), s.diagnostics.end());
  }
  std::vector<std::string> cols;
  if (selected != "none")
    for (const auto& c : pool.columns())
      if (c.name == selected || c.name.rfind(selected + "_", 0) == 0) cols.push_back(c.name);
  d.w = pool.select(cols);
  auto fit = tmle_effect_individual(d, opt);
  res.effect = fit.effect;
  res.effect.adjustment = selected;
  res.effect.weights = "individual";
  res.selected = selected;
}

} // namespace

std::string data_hash(const TrialData& data) {
  auto parts = data.participants;
  std::sort(parts.begin(), parts.end(),
            [](const auto& a, const auto& b) { return a.participant_id < b.participant_id; });
  auto clinics = data.clinics;
  std::sort(clinics.begin(), clinics.end(),
            [](const auto& a, const auto& b) { return a.clinic_id < b.clinic_id; });
  std::ostringstream o;
  write_participants(o, parts);
  write_clinics(o, clinics);
  write_survey(o, data.survey);
  o << format_date(data.database_closure);
  return hex64(fnv1a64(o.str()));
}

PlanResult run_plan(const AnalysisPlan& plan, const TrialData& full) {
  return run_plan(plan, full, data_hash(full));
}

PlanResult run_plan(const AnalysisPlan& plan, const TrialData& full, const std::string& data_key) {
  plan.validate();
  PlanResult res;
  res.provenance.plan = plan.name;
  res.provenance.spec_hash = plan.hash();
  res.provenance.seed = plan.seed;
  res.provenance.data_hash = data_key;
  res.endpoint = plan.endpoint;
  res.estimator = plan.estimator;
  res.effect.scale = plan.scale;
  res.effect.direction = plan.endpoint.benefit();

  TrialData data = drop_clinics(full, plan.exclude_clinics);
  auto set = select_population(data.participants, data.clinics, plan.population, data.database_closure);
  auto rows = plan_rows(plan, set);

  try {
    if (is_time_to_event(plan.endpoint.kind)) {
      EventKind kind = plan.endpoint.kind == EndpointKind::lapse ? EventKind::lapse
                       : plan.endpoint.kind == EndpointKind::dtg_switch ? EventKind::dtg_switch
                                                                        : EventKind::second_line;
      res.n_rows = rows.size();
      if (rows.empty()) throw EstimationError("no participants in this analysis");
      auto r = two_stage_time_effect(rows, set.clinics, kind, plan.endpoint.horizon_months,
                                     two_stage_options(plan), set.database_closure);
      res.stage1 = std::move(r.stage1);
      res.effect = r.effect;
      res.selected = r.selection.selected;
      res.candidates = r.selection.candidates;
      res.cv_variance = r.selection.cv_variance;
      res.diagnostics = r.selection.diagnostics;
      return res;
    }

    std::vector<const AnalysisRow*> used;
    std::vector<Outcome> outs;
    for (const auto* r : rows) {
      auto o = outcome_for(plan, *r, data.survey);
      if (!o) {
        ++res.n_excluded_endpoint;
        continue;
      }
      used.push_back(r);
      outs.push_back(*o);
    }
    res.n_rows = used.size();
    if (used.empty()) throw EstimationError("no participants in this analysis");
    check_ratio_estimable(plan, used, outs);
    if (plan.estimator == Estimator::two_stage) run_two_stage(plan, set, used, outs, res);
    else run_single_stage(plan, used, outs, res);
  } catch (const EstimationError& e) {
    res.estimable = false;
    res.note = e.what();
  }
  return res;
}

// ---------------------------------------------------------------------------
// Predictor analyses

namespace {

double predictor_value(const ParticipantRecord& r, const std::string& name) {
  if (name == "occupation") return r.employment == "employed";
  if (name == "marital_status") return r.marital_status == "married";
  if (name == "parent") return r.n_children.value_or(0) > 0;
  if (name == "alcohol") return r.alcohol_use == "any";
  if (name == "mobility") return r.mobility == "mobile";
  throw ConfigError("unknown predictor '" + name + "'");
}

Covariates predictor_covariates(std::span<const AnalysisRow* const> rows,
                                const std::vector<std::string>& adjustment) {
  std::vector<std::string> base;
  bool care = false;
  for (const auto& a : adjustment) {
    if (a == "baseline_care_status") care = true;
    else base.push_back(a);
  }
  Covariates cov = build_covariates(rows, base);
  if (care) {
    std::vector<double> engaged(rows.size()), reengaging(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      engaged[i] = rows[i]->record.baseline_care_status == CareStatus::engaged;
      reengaging[i] = rows[i]->record.baseline_care_status == CareStatus::re_engaging;
    }
    cov.add("care_engaged", std::move(engaged), false);
    cov.add("care_re_engaging", std::move(reengaging), false);
  }
  return cov;
}

} // namespace

std::vector<PredictorRow> run_predictor_analysis(const TrialData& data, Arm arm,
                                                 const PredictorOptions& options) {
  PopulationSpec pop = options.population;
  switch (options.outcome) {
    case PredictorOutcome::failure: pop.missing_handling = MissingHandling::failure; break;
    case PredictorOutcome::nonsuppression_or_death: pop.missing_handling = MissingHandling::adjust; break;
    case PredictorOutcome::suppression:
      pop.missing_handling = MissingHandling::adjust;
      pop.death_handling = DeathHandling::censor;
      break;
  }
  if (options.exclude_missing) pop.missing_handling = MissingHandling::exclude;
  auto set = select_population(data.participants, data.clinics, pop, data.database_closure);

  std::vector<const AnalysisRow*> rows;
  IndividualData base;
  for (const auto& r : set.rows) {
    if (r.arm != arm) continue;
    Outcome o;
    auto s = r.classification.status;
    switch (options.outcome) {
      case PredictorOutcome::failure:
        o = {1, double(s != EndpointStatus::suppressed && s != EndpointStatus::transfer_success)};
        break;
      case PredictorOutcome::nonsuppression_or_death:
        if (s == EndpointStatus::missing_vl || s == EndpointStatus::censored) o = {0, 0.0};
        else o = {1, double(s == EndpointStatus::unsuppressed || s == EndpointStatus::died)};
        break;
      case PredictorOutcome::suppression:
        if (s == EndpointStatus::missing_vl || s == EndpointStatus::censored) o = {0, 0.0};
        else o = {1, double(s == EndpointStatus::suppressed || s == EndpointStatus::transfer_success)};
        break;
    }
    rows.push_back(&r);
    base.cluster.push_back(static_cast<int>(r.clinic_index));
    base.delta.push_back(o.delta);
    base.y.push_back(o.y);
  }

  std::vector<PredictorRow> out;
  const std::string arm_name(to_string(arm));
  Covariates adj = predictor_covariates(rows, options.adjustment);
  for (const auto& pred : options.predictors) {
    std::vector<int> z;
    for (const auto* r : rows) z.push_back(static_cast<int>(predictor_value(r->record, pred)));
    for (bool adjusted : {false, true}) {
      PredictorRow row;
      row.arm = arm_name;
      row.predictor = pred;
      row.outcome = std::string(to_string(options.outcome));
      row.adjusted = adjusted;
      row.n = static_cast<long>(rows.size());
      bool one = std::all_of(z.begin(), z.end(), [&](int v) { return v == z.front(); });
      if (rows.empty() || one) {
        row.estimable = false;
        row.note = "predictor has a single level; skipped";
        out.push_back(row);
        continue;
      }
      IndividualData d = base;
      d.z = z;
      if (adjusted) {
        d.w = adj;
        for (const auto& other : options.predictors) {
          if (other == pred) continue;
          std::vector<double> v;
          for (const auto* r : rows) v.push_back(predictor_value(r->record, other));
          d.w.add("pred_" + other, std::move(v), false);
        }
      } else {
        d.w = Covariates(rows.size());
      }
      IndividualOptions opt;
      opt.tmle.outcome = options.learners;
      opt.tmle.missingness = options.learners;
      opt.scale = Scale::risk_ratio;
      opt.g_z.reset();
      opt.adjust_missing = std::any_of(d.delta.begin(), d.delta.end(), [](int v) { return v == 0; });
      try {
        auto fit = tmle_effect_individual(d, opt);
        row.rr = fit.effect.effect;
        row.ci = fit.effect.ci;
        row.p_two_sided = fit.effect.p_two_sided;
        row.psi1 = fit.effect.psi1;
        row.psi0 = fit.effect.psi0;
      } catch (const EstimationError& e) {
        row.estimable = false;
        row.note = e.what();
      }
      out.push_back(row);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// KM tables, DTG suite, satisfaction

std::vector<KMTable> km_by_group(const AnalysisSet& set, std::span<const AnalysisRow* const> rows,
                                 EventKind kind, std::string_view grouping) {
  std::map<std::string, std::vector<TimeToEvent>> groups;
  auto rules = default_censor_rules(kind);
  for (const auto* r : rows) {
    std::string g;
    if (grouping == "overall") g = "overall";
    else if (grouping == "arm") g = std::string(to_string(r->arm));
    else if (grouping == "sex") g = std::string(to_string(r->record.sex));
    else if (grouping == "clinic") g = r->record.clinic_id;
    else throw ConfigError("unknown KM grouping '" + std::string(grouping) + "'");
    groups[g].push_back(time_to_event(r->record, kind, rules, event_context(*r, set.database_closure)));
  }
  std::vector<KMTable> out;
  for (auto& [g, v] : groups) out.push_back({std::string(grouping) + ":" + g, km_fit(v)});
  return out;
}

DtgSuite run_dtg_suite(const TrialData& data, const PopulationSpec& population) {
  DtgSuite suite;
  suite.population = std::string(to_string(population.population));
  auto set = select_population(data.participants, data.clinics, population, data.database_closure);

  auto group_of = [](const AnalysisRow& r, const std::string& g) -> std::string {
    if (g == "overall") return "overall";
    if (g == "arm") return std::string(to_string(r.arm));
    return std::string(to_string(r.record.sex));
  };
  for (std::string g : {"overall", "arm", "sex"}) {
    std::map<std::string, std::array<std::size_t, 4>> t;  // total, on_dtg, off_dtg, switched
    for (const auto& r : set.rows) {
      auto& c = t[g + ":" + group_of(r, g)];
      c[0]++;
      if (r.record.on_dtg_baseline()) {
        c[1]++;
      } else {
        c[2]++;
        if (r.record.dtg_switch_date && *r.record.dtg_switch_date <= r.window->end) c[3]++;
      }
    }
    for (const auto& [name, c] : t) {
      suite.descriptives.push_back({name, "on_dtg_baseline", c[1], c[0], c[0] ? double(c[1]) / c[0] : 0.0});
      suite.descriptives.push_back({name, "switched_during_followup", c[3], c[2], c[2] ? double(c[3]) / c[2] : 0.0});
    }
  }

  std::vector<const AnalysisRow*> off;
  for (const auto& r : set.rows)
    if (!r.record.on_dtg_baseline()) off.push_back(&r);
  if (off.empty()) {
    suite.note = "all participants were on DTG at baseline; suite empty";
    return suite;
  }
  for (std::string g : {"arm", "sex", "clinic"}) {
    auto km = km_by_group(set, off, EventKind::dtg_switch, g);
    suite.km.insert(suite.km.end(), km.begin(), km.end());
  }
  for (const char* name : {"dtg_switch_6m", "dtg_switch_12m", "dtg_switch_18m", "dtg_switch_24m",
                           "dtg_stratum_switched", "dtg_stratum_not_switched", "dtg_joint"}) {
    auto plan = preset(name);
    plan.population = population;
    LabeledResult lr{name, {}};
    try {
      lr.result = run_plan(plan, data);
    } catch (const DataError& e) {
      lr.result.estimable = false;
      lr.result.note = e.what();
      lr.result.endpoint = plan.endpoint;
      lr.result.provenance.plan = plan.name;
      lr.result.provenance.spec_hash = plan.hash();
      lr.result.provenance.seed = plan.seed;
    }
    suite.effects.push_back(std::move(lr));
  }
  return suite;
}

SatisfactionResult run_satisfaction(const TrialData& data, const PopulationSpec& population) {
  SatisfactionResult out;
  std::vector<std::string> items{"composite"};
  for (const auto& it : data.survey) items.push_back(it.question_id);
  for (const auto& item : items) {
    auto plan = preset("satisfaction_composite");
    plan.name = "satisfaction_" + item;
    plan.endpoint.item = item;
    plan.population = population;
    LabeledResult lr{item, {}};
    try {
      lr.result = run_plan(plan, data);
    } catch (const DataError& e) {
      lr.result.estimable = false;
      lr.result.note = e.what();
      lr.result.endpoint = plan.endpoint;
      lr.result.provenance.plan = plan.name;
      lr.result.provenance.spec_hash = plan.hash();
    }
    if (item == "composite") out.n_no_response = lr.result.n_excluded_endpoint;
    out.effects.push_back(std::move(lr));
  }
  return out;
}

} // namespace crt
