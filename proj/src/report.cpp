#include "crt/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "crt/error.hpp"

namespace crt {

using ojson = nlohmann::ordered_json;

std::string format_number(double v) {
  if (!std::isfinite(v)) return "NA";
  if (v == 0) return "0";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

Cell::Cell(double v) : text(format_number(v)) {
  if (std::isfinite(v)) number = v;
}

Cell::Cell(long v) : text(std::to_string(v)), number(static_cast<double>(v)) {}

Table::Table(std::string n, std::vector<std::string> cols) : name(std::move(n)), columns(std::move(cols)) {}

void Table::add(std::vector<Cell> row) {
  if (row.size() != columns.size())
    throw std::logic_error("table " + name + ": row has " + std::to_string(row.size()) +
                           " cells, header has " + std::to_string(columns.size()));
  rows.push_back(std::move(row));
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

} // namespace

std::string to_csv(const Table& t) {
  std::ostringstream o;
  for (std::size_t i = 0; i < t.columns.size(); ++i) o << (i ? "," : "") << csv_field(t.columns[i]);
  o << '\n';
  for (const auto& r : t.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) o << (i ? "," : "") << csv_field(r[i].text);
    o << '\n';
  }
  return o.str();
}

std::string to_json(const Table& t) {
  ojson j;
  j["name"] = t.name;
  j["columns"] = t.columns;
  ojson prov = ojson::object();
  for (const auto& [k, v] : t.provenance) prov[k] = v;
  j["provenance"] = prov;
  ojson rows = ojson::array();
  for (const auto& r : t.rows) {
    ojson row = ojson::object();
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (r[i].number) row[t.columns[i]] = *r[i].number;
      else if (r[i].text == "NA") row[t.columns[i]] = nullptr;
      else row[t.columns[i]] = r[i].text;
    }
    rows.push_back(std::move(row));
  }
  j["rows"] = rows;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Builders

namespace {

std::map<std::string, std::string> population_provenance(const AnalysisSet& set) {
  return {{"population", set.spec.canonical()},
          {"population_hash", hex64(fnv1a64(set.spec.canonical()))},
          {"database_closure", format_date(set.database_closure)}};
}

} // namespace

Table baseline_report(const AnalysisSet& set, Grouping grouping, const std::string& name) {
  Table t(name, {"group", "variable", "level", "n", "count", "percent", "median", "q1", "q3"});
  t.provenance = population_provenance(set);
  t.provenance["grouping"] = std::string(to_string(grouping));
  std::vector<AnalysisRow> rows = set.rows;
  for (const auto& r : baseline_table(rows, set.clinics, grouping)) {
    if (r.numeric)
      t.add({r.group, r.variable, "", r.n, "", "", r.median, r.q1, r.q3});
    else
      t.add({r.group, r.variable, r.level, r.n, r.count, r.percent, "", "", ""});
  }
  return t;
}

Table ascertainment_report(const AnalysisSet& set, const std::string& name) {
  std::vector<std::string> cols{"group", "total"};
  for (std::size_t c = 0; c < kAscertainmentCategories; ++c) {
    std::string cat(to_string(static_cast<AscertainmentCategory>(c)));
    cols.push_back(cat + "_n");
    cols.push_back(cat + "_prop");
  }
  Table t(name, cols);
  t.provenance = population_provenance(set);
  for (const auto& r : ascertainment_table(set)) {
    std::vector<Cell> row{r.group, r.total};
    for (std::size_t c = 0; c < kAscertainmentCategories; ++c) {
      row.emplace_back(r.counts[c]);
      row.emplace_back(r.proportions[c]);
    }
    t.add(std::move(row));
  }
  return t;
}

Table outcome_report(const AnalysisSet& set, const std::string& name) {
  Table t(name, {"group", "total", "suppressed", "unsuppressed", "died", "missing", "other"});
  t.provenance = population_provenance(set);
  for (const auto& r : outcome_table(set))
    t.add({r.group, r.total, r.suppressed, r.unsuppressed, r.died, r.missing, r.other});
  return t;
}

Table implementation_report(const AnalysisSet& set, const std::string& name) {
  Table t(name, {"arm", "participants", "contacts", "median_contacts", "q1_contacts", "q3_contacts"});
  t.provenance = population_provenance(set);
  for (Arm arm : {Arm::control, Arm::intervention}) {
    std::vector<double> counts;
    long total = 0;
    for (const auto& r : set.rows) {
      if (r.arm != arm) continue;
      long c = 0;
      for (const auto& d : r.record.contact_dates)
        if (!r.window || d < r.window->end) ++c;
      counts.push_back(double(c));
      total += c;
    }
    if (counts.empty()) {
      t.add({std::string(to_string(arm)), 0L, 0L, "NA", "NA", "NA"});
      continue;
    }
    t.add({std::string(to_string(arm)), static_cast<long>(counts.size()), total,
           quantile(counts, 0.5), quantile(counts, 0.25), quantile(counts, 0.75)});
  }
  return t;
}

std::map<std::string, std::string> provenance_map(const Provenance& p) {
  return {{"plan", p.plan}, {"spec_hash", p.spec_hash}, {"seed", std::to_string(p.seed)},
          {"data_hash", p.data_hash}};
}

Table effects_report(const std::vector<LabeledResult>& results, const std::string& name) {
  Table t(name, {"analysis", "plan", "endpoint", "estimator", "estimable", "note", "scale", "psi1",
                 "psi1_lower", "psi1_upper", "psi0", "psi0_lower", "psi0_upper", "effect", "lower",
                 "upper", "se", "t", "df", "direction", "p_one_sided", "p_two_sided", "test",
                 "p_reported", "adjustment", "weights", "n_clusters", "n_participants", "spec_hash",
                 "seed", "data_hash"});
  for (const auto& [label, r] : results) {
    const auto& e = r.effect;
    Sidedness test = r.endpoint.test();
    double p_rep = test == Sidedness::two ? e.p_two_sided : e.p_one_sided;
    if (!r.estimable) {
      t.add({label, r.provenance.plan, std::string(to_string(r.endpoint.kind)),
             std::string(to_string(r.estimator)), false, r.note, std::string(to_string(e.scale)), "NA",
             "NA", "NA", "NA", "NA", "NA", "NA", "NA", "NA", "NA", "NA", "NA",
             std::string(to_string(r.endpoint.benefit())), "NA", "NA", std::string(to_string(test)), "NA",
             r.selected, e.weights, "NA", static_cast<long>(r.n_rows), r.provenance.spec_hash,
             std::to_string(r.provenance.seed), r.provenance.data_hash});
      continue;
    }
    t.add({label, r.provenance.plan, std::string(to_string(r.endpoint.kind)),
           std::string(to_string(r.estimator)), true, r.note, std::string(to_string(e.scale)), e.psi1,
           e.psi1_ci.lower, e.psi1_ci.upper, e.psi0, e.psi0_ci.lower, e.psi0_ci.upper, e.effect,
           e.ci.lower, e.ci.upper, e.se, e.t_stat, e.df, std::string(to_string(e.direction)),
           e.p_one_sided, e.p_two_sided, std::string(to_string(test)), p_rep, e.adjustment, e.weights,
           e.n_clusters, e.n_participants, r.provenance.spec_hash, std::to_string(r.provenance.seed),
           r.provenance.data_hash});
  }
  if (results.size() == 1) t.provenance = provenance_map(results.front().result.provenance);
  return t;
}

Table stage1_report(const PlanResult& result, const std::string& name) {
  Table t(name, {"clinic_id", "arm", "y", "n_included", "se", "lower", "upper", "alpha"});
  t.provenance = provenance_map(result.provenance);
  for (const auto& c : result.stage1) {
    t.add({c.clinic_id, std::string(to_string(c.arm)), c.y, c.n_included,
           c.se ? Cell(*c.se) : Cell("NA"), c.ci ? Cell(c.ci->lower) : Cell("NA"),
           c.ci ? Cell(c.ci->upper) : Cell("NA"), c.alpha});
  }
  return t;
}

Table selection_report(const PlanResult& result, const std::string& name) {
  Table t(name, {"candidate", "cv_variance", "selected"});
  t.provenance = provenance_map(result.provenance);
  for (std::size_t i = 0; i < result.candidates.size(); ++i) {
    double v = i < result.cv_variance.size() ? result.cv_variance[i] : NAN;
    t.add({result.candidates[i], v, result.candidates[i] == result.selected});
  }
  return t;
}

Table predictor_report(const std::vector<PredictorRow>& rows, const std::string& name) {
  Table t(name, {"arm", "predictor", "outcome", "adjusted", "estimable", "note", "rr", "lower", "upper",
                 "p_two_sided", "psi1", "psi0", "n"});
  for (const auto& r : rows) {
    if (!r.estimable) {
      t.add({r.arm, r.predictor, r.outcome, r.adjusted, false, r.note, "NA", "NA", "NA", "NA", "NA",
             "NA", r.n});
      continue;
    }
    t.add({r.arm, r.predictor, r.outcome, r.adjusted, true, r.note, r.rr, r.ci.lower, r.ci.upper,
           r.p_two_sided, r.psi1, r.psi0, r.n});
  }
  return t;
}

Table counts_report(const std::vector<CountRow>& rows, const std::string& name) {
  Table t(name, {"group", "measure", "count", "total", "proportion"});
  for (const auto& r : rows) t.add({r.group, r.measure, r.count, r.total, r.proportion});
  return t;
}

Table km_plot(const std::vector<KMTable>& curves, const std::string& name) {
  Table t(name, {"group", "time_days", "survival", "cumulative", "at_risk", "events", "greenwood_variance"});
  for (const auto& [group, c] : curves) {
    t.add({group, 0.0, 1.0, 0.0, c.n, 0L, 0.0});
    for (std::size_t i = 0; i < c.times.size(); ++i)
      t.add({group, c.times[i], c.survival[i], 1.0 - c.survival[i], c.at_risk[i], c.events[i],
             c.greenwood_variance[i]});
  }
  return t;
}

Table power_report(const PowerParams& p, const std::string& name) {
  Table t(name, {"pi0", "pi1", "relative_effect", "m", "k", "alpha", "sided", "target_power",
                 "correction", "raw", "clusters_per_arm", "achieved_power"});
  for (Correction c : {Correction::none, Correction::plus_one}) {
    PowerParams q = p;
    q.correction = c;
    auto cc = clusters_per_arm(q);
    t.add({q.pi0, q.pi1(), q.relative_effect, q.m, q.k, q.alpha, std::string(to_string(q.sided)), q.power,
           std::string(to_string(c)), cc.raw, cc.clusters, power_given_design(cc.clusters, q)});
  }
  return t;
}

Table power_curve_plot(const std::vector<PowerCurvePoint>& points, const std::string& name) {
  Table t(name, {"k", "m", "clusters_per_arm", "power"});
  for (const auto& p : points) t.add({p.k, p.m, p.clusters, p.power});
  return t;
}

Table simulation_summary_report(const OperatingCharacteristics& oc, const std::string& name) {
  Table t(name, {"estimator", "replicates", "failures", "rejection_rate", "rejection_mcse",
                 "mean_estimate", "bias", "bias_mcse", "coverage", "coverage_mcse", "variance",
                 "selections"});
  t.provenance = {{"spec_hash", oc.spec_hash}, {"replicates", std::to_string(oc.replicates)},
                  {"mean_truth", format_number(oc.mean_truth)}};
  for (const auto& s : oc.summaries) {
    std::string sel;
    for (const auto& [k, v] : s.selections) sel += (sel.empty() ? "" : ";") + k + "=" + std::to_string(v);
    t.add({s.estimator, s.replicates, s.failures, s.rejection_rate, s.rejection_mcse, s.mean_estimate,
           s.bias, s.bias_mcse, s.coverage, s.coverage_mcse, s.variance, sel});
  }
  return t;
}

Table simulation_records_report(const OperatingCharacteristics& oc, const std::string& name) {
  Table t(name, {"replicate", "estimator", "ok", "note", "truth", "estimate", "lower", "upper",
                 "p_one_sided", "selected"});
  t.provenance = {{"spec_hash", oc.spec_hash}};
  for (const auto& r : oc.records) {
    if (!r.ok) {
      t.add({static_cast<long>(r.replicate), r.estimator, false, r.note, r.truth, "NA", "NA", "NA", "NA", ""});
      continue;
    }
    t.add({static_cast<long>(r.replicate), r.estimator, true, r.note, r.truth, r.estimate, r.ci.lower,
           r.ci.upper, r.p_one_sided, r.selected});
  }
  return t;
}

// ---------------------------------------------------------------------------
// Bundles

namespace {

void add_describe(ReportBundle& b, const TrialData& data) {
  for (Population pop : {Population::primary, Population::secondary}) {
    PopulationSpec spec = pop == Population::primary ? PopulationSpec::primary() : PopulationSpec::secondary();
    auto set = select_population(data.participants, data.clinics, spec, data.database_closure);
    std::string p(to_string(pop));
    for (Grouping g : {Grouping::overall, Grouping::arm, Grouping::country_arm})
      b.tables.push_back(baseline_report(set, g, "baseline_" + p + "_" + std::string(to_string(g))));
    b.tables.push_back(ascertainment_report(set, "ascertainment_" + p));
    b.tables.push_back(outcome_report(set, "outcomes_" + p));
    if (pop == Population::primary) b.tables.push_back(implementation_report(set, "implementation_contacts"));
  }
}

void set_manifest_base(ReportBundle& b, const TrialData& data) {
  b.manifest["tool_version"] = kToolVersion;
  b.manifest["data_hash"] = data_hash(data);
  b.manifest["database_closure"] = format_date(data.database_closure);
  b.manifest["n_participants"] = std::to_string(data.participants.size());
  b.manifest["n_clinics"] = std::to_string(data.clinics.size());
}

} // namespace

ReportBundle describe_bundle(const TrialData& data) {
  ReportBundle b;
  set_manifest_base(b, data);
  b.manifest["config_hash"] = "describe";
  add_describe(b, data);
  return b;
}

ReportBundle build_report(const TrialData& data, const ReportOptions& opt) {
  ReportBundle b;
  set_manifest_base(b, data);
  b.manifest["config_hash"] = opt.config_hash;
  add_describe(b, data);

  std::vector<LabeledResult> all;
  std::string seeds;
  for (const auto& name : opt.presets) {
    auto plan = preset(name);
    auto r = run_plan(plan, data);
    b.tables.push_back(effects_report({{name, r}}, "effects_" + name));
    if (!r.stage1.empty()) b.tables.push_back(stage1_report(r, "stage1_" + name));
    if (!r.candidates.empty()) b.tables.push_back(selection_report(r, "selection_" + name));
    seeds += (seeds.empty() ? "" : ";") + name + "=" + std::to_string(plan.seed);
    all.push_back({name, std::move(r)});
  }
  b.tables.push_back(effects_report(all, "effects_all"));
  b.manifest["seeds"] = seeds;

  if (opt.predictors) {
    for (PredictorOutcome o :
         {PredictorOutcome::failure, PredictorOutcome::nonsuppression_or_death, PredictorOutcome::suppression}) {
      std::vector<PredictorRow> rows;
      PredictorOptions po;
      po.outcome = o;
      for (Arm arm : {Arm::control, Arm::intervention}) {
        auto part = run_predictor_analysis(data, arm, po);
        rows.insert(rows.end(), part.begin(), part.end());
      }
      b.tables.push_back(predictor_report(rows, "predictors_" + std::string(to_string(o))));
    }
  }

  if (opt.dtg) {
    for (Population pop : {Population::primary, Population::secondary}) {
      PopulationSpec spec = pop == Population::primary ? PopulationSpec::primary() : PopulationSpec::secondary();
      auto suite = run_dtg_suite(data, spec);
      std::string p(to_string(pop));
      auto counts = counts_report(suite.descriptives, "dtg_descriptives_" + p);
      if (!suite.note.empty()) counts.provenance["note"] = suite.note;
      b.tables.push_back(std::move(counts));
      b.tables.push_back(effects_report(suite.effects, "dtg_effects_" + p));
      b.plots.push_back(km_plot(suite.km, "km_dtg_switch_" + p));
    }
  }

  if (opt.satisfaction) {
    auto sat = run_satisfaction(data);
    auto t = effects_report(sat.effects, "satisfaction");
    t.provenance["n_no_response"] = std::to_string(sat.n_no_response);
    b.tables.push_back(std::move(t));
  }

  {
    // Lapse and mortality step functions for plotting.
    auto set = select_population(data.participants, data.clinics, PopulationSpec::primary(), data.database_closure);
    std::vector<const AnalysisRow*> rows;
    for (const auto& r : set.rows) rows.push_back(&r);
    b.plots.push_back(km_plot(km_by_group(set, rows, EventKind::lapse, "arm"), "km_lapse_primary"));
    b.plots.push_back(km_plot(km_by_group(set, rows, EventKind::death, "arm"), "km_death_primary"));
  }

  if (opt.power) {
    b.tables.push_back(power_report(opt.power_params, "power"));
    int c = clusters_per_arm(opt.power_params).clusters;
    std::vector<double> ks{0.125, 0.175}, ms{25, 50, 75, 100, 150, 200};
    b.plots.push_back(power_curve_plot(power_curve(opt.power_params, c, ks, ms), "power_curve"));
  }

  if (opt.simulation) {
    b.tables.push_back(simulation_summary_report(*opt.simulation, "simulation_summary"));
    b.tables.push_back(simulation_records_report(*opt.simulation, "simulation_records"));
  }
  return b;
}

EmitResult emit_report(const ReportBundle& bundle, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  EmitResult res;
  ojson files = ojson::array();
  std::string failure;
  auto write = [&](const fs::path& rel, const std::string& content) {
    if (!failure.empty()) return;
    std::ofstream out(dir / rel, std::ios::binary);
    out << content;
    out.close();
    if (!out) {
      failure = "could not write " + (dir / rel).string();
      return;
    }
    res.files.push_back(rel);
    files.push_back({{"path", rel.generic_string()}, {"bytes", content.size()},
                     {"fnv1a64", hex64(fnv1a64(content))}});
  };

  std::error_code ec;
  fs::create_directories(dir / "tables", ec);
  if (!ec) fs::create_directories(dir / "plots", ec);
  if (ec) throw DataError("cannot create report directory " + dir.string() + ": " + ec.message());

  ojson tables = ojson::array();
  for (const auto& [sub, list] : {std::pair{"tables", &bundle.tables}, std::pair{"plots", &bundle.plots}}) {
    for (const auto& t : *list) {
      write(fs::path(sub) / (t.name + ".csv"), to_csv(t));
      write(fs::path(sub) / (t.name + ".json"), to_json(t));
      ojson prov = ojson::object();
      for (const auto& [k, v] : t.provenance) prov[k] = v;
      tables.push_back({{"name", t.name}, {"kind", sub}, {"rows", t.rows.size()}, {"provenance", prov}});
    }
  }

  ojson m;
  for (const auto& [k, v] : bundle.manifest) m[k] = v;
  m["valid"] = failure.empty();
  m["tables"] = tables;
  m["files"] = files;
  std::string all;
  for (const auto& f : files) all += f["fnv1a64"].get<std::string>();
  res.bundle_hash = hex64(fnv1a64(all));
  m["bundle_hash"] = res.bundle_hash;
  std::string text = m.dump(2) + "\n";
  {
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    out << text;
    out.close();
    if (!out && failure.empty()) failure = "could not write " + (dir / "manifest.json").string();
  }
  if (!failure.empty()) throw DataError(failure);
  res.files.push_back("manifest.json");
  return res;
}

} // namespace crt
