#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "crt/config.hpp"
#include "crt/error.hpp"
#include "crt/power.hpp"
#include "crt/report.hpp"
#include "crt/runner.hpp"
#include "crt/simulation.hpp"
#include "crt/trial_data.hpp"

using namespace crt;
namespace fs = std::filesystem;

namespace {

fs::path default_data_dir() {
  if (const char* env = std::getenv("CRT_DATA_DIR"); env && *env) return env;
  return "data/synthetic";
}

void print_diagnostic(const std::string& kind, const std::string& message) {
  nlohmann::ordered_json j{{"error", kind}, {"message", message}};
  std::cerr << j.dump() << '\n';
}

TrialData load_data(const fs::path& dir) {
  auto load = load_trial(dir);
  for (const auto& d : load.rejected) {
    nlohmann::ordered_json j{{"warning", "rejected_row"}, {"line", d.line},
                             {"participant_id", d.participant_id}, {"message", d.message}};
    std::cerr << j.dump() << '\n';
  }
  return std::move(load.data);
}

void print_tables(const ReportBundle& b) {
  for (const auto& list : {&b.tables, &b.plots})
    for (const auto& t : *list) std::cout << "# " << t.name << '\n' << to_csv(t) << '\n';
}

void apply_overrides(KeyValueConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cluster-randomized trial TMLE analysis"};
  app.require_subcommand(1);
  std::string data_dir = default_data_dir().string();
  app.add_option("--data", data_dir, "Trial data directory (default: $CRT_DATA_DIR or data/synthetic)");

  auto* validate = app.add_subcommand("validate", "Schema check of a trial data directory");

  auto* describe = app.add_subcommand("describe", "Baseline, ascertainment and outcome tables");
  std::string describe_out;
  describe->add_option("--out", describe_out, "Write a report directory instead of printing");

  auto* analyze = app.add_subcommand("analyze", "Run a preset or plan file");
  std::string preset_name, plan_file, analyze_out;
  std::vector<std::string> sets;
  bool list_presets = false;
  auto* preset_opt = analyze->add_option("--preset", preset_name, "Named preset");
  analyze->add_option("--plan", plan_file, "Plan file")->excludes(preset_opt);
  analyze->add_option("--set", sets, "Override a plan key (key=value)");
  analyze->add_option("--out", analyze_out, "Write a report directory");
  analyze->add_flag("--list", list_presets, "List preset names");

  auto* power = app.add_subcommand("power", "Clusters per arm and power curve");
  PowerParams pp;
  std::string sided = "two", correction = "none";
  bool curve = false;
  power->add_option("--pi0", pp.pi0);
  power->add_option("--rr", pp.relative_effect);
  power->add_option("--m", pp.m);
  power->add_option("--k", pp.k);
  power->add_option("--alpha", pp.alpha);
  power->add_option("--power", pp.power);
  power->add_option("--sided", sided, "two or one");
  power->add_option("--correction", correction, "none or plus_one");
  power->add_flag("--curve", curve, "Also print power over k in {0.125, 0.175} and m");

  auto* simulate = app.add_subcommand("simulate", "Monte Carlo operating characteristics");
  std::string spec_file, analysis_file, sim_out, emit_trial;
  std::optional<int> reps;
  std::optional<std::uint64_t> seed;
  bool serial = false, records = false;
  simulate->add_option("--spec", spec_file, "Simulation spec file");
  simulate->add_option("--analysis", analysis_file, "Estimator config (estimators, learners, alpha)");
  simulate->add_option("--reps", reps);
  simulate->add_option("--seed", seed);
  simulate->add_option("--out", sim_out, "Write summary and per-replicate tables here");
  simulate->add_option("--emit-trial", emit_trial, "Write replicate 0 as a trial data directory and stop");
  simulate->add_flag("--serial", serial, "Use the serial reference implementation");
  simulate->add_flag("--records", records, "Print per-replicate records");

  auto* report = app.add_subcommand("report", "Assemble the full report directory");
  std::string report_out = "report", report_sim;
  std::vector<std::string> report_presets;
  bool no_predictors = false;
  report->add_option("--out", report_out);
  report->add_option("--presets", report_presets, "Subset of presets (default: all)")->delimiter(',');
  report->add_option("--simulate", report_sim, "Also include operating characteristics for this spec");
  report->add_flag("--no-predictors", no_predictors);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*validate) {
      auto load = load_trial(data_dir);
      validate_clinics(load.data.clinics);
      nlohmann::ordered_json j{{"participants", load.data.participants.size()},
                               {"clinics", load.data.clinics.size()},
                               {"rejected", nlohmann::ordered_json::array()}};
      for (const auto& d : load.rejected)
        j["rejected"].push_back({{"line", d.line}, {"participant_id", d.participant_id}, {"message", d.message}});
      std::cout << j.dump(2) << '\n';
      return load.rejected.empty() ? kExitOk : kExitData;
    }
    if (*describe) {
      auto bundle = describe_bundle(load_data(data_dir));
      if (describe_out.empty()) print_tables(bundle);
      else std::cout << emit_report(bundle, describe_out).bundle_hash << '\n';
      return kExitOk;
    }
    if (*analyze) {
      if (list_presets) {
        for (const auto& n : preset_names()) std::cout << n << '\n';
        return kExitOk;
      }
      KeyValueConfig cfg;
      if (!plan_file.empty()) cfg = KeyValueConfig::load(plan_file);
      else if (!preset_name.empty()) cfg.set("preset", preset_name);
      else throw ConfigError("analyze needs --preset or --plan");
      apply_overrides(cfg, sets);
      auto plan = AnalysisPlan::from_config(cfg);
      auto data = load_data(data_dir);
      auto result = run_plan(plan, data);
      ReportBundle b;
      b.manifest["tool_version"] = kToolVersion;
      b.manifest["config_hash"] = plan.hash();
      b.manifest["data_hash"] = result.provenance.data_hash;
      b.tables.push_back(effects_report({{plan.name, result}}, "effects_" + plan.name));
      if (!result.stage1.empty()) b.tables.push_back(stage1_report(result, "stage1_" + plan.name));
      if (!result.candidates.empty()) b.tables.push_back(selection_report(result, "selection_" + plan.name));
      if (analyze_out.empty()) print_tables(b);
      else std::cout << emit_report(b, analyze_out).bundle_hash << '\n';
      for (const auto& d : result.diagnostics) std::cerr << nlohmann::json{{"diagnostic", d}}.dump() << '\n';
      return result.estimable ? kExitOk : kExitEstimation;
    }
    if (*power) {
      pp.sided = parse_sidedness(sided);
      pp.correction = parse_correction(correction);
      pp.validate();
      auto t = power_report(pp, "power");
      std::cout << to_csv(t);
      if (curve) {
        int c = clusters_per_arm(pp).clusters;
        std::vector<double> ks{0.125, 0.175}, ms{25, 50, 75, 100, 150, 200};
        std::cout << '\n' << to_csv(power_curve_plot(power_curve(pp, c, ks, ms), "power_curve"));
      }
      return kExitOk;
    }
    if (*simulate) {
      KeyValueConfig cfg;
      if (!spec_file.empty()) cfg = KeyValueConfig::load(spec_file);
      if (reps) cfg.set("replicates", std::to_string(*reps));
      if (seed) cfg.set("seed", std::to_string(*seed));
      auto spec = TrialSimSpec::from_config(cfg);
      if (auto unknown = cfg.unknown_keys(sim_spec_keys()); !unknown.empty())
        throw ConfigError("unknown simulation key: " + unknown.front());
      if (!emit_trial.empty()) {
        auto trial = synth_trial(spec, 0);
        fs::create_directories(emit_trial);
        std::ofstream p(fs::path(emit_trial) / "participants.csv"), c(fs::path(emit_trial) / "clinics.csv"),
            s(fs::path(emit_trial) / "survey.csv");
        write_participants(p, trial.data.participants);
        write_clinics(c, trial.data.clinics);
        write_survey(s, trial.data.survey);
        if (!p || !c || !s) throw DataError("could not write trial to " + emit_trial);
        std::cout << "psi1=" << format_number(trial.psi1) << " psi0=" << format_number(trial.psi0) << '\n';
        return kExitOk;
      }
      SimAnalysisConfig analysis = SimAnalysisConfig::defaults();
      if (!analysis_file.empty()) analysis = SimAnalysisConfig::from_config(KeyValueConfig::load(analysis_file));
      auto oc = serial ? operating_characteristics_serial(spec, analysis) : operating_characteristics(spec, analysis);
      ReportBundle b;
      b.manifest["tool_version"] = kToolVersion;
      b.manifest["config_hash"] = spec.hash();
      b.manifest["seeds"] = std::to_string(spec.seed);
      b.tables.push_back(simulation_summary_report(oc, "simulation_summary"));
      b.tables.push_back(simulation_records_report(oc, "simulation_records"));
      std::cout << to_csv(b.tables[0]);
      if (records) std::cout << '\n' << to_csv(b.tables[1]);
      std::cout << "output_hash=" << hex64(fnv1a64(to_csv(b.tables[0]) + to_csv(b.tables[1]))) << '\n';
      if (!sim_out.empty()) emit_report(b, sim_out);
      return kExitOk;
    }
    if (*report) {
      ReportOptions opt;
      if (!report_presets.empty()) opt.presets = report_presets;
      opt.predictors = !no_predictors;
      std::string cfg_text;
      for (const auto& p : opt.presets) cfg_text += p + ";";
      if (!report_sim.empty()) {
        auto cfg = KeyValueConfig::load(report_sim);
        auto spec = TrialSimSpec::from_config(cfg);
        opt.simulation = operating_characteristics(spec, SimAnalysisConfig::defaults());
        cfg_text += spec.canonical();
      }
      opt.config_hash = hex64(fnv1a64(cfg_text));
      auto bundle = build_report(load_data(data_dir), opt);
      auto res = emit_report(bundle, report_out);
      std::cout << "files=" << res.files.size() << " bundle_hash=" << res.bundle_hash << '\n';
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    print_diagnostic("config", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    print_diagnostic("data", e.what());
    return kExitData;
  } catch (const EstimationError& e) {
    print_diagnostic("estimation", e.what());
    return kExitEstimation;
  } catch (const std::exception& e) {
    print_diagnostic("data", e.what());
    return kExitData;
  }
  return kExitOk;
}
