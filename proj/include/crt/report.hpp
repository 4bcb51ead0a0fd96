#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crt/power.hpp"
#include "crt/runner.hpp"
#include "crt/simulation.hpp"
#include "crt/trial_data.hpp"

namespace crt {

inline constexpr const char* kToolVersion = "1.0.0";

/// One table cell: the rendered text plus the numeric value when there is one.
struct Cell {
  std::string text;
  std::optional<double> number;

  Cell() = default;
  Cell(std::string s) : text(std::move(s)) {}
  Cell(const char* s) : text(s) {}
  Cell(std::string_view s) : text(s) {}
  Cell(double v);
  Cell(int v) : Cell(static_cast<long>(v)) {}
  Cell(long v);
  Cell(unsigned long v) : Cell(static_cast<long>(v)) {}
  Cell(long long v) : Cell(static_cast<long>(v)) {}
  Cell(unsigned long long v) : Cell(static_cast<long>(v)) {}
  Cell(bool v) : text(v ? "true" : "false") {}
};

/// Fixed 12-significant-digit rendering; "NA" for non-finite values.
std::string format_number(double v);

struct Table {
  std::string name;  // file stem
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
  std::map<std::string, std::string> provenance;

  Table() = default;
  Table(std::string name, std::vector<std::string> columns);
  /// Throws std::logic_error when the width does not match the header.
  void add(std::vector<Cell> row);
};

std::string to_csv(const Table& t);
std::string to_json(const Table& t);

// ---------------------------------------------------------------------------
// Table builders. Every number is copied from an operation's output.

Table baseline_report(const AnalysisSet& set, Grouping grouping, const std::string& name);
Table ascertainment_report(const AnalysisSet& set, const std::string& name);
Table outcome_report(const AnalysisSet& set, const std::string& name);
/// Clinic contact counts per participant before the window end, by arm.
Table implementation_report(const AnalysisSet& set, const std::string& name);

std::map<std::string, std::string> provenance_map(const Provenance& p);
/// One row per result; the provenance of each row is in its columns.
Table effects_report(const std::vector<LabeledResult>& results, const std::string& name);
Table stage1_report(const PlanResult& result, const std::string& name);
Table selection_report(const PlanResult& result, const std::string& name);
Table predictor_report(const std::vector<PredictorRow>& rows, const std::string& name);
Table counts_report(const std::vector<CountRow>& rows, const std::string& name);
/// Step-function plot data: one row per event time plus a leading time-0 row.
Table km_plot(const std::vector<KMTable>& curves, const std::string& name);
Table power_report(const PowerParams& params, const std::string& name);
Table power_curve_plot(const std::vector<PowerCurvePoint>& points, const std::string& name);
Table simulation_summary_report(const OperatingCharacteristics& oc, const std::string& name);
Table simulation_records_report(const OperatingCharacteristics& oc, const std::string& name);

// ---------------------------------------------------------------------------
// Bundles

struct ReportBundle {
  /// Tool version, config hash, data hash, seeds and the data cutoff date.
  std::map<std::string, std::string> manifest;
  std::vector<Table> tables;
  std::vector<Table> plots;
};

struct ReportOptions {
  std::vector<std::string> presets = preset_names();
  bool predictors = true;
  bool dtg = true;
  bool satisfaction = true;
  bool power = true;
  PowerParams power_params;
  std::optional<OperatingCharacteristics> simulation;
  std::string config_hash = "default";
};

/// Descriptive tables for both populations.
ReportBundle describe_bundle(const TrialData& data);

/// Descriptive tables, every requested preset, predictor, DTG and satisfaction
/// analyses and the power tables.
ReportBundle build_report(const TrialData& data, const ReportOptions& options = {});

struct EmitResult {
  std::vector<std::filesystem::path> files;  // relative to the output directory
  std::string bundle_hash;
};

/// Writes tables/<name>.csv|json, plots/<name>.csv|json and manifest.json
/// (which lists a hash of every file). On a write failure a manifest with
/// "valid": false is attempted and DataError is thrown.
EmitResult emit_report(const ReportBundle& bundle, const std::filesystem::path& dir);

} // namespace crt
