#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crt/covariates.hpp"
#include "crt/dates.hpp"
#include "crt/error.hpp"

namespace crt {

inline constexpr int kSchemaVersion = 1;

inline constexpr long kTwoYearDays = 730;
inline constexpr long kWindowDaysBefore = 90;
inline constexpr long kWindowDaysAfter = 180;
inline constexpr long kSixMonthDays = 183;
inline constexpr long kRetentionGapDays = 120;

inline Date default_database_closure() { return make_date(2022, 3, 1); }
inline Date default_enrollment_cutoff() { return make_date(2019, 12, 1); }

enum class Sex { female, male };
enum class Country { kenya, uganda };
enum class CareStatus { recently_engaged, engaged, re_engaging };
enum class Arm { control = 0, intervention = 1 };

std::string_view to_string(Sex s);
std::string_view to_string(Country c);
std::string_view to_string(CareStatus c);
std::string_view to_string(Arm a);

struct ViralLoad {
  Date date;
  double copies = 0.0;
};

struct SurveyResponse {
  std::string question_id;
  int score = 0;
};

struct ParticipantRecord {
  std::string participant_id;
  std::string clinic_id;
  Date enrollment_date{};
  int age = 0;
  Sex sex = Sex::female;
  Country country = Country::kenya;
  std::string education;
  std::string employment;
  std::string marital_status;
  std::optional<int> n_children;
  std::string alcohol_use;
  std::string mobility;
  std::string art_regimen_baseline;
  std::optional<bool> baseline_suppressed;
  CareStatus baseline_care_status = CareStatus::engaged;
  std::optional<Date> art_start_date;
  std::optional<Date> last_visit_date;
  std::optional<Date> withdrawal_date;
  std::optional<Date> death_date;
  std::optional<Date> outmigration_date;
  std::optional<Date> transfer_date;
  std::optional<Date> dtg_switch_date;
  std::optional<Date> second_line_date;
  std::vector<Date> birth_dates;
  std::vector<Date> contact_dates;
  std::vector<ViralLoad> viral_loads;
  std::vector<SurveyResponse> satisfaction;

  /// Baseline regimen code contains "DTG".
  bool on_dtg_baseline() const;
};

struct ClinicRecord {
  std::string clinic_id;
  Country country = Country::kenya;
  Arm arm = Arm::control;
  std::string stratum_id;
  long n_youth_in_care_baseline = 0;
  double baseline_suppression_proportion = 0.0;
};

/// Likert item metadata; reverse-coded items are flipped (6 - score) before averaging.
struct SurveyItem {
  std::string question_id;
  bool reverse_coded = false;
};

struct TrialData {
  std::vector<ParticipantRecord> participants;
  std::vector<ClinicRecord> clinics;
  std::vector<SurveyItem> survey;
  Date database_closure = default_database_closure();
};

// ---------------------------------------------------------------------------
// Endpoint window

struct EndpointWindow {
  Date two_year_mark{};
  Date start{};
  Date end{};
  Date database_closure{};
};

/// Raised when start >= end; the participant cannot be evaluated.
class UnevaluableWindow : public DataError {
public:
  using DataError::DataError;
};

EndpointWindow endpoint_window(Date enrollment_date, Date database_closure);

// ---------------------------------------------------------------------------
// Classification

enum class EndpointStatus {
  suppressed,
  unsuppressed,
  died,
  missing_vl,
  transfer_success,
  censored,
  excluded_outmigrated,
  excluded_transferred,
  excluded_withdrawn,
  excluded_late_enrollment,
  excluded_unevaluable,
};

std::string_view to_string(EndpointStatus s);
bool is_exclusion(EndpointStatus s);

struct EndpointClassification {
  EndpointStatus status = EndpointStatus::missing_vl;
  std::optional<ViralLoad> endpoint_vl;
};

enum class Population { primary, secondary };
enum class TransferHandling { exclude, include, success, censor };
enum class DeathHandling { failure, censor };
enum class MissingHandling { failure, adjust, exclude };

std::string_view to_string(Population p);
std::string_view to_string(TransferHandling t);
std::string_view to_string(DeathHandling d);
std::string_view to_string(MissingHandling m);
Population parse_population(std::string_view s);
TransferHandling parse_transfer_handling(std::string_view s);
DeathHandling parse_death_handling(std::string_view s);
MissingHandling parse_missing_handling(std::string_view s);

/// Which participants enter an analysis and how their endpoint is scored.
///
/// The primary population always excludes outmigrated participants and never
/// scores transferred participants on their viral load (`include` is rejected);
/// `success` and `censor` remain available as sensitivity rules.
struct PopulationSpec {
  Population population = Population::primary;
  std::optional<Date> enrollment_cutoff = default_enrollment_cutoff();
  double vl_threshold = 400.0;
  TransferHandling transfer_handling = TransferHandling::exclude;
  DeathHandling death_handling = DeathHandling::failure;
  MissingHandling missing_handling = MissingHandling::failure;

  static PopulationSpec primary();
  static PopulationSpec secondary();

  /// Throws ConfigError on an inconsistent combination.
  void validate() const;
  std::string canonical() const;
};

/// Total over valid records. Exclusions are checked first (withdrawn, late
/// enrollment, outmigration, transfer); then death relative to the in-window
/// viral loads; then the viral load closest to the 2-year mark.
EndpointClassification classify_endpoint(const ParticipantRecord& record, const PopulationSpec& spec,
                                         const EndpointWindow& window);

/// Care status at enrollment from ART start and the last clinic visit.
CareStatus classify_care_status(Date art_start_date, std::optional<Date> last_visit_date,
                                Date enrollment_date);

// ---------------------------------------------------------------------------
// Ingestion

struct RowDiagnostic {
  std::size_t line = 0;
  std::string participant_id;
  std::string message;
};

struct LoadResult {
  std::vector<ParticipantRecord> records;
  std::vector<RowDiagnostic> rejected;
};

/// Column names of the participants file, in canonical order.
const std::vector<std::string>& participant_columns();
const std::vector<std::string>& clinic_columns();

LoadResult parse_participants(std::istream& in, const std::string& source = "participants");
LoadResult load_participants(const std::filesystem::path& path);
std::vector<ClinicRecord> parse_clinics(std::istream& in, const std::string& source = "clinics");
std::vector<ClinicRecord> load_clinics(const std::filesystem::path& path);
std::vector<SurveyItem> load_survey(const std::filesystem::path& path);

/// Arms in {0,1}, unique ids, proportions in [0,1], balanced strata.
void validate_clinics(std::span<const ClinicRecord> clinics);

struct TrialLoad {
  TrialData data;
  std::vector<RowDiagnostic> rejected;
};

/// Reads participants.csv, clinics.csv and (optionally) survey.csv from a directory.
TrialLoad load_trial(const std::filesystem::path& dir);

void write_participants(std::ostream& out, std::span<const ParticipantRecord> records);
void write_clinics(std::ostream& out, std::span<const ClinicRecord> clinics);
void write_survey(std::ostream& out, std::span<const SurveyItem> items);

// ---------------------------------------------------------------------------
// Analysis sets

struct AnalysisRow {
  ParticipantRecord record;
  std::size_t clinic_index = 0;
  Arm arm = Arm::control;
  std::optional<EndpointWindow> window;
  EndpointClassification classification;
};

struct AnalysisSet {
  PopulationSpec spec;
  std::vector<ClinicRecord> clinics;
  std::vector<AnalysisRow> rows;
  std::vector<AnalysisRow> excluded;
  std::map<EndpointStatus, std::size_t> exclusion_counts;
  Date database_closure{};
};

AnalysisSet select_population(std::span<const ParticipantRecord> records,
                              std::span<const ClinicRecord> clinics, const PopulationSpec& spec,
                              Date database_closure = default_database_closure());

// ---------------------------------------------------------------------------
// Engagement

struct EngagementIndicators {
  bool engaged_2y = false;
  bool retained = true;
  /// Days from enrollment to the end of the first contact gap exceeding 120 days.
  std::optional<long> lapse_time;
};

/// Enrollment counts as a contact; only contacts before window.start are used.
/// A trailing gap from the last contact to window.start counts as a gap.
EngagementIndicators engagement_indicators(const ParticipantRecord& record,
                                           const EndpointWindow& window);

// ---------------------------------------------------------------------------
// Descriptive tables

enum class AscertainmentCategory { outmigrated, transferred, measured, died, missing };
inline constexpr std::size_t kAscertainmentCategories = 5;
std::string_view to_string(AscertainmentCategory c);

struct AscertainmentRow {
  std::string group;
  std::array<std::size_t, kAscertainmentCategories> counts{};
  std::array<double, kAscertainmentCategories> proportions{};
  std::size_t total = 0;
};

/// Mutually exclusive participant-flow categories, overall then by arm.
/// Withdrawn, late-enrolled and unevaluable participants are not counted.
std::vector<AscertainmentRow> ascertainment_table(const AnalysisSet& set);

struct OutcomeRow {
  std::string group;
  std::size_t suppressed = 0, unsuppressed = 0, died = 0, missing = 0, other = 0, total = 0;
};

/// Raw endpoint counts among included participants, overall then by arm.
std::vector<OutcomeRow> outcome_table(const AnalysisSet& set);

enum class Grouping { overall, arm, country, country_arm, clinic };
std::string_view to_string(Grouping g);
Grouping parse_grouping(std::string_view s);

struct BaselineRow {
  std::string group;
  std::string variable;
  std::string level;  // empty for numeric summaries
  bool numeric = false;
  std::size_t n = 0;  // group size (numeric: non-missing values)
  std::size_t count = 0;
  double percent = 0.0;
  double median = 0.0, q1 = 0.0, q3 = 0.0;
};

/// Medians and IQR (linear-interpolated quantiles) for numeric variables;
/// counts and percentages for categorical ones. Groups and levels sorted.
std::vector<BaselineRow> baseline_table(std::span<const AnalysisRow> rows,
                                        std::span<const ClinicRecord> clinics, Grouping grouping);

/// Sample quantile with linear interpolation between order statistics.
double quantile(std::vector<double> values, double p);

// ---------------------------------------------------------------------------
// Covariates for adjusted analyses

/// Names accepted by build_covariates: age, sex, baseline_suppressed,
/// country, outmigration.
/// Missing baseline_suppressed is imputed with the mode and a
/// `baseline_suppressed_missing` indicator is appended when any value is missing.
Covariates build_covariates(std::span<const AnalysisRow* const> rows,
                            std::span<const std::string> names);

} // namespace crt
