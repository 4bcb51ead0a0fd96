#include "crt/trial_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "crt/config.hpp"

namespace crt {

// ---------------------------------------------------------------------------
// enum <-> string

std::string_view to_string(Sex s) { return s == Sex::female ? "female" : "male"; }
std::string_view to_string(Country c) { return c == Country::kenya ? "Kenya" : "Uganda"; }
std::string_view to_string(Arm a) { return a == Arm::intervention ? "intervention" : "control"; }

std::string_view to_string(CareStatus c) {
  switch (c) {
    case CareStatus::recently_engaged: return "recently_engaged";
    case CareStatus::engaged: return "engaged";
    case CareStatus::re_engaging: return "re_engaging";
  }
  return "?";
}

std::string_view to_string(EndpointStatus s) {
  switch (s) {
    case EndpointStatus::suppressed: return "suppressed";
    case EndpointStatus::unsuppressed: return "unsuppressed";
    case EndpointStatus::died: return "died";
    case EndpointStatus::missing_vl: return "missing_vl";
    case EndpointStatus::transfer_success: return "transfer_success";
    case EndpointStatus::censored: return "censored";
    case EndpointStatus::excluded_outmigrated: return "excluded_outmigrated";
    case EndpointStatus::excluded_transferred: return "excluded_transferred";
    case EndpointStatus::excluded_withdrawn: return "excluded_withdrawn";
    case EndpointStatus::excluded_late_enrollment: return "excluded_late_enrollment";
    case EndpointStatus::excluded_unevaluable: return "excluded_unevaluable";
  }
  return "?";
}

bool is_exclusion(EndpointStatus s) {
  switch (s) {
    case EndpointStatus::excluded_outmigrated:
    case EndpointStatus::excluded_transferred:
    case EndpointStatus::excluded_withdrawn:
    case EndpointStatus::excluded_late_enrollment:
    case EndpointStatus::excluded_unevaluable:
      return true;
    default:
      return false;
  }
}

std::string_view to_string(Population p) { return p == Population::primary ? "primary" : "secondary"; }

std::string_view to_string(TransferHandling t) {
  switch (t) {
    case TransferHandling::exclude: return "exclude";
    case TransferHandling::include: return "include";
    case TransferHandling::success: return "success";
    case TransferHandling::censor: return "censor";
  }
  return "?";
}

std::string_view to_string(DeathHandling d) { return d == DeathHandling::failure ? "failure" : "censor"; }

std::string_view to_string(MissingHandling m) {
  switch (m) {
    case MissingHandling::failure: return "failure";
    case MissingHandling::adjust: return "adjust";
    case MissingHandling::exclude: return "exclude";
  }
  return "?";
}

Population parse_population(std::string_view s) {
  if (s == "primary") return Population::primary;
  if (s == "secondary") return Population::secondary;
  throw ConfigError("unknown population '" + std::string(s) + "'");
}

TransferHandling parse_transfer_handling(std::string_view s) {
  if (s == "exclude") return TransferHandling::exclude;
  if (s == "include") return TransferHandling::include;
  if (s == "success") return TransferHandling::success;
  if (s == "censor") return TransferHandling::censor;
  throw ConfigError("unknown transfer_handling '" + std::string(s) + "'");
}

DeathHandling parse_death_handling(std::string_view s) {
  if (s == "failure") return DeathHandling::failure;
  if (s == "censor") return DeathHandling::censor;
  throw ConfigError("unknown death_handling '" + std::string(s) + "'");
}

MissingHandling parse_missing_handling(std::string_view s) {
  if (s == "failure") return MissingHandling::failure;
  if (s == "adjust") return MissingHandling::adjust;
  if (s == "exclude") return MissingHandling::exclude;
  throw ConfigError("unknown missing_handling '" + std::string(s) + "'");
}

std::string_view to_string(AscertainmentCategory c) {
  switch (c) {
    case AscertainmentCategory::outmigrated: return "outmigrated";
    case AscertainmentCategory::transferred: return "transferred";
    case AscertainmentCategory::measured: return "measured";
    case AscertainmentCategory::died: return "died";
    case AscertainmentCategory::missing: return "missing";
  }
  return "?";
}

std::string_view to_string(Grouping g) {
  switch (g) {
    case Grouping::overall: return "overall";
    case Grouping::arm: return "arm";
    case Grouping::country: return "country";
    case Grouping::country_arm: return "country_arm";
    case Grouping::clinic: return "clinic";
  }
  return "?";
}

Grouping parse_grouping(std::string_view s) {
  for (auto g : {Grouping::overall, Grouping::arm, Grouping::country, Grouping::country_arm,
                 Grouping::clinic})
    if (to_string(g) == s) return g;
  throw ConfigError("unknown grouping '" + std::string(s) + "'");
}

bool ParticipantRecord::on_dtg_baseline() const {
  return art_regimen_baseline.find("DTG") != std::string::npos;
}

// ---------------------------------------------------------------------------
// Window and classification

EndpointWindow endpoint_window(Date enrollment_date, Date database_closure) {
  EndpointWindow w;
  w.database_closure = database_closure;
  w.two_year_mark = enrollment_date + Days{kTwoYearDays};
  w.start = w.two_year_mark - Days{kWindowDaysBefore};
  w.end = std::min(w.two_year_mark + Days{kWindowDaysAfter}, database_closure);
  if (w.start >= w.end)
    throw UnevaluableWindow("endpoint window empty: start " + format_date(w.start) + " >= end " +
                            format_date(w.end));
  return w;
}

PopulationSpec PopulationSpec::primary() { return PopulationSpec{}; }

PopulationSpec PopulationSpec::secondary() {
  PopulationSpec s;
  s.population = Population::secondary;
  s.enrollment_cutoff.reset();
  s.transfer_handling = TransferHandling::include;
  return s;
}

void PopulationSpec::validate() const {
  if (population == Population::primary && transfer_handling == TransferHandling::include)
    throw ConfigError("primary population cannot include transferred participants");
  if (!(vl_threshold > 0)) throw ConfigError("vl_threshold must be positive");
}

std::string PopulationSpec::canonical() const {
  std::string s = "population=" + std::string(to_string(population));
  s += ";cutoff=" + (enrollment_cutoff ? format_date(*enrollment_cutoff) : std::string("none"));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", vl_threshold);
  s += ";threshold=" + std::string(buf);
  s += ";transfer=" + std::string(to_string(transfer_handling));
  s += ";death=" + std::string(to_string(death_handling));
  s += ";missing=" + std::string(to_string(missing_handling));
  return s;
}

EndpointClassification classify_endpoint(const ParticipantRecord& rec, const PopulationSpec& spec,
                                         const EndpointWindow& window) {
  using S = EndpointStatus;
  if (rec.withdrawal_date) return {S::excluded_withdrawn, std::nullopt};
  if (spec.enrollment_cutoff && rec.enrollment_date >= *spec.enrollment_cutoff)
    return {S::excluded_late_enrollment, std::nullopt};
  if (spec.population == Population::primary && rec.outmigration_date &&
      *rec.outmigration_date <= window.end)
    return {S::excluded_outmigrated, std::nullopt};
  if (rec.transfer_date && *rec.transfer_date <= window.end) {
    switch (spec.transfer_handling) {
      case TransferHandling::exclude: return {S::excluded_transferred, std::nullopt};
      case TransferHandling::success: return {S::transfer_success, std::nullopt};
      case TransferHandling::censor: return {S::censored, std::nullopt};
      case TransferHandling::include: break;
    }
  }

  // A viral load drawn on or after the date of death is not eligible.
  std::optional<ViralLoad> best;
  long best_distance = 0;
  for (const auto& vl : rec.viral_loads) {
    if (vl.date < window.start || vl.date > window.end) continue;
    if (rec.death_date && vl.date >= *rec.death_date) continue;
    long distance = std::labs(days_between(window.two_year_mark, vl.date));
    if (!best || distance < best_distance || (distance == best_distance && vl.date < best->date)) {
      best = vl;
      best_distance = distance;
    }
  }

  if (!best && rec.death_date && *rec.death_date <= window.end)
    return {spec.death_handling == DeathHandling::failure ? S::died : S::censored, std::nullopt};
  if (best) return {best->copies < spec.vl_threshold ? S::suppressed : S::unsuppressed, best};
  return {S::missing_vl, std::nullopt};
}

CareStatus classify_care_status(Date art_start_date, std::optional<Date> last_visit_date,
                                Date enrollment_date) {
  if (art_start_date > enrollment_date)
    throw DataError("ART start " + format_date(art_start_date) + " after enrollment " +
                    format_date(enrollment_date));
  if (days_between(art_start_date, enrollment_date) <= kSixMonthDays)
    return CareStatus::recently_engaged;
  if (last_visit_date && *last_visit_date <= enrollment_date &&
      days_between(*last_visit_date, enrollment_date) <= kSixMonthDays)
    return CareStatus::engaged;
  return CareStatus::re_engaging;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

struct CsvRow {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

struct CsvFile {
  std::vector<std::string> header;
  std::vector<CsvRow> rows;
};

CsvFile read_csv(std::istream& in, const std::string& source) {
  CsvFile f;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto fields = split_csv_line(line);
    for (auto& x : fields) x = trim(x);
    if (!have_header) {
      f.header = std::move(fields);
      have_header = true;
      continue;
    }
    f.rows.push_back({line_no, std::move(fields)});
  }
  if (!have_header) throw DataError(source + ": empty file (no header)");
  return f;
}

class ColumnIndex {
public:
  ColumnIndex(const std::vector<std::string>& header, const std::vector<std::string>& required,
              const std::string& source) {
    for (std::size_t i = 0; i < header.size(); ++i) index_[header[i]] = i;
    for (const auto& r : required)
      if (!index_.count(r)) throw DataError(source + ": missing required column '" + r + "'");
  }
  std::string get(const CsvRow& row, const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end() || it->second >= row.fields.size()) return {};
    return row.fields[it->second];
  }

private:
  std::unordered_map<std::string, std::size_t> index_;
};

std::string where(const std::string& source, std::size_t line) {
  return source + ":" + std::to_string(line) + ": ";
}

long parse_long_field(const std::string& s, const std::string& what, const std::string& ctx) {
  long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size())
    throw DataError(ctx + "unparseable " + what + " '" + s + "'");
  return v;
}

double parse_double_field(const std::string& s, const std::string& what, const std::string& ctx) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(ctx + "unparseable " + what + " '" + s + "'");
  }
}

Date parse_date_field(const std::string& s, const std::string& ctx) {
  try {
    return parse_date(s);
  } catch (const DataError& e) {
    throw DataError(ctx + e.what());
  }
}

std::optional<Date> parse_opt_date_field(const std::string& s, const std::string& ctx) {
  if (s.empty()) return std::nullopt;
  return parse_date_field(s, ctx);
}

Sex parse_sex(const std::string& s, const std::string& ctx) {
  if (s == "female" || s == "F") return Sex::female;
  if (s == "male" || s == "M") return Sex::male;
  throw DataError(ctx + "unknown sex code '" + s + "'");
}

Country parse_country(const std::string& s, const std::string& ctx) {
  if (s == "Kenya" || s == "kenya") return Country::kenya;
  if (s == "Uganda" || s == "uganda") return Country::uganda;
  throw DataError(ctx + "unknown country '" + s + "'");
}

CareStatus parse_care(const std::string& s, const std::string& ctx) {
  if (s == "recently_engaged") return CareStatus::recently_engaged;
  if (s == "engaged") return CareStatus::engaged;
  if (s == "re_engaging") return CareStatus::re_engaging;
  throw DataError(ctx + "unknown care status '" + s + "'");
}

std::optional<bool> parse_opt_bool(const std::string& s, const std::string& what,
                                   const std::string& ctx) {
  if (s.empty() || s == "NA") return std::nullopt;
  if (s == "1" || s == "true" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "no") return false;
  throw DataError(ctx + "unparseable " + what + " '" + s + "'");
}

std::vector<std::string> list_items(const std::string& s) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  for (auto& item : split(s, ';')) {
    auto t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string opt_date(const std::optional<Date>& d) { return d ? format_date(*d) : std::string(); }

std::string fmt_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

} // namespace

const std::vector<std::string>& participant_columns() {
  static const std::vector<std::string> cols = {
      "participant_id", "clinic_id", "enrollment_date", "age", "sex", "country", "education",
      "employment", "marital_status", "n_children", "alcohol_use", "mobility",
      "art_regimen_baseline", "baseline_suppressed", "baseline_care_status", "art_start_date",
      "last_visit_date", "withdrawal_date", "death_date", "outmigration_date", "transfer_date",
      "dtg_switch_date", "second_line_date", "birth_dates", "contact_dates", "viral_loads",
      "satisfaction"};
  return cols;
}

const std::vector<std::string>& clinic_columns() {
  static const std::vector<std::string> cols = {"clinic_id", "country", "arm", "stratum_id",
                                                "n_youth_in_care_baseline",
                                                "baseline_suppression_proportion"};
  return cols;
}

LoadResult parse_participants(std::istream& in, const std::string& source) {
  CsvFile csv = read_csv(in, source);
  static const std::vector<std::string> required = {"participant_id", "clinic_id",
                                                    "enrollment_date", "age", "sex", "country",
                                                    "baseline_care_status"};
  ColumnIndex col(csv.header, required, source);

  LoadResult result;
  std::unordered_set<std::string> seen;
  for (const auto& row : csv.rows) {
    const std::string ctx = where(source, row.line);
    ParticipantRecord r;
    r.participant_id = col.get(row, "participant_id");
    if (r.participant_id.empty()) throw DataError(ctx + "empty participant_id");
    if (!seen.insert(r.participant_id).second)
      throw DataError(ctx + "duplicate participant_id '" + r.participant_id + "'");
    r.clinic_id = col.get(row, "clinic_id");
    r.enrollment_date = parse_date_field(col.get(row, "enrollment_date"), ctx);
    r.age = static_cast<int>(parse_long_field(col.get(row, "age"), "age", ctx));
    r.sex = parse_sex(col.get(row, "sex"), ctx);
    r.country = parse_country(col.get(row, "country"), ctx);
    r.education = col.get(row, "education");
    r.employment = col.get(row, "employment");
    r.marital_status = col.get(row, "marital_status");
    if (auto s = col.get(row, "n_children"); !s.empty() && s != "NA")
      r.n_children = static_cast<int>(parse_long_field(s, "n_children", ctx));
    r.alcohol_use = col.get(row, "alcohol_use");
    r.mobility = col.get(row, "mobility");
    r.art_regimen_baseline = col.get(row, "art_regimen_baseline");
    r.baseline_suppressed = parse_opt_bool(col.get(row, "baseline_suppressed"),
                                           "baseline_suppressed", ctx);
    r.baseline_care_status = parse_care(col.get(row, "baseline_care_status"), ctx);
    r.art_start_date = parse_opt_date_field(col.get(row, "art_start_date"), ctx);
    r.last_visit_date = parse_opt_date_field(col.get(row, "last_visit_date"), ctx);
    r.withdrawal_date = parse_opt_date_field(col.get(row, "withdrawal_date"), ctx);
    r.death_date = parse_opt_date_field(col.get(row, "death_date"), ctx);
    r.outmigration_date = parse_opt_date_field(col.get(row, "outmigration_date"), ctx);
    r.transfer_date = parse_opt_date_field(col.get(row, "transfer_date"), ctx);
    r.dtg_switch_date = parse_opt_date_field(col.get(row, "dtg_switch_date"), ctx);
    r.second_line_date = parse_opt_date_field(col.get(row, "second_line_date"), ctx);
    for (const auto& d : list_items(col.get(row, "birth_dates")))
      r.birth_dates.push_back(parse_date_field(d, ctx));
    for (const auto& d : list_items(col.get(row, "contact_dates")))
      r.contact_dates.push_back(parse_date_field(d, ctx));
    for (const auto& item : list_items(col.get(row, "viral_loads"))) {
      auto colon = item.find(':');
      if (colon == std::string::npos)
        throw DataError(ctx + "viral load entry '" + item + "' is not date:copies");
      ViralLoad vl;
      vl.date = parse_date_field(item.substr(0, colon), ctx);
      vl.copies = parse_double_field(item.substr(colon + 1), "viral load copies", ctx);
      r.viral_loads.push_back(vl);
    }
    for (const auto& item : list_items(col.get(row, "satisfaction"))) {
      auto colon = item.find(':');
      if (colon == std::string::npos)
        throw DataError(ctx + "satisfaction entry '" + item + "' is not question:score");
      r.satisfaction.push_back(
          {item.substr(0, colon),
           static_cast<int>(parse_long_field(item.substr(colon + 1), "satisfaction score", ctx))});
    }
    std::sort(r.contact_dates.begin(), r.contact_dates.end());
    std::sort(r.viral_loads.begin(), r.viral_loads.end(),
              [](const ViralLoad& a, const ViralLoad& b) { return a.date < b.date; });

    // Row-level invariants: reject with a diagnostic rather than abort the load.
    std::string problem;
    auto check_after = [&](const std::optional<Date>& d, const char* name) {
      if (problem.empty() && d && *d < r.enrollment_date)
        problem = std::string(name) + " " + format_date(*d) + " precedes enrollment";
    };
    check_after(r.withdrawal_date, "withdrawal_date");
    check_after(r.death_date, "death_date");
    check_after(r.outmigration_date, "outmigration_date");
    check_after(r.transfer_date, "transfer_date");
    check_after(r.dtg_switch_date, "dtg_switch_date");
    check_after(r.second_line_date, "second_line_date");
    if (problem.empty() && !r.contact_dates.empty() && r.contact_dates.front() < r.enrollment_date)
      problem = "contact date precedes enrollment";
    for (const auto& vl : r.viral_loads) {
      if (!problem.empty()) break;
      if (vl.date < r.enrollment_date) problem = "viral load dated before enrollment";
      else if (vl.copies < 0) problem = "negative viral load";
    }
    if (problem.empty() && r.age < 0) problem = "negative age";
    if (problem.empty() && r.art_start_date) {
      if (*r.art_start_date > r.enrollment_date) {
        problem = "art_start_date after enrollment";
      } else if (classify_care_status(*r.art_start_date, r.last_visit_date, r.enrollment_date) !=
                 r.baseline_care_status) {
        problem = "baseline_care_status inconsistent with ART start / last visit";
      }
    }
    if (!problem.empty()) {
      result.rejected.push_back({row.line, r.participant_id, problem});
      continue;
    }
    result.records.push_back(std::move(r));
  }
  return result;
}

LoadResult load_participants(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open participants file " + path.string());
  return parse_participants(in, path.filename().string());
}

std::vector<ClinicRecord> parse_clinics(std::istream& in, const std::string& source) {
  CsvFile csv = read_csv(in, source);
  ColumnIndex col(csv.header, clinic_columns(), source);
  std::vector<ClinicRecord> out;
  for (const auto& row : csv.rows) {
    const std::string ctx = where(source, row.line);
    ClinicRecord c;
    c.clinic_id = col.get(row, "clinic_id");
    c.country = parse_country(col.get(row, "country"), ctx);
    long arm = parse_long_field(col.get(row, "arm"), "arm", ctx);
    if (arm != 0 && arm != 1) throw DataError(ctx + "arm must be 0 or 1");
    c.arm = static_cast<Arm>(arm);
    c.stratum_id = col.get(row, "stratum_id");
    c.n_youth_in_care_baseline =
        parse_long_field(col.get(row, "n_youth_in_care_baseline"), "n_youth_in_care_baseline", ctx);
    c.baseline_suppression_proportion = parse_double_field(
        col.get(row, "baseline_suppression_proportion"), "baseline_suppression_proportion", ctx);
    out.push_back(std::move(c));
  }
  validate_clinics(out);
  return out;
}

std::vector<ClinicRecord> load_clinics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open clinics file " + path.string());
  return parse_clinics(in, path.filename().string());
}

std::vector<SurveyItem> load_survey(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open survey dictionary " + path.string());
  CsvFile csv = read_csv(in, path.filename().string());
  ColumnIndex col(csv.header, {"question_id", "reverse_coded"}, path.filename().string());
  std::vector<SurveyItem> out;
  for (const auto& row : csv.rows) {
    auto rev = parse_opt_bool(col.get(row, "reverse_coded"), "reverse_coded",
                              where(path.filename().string(), row.line));
    out.push_back({col.get(row, "question_id"), rev.value_or(false)});
  }
  return out;
}

void validate_clinics(std::span<const ClinicRecord> clinics) {
  std::unordered_set<std::string> ids;
  std::map<std::string, std::array<int, 2>> strata;
  for (const auto& c : clinics) {
    if (c.clinic_id.empty()) throw DataError("clinic with empty clinic_id");
    if (!ids.insert(c.clinic_id).second)
      throw DataError("duplicate clinic_id '" + c.clinic_id + "'");
    if (!(c.baseline_suppression_proportion >= 0.0 && c.baseline_suppression_proportion <= 1.0))
      throw DataError("clinic " + c.clinic_id + ": baseline_suppression_proportion outside [0,1]");
    if (c.n_youth_in_care_baseline < 0)
      throw DataError("clinic " + c.clinic_id + ": negative n_youth_in_care_baseline");
    strata[c.stratum_id][static_cast<int>(c.arm)]++;
  }
  for (const auto& [id, counts] : strata)
    if (counts[0] != counts[1])
      throw DataError("stratum '" + id + "' is unbalanced: " + std::to_string(counts[1]) +
                      " intervention vs " + std::to_string(counts[0]) + " control clinics");
}

TrialLoad load_trial(const std::filesystem::path& dir) {
  TrialLoad out;
  auto parts = load_participants(dir / "participants.csv");
  out.data.participants = std::move(parts.records);
  out.rejected = std::move(parts.rejected);
  out.data.clinics = load_clinics(dir / "clinics.csv");
  if (std::filesystem::exists(dir / "survey.csv")) out.data.survey = load_survey(dir / "survey.csv");
  return out;
}

void write_participants(std::ostream& out, std::span<const ParticipantRecord> records) {
  const auto& cols = participant_columns();
  out << "# participants schema v" << kSchemaVersion << "\n";
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  for (const auto& r : records) {
    std::vector<std::string> f;
    f.push_back(r.participant_id);
    f.push_back(r.clinic_id);
    f.push_back(format_date(r.enrollment_date));
    f.push_back(std::to_string(r.age));
    f.emplace_back(to_string(r.sex));
    f.emplace_back(to_string(r.country));
    f.push_back(r.education);
    f.push_back(r.employment);
    f.push_back(r.marital_status);
    f.push_back(r.n_children ? std::to_string(*r.n_children) : "");
    f.push_back(r.alcohol_use);
    f.push_back(r.mobility);
    f.push_back(r.art_regimen_baseline);
    f.push_back(r.baseline_suppressed ? (*r.baseline_suppressed ? "1" : "0") : "");
    f.emplace_back(to_string(r.baseline_care_status));
    f.push_back(opt_date(r.art_start_date));
    f.push_back(opt_date(r.last_visit_date));
    f.push_back(opt_date(r.withdrawal_date));
    f.push_back(opt_date(r.death_date));
    f.push_back(opt_date(r.outmigration_date));
    f.push_back(opt_date(r.transfer_date));
    f.push_back(opt_date(r.dtg_switch_date));
    f.push_back(opt_date(r.second_line_date));
    std::string s;
    for (std::size_t i = 0; i < r.birth_dates.size(); ++i)
      s += (i ? ";" : "") + format_date(r.birth_dates[i]);
    f.push_back(s);
    s.clear();
    for (std::size_t i = 0; i < r.contact_dates.size(); ++i)
      s += (i ? ";" : "") + format_date(r.contact_dates[i]);
    f.push_back(s);
    s.clear();
    for (std::size_t i = 0; i < r.viral_loads.size(); ++i)
      s += (i ? ";" : "") + format_date(r.viral_loads[i].date) + ":" +
           fmt_number(r.viral_loads[i].copies);
    f.push_back(s);
    s.clear();
    for (std::size_t i = 0; i < r.satisfaction.size(); ++i)
      s += (i ? ";" : "") + r.satisfaction[i].question_id + ":" +
           std::to_string(r.satisfaction[i].score);
    f.push_back(s);
    for (std::size_t i = 0; i < f.size(); ++i) out << (i ? "," : "") << csv_escape(f[i]);
    out << "\n";
  }
}

void write_clinics(std::ostream& out, std::span<const ClinicRecord> clinics) {
  const auto& cols = clinic_columns();
  out << "# clinics schema v" << kSchemaVersion << "\n";
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  for (const auto& c : clinics)
    out << csv_escape(c.clinic_id) << "," << to_string(c.country) << "," << static_cast<int>(c.arm)
        << "," << csv_escape(c.stratum_id) << "," << c.n_youth_in_care_baseline << ","
        << fmt_number(c.baseline_suppression_proportion) << "\n";
}

void write_survey(std::ostream& out, std::span<const SurveyItem> items) {
  out << "question_id,reverse_coded\n";
  for (const auto& q : items) out << csv_escape(q.question_id) << "," << (q.reverse_coded ? 1 : 0) << "\n";
}

// ---------------------------------------------------------------------------
// Population selection

AnalysisSet select_population(std::span<const ParticipantRecord> records,
                              std::span<const ClinicRecord> clinics, const PopulationSpec& spec,
                              Date database_closure) {
  spec.validate();
  AnalysisSet set;
  set.spec = spec;
  set.clinics.assign(clinics.begin(), clinics.end());
  set.database_closure = database_closure;

  std::unordered_map<std::string, std::size_t> clinic_index;
  for (std::size_t i = 0; i < clinics.size(); ++i) clinic_index[clinics[i].clinic_id] = i;

  for (const auto& rec : records) {
    auto it = clinic_index.find(rec.clinic_id);
    if (it == clinic_index.end())
      throw DataError("participant " + rec.participant_id + " references unknown clinic '" +
                      rec.clinic_id + "'");
    AnalysisRow row;
    row.record = rec;
    row.clinic_index = it->second;
    row.arm = clinics[it->second].arm;

    if (rec.withdrawal_date) {
      row.classification.status = EndpointStatus::excluded_withdrawn;
    } else if (spec.enrollment_cutoff && rec.enrollment_date >= *spec.enrollment_cutoff) {
      row.classification.status = EndpointStatus::excluded_late_enrollment;
    } else {
      try {
        row.window = endpoint_window(rec.enrollment_date, database_closure);
        row.classification = classify_endpoint(rec, spec, *row.window);
      } catch (const UnevaluableWindow&) {
        row.classification.status = EndpointStatus::excluded_unevaluable;
      }
    }

    auto status = row.classification.status;
    bool drop = is_exclusion(status) ||
                (status == EndpointStatus::missing_vl &&
                 spec.missing_handling == MissingHandling::exclude);
    if (drop) {
      set.exclusion_counts[status]++;
      set.excluded.push_back(std::move(row));
    } else {
      set.rows.push_back(std::move(row));
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// Engagement

EngagementIndicators engagement_indicators(const ParticipantRecord& record,
                                           const EndpointWindow& window) {
  EngagementIndicators out;
  std::vector<Date> contacts;
  contacts.push_back(record.enrollment_date);
  for (Date d : record.contact_dates)
    if (d >= record.enrollment_date && d < window.start) contacts.push_back(d);
  std::sort(contacts.begin(), contacts.end());

  const Date lookback = window.start - Days{kSixMonthDays};
  for (Date d : contacts)
    if (d >= lookback && d < window.start) out.engaged_2y = true;

  contacts.push_back(window.start);
  for (std::size_t i = 1; i < contacts.size(); ++i) {
    if (days_between(contacts[i - 1], contacts[i]) > kRetentionGapDays) {
      out.retained = false;
      out.lapse_time = days_between(record.enrollment_date, contacts[i]);
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tables

std::vector<AscertainmentRow> ascertainment_table(const AnalysisSet& set) {
  PopulationSpec flow;
  flow.population = Population::primary;
  flow.enrollment_cutoff = set.spec.enrollment_cutoff;
  flow.vl_threshold = set.spec.vl_threshold;

  std::array<AscertainmentRow, 3> rows;
  rows[0].group = "overall";
  rows[1].group = "control";
  rows[2].group = "intervention";

  auto tally = [&](const AnalysisRow& r) {
    if (!r.window) return;
    auto s = classify_endpoint(r.record, flow, *r.window).status;
    std::optional<AscertainmentCategory> cat;
    switch (s) {
      case EndpointStatus::excluded_outmigrated: cat = AscertainmentCategory::outmigrated; break;
      case EndpointStatus::excluded_transferred: cat = AscertainmentCategory::transferred; break;
      case EndpointStatus::suppressed:
      case EndpointStatus::unsuppressed: cat = AscertainmentCategory::measured; break;
      case EndpointStatus::died: cat = AscertainmentCategory::died; break;
      case EndpointStatus::missing_vl: cat = AscertainmentCategory::missing; break;
      default: break;
    }
    if (!cat) return;
    auto k = static_cast<std::size_t>(*cat);
    rows[0].counts[k]++;
    rows[1 + static_cast<int>(r.arm)].counts[k]++;
  };
  for (const auto& r : set.rows) tally(r);
  for (const auto& r : set.excluded) tally(r);

  for (auto& row : rows) {
    for (auto c : row.counts) row.total += c;
    for (std::size_t k = 0; k < kAscertainmentCategories; ++k)
      row.proportions[k] = row.total ? double(row.counts[k]) / double(row.total) : 0.0;
  }
  return {rows.begin(), rows.end()};
}

std::vector<OutcomeRow> outcome_table(const AnalysisSet& set) {
  std::array<OutcomeRow, 3> rows;
  rows[0].group = "overall";
  rows[1].group = "control";
  rows[2].group = "intervention";
  for (const auto& r : set.rows) {
    for (auto* row : {&rows[0], &rows[1 + static_cast<int>(r.arm)]}) {
      row->total++;
      switch (r.classification.status) {
        case EndpointStatus::suppressed: row->suppressed++; break;
        case EndpointStatus::unsuppressed: row->unsuppressed++; break;
        case EndpointStatus::died: row->died++; break;
        case EndpointStatus::missing_vl: row->missing++; break;
        default: row->other++; break;
      }
    }
  }
  return {rows.begin(), rows.end()};
}

double quantile(std::vector<double> values, double p) {
  if (values.empty()) return std::nan("");
  std::sort(values.begin(), values.end());
  double h = (values.size() - 1) * p;
  auto lo = static_cast<std::size_t>(std::floor(h));
  auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - lo) * (values[hi] - values[lo]);
}

std::vector<BaselineRow> baseline_table(std::span<const AnalysisRow> rows,
                                        std::span<const ClinicRecord> clinics, Grouping grouping) {
  auto group_of = [&](const AnalysisRow& r) -> std::string {
    switch (grouping) {
      case Grouping::overall: return "overall";
      case Grouping::arm: return std::string(to_string(r.arm));
      case Grouping::country: return std::string(to_string(r.record.country));
      case Grouping::country_arm:
        return std::string(to_string(r.record.country)) + "/" + std::string(to_string(r.arm));
      case Grouping::clinic:
        return r.clinic_index < clinics.size() ? clinics[r.clinic_index].clinic_id
                                               : r.record.clinic_id;
    }
    return "overall";
  };

  std::map<std::string, std::vector<const AnalysisRow*>> groups;
  for (const auto& r : rows) groups[group_of(r)].push_back(&r);

  using Getter = std::string (*)(const ParticipantRecord&);
  static const std::vector<std::pair<std::string, Getter>> categorical = {
      {"sex", [](const ParticipantRecord& p) { return std::string(to_string(p.sex)); }},
      {"country", [](const ParticipantRecord& p) { return std::string(to_string(p.country)); }},
      {"education", [](const ParticipantRecord& p) { return p.education; }},
      {"employment", [](const ParticipantRecord& p) { return p.employment; }},
      {"marital_status", [](const ParticipantRecord& p) { return p.marital_status; }},
      {"alcohol_use", [](const ParticipantRecord& p) { return p.alcohol_use; }},
      {"mobility", [](const ParticipantRecord& p) { return p.mobility; }},
      {"art_regimen_baseline", [](const ParticipantRecord& p) { return p.art_regimen_baseline; }},
      {"baseline_suppressed",
       [](const ParticipantRecord& p) {
         return p.baseline_suppressed ? std::string(*p.baseline_suppressed ? "yes" : "no")
                                      : std::string("missing");
       }},
      {"baseline_care_status",
       [](const ParticipantRecord& p) { return std::string(to_string(p.baseline_care_status)); }},
  };

  std::vector<BaselineRow> out;
  for (const auto& [group, members] : groups) {
    auto numeric = [&](const std::string& name, auto get) {
      std::vector<double> v;
      for (auto* m : members)
        if (auto x = get(m->record)) v.push_back(*x);
      BaselineRow row;
      row.group = group;
      row.variable = name;
      row.numeric = true;
      row.n = v.size();
      row.count = v.size();
      row.percent = members.empty() ? 0.0 : 100.0 * double(v.size()) / double(members.size());
      row.median = quantile(v, 0.5);
      row.q1 = quantile(v, 0.25);
      row.q3 = quantile(v, 0.75);
      out.push_back(row);
    };
    numeric("age", [](const ParticipantRecord& p) { return std::optional<double>(p.age); });
    numeric("n_children", [](const ParticipantRecord& p) {
      return p.n_children ? std::optional<double>(*p.n_children) : std::nullopt;
    });
    for (const auto& [name, get] : categorical) {
      std::map<std::string, std::size_t> counts;
      for (auto* m : members) counts[get(m->record)]++;
      for (const auto& [level, count] : counts) {
        BaselineRow row;
        row.group = group;
        row.variable = name;
        row.level = level;
        row.n = members.size();
        row.count = count;
        row.percent = 100.0 * double(count) / double(members.size());
        out.push_back(row);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Covariates

Covariates build_covariates(std::span<const AnalysisRow* const> rows,
                            std::span<const std::string> names) {
  Covariates cov(rows.size());
  for (const auto& name : names) {
    std::vector<double> v(rows.size());
    if (name == "age") {
      for (std::size_t i = 0; i < rows.size(); ++i) v[i] = rows[i]->record.age;
      cov.add(name, std::move(v), true);
    } else if (name == "sex") {
      for (std::size_t i = 0; i < rows.size(); ++i) v[i] = rows[i]->record.sex == Sex::female;
      cov.add(name, std::move(v), false);
    } else if (name == "country") {
      for (std::size_t i = 0; i < rows.size(); ++i) v[i] = rows[i]->record.country == Country::uganda;
      cov.add(name, std::move(v), false);
    } else if (name == "baseline_suppressed") {
      std::size_t yes = 0, no = 0;
      for (auto* r : rows)
        if (r->record.baseline_suppressed) (*r->record.baseline_suppressed ? yes : no)++;
      const double mode = yes >= no ? 1.0 : 0.0;
      std::vector<double> missing(rows.size(), 0.0);
      bool any_missing = false;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& b = rows[i]->record.baseline_suppressed;
        v[i] = b ? double(*b) : mode;
        if (!b) missing[i] = 1.0, any_missing = true;
      }
      cov.add(name, std::move(v), false);
      if (any_missing) cov.add("baseline_suppressed_missing", std::move(missing), false);
    } else if (name == "outmigration") {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = *rows[i];
        v[i] = r.record.outmigration_date &&
               (!r.window || *r.record.outmigration_date <= r.window->end);
      }
      cov.add(name, std::move(v), false);
    } else {
      throw ConfigError("unknown adjustment covariate '" + name + "'");
    }
  }
  return cov;
}

} // namespace crt
