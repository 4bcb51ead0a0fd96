#pragma once

#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "crt/trial_data.hpp"
#include "crt/two_stage.hpp"

namespace crt {

inline constexpr double kDaysPerMonth = 30.4375;

enum class EventKind { dtg_switch, second_line, lapse, transfer, death };
std::string_view to_string(EventKind k);
EventKind parse_event_kind(std::string_view s);

struct TimeToEvent {
  long time = 1;  // days from enrollment, >= 1
  bool event = false;
  EventKind kind = EventKind::dtg_switch;
};

struct CensorRules {
  bool at_death = false;
  bool at_endpoint_vl = false;
  bool at_outmigration = false;
  bool at_transfer = false;
  bool at_window_start = false;
  bool at_closure = true;
};

/// Switch kinds: death, endpoint VL ascertainment, closure. Lapse: death,
/// outmigration, transfer, window start. Death: outmigration, transfer, closure.
/// Transfer: death, outmigration, closure.
CensorRules default_censor_rules(EventKind kind);

struct EventContext {
  std::optional<EndpointWindow> window;
  std::optional<Date> endpoint_vl_date;
  Date database_closure = default_database_closure();
};

/// Event if the event date is on or before every censoring date (same-day ties
/// go to the event); otherwise censored at the earliest censoring date.
/// Same-day-as-enrollment times are recorded as day 1.
TimeToEvent time_to_event(const ParticipantRecord& record, EventKind kind, const CensorRules& rules,
                          const EventContext& context);

struct KMCurve {
  std::vector<double> times;     // distinct times with at least one event
  std::vector<double> survival;  // S(t) just after each time
  std::vector<long> at_risk;
  std::vector<long> events;
  std::vector<double> greenwood_variance;
  double last_time = 0.0;        // largest observed time, event or censored
  long n = 0;
};

KMCurve km_fit(std::span<const TimeToEvent> data);

struct CumulativeValue {
  double horizon_days = 0.0;
  double value = 0.0;  // 1 - S(horizon)
  bool extrapolated = false;
};

/// Right-continuous step evaluation of F = 1 - S at horizons given in months.
std::vector<CumulativeValue> cumulative_at(const KMCurve& curve, std::span<const double> horizons_months);
double survival_at(const KMCurve& curve, double t_days);

/// Two-stage effect on the cumulative probability of `kind` by `horizon_months`:
/// stage 1 is each clinic's Kaplan-Meier F(horizon).
TwoStageResult two_stage_time_effect(std::span<const AnalysisRow* const> rows,
                                     std::span<const ClinicRecord> clinics, EventKind kind,
                                     double horizon_months, const TwoStageOptions& options,
                                     Date database_closure = default_database_closure());

/// Event context for an analysis row.
EventContext event_context(const AnalysisRow& row, Date database_closure);

} // namespace crt
