#include "crt/survival.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "crt/error.hpp"

namespace crt {

std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::dtg_switch: return "dtg_switch";
    case EventKind::second_line: return "second_line";
    case EventKind::lapse: return "lapse";
    case EventKind::transfer: return "transfer";
    case EventKind::death: return "death";
  }
  return "?";
}

EventKind parse_event_kind(std::string_view s) {
  for (auto k : {EventKind::dtg_switch, EventKind::second_line, EventKind::lapse,
                 EventKind::transfer, EventKind::death})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown event kind '" + std::string(s) + "'");
}

CensorRules default_censor_rules(EventKind kind) {
  CensorRules r;
  switch (kind) {
    case EventKind::dtg_switch:
    case EventKind::second_line:
      r.at_death = r.at_endpoint_vl = true;
      break;
    case EventKind::lapse:
      r.at_death = r.at_outmigration = r.at_transfer = r.at_window_start = true;
      r.at_closure = false;
      break;
    case EventKind::death:
      r.at_outmigration = r.at_transfer = true;
      break;
    case EventKind::transfer:
      r.at_death = r.at_outmigration = true;
      break;
  }
  return r;
}

TimeToEvent time_to_event(const ParticipantRecord& rec, EventKind kind, const CensorRules& rules,
                          const EventContext& ctx) {
  std::optional<Date> event;
  switch (kind) {
    case EventKind::dtg_switch: event = rec.dtg_switch_date; break;
    case EventKind::second_line: event = rec.second_line_date; break;
    case EventKind::transfer: event = rec.transfer_date; break;
    case EventKind::death: event = rec.death_date; break;
    case EventKind::lapse:
      if (!ctx.window) throw DataError("lapse times need an endpoint window");
      if (auto lt = engagement_indicators(rec, *ctx.window).lapse_time)
        event = rec.enrollment_date + Days{*lt};
      break;
  }

  std::optional<Date> censor;
  auto consider = [&](std::optional<Date> d) {
    if (d && (!censor || *d < *censor)) censor = d;
  };
  if (rules.at_death) consider(rec.death_date);
  if (rules.at_endpoint_vl) consider(ctx.endpoint_vl_date);
  if (rules.at_outmigration) consider(rec.outmigration_date);
  if (rules.at_transfer) consider(rec.transfer_date);
  if (rules.at_window_start && ctx.window) consider(ctx.window->start);
  if (rules.at_closure || !censor) consider(ctx.database_closure);

  TimeToEvent t;
  t.kind = kind;
  Date when;
  if (event && *event <= *censor) {
    t.event = true;
    when = *event;
  } else {
    when = *censor;
  }
  t.time = std::max<long>(1, days_between(rec.enrollment_date, when));
  return t;
}

KMCurve km_fit(std::span<const TimeToEvent> data) {
  KMCurve c;
  c.n = static_cast<long>(data.size());
  if (data.empty()) return c;
  std::map<long, std::pair<long, long>> at;  // time -> (events, censorings)
  for (const auto& d : data) {
    auto& slot = at[d.time];
    (d.event ? slot.first : slot.second)++;
    c.last_time = std::max(c.last_time, double(d.time));
  }
  long risk = c.n;
  double s = 1.0, gw = 0.0;
  for (const auto& [time, counts] : at) {
    auto [ev, cens] = counts;
    if (ev > 0) {
      s *= 1.0 - double(ev) / double(risk);
      if (risk > ev) gw += double(ev) / (double(risk) * double(risk - ev));
      c.times.push_back(double(time));
      c.survival.push_back(s);
      c.at_risk.push_back(risk);
      c.events.push_back(ev);
      c.greenwood_variance.push_back(s * s * gw);
    }
    risk -= ev + cens;
  }
  return c;
}

double survival_at(const KMCurve& c, double t) {
  auto it = std::upper_bound(c.times.begin(), c.times.end(), t);
  if (it == c.times.begin()) return 1.0;
  return c.survival[std::size_t(it - c.times.begin()) - 1];
}

std::vector<CumulativeValue> cumulative_at(const KMCurve& c, std::span<const double> horizons) {
  std::vector<CumulativeValue> out;
  for (double h : horizons) {
    CumulativeValue v;
    v.horizon_days = h * kDaysPerMonth;
    v.extrapolated = v.horizon_days > c.last_time;
    v.value = 1.0 - survival_at(c, std::min(v.horizon_days, c.last_time));
    out.push_back(v);
  }
  return out;
}

EventContext event_context(const AnalysisRow& row, Date closure) {
  EventContext ctx;
  ctx.window = row.window;
  ctx.database_closure = closure;
  if (row.classification.endpoint_vl) ctx.endpoint_vl_date = row.classification.endpoint_vl->date;
  return ctx;
}

TwoStageResult two_stage_time_effect(std::span<const AnalysisRow* const> rows,
                                     std::span<const ClinicRecord> clinics, EventKind kind,
                                     double horizon_months, const TwoStageOptions& options,
                                     Date closure) {
  std::vector<std::vector<TimeToEvent>> by_clinic(clinics.size());
  auto rules = default_censor_rules(kind);
  for (const auto* r : rows)
    by_clinic.at(r->clinic_index).push_back(time_to_event(r->record, kind, rules, event_context(*r, closure)));

  std::vector<ClinicEndpoint> eps;
  const double h[] = {horizon_months};
  for (std::size_t j = 0; j < clinics.size(); ++j) {
    if (by_clinic[j].empty())
      throw DataError("clinic " + clinics[j].clinic_id + " has no subjects at risk at time 0");
    auto curve = km_fit(by_clinic[j]);
    ClinicEndpoint e;
    e.clinic_id = clinics[j].clinic_id;
    e.arm = clinics[j].arm;
    e.n_included = curve.n;
    e.y = cumulative_at(curve, h)[0].value;
    eps.push_back(e);
  }
  return two_stage_from_endpoints(std::move(eps), clinics, options);
}

} // namespace crt
