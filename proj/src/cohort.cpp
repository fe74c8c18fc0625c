#include "trajekt/cohort.hpp"

#include <algorithm>
#include <cmath>

#include "trajekt/csv.hpp"
#include "trajekt/parallel.hpp"

namespace trajekt {

std::string to_string(BaselineRule r) {
  switch (r) {
    case BaselineRule::median_365_7: return "median_365_7";
    case BaselineRule::min_7_0: return "min_7_0";
    default: return "min_in_visit";
  }
}

std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::ckd: return "ckd";
    case Outcome::death: return "death";
    default: return "censored";
  }
}

double age_at(Date birth, Date when) {
  return static_cast<double>(when - birth) / 365.25;
}

static std::set<ConceptId> creatinine_concepts(const ConceptSets& sets) {
  std::set<ConceptId> out;
  for (const auto& [cid, var] : sets.severity_panel)
    if (var == "Cr") out.insert(cid);
  return out;
}

// creatinine values with datetime in [lo, hi); hi exclusive
static std::vector<std::pair<DateTime, double>> cr_in(const EventLog& log,
                                                      const std::set<ConceptId>& cr,
                                                      PersonId person, DateTime lo,
                                                      DateTime hi) {
  std::vector<std::pair<DateTime, double>> out;
  auto it = log.measurements_of.find(person);
  if (it == log.measurements_of.end()) return out;
  for (size_t idx : it->second) {
    const Measurement& m = log.measurements[idx];
    if (!cr.count(m.concept_id)) continue;
    if (m.datetime >= lo && m.datetime < hi) out.emplace_back(m.datetime, m.value);
  }
  std::sort(out.begin(), out.end());
  return out;
}

static double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::optional<BaselineCreatinine> baseline_creatinine(const EventLog& log,
                                                      const ConceptSets& sets,
                                                      PersonId person, const Visit& visit) {
  auto cr = creatinine_concepts(sets);
  DateTime start = start_of_day(visit.start_date);
  DateTime visit_end = start_of_day(visit.end_date + 1);

  auto pre = cr_in(log, cr, person, start - 365 * kMinutesPerDay, start - 7 * kMinutesPerDay);
  if (!pre.empty()) {
    std::vector<double> vals;
    for (auto& [_, v] : pre) vals.push_back(v);
    return BaselineCreatinine{median(vals), BaselineRule::median_365_7};
  }
  auto week = cr_in(log, cr, person, start - 7 * kMinutesPerDay, start);
  if (!week.empty()) {
    double mn = week[0].second;
    for (auto& [_, v] : week) mn = std::min(mn, v);
    return BaselineCreatinine{mn, BaselineRule::min_7_0};
  }
  auto inv = cr_in(log, cr, person, start, visit_end);
  if (!inv.empty()) {
    double mn = inv[0].second;
    for (auto& [_, v] : inv) mn = std::min(mn, v);
    return BaselineCreatinine{mn, BaselineRule::min_in_visit};
  }
  return std::nullopt;
}

EligibilityDecision aki_eligibility(const EventLog& log, const ConceptSets& sets,
                                    PersonId person, const Visit& visit,
                                    const BaselineCreatinine& baseline,
                                    const CohortOptions& opt) {
  auto cr = creatinine_concepts(sets);
  DateTime start = start_of_day(visit.start_date);
  // [start, start+48h] inclusive
  auto window = cr_in(log, cr, person, start, start + 48 * 60 + 1);
  if (window.size() < 2) return {false, "too-few-measurements"};
  for (auto& [_, v] : window)
    if (v >= opt.rise_factor * baseline.value) return {true, ""};
  return {false, "no-rise-in-48h"};
}

ExclusionDecision ckd_exclusion(const EventLog& log, const ConceptSets& sets,
                                PersonId person, const Visit& visit,
                                const BaselineCreatinine& baseline,
                                const CohortOptions& opt) {
  const auto& ckd = sets.set_or_empty("ckd");
  auto it = log.events_of.find(person);
  if (it != log.events_of.end()) {
    for (size_t idx : it->second) {
      const Event& e = log.events[idx];
      if (ckd.count(e.concept_id) && e.date <= visit.end_date)
        return {false, "prior-ckd"};
    }
  }
  if (baseline.value >= opt.ckd_baseline_threshold) return {false, "baseline-ge-1.2"};
  return {true, ""};
}

ObservationWindow observation_window(const EventLog& log, const ConceptSets& sets,
                                     PersonId person, const Visit& visit) {
  const auto& ckd = sets.set_or_empty("ckd");
  Date t_start = visit.start_date;

  std::optional<Date> first_ckd;
  Date last_record = visit.end_date;
  if (auto it = log.events_of.find(person); it != log.events_of.end()) {
    for (size_t idx : it->second) {
      const Event& e = log.events[idx];
      last_record = std::max(last_record, e.date);
      if (ckd.count(e.concept_id) && e.date > t_start)
        if (!first_ckd || e.date < *first_ckd) first_ckd = e.date;
    }
  }
  if (auto it = log.measurements_of.find(person); it != log.measurements_of.end()) {
    for (size_t idx : it->second)
      last_record = std::max(last_record, date_of(log.measurements[idx].datetime));
  }
  if (auto it = log.visits_of.find(person); it != log.visits_of.end()) {
    for (size_t idx : it->second)
      last_record = std::max(last_record, log.visits[idx].end_date);
  }
  if (last_record < t_start)
    throw data_error("degenerate window: no records at or after visit start for person " +
                     std::to_string(person));

  const Person& p = log.person(person);

  // earliest of CKD, death, last record; ties resolve in that priority order
  Date t_end = last_record;
  Outcome outcome = Outcome::censored;
  if (p.death_date && *p.death_date <= t_end) {
    t_end = *p.death_date;
    outcome = Outcome::death;
  }
  if (first_ckd && *first_ckd <= t_end) {
    t_end = *first_ckd;
    outcome = Outcome::ckd;
  }
  if (t_end < t_start)
    throw data_error("degenerate window for person " + std::to_string(person));
  return {t_start, t_end, outcome};
}

std::map<std::string, double> day1_severity(const EventLog& log, const ConceptSets& sets,
                                            PersonId person, const Visit& visit) {
  DateTime start = start_of_day(visit.start_date);
  DateTime hi = start + 24 * 60 + 1;  // [start, start+24h] inclusive
  std::map<std::string, std::pair<double, int>> acc;
  auto it = log.measurements_of.find(person);
  if (it != log.measurements_of.end()) {
    for (size_t idx : it->second) {
      const Measurement& m = log.measurements[idx];
      if (m.datetime < start || m.datetime >= hi) continue;
      auto pit = sets.severity_panel.find(m.concept_id);
      if (pit == sets.severity_panel.end()) continue;
      const std::string& var = pit->second;
      if (auto rit = sets.valid_ranges.find(var); rit != sets.valid_ranges.end()) {
        if (m.value < rit->second.lo || m.value > rit->second.hi) continue;
      }
      auto& [sum, n] = acc[var];
      sum += m.value;
      n += 1;
    }
  }
  std::map<std::string, double> out;
  for (const auto& [var, sn] : acc) out[var] = sn.first / sn.second;
  return out;
}

double egfr_adult(double age_years, Sex sex, double scr) {
  if (scr <= 0.0) throw data_error("egfr: nonpositive serum creatinine");
  const bool female = sex == Sex::female;
  const double kappa = female ? 0.7 : 0.9;
  const double alpha = female ? -0.241 : -0.302;
  double v = 142.0 * std::pow(std::min(scr / kappa, 1.0), alpha) *
             std::pow(std::max(scr / kappa, 1.0), -1.200) * std::pow(0.9938, age_years);
  if (female) v *= 1.012;
  return v;
}

double egfr_child_u25(double age_years, Sex sex, double scr, double height_m) {
  if (scr <= 0.0) throw data_error("egfr: nonpositive serum creatinine");
  if (height_m <= 0.0) throw data_error("egfr: nonpositive height");
  const bool female = sex == Sex::female;
  double k;
  if (age_years < 12.0)
    k = (female ? 36.1 : 39.0) * std::pow(1.008, age_years - 12.0);
  else if (age_years < 18.0)
    k = female ? 36.1 * std::pow(1.023, age_years - 12.0)
               : 39.0 * std::pow(1.045, age_years - 12.0);
  else
    k = female ? 41.4 : 50.8;
  return k * height_m / scr;
}

double egfr(double age_years, Sex sex, double scr, std::optional<double> height_m) {
  if (age_years < 0.0) throw data_error("egfr: negative age");
  if (age_years >= 18.0) return egfr_adult(age_years, sex, scr);
  if (!height_m) throw data_error("egfr: height required for age < 18");
  return egfr_child_u25(age_years, sex, scr, *height_m);
}

CovariatePanel assemble_covariates(const EventLog& log, const ConceptSets& sets,
                                   PersonId person, const Visit& visit,
                                   const std::map<std::string, double>& day1,
                                   const BaselineCreatinine& baseline,
                                   const CohortOptions& opt) {
  CovariatePanel cov;
  const Person& p = log.person(person);
  cov.sex = p.sex;
  cov.age_at_encounter = age_at(p.birth_date, visit.start_date);
  cov.day1_means = day1;

  for (const auto& name : kComorbidityFlags) cov.flags[name] = 0;
  for (const auto& name : kMedicationFlags) cov.flags[name] = 0;
  cov.flags["sepsis_day1"] = 0;

  const auto& sepsis = sets.set_or_empty("sepsis");
  if (auto it = log.events_of.find(person); it != log.events_of.end()) {
    for (size_t idx : it->second) {
      const Event& e = log.events[idx];
      for (const auto& name : kComorbidityFlags)
        if (e.date < visit.start_date && sets.in_set(name, e.concept_id))
          cov.flags[name] = 1;
      for (const auto& name : kMedicationFlags)
        if (e.date >= visit.start_date - 365 && e.date <= visit.start_date &&
            sets.in_set(name, e.concept_id))
          cov.flags[name] = 1;
      // day-granular codes read as 00:00 of their date, so the first 24h
      // covers the visit start day and the next
      if (sepsis.count(e.concept_id) && e.date >= visit.start_date &&
          e.date <= visit.start_date + 1)
        cov.flags["sepsis_day1"] = 1;
    }
  }

  std::optional<double> height;
  if (auto hit = day1.find("height"); hit != day1.end()) height = hit->second;
  if (p.sex != Sex::unknown) {
    if (cov.age_at_encounter >= 18.0) {
      cov.baseline_egfr = egfr_adult(cov.age_at_encounter, p.sex, baseline.value);
    } else if (height) {
      if (opt.child_egfr)
        cov.baseline_egfr = opt.child_egfr(cov.age_at_encounter, p.sex, baseline.value, *height);
      else
        cov.baseline_egfr =
            egfr_child_u25(cov.age_at_encounter, p.sex, baseline.value, *height);
    }
  }
  return cov;
}

CohortResult build_cohort(const EventLog& log, const ConceptSets& sets,
                          const CohortOptions& opt, int jobs) {
  // filter stages, in application order; attrition counts persons reaching each
  enum Stage : int {
    kPerson = 0,
    kAkiVisit,
    kHasCreatinine,
    kTwoMeasurements,
    kRise,
    kNoPriorCkd,
    kBaselineBelowCutoff,
    kValidWindow,
    kStageCount
  };
  static const char* kStageNames[] = {
      "persons",           "first_aki_visit",         "has_creatinine",
      "ge2_cr_in_48h",     "cr_rise_ge_1.5x_in_48h",  "no_prior_or_concurrent_ckd",
      "baseline_lt_1.2",   "valid_window"};

  std::vector<PersonId> ids;
  ids.reserve(log.persons.size());
  for (const auto& p : log.persons) ids.push_back(p.person_id);
  std::sort(ids.begin(), ids.end());

  std::vector<int> reached(ids.size(), kPerson);
  std::vector<std::optional<CohortPatient>> results(ids.size());
  const auto& aki = sets.set_or_empty("aki");

  parallel_chunks(
      ids.size(), 64,
      [&](size_t, size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
          PersonId pid = ids[i];

          // first visit (by start date, then visit_id) carrying an AKI concept
          const Visit* aki_visit = nullptr;
          if (auto vit = log.visits_of.find(pid); vit != log.visits_of.end()) {
            for (size_t idx : vit->second) {
              const Visit& v = log.visits[idx];
              bool has_aki = false;
              if (auto eit = log.events_of.find(pid); eit != log.events_of.end()) {
                for (size_t e : eit->second) {
                  const Event& ev = log.events[e];
                  if (aki.count(ev.concept_id) && ev.date >= v.start_date &&
                      ev.date <= v.end_date) {
                    has_aki = true;
                    break;
                  }
                }
              }
              if (!has_aki) continue;
              if (!aki_visit || v.start_date < aki_visit->start_date ||
                  (v.start_date == aki_visit->start_date && v.visit_id < aki_visit->visit_id))
                aki_visit = &v;
            }
          }
          if (!aki_visit) continue;
          reached[i] = kAkiVisit;

          auto baseline = baseline_creatinine(log, sets, pid, *aki_visit);
          if (!baseline) continue;
          reached[i] = kHasCreatinine;

          auto elig = aki_eligibility(log, sets, pid, *aki_visit, *baseline, opt);
          if (!elig.eligible && elig.reason == "too-few-measurements") continue;
          reached[i] = kTwoMeasurements;
          if (!elig.eligible) continue;
          reached[i] = kRise;

          auto excl = ckd_exclusion(log, sets, pid, *aki_visit, *baseline, opt);
          if (!excl.keep && excl.reason == "prior-ckd") continue;
          reached[i] = kNoPriorCkd;
          if (!excl.keep) continue;
          reached[i] = kBaselineBelowCutoff;

          ObservationWindow window;
          try {
            window = observation_window(log, sets, pid, *aki_visit);
          } catch (const data_error&) {
            continue;
          }
          reached[i] = kValidWindow;

          auto day1 = day1_severity(log, sets, pid, *aki_visit);
          CohortPatient cp;
          cp.person_id = pid;
          cp.visit_id = aki_visit->visit_id;
          cp.baseline = *baseline;
          cp.window = window;
          cp.covariates = assemble_covariates(log, sets, pid, *aki_visit, day1, *baseline, opt);
          results[i] = std::move(cp);
        }
      },
      jobs);

  CohortResult out;
  for (int s = 0; s < kStageCount; ++s) {
    size_t n = 0;
    for (int r : reached)
      if (r >= s) ++n;
    out.attrition.steps.emplace_back(kStageNames[s], n);
  }
  for (auto& r : results)
    if (r) out.patients.push_back(std::move(*r));
  return out;
}

std::vector<std::string> panel_variables(const ConceptSets& sets) {
  std::set<std::string> vars;
  for (const auto& [_, var] : sets.severity_panel) vars.insert(var);
  return {vars.begin(), vars.end()};
}

void write_cohort_csv(const std::string& path, const std::vector<CohortPatient>& cohort,
                      const std::vector<std::string>& panel_vars) {
  std::vector<std::string> header = {"person_id", "visit_id",      "t_start",
                                     "t_end",     "outcome",       "baseline_cr",
                                     "baseline_rule", "sex",       "age_at_encounter",
                                     "baseline_egfr"};
  for (const auto& f : kComorbidityFlags) header.push_back(f);
  for (const auto& f : kMedicationFlags) header.push_back(f);
  header.push_back("sepsis_day1");
  for (const auto& v : panel_vars) header.push_back("day1_" + v);

  CsvWriter w(path, header);
  for (const auto& p : cohort) {
    std::vector<std::string> row = {
        std::to_string(p.person_id),
        std::to_string(p.visit_id),
        format_date(p.window.t_start),
        format_date(p.window.t_end),
        to_string(p.window.outcome),
        fmt_double(p.baseline.value),
        to_string(p.baseline.rule),
        to_string(p.covariates.sex),
        fmt_double(p.covariates.age_at_encounter),
        p.covariates.baseline_egfr ? fmt_double(*p.covariates.baseline_egfr) : ""};
    for (const auto& f : kComorbidityFlags) row.push_back(std::to_string(p.covariates.flags.at(f)));
    for (const auto& f : kMedicationFlags) row.push_back(std::to_string(p.covariates.flags.at(f)));
    row.push_back(std::to_string(p.covariates.flags.at("sepsis_day1")));
    for (const auto& v : panel_vars) {
      auto it = p.covariates.day1_means.find(v);
      row.push_back(it == p.covariates.day1_means.end() ? "" : fmt_double(it->second));
    }
    w.write_row(row);
  }
}

std::vector<CohortPatient> read_cohort_csv(const std::string& path,
                                           std::vector<std::string>* panel_vars) {
  CsvTable t = read_csv(path);
  std::vector<std::string> vars;
  for (const auto& h : t.header)
    if (h.rfind("day1_", 0) == 0) vars.push_back(h.substr(5));
  if (panel_vars) *panel_vars = vars;

  auto col = [&](const std::string& n) { return t.require_col(n, path); };
  int c_pid = col("person_id"), c_vid = col("visit_id"), c_ts = col("t_start"),
      c_te = col("t_end"), c_out = col("outcome"), c_bc = col("baseline_cr"),
      c_br = col("baseline_rule"), c_sex = col("sex"), c_age = col("age_at_encounter"),
      c_egfr = col("baseline_egfr");

  std::vector<CohortPatient> out;
  for (size_t r = 0; r < t.rows.size(); ++r) {
    std::string ctx = path + " row " + std::to_string(r + 2);
    const auto& row = t.rows[r];
    CohortPatient p;
    p.person_id = parse_int(row[c_pid], ctx);
    p.visit_id = parse_int(row[c_vid], ctx);
    p.window.t_start = *parse_date(row[c_ts]);
    p.window.t_end = *parse_date(row[c_te]);
    const std::string& o = row[c_out];
    p.window.outcome = o == "ckd" ? Outcome::ckd : o == "death" ? Outcome::death
                                                                : Outcome::censored;
    p.baseline.value = parse_double(row[c_bc], ctx);
    const std::string& br = row[c_br];
    p.baseline.rule = br == "median_365_7" ? BaselineRule::median_365_7
                      : br == "min_7_0"    ? BaselineRule::min_7_0
                                           : BaselineRule::min_in_visit;
    p.covariates.sex = row[c_sex] == "M"   ? Sex::male
                       : row[c_sex] == "F" ? Sex::female
                                           : Sex::unknown;
    p.covariates.age_at_encounter = parse_double(row[c_age], ctx);
    if (!row[c_egfr].empty()) p.covariates.baseline_egfr = parse_double(row[c_egfr], ctx);
    for (const auto& f : kComorbidityFlags)
      p.covariates.flags[f] = static_cast<int>(parse_int(row[col(f)], ctx));
    for (const auto& f : kMedicationFlags)
      p.covariates.flags[f] = static_cast<int>(parse_int(row[col(f)], ctx));
    p.covariates.flags["sepsis_day1"] = static_cast<int>(parse_int(row[col("sepsis_day1")], ctx));
    for (const auto& v : vars) {
      const std::string& cell = row[col("day1_" + v)];
      if (!cell.empty()) p.covariates.day1_means[v] = parse_double(cell, ctx);
    }
    out.push_back(std::move(p));
  }
  return out;
}

void write_attrition_csv(const std::string& path, const AttritionReport& report) {
  CsvWriter w(path, {"filter", "remaining"});
  for (const auto& [name, n] : report.steps) w.write_row({name, std::to_string(n)});
}

}  // namespace trajekt
