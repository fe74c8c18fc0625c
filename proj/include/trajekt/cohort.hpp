#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trajekt/ingest.hpp"

namespace trajekt {

enum class BaselineRule { median_365_7, min_7_0, min_in_visit };
std::string to_string(BaselineRule r);

struct BaselineCreatinine {
  double value = 0.0;  // mg/dL
  BaselineRule rule = BaselineRule::median_365_7;
};

enum class Outcome { ckd, death, censored };
std::string to_string(Outcome o);

struct ObservationWindow {
  Date t_start = 0;  // AKI visit start
  Date t_end = 0;
  Outcome outcome = Outcome::censored;
  int length_days() const { return t_end - t_start; }
};

struct CovariatePanel {
  Sex sex = Sex::unknown;
  double age_at_encounter = 0.0;
  std::optional<double> baseline_egfr;
  std::map<std::string, int> flags;          // comorbidities, medications, sepsis_day1
  std::map<std::string, double> day1_means;  // panel variable -> day-1 mean (may be absent)
};

struct CohortPatient {
  PersonId person_id = 0;
  VisitId visit_id = 0;
  BaselineCreatinine baseline;
  ObservationWindow window;
  CovariatePanel covariates;
};

struct AttritionReport {
  std::vector<std::pair<std::string, size_t>> steps;
};

struct EligibilityDecision {
  bool eligible = false;
  std::string reason;  // empty when eligible
};

struct ExclusionDecision {
  bool keep = false;
  std::string reason;  // empty when kept
};

inline const std::vector<std::string> kComorbidityFlags = {"DM",  "HTN", "CAD_MI",
                                                           "CHF", "PV",  "LD"};
inline const std::vector<std::string> kMedicationFlags = {"loop_thiazide", "RAS", "NSAID"};

struct CohortOptions {
  double ckd_baseline_threshold = 1.2;   // mg/dL
  double rise_factor = 1.5;              // 50% rise
  // child eGFR hook; default is the built-in u25 piecewise formula
  std::function<double(double age, Sex sex, double scr, double height_m)> child_egfr;
};

// Baseline cascade: pre-visit median, pre-visit minimum, in-visit minimum.
// nullopt means no creatinine anywhere (the visit is ineligible).
std::optional<BaselineCreatinine> baseline_creatinine(const EventLog& log,
                                                      const ConceptSets& sets,
                                                      PersonId person, const Visit& visit);

EligibilityDecision aki_eligibility(const EventLog& log, const ConceptSets& sets,
                                    PersonId person, const Visit& visit,
                                    const BaselineCreatinine& baseline,
                                    const CohortOptions& opt = {});

ExclusionDecision ckd_exclusion(const EventLog& log, const ConceptSets& sets,
                                PersonId person, const Visit& visit,
                                const BaselineCreatinine& baseline,
                                const CohortOptions& opt = {});

ObservationWindow observation_window(const EventLog& log, const ConceptSets& sets,
                                     PersonId person, const Visit& visit);

std::map<std::string, double> day1_severity(const EventLog& log, const ConceptSets& sets,
                                            PersonId person, const Visit& visit);

// 2021 CKD-EPI for adults; u25 height-based piecewise formula for children.
double egfr(double age_years, Sex sex, double scr,
            std::optional<double> height_m = std::nullopt);
double egfr_adult(double age_years, Sex sex, double scr);
double egfr_child_u25(double age_years, Sex sex, double scr, double height_m);

CovariatePanel assemble_covariates(const EventLog& log, const ConceptSets& sets,
                                   PersonId person, const Visit& visit,
                                   const std::map<std::string, double>& day1,
                                   const BaselineCreatinine& baseline,
                                   const CohortOptions& opt = {});

struct CohortResult {
  std::vector<CohortPatient> patients;  // person_id order
  AttritionReport attrition;
};

CohortResult build_cohort(const EventLog& log, const ConceptSets& sets,
                          const CohortOptions& opt = {}, int jobs = 1);

// sorted list of panel variable names declared in the config
std::vector<std::string> panel_variables(const ConceptSets& sets);

void write_cohort_csv(const std::string& path, const std::vector<CohortPatient>& cohort,
                      const std::vector<std::string>& panel_vars);
std::vector<CohortPatient> read_cohort_csv(const std::string& path,
                                           std::vector<std::string>* panel_vars = nullptr);
void write_attrition_csv(const std::string& path, const AttritionReport& report);

double age_at(Date birth, Date when);

}  // namespace trajekt
