#pragma once

#include <optional>
#include <string>
#include <vector>

#include "trajekt/cluster.hpp"
#include "trajekt/cohort.hpp"
#include "trajekt/impute.hpp"

namespace trajekt {

struct KmCurve {
  std::vector<double> times;     // distinct event times, ascending
  std::vector<double> surv;      // S(t) at those times
  std::vector<int64_t> at_risk;  // just before each event time
  std::vector<int64_t> events;

  double at(double t) const;       // right-continuous S(t)
  double at_left(double t) const;  // S(t-)
};

KmCurve kaplan_meier(const std::vector<double>& times, const std::vector<uint8_t>& events);

enum class Ties { efron, breslow };
enum class CompetingMode { cause_specific, exclude_deaths };
enum class Cause { censored = 0, ckd = 1, death = 2 };

// covariate rows with the event of interest already resolved to 0/1
struct SurvivalData {
  std::vector<std::string> covariate_names;
  std::vector<double> time;
  std::vector<uint8_t> event;
  std::vector<double> x;  // n x p row-major

  size_t n() const { return time.size(); }
  size_t p() const { return covariate_names.size(); }
  double xij(size_t i, size_t j) const { return x[i * p() + j]; }
};

// same rows but with the full cause label, for competing-risk handling
struct CauseData {
  std::vector<std::string> covariate_names;
  std::vector<double> time;
  std::vector<Cause> cause;
  std::vector<double> x;
};

// cause_specific keeps deaths as censorings at the death time; the
// sensitivity mode removes subjects who died without the event.
SurvivalData apply_competing_mode(const CauseData& data, CompetingMode mode);

struct HazardFit {
  std::vector<std::string> covariates;
  std::vector<double> beta;
  std::vector<double> se;
  std::vector<double> hr, hr_lo, hr_hi;  // exp(beta +- 1.96 se)
  std::vector<double> covariance;        // p x p row-major
  std::vector<double> p_raw;
  std::vector<double> p_adj;  // filled by the caller via bh_adjust
  bool converged = false;
  int iterations = 0;
  Ties ties = Ties::efron;
  std::string weight_template = "unit";
  double loglik = 0.0;
  size_t n_subjects = 0;
  size_t n_events = 0;
};

struct CoxOptions {
  Ties ties = Ties::efron;
  int max_iter = 10000;
  double tol = 1e-9;        // convergence on max |delta beta|
  double beta_bound = 20.0; // monotone-likelihood guard
  double weight_cap = 1e6;  // pre-normalization cap when G(t-) hits 0
};

HazardFit cox_fit(const SurvivalData& data, const CoxOptions& opt = {});

// weight_template "unit" reproduces cox_fit; "ahr" uses S(t-)/G(t-) weights
// (reverse Kaplan-Meier for G), mean-normalized, with a robust sandwich
// variance.
HazardFit weighted_cox_fit(const SurvivalData& data, const std::string& weight_template,
                           const CoxOptions& opt = {});

struct PhTestResult {
  std::vector<double> covariate_p;
  double global_p = 1.0;
  std::vector<double> covariate_chi2;
  double global_chi2 = 0.0;
};

// scaled Schoenfeld residuals against a Kaplan-Meier time transform
PhTestResult ph_test(const HazardFit& fit, const SurvivalData& data);

struct ScreeningReport {
  std::vector<std::pair<std::string, std::string>> dropped;  // (column, reason)
  std::vector<std::string> kept;
};

struct ScreenedData {
  SurvivalData data;
  ScreeningReport report;
};

ScreenedData screen_covariates(const SurvivalData& data, double collinearity_threshold = 0.7,
                               int min_event_occurrences = 5);

std::vector<double> bh_adjust(const std::vector<double>& pvalues);

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};
KsResult ks_two_sample(const std::vector<double>& a, const std::vector<double>& b);

struct Chi2Result {
  double statistic = 0.0;
  int df = 0;
  double p_value = 1.0;
};
Chi2Result chi2_independence(const std::vector<std::vector<int64_t>>& table);

struct RiskFactorRow {
  std::string subpopulation;
  std::string covariate;
  double ahr = 0.0, ci_lo = 0.0, ci_hi = 0.0;
  double p_raw = 1.0, p_adj = 1.0;
  size_t n = 0;
};

struct RiskFactorDiagnostic {
  std::string subpopulation;
  std::string status;  // fitted, skipped_small, non_converged, error
  size_t n = 0;
  size_t n_events = 0;
  double ph_global_p = std::nan("");
  std::vector<std::pair<std::string, std::string>> dropped;
  std::string detail;
};

struct RiskFactorReport {
  std::vector<RiskFactorRow> rows;
  std::vector<RiskFactorDiagnostic> diagnostics;
};

struct RiskFactorOptions {
  double subpop_prevalence = 0.05;  // initial states and initial transitions
  size_t min_subpop = 50;
  double missing_threshold = 0.5;
  int knn_k = 5;
  double collinearity_threshold = 0.7;
  std::string weight_template = "ahr";
  Ties ties = Ties::efron;
  CompetingMode competing = CompetingMode::cause_specific;
  double softimpute_lambda = -1.0;
};

// subpopulations are prevalent initial states and prevalent first
// state-to-state transitions; each gets impute -> screen -> weighted fit ->
// BH within the model.
RiskFactorReport risk_factor_analysis(const std::vector<CohortPatient>& cohort,
                                      const StateSequences& sequences,
                                      const std::vector<std::string>& panel_vars,
                                      const RiskFactorOptions& opt = {});

// covariate table assembly shared by the analysis and the report stage
struct CovariateMatrix {
  std::vector<std::string> names;
  std::vector<double> x;          // n x p
  std::vector<uint8_t> present;   // missingness mask
  std::vector<uint8_t> is_binary; // per column
};
CovariateMatrix build_covariate_matrix(const std::vector<CohortPatient>& cohort,
                                       const std::vector<std::string>& panel_vars,
                                       int knn_k);

void write_risk_factors_csv(const std::string& path, const RiskFactorReport& report);
void write_diagnostics_csv(const std::string& path, const RiskFactorReport& report);

}  // namespace trajekt
