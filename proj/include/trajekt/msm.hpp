#pragma once

#include <optional>
#include <string>
#include <vector>

#include "trajekt/cluster.hpp"

namespace trajekt {

struct TransitionRecord {
  double time = 0.0;  // days since cohort entry
  int from = 0;
  int to = 0;
};

struct PatientTransitions {
  PersonId person_id = 0;
  int entry_state = 0;
  std::vector<TransitionRecord> records;  // strictly increasing times
  std::optional<double> censor_time;      // set iff the patient is censored
};

// K transient states plus the two absorbing ones, CKD = K and death = K+1.
struct TransitionEventSet {
  int n_transient = 0;
  std::vector<PatientTransitions> patients;

  int ckd_state() const { return n_transient; }
  int death_state() const { return n_transient + 1; }
  int n_states() const { return n_transient + 2; }
  size_t total_transitions() const {
    size_t n = 0;
    for (const auto& p : patients) n += p.records.size();
    return n;
  }
};

// Occupancy is last-observation-carried-forward between recorded days; a
// transition is stamped at the first day observed in the new state. A state
// entered only at the terminal instant is dropped so per-patient times stay
// strictly increasing.
TransitionEventSet extract_transitions(const StateSequences& sequences, int n_transient);

struct TransitionMatrixSeries {
  int n_states = 0;
  std::vector<double> times;              // event times in (s, t_max], ascending
  std::vector<std::vector<double>> mats;  // running product P(s, times[i]]
  size_t zero_risk_rows = 0;              // diagnostics: rows with events but empty risk set
  std::vector<size_t> consumed_transitions;  // per (from,to) matrix, row-major

  // step-function lookup of P(s, t]
  const std::vector<double>& at(double t) const;
  double prob(double t, int from, int to) const { return at(t)[from * n_states + to]; }
};

TransitionMatrixSeries aalen_johansen(const TransitionEventSet& eventset, double s,
                                      double t_max);

struct CiBands {
  int n_states = 0;
  std::vector<double> horizons;  // days
  // indexed [h * n_states^2 + from * n_states + to]
  std::vector<double> point, lo, hi;
  std::vector<size_t> replicates_used;  // per cell
  size_t degenerate_replicates = 0;

  size_t idx(size_t h, int from, int to) const {
    return h * n_states * n_states + static_cast<size_t>(from) * n_states + to;
  }
};

// Patient-level nonparametric bootstrap, percentile 2.5/97.5 bands.
CiBands bootstrap_transition_ci(const TransitionEventSet& eventset, int B, uint64_t seed,
                                const std::vector<double>& horizons_days, int jobs = 1);

struct TerminalRow {
  int state;
  double horizon_days;
  double p_ckd;
  double p_death;
  bool carried_forward;  // horizon beyond the last event time
};

std::vector<TerminalRow> terminal_probability_table(const TransitionMatrixSeries& series,
                                                    const std::vector<double>& horizons_days);

void write_transitions_csv(const std::string& path, const TransitionEventSet& es);
void write_aj_series_csv(const std::string& path, const TransitionMatrixSeries& series,
                         const std::vector<double>& grid_days);
void write_terminal_table_csv(const std::string& path, const std::vector<TerminalRow>& rows);
void write_ci_csv(const std::string& path, const CiBands& bands);

inline double years_to_days(double y) { return y * 365.25; }

}  // namespace trajekt
