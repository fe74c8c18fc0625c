#pragma once

#include <string>
#include <vector>

#include "trajekt/ingest.hpp"
#include "trajekt/msm.hpp"

namespace trajekt {

struct SynthCovariate {
  std::string name;
  ConceptId concept_id = 0;
  double prevalence = 0.5;
  double log_hr_ckd = 0.0;
  std::string kind = "comorbidity";  // comorbidity (emitted pre-visit) or medication (within 1y)
};

struct SynthPanelVar {
  std::string name;
  ConceptId concept_id = 0;
  double mean = 0.0;
  double sd = 1.0;
  double missing_prob = 0.0;
};

struct SynthConfig {
  int n_patients = 100;
  int n_states = 3;                       // transient states
  std::vector<std::vector<double>> q;     // (K+2)x(K+2) intensities, 1/day
  std::vector<double> initial_distribution;  // over transient states
  std::vector<std::vector<ConceptId>> state_code_pools;
  double code_rate = 2.0;                 // Poisson mean per pool concept per recorded day
  std::vector<double> cr_mean, cr_sd, cr_drift;  // per transient state
  double record_prob = 1.0;               // chance a follow-up day carries records
  std::vector<SynthCovariate> covariates;
  std::vector<SynthPanelVar> panel;
  double sepsis_prob = 0.0;
  double sex_unknown_prob = 0.0;
  double censor_rate = 0.0;               // per-day exponential censoring
  double max_follow_days = 3650.0;
  int visit_los_days = 2;
  double baseline_cr = 0.8;               // pre-visit baseline level
  double admission_rise = 1.6;            // admission creatinine = baseline * rise
  uint64_t seed = 1;

  int ckd_state() const { return n_states; }
  int death_state() const { return n_states + 1; }
  void validate() const;  // throws config_error
};

SynthConfig load_synth_config(const std::string& path);

struct PatientTruth {
  PersonId person_id = 0;
  std::vector<std::pair<double, int>> path;  // (entry time in days, transient state)
  double end_time = 0.0;                     // absorption or censoring time
  int terminal_state = -1;                   // ckd/death index, -1 when censored
  std::vector<double> covariate_x;
};

struct GroundTruth {
  SynthConfig config;
  std::vector<PatientTruth> patients;
  std::vector<double> planted_log_hr() const {
    std::vector<double> b;
    for (const auto& c : config.covariates) b.push_back(c.log_hr_ckd);
    return b;
  }
};

// latent continuous-time Markov paths only; no event-log materialization
GroundTruth simulate_paths(const SynthConfig& config);

// full synthetic event log: visits, planted admission creatinine, per-state
// code and creatinine emissions, terminal records
struct SynthResult {
  EventLog log;
  GroundTruth truth;
};
SynthResult generate_cohort(const SynthConfig& config);

// counting-process view of the latent paths, for estimator oracles
TransitionEventSet truth_transition_eventset(const GroundTruth& truth);

// observed (time, cause, covariates) per patient from the latent paths
struct TruthSurvival {
  std::vector<std::string> covariate_names;
  std::vector<double> time;
  std::vector<int> cause;  // 0 censored, 1 ckd, 2 death
  std::vector<double> x;   // n x p
};
TruthSurvival truth_survival(const GroundTruth& truth);

// exp(Q*t) by scaling and squaring with a Taylor kernel
std::vector<std::vector<double>> matrix_exponential(const std::vector<std::vector<double>>& q,
                                                    double t);

// writes the ingest CSV schemas plus concepts.json / ontology.csv / truth.json
void write_synth_bundle(const SynthResult& result, const std::string& dir);

}  // namespace trajekt
