#include "trajekt/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "trajekt/csv.hpp"
#include "trajekt/parallel.hpp"
#include "trajekt/rng.hpp"
#include "json.hpp"

namespace trajekt {

namespace {
constexpr ConceptId kAkiConcept = 1000;
constexpr ConceptId kCkdConcept = 2000;
constexpr ConceptId kSepsisConcept = 3000;
constexpr ConceptId kCreatinineConcept = 5001;
constexpr ConceptId kPoolRootBase = 700000;  // pool parent per state
const Date kVisitStart = *parse_date("2015-06-01");
}  // namespace

void SynthConfig::validate() const {
  const int m = n_states + 2;
  if (n_patients < 1) throw config_error("synth: n_patients must be >= 1");
  if (n_states < 1) throw config_error("synth: n_states must be >= 1");
  if (static_cast<int>(q.size()) != m)
    throw config_error("synth: q must have " + std::to_string(m) + " rows");
  for (int i = 0; i < m; ++i) {
    if (static_cast<int>(q[i].size()) != m) throw config_error("synth: q must be square");
    double row = 0.0;
    for (int j = 0; j < m; ++j) {
      if (i != j && q[i][j] < 0.0)
        throw config_error("synth: off-diagonal intensities must be non-negative");
      row += q[i][j];
    }
    if (std::fabs(row) > 1e-9) throw config_error("synth: q rows must sum to zero");
    if (i >= n_states)
      for (int j = 0; j < m; ++j)
        if (q[i][j] != 0.0) throw config_error("synth: terminal rows must be zero");
  }
  if (static_cast<int>(initial_distribution.size()) != n_states)
    throw config_error("synth: initial_distribution must cover the transient states");
  double total = 0.0;
  for (double p : initial_distribution) {
    if (p < 0.0) throw config_error("synth: initial_distribution must be non-negative");
    total += p;
  }
  if (std::fabs(total - 1.0) > 1e-9)
    throw config_error("synth: initial_distribution must sum to 1");
  auto check_len = [&](size_t len, const char* what) {
    if (static_cast<int>(len) != n_states)
      throw config_error(std::string("synth: ") + what + " must have one entry per state");
  };
  check_len(state_code_pools.size(), "state_code_pools");
  check_len(cr_mean.size(), "cr_mean");
  check_len(cr_sd.size(), "cr_sd");
  check_len(cr_drift.size(), "cr_drift");
  if (baseline_cr >= 1.2)
    throw config_error("synth: baseline_cr must stay below the 1.2 exclusion threshold");
  if (admission_rise < 1.5)
    throw config_error("synth: admission_rise must be >= 1.5 to satisfy eligibility");
}

SynthConfig load_synth_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw config_error(path + ": " + e.what());
  }
  SynthConfig c;
  c.n_patients = j.at("n_patients").get<int>();
  c.n_states = j.at("n_states").get<int>();
  c.q = j.at("q").get<std::vector<std::vector<double>>>();
  c.initial_distribution = j.at("initial_distribution").get<std::vector<double>>();
  c.state_code_pools = j.at("state_code_pools").get<std::vector<std::vector<ConceptId>>>();
  c.code_rate = j.value("code_rate", c.code_rate);
  c.cr_mean = j.at("cr_mean").get<std::vector<double>>();
  c.cr_sd = j.at("cr_sd").get<std::vector<double>>();
  c.cr_drift = j.value("cr_drift", std::vector<double>(c.n_states, 0.0));
  c.record_prob = j.value("record_prob", c.record_prob);
  if (j.contains("covariates"))
    for (const auto& cv : j["covariates"]) {
      SynthCovariate sc;
      sc.name = cv.at("name").get<std::string>();
      sc.concept_id = cv.at("concept").get<ConceptId>();
      sc.prevalence = cv.value("prevalence", 0.5);
      sc.log_hr_ckd = cv.value("log_hr_ckd", 0.0);
      sc.kind = cv.value("kind", std::string("comorbidity"));
      c.covariates.push_back(std::move(sc));
    }
  if (j.contains("panel"))
    for (const auto& pv : j["panel"]) {
      SynthPanelVar v;
      v.name = pv.at("name").get<std::string>();
      v.concept_id = pv.at("concept").get<ConceptId>();
      v.mean = pv.value("mean", 0.0);
      v.sd = pv.value("sd", 1.0);
      v.missing_prob = pv.value("missing_prob", 0.0);
      c.panel.push_back(std::move(v));
    }
  c.sepsis_prob = j.value("sepsis_prob", c.sepsis_prob);
  c.sex_unknown_prob = j.value("sex_unknown_prob", c.sex_unknown_prob);
  c.censor_rate = j.value("censor_rate", c.censor_rate);
  c.max_follow_days = j.value("max_follow_days", c.max_follow_days);
  c.visit_los_days = j.value("visit_los_days", c.visit_los_days);
  c.baseline_cr = j.value("baseline_cr", c.baseline_cr);
  c.admission_rise = j.value("admission_rise", c.admission_rise);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

static PatientTruth simulate_one(const SynthConfig& cfg, PersonId pid, Rng& rng) {
  PatientTruth pt;
  pt.person_id = pid;
  pt.covariate_x.resize(cfg.covariates.size());
  for (size_t c = 0; c < cfg.covariates.size(); ++c)
    pt.covariate_x[c] = rng.uniform() < cfg.covariates[c].prevalence ? 1.0 : 0.0;
  double ckd_mult = 1.0;
  for (size_t c = 0; c < cfg.covariates.size(); ++c)
    ckd_mult *= std::exp(cfg.covariates[c].log_hr_ckd * pt.covariate_x[c]);

  // initial state
  double u = rng.uniform();
  int state = cfg.n_states - 1;
  double acc = 0.0;
  for (int s = 0; s < cfg.n_states; ++s) {
    acc += cfg.initial_distribution[s];
    if (u < acc) {
      state = s;
      break;
    }
  }

  double censor = cfg.max_follow_days;
  if (cfg.censor_rate > 0.0)
    censor = std::min(censor, rng.exponential(cfg.censor_rate));

  double t = 0.0;
  pt.path.emplace_back(0.0, state);
  const int m = cfg.n_states + 2;
  for (;;) {
    std::vector<double> rates(m, 0.0);
    double total = 0.0;
    for (int j = 0; j < m; ++j) {
      if (j == state) continue;
      double r = cfg.q[state][j];
      if (j == cfg.ckd_state()) r *= ckd_mult;
      rates[j] = r;
      total += r;
    }
    if (total <= 0.0) {
      pt.end_time = censor;
      pt.terminal_state = -1;
      return pt;
    }
    double hold = rng.exponential(total);
    // the jump target draw stays in the stream even when censoring wins,
    // keeping paths reproducible under censor changes
    double pick = rng.uniform() * total;
    if (t + hold >= censor) {
      pt.end_time = censor;
      pt.terminal_state = -1;
      return pt;
    }
    t += hold;
    int next = m - 1;
    double run = 0.0;
    for (int j = 0; j < m; ++j) {
      run += rates[j];
      if (pick < run) {
        next = j;
        break;
      }
    }
    if (next >= cfg.n_states) {
      pt.end_time = t;
      pt.terminal_state = next;
      return pt;
    }
    state = next;
    pt.path.emplace_back(t, state);
  }
}

GroundTruth simulate_paths(const SynthConfig& config) {
  config.validate();
  GroundTruth gt;
  gt.config = config;
  gt.patients.resize(config.n_patients);
  parallel_chunks(
      static_cast<size_t>(config.n_patients), 64,
      [&](size_t, size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
          Rng rng(derive_seed(config.seed, "patient", i));
          gt.patients[i] = simulate_one(config, static_cast<PersonId>(i + 1), rng);
        }
      },
      0);
  return gt;
}

static int state_at(const PatientTruth& pt, double t) {
  int s = pt.path.front().second;
  for (const auto& [entry, st] : pt.path) {
    if (entry > t) break;
    s = st;
  }
  return s;
}

SynthResult generate_cohort(const SynthConfig& config) {
  SynthResult out;
  out.truth = simulate_paths(config);
  EventLog& log = out.log;

  const int los = config.visit_los_days;
  const int min_event_day = los + 1;  // keeps terminal records after the visit

  struct Emission {
    std::vector<Event> events;
    std::vector<Measurement> measurements;
    Person person;
    Visit visit;
  };
  std::vector<Emission> per_patient(config.n_patients);

  parallel_chunks(
      static_cast<size_t>(config.n_patients), 64,
      [&](size_t, size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
          PatientTruth& pt = out.truth.patients[i];
          Rng rng(derive_seed(config.seed, "emit", i));
          Emission& em = per_patient[i];
          PersonId pid = pt.person_id;

          double age = 25.0 + rng.uniform() * 60.0;
          Person p;
          p.person_id = pid;
          p.birth_date = kVisitStart - static_cast<Date>(age * 365.25);
          double sex_u = rng.uniform();
          p.sex = sex_u < config.sex_unknown_prob ? Sex::unknown
                  : rng.uniform() < 0.5           ? Sex::male
                                                  : Sex::female;
          static const char* kRaces[] = {"White", "Black", "Asian", "Other", "unknown"};
          static const char* kEth[] = {"Hispanic", "NotHispanic", "unknown"};
          p.race = kRaces[rng.uniform_int(5)];
          p.ethnicity = kEth[rng.uniform_int(3)];

          Visit v{pid, pid, kVisitStart, kVisitStart + los};
          em.visit = v;

          double baseline = config.baseline_cr * (0.85 + 0.3 * rng.uniform());
          // pre-visit baseline creatinine (median rule window)
          for (int off : {-100, -50})
            em.measurements.push_back({pid, start_of_day(kVisitStart + off) + 9 * 60,
                                       kCreatinineConcept,
                                       baseline + 0.01 * rng.normal(), "mg/dL"});
          // two admission values with the planted rise inside 48h
          for (int hour : {6, 30})
            em.measurements.push_back({pid, start_of_day(kVisitStart) + hour * 60,
                                       kCreatinineConcept,
                                       baseline * config.admission_rise + 0.005 * rng.normal(),
                                       "mg/dL"});
          em.events.push_back({pid, kVisitStart, Domain::condition, kAkiConcept});

          for (size_t c = 0; c < config.covariates.size(); ++c) {
            if (pt.covariate_x[c] != 1.0) continue;
            const auto& cv = config.covariates[c];
            int off = cv.kind == "medication" ? -100 : -400;
            Domain dom = cv.kind == "medication" ? Domain::drug : Domain::condition;
            em.events.push_back({pid, kVisitStart + off, dom, cv.concept_id});
          }
          if (config.sepsis_prob > 0.0 && rng.uniform() < config.sepsis_prob)
            em.events.push_back({pid, kVisitStart, Domain::condition, kSepsisConcept});
          for (const auto& pv : config.panel) {
            if (rng.uniform() < pv.missing_prob) continue;
            em.measurements.push_back({pid, start_of_day(kVisitStart) + 8 * 60, pv.concept_id,
                                       pv.mean + pv.sd * rng.normal(), pv.name == "Cr"
                                                                           ? "mg/dL"
                                                                           : "unit"});
          }

          // clamp terminal/censoring records to land after the visit
          int end_day;
          if (pt.terminal_state >= 0) {
            end_day = std::max(min_event_day, static_cast<int>(std::ceil(pt.end_time)));
          } else {
            end_day = std::max(min_event_day, static_cast<int>(std::floor(pt.end_time)));
          }

          // per-day emissions while the patient occupies a transient state
          for (int d = 1; d <= end_day; ++d) {
            if (static_cast<double>(d) >= pt.end_time && pt.terminal_state >= 0) break;
            if (static_cast<double>(d) > pt.end_time) break;
            bool recorded = rng.uniform() < config.record_prob;
            if (!recorded) continue;
            int s = state_at(pt, static_cast<double>(d));
            for (ConceptId concept : config.state_code_pools[s]) {
              int count = rng.poisson(config.code_rate);
              for (int rpt = 0; rpt < count; ++rpt)
                em.events.push_back({pid, kVisitStart + d, Domain::condition, concept});
            }
            double entered = 0.0;
            for (const auto& [entry, st] : pt.path)
              if (entry <= d) entered = entry;
            double value = config.cr_mean[s] + config.cr_drift[s] * (d - entered) +
                           config.cr_sd[s] * rng.normal();
            em.measurements.push_back({pid, start_of_day(kVisitStart + d) + 12 * 60,
                                       kCreatinineConcept, std::max(0.05, value), "mg/dL"});
          }

          if (pt.terminal_state == config.ckd_state()) {
            em.events.push_back({pid, kVisitStart + end_day, Domain::condition, kCkdConcept});
          } else if (pt.terminal_state == config.death_state()) {
            p.death_date = kVisitStart + end_day;
          }
          em.person = p;
        }
      },
      0);

  for (auto& em : per_patient) {
    log.persons.push_back(em.person);
    log.visits.push_back(em.visit);
    std::stable_sort(em.events.begin(), em.events.end(), [](const Event& a, const Event& b) {
      return a.date < b.date;
    });
    std::stable_sort(em.measurements.begin(), em.measurements.end(),
                     [](const Measurement& a, const Measurement& b) {
                       return a.datetime < b.datetime;
                     });
    log.events.insert(log.events.end(), em.events.begin(), em.events.end());
    log.measurements.insert(log.measurements.end(), em.measurements.begin(),
                            em.measurements.end());
  }
  log.finalize();
  return out;
}

TransitionEventSet truth_transition_eventset(const GroundTruth& truth) {
  TransitionEventSet es;
  es.n_transient = truth.config.n_states;
  for (const auto& pt : truth.patients) {
    PatientTransitions rec;
    rec.person_id = pt.person_id;
    rec.entry_state = pt.path.front().second;
    int prev = rec.entry_state;
    for (size_t i = 1; i < pt.path.size(); ++i) {
      rec.records.push_back({pt.path[i].first, prev, pt.path[i].second});
      prev = pt.path[i].second;
    }
    if (pt.terminal_state >= 0)
      rec.records.push_back({pt.end_time, prev, pt.terminal_state});
    else
      rec.censor_time = pt.end_time;
    es.patients.push_back(std::move(rec));
  }
  return es;
}

TruthSurvival truth_survival(const GroundTruth& truth) {
  TruthSurvival out;
  for (const auto& c : truth.config.covariates) out.covariate_names.push_back(c.name);
  for (const auto& pt : truth.patients) {
    out.time.push_back(pt.end_time);
    int cause = 0;
    if (pt.terminal_state == truth.config.ckd_state()) cause = 1;
    if (pt.terminal_state == truth.config.death_state()) cause = 2;
    out.cause.push_back(cause);
    out.x.insert(out.x.end(), pt.covariate_x.begin(), pt.covariate_x.end());
  }
  return out;
}

std::vector<std::vector<double>> matrix_exponential(const std::vector<std::vector<double>>& q,
                                                    double t) {
  const size_t m = q.size();
  std::vector<double> a(m * m);
  double norm = 0.0;
  for (size_t i = 0; i < m; ++i) {
    double row = 0.0;
    for (size_t j = 0; j < m; ++j) {
      a[i * m + j] = q[i][j] * t;
      row += std::fabs(a[i * m + j]);
    }
    norm = std::max(norm, row);
  }
  int s = 0;
  while (norm > 0.5) {
    norm /= 2.0;
    ++s;
  }
  double scale = std::ldexp(1.0, -s);
  for (auto& v : a) v *= scale;

  auto matmul = [m](const std::vector<double>& x, const std::vector<double>& y) {
    std::vector<double> r(m * m, 0.0);
    for (size_t i = 0; i < m; ++i)
      for (size_t l = 0; l < m; ++l) {
        double xv = x[i * m + l];
        if (xv == 0.0) continue;
        for (size_t j = 0; j < m; ++j) r[i * m + j] += xv * y[l * m + j];
      }
    return r;
  };

  // Taylor on the scaled matrix to below 1e-16 term norm
  std::vector<double> result(m * m, 0.0), term(m * m, 0.0);
  for (size_t i = 0; i < m; ++i) result[i * m + i] = term[i * m + i] = 1.0;
  for (int k = 1; k <= 60; ++k) {
    term = matmul(term, a);
    double inv = 1.0 / static_cast<double>(k);
    double tnorm = 0.0;
    for (auto& v : term) {
      v *= inv;
      tnorm = std::max(tnorm, std::fabs(v));
    }
    for (size_t i = 0; i < m * m; ++i) result[i] += term[i];
    if (tnorm < 1e-16) break;
  }
  for (int i = 0; i < s; ++i) result = matmul(result, result);

  std::vector<std::vector<double>> out(m, std::vector<double>(m));
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < m; ++j) out[i][j] = result[i * m + j];
  return out;
}

void write_synth_bundle(const SynthResult& result, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const SynthConfig& cfg = result.truth.config;

  EventLogPaths paths{dir + "/persons.csv", dir + "/visits.csv", dir + "/events.csv",
                      dir + "/measurements.csv"};
  export_event_log(result.log, paths);

  nlohmann::json concepts;
  concepts["concept_sets"]["aki"] = {kAkiConcept};
  concepts["concept_sets"]["ckd"] = {kCkdConcept};
  concepts["concept_sets"]["sepsis"] = {kSepsisConcept};
  for (const char* flag : {"DM", "HTN", "CAD_MI", "CHF", "PV", "LD", "loop_thiazide",
                           "RAS", "NSAID"})
    concepts["concept_sets"][flag] = nlohmann::json::array();
  for (const auto& cv : cfg.covariates) {
    if (concepts["concept_sets"].contains(cv.name))
      concepts["concept_sets"][cv.name].push_back(cv.concept_id);
    else
      concepts["concept_sets"][cv.name] = {cv.concept_id};
  }
  concepts["severity_panel"][std::to_string(kCreatinineConcept)] = "Cr";
  for (const auto& pv : cfg.panel)
    concepts["severity_panel"][std::to_string(pv.concept_id)] = pv.name;
  concepts["valid_ranges"]["Cr"] = {{"lo", 0.05}, {"hi", 30.0}, {"unit", "mg/dL"}};
  for (const auto& pv : cfg.panel)
    concepts["valid_ranges"][pv.name] = {{"lo", pv.mean - 8.0 * pv.sd},
                                         {"hi", pv.mean + 8.0 * pv.sd},
                                         {"unit", "unit"}};
  for (int s = 0; s < cfg.n_states; ++s)
    concepts["disease_groups"]["system_S" + std::to_string(s)] = {kPoolRootBase + s};
  {
    std::ofstream out(dir + "/concepts.json");
    out << concepts.dump(2) << "\n";
  }
  {
    CsvWriter w(dir + "/ontology.csv", {"child_concept", "parent_concept"});
    for (int s = 0; s < cfg.n_states; ++s)
      for (ConceptId c : cfg.state_code_pools[s])
        w.write_row({std::to_string(c), std::to_string(kPoolRootBase + s)});
  }
  {
    nlohmann::json truth;
    truth["seed"] = cfg.seed;
    truth["n_patients"] = cfg.n_patients;
    truth["n_states"] = cfg.n_states;
    truth["q"] = cfg.q;
    nlohmann::json betas = nlohmann::json::object();
    for (const auto& cv : cfg.covariates) betas[cv.name] = cv.log_hr_ckd;
    truth["log_hr_ckd"] = betas;
    std::ofstream out(dir + "/truth.json");
    out << truth.dump(2) << "\n";
  }
}

}  // namespace trajekt
