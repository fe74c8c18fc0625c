#include "trajekt/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "trajekt/csv.hpp"
#include "trajekt/parallel.hpp"
#include "trajekt/rng.hpp"
#include "json.hpp"

namespace trajekt {

CreatinineSeries creatinine_series(const EventLog& log, const ConceptSets& sets,
                                   PersonId person, const ObservationWindow& window) {
  std::set<ConceptId> cr;
  for (const auto& [cid, var] : sets.severity_panel)
    if (var == "Cr") cr.insert(cid);

  std::map<Date, std::pair<double, int>> by_date;
  if (auto it = log.measurements_of.find(person); it != log.measurements_of.end()) {
    for (size_t idx : it->second) {
      const Measurement& m = log.measurements[idx];
      if (!cr.count(m.concept_id)) continue;
      Date d = date_of(m.datetime);
      if (d < window.t_start || d > window.t_end) continue;
      auto& [sum, n] = by_date[d];
      sum += m.value;
      n += 1;
    }
  }
  const Person& p = log.person(person);
  CreatinineSeries out;
  out.reserve(by_date.size());
  for (const auto& [d, sn] : by_date)
    out.push_back({d, sn.first / sn.second, age_at(p.birth_date, d)});
  return out;
}

size_t HashedCodeEmbedder::bucket(ConceptId concept_id, int dim) {
  // fixed hash seed keeps bucket assignment identical across runs
  uint64_t st = 0x72616A656B74ULL ^ static_cast<uint64_t>(concept_id);
  return static_cast<size_t>(splitmix64(st) % static_cast<uint64_t>(dim));
}

void HashedCodeEmbedder::raw_counts(const FeatureInputs& in, std::vector<double>& out) const {
  out.assign(dim_, 0.0);
  if (!in.code_counts) return;
  for (const auto& [cid, n] : *in.code_counts)
    out[bucket(cid, dim_)] += static_cast<double>(n);
}

void HashedCodeEmbedder::embed(const FeatureInputs& in, std::vector<double>& out) const {
  raw_counts(in, out);
  double norm = 0.0;
  for (double v : out) norm += v * v;
  if (norm > 0.0) {
    norm = std::sqrt(norm);
    for (double& v : out) v /= norm;
  }
}

void SeriesStatsEmbedder::embed(const FeatureInputs& in, std::vector<double>& out) const {
  out.assign(kDim, 0.0);
  const auto& s = in.series;
  double last = in.baseline_cr, mn = in.baseline_cr, mx = in.baseline_cr,
         mean = in.baseline_cr, slope = 0.0;
  double days_since_last = static_cast<double>(in.delta_t) + 1.0;
  if (!s.empty()) {
    last = s.back().value;
    mn = mx = s[0].value;
    double sum = 0.0;
    for (const auto& pt : s) {
      mn = std::min(mn, pt.value);
      mx = std::max(mx, pt.value);
      sum += pt.value;
    }
    mean = sum / static_cast<double>(s.size());
    days_since_last = static_cast<double>(in.delta_t - (s.back().date - in.t_start));
    if (s.size() >= 2) {
      double tx = 0.0;
      for (const auto& pt : s) tx += static_cast<double>(pt.date - in.t_start);
      tx /= static_cast<double>(s.size());
      double num = 0.0, den = 0.0;
      for (const auto& pt : s) {
        double dt = static_cast<double>(pt.date - in.t_start) - tx;
        num += dt * (pt.value - mean);
        den += dt * dt;
      }
      if (den > 0.0) slope = num / den;
    }
  }
  out[0] = last;
  out[1] = mn;
  out[2] = mx;
  out[3] = mean;
  out[4] = slope;
  out[5] = static_cast<double>(s.size());
  out[6] = days_since_last;
  out[7] = in.baseline_cr > 0.0 ? last / in.baseline_cr : 0.0;
  out[8] = in.age_at_day;
  out[9] = static_cast<double>(in.delta_t);
}

void ExternalEmbedder::embed(const FeatureInputs& in, std::vector<double>& out) const {
  auto it = table_.find({in.person_id, in.delta_t});
  if (it == table_.end())
    throw data_error("external embedding missing for person " +
                     std::to_string(in.person_id) + " day " + std::to_string(in.delta_t));
  out = it->second;
}

bool ExternalEmbedder::has(PersonId person, int delta_t) const {
  return table_.count({person, delta_t}) > 0;
}

void ExternalEmbedder::insert(PersonId person, int delta_t, std::vector<double> v) {
  auto [it, fresh] = table_.emplace(std::make_pair(person, delta_t), std::move(v));
  if (!fresh)
    throw data_error("duplicate external embedding for person " + std::to_string(person) +
                     " day " + std::to_string(delta_t));
}

std::vector<int> recorded_days(const EventLog& log, PersonId person,
                               const ObservationWindow& window) {
  std::set<int> days;
  if (auto it = log.events_of.find(person); it != log.events_of.end()) {
    for (size_t idx : it->second) {
      Date d = log.events[idx].date;
      if (d >= window.t_start && d <= window.t_end) days.insert(d - window.t_start);
    }
  }
  if (auto it = log.measurements_of.find(person); it != log.measurements_of.end()) {
    for (size_t idx : it->second) {
      Date d = date_of(log.measurements[idx].datetime);
      if (d >= window.t_start && d <= window.t_end) days.insert(d - window.t_start);
    }
  }
  return {days.begin(), days.end()};
}

PatientFrame featurize_patient(const EventLog& log, const ConceptSets& sets,
                               const CohortPatient& patient, const Embedder& code_emb,
                               const Embedder& series_emb) {
  const PersonId pid = patient.person_id;
  const ObservationWindow& w = patient.window;
  const Person& person = log.person(pid);

  std::vector<int> days = recorded_days(log, pid, w);
  CreatinineSeries series = creatinine_series(log, sets, pid, w);

  // coded events sorted by day offset for incremental prefix windows
  std::vector<std::pair<int, ConceptId>> coded;
  if (auto it = log.events_of.find(pid); it != log.events_of.end()) {
    for (size_t idx : it->second) {
      const Event& e = log.events[idx];
      if (e.date >= w.t_start && e.date <= w.t_end)
        coded.emplace_back(e.date - w.t_start, e.concept_id);
    }
  }
  std::sort(coded.begin(), coded.end());

  PatientFrame out;
  out.person_id = pid;
  out.entries.reserve(days.size());

  std::map<ConceptId, int64_t> counts;
  size_t code_ptr = 0, series_ptr = 0;
  std::vector<double> e1, e2;
  for (int dt : days) {
    while (code_ptr < coded.size() && coded[code_ptr].first <= dt)
      counts[coded[code_ptr++].second]++;
    while (series_ptr < series.size() && series[series_ptr].date - w.t_start <= dt)
      ++series_ptr;

    FeatureInputs in;
    in.person_id = pid;
    in.delta_t = dt;
    in.t_start = w.t_start;
    in.baseline_cr = patient.baseline.value;
    in.age_at_day = age_at(person.birth_date, w.t_start + dt);
    in.code_counts = &counts;
    in.series = std::span<const CrPoint>(series.data(), series_ptr);

    code_emb.embed(in, e1);
    series_emb.embed(in, e2);
    if (static_cast<int>(e1.size()) != code_emb.dimension() ||
        static_cast<int>(e2.size()) != series_emb.dimension())
      throw data_error("embedder produced a vector of the wrong length");

    FrameEntry fe;
    fe.delta_t = dt;
    fe.vec.reserve(e1.size() + e2.size());
    fe.vec.insert(fe.vec.end(), e1.begin(), e1.end());
    fe.vec.insert(fe.vec.end(), e2.begin(), e2.end());
    out.entries.push_back(std::move(fe));
  }
  return out;
}

TrajectoryFrame build_frames(const EventLog& log, const ConceptSets& sets,
                             const std::vector<CohortPatient>& cohort,
                             const FrameOptions& opt, const Embedder* external_code,
                             const Embedder* external_series) {
  HashedCodeEmbedder builtin_code(opt.d1);
  SeriesStatsEmbedder builtin_series;

  const Embedder* code_emb = external_code ? external_code : &builtin_code;
  const Embedder* series_emb = external_series ? external_series : &builtin_series;
  if (external_code && external_code->dimension() != opt.d1)
    throw config_error("external code embedding dimension " +
                       std::to_string(external_code->dimension()) + " does not match d1=" +
                       std::to_string(opt.d1));
  if (external_series && external_series->dimension() != opt.d2)
    throw config_error("external series embedding dimension " +
                       std::to_string(external_series->dimension()) + " does not match d2=" +
                       std::to_string(opt.d2));
  if (!external_series && opt.d2 != SeriesStatsEmbedder::kDim)
    throw config_error("builtin series featurizer has dimension " +
                       std::to_string(SeriesStatsEmbedder::kDim));

  TrajectoryFrame frame;
  frame.d1 = opt.d1;
  frame.d2 = opt.d2;
  frame.code_embedder_id = code_emb->id();
  frame.series_embedder_id = series_emb->id();
  frame.seed = opt.seed;

  std::vector<const CohortPatient*> ordered;
  ordered.reserve(cohort.size());
  for (const auto& p : cohort) ordered.push_back(&p);
  std::sort(ordered.begin(), ordered.end(),
            [](const CohortPatient* a, const CohortPatient* b) {
              return a->person_id < b->person_id;
            });

  frame.patients.resize(ordered.size());
  parallel_chunks(
      ordered.size(), 16,
      [&](size_t, size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i)
          frame.patients[i] = featurize_patient(log, sets, *ordered[i], *code_emb, *series_emb);
      },
      opt.jobs);

  // cohort-level z-scaling of the builtin series block, computed once
  if (series_emb->wants_cohort_scaling()) {
    const int d1 = frame.d1, d2 = frame.d2;
    std::vector<double> mean(d2, 0.0), m2(d2, 0.0);
    size_t n = 0;
    for (const auto& p : frame.patients)
      for (const auto& e : p.entries) {
        ++n;
        for (int j = 0; j < d2; ++j) {
          double x = e.vec[d1 + j];
          double delta = x - mean[j];
          mean[j] += delta / static_cast<double>(n);
          m2[j] += delta * (x - mean[j]);
        }
      }
    std::vector<double> sd(d2, 1.0);
    if (n > 1)
      for (int j = 0; j < d2; ++j) {
        double v = std::sqrt(m2[j] / static_cast<double>(n - 1));
        sd[j] = v > 0.0 ? v : 1.0;
      }
    for (auto& p : frame.patients)
      for (auto& e : p.entries)
        for (int j = 0; j < d2; ++j) e.vec[d1 + j] = (e.vec[d1 + j] - mean[j]) / sd[j];
  }
  return frame;
}

std::unique_ptr<ExternalEmbedder> load_external_embeddings(const std::string& path,
                                                           int expected_dim) {
  CsvTable t = read_csv(path);
  int c_pid = t.require_col("person_id", path);
  int c_dt = t.require_col("delta_t", path);
  int dim = static_cast<int>(t.header.size()) - 2;
  if (dim != expected_dim)
    throw data_error(path + ": embedding dimension " + std::to_string(dim) +
                     " does not match expected " + std::to_string(expected_dim));
  auto emb = std::make_unique<ExternalEmbedder>(dim, path);
  for (size_t r = 0; r < t.rows.size(); ++r) {
    std::string ctx = path + " row " + std::to_string(r + 2);
    const auto& row = t.rows[r];
    std::vector<double> v(dim);
    int k = 0;
    for (size_t c = 0; c < t.header.size(); ++c) {
      if (static_cast<int>(c) == c_pid || static_cast<int>(c) == c_dt) continue;
      v[k++] = parse_double(row[c], ctx);
    }
    emb->insert(parse_int(row[c_pid], ctx), static_cast<int>(parse_int(row[c_dt], ctx)),
                std::move(v));
  }
  return emb;
}

CoverageReport embedding_coverage(const ExternalEmbedder& emb, const EventLog& log,
                                  const ConceptSets& sets,
                                  const std::vector<CohortPatient>& cohort) {
  (void)sets;
  CoverageReport rep;
  for (const auto& p : cohort) {
    for (int dt : recorded_days(log, p.person_id, p.window)) {
      if (emb.has(p.person_id, dt))
        ++rep.covered;
      else
        rep.missing.emplace_back(p.person_id, dt);
    }
  }
  return rep;
}

void write_frame_csv(const std::string& path, const TrajectoryFrame& frame) {
  std::vector<std::string> header = {"person_id", "delta_t"};
  for (int j = 0; j < frame.d1 + frame.d2; ++j) header.push_back("v" + std::to_string(j));
  CsvWriter w(path, header);
  for (const auto& p : frame.patients)
    for (const auto& e : p.entries) {
      std::vector<std::string> row = {std::to_string(p.person_id),
                                      std::to_string(e.delta_t)};
      for (double v : e.vec) row.push_back(fmt_double(v));
      w.write_row(row);
    }
}

void write_frame_manifest(const std::string& path, const TrajectoryFrame& frame) {
  nlohmann::json j;
  j["d1"] = frame.d1;
  j["d2"] = frame.d2;
  j["code_embedder"] = frame.code_embedder_id;
  j["series_embedder"] = frame.series_embedder_id;
  j["seed"] = frame.seed;
  std::ofstream out(path);
  if (!out) throw data_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

TrajectoryFrame read_frame_csv(const std::string& path, const std::string& manifest_path) {
  TrajectoryFrame frame;
  {
    std::ifstream in(manifest_path);
    if (!in) throw data_error("cannot open " + manifest_path);
    nlohmann::json j;
    in >> j;
    frame.d1 = j.at("d1").get<int>();
    frame.d2 = j.at("d2").get<int>();
    frame.code_embedder_id = j.at("code_embedder").get<std::string>();
    frame.series_embedder_id = j.at("series_embedder").get<std::string>();
    frame.seed = j.at("seed").get<uint64_t>();
  }
  CsvTable t = read_csv(path);
  int c_pid = t.require_col("person_id", path);
  int c_dt = t.require_col("delta_t", path);
  int dim = static_cast<int>(t.header.size()) - 2;
  if (dim != frame.d1 + frame.d2)
    throw data_error(path + ": vector length does not match manifest dims");
  PatientFrame* cur = nullptr;
  for (size_t r = 0; r < t.rows.size(); ++r) {
    std::string ctx = path + " row " + std::to_string(r + 2);
    const auto& row = t.rows[r];
    PersonId pid = parse_int(row[c_pid], ctx);
    if (!cur || cur->person_id != pid) {
      frame.patients.push_back({pid, {}});
      cur = &frame.patients.back();
    }
    FrameEntry e;
    e.delta_t = static_cast<int>(parse_int(row[c_dt], ctx));
    e.vec.resize(dim);
    int k = 0;
    for (size_t c = 0; c < t.header.size(); ++c) {
      if (static_cast<int>(c) == c_pid || static_cast<int>(c) == c_dt) continue;
      e.vec[k++] = parse_double(row[c], ctx);
    }
    cur->entries.push_back(std::move(e));
  }
  return frame;
}

}  // namespace trajekt
