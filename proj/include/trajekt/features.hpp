#pragma once

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "trajekt/cohort.hpp"
#include "trajekt/ingest.hpp"

namespace trajekt {

struct CrPoint {
  Date date;
  double value;  // per-date mean, mg/dL
  double age;    // years at that date
};

// per-date creatinine means inside the observation window, ascending
using CreatinineSeries = std::vector<CrPoint>;

CreatinineSeries creatinine_series(const EventLog& log, const ConceptSets& sets,
                                   PersonId person, const ObservationWindow& window);

struct FeatureInputs {
  PersonId person_id = 0;
  int delta_t = 0;
  Date t_start = 0;
  double baseline_cr = 1.0;
  double age_at_day = 0.0;
  // cumulative coded events over [t_start, t_start + delta_t]
  const std::map<ConceptId, int64_t>* code_counts = nullptr;
  // creatinine series restricted to the same interval
  std::span<const CrPoint> series;
};

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual int dimension() const = 0;
  virtual std::string id() const = 0;
  virtual void embed(const FeatureInputs& in, std::vector<double>& out) const = 0;
  // true when the block should be z-scaled with cohort-level statistics
  virtual bool wants_cohort_scaling() const { return false; }
};

// Feature-hashed counts of the cumulative concept multiset, L2-normalized.
// Training-free stand-in for sequence embeddings; the hash seed is fixed so
// bucket assignment is stable across runs and machines.
class HashedCodeEmbedder : public Embedder {
 public:
  explicit HashedCodeEmbedder(int dim) : dim_(dim) {}
  int dimension() const override { return dim_; }
  std::string id() const override { return "hashed_counts_v1"; }
  void embed(const FeatureInputs& in, std::vector<double>& out) const override;
  // pre-normalization counts, exposed for prefix-property checks
  void raw_counts(const FeatureInputs& in, std::vector<double>& out) const;
  static size_t bucket(ConceptId concept_id, int dim);

 private:
  int dim_;
};

// Summary statistics of the creatinine prefix series (10 components),
// z-scaled at cohort level by the frame builder.
class SeriesStatsEmbedder : public Embedder {
 public:
  static constexpr int kDim = 10;
  int dimension() const override { return kDim; }
  std::string id() const override { return "series_stats_v1"; }
  bool wants_cohort_scaling() const override { return true; }
  void embed(const FeatureInputs& in, std::vector<double>& out) const override;
};

// Lookup-backed bridge for externally trained embeddings.
class ExternalEmbedder : public Embedder {
 public:
  ExternalEmbedder(int dim, std::string source)
      : dim_(dim), source_(std::move(source)) {}
  int dimension() const override { return dim_; }
  std::string id() const override { return "external:" + source_; }
  void embed(const FeatureInputs& in, std::vector<double>& out) const override;
  bool has(PersonId person, int delta_t) const;
  void insert(PersonId person, int delta_t, std::vector<double> v);

 private:
  int dim_;
  std::string source_;
  std::map<std::pair<PersonId, int>, std::vector<double>> table_;
};

struct FrameEntry {
  int delta_t;
  std::vector<double> vec;  // length d1 + d2
};

struct PatientFrame {
  PersonId person_id;
  std::vector<FrameEntry> entries;  // delta_t ascending
};

struct TrajectoryFrame {
  int d1 = 0;
  int d2 = 0;
  std::string code_embedder_id;
  std::string series_embedder_id;
  uint64_t seed = 0;
  std::vector<PatientFrame> patients;  // person_id order

  size_t total_vectors() const {
    size_t n = 0;
    for (const auto& p : patients) n += p.entries.size();
    return n;
  }
};

// one entry per recorded day of the patient (days with >=1 clinical record)
PatientFrame featurize_patient(const EventLog& log, const ConceptSets& sets,
                               const CohortPatient& patient, const Embedder& code_emb,
                               const Embedder& series_emb);

struct FrameOptions {
  int d1 = 64;
  int d2 = SeriesStatsEmbedder::kDim;
  uint64_t seed = 0;
  int jobs = 1;
  bool allow_fallback = false;  // builtin fills (person, day) gaps of external files
};

TrajectoryFrame build_frames(const EventLog& log, const ConceptSets& sets,
                             const std::vector<CohortPatient>& cohort,
                             const FrameOptions& opt,
                             const Embedder* external_code = nullptr,
                             const Embedder* external_series = nullptr);

// external vectors where present, builtin elsewhere (--allow-fallback)
class FallbackEmbedder : public Embedder {
 public:
  FallbackEmbedder(const ExternalEmbedder* primary, const Embedder* backup)
      : primary_(primary), backup_(backup) {}
  int dimension() const override { return primary_->dimension(); }
  std::string id() const override {
    return primary_->id() + "+fallback:" + backup_->id();
  }
  void embed(const FeatureInputs& in, std::vector<double>& out) const override {
    if (primary_->has(in.person_id, in.delta_t))
      primary_->embed(in, out);
    else
      backup_->embed(in, out);
  }

 private:
  const ExternalEmbedder* primary_;
  const Embedder* backup_;
};

struct CoverageReport {
  size_t covered = 0;
  std::vector<std::pair<PersonId, int>> missing;
};

// CSV rows person_id,delta_t,v0..v{dim-1}
std::unique_ptr<ExternalEmbedder> load_external_embeddings(const std::string& path,
                                                           int expected_dim);
CoverageReport embedding_coverage(const ExternalEmbedder& emb, const EventLog& log,
                                  const ConceptSets& sets,
                                  const std::vector<CohortPatient>& cohort);

void write_frame_csv(const std::string& path, const TrajectoryFrame& frame);
void write_frame_manifest(const std::string& path, const TrajectoryFrame& frame);
TrajectoryFrame read_frame_csv(const std::string& path, const std::string& manifest_path);

// recorded days (delta_t values) for one patient, ascending
std::vector<int> recorded_days(const EventLog& log, PersonId person,
                               const ObservationWindow& window);

}  // namespace trajekt
