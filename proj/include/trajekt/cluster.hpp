#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "trajekt/cohort.hpp"
#include "trajekt/features.hpp"
#include "trajekt/ingest.hpp"

namespace trajekt {

struct PointMatrix {
  size_t n = 0;
  size_t d = 0;
  std::vector<double> data;  // row-major

  const double* row(size_t i) const { return data.data() + i * d; }
  static PointMatrix from_frame(const TrajectoryFrame& frame);
};

struct Clustering {
  int k = 0;
  size_t dim = 0;
  std::vector<double> centroids;  // k x dim
  std::vector<int> assignments;   // point -> state id
  double wcss = 0.0;
  uint64_t seed = 0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> iteration_wcss;  // per-Lloyd-iteration trace of the winning restart

  const double* centroid(int c) const { return centroids.data() + static_cast<size_t>(c) * dim; }
};

struct KMeansOptions {
  int restarts = 10;
  double tol = 1e-8;
  int max_iter = 300;
  int jobs = 1;
};

// D^2 sampling: first centroid uniform, the rest proportional to squared
// distance to the nearest chosen one.
std::vector<double> kmeans_pp_init(const PointMatrix& points, int k, uint64_t seed);

Clustering kmeans_fit(const PointMatrix& points, int k, uint64_t seed,
                      const KMeansOptions& opt = {},
                      const std::vector<double>* warm_start = nullptr);

struct WcssCurve {
  std::vector<std::pair<int, double>> points;  // (k, wcss), k ascending
};

struct SweepResult {
  WcssCurve curve;
  std::map<int, Clustering> fits;
};

// Each k gets the random restarts plus a warm start built from the previous
// best centroids with the worst cluster split, which forces a non-increasing
// curve.
SweepResult sweep_k(const PointMatrix& points, int k_min, int k_max, uint64_t seed,
                    const KMeansOptions& opt = {});

// Normalized-difference knee detection on a decreasing convex curve.
// Returns the knee k, or nullopt when no candidate survives its threshold.
std::optional<int> kneedle(const WcssCurve& curve, double sensitivity = 1.0);

struct StateSeq {
  PersonId person_id = 0;
  Date t_start = 0;
  Date t_end = 0;
  Outcome outcome = Outcome::censored;
  std::vector<std::pair<int, int>> steps;  // (delta_t, state), delta_t ascending
};

using StateSequences = std::vector<StateSeq>;

StateSequences assign_states(const TrajectoryFrame& frame, const Clustering& clustering,
                             const std::vector<CohortPatient>& cohort);

struct StateSummary {
  size_t vector_count = 0;
  size_t patient_count = 0;
  double age_median = 0.0, age_q25 = 0.0, age_q75 = 0.0;  // ages at interval end dates
  std::map<std::string, size_t> sex_counts;
  std::map<std::string, size_t> race_counts;
  std::map<std::string, size_t> ethnicity_counts;
};

struct PrevalenceTable {
  int k = 0;
  // conditions with prevalence > threshold in at least one state
  std::vector<ConceptId> retained_conditions;
  std::map<std::pair<int, ConceptId>, double> prevalence;
  std::map<std::pair<int, std::string>, double> group_prevalence;
  std::map<std::pair<int, std::string>, int> bands;  // 1..5
  std::map<int, StateSummary> summary;
};

int prevalence_band(double p);

PrevalenceTable characterize_states(const StateSequences& sequences, const EventLog& log,
                                    const ConceptSets& sets, const Ontology& onto, int k,
                                    double threshold);

// 2-component PCA projection for plot data (not UMAP)
std::vector<std::array<double, 2>> pca2(const PointMatrix& points);

void write_states_csv(const std::string& path, const StateSequences& seqs);
StateSequences read_states_csv(const std::string& path,
                               const std::vector<CohortPatient>& cohort);
void write_centroids_csv(const std::string& path, const Clustering& c);
void write_wcss_curve_csv(const std::string& path, const WcssCurve& curve);
WcssCurve read_wcss_curve_csv(const std::string& path);
void write_prevalence_csv(const std::string& path, const PrevalenceTable& t);
void write_bands_csv(const std::string& path, const PrevalenceTable& t);

}  // namespace trajekt
