#include "trajekt/cluster.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <unordered_map>

#include "trajekt/csv.hpp"
#include "trajekt/parallel.hpp"
#include "trajekt/rng.hpp"
#include "trajekt/stats.hpp"

namespace trajekt {

PointMatrix PointMatrix::from_frame(const TrajectoryFrame& frame) {
  PointMatrix m;
  m.d = static_cast<size_t>(frame.d1 + frame.d2);
  m.n = frame.total_vectors();
  m.data.reserve(m.n * m.d);
  for (const auto& p : frame.patients)
    for (const auto& e : p.entries) m.data.insert(m.data.end(), e.vec.begin(), e.vec.end());
  return m;
}

static double sqdist(const double* a, const double* b, size_t d) {
  double s = 0.0;
  for (size_t j = 0; j < d; ++j) {
    double diff = a[j] - b[j];
    s += diff * diff;
  }
  return s;
}

static size_t count_distinct(const PointMatrix& points) {
  std::vector<uint64_t> hashes(points.n);
  for (size_t i = 0; i < points.n; ++i) {
    const char* bytes = reinterpret_cast<const char*>(points.row(i));
    hashes[i] = fnv1a(std::string_view(bytes, points.d * sizeof(double)));
  }
  std::sort(hashes.begin(), hashes.end());
  return std::unique(hashes.begin(), hashes.end()) - hashes.begin();
}

std::vector<double> kmeans_pp_init(const PointMatrix& points, int k, uint64_t seed) {
  if (k < 1) throw config_error("kmeans: k must be >= 1");
  if (static_cast<size_t>(k) > count_distinct(points))
    throw data_error("kmeans: k exceeds the number of distinct points");

  Rng rng(seed);
  const size_t n = points.n, d = points.d;
  std::vector<double> centroids;
  centroids.reserve(static_cast<size_t>(k) * d);

  size_t first = rng.uniform_int(n);
  centroids.insert(centroids.end(), points.row(first), points.row(first) + d);

  std::vector<double> dist2(n);
  for (size_t i = 0; i < n; ++i) dist2[i] = sqdist(points.row(i), centroids.data(), d);

  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : dist2) total += v;
    size_t chosen = 0;
    if (total > 0.0) {
      double target = rng.uniform() * total, run = 0.0;
      chosen = n - 1;
      for (size_t i = 0; i < n; ++i) {
        run += dist2[i];
        if (run >= target) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = rng.uniform_int(n);  // all mass at chosen points already
    }
    const double* pt = points.row(chosen);
    centroids.insert(centroids.end(), pt, pt + d);
    const double* nc = centroids.data() + static_cast<size_t>(c) * d;
    for (size_t i = 0; i < n; ++i)
      dist2[i] = std::min(dist2[i], sqdist(points.row(i), nc, d));
  }
  return centroids;
}

namespace {

struct AssignResult {
  double wcss = 0.0;
  std::vector<int> assign;
  std::vector<double> dist;  // squared distance to assigned centroid
};

constexpr size_t kChunk = 2048;

AssignResult assign_points(const PointMatrix& points, const std::vector<double>& centroids,
                           int k, int jobs) {
  const size_t n = points.n, d = points.d;
  AssignResult res;
  res.assign.resize(n);
  res.dist.resize(n);
  size_t nchunks = (n + kChunk - 1) / kChunk;
  std::vector<double> chunk_wcss(nchunks, 0.0);
  parallel_chunks(
      n, kChunk,
      [&](size_t chunk, size_t lo, size_t hi) {
        double local = 0.0;
        for (size_t i = lo; i < hi; ++i) {
          const double* p = points.row(i);
          int best = 0;
          double bd = sqdist(p, centroids.data(), d);
          for (int c = 1; c < k; ++c) {
            double dd = sqdist(p, centroids.data() + static_cast<size_t>(c) * d, d);
            if (dd < bd) {
              bd = dd;
              best = c;
            }
          }
          res.assign[i] = best;
          res.dist[i] = bd;
          local += bd;
        }
        chunk_wcss[chunk] = local;
      },
      jobs);
  for (double v : chunk_wcss) res.wcss += v;
  return res;
}

}  // namespace

static Clustering lloyd(const PointMatrix& points, int k, uint64_t seed,
                        std::vector<double> centroids, const KMeansOptions& opt) {
  const size_t n = points.n, d = points.d;
  Clustering out;
  out.k = k;
  out.dim = d;
  out.seed = seed;

  size_t nchunks = (n + kChunk - 1) / kChunk;
  std::vector<double> sums;
  std::vector<size_t> counts;
  std::vector<double> chunk_sums(nchunks * static_cast<size_t>(k) * d);
  std::vector<size_t> chunk_counts(nchunks * static_cast<size_t>(k));

  AssignResult ar;
  double prev_wcss = std::numeric_limits<double>::infinity();
  for (int iter = 1; iter <= opt.max_iter; ++iter) {
    ar = assign_points(points, centroids, k, opt.jobs);
    if (ar.wcss > prev_wcss * (1.0 + 1e-12) + 1e-12)
      throw numeric_error("kmeans: wcss increased across Lloyd iterations");
    out.iteration_wcss.push_back(ar.wcss);
    prev_wcss = ar.wcss;
    out.iterations = iter;

    std::fill(chunk_sums.begin(), chunk_sums.end(), 0.0);
    std::fill(chunk_counts.begin(), chunk_counts.end(), 0);
    parallel_chunks(
        n, kChunk,
        [&](size_t chunk, size_t lo, size_t hi) {
          double* cs = chunk_sums.data() + chunk * static_cast<size_t>(k) * d;
          size_t* cc = chunk_counts.data() + chunk * static_cast<size_t>(k);
          for (size_t i = lo; i < hi; ++i) {
            int a = ar.assign[i];
            const double* p = points.row(i);
            double* dst = cs + static_cast<size_t>(a) * d;
            for (size_t j = 0; j < d; ++j) dst[j] += p[j];
            cc[a]++;
          }
        },
        opt.jobs);
    sums.assign(static_cast<size_t>(k) * d, 0.0);
    counts.assign(k, 0);
    for (size_t chunk = 0; chunk < nchunks; ++chunk) {
      const double* cs = chunk_sums.data() + chunk * static_cast<size_t>(k) * d;
      const size_t* cc = chunk_counts.data() + chunk * static_cast<size_t>(k);
      for (size_t j = 0; j < static_cast<size_t>(k) * d; ++j) sums[j] += cs[j];
      for (int c = 0; c < k; ++c) counts[c] += cc[c];
    }

    std::vector<double> next(static_cast<size_t>(k) * d);
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        for (size_t j = 0; j < d; ++j)
          next[static_cast<size_t>(c) * d + j] =
              sums[static_cast<size_t>(c) * d + j] / static_cast<double>(counts[c]);
      } else {
        std::memcpy(next.data() + static_cast<size_t>(c) * d,
                    centroids.data() + static_cast<size_t>(c) * d, d * sizeof(double));
      }
    }
    // empty clusters seize the point currently farthest from its centroid
    std::vector<double> seize_dist = ar.dist;
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      size_t far = 0;
      for (size_t i = 1; i < n; ++i)
        if (seize_dist[i] > seize_dist[far]) far = i;
      std::memcpy(next.data() + static_cast<size_t>(c) * d, points.row(far),
                  d * sizeof(double));
      seize_dist[far] = -1.0;
    }

    double shift2 = 0.0;
    for (int c = 0; c < k; ++c)
      shift2 = std::max(shift2, sqdist(next.data() + static_cast<size_t>(c) * d,
                                       centroids.data() + static_cast<size_t>(c) * d, d));
    centroids = std::move(next);
    if (std::sqrt(shift2) < opt.tol) {
      out.converged = true;
      break;
    }
  }
  // final assignment against the final centroids
  ar = assign_points(points, centroids, k, opt.jobs);
  out.centroids = std::move(centroids);
  out.assignments = std::move(ar.assign);
  out.wcss = ar.wcss;
  return out;
}

Clustering kmeans_fit(const PointMatrix& points, int k, uint64_t seed,
                      const KMeansOptions& opt, const std::vector<double>* warm_start) {
  if (points.n == 0) throw data_error("kmeans: no points");
  std::optional<Clustering> best;
  if (warm_start) {
    if (warm_start->size() != static_cast<size_t>(k) * points.d)
      throw config_error("kmeans: warm start has wrong shape");
    best = lloyd(points, k, seed, *warm_start, opt);
  }
  int restarts = std::max(1, opt.restarts);
  for (int r = 0; r < restarts; ++r) {
    uint64_t s = derive_seed(seed, "kmeans", static_cast<uint64_t>(r));
    Clustering c = lloyd(points, k, seed, kmeans_pp_init(points, k, s), opt);
    if (!best || c.wcss < best->wcss) best = std::move(c);
  }
  return std::move(*best);
}

SweepResult sweep_k(const PointMatrix& points, int k_min, int k_max, uint64_t seed,
                    const KMeansOptions& opt) {
  if (k_min < 1 || k_max < k_min) throw config_error("sweep: bad k range");
  SweepResult out;
  const Clustering* prev = nullptr;
  for (int k = k_min; k <= k_max; ++k) {
    std::vector<double> warm;
    if (prev) {
      // previous centroids plus a split of the worst cluster
      warm = prev->centroids;
      std::vector<double> cluster_ss(prev->k, 0.0);
      for (size_t i = 0; i < points.n; ++i) {
        int a = prev->assignments[i];
        cluster_ss[a] += sqdist(points.row(i), prev->centroid(a), points.d);
      }
      int worst = 0;
      for (int c = 1; c < prev->k; ++c)
        if (cluster_ss[c] > cluster_ss[worst]) worst = c;
      size_t far = 0;
      double far_d = -1.0;
      for (size_t i = 0; i < points.n; ++i) {
        if (prev->assignments[i] != worst) continue;
        double dd = sqdist(points.row(i), prev->centroid(worst), points.d);
        if (dd > far_d) {
          far_d = dd;
          far = i;
        }
      }
      warm.insert(warm.end(), points.row(far), points.row(far) + points.d);
    }
    Clustering fit = kmeans_fit(points, k, derive_seed(seed, "sweep", k), opt,
                                warm.empty() ? nullptr : &warm);
    if (!out.curve.points.empty() &&
        fit.wcss > out.curve.points.back().second * (1.0 + 1e-12) + 1e-12)
      throw numeric_error("sweep: wcss increased between k=" +
                          std::to_string(out.curve.points.back().first) + " and k=" +
                          std::to_string(k));
    out.curve.points.emplace_back(k, fit.wcss);
    auto [it, _] = out.fits.emplace(k, std::move(fit));
    prev = &it->second;
  }
  return out;
}

std::optional<int> kneedle(const WcssCurve& curve, double sensitivity) {
  const auto& pts = curve.points;
  const size_t n = pts.size();
  if (n < 3) return std::nullopt;

  double xmin = pts.front().first, xmax = pts.back().first;
  double ymin = pts[0].second, ymax = pts[0].second;
  for (const auto& [_, y] : pts) {
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }
  if (xmax == xmin || ymax == ymin) return std::nullopt;

  std::vector<double> xn(n), diff(n);
  for (size_t i = 0; i < n; ++i) {
    xn[i] = (pts[i].first - xmin) / (xmax - xmin);
    double yn = (pts[i].second - ymin) / (ymax - ymin);
    diff[i] = (1.0 - yn) - xn[i];  // flip a decreasing convex curve
  }
  double mean_dx = 0.0;
  for (size_t i = 1; i < n; ++i) mean_dx += xn[i] - xn[i - 1];
  mean_dx /= static_cast<double>(n - 1);

  std::vector<size_t> maxima, minima;
  for (size_t i = 1; i + 1 < n; ++i) {
    if (diff[i] >= diff[i - 1] && diff[i] >= diff[i + 1]) maxima.push_back(i);
    if (diff[i] <= diff[i - 1] && diff[i] <= diff[i + 1]) minima.push_back(i);
  }
  if (maxima.empty()) return std::nullopt;

  size_t max_ptr = 0, min_ptr = 0;
  double threshold = 0.0;
  size_t threshold_index = maxima[0];
  bool armed = false;
  for (size_t i = maxima[0]; i + 1 < n; ++i) {
    if (max_ptr < maxima.size() && maxima[max_ptr] == i) {
      threshold = diff[i] - sensitivity * mean_dx;
      threshold_index = i;
      armed = true;
      ++max_ptr;
    }
    while (min_ptr < minima.size() && minima[min_ptr] < i) ++min_ptr;
    if (min_ptr < minima.size() && minima[min_ptr] == i) {
      threshold = 0.0;
      armed = false;
    }
    if (armed && diff[i + 1] < threshold) return pts[threshold_index].first;
  }
  return std::nullopt;
}

StateSequences assign_states(const TrajectoryFrame& frame, const Clustering& clustering,
                             const std::vector<CohortPatient>& cohort) {
  if (clustering.dim != static_cast<size_t>(frame.d1 + frame.d2))
    throw data_error("assign_states: clustering dimension does not match frame");
  std::unordered_map<PersonId, const CohortPatient*> by_id;
  for (const auto& p : cohort) by_id[p.person_id] = &p;

  StateSequences out(frame.patients.size());
  parallel_chunks(
      frame.patients.size(), 16,
      [&](size_t, size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
          const PatientFrame& pf = frame.patients[i];
          auto it = by_id.find(pf.person_id);
          if (it == by_id.end())
            throw data_error("assign_states: person " + std::to_string(pf.person_id) +
                             " not in cohort");
          StateSeq seq;
          seq.person_id = pf.person_id;
          seq.t_start = it->second->window.t_start;
          seq.t_end = it->second->window.t_end;
          seq.outcome = it->second->window.outcome;
          for (const auto& e : pf.entries) {
            int best = 0;
            double bd = sqdist(e.vec.data(), clustering.centroid(0), clustering.dim);
            for (int c = 1; c < clustering.k; ++c) {
              double dd = sqdist(e.vec.data(), clustering.centroid(c), clustering.dim);
              if (dd < bd) {  // strict keeps the lower id on ties
                bd = dd;
                best = c;
              }
            }
            seq.steps.emplace_back(e.delta_t, best);
          }
          out[i] = std::move(seq);
        }
      },
      1);
  return out;
}

int prevalence_band(double p) {
  if (p >= 0.95) return 5;
  if (p >= 0.90) return 4;
  if (p >= 0.75) return 3;
  if (p >= 0.50) return 2;
  return 1;
}

PrevalenceTable characterize_states(const StateSequences& sequences, const EventLog& log,
                                    const ConceptSets& sets, const Ontology& onto, int k,
                                    double threshold) {
  PrevalenceTable out;
  out.k = k;

  std::map<ConceptId, std::string> concept_group;
  for (const auto& [group, ids] : sets.disease_groups)
    for (ConceptId c : ids) concept_group[c] = group;

  std::vector<size_t> vec_count(k, 0);
  std::map<std::pair<int, ConceptId>, size_t> cond_count;
  std::map<std::pair<int, std::string>, size_t> group_count;
  std::vector<std::set<PersonId>> patients(k);
  std::vector<std::vector<double>> ages(k);

  for (const auto& seq : sequences) {
    // first occurrence day of each condition concept, expanded with ancestors
    std::map<ConceptId, int> first_occ;
    if (auto it = log.events_of.find(seq.person_id); it != log.events_of.end()) {
      for (size_t idx : it->second) {
        const Event& e = log.events[idx];
        if (e.domain != Domain::condition) continue;
        if (e.date < seq.t_start || e.date > seq.t_end) continue;
        int dt = e.date - seq.t_start;
        auto note = [&](ConceptId c) {
          auto [fit, fresh] = first_occ.emplace(c, dt);
          if (!fresh && dt < fit->second) fit->second = dt;
        };
        note(e.concept_id);
        for (ConceptId a : onto.ancestors(e.concept_id)) note(a);
      }
    }
    const Person& person = log.person(seq.person_id);
    for (const auto& [dt, state] : seq.steps) {
      vec_count[state]++;
      patients[state].insert(seq.person_id);
      ages[state].push_back(age_at(person.birth_date, seq.t_start + dt));
      std::set<std::string> groups_here;
      for (const auto& [cid, d0] : first_occ) {
        if (d0 > dt) continue;
        cond_count[{state, cid}]++;
        if (auto git = concept_group.find(cid); git != concept_group.end())
          groups_here.insert(git->second);
      }
      for (const auto& g : groups_here) group_count[{state, g}]++;
    }
  }

  std::set<ConceptId> retained;
  for (const auto& [key, n] : cond_count) {
    double p = vec_count[key.first] > 0
                   ? static_cast<double>(n) / static_cast<double>(vec_count[key.first])
                   : 0.0;
    if (p > threshold) retained.insert(key.second);
  }
  out.retained_conditions.assign(retained.begin(), retained.end());
  for (const auto& [key, n] : cond_count) {
    if (!retained.count(key.second)) continue;
    out.prevalence[key] = vec_count[key.first] > 0
                              ? static_cast<double>(n) / static_cast<double>(vec_count[key.first])
                              : 0.0;
  }

  for (int s = 0; s < k; ++s) {
    for (const auto& [group, _] : sets.disease_groups) {
      auto it = group_count.find({s, group});
      double p = (it != group_count.end() && vec_count[s] > 0)
                     ? static_cast<double>(it->second) / static_cast<double>(vec_count[s])
                     : 0.0;
      out.group_prevalence[{s, group}] = p;
      out.bands[{s, group}] = prevalence_band(p);
    }
    StateSummary sum;
    sum.vector_count = vec_count[s];
    sum.patient_count = patients[s].size();
    if (!ages[s].empty()) {
      sum.age_median = quantile(ages[s], 0.5);
      sum.age_q25 = quantile(ages[s], 0.25);
      sum.age_q75 = quantile(ages[s], 0.75);
    }
    for (PersonId pid : patients[s]) {
      const Person& p = log.person(pid);
      sum.sex_counts[to_string(p.sex)]++;
      sum.race_counts[p.race]++;
      sum.ethnicity_counts[p.ethnicity]++;
    }
    out.summary[s] = std::move(sum);
  }
  return out;
}

std::vector<std::array<double, 2>> pca2(const PointMatrix& points) {
  const size_t n = points.n, d = points.d;
  std::vector<std::array<double, 2>> out(n, {0.0, 0.0});
  if (n < 2 || d == 0) return out;
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(
      points.data.data(), n, d);
  Eigen::RowVectorXd mean = x.colwise().mean();
  Eigen::MatrixXd centered = x.rowwise() - mean;
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  for (int comp = 0; comp < 2 && comp < static_cast<int>(d); ++comp) {
    Eigen::VectorXd v = es.eigenvectors().col(static_cast<int>(d) - 1 - comp);
    // fix the sign so the projection is reproducible
    int arg = 0;
    for (int j = 1; j < v.size(); ++j)
      if (std::fabs(v(j)) > std::fabs(v(arg))) arg = j;
    if (v(arg) < 0) v = -v;
    Eigen::VectorXd proj = centered * v;
    for (size_t i = 0; i < n; ++i) out[i][comp] = proj(static_cast<Eigen::Index>(i));
  }
  return out;
}

void write_states_csv(const std::string& path, const StateSequences& seqs) {
  CsvWriter w(path, {"person_id", "delta_t", "state"});
  for (const auto& s : seqs)
    for (const auto& [dt, state] : s.steps)
      w.write_row({std::to_string(s.person_id), std::to_string(dt), std::to_string(state)});
}

StateSequences read_states_csv(const std::string& path,
                               const std::vector<CohortPatient>& cohort) {
  std::unordered_map<PersonId, const CohortPatient*> by_id;
  for (const auto& p : cohort) by_id[p.person_id] = &p;
  CsvTable t = read_csv(path);
  int c_pid = t.require_col("person_id", path);
  int c_dt = t.require_col("delta_t", path);
  int c_st = t.require_col("state", path);
  StateSequences out;
  StateSeq* cur = nullptr;
  for (size_t r = 0; r < t.rows.size(); ++r) {
    std::string ctx = path + " row " + std::to_string(r + 2);
    PersonId pid = parse_int(t.rows[r][c_pid], ctx);
    if (!cur || cur->person_id != pid) {
      auto it = by_id.find(pid);
      if (it == by_id.end())
        throw data_error(ctx + ": person " + std::to_string(pid) + " not in cohort");
      StateSeq seq;
      seq.person_id = pid;
      seq.t_start = it->second->window.t_start;
      seq.t_end = it->second->window.t_end;
      seq.outcome = it->second->window.outcome;
      out.push_back(std::move(seq));
      cur = &out.back();
    }
    cur->steps.emplace_back(static_cast<int>(parse_int(t.rows[r][c_dt], ctx)),
                            static_cast<int>(parse_int(t.rows[r][c_st], ctx)));
  }
  return out;
}

void write_centroids_csv(const std::string& path, const Clustering& c) {
  std::vector<std::string> header = {"state"};
  for (size_t j = 0; j < c.dim; ++j) header.push_back("v" + std::to_string(j));
  CsvWriter w(path, header);
  for (int s = 0; s < c.k; ++s) {
    std::vector<std::string> row = {std::to_string(s)};
    for (size_t j = 0; j < c.dim; ++j) row.push_back(fmt_double(c.centroid(s)[j]));
    w.write_row(row);
  }
}

void write_wcss_curve_csv(const std::string& path, const WcssCurve& curve) {
  CsvWriter w(path, {"k", "wcss"});
  for (const auto& [k, wcss] : curve.points)
    w.write_row({std::to_string(k), fmt_double(wcss)});
}

WcssCurve read_wcss_curve_csv(const std::string& path) {
  CsvTable t = read_csv(path);
  int c_k = t.require_col("k", path);
  int c_w = t.require_col("wcss", path);
  WcssCurve out;
  for (size_t r = 0; r < t.rows.size(); ++r) {
    std::string ctx = path + " row " + std::to_string(r + 2);
    out.points.emplace_back(static_cast<int>(parse_int(t.rows[r][c_k], ctx)),
                            parse_double(t.rows[r][c_w], ctx));
  }
  return out;
}

void write_prevalence_csv(const std::string& path, const PrevalenceTable& t) {
  CsvWriter w(path, {"state", "concept_id", "prevalence"});
  for (const auto& [key, p] : t.prevalence)
    w.write_row({std::to_string(key.first), std::to_string(key.second), fmt_double(p)});
}

void write_bands_csv(const std::string& path, const PrevalenceTable& t) {
  CsvWriter w(path, {"state", "disease_group", "prevalence", "band"});
  for (const auto& [key, band] : t.bands) {
    double p = t.group_prevalence.at(key);
    w.write_row({std::to_string(key.first), key.second, fmt_double(p), std::to_string(band)});
  }
}

}  // namespace trajekt
