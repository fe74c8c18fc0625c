#include "trajekt/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "trajekt/cluster.hpp"
#include "trajekt/cohort.hpp"
#include "trajekt/csv.hpp"
#include "trajekt/features.hpp"
#include "trajekt/impute.hpp"
#include "trajekt/ingest.hpp"
#include "trajekt/msm.hpp"
#include "trajekt/rng.hpp"
#include "trajekt/stats.hpp"
#include "trajekt/survival.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace trajekt {

static const char* kVersion = "0.1.0";

void PipelineConfig::validate() const {
  auto in01 = [](double v) { return v > 0.0 && v <= 1.0; };
  if (k_min < 1 || k_max < k_min) throw config_error("config: bad k range");
  if (!in01(prevalence_threshold) || !in01(transition_prevalence_threshold) ||
      !in01(missing_threshold) || !in01(alpha) || !in01(collinearity_threshold))
    throw config_error("config: thresholds must lie in (0, 1]");
  if (bootstrap_b < 2) throw config_error("config: bootstrap_b must be >= 2");
  if (knn_k < 1) throw config_error("config: knn_k must be >= 1");
  if (d1 < 1 || d2 < 1) throw config_error("config: embedding dims must be positive");
  if (competing != "cause_specific" && competing != "exclude_deaths")
    throw config_error("config: competing must be cause_specific or exclude_deaths");
  if (ties != "efron" && ties != "breslow")
    throw config_error("config: ties must be efron or breslow");
  if (weights != "ahr" && weights != "unit")
    throw config_error("config: weights must be ahr or unit");
  for (double h : horizons_years)
    if (h <= 0.0) throw config_error("config: horizons must be positive");
}

PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw config_error(path + ": " + e.what());
  }
  PipelineConfig c;
  c.input_dir = j.value("input_dir", c.input_dir);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.seed = j.value("seed", c.seed);
  c.k_min = j.value("k_min", c.k_min);
  c.k_max = j.value("k_max", c.k_max);
  c.k_override = j.value("k_override", c.k_override);
  c.kneedle_sensitivity = j.value("kneedle_sensitivity", c.kneedle_sensitivity);
  c.restarts = j.value("restarts", c.restarts);
  c.bootstrap_b = j.value("bootstrap_b", c.bootstrap_b);
  if (j.contains("horizons_years"))
    c.horizons_years = j["horizons_years"].get<std::vector<double>>();
  c.curve_years = j.value("curve_years", c.curve_years);
  c.curve_step_days = j.value("curve_step_days", c.curve_step_days);
  c.prevalence_threshold = j.value("prevalence_threshold", c.prevalence_threshold);
  c.transition_prevalence_threshold =
      j.value("transition_prevalence_threshold", c.transition_prevalence_threshold);
  c.missing_threshold = j.value("missing_threshold", c.missing_threshold);
  c.alpha = j.value("alpha", c.alpha);
  c.collinearity_threshold = j.value("collinearity_threshold", c.collinearity_threshold);
  c.knn_k = j.value("knn_k", c.knn_k);
  c.softimpute_lambda = j.value("softimpute_lambda", c.softimpute_lambda);
  c.d1 = j.value("d1", c.d1);
  c.d2 = j.value("d2", c.d2);
  c.embedding_code_file = j.value("embedding_code_file", c.embedding_code_file);
  c.embedding_series_file = j.value("embedding_series_file", c.embedding_series_file);
  c.allow_fallback = j.value("allow_fallback", c.allow_fallback);
  c.competing = j.value("competing", c.competing);
  c.ties = j.value("ties", c.ties);
  c.weights = j.value("weights", c.weights);
  c.min_subpop = j.value("min_subpop", c.min_subpop);
  c.jobs = j.value("jobs", c.jobs);
  if (const char* env = std::getenv("TRAJEKT_SEED")) c.seed = std::strtoull(env, nullptr, 10);
  c.validate();
  return c;
}

const std::vector<std::string>& pipeline_stage_names() {
  static const std::vector<std::string> names = {"ingest", "cohort",  "impute", "featurize",
                                                 "cluster", "msm",    "cox",    "report"};
  return names;
}

namespace {

struct Ctx {
  const PipelineConfig& cfg;
  std::string in(const std::string& name) const { return cfg.input_dir + "/" + name; }
  std::string out(const std::string& name) const { return cfg.out_dir + "/" + name; }
  uint64_t stage_seed(const std::string& stage) const {
    return derive_seed(cfg.seed, "stage:" + stage);
  }
};

uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw stage_error("missing artifact: " + path);
  uint64_t h = 1469598103934665603ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    h = fnv1a(std::string_view(buf, static_cast<size_t>(in.gcount())), h);
    if (in.eof()) break;
  }
  return h;
}

void require_upstream(const Ctx& ctx, const std::string& stage,
                      const std::vector<std::string>& artifacts) {
  for (const auto& a : artifacts) {
    std::string path = a.front() == '@' ? ctx.in(a.substr(1)) : ctx.out(a);
    if (!fs::exists(path))
      throw stage_error("stage '" + stage + "' requires missing artifact " + path +
                        " (run the upstream stage first)");
  }
}

void record_stage(const Ctx& ctx, const std::string& stage,
                  const std::vector<std::string>& inputs,
                  const std::vector<std::string>& artifacts) {
  std::string manifest_path = ctx.out("manifest.json");
  nlohmann::json j;
  if (fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    in >> j;
  }
  j["version"] = kVersion;
  nlohmann::json entry;
  char hex[24];
  for (const auto& input : inputs) {
    std::string path = input.front() == '@' ? ctx.in(input.substr(1)) : ctx.out(input);
    std::string name = input.front() == '@' ? input.substr(1) : input;
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(hash_file(path)));
    entry["inputs"][name] = hex;
  }
  entry["seed"] = ctx.stage_seed(stage);
  entry["version"] = kVersion;
  entry["artifacts"] = artifacts;
  j["stages"][stage] = entry;
  std::ofstream out(manifest_path);
  out << j.dump(2) << "\n";
}

EventLog load_input_log(const Ctx& ctx, LoadReport* report = nullptr) {
  EventLogPaths paths{ctx.in("persons.csv"), ctx.in("visits.csv"), ctx.in("events.csv"),
                      ctx.in("measurements.csv")};
  return load_event_log(paths, report);
}

void load_input_concepts(const Ctx& ctx, ConceptSets& sets, Ontology& onto) {
  load_concept_sets(ctx.in("concepts.json"), ctx.in("ontology.csv"), sets, onto);
}

const std::vector<std::string> kInputFiles = {"@persons.csv", "@visits.csv", "@events.csv",
                                              "@measurements.csv", "@concepts.json",
                                              "@ontology.csv"};

void stage_ingest(const Ctx& ctx) {
  require_upstream(ctx, "ingest", kInputFiles);
  LoadReport rep;
  load_input_log(ctx, &rep);
  ConceptSets sets;
  Ontology onto;
  load_input_concepts(ctx, sets, onto);
  CsvWriter w(ctx.out("ingest_counts.csv"), {"table", "rows"});
  w.write_row({"persons", std::to_string(rep.persons)});
  w.write_row({"visits", std::to_string(rep.visits)});
  w.write_row({"events", std::to_string(rep.events)});
  w.write_row({"measurements", std::to_string(rep.measurements)});
  record_stage(ctx, "ingest", kInputFiles, {"ingest_counts.csv"});
  std::cout << "[ingest] persons=" << rep.persons << " visits=" << rep.visits
            << " events=" << rep.events << " measurements=" << rep.measurements << "\n";
}

void stage_cohort(const Ctx& ctx) {
  require_upstream(ctx, "cohort", kInputFiles);
  EventLog log = load_input_log(ctx);
  ConceptSets sets;
  Ontology onto;
  load_input_concepts(ctx, sets, onto);
  CohortResult res = build_cohort(log, sets, {}, ctx.cfg.jobs);
  if (res.patients.empty()) std::cerr << "[cohort] warning: empty cohort\n";
  write_cohort_csv(ctx.out("cohort.csv"), res.patients, panel_variables(sets));
  write_attrition_csv(ctx.out("attrition.csv"), res.attrition);
  record_stage(ctx, "cohort", kInputFiles, {"cohort.csv", "attrition.csv"});
  std::cout << "[cohort] patients=" << res.patients.size() << "\n";
}

void stage_impute(const Ctx& ctx) {
  require_upstream(ctx, "impute", {"cohort.csv"});
  std::vector<std::string> panel_vars;
  auto cohort = read_cohort_csv(ctx.out("cohort.csv"), &panel_vars);
  CovariateMatrix full = build_covariate_matrix(cohort, panel_vars, ctx.cfg.knn_k);

  NumericTable t = NumericTable::make(full.names, [&] {
    std::vector<int64_t> ids;
    for (const auto& p : cohort) ids.push_back(p.person_id);
    return ids;
  }());
  const size_t p = full.names.size();
  for (size_t i = 0; i < cohort.size(); ++i)
    for (size_t j = 0; j < p; ++j)
      if (full.present[i * p + j]) t.set(i, j, full.x[i * p + j]);

  DropResult dropped = drop_high_missingness(t, ctx.cfg.missing_threshold);
  SoftImputeOptions sopt;
  sopt.lambda = ctx.cfg.softimpute_lambda;
  bool any_missing = false;
  for (uint8_t pr : dropped.table.present)
    if (!pr) any_missing = true;
  CompletionResult comp;
  if (any_missing) {
    comp = soft_impute(dropped.table, sopt);
  } else {
    comp.table = dropped.table;
    comp.converged = true;
    comp.imputed_per_column.assign(dropped.table.ncols(), 0);
  }

  {
    std::vector<std::string> header = {"person_id"};
    for (const auto& c : comp.table.columns) header.push_back(c);
    CsvWriter w(ctx.out("covariates_imputed.csv"), header);
    for (size_t i = 0; i < comp.table.nrows(); ++i) {
      std::vector<std::string> row = {std::to_string(comp.table.row_ids[i])};
      for (size_t j = 0; j < comp.table.ncols(); ++j)
        row.push_back(fmt_double(comp.table.at(i, j)));
      w.write_row(row);
    }
  }
  {
    CsvWriter w(ctx.out("impute_report.csv"), {"column", "status", "imputed_cells"});
    for (const auto& c : dropped.dropped) w.write_row({c, "dropped_high_missing", ""});
    for (size_t j = 0; j < comp.table.ncols(); ++j)
      w.write_row({comp.table.columns[j], comp.converged ? "completed" : "not_converged",
                   std::to_string(comp.imputed_per_column[j])});
  }
  record_stage(ctx, "impute", {"cohort.csv"},
               {"covariates_imputed.csv", "impute_report.csv"});
  std::cout << "[impute] columns=" << comp.table.ncols() << " dropped=" << dropped.dropped.size()
            << "\n";
}

void stage_featurize(const Ctx& ctx) {
  require_upstream(ctx, "featurize", {"cohort.csv"});
  require_upstream(ctx, "featurize", kInputFiles);
  EventLog log = load_input_log(ctx);
  ConceptSets sets;
  Ontology onto;
  load_input_concepts(ctx, sets, onto);
  auto cohort = read_cohort_csv(ctx.out("cohort.csv"));

  FrameOptions opt;
  opt.d1 = ctx.cfg.d1;
  opt.d2 = ctx.cfg.d2;
  opt.seed = ctx.stage_seed("featurize");
  opt.jobs = ctx.cfg.jobs;

  std::unique_ptr<ExternalEmbedder> ext_code, ext_series;
  std::unique_ptr<FallbackEmbedder> fb_code, fb_series;
  HashedCodeEmbedder builtin_code(opt.d1);
  SeriesStatsEmbedder builtin_series;
  const Embedder* code = nullptr;
  const Embedder* series = nullptr;
  auto wire = [&](const std::string& file, int dim, const Embedder& builtin,
                  std::unique_ptr<ExternalEmbedder>& ext,
                  std::unique_ptr<FallbackEmbedder>& fb) -> const Embedder* {
    if (file.empty()) return nullptr;
    ext = load_external_embeddings(file, dim);
    CoverageReport cov = embedding_coverage(*ext, log, sets, cohort);
    if (!cov.missing.empty()) {
      CsvWriter w(ctx.out("embedding_coverage.csv"), {"person_id", "delta_t"});
      for (const auto& [pid, dt] : cov.missing)
        w.write_row({std::to_string(pid), std::to_string(dt)});
      if (!ctx.cfg.allow_fallback)
        throw data_error(file + ": " + std::to_string(cov.missing.size()) +
                         " (person, day) pairs lack embeddings; rerun with --allow-fallback "
                         "to fill them with the builtin featurizer");
      fb = std::make_unique<FallbackEmbedder>(ext.get(), &builtin);
      return fb.get();
    }
    return ext.get();
  };
  code = wire(ctx.cfg.embedding_code_file, opt.d1, builtin_code, ext_code, fb_code);
  series = wire(ctx.cfg.embedding_series_file, opt.d2, builtin_series, ext_series, fb_series);

  TrajectoryFrame frame = build_frames(log, sets, cohort, opt, code, series);
  write_frame_csv(ctx.out("frame.csv"), frame);
  write_frame_manifest(ctx.out("frame_manifest.json"), frame);
  record_stage(ctx, "featurize", {"cohort.csv"}, {"frame.csv", "frame_manifest.json"});
  std::cout << "[featurize] patients=" << frame.patients.size()
            << " vectors=" << frame.total_vectors() << " dim=" << frame.d1 + frame.d2 << "\n";
}

// discrete second difference picks the sharpest bend if kneedle declines
int curvature_fallback(const WcssCurve& curve) {
  const auto& p = curve.points;
  int best_k = p.front().first;
  double best = -1.0;
  for (size_t i = 1; i + 1 < p.size(); ++i) {
    double c = p[i - 1].second - 2.0 * p[i].second + p[i + 1].second;
    if (c > best) {
      best = c;
      best_k = p[i].first;
    }
  }
  return best_k;
}

void stage_cluster(const Ctx& ctx) {
  require_upstream(ctx, "cluster", {"frame.csv", "frame_manifest.json", "cohort.csv"});
  require_upstream(ctx, "cluster", kInputFiles);
  EventLog log = load_input_log(ctx);
  ConceptSets sets;
  Ontology onto;
  load_input_concepts(ctx, sets, onto);
  auto cohort = read_cohort_csv(ctx.out("cohort.csv"));
  TrajectoryFrame frame = read_frame_csv(ctx.out("frame.csv"), ctx.out("frame_manifest.json"));
  PointMatrix points = PointMatrix::from_frame(frame);

  KMeansOptions kopt;
  kopt.restarts = ctx.cfg.restarts;
  kopt.jobs = ctx.cfg.jobs;
  int k_max = std::min<int>(ctx.cfg.k_max, static_cast<int>(points.n));
  SweepResult sweep = sweep_k(points, ctx.cfg.k_min, k_max, ctx.stage_seed("cluster"), kopt);
  write_wcss_curve_csv(ctx.out("wcss_curve.csv"), sweep.curve);

  std::optional<int> knee = kneedle(sweep.curve, ctx.cfg.kneedle_sensitivity);
  int chosen = ctx.cfg.k_override > 0 ? ctx.cfg.k_override
               : knee                 ? *knee
                                      : curvature_fallback(sweep.curve);
  if (!sweep.fits.count(chosen))
    throw config_error("chosen k=" + std::to_string(chosen) + " is outside the sweep range");
  const Clustering& fit = sweep.fits.at(chosen);

  StateSequences seqs = assign_states(frame, fit, cohort);
  PrevalenceTable prev = characterize_states(seqs, log, sets, onto, chosen,
                                             ctx.cfg.prevalence_threshold);

  write_states_csv(ctx.out("states.csv"), seqs);
  write_centroids_csv(ctx.out("centroids.csv"), fit);
  write_prevalence_csv(ctx.out("prevalence.csv"), prev);
  write_bands_csv(ctx.out("bands.csv"), prev);
  {
    auto proj = pca2(points);
    CsvWriter w(ctx.out("pca.csv"), {"person_id", "delta_t", "pc1", "pc2", "state"});
    size_t idx = 0;
    for (size_t pi = 0; pi < frame.patients.size(); ++pi)
      for (const auto& e : frame.patients[pi].entries) {
        w.write_row({std::to_string(frame.patients[pi].person_id), std::to_string(e.delta_t),
                     fmt_double(proj[idx][0]), fmt_double(proj[idx][1]),
                     std::to_string(fit.assignments[idx])});
        ++idx;
      }
  }
  {
    // expert-review sheet: characterizations for k near the knee
    std::ofstream rf(ctx.out("k_review.txt"));
    rf << "wcss sweep k=" << ctx.cfg.k_min << ".." << k_max << "\n";
    rf << "kneedle proposal: " << (knee ? std::to_string(*knee) : "none") << "\n";
    rf << "chosen k: " << chosen
       << (ctx.cfg.k_override > 0 ? " (operator override)" : knee ? " (kneedle)"
                                                                  : " (curvature fallback)")
       << "\n\n";
    for (int k : {chosen - 1, chosen, chosen + 1}) {
      if (!sweep.fits.count(k)) continue;
      StateSequences s = assign_states(frame, sweep.fits.at(k), cohort);
      PrevalenceTable pt =
          characterize_states(s, log, sets, onto, k, ctx.cfg.prevalence_threshold);
      rf << "k=" << k << " wcss=" << fmt_double(sweep.fits.at(k).wcss) << "\n";
      for (int st = 0; st < k; ++st) {
        rf << "  S" << st << ": vectors=" << pt.summary.at(st).vector_count
           << " patients=" << pt.summary.at(st).patient_count;
        std::vector<std::pair<double, std::string>> top;
        for (const auto& [key, gp] : pt.group_prevalence)
          if (key.first == st) top.emplace_back(gp, key.second);
        std::sort(top.rbegin(), top.rend());
        for (size_t g = 0; g < std::min<size_t>(3, top.size()); ++g)
          if (top[g].first > 0.0)
            rf << " " << top[g].second << "=" << fmt_double(top[g].first);
        rf << "\n";
      }
    }
  }
  record_stage(ctx, "cluster", {"frame.csv", "cohort.csv"},
               {"states.csv", "centroids.csv", "wcss_curve.csv", "prevalence.csv",
                "bands.csv", "pca.csv", "k_review.txt"});
  std::cout << "[cluster] k=" << chosen
            << " (kneedle: " << (knee ? std::to_string(*knee) : "none")
            << ") wcss=" << fit.wcss << "\n";
}

void stage_msm(const Ctx& ctx) {
  require_upstream(ctx, "msm", {"states.csv", "centroids.csv", "cohort.csv"});
  auto cohort = read_cohort_csv(ctx.out("cohort.csv"));
  StateSequences seqs = read_states_csv(ctx.out("states.csv"), cohort);
  CsvTable centroids = read_csv(ctx.out("centroids.csv"));
  int k = static_cast<int>(centroids.rows.size());

  TransitionEventSet es = extract_transitions(seqs, k);
  write_transitions_csv(ctx.out("transitions.csv"), es);

  std::vector<double> horizons;
  for (double y : ctx.cfg.horizons_years) horizons.push_back(years_to_days(y));
  double t_max = *std::max_element(horizons.begin(), horizons.end());

  TransitionMatrixSeries series = aalen_johansen(es, 0.0, t_max);
  std::vector<double> grid;
  for (double t = 0.0; t <= years_to_days(ctx.cfg.curve_years) + 1e-9;
       t += ctx.cfg.curve_step_days)
    grid.push_back(t);
  write_aj_series_csv(ctx.out("aj_series.csv"), series, grid);
  write_terminal_table_csv(ctx.out("terminal_table.csv"),
                           terminal_probability_table(series, horizons));

  std::vector<double> all_times = grid;
  all_times.insert(all_times.end(), horizons.begin(), horizons.end());
  std::sort(all_times.begin(), all_times.end());
  all_times.erase(std::unique(all_times.begin(), all_times.end()), all_times.end());
  CiBands bands = bootstrap_transition_ci(es, ctx.cfg.bootstrap_b, ctx.stage_seed("msm"),
                                          all_times, ctx.cfg.jobs);

  // horizon-only view plus the full plot grid
  {
    CsvWriter w(ctx.out("ci.csv"),
                {"horizon_days", "from", "to", "point", "lo", "hi", "replicates"});
    for (double h : horizons) {
      size_t hi_idx =
          std::lower_bound(bands.horizons.begin(), bands.horizons.end(), h) -
          bands.horizons.begin();
      for (int f = 0; f < bands.n_states; ++f)
        for (int t = 0; t < bands.n_states; ++t) {
          size_t c = bands.idx(hi_idx, f, t);
          w.write_row({fmt_double(h), std::to_string(f), std::to_string(t),
                       fmt_double(bands.point[c]), fmt_double(bands.lo[c]),
                       fmt_double(bands.hi[c]), std::to_string(bands.replicates_used[c])});
        }
    }
  }
  write_ci_csv(ctx.out("ci_curves.csv"), bands);
  record_stage(ctx, "msm", {"states.csv", "cohort.csv"},
               {"transitions.csv", "aj_series.csv", "terminal_table.csv", "ci.csv",
                "ci_curves.csv"});
  std::cout << "[msm] states=" << k << " transitions=" << es.total_transitions()
            << " bootstrap_b=" << ctx.cfg.bootstrap_b
            << " degenerate=" << bands.degenerate_replicates << "\n";
}

void stage_cox(const Ctx& ctx) {
  require_upstream(ctx, "cox", {"states.csv", "cohort.csv", "covariates_imputed.csv"});
  std::vector<std::string> panel_vars;
  auto cohort = read_cohort_csv(ctx.out("cohort.csv"), &panel_vars);
  StateSequences seqs = read_states_csv(ctx.out("states.csv"), cohort);

  RiskFactorOptions opt;
  opt.subpop_prevalence = ctx.cfg.transition_prevalence_threshold;
  opt.min_subpop = ctx.cfg.min_subpop;
  opt.missing_threshold = ctx.cfg.missing_threshold;
  opt.knn_k = ctx.cfg.knn_k;
  opt.collinearity_threshold = ctx.cfg.collinearity_threshold;
  opt.weight_template = ctx.cfg.weights;
  opt.ties = ctx.cfg.ties == "breslow" ? Ties::breslow : Ties::efron;
  opt.competing = ctx.cfg.competing == "exclude_deaths" ? CompetingMode::exclude_deaths
                                                        : CompetingMode::cause_specific;
  opt.softimpute_lambda = ctx.cfg.softimpute_lambda;
  RiskFactorReport report = risk_factor_analysis(cohort, seqs, panel_vars, opt);
  write_risk_factors_csv(ctx.out("risk_factors.csv"), report);
  write_diagnostics_csv(ctx.out("diagnostics.csv"), report);
  record_stage(ctx, "cox", {"states.csv", "cohort.csv"},
               {"risk_factors.csv", "diagnostics.csv"});
  size_t fitted = 0;
  for (const auto& d : report.diagnostics)
    if (d.status == "fitted") ++fitted;
  std::cout << "[cox] subpopulations=" << report.diagnostics.size() << " fitted=" << fitted
            << " rows=" << report.rows.size() << "\n";
}

std::string horizon_label(double years) {
  if (years < 1.0) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%dm", static_cast<int>(std::lround(years * 12.0)));
    return buf;
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "%gy", years);
  return buf;
}

std::string median_iqr(std::vector<double> v) {
  if (v.empty()) return "";
  double med = quantile(v, 0.5), q1 = quantile(v, 0.25), q3 = quantile(v, 0.75);
  return fmt_double(med) + " (" + fmt_double(q1) + "-" + fmt_double(q3) + ")";
}

void stage_report(const Ctx& ctx) {
  require_upstream(ctx, "report",
                   {"cohort.csv", "attrition.csv", "states.csv", "bands.csv",
                    "prevalence.csv", "ci.csv", "ci_curves.csv", "risk_factors.csv"});
  require_upstream(ctx, "report", {"@persons.csv"});
  std::vector<std::string> panel_vars;
  auto cohort = read_cohort_csv(ctx.out("cohort.csv"), &panel_vars);

  std::map<PersonId, std::pair<std::string, std::string>> race_eth;
  {
    CsvTable persons = read_csv(ctx.in("persons.csv"));
    int c_id = persons.require_col("person_id", "persons.csv");
    int c_race = persons.require_col("race", "persons.csv");
    int c_eth = persons.require_col("ethnicity", "persons.csv");
    for (const auto& row : persons.rows)
      race_eth[std::strtoll(row[c_id].c_str(), nullptr, 10)] = {row[c_race], row[c_eth]};
  }

  // Table-1-style comparison between CKD and non-CKD patients
  {
    CsvWriter w(ctx.out("cohort_characteristics.csv"),
                {"variable", "level", "overall", "ckd", "non_ckd", "test", "p_value"});
    auto is_ckd = [](const CohortPatient& p) { return p.window.outcome == Outcome::ckd; };

    auto continuous_row = [&](const std::string& name,
                              auto getter) {
      std::vector<double> all, ckd, non;
      for (const auto& p : cohort) {
        std::optional<double> v = getter(p);
        if (!v) continue;
        all.push_back(*v);
        (is_ckd(p) ? ckd : non).push_back(*v);
      }
      std::string pval;
      if (!ckd.empty() && !non.empty()) pval = fmt_double(ks_two_sample(ckd, non).p_value);
      w.write_row({name, "", median_iqr(all), median_iqr(ckd), median_iqr(non),
                   "kolmogorov_smirnov", pval});
    };
    continuous_row("age_at_encounter", [](const CohortPatient& p) {
      return std::optional<double>(p.covariates.age_at_encounter);
    });
    continuous_row("baseline_cr", [](const CohortPatient& p) {
      return std::optional<double>(p.baseline.value);
    });
    continuous_row("baseline_egfr",
                   [](const CohortPatient& p) { return p.covariates.baseline_egfr; });
    continuous_row("follow_up_days", [](const CohortPatient& p) {
      return std::optional<double>(p.window.length_days());
    });
    for (const auto& var : panel_vars) {
      if (var == "height") continue;
      continuous_row("day1_" + var, [&](const CohortPatient& p) -> std::optional<double> {
        auto it = p.covariates.day1_means.find(var);
        if (it == p.covariates.day1_means.end()) return std::nullopt;
        return it->second;
      });
    }

    auto categorical_var = [&](const std::string& name,
                               auto level_of, const std::vector<std::string>& levels,
                               const std::vector<std::string>& test_levels) {
      std::map<std::string, std::array<size_t, 2>> counts;  // level -> (ckd, non)
      for (const auto& p : cohort) counts[level_of(p)][is_ckd(p) ? 0 : 1]++;
      std::vector<std::vector<int64_t>> table;
      for (const auto& lv : test_levels) {
        auto it = counts.find(lv);
        if (it == counts.end()) continue;
        table.push_back({static_cast<int64_t>(it->second[0]),
                         static_cast<int64_t>(it->second[1])});
      }
      std::string pval;
      if (table.size() >= 2) {
        try {
          pval = fmt_double(chi2_independence(table).p_value);
        } catch (const error&) {
        }
      }
      bool first = true;
      for (const auto& lv : levels) {
        auto it = counts.find(lv);
        size_t c0 = it == counts.end() ? 0 : it->second[0];
        size_t c1 = it == counts.end() ? 0 : it->second[1];
        w.write_row({name, lv, std::to_string(c0 + c1), std::to_string(c0),
                     std::to_string(c1), first ? "chi_squared" : "", first ? pval : ""});
        first = false;
      }
    };
    // the sex test runs on M/F only, excluding unknown
    categorical_var("sex", [](const CohortPatient& p) { return to_string(p.covariates.sex); },
                    {"M", "F", "unknown"}, {"M", "F"});
    {
      std::set<std::string> races, eths;
      for (const auto& p : cohort) {
        races.insert(race_eth[p.person_id].first);
        eths.insert(race_eth[p.person_id].second);
      }
      categorical_var("race",
                      [&](const CohortPatient& p) { return race_eth[p.person_id].first; },
                      {races.begin(), races.end()}, {races.begin(), races.end()});
      categorical_var("ethnicity",
                      [&](const CohortPatient& p) { return race_eth[p.person_id].second; },
                      {eths.begin(), eths.end()}, {eths.begin(), eths.end()});
    }
    std::vector<std::string> flags = kComorbidityFlags;
    for (const auto& f : kMedicationFlags) flags.push_back(f);
    flags.push_back("sepsis_day1");
    for (const auto& f : flags)
      categorical_var(f,
                      [&](const CohortPatient& p) {
                        return std::to_string(p.covariates.flags.at(f));
                      },
                      {"1", "0"}, {"1", "0"});
  }

  // Table-2-style long-format state characterization
  {
    auto cohort_seqs = read_states_csv(ctx.out("states.csv"), cohort);
    CsvTable bands = read_csv(ctx.out("bands.csv"));
    CsvTable ci = read_csv(ctx.out("ci.csv"));
    int k = 0;
    for (const auto& s : cohort_seqs)
      for (const auto& [_, st] : s.steps) k = std::max(k, st + 1);

    CsvWriter w(ctx.out("state_characterization.csv"),
                {"state", "section", "name", "value", "lo", "hi"});
    // per-state size and demographics recomputed from the sequences
    EventLog log = load_input_log(ctx);
    ConceptSets sets;
    Ontology onto;
    load_input_concepts(ctx, sets, onto);
    PrevalenceTable prev = characterize_states(cohort_seqs, log, sets, onto, k,
                                               ctx.cfg.prevalence_threshold);
    for (int s = 0; s < k; ++s) {
      const StateSummary& sum = prev.summary.at(s);
      auto put = [&](const std::string& section, const std::string& name,
                     const std::string& value, const std::string& lo = "",
                     const std::string& hi = "") {
        w.write_row({std::to_string(s), section, name, value, lo, hi});
      };
      put("size", "vectors", std::to_string(sum.vector_count));
      put("size", "patients", std::to_string(sum.patient_count));
      put("demographics", "age_median", fmt_double(sum.age_median),
          fmt_double(sum.age_q25), fmt_double(sum.age_q75));
      for (const auto& [sex, n] : sum.sex_counts)
        put("demographics", "sex_" + sex, std::to_string(n));
      for (const auto& [race, n] : sum.race_counts)
        put("demographics", "race_" + race, std::to_string(n));
      for (const auto& [eth, n] : sum.ethnicity_counts)
        put("demographics", "ethnicity_" + eth, std::to_string(n));
    }
    {
      int c_state = bands.require_col("state", "bands.csv");
      int c_group = bands.require_col("disease_group", "bands.csv");
      int c_prev = bands.require_col("prevalence", "bands.csv");
      int c_band = bands.require_col("band", "bands.csv");
      for (const auto& row : bands.rows)
        w.write_row({row[c_state], "band", row[c_group], row[c_band], row[c_prev], ""});
    }
    {
      int c_h = ci.require_col("horizon_days", "ci.csv");
      int c_from = ci.require_col("from", "ci.csv");
      int c_to = ci.require_col("to", "ci.csv");
      int c_point = ci.require_col("point", "ci.csv");
      int c_lo = ci.require_col("lo", "ci.csv");
      int c_hi = ci.require_col("hi", "ci.csv");
      for (const auto& row : ci.rows) {
        int from = static_cast<int>(std::strtoll(row[c_from].c_str(), nullptr, 10));
        int to = static_cast<int>(std::strtoll(row[c_to].c_str(), nullptr, 10));
        if (from >= k || to != k) continue;  // rows: transient state -> CKD
        double hdays = std::strtod(row[c_h].c_str(), nullptr);
        w.write_row({std::to_string(from), "transition_to_ckd",
                     horizon_label(hdays / 365.25), row[c_point], row[c_lo], row[c_hi]});
      }
    }
  }

  // Figure-3-style plot data
  {
    CsvTable curves = read_csv(ctx.out("ci_curves.csv"));
    int c_h = curves.require_col("horizon_days", "ci_curves.csv");
    int c_from = curves.require_col("from", "ci_curves.csv");
    int c_to = curves.require_col("to", "ci_curves.csv");
    int c_point = curves.require_col("point", "ci_curves.csv");
    int c_lo = curves.require_col("lo", "ci_curves.csv");
    int c_hi = curves.require_col("hi", "ci_curves.csv");
    CsvWriter w(ctx.out("transition_curves.csv"),
                {"time_days", "from", "to", "prob", "lo", "hi"});
    for (const auto& row : curves.rows)
      w.write_row({row[c_h], row[c_from], row[c_to], row[c_point], row[c_lo], row[c_hi]});
  }

  {
    std::ofstream s(ctx.out("summary.txt"));
    s << "trajekt run summary\n";
    s << "cohort: " << cohort.size() << " patients\n";
    size_t n_ckd = 0, n_death = 0, n_cens = 0;
    for (const auto& p : cohort) {
      if (p.window.outcome == Outcome::ckd) ++n_ckd;
      else if (p.window.outcome == Outcome::death) ++n_death;
      else ++n_cens;
    }
    s << "outcomes: ckd=" << n_ckd << " death=" << n_death << " censored=" << n_cens << "\n";
    CsvTable attr = read_csv(ctx.out("attrition.csv"));
    s << "attrition:";
    for (const auto& row : attr.rows) s << " " << row[0] << "=" << row[1];
    s << "\n";
    CsvTable rf = read_csv(ctx.out("risk_factors.csv"));
    int c_padj = rf.require_col("corrected_p_value", "risk_factors.csv");
    size_t sig = 0;
    for (const auto& row : rf.rows)
      if (std::strtod(row[c_padj].c_str(), nullptr) < ctx.cfg.alpha) ++sig;
    s << "risk factors significant at alpha=" << ctx.cfg.alpha << ": " << sig << " of "
      << rf.rows.size() << "\n";
  }
  record_stage(ctx, "report",
               {"cohort.csv", "states.csv", "ci.csv", "ci_curves.csv", "risk_factors.csv"},
               {"cohort_characteristics.csv", "state_characterization.csv",
                "transition_curves.csv", "summary.txt"});
  std::cout << "[report] written to " << ctx.cfg.out_dir << "\n";
}

}  // namespace

void run_pipeline(const PipelineConfig& config, const std::vector<std::string>& stages) {
  config.validate();
  fs::create_directories(config.out_dir);
  Ctx ctx{config};

  std::set<std::string> requested(stages.begin(), stages.end());
  for (const auto& s : requested) {
    if (std::find(pipeline_stage_names().begin(), pipeline_stage_names().end(), s) ==
        pipeline_stage_names().end())
      throw config_error("unknown stage '" + s + "'");
  }
  for (const auto& stage : pipeline_stage_names()) {
    if (!requested.count(stage)) continue;
    try {
      if (stage == "ingest") stage_ingest(ctx);
      else if (stage == "cohort") stage_cohort(ctx);
      else if (stage == "impute") stage_impute(ctx);
      else if (stage == "featurize") stage_featurize(ctx);
      else if (stage == "cluster") stage_cluster(ctx);
      else if (stage == "msm") stage_msm(ctx);
      else if (stage == "cox") stage_cox(ctx);
      else if (stage == "report") stage_report(ctx);
    } catch (const error&) {
      throw;
    } catch (const std::exception& e) {
      throw error("stage '" + stage + "': " + e.what());
    }
  }
}

}  // namespace trajekt
