#pragma once

#include <string>
#include <vector>

#include "trajekt/common.hpp"

namespace trajekt {

struct PipelineConfig {
  std::string input_dir = "data";
  std::string out_dir = "out";
  uint64_t seed = 42;

  int k_min = 3;
  int k_max = 40;
  int k_override = -1;  // > 0 wins over the kneedle proposal
  double kneedle_sensitivity = 1.0;
  int restarts = 10;

  int bootstrap_b = 200;
  std::vector<double> horizons_years = {0.5, 1.0, 3.0, 5.0, 10.0};
  double curve_years = 5.0;       // plot-data horizon
  double curve_step_days = 30.0;

  double prevalence_threshold = 0.20;
  double transition_prevalence_threshold = 0.05;
  double missing_threshold = 0.5;
  double alpha = 0.05;
  double collinearity_threshold = 0.7;
  int knn_k = 5;
  double softimpute_lambda = -1.0;

  int d1 = 64;
  int d2 = 10;
  std::string embedding_code_file;
  std::string embedding_series_file;
  bool allow_fallback = false;

  std::string competing = "cause_specific";  // or exclude_deaths
  std::string ties = "efron";                // or breslow
  std::string weights = "ahr";               // or unit
  size_t min_subpop = 50;

  int jobs = 0;

  void validate() const;
};

PipelineConfig load_pipeline_config(const std::string& path);

// canonical stage order
const std::vector<std::string>& pipeline_stage_names();

// Executes the requested stages in pipeline order. Missing upstream
// artifacts raise stage_error; every stage appends a manifest entry with
// input hashes, seed and version.
void run_pipeline(const PipelineConfig& config, const std::vector<std::string>& stages);

inline void run_pipeline(const PipelineConfig& config) {
  run_pipeline(config, pipeline_stage_names());
}

}  // namespace trajekt
