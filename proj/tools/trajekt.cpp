#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "trajekt/common.hpp"
#include "trajekt/pipeline.hpp"
#include "trajekt/synth.hpp"

using namespace trajekt;

namespace {

void add_pipeline_flags(CLI::App* cmd, PipelineConfig& cfg, std::string& config_path) {
  cmd->add_option("--config", config_path, "pipeline config JSON (flags override it)");
  cmd->add_option("--input-dir", cfg.input_dir, "directory with the input CSVs");
  cmd->add_option("--out-dir", cfg.out_dir, "artifact directory");
  cmd->add_option("--seed", cfg.seed, "master seed (TRAJEKT_SEED env wins)");
  cmd->add_option("--jobs", cfg.jobs, "worker cap, 0 = all cores");
  cmd->add_option("--k", cfg.k_override, "override the kneedle-proposed cluster count");
  cmd->add_option("--k-min", cfg.k_min, "sweep lower bound");
  cmd->add_option("--k-max", cfg.k_max, "sweep upper bound");
  cmd->add_option("--kneedle-sensitivity", cfg.kneedle_sensitivity, "knee detection S");
  cmd->add_option("--restarts", cfg.restarts, "kmeans restarts per k");
  cmd->add_option("--bootstrap-b", cfg.bootstrap_b, "bootstrap replicates");
  cmd->add_option("--missing-threshold", cfg.missing_threshold,
                  "drop columns with missing fraction above this");
  cmd->add_option("--knn-k", cfg.knn_k, "neighbors for categorical imputation");
  cmd->add_option("--softimpute-lambda", cfg.softimpute_lambda,
                  "nuclear-norm penalty (<0 selects sigma_max/50)");
  cmd->add_option("--d1", cfg.d1, "code embedding dimension");
  cmd->add_option("--d2", cfg.d2, "series embedding dimension");
  cmd->add_option("--embedding-code", cfg.embedding_code_file,
                  "external code embedding CSV");
  cmd->add_option("--embedding-series", cfg.embedding_series_file,
                  "external series embedding CSV");
  cmd->add_flag("--allow-fallback", cfg.allow_fallback,
                "fill missing external embeddings with the builtin featurizer");
  cmd->add_option("--ties", cfg.ties, "cox ties handling")
      ->check(CLI::IsMember({"efron", "breslow"}));
  cmd->add_option("--weights", cfg.weights, "cox weight template")
      ->check(CLI::IsMember({"ahr", "unit"}));
  cmd->add_option("--competing", cfg.competing, "competing-risk handling")
      ->check(CLI::IsMember({"cause_specific", "exclude_deaths"}));
  cmd->add_option("--alpha", cfg.alpha, "two-sided significance level");
  cmd->add_option("--min-subpop", cfg.min_subpop, "minimum subpopulation size");
  cmd->add_option("--prevalence-threshold", cfg.prevalence_threshold,
                  "condition prevalence cutoff for state characterization");
  cmd->add_option("--transition-prevalence", cfg.transition_prevalence_threshold,
                  "prevalence cutoff for analyzed subpopulations");
}

// flags must win over the config file, so reparse after loading it
PipelineConfig resolve_config(const std::string& config_path, CLI::App* cmd,
                              const PipelineConfig& flag_values) {
  if (config_path.empty()) return flag_values;
  PipelineConfig cfg = load_pipeline_config(config_path);
  auto take = [&](const std::string& flag, auto member) {
    if (cmd->count(flag) > 0) cfg.*member = flag_values.*member;
  };
  take("--input-dir", &PipelineConfig::input_dir);
  take("--out-dir", &PipelineConfig::out_dir);
  take("--seed", &PipelineConfig::seed);
  take("--jobs", &PipelineConfig::jobs);
  take("--k", &PipelineConfig::k_override);
  take("--k-min", &PipelineConfig::k_min);
  take("--k-max", &PipelineConfig::k_max);
  take("--kneedle-sensitivity", &PipelineConfig::kneedle_sensitivity);
  take("--restarts", &PipelineConfig::restarts);
  take("--bootstrap-b", &PipelineConfig::bootstrap_b);
  take("--missing-threshold", &PipelineConfig::missing_threshold);
  take("--knn-k", &PipelineConfig::knn_k);
  take("--softimpute-lambda", &PipelineConfig::softimpute_lambda);
  take("--d1", &PipelineConfig::d1);
  take("--d2", &PipelineConfig::d2);
  take("--embedding-code", &PipelineConfig::embedding_code_file);
  take("--embedding-series", &PipelineConfig::embedding_series_file);
  take("--allow-fallback", &PipelineConfig::allow_fallback);
  take("--ties", &PipelineConfig::ties);
  take("--weights", &PipelineConfig::weights);
  take("--competing", &PipelineConfig::competing);
  take("--alpha", &PipelineConfig::alpha);
  take("--min-subpop", &PipelineConfig::min_subpop);
  take("--prevalence-threshold", &PipelineConfig::prevalence_threshold);
  take("--transition-prevalence", &PipelineConfig::transition_prevalence_threshold);
  if (const char* env = std::getenv("TRAJEKT_SEED")) cfg.seed = std::strtoull(env, nullptr, 10);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trajekt: acute-to-chronic disease progression analytics"};
  app.require_subcommand(1);

  PipelineConfig cfg;
  if (const char* env = std::getenv("TRAJEKT_SEED")) cfg.seed = std::strtoull(env, nullptr, 10);
  std::string config_path;
  std::string stages_arg = "all";

  auto* run = app.add_subcommand("run", "run pipeline stages in order");
  add_pipeline_flags(run, cfg, config_path);
  run->add_option("--stages", stages_arg,
                  "comma-separated subset of "
                  "ingest,cohort,impute,featurize,cluster,msm,cox,report");

  // every stage is also a standalone subcommand
  std::vector<CLI::App*> stage_cmds;
  for (const auto& name : pipeline_stage_names()) {
    auto* cmd = app.add_subcommand(name, "run the " + name + " stage");
    add_pipeline_flags(cmd, cfg, config_path);
    stage_cmds.push_back(cmd);
  }

  std::string synth_config_path, synth_out_dir = "data";
  uint64_t synth_seed = 0;
  bool synth_seed_set = false;
  auto* simulate = app.add_subcommand("simulate", "generate a synthetic cohort bundle");
  simulate->add_option("--synth-config", synth_config_path, "synth config JSON")->required();
  simulate->add_option("--out", synth_out_dir, "output directory");
  simulate->add_option("--seed", synth_seed, "override the config seed")
      ->each([&](const std::string&) { synth_seed_set = true; });

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) {
      SynthConfig sc = load_synth_config(synth_config_path);
      if (synth_seed_set) sc.seed = synth_seed;
      SynthResult result = generate_cohort(sc);
      write_synth_bundle(result, synth_out_dir);
      size_t n_ckd = 0, n_death = 0;
      for (const auto& p : result.truth.patients) {
        if (p.terminal_state == sc.ckd_state()) ++n_ckd;
        if (p.terminal_state == sc.death_state()) ++n_death;
      }
      std::cout << "[simulate] patients=" << sc.n_patients << " ckd=" << n_ckd
                << " death=" << n_death << " -> " << synth_out_dir << "\n";
      return 0;
    }

    if (run->parsed()) {
      PipelineConfig resolved = resolve_config(config_path, run, cfg);
      std::vector<std::string> stages;
      if (stages_arg == "all")
        stages = pipeline_stage_names();
      else
        for (auto& s : split(stages_arg, ',')) stages.push_back(trim(s));
      run_pipeline(resolved, stages);
      return 0;
    }

    for (size_t i = 0; i < stage_cmds.size(); ++i) {
      if (stage_cmds[i]->parsed()) {
        PipelineConfig resolved = resolve_config(config_path, stage_cmds[i], cfg);
        run_pipeline(resolved, {pipeline_stage_names()[i]});
        return 0;
      }
    }
  } catch (const error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
