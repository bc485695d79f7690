#pragma once

// Experiment orchestration: JSON configuration, per-world pipeline (data,
// exposure models, propensities, rating runs), grid search and reports.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fbdebias/dataset.hpp"
#include "fbdebias/dynamic.hpp"
#include "fbdebias/exposure.hpp"
#include "fbdebias/rating.hpp"
#include "fbdebias/simulator.hpp"
#include "json.hpp"

namespace fbd {

using nlohmann::json;

std::string version_tag();

// Strict JSON <-> config conversion: unknown keys are errors, missing keys
// keep their defaults.
json to_json(const SimConfig& c);
json to_json(const PFConfig& c);
json to_json(const DynamicConfig& c);
json to_json(const GMFConfig& c);
void update_from_json(SimConfig& c, const json& j);
void update_from_json(PFConfig& c, const json& j);
void update_from_json(DynamicConfig& c, const json& j);
void update_from_json(GMFConfig& c, const json& j);

/// Cartesian product of `grid` (key -> array of values) applied on top of
/// `base`. An empty grid yields {base}.
std::vector<json> expand_grid(const json& base, const json& grid);

struct ClipGrid {
  std::vector<double> lo{0.001, 0.005, 0.01};
  std::vector<double> hi{0.05, 0.1, 1.0};
  Rescale rescale = Rescale::MinMax;
};

struct DataSource {
  std::string kind = "simulate";  ///< simulate | movielens | goodreads | canonical
  std::string path;
  std::string movies_path;        ///< optional Movielens movies.csv for genres
  std::string period_start, period_end;
  std::size_t sample_users = 10000;
};

struct ExperimentConfig {
  DataSource source;
  SimConfig sim;
  std::vector<std::string> exposure_models{"pop", "pf", "dynamic"};
  PFConfig pf;
  DynamicConfig dynamic;
  json dynamic_grid = json::object();
  /// naive | pop | pf | dynamic | true (simulation only)
  std::vector<std::string> rating_methods{"naive", "pop", "pf", "dynamic"};
  GMFConfig gmf;
  json gmf_grid = json::object();
  ClipGrid clip;
  std::size_t rating_runs = 10;
  std::size_t top_k = 10;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir;
  std::size_t threads = 0;  ///< 0: hardware concurrency
  bool verbose = false;

  void validate() const;
};

json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_from_json(const json& j);

/// Dataset for one world/seed; `sim` receives the simulation record when the
/// source is the simulator.
SplitDataset load_source(const ExperimentConfig& cfg, std::uint64_t seed, SimulationResult* sim);

/// Propensities actually used by the simulator for the train events.
PropensityTable true_propensity_table(const SimulationResult& sim);

struct ExposureOutcome {
  std::string model;
  ExposureMetrics validation;
  ExposureMetrics test;
  json selected;  ///< chosen hyperparameters
  PropensityTable propensities;
};

struct RatingRun {
  RatingMetrics unbiased;
  double gini = 0.0;
  std::optional<double> avg_dissimilarity;
};

struct RatingOutcome {
  std::string method;
  std::optional<IpsWeights> clip;  ///< bounds chosen on validation (weights cleared)
  double validation_mse = 0.0;
  std::vector<RatingRun> runs;
};

struct WorldResult {
  std::uint64_t seed = 0;
  std::vector<ExposureOutcome> exposure;
  std::vector<RatingOutcome> rating;
  double exposure_seconds = 0.0;  ///< wall clock of the exposure phase
  double rating_seconds = 0.0;

  const ExposureOutcome& exposure_of(const std::string& model) const;
  const RatingOutcome& rating_of(const std::string& method) const;
};

/// Train one exposure model; the dynamic model is grid-searched on
/// validation NLL. `selected` receives the chosen hyperparameters.
std::unique_ptr<ExposureModel> train_exposure_model(const ExperimentConfig& cfg, const SplitDataset& ds,
                                                    const std::string& model, std::uint64_t seed,
                                                    json* selected = nullptr);

/// Propensities of the train events under a fitted model (posterior for the
/// dynamic model, predictive for static ones).
PropensityTable model_propensities(const ExposureModel& model, const SplitDataset& ds);

/// Trains, evaluates and extracts propensities for one exposure model.
ExposureOutcome fit_exposure(const ExperimentConfig& cfg, const SplitDataset& ds, const std::string& model,
                             std::uint64_t seed);

/// Chooses clip bounds by validation MSE of a GMF trained with each.
IpsWeights select_clip(const SplitDataset& ds, const PropensityTable& table, const ClipGrid& grid,
                       const GMFConfig& gmf, std::size_t threads, double* best_mse = nullptr);

WorldResult run_world(const ExperimentConfig& cfg, std::uint64_t seed);

struct MetricRecord {
  std::string metric, split, model;
  std::uint64_t seed = 0;
  std::int64_t run = -1;  ///< -1 for per-world metrics
  double value = 0.0;
};

struct Aggregate {
  std::string metric, split, model;
  double mean = 0.0, std = 0.0;
  std::size_t n = 0;
};

struct RunReport {
  json config;
  std::string version;
  std::vector<MetricRecord> records;
  std::vector<Aggregate> aggregates;
};

std::vector<MetricRecord> world_records(const WorldResult& w);
/// Mean and sample standard deviation per (metric, split, model).
std::vector<Aggregate> aggregate(const std::vector<MetricRecord>& records);

RunReport run_experiment(const ExperimentConfig& cfg);
json report_to_json(const RunReport& r);
/// Throws Parse when the aggregates do not match a recomputation from the
/// records.
RunReport report_from_json(const json& j);
/// `metric,split,model,mean,std,n` rows.
std::string report_to_csv(const RunReport& r);

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first
/// error.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace fbd
