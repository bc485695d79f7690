#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fbdebias/checkpoint.hpp"
#include "fbdebias/dataset.hpp"
#include "fbdebias/metrics.hpp"
#include "fbdebias/tensor.hpp"

namespace fbd {

/// Next-item exposure distribution for a user given the rating history.
class ExposureModel {
 public:
  virtual ~ExposureModel() = default;
  virtual std::string tag() const = 0;
  virtual std::size_t n_items() const = 0;
  virtual std::vector<double> predict(std::size_t user, std::span<const RatedEvent> history) const = 0;
  /// Distributions for every step t >= first of `sequence`, each conditioned
  /// on sequence[0, t). Same result as calling predict() on each prefix.
  virtual std::vector<std::vector<double>> predict_steps(std::size_t user, std::span<const RatedEvent> sequence,
                                                         std::size_t first) const;
  virtual Checkpoint to_checkpoint() const = 0;
};

struct PropensityEntry {
  std::uint32_t user = 0;
  std::uint32_t k = 0;  ///< 1-based order within the user's train events
  std::uint32_t item = 0;
  double propensity = 0.0;

  friend bool operator==(const PropensityEntry&, const PropensityEntry&) = default;
};

struct PropensityTable {
  std::string model;
  std::vector<PropensityEntry> entries;

  /// Exactly one entry per train event of `ds`, in (user, k) order, with
  /// propensities in (0, 1].
  void validate_against(const SplitDataset& ds) const;
};

void save_propensities(const PropensityTable& table, const std::filesystem::path& path);
PropensityTable load_propensities(const std::filesystem::path& path);

// ---------------------------------------------------------------- Pop

class PopModel final : public ExposureModel {
 public:
  explicit PopModel(std::vector<double> probs) : probs_(std::move(probs)) {}
  std::string tag() const override { return "pop"; }
  std::size_t n_items() const override { return probs_.size(); }
  std::vector<double> predict(std::size_t user, std::span<const RatedEvent> history) const override;
  Checkpoint to_checkpoint() const override;
  static PopModel from_checkpoint(const Checkpoint& ckpt);

  const std::vector<double>& probabilities() const { return probs_; }

 private:
  std::vector<double> probs_;
};

/// Share of users exposed to each item in the train partition, normalized;
/// items never exposed get the floor 1/(n_users n_items) before normalizing.
PopModel train_pop(const SplitDataset& ds);

// ---------------------------------------------------------------- PF

struct PFConfig {
  std::size_t factors = 16;
  std::size_t max_iters = 200;
  double tolerance = 1e-5;
  double user_shape = 0.3, user_rate = 0.3;
  double item_shape = 0.3, item_rate = 0.3;
  std::uint64_t seed = 0;
};

/// Gamma-Poisson factorization of the binary train exposure matrix with
/// mean-field Gamma posteriors.
class PFModel final : public ExposureModel {
 public:
  PFModel() = default;
  std::string tag() const override { return "pf"; }
  std::size_t n_items() const override { return beta_shape.rows(); }
  std::vector<double> predict(std::size_t user, std::span<const RatedEvent> history) const override;
  Checkpoint to_checkpoint() const override;
  static PFModel from_checkpoint(const Checkpoint& ckpt);

  /// Posterior mean rate theta_u . beta_j.
  double rate(std::size_t user, std::size_t item) const;

  Tensor theta_shape, theta_rate;  ///< n_users x K
  Tensor beta_shape, beta_rate;    ///< n_items x K
  std::vector<double> elbo_trace;
};

PFModel train_pf(const SplitDataset& ds, const PFConfig& cfg);

// ---------------------------------------------------------------- shared

/// P(k-th train item | train prefix) from a model's predict().
PropensityTable static_propensities(const ExposureModel& model, const SplitDataset& ds);

struct ExposureMetrics {
  double nll = 0.0;
  double recall = 0.0;
  double ndcg = 0.0;
  std::size_t events = 0;
};

/// Scores each event of `target` (validation or exposure_test) against the
/// full preceding biased sequence, with that history excluded from the
/// candidates.
std::vector<ExposureEval> exposure_evals(const ExposureModel& model, const SplitDataset& ds, Partition target);
ExposureMetrics evaluate_exposure(const ExposureModel& model, const SplitDataset& ds, Partition target,
                                  std::size_t k = 50);

}  // namespace fbd
