#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fbdebias/dataset.hpp"
#include "fbdebias/rng.hpp"
#include "fbdebias/tensor.hpp"

namespace fbd {

struct SimConfig {
  std::size_t n_users = 3000;
  std::size_t n_items = 1000;
  std::size_t latent_dim = 10;
  /// Symmetric Dirichlet concentrations of the population means.
  double dirichlet_user_conc = 20.0;
  double dirichlet_item_conc = 100.0;
  /// Per-user / per-item Dirichlet concentration = scale * population mean.
  double user_conc_scale = 100.0;
  double item_conc_scale = 1000.0;
  double rating_variance = 0.01;
  double similarity_noise_variance = 0.01;
  std::size_t top_rank = 100;
  double boost_factor = 10.0;
  std::size_t n_rounds = 30;
  std::size_t train_rounds = 20;
  std::size_t validation_rounds = 5;
  std::size_t n_unbiased = 20;
  double rating_max = 10.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SimWorld {
  SimConfig config;
  Tensor alpha;             ///< n_users x latent_dim, simplex rows
  Tensor beta;              ///< n_items x latent_dim, simplex rows
  Tensor similarity;        ///< n_items x n_items, beta beta^T
  Tensor noisy_similarity;  ///< the recommender's fixed estimate
  Tensor ratings;           ///< n_users x n_items in [0, rating_max]
  /// Beta draws whose variance had to be shrunk to 0.9 m(1-m).
  std::size_t clamped_variance_count = 0;
};

/// Beta draw with the given mean and variance; infeasible variances are
/// clamped to 0.9 m(1-m) and counted in `*clamped`.
double sample_beta_moments(Rng& rng, double mean, double var, std::size_t* clamped);

SimWorld generate_world(const SimConfig& cfg);

/// Item-based CF score: similarity-weighted mean of the history ratings.
/// Empty history gives a constant vector; a zero denominator gives 0.
std::vector<double> cf_scores(std::span<const RatedEvent> history, const Tensor& noisy_similarity);

/// Exposure categorical: unrated items ranked by score (descending, ties by
/// index); the top `top_rank` get weight boost_factor, the rest 1, rated 0.
std::vector<double> exposure_distribution(std::span<const double> scores, std::span<const std::uint32_t> already_rated,
                                          const SimConfig& cfg);

std::uint32_t sample_categorical(Rng& rng, std::span<const double> probs);

/// Compact exact record of one sampling step.
struct RoundExposure {
  std::vector<std::uint32_t> boosted;
  double normalizer = 0.0;
  std::uint32_t chosen = 0;
  double chosen_probability = 0.0;
};

struct SimulationResult {
  SplitDataset dataset;
  /// [user][round], rounds in sequence order.
  std::vector<std::vector<RoundExposure>> exposures;
  double boost_factor = 1.0;

  double true_propensity(std::size_t user, std::size_t round) const {
    return exposures[user][round].chosen_probability;
  }
  /// Full categorical used at (user, round), rebuilt from the compact record.
  std::vector<double> true_categorical(std::size_t user, std::size_t round) const;
};

SimulationResult simulate_interactions(const SimWorld& world);

/// Sidecar text `user<TAB>k<TAB>item<TAB>true_propensity` (k is 1-based).
void save_true_propensities(const SimulationResult& sim, const std::filesystem::path& path);

}  // namespace fbd
