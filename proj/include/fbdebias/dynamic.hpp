#pragma once

// Sequential exposure model. A GRU summarizes the rating history; each step
// draws the next item from softmax(W_pi [v, u_k] + b_pi) where v is a static
// per-user latent with a N(0, I) prior and u_k a dynamic latent whose prior
// mean/variance come from the GRU state. Inference networks give q(v) from
// the mean-pooled (item, rating) events and q(u_k) from [h_k, item_k, v].

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fbdebias/autodiff.hpp"
#include "fbdebias/exposure.hpp"
#include "fbdebias/rng.hpp"

namespace fbd {

struct DynamicConfig {
  std::size_t embed_dim = 32;   ///< D_e: latent and embedding width
  std::size_t hidden_dim = 32;  ///< D_gru
  double l2 = 1e-4;             ///< lambda_e
  double lr = 1e-3;
  std::size_t batch_users = 32;
  std::size_t max_epochs = 40;
  std::size_t patience = 5;
  double variance_floor = 1e-8;
  double init_scale = 0.1;
  /// Initial bias of every log-variance head.
  double init_logvar = 0.0;
  /// Gradient shards per minibatch. Reduction order is fixed, so results do
  /// not depend on how many hardware threads run the shards.
  std::size_t shards = 4;
  std::uint64_t seed = 0;
  /// false: train on the latent means (zero reparameterization noise).
  bool stochastic = true;
  bool verbose = false;
};

/// Standard-normal draws for one ELBO evaluation.
struct ElboNoise {
  Tensor v;                 ///< [embed_dim]
  std::vector<Tensor> u;    ///< one [embed_dim] per step

  static ElboNoise zeros(std::size_t steps, std::size_t dim);
  static ElboNoise sample(Rng& rng, std::size_t steps, std::size_t dim);
};

struct ElboTerms {
  double elbo = 0.0;
  double kl_v = 0.0;
  std::vector<double> kl_u;      ///< per step
  std::vector<double> log_prob;  ///< log pi_{s_k}(v, u_k) per step
};

struct TrainingTrace {
  std::vector<double> train_elbo;  ///< mean per-user ELBO per epoch
  std::vector<double> valid_nll;
  std::size_t best_epoch = 0;
};

class DynamicModel final : public ExposureModel {
 public:
  DynamicModel(std::size_t n_items, const DynamicConfig& cfg);

  std::string tag() const override { return "dynamic"; }
  std::size_t n_items() const override { return n_items_; }

  /// Generative next-item distribution: v = posterior mean from the history
  /// events, u = prior mean from the GRU state after the history.
  std::vector<double> predict(std::size_t user, std::span<const RatedEvent> history) const override;
  std::vector<std::vector<double>> predict_steps(std::size_t user, std::span<const RatedEvent> sequence,
                                                 std::size_t first) const override;

  /// ELBO of one sequence under fixed noise. When `grads` is given, adds
  /// d(scale * ELBO)/d(params) into it.
  ElboTerms elbo(std::span<const RatedEvent> sequence, const ElboNoise& noise, std::vector<Tensor>* grads = nullptr,
                 double scale = 1.0) const;

  /// Posterior-mean propensities pi_{s_k}(mu_v, mu_u^k) of every event.
  std::vector<double> posterior_propensities(std::span<const RatedEvent> sequence) const;

  Checkpoint to_checkpoint() const override;
  static DynamicModel from_checkpoint(const Checkpoint& ckpt);

  const DynamicConfig& config() const { return cfg_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// Ratings enter the network standardized with train-split moments.
  void set_rating_moments(double mean, double sd);
  double standardize(double rating) const { return (rating - rating_mean_) / rating_sd_; }

 private:
  struct Graph;
  Graph bind(ad::Tape& tape, std::vector<Tensor>* grads) const;
  ad::Var event_input(ad::Tape& tape, const Graph& g, std::uint32_t item, double rating) const;

  std::size_t n_items_;
  DynamicConfig cfg_;
  ParameterSet params_;
  double rating_mean_ = 0.0;
  double rating_sd_ = 1.0;
};

/// Adam on the mean per-user ELBO of the train partition minus
/// l2 * ||theta||^2, early-stopped on validation NLL; returns the
/// best-validation parameters.
DynamicModel train_dynamic(const SplitDataset& ds, const DynamicConfig& cfg, TrainingTrace* trace = nullptr);

/// Algorithm-style propensities from posterior means for every train event.
PropensityTable estimate_propensities(const DynamicModel& model, const SplitDataset& ds);

}  // namespace fbd
