#pragma once

// GMF rating predictor y = h^T (alpha_i * beta_j) with identity activation,
// trained on per-user-averaged (optionally inverse-propensity weighted)
// squared error.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fbdebias/checkpoint.hpp"
#include "fbdebias/dataset.hpp"
#include "fbdebias/exposure.hpp"
#include "fbdebias/optim.hpp"
#include "fbdebias/tensor.hpp"

namespace fbd {

struct GMFConfig {
  std::size_t dim = 64;  ///< D_r
  double l2 = 0.01;      ///< lambda_r
  double lr = 0.01;
  std::size_t batch = 256;
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  double init_scale = 0.1;
  /// "ones": h starts at 1 so the model starts as plain MF; "gaussian": h is
  /// drawn like alpha and beta, which from a small init tends to stall at the
  /// zero saddle once the l2 term shrinks h.
  std::string h_init = "ones";
  std::uint64_t seed = 0;
  bool verbose = false;

  static GMFConfig simulation() { return {}; }
  static GMFConfig real_data() {
    GMFConfig c;
    c.dim = 32;
    c.l2 = 0.004;
    return c;
  }
};

class GMFModel {
 public:
  GMFModel() = default;
  GMFModel(std::size_t n_users, std::size_t n_items, std::size_t dim);

  std::size_t n_users() const { return params_.values[0].rows(); }
  std::size_t n_items() const { return params_.values[1].rows(); }
  std::size_t dim() const { return params_.values[2].size(); }

  double predict(std::size_t user, std::size_t item) const;
  double predict_clamped(std::size_t user, std::size_t item, const RatingScale& scale) const {
    return scale.clamp(predict(user, item));
  }

  Tensor& alpha() { return params_.values[0]; }
  Tensor& beta() { return params_.values[1]; }
  Tensor& h() { return params_.values[2]; }
  const Tensor& alpha() const { return params_.values[0]; }
  const Tensor& beta() const { return params_.values[1]; }
  const Tensor& h() const { return params_.values[2]; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  Checkpoint to_checkpoint() const;
  static GMFModel from_checkpoint(const Checkpoint& ckpt);

 private:
  ParameterSet params_;  ///< alpha [N, D], beta [M, D], h [D]
};

enum class Rescale { None, MinMax };
Rescale parse_rescale(std::string_view tag);
std::string_view rescale_name(Rescale r);

/// Inverse clipped propensities aligned with the table entries (train
/// events in (user, k) order).
struct IpsWeights {
  std::vector<double> weights;
  double lo = 0.0;
  double hi = 1.0;
  Rescale rescale = Rescale::None;
};

/// Optional min-max rescale of the raw propensities into [lo, hi], then a
/// hard clip to [lo, hi]; weight = 1 / propensity.
IpsWeights clip_propensities(const PropensityTable& table, double lo, double hi, Rescale rescale);

enum class Loss { Squared, Absolute };

struct ScoredEvent {
  std::uint32_t user = 0;
  double prediction = 0.0;
  double truth = 0.0;
};

/// (1/(N M)) sum_i (1/|S_i|) sum_k w_ik delta(y, yhat); |S_i| is the number
/// of events of user i in `events`.
double sips_risk(std::span<const ScoredEvent> events, std::span<const double> weights, std::size_t n_users,
                 std::size_t n_items, Loss loss = Loss::Squared);

/// Per-event training weights: w_ik / |S_i| scaled to mean 1. With no
/// propensities every w is 1.
std::vector<double> event_weights(const SplitDataset& ds, const IpsWeights* ips);

struct TrainEvent {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  double rating = 0.0;
  double weight = 1.0;
};

std::vector<TrainEvent> train_events(const SplitDataset& ds, const IpsWeights* ips);

/// Minibatch objective (1/B) sum_b [r_b (yhat_b - y_b)^2 + l2 (|alpha_i|^2 +
/// |beta_j|^2)] + l2 |h|^2 over the given events; gradient is written to
/// `grads` when non-null.
double gmf_batch_loss(const ParameterSet& params, std::span<const TrainEvent> batch, double l2,
                      std::vector<Tensor>* grads);

struct GMFTrace {
  std::vector<double> train_loss;
  std::vector<double> valid_mse;
  std::size_t best_epoch = 0;
};

/// Adam over shuffled event minibatches with early stopping on unweighted
/// validation MSE. `ips` null trains the naive objective.
GMFModel train_gmf(const SplitDataset& ds, const GMFConfig& cfg, const IpsWeights* ips, GMFTrace* trace = nullptr);

/// Unweighted MSE / MAE of the model on one partition.
struct RatingMetrics {
  double mse = 0.0;
  double mae = 0.0;
  double mse_clamped = 0.0;
  double mae_clamped = 0.0;
  std::size_t events = 0;
};
RatingMetrics evaluate_rating(const GMFModel& model, const SplitDataset& ds, Partition part);

/// The K highest-predicted items not in `exclude`, ties by item index.
std::vector<std::uint32_t> top_k(const GMFModel& model, std::size_t user, std::size_t k,
                                 std::span<const std::uint32_t> exclude);

/// Top-K lists for every user, excluding all items the user has rated.
std::vector<std::vector<std::uint32_t>> recommend_all(const GMFModel& model, const SplitDataset& ds, std::size_t k);

/// Per-item occurrence counts over recommendation lists.
std::vector<double> recommendation_counts(const std::vector<std::vector<std::uint32_t>>& lists, std::size_t n_items);

/// CSV `user,item,prediction` for every event of `part`.
void export_predictions(const GMFModel& model, const SplitDataset& ds, Partition part,
                        const std::filesystem::path& path);

}  // namespace fbd
