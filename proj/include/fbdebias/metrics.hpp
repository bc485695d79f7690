#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace fbd {

/// One next-item prediction reduced to what the exposure metrics need: the
/// probability of the true item after renormalizing over the candidate set,
/// and its 1-based rank among candidates (ties broken by item index).
struct ExposureEval {
  double probability = 0.0;
  std::size_t rank = 0;
};

/// Candidates are all items not listed in `excluded` (the user's history).
ExposureEval make_exposure_eval(std::span<const double> probs, std::uint32_t true_item,
                                std::span<const std::uint32_t> excluded);

double nll(std::span<const ExposureEval> evals);
double recall_at_k(std::span<const ExposureEval> evals, std::size_t k);
/// Single relevant item per event, so IDCG = 1.
double ndcg_at_k(std::span<const ExposureEval> evals, std::size_t k);

double mse(std::span<const double> preds, std::span<const double> truths);
double mae(std::span<const double> preds, std::span<const double> truths);

/// Gini coefficient of per-item recommendation counts.
double gini(std::span<const double> popularity);

/// Mean over lists of the mean pairwise cosine dissimilarity within a list.
double avg_dissimilarity(const std::vector<std::vector<std::uint32_t>>& lists,
                         const std::vector<std::vector<double>>& features);

}  // namespace fbd
