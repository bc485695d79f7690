#include "fbdebias/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fbdebias/error.hpp"

namespace fbd {

ExposureEval make_exposure_eval(std::span<const double> probs, std::uint32_t true_item,
                                std::span<const std::uint32_t> excluded) {
  if (true_item >= probs.size()) fail(ErrorCode::InvalidArgument, "exposure eval: true item out of range");
  std::vector<bool> out(probs.size(), false);
  for (auto j : excluded) {
    if (j >= probs.size()) fail(ErrorCode::InvalidArgument, "exposure eval: excluded item out of range");
    out[j] = true;
  }
  if (out[true_item]) fail(ErrorCode::InvalidArgument, "exposure eval: true item is not a candidate");
  const double pt = probs[true_item];
  double total = 0.0;
  std::size_t ahead = 0;
  for (std::uint32_t j = 0; j < probs.size(); ++j) {
    if (out[j]) continue;
    total += probs[j];
    if (probs[j] > pt || (probs[j] == pt && j < true_item)) ++ahead;
  }
  ExposureEval e;
  e.probability = total > 0.0 ? pt / total : 0.0;
  e.rank = ahead + 1;
  return e;
}

double nll(std::span<const ExposureEval> evals) {
  if (evals.empty()) fail(ErrorCode::InvalidArgument, "nll: no events");
  double s = 0.0;
  for (const auto& e : evals) {
    if (!(e.probability > 0.0)) fail(ErrorCode::Numeric, "nll: zero probability on a true item (floor upstream)");
    s -= std::log(e.probability);
  }
  return s / static_cast<double>(evals.size());
}

double recall_at_k(std::span<const ExposureEval> evals, std::size_t k) {
  if (k == 0) fail(ErrorCode::InvalidArgument, "recall_at_k: K must be >= 1");
  if (evals.empty()) fail(ErrorCode::InvalidArgument, "recall_at_k: no events");
  std::size_t hits = 0;
  for (const auto& e : evals) hits += e.rank <= k ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(evals.size());
}

double ndcg_at_k(std::span<const ExposureEval> evals, std::size_t k) {
  if (k == 0) fail(ErrorCode::InvalidArgument, "ndcg_at_k: K must be >= 1");
  if (evals.empty()) fail(ErrorCode::InvalidArgument, "ndcg_at_k: no events");
  double s = 0.0;
  for (const auto& e : evals)
    if (e.rank <= k) s += 1.0 / std::log2(static_cast<double>(e.rank) + 1.0);
  return s / static_cast<double>(evals.size());
}

namespace {

void check_pairs(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size())
    fail(ErrorCode::InvalidArgument, std::string(what) + ": length mismatch (" + std::to_string(a.size()) + " vs " +
                                         std::to_string(b.size()) + ")");
  if (a.empty()) fail(ErrorCode::InvalidArgument, std::string(what) + ": no pairs");
}

}  // namespace

double mse(std::span<const double> preds, std::span<const double> truths) {
  check_pairs(preds, truths, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += (preds[i] - truths[i]) * (preds[i] - truths[i]);
  return s / static_cast<double>(preds.size());
}

double mae(std::span<const double> preds, std::span<const double> truths) {
  check_pairs(preds, truths, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - truths[i]);
  return s / static_cast<double>(preds.size());
}

double gini(std::span<const double> popularity) {
  std::vector<double> p(popularity.begin(), popularity.end());
  std::sort(p.begin(), p.end());
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  if (!(total > 0.0)) fail(ErrorCode::InvalidArgument, "gini: all counts are zero");
  const double M = static_cast<double>(p.size());
  double s = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) s += (2.0 * static_cast<double>(j + 1) - M - 1.0) * p[j];
  return s / (M * total);
}

double avg_dissimilarity(const std::vector<std::vector<std::uint32_t>>& lists,
                         const std::vector<std::vector<double>>& features) {
  if (lists.empty()) fail(ErrorCode::InvalidArgument, "avg_dissimilarity: no lists");
  std::vector<double> norms(features.size(), -1.0);
  auto norm_of = [&](std::uint32_t j) {
    if (j >= features.size()) fail(ErrorCode::InvalidArgument, "avg_dissimilarity: item " + std::to_string(j) + " has no features");
    if (norms[j] < 0.0) {
      double s = 0.0;
      for (double x : features[j]) s += x * x;
      norms[j] = std::sqrt(s);
      if (!(norms[j] > 0.0))
        fail(ErrorCode::InvalidArgument, "avg_dissimilarity: item " + std::to_string(j) + " has a zero-norm vector");
    }
    return norms[j];
  };
  double total = 0.0;
  for (const auto& list : lists) {
    if (list.size() < 2) fail(ErrorCode::InvalidArgument, "avg_dissimilarity: lists need at least 2 items");
    double s = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < list.size(); ++a)
      for (std::size_t b = a + 1; b < list.size(); ++b) {
        const auto& fa = features[list[a]];
        const auto& fb = features[list[b]];
        if (fa.size() != fb.size()) fail(ErrorCode::InvalidArgument, "avg_dissimilarity: feature lengths differ");
        double dot = 0.0;
        for (std::size_t d = 0; d < fa.size(); ++d) dot += fa[d] * fb[d];
        s += 1.0 - dot / (norm_of(list[a]) * norm_of(list[b]));
        ++pairs;
      }
    total += s / static_cast<double>(pairs);
  }
  return total / static_cast<double>(lists.size());
}

}  // namespace fbd
