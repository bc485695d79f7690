#include "fbdebias/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "fbdebias/error.hpp"

namespace fbd {

namespace {

constexpr std::uint64_t kWorldStream = 0x5eed0001;
constexpr std::uint64_t kUserStreamBase = 0x5eed1000;

}  // namespace

void SimConfig::validate() const {
  if (n_users == 0 || n_items == 0 || latent_dim == 0) fail(ErrorCode::InvalidArgument, "sim: counts must be positive");
  if (n_rounds == 0 || n_rounds + n_unbiased > n_items)
    fail(ErrorCode::InvalidArgument, "sim: n_rounds + n_unbiased must not exceed n_items");
  if (train_rounds == 0 || train_rounds + validation_rounds > n_rounds)
    fail(ErrorCode::InvalidArgument, "sim: train/validation rounds exceed n_rounds");
  if (!(dirichlet_user_conc > 0 && dirichlet_item_conc > 0 && user_conc_scale > 0 && item_conc_scale > 0))
    fail(ErrorCode::InvalidArgument, "sim: Dirichlet concentrations must be positive");
  if (!(rating_variance > 0 && similarity_noise_variance > 0))
    fail(ErrorCode::InvalidArgument, "sim: variances must be positive");
  if (!(boost_factor >= 1.0)) fail(ErrorCode::InvalidArgument, "sim: boost_factor must be >= 1");
  if (!(rating_max > 0.0)) fail(ErrorCode::InvalidArgument, "sim: rating_max must be positive");
}

double sample_beta_moments(Rng& rng, double mean, double var, std::size_t* clamped) {
  const double limit = mean * (1.0 - mean);
  if (var >= limit) {
    var = 0.9 * limit;
    if (clamped) ++*clamped;
  }
  return sample_beta(rng, beta_shape_from_moments(mean, var));
}

namespace {

Tensor simplex_rows(Rng& rng, std::size_t rows, std::span<const double> mean, double scale) {
  std::vector<double> conc(mean.begin(), mean.end());
  for (double& c : conc) c *= scale;
  Tensor out(Shape{rows, mean.size()});
  for (std::size_t r = 0; r < rows; ++r) {
    const auto draw = sample_dirichlet(rng, conc);
    std::copy(draw.begin(), draw.end(), out.row(r).begin());
  }
  return out;
}

double row_dot(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  auto x = a.row(i);
  auto y = b.row(j);
  double s = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) s += x[d] * y[d];
  return s;
}

}  // namespace

SimWorld generate_world(const SimConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, kWorldStream));
  SimWorld w;
  w.config = cfg;
  const std::size_t K = cfg.latent_dim;

  const auto mu_alpha = sample_dirichlet(rng, std::vector<double>(K, cfg.dirichlet_user_conc));
  const auto mu_beta = sample_dirichlet(rng, std::vector<double>(K, cfg.dirichlet_item_conc));
  w.alpha = simplex_rows(rng, cfg.n_users, mu_alpha, cfg.user_conc_scale);
  w.beta = simplex_rows(rng, cfg.n_items, mu_beta, cfg.item_conc_scale);

  w.ratings = Tensor(Shape{cfg.n_users, cfg.n_items});
  for (std::size_t i = 0; i < cfg.n_users; ++i)
    for (std::size_t j = 0; j < cfg.n_items; ++j) {
      const double mean = row_dot(w.alpha, i, w.beta, j);
      w.ratings.at(i, j) = cfg.rating_max * sample_beta_moments(rng, mean, cfg.rating_variance, &w.clamped_variance_count);
    }

  // Both matrices are kept symmetric: one draw per unordered pair.
  const std::size_t M = cfg.n_items;
  w.similarity = Tensor(Shape{M, M});
  w.noisy_similarity = Tensor(Shape{M, M});
  for (std::size_t a = 0; a < M; ++a)
    for (std::size_t b = a; b < M; ++b) {
      const double s = row_dot(w.beta, a, w.beta, b);
      const double noisy = sample_beta_moments(rng, s, cfg.similarity_noise_variance, &w.clamped_variance_count);
      w.similarity.at(a, b) = w.similarity.at(b, a) = s;
      w.noisy_similarity.at(a, b) = w.noisy_similarity.at(b, a) = noisy;
    }
  return w;
}

std::vector<double> cf_scores(std::span<const RatedEvent> history, const Tensor& noisy_similarity) {
  const std::size_t M = noisy_similarity.rows();
  std::vector<double> num(M, 0.0), den(M, 0.0);
  for (const auto& e : history) {
    if (e.item >= M) fail(ErrorCode::InvalidArgument, "cf_scores: history item out of range");
    for (std::size_t j = 0; j < M; ++j) {
      const double s = noisy_similarity.at(j, e.item);
      num[j] += s * e.rating;
      den[j] += s;
    }
  }
  std::vector<double> scores(M, 0.0);
  for (std::size_t j = 0; j < M; ++j) scores[j] = den[j] > 0.0 ? num[j] / den[j] : 0.0;
  return scores;
}

namespace {

// Boosted items for the given scores and rated mask.
std::vector<std::uint32_t> top_unrated(std::span<const double> scores, const std::vector<bool>& rated, std::size_t k) {
  std::vector<std::uint32_t> cand;
  cand.reserve(scores.size());
  for (std::uint32_t j = 0; j < scores.size(); ++j)
    if (!rated[j]) cand.push_back(j);
  auto better = [&](std::uint32_t a, std::uint32_t b) { return scores[a] != scores[b] ? scores[a] > scores[b] : a < b; };
  if (cand.size() > k) {
    std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), better);
    cand.resize(k);
  }
  std::sort(cand.begin(), cand.end());
  return cand;
}

}  // namespace

std::vector<double> exposure_distribution(std::span<const double> scores, std::span<const std::uint32_t> already_rated,
                                          const SimConfig& cfg) {
  const std::size_t M = scores.size();
  std::vector<bool> rated(M, false);
  for (auto j : already_rated) {
    if (j >= M) fail(ErrorCode::InvalidArgument, "exposure_distribution: rated item out of range");
    rated[j] = true;
  }
  std::vector<double> w(M, 0.0);
  for (std::size_t j = 0; j < M; ++j) w[j] = rated[j] ? 0.0 : 1.0;
  for (auto j : top_unrated(scores, rated, cfg.top_rank)) w[j] = cfg.boost_factor;
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  if (!(total > 0.0)) fail(ErrorCode::InvalidArgument, "exposure_distribution: every item already rated");
  for (double& x : w) x /= total;
  return w;
}

std::uint32_t sample_categorical(Rng& rng, std::span<const double> probs) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double target = u(rng);
  double acc = 0.0;
  std::uint32_t last_positive = 0;
  for (std::uint32_t j = 0; j < probs.size(); ++j) {
    if (probs[j] <= 0.0) continue;
    acc += probs[j];
    last_positive = j;
    if (target < acc) return j;
  }
  return last_positive;
}

std::vector<double> SimulationResult::true_categorical(std::size_t user, std::size_t round) const {
  const auto seq = dataset.users[user].biased_sequence();
  const auto& rec = exposures[user][round];
  std::vector<double> p(dataset.n_items, 1.0 / rec.normalizer);
  for (auto j : rec.boosted) p[j] = boost_factor / rec.normalizer;
  for (std::size_t k = 0; k < round; ++k) p[seq[k].item] = 0.0;
  return p;
}

SimulationResult simulate_interactions(const SimWorld& world) {
  const SimConfig& cfg = world.config;
  const std::size_t M = cfg.n_items;
  SimulationResult res;
  SplitDataset& ds = res.dataset;
  ds.n_users = cfg.n_users;
  ds.n_items = M;
  ds.scale = {0.0, cfg.rating_max};
  ds.users.resize(cfg.n_users);
  res.boost_factor = cfg.boost_factor;
  res.exposures.resize(cfg.n_users);
  ds.item_features.resize(M);
  for (std::size_t j = 0; j < M; ++j) ds.item_features[j].assign(world.beta.row(j).begin(), world.beta.row(j).end());

  for (std::size_t i = 0; i < cfg.n_users; ++i) {
    Rng rng(derive_seed(cfg.seed, kUserStreamBase + i));
    std::vector<bool> rated(M, false);
    // Running numerator / denominator of cf_scores, accumulated in history
    // order so the arithmetic matches cf_scores() exactly.
    std::vector<double> num(M, 0.0), den(M, 0.0), scores(M, 0.0);
    UserSplit& split = ds.users[i];
    auto& log = res.exposures[i];
    for (std::size_t round = 0; round < cfg.n_rounds; ++round) {
      for (std::size_t j = 0; j < M; ++j) scores[j] = den[j] > 0.0 ? num[j] / den[j] : 0.0;
      RoundExposure rec;
      rec.boosted = top_unrated(scores, rated, cfg.top_rank);
      std::vector<double> w(M, 0.0);
      for (std::size_t j = 0; j < M; ++j) w[j] = rated[j] ? 0.0 : 1.0;
      for (auto j : rec.boosted) w[j] = cfg.boost_factor;
      rec.normalizer = std::accumulate(w.begin(), w.end(), 0.0);
      for (double& x : w) x /= rec.normalizer;
      rec.chosen = sample_categorical(rng, w);
      rec.chosen_probability = w[rec.chosen];

      const double y = world.ratings.at(i, rec.chosen);
      rated[rec.chosen] = true;
      for (std::size_t j = 0; j < M; ++j) {
        const double s = world.noisy_similarity.at(j, rec.chosen);
        num[j] += s * y;
        den[j] += s;
      }
      const Partition part = round < cfg.train_rounds                           ? Partition::Train
                             : round < cfg.train_rounds + cfg.validation_rounds ? Partition::Validation
                                                                                : Partition::ExposureTest;
      split[part].push_back({rec.chosen, y, 0});
      log.push_back(std::move(rec));
    }
    std::vector<std::uint32_t> unseen;
    for (std::uint32_t j = 0; j < M; ++j)
      if (!rated[j]) unseen.push_back(j);
    std::vector<std::uint32_t> picked;
    std::sample(unseen.begin(), unseen.end(), std::back_inserter(picked), cfg.n_unbiased, rng);
    std::shuffle(picked.begin(), picked.end(), rng);
    for (auto j : picked) split[Partition::UnbiasedTest].push_back({j, world.ratings.at(i, j), 0});
  }
  return res;
}

void save_true_propensities(const SimulationResult& sim, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write '" + path.string() + "'");
  for (std::size_t u = 0; u < sim.exposures.size(); ++u)
    for (std::size_t k = 0; k < sim.exposures[u].size(); ++k)
      out << u << '\t' << (k + 1) << '\t' << sim.exposures[u][k].chosen << '\t'
          << format_double(sim.exposures[u][k].chosen_probability) << '\n';
  if (!out) fail(ErrorCode::Io, "write failed for '" + path.string() + "'");
}

}  // namespace fbd
