#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <numeric>
#include <set>

#include "common.hpp"
#include "doctest.h"
#include "fbdebias/error.hpp"
#include "fbdebias/experiment.hpp"
#include "fbdebias/metrics.hpp"
#include "fbdebias/simulator.hpp"

using namespace fbd;

namespace {

SimConfig small_config(std::uint64_t seed = 5) {
  SimConfig c;
  c.n_users = 40;
  c.n_items = 60;
  c.top_rank = 10;
  c.seed = seed;
  return c;
}

double sum(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST_CASE("beta shapes from moments") {
  const auto s = beta_shape_from_moments(0.5, 0.01);
  CHECK(s.a == doctest::Approx(12.0).epsilon(1e-12));
  CHECK(s.b == doctest::Approx(12.0).epsilon(1e-12));
  const auto t = beta_shape_from_moments(0.2, 0.01);
  // a = m(m(1-m)/v - 1) = 0.2 * 15
  CHECK(t.a == doctest::Approx(3.0));
  CHECK(t.b == doctest::Approx(12.0));
  CHECK_THROWS_AS(beta_shape_from_moments(0.5, 0.25), Error);
}

TEST_CASE("infeasible beta variance is clamped and counted") {
  Rng rng(1);
  std::size_t clamped = 0;
  for (int i = 0; i < 100; ++i) {
    const double x = sample_beta_moments(rng, 0.01, 0.5, &clamped);
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
  }
  CHECK(clamped == 100);
}

TEST_CASE("rating draws: Monte-Carlo mean matches 10 * alpha.beta") {
  const auto world = generate_world(small_config());
  const std::size_t i = 3, j = 7;
  double m = 0.0;
  for (std::size_t d = 0; d < world.config.latent_dim; ++d) m += world.alpha.at(i, d) * world.beta.at(j, d);
  Rng rng(99);
  const int n = 10000;
  std::size_t clamped = 0;
  double s = 0.0, s2 = 0.0;
  for (int k = 0; k < n; ++k) {
    const double y = 10.0 * sample_beta_moments(rng, m, world.config.rating_variance, &clamped);
    s += y;
    s2 += y * y;
  }
  const double mean = s / n;
  const double sd = std::sqrt(s2 / n - mean * mean);
  CHECK(std::abs(mean - 10.0 * m) < 3.0 * sd / std::sqrt(double(n)));
}

TEST_CASE("world invariants") {
  const auto w = generate_world(small_config());
  for (std::size_t i = 0; i < w.alpha.rows(); ++i) CHECK(sum(w.alpha.row(i)) == doctest::Approx(1.0).epsilon(1e-9));
  for (std::size_t j = 0; j < w.beta.rows(); ++j) CHECK(sum(w.beta.row(j)) == doctest::Approx(1.0).epsilon(1e-9));
  const std::size_t M = w.config.n_items;
  for (std::size_t a = 0; a < M; ++a)
    for (std::size_t b = 0; b < M; ++b) {
      CHECK(w.similarity.at(a, b) == w.similarity.at(b, a));
      CHECK(w.noisy_similarity.at(a, b) == w.noisy_similarity.at(b, a));
    }
  for (double y : w.ratings.values()) {
    CHECK(y >= 0.0);
    CHECK(y <= 10.0);
  }
}

TEST_CASE("cf scores") {
  Tensor S = Tensor::matrix(3, 3, {1.0, 0.5, 0.5, 0.5, 1.0, 0.0, 0.5, 0.0, 1.0});
  const auto empty = cf_scores({}, S);
  CHECK(empty[0] == empty[1]);
  CHECK(empty[1] == empty[2]);

  const std::vector<RatedEvent> one{{0, 5.0, 0}};
  for (double s : cf_scores(one, S)) CHECK(s == doctest::Approx(5.0));

  // Item 0 sees items 1 and 2 with equal similarity 0.5.
  const std::vector<RatedEvent> two{{1, 2.0, 0}, {2, 4.0, 1}};
  CHECK(cf_scores(two, S)[0] == doctest::Approx(3.0));

  Tensor Z = Tensor::matrix(2, 2, {0.0, 0.0, 0.0, 1.0});
  const std::vector<RatedEvent> h{{1, 7.0, 0}};
  const auto z = cf_scores(h, Z);
  CHECK(z[0] == 0.0);
  CHECK(z[1] == doctest::Approx(7.0));
}

TEST_CASE("exposure distribution") {
  SimConfig cfg;
  std::vector<double> scores(1000);
  for (std::size_t j = 0; j < scores.size(); ++j) scores[j] = double(j % 37);
  const auto p = exposure_distribution(scores, {}, cfg);
  CHECK(sum(p) == doctest::Approx(1.0));
  std::size_t boosted = 0;
  for (double x : p) {
    if (x == doctest::Approx(10.0 / 1900.0)) ++boosted;
    else CHECK(x == doctest::Approx(1.0 / 1900.0));
  }
  CHECK(boosted == 100);
  // The boosted set is the top-100 by score, ties by lower index.
  CHECK(p[36] == doctest::Approx(10.0 / 1900.0));
  CHECK(p[35] == doctest::Approx(10.0 / 1900.0));

  SimConfig small;
  small.n_items = 4;
  small.top_rank = 2;
  const std::vector<double> flat(4, 1.0);
  const std::vector<std::uint32_t> all_but_two{0, 1, 3};
  const auto forced = exposure_distribution(flat, all_but_two, small);
  CHECK(forced[2] == 1.0);
  CHECK(forced[0] == 0.0);

  small.boost_factor = 1.0;
  const std::vector<std::uint32_t> rated{1};
  const auto u = exposure_distribution(flat, rated, small);
  CHECK(u[1] == 0.0);
  for (std::size_t j : {0, 2, 3}) CHECK(u[j] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("simulation structure") {
  const auto cfg = small_config();
  const auto sim = simulate_interactions(generate_world(cfg));
  const auto& ds = sim.dataset;
  ds.validate();
  CHECK(ds.count(Partition::Train) == cfg.n_users * 20);
  CHECK(ds.count(Partition::Validation) == cfg.n_users * 5);
  CHECK(ds.count(Partition::ExposureTest) == cfg.n_users * 5);
  CHECK(ds.count(Partition::UnbiasedTest) == cfg.n_users * 20);
  for (const auto& u : ds.users) {
    const auto seq = u.biased_sequence();
    CHECK(seq.size() == 30);
    std::set<std::uint32_t> seen;
    for (const auto& e : seq) seen.insert(e.item);
    CHECK(seen.size() == 30);
    for (const auto& e : u[Partition::UnbiasedTest]) CHECK_FALSE(seen.contains(e.item));
  }
}

TEST_CASE("stored categorical equals the sampling distribution") {
  const auto cfg = small_config(8);
  const auto world = generate_world(cfg);
  const auto sim = simulate_interactions(world);
  for (std::size_t u : {0, 17, 39}) {
    const auto seq = sim.dataset.users[u].biased_sequence();
    for (std::size_t r = 0; r < cfg.n_rounds; ++r) {
      const std::span<const RatedEvent> hist(seq.data(), r);
      std::vector<std::uint32_t> rated;
      for (const auto& e : hist) rated.push_back(e.item);
      const auto expected = exposure_distribution(cf_scores(hist, world.noisy_similarity), rated, cfg);
      const auto stored = sim.true_categorical(u, r);
      CHECK(sum(stored) == doctest::Approx(1.0).epsilon(1e-12));
      for (std::size_t j = 0; j < cfg.n_items; ++j) REQUIRE(stored[j] == doctest::Approx(expected[j]).epsilon(1e-14));
      CHECK(sim.true_propensity(u, r) == stored[seq[r].item]);
    }
  }
}

TEST_CASE("multinomial resampling at a fixed history matches the stored categorical") {
  const auto sim = simulate_interactions(generate_world(small_config(9)));
  const auto p = sim.true_categorical(4, 12);
  Rng rng(123);
  const int n = 100000;
  std::vector<double> counts(p.size(), 0.0);
  for (int k = 0; k < n; ++k) counts[sample_categorical(rng, p)] += 1.0;
  double chi2 = 0.0;
  std::size_t cells = 0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] == 0.0) {
      CHECK(counts[j] == 0.0);
      continue;
    }
    const double e = n * p[j];
    chi2 += (counts[j] - e) * (counts[j] - e) / e;
    ++cells;
    // Per cell: within 3 sigma, widened by a Bonferroni factor for 48 cells.
    CHECK(std::abs(counts[j] - e) < 4.0 * std::sqrt(e * (1 - p[j])));
  }
  boost::math::chi_squared dist(double(cells - 1));
  CHECK(chi2 < boost::math::quantile(dist, 0.9999));
}

TEST_CASE("simulation is deterministic per seed") {
  const auto a = simulate_interactions(generate_world(small_config(3)));
  const auto b = simulate_interactions(generate_world(small_config(3)));
  const auto c = simulate_interactions(generate_world(small_config(4)));
  CHECK(a.dataset == b.dataset);
  CHECK_FALSE(a.dataset == c.dataset);
}

TEST_CASE("feedback loop concentrates exposure") {
  auto cfg = small_config(6);
  cfg.n_users = 200;
  auto counts = [](const SimulationResult& sim) {
    std::vector<double> c(sim.dataset.n_items, 0.0);
    for (const auto& u : sim.dataset.users)
      for (const auto& e : u.biased_sequence()) c[e.item] += 1.0;
    return c;
  };
  const auto biased = simulate_interactions(generate_world(cfg));
  cfg.boost_factor = 1.0;
  const auto flat = simulate_interactions(generate_world(cfg));
  CHECK(gini(counts(biased)) > gini(counts(flat)));
}

TEST_CASE("simulator output survives a save/load round trip") {
  testing::TempDir dir("simfile");
  const auto sim = simulate_interactions(generate_world(small_config()));
  save_dataset(sim.dataset, dir / "s.fdb");
  const auto back = load_dataset(dir / "s.fdb");
  for (std::size_t u = 0; u < back.n_users; ++u)
    for (Partition p : kAllPartitions) CHECK(back.users[u][p] == sim.dataset.users[u][p]);
  CHECK(back == sim.dataset);

  // The true-propensity table covers the train events in (user, k) order.
  const auto table = true_propensity_table(sim);
  table.validate_against(sim.dataset);
  CHECK(table.entries.size() == sim.dataset.count(Partition::Train));
}

TEST_CASE("config validation") {
  auto c = small_config();
  c.top_rank = 0;
  CHECK_NOTHROW(c.validate());
  c.train_rounds = 40;
  CHECK_THROWS_AS(c.validate(), Error);
  auto d = small_config();
  d.n_unbiased = 40;
  CHECK_THROWS_AS(d.validate(), Error);
}
