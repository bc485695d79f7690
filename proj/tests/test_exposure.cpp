#include <cmath>
#include <numeric>

#include "common.hpp"
#include "doctest.h"
#include "fbdebias/dynamic.hpp"
#include "fbdebias/error.hpp"
#include "fbdebias/experiment.hpp"
#include "fbdebias/exposure.hpp"
#include "fbdebias/optim.hpp"
#include "fbdebias/simulator.hpp"

using namespace fbd;

namespace {

SplitDataset train_only(std::size_t n_items, const std::vector<std::vector<std::uint32_t>>& users) {
  SplitDataset ds;
  ds.n_users = users.size();
  ds.n_items = n_items;
  ds.scale = {0.0, 5.0};
  for (const auto& items : users) {
    UserSplit s;
    for (auto j : items) s[Partition::Train].push_back({j, 3.0, 0});
    ds.users.push_back(std::move(s));
  }
  return ds;
}

double total(const std::vector<double>& p) { return std::accumulate(p.begin(), p.end(), 0.0); }

SimulationResult small_sim(std::uint64_t seed, bool structured) {
  SimConfig c;
  c.n_users = 300;
  c.n_items = 80;
  c.top_rank = 10;
  c.seed = seed;
  if (structured) {
    c.item_conc_scale = 1.0;
    c.user_conc_scale = 10.0;
    c.similarity_noise_variance = 1e-4;
  }
  return simulate_interactions(generate_world(c));
}

DynamicConfig small_dynamic() {
  DynamicConfig c;
  c.embed_dim = 8;
  c.hidden_dim = 8;
  c.lr = 0.01;
  c.batch_users = 16;
  c.max_epochs = 12;
  c.patience = 3;
  c.seed = 4;
  return c;
}

void set_param(DynamicModel& m, const std::string& name, double value) {
  m.parameters().values[m.parameters().index_of(name)].fill(value);
}

}  // namespace

TEST_CASE("pop: hand normalization and floor") {
  const auto ds = train_only(2, {{0}, {0, 1}});
  const auto pop = train_pop(ds);
  CHECK(pop.probabilities()[0] == doctest::Approx(2.0 / 3.0));
  CHECK(pop.probabilities()[1] == doctest::Approx(1.0 / 3.0));

  const auto all = train_pop(train_only(3, {{0, 1, 2}, {2, 1, 0}}));
  for (double p : all.probabilities()) CHECK(p == doctest::Approx(1.0 / 3.0));

  // Item 2 never exposed: floor 1/(N M) before normalizing.
  const auto floored = train_pop(train_only(3, {{0}, {1}}));
  const double raw[3] = {0.5, 0.5, 1.0 / 6.0};
  const double z = raw[0] + raw[1] + raw[2];
  for (int j = 0; j < 3; ++j) CHECK(floored.probabilities()[j] == doctest::Approx(raw[j] / z));
  CHECK(total(floored.probabilities()) == doctest::Approx(1.0));
}

TEST_CASE("pop predict renormalizes after removing history") {
  const PopModel pop({0.5, 0.3, 0.2});
  CHECK(pop.predict(0, {}) == pop.probabilities());
  const std::vector<RatedEvent> h{{0, 1.0, 0}};
  const auto p = pop.predict(0, h);
  CHECK(p[0] == 0.0);
  CHECK(p[1] == doctest::Approx(0.6));
  CHECK(p[2] == doctest::Approx(0.4));
}

TEST_CASE("pf: planted blocks, symmetry, monotone ELBO") {
  // Users 0-19 expose items 0-9, users 20-39 expose items 10-19.
  std::vector<std::vector<std::uint32_t>> users;
  for (std::uint32_t u = 0; u < 40; ++u) {
    std::vector<std::uint32_t> items;
    for (std::uint32_t j = 0; j < 10; ++j) items.push_back(u < 20 ? j : 10 + j);
    users.push_back(items);
  }
  PFConfig cfg;
  cfg.factors = 2;
  cfg.seed = 3;
  const auto pf = train_pf(train_only(20, users), cfg);
  double in = 0.0, off = 0.0;
  for (std::size_t u = 0; u < 40; ++u)
    for (std::size_t j = 0; j < 20; ++j) ((u < 20) == (j < 10) ? in : off) += pf.rate(u, j);
  CHECK(in / 400.0 > 2.0 * off / 400.0);

  for (std::size_t k = 1; k < pf.elbo_trace.size(); ++k)
    CHECK(pf.elbo_trace[k] >= pf.elbo_trace[k - 1] - 1e-9 * std::abs(pf.elbo_trace[k - 1]));
  for (const Tensor* t : {&pf.theta_shape, &pf.theta_rate, &pf.beta_shape, &pf.beta_rate})
    for (double x : t->values()) CHECK(x > 0.0);

  std::vector<std::vector<std::uint32_t>> ones(5, std::vector<std::uint32_t>{0, 1, 2, 3});
  PFConfig one;
  one.factors = 1;
  const auto flat = train_pf(train_only(4, ones), one);
  for (double p : flat.predict(2, {})) CHECK(p == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("static models ignore order and ratings") {
  const auto sim = small_sim(1, false);
  const auto pop = train_pop(sim.dataset);
  PFConfig cfg;
  cfg.max_iters = 20;
  const auto pf = train_pf(sim.dataset, cfg);
  const std::vector<RatedEvent> a{{3, 1.0, 0}, {7, 9.0, 1}};
  const std::vector<RatedEvent> b{{7, 2.0, 0}, {3, 0.5, 1}};
  CHECK(pop.predict(0, a) == pop.predict(0, b));
  CHECK(pf.predict(0, a) == pf.predict(0, b));
  CHECK(total(pf.predict(5, a)) == doctest::Approx(1.0));
}

TEST_CASE("dynamic: uniform head and zero KL configurations") {
  DynamicConfig cfg = small_dynamic();
  cfg.embed_dim = 3;
  cfg.hidden_dim = 3;
  DynamicModel m(5, cfg);
  const std::vector<RatedEvent> seq{{1, 2.0, 0}, {4, 1.0, 0}, {0, 3.0, 0}};
  Rng rng(1);
  set_param(m, "exposure_W", 0.0);
  set_param(m, "exposure_b", 0.0);
  const auto terms = m.elbo(seq, ElboNoise::sample(rng, seq.size(), 3));
  CHECK(std::accumulate(terms.log_prob.begin(), terms.log_prob.end(), 0.0) ==
        doctest::Approx(-3.0 * std::log(5.0)).epsilon(1e-12));

  for (const char* p : {"prior_mu_W", "prior_mu_b", "prior_logvar_W", "prior_logvar_b", "qv_mu_item", "qv_mu_rating",
                        "qv_mu_b", "qv_logvar_item", "qv_logvar_rating", "qv_logvar_b", "qu_mu_W", "qu_mu_b",
                        "qu_logvar_W", "qu_logvar_b"})
    set_param(m, p, 0.0);
  const auto zero_kl = m.elbo(seq, ElboNoise::sample(rng, seq.size(), 3));
  CHECK(zero_kl.kl_v == doctest::Approx(0.0).epsilon(1e-15));
  for (double k : zero_kl.kl_u) CHECK(k == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("dynamic: expected ELBO is below the quadrature log-evidence") {
  // D = 1 and zero GRU weights keep h = 0, so p(u_k) is a fixed Gaussian and
  // the evidence is a nested one-dimensional integral.
  DynamicConfig cfg;
  cfg.embed_dim = 1;
  cfg.hidden_dim = 2;
  cfg.seed = 9;
  DynamicModel m(2, cfg);
  for (const char* p : {"gru_Wz", "gru_Uz", "gru_bz", "gru_Wr", "gru_Ur", "gru_br", "gru_Wn", "gru_Un", "gru_bn"})
    set_param(m, p, 0.0);
  auto& P = m.parameters();
  P.values[P.index_of("prior_mu_b")][0] = 0.3;
  P.values[P.index_of("prior_logvar_b")][0] = -0.4;
  Tensor& W = P.values[P.index_of("exposure_W")];
  W = Tensor::matrix(2, 2, {1.2, -0.8, -0.5, 1.5});
  P.values[P.index_of("exposure_b")] = Tensor::vector({0.2, -0.1});
  const std::vector<RatedEvent> seq{{0, 1.0, 0}, {1, 2.0, 0}};

  auto log_pi = [&](std::size_t item, double v, double u) {
    const double l0 = W.at(0, 0) * v + W.at(0, 1) * u + 0.2;
    const double l1 = W.at(1, 0) * v + W.at(1, 1) * u - 0.1;
    const double mx = std::max(l0, l1);
    const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
    return (item == 0 ? l0 : l1) - lse;
  };
  const double mu_p = 0.3, sd_p = std::exp(-0.2);
  const double step = 0.005;
  auto npdf = [](double x, double m, double s) { return std::exp(-0.5 * (x - m) * (x - m) / (s * s)) / (s * std::sqrt(2 * M_PI)); };
  double evidence = 0.0;
  for (double v = -9.0; v <= 9.0; v += step) {
    double prod = 1.0;
    for (const auto& e : seq) {
      double inner = 0.0;
      for (double u = mu_p - 9 * sd_p; u <= mu_p + 9 * sd_p; u += step)
        inner += npdf(u, mu_p, sd_p) * std::exp(log_pi(e.item, v, u)) * step;
      prod *= inner;
    }
    evidence += npdf(v, 0.0, 1.0) * prod * step;
  }
  const double log_evidence = std::log(evidence);

  Rng rng(77);
  const int n = 20000;
  double s = 0.0, s2 = 0.0;
  for (int k = 0; k < n; ++k) {
    const double e = m.elbo(seq, ElboNoise::sample(rng, seq.size(), 1)).elbo;
    s += e;
    s2 += e * e;
  }
  const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
  CHECK(mean + 3.0 * se <= log_evidence);
  CHECK(log_evidence < 0.0);
}

TEST_CASE("dynamic: ELBO gradient passes grad_check") {
  DynamicConfig cfg;
  cfg.embed_dim = 3;
  cfg.hidden_dim = 3;
  cfg.init_scale = 0.5;
  cfg.seed = 2;
  DynamicModel m(5, cfg);
  m.set_rating_moments(2.5, 1.3);
  const std::vector<RatedEvent> seq{{1, 2.0, 0}, {4, 5.0, 0}, {0, 1.0, 0}, {3, 4.0, 0}};
  Rng rng(5);
  const auto noise = ElboNoise::sample(rng, seq.size(), 3);
  const Objective f = [&](const ParameterSet& p, std::vector<Tensor>* grads) {
    DynamicModel probe = m;
    probe.parameters() = p;
    return probe.elbo(seq, noise, grads).elbo;
  };
  const auto r = grad_check(f, m.parameters(), 1e-5, 1e-4);
  INFO("worst parameter: " << r.parameter_name);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("dynamic: KL terms are nonnegative and predict_steps matches predict") {
  const auto sim = small_sim(2, false);
  DynamicModel m(sim.dataset.n_items, small_dynamic());
  Rng rng(3);
  for (std::size_t u = 0; u < 20; ++u) {
    const auto& train = sim.dataset.users[u][Partition::Train];
    const auto t = m.elbo(train, ElboNoise::sample(rng, train.size(), 8));
    CHECK(t.kl_v >= 0.0);
    for (double k : t.kl_u) CHECK(k >= 0.0);
  }
  const auto seq = sim.dataset.users[7].biased_sequence();
  const auto steps = m.predict_steps(7, seq, 18);
  REQUIRE(steps.size() == seq.size() - 18);
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const auto direct = m.predict(7, std::span<const RatedEvent>(seq.data(), 18 + t));
    CHECK(total(steps[t]) == doctest::Approx(1.0));
    for (std::size_t j = 0; j < direct.size(); ++j) CHECK(steps[t][j] == doctest::Approx(direct[j]).epsilon(1e-12));
  }
  const auto empty = m.predict(0, {});
  CHECK(total(empty) == doctest::Approx(1.0));
}

TEST_CASE("dynamic model depends on ratings, static models do not") {
  const auto sim = small_sim(3, false);
  DynamicModel m(sim.dataset.n_items, small_dynamic());
  const std::vector<RatedEvent> low{{3, 0.5, 0}, {8, 1.0, 0}};
  const std::vector<RatedEvent> high{{3, 9.5, 0}, {8, 8.0, 0}};
  const auto a = m.predict(0, low), b = m.predict(0, high);
  double tv = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) tv += 0.5 * std::abs(a[j] - b[j]);
  CHECK(tv > 0.0);
  const auto pop = train_pop(sim.dataset);
  CHECK(pop.predict(0, low) == pop.predict(0, high));
  PFConfig cfg;
  cfg.max_iters = 10;
  const auto pf = train_pf(sim.dataset, cfg);
  CHECK(pf.predict(0, low) == pf.predict(0, high));
}

TEST_CASE("dynamic training: improves, beats uniform, tracks true propensities") {
  // Enough events per item for the item embeddings to settle; the first
  // epochs sit on a plateau, hence the longer patience.
  SimConfig c;
  c.n_users = 1000;
  c.n_items = 40;
  c.top_rank = 4;
  c.n_unbiased = 5;
  c.item_conc_scale = 1.0;
  c.user_conc_scale = 10.0;
  c.similarity_noise_variance = 1e-4;
  c.seed = 4;
  const auto sim = simulate_interactions(generate_world(c));
  auto cfg = small_dynamic();
  cfg.max_epochs = 25;
  cfg.patience = 6;
  TrainingTrace trace;
  const auto m = train_dynamic(sim.dataset, cfg, &trace);
  REQUIRE(trace.train_elbo.size() >= 3);
  CHECK(trace.train_elbo[2] > trace.train_elbo[0]);
  const auto val = evaluate_exposure(m, sim.dataset, Partition::Validation);
  CHECK(val.nll < std::log(double(sim.dataset.n_items)));
  CHECK(val.nll < evaluate_exposure(train_pop(sim.dataset), sim.dataset, Partition::Validation).nll);

  const auto table = estimate_propensities(m, sim.dataset);
  table.validate_against(sim.dataset);
  for (const auto& e : table.entries) {
    CHECK(e.propensity > 0.0);
    CHECK(e.propensity <= 1.0);
  }
  const auto truth = true_propensity_table(sim);
  const auto pop = static_propensities(train_pop(sim.dataset), sim.dataset);
  double err_dyn = 0.0, err_pop = 0.0;
  for (std::size_t k = 0; k < truth.entries.size(); ++k) {
    err_dyn += std::abs(table.entries[k].propensity - truth.entries[k].propensity);
    err_pop += std::abs(pop.entries[k].propensity - truth.entries[k].propensity);
  }
  CHECK(err_dyn < err_pop);
}

TEST_CASE("dynamic training is deterministic per seed") {
  const auto sim = small_sim(4, false);
  auto cfg = small_dynamic();
  cfg.max_epochs = 2;
  const auto a = train_dynamic(sim.dataset, cfg);
  const auto b = train_dynamic(sim.dataset, cfg);
  CHECK(a.parameters().values == b.parameters().values);
  cfg.seed = 5;
  const auto c = train_dynamic(sim.dataset, cfg);
  CHECK_FALSE(a.parameters().values == c.parameters().values);
}

TEST_CASE("propensity tables: validation and file round trip") {
  testing::TempDir dir("props");
  const auto sim = small_sim(5, false);
  const auto table = static_propensities(train_pop(sim.dataset), sim.dataset);
  table.validate_against(sim.dataset);
  save_propensities(table, dir / "p.tsv");
  const auto back = load_propensities(dir / "p.tsv");
  CHECK(back.model == table.model);
  CHECK(back.entries == table.entries);

  auto missing = table;
  missing.entries.pop_back();
  CHECK_THROWS_AS(missing.validate_against(sim.dataset), Error);
  auto zero = table;
  zero.entries[3].propensity = 0.0;
  CHECK_THROWS_AS(zero.validate_against(sim.dataset), Error);
  auto swapped = table;
  std::swap(swapped.entries[0], swapped.entries[1]);
  CHECK_THROWS_AS(swapped.validate_against(sim.dataset), Error);
}

TEST_CASE("exposure checkpoints round trip") {
  testing::TempDir dir("ckpt");
  const auto sim = small_sim(6, false);
  const auto seq = sim.dataset.users[2].biased_sequence();
  const std::span<const RatedEvent> hist(seq.data(), 20);

  const auto pop = train_pop(sim.dataset);
  save_checkpoint(pop.to_checkpoint(), dir / "pop.ckpt");
  CHECK(PopModel::from_checkpoint(load_checkpoint(dir / "pop.ckpt")).predict(2, hist) == pop.predict(2, hist));

  PFConfig cfg;
  cfg.max_iters = 5;
  const auto pf = train_pf(sim.dataset, cfg);
  save_checkpoint(pf.to_checkpoint(), dir / "pf.ckpt");
  CHECK(PFModel::from_checkpoint(load_checkpoint(dir / "pf.ckpt")).predict(2, hist) == pf.predict(2, hist));

  DynamicModel dyn(sim.dataset.n_items, small_dynamic());
  dyn.set_rating_moments(1.3, 0.7);
  save_checkpoint(dyn.to_checkpoint(), dir / "dyn.ckpt");
  const auto back = DynamicModel::from_checkpoint(load_checkpoint(dir / "dyn.ckpt"));
  CHECK(back.predict(2, hist) == dyn.predict(2, hist));
  CHECK_THROWS_AS(PopModel::from_checkpoint(load_checkpoint(dir / "dyn.ckpt")), Error);

  auto text = testing::read_text(dir / "pf.ckpt");
  testing::write_text(dir / "cut.ckpt", text.substr(0, text.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), Error);
}

TEST_CASE("pop NLL on a default-size catalog is near ln(1000)") {
  SimConfig c;
  c.n_users = 500;
  c.seed = 11;
  const auto sim = simulate_interactions(generate_world(c));
  const auto r = evaluate_exposure(train_pop(sim.dataset), sim.dataset, Partition::ExposureTest);
  CHECK(std::abs(r.nll - std::log(1000.0)) < 0.1);
  CHECK(r.recall > 0.0);
  CHECK(r.ndcg <= r.recall);
}
