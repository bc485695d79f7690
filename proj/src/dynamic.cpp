#include "fbdebias/dynamic.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <thread>

#include "fbdebias/error.hpp"
#include "fbdebias/optim.hpp"
#include "fbdebias/rng.hpp"

namespace fbd {

using ad::Tape;
using ad::Var;

namespace {

constexpr std::uint64_t kInitStream = 0xd1a0;
constexpr std::uint64_t kShuffleStream = 0xd1a1;
constexpr std::uint64_t kNoiseStream = 0xd1a2;

}  // namespace

ElboNoise ElboNoise::zeros(std::size_t steps, std::size_t dim) {
  ElboNoise n;
  n.v = Tensor(Shape{dim});
  n.u.assign(steps, Tensor(Shape{dim}));
  return n;
}

ElboNoise ElboNoise::sample(Rng& rng, std::size_t steps, std::size_t dim) {
  ElboNoise n = zeros(steps, dim);
  for (double& x : n.v.values()) x = sample_standard_normal(rng);
  for (auto& t : n.u)
    for (double& x : t.values()) x = sample_standard_normal(rng);
  return n;
}

struct DynamicModel::Graph {
  Var item_embedding, rating_embedding;
  ad::GruWeights gru;
  Var prior_mu_W, prior_mu_b, prior_logvar_W, prior_logvar_b;
  Var exposure_W, exposure_b;
  Var qv_mu_item, qv_mu_rating, qv_mu_b;
  Var qv_logvar_item, qv_logvar_rating, qv_logvar_b;
  Var qu_mu_W, qu_mu_b, qu_logvar_W, qu_logvar_b;
};

DynamicModel::DynamicModel(std::size_t n_items, const DynamicConfig& cfg) : n_items_(n_items), cfg_(cfg) {
  if (n_items == 0 || cfg.embed_dim == 0 || cfg.hidden_dim == 0)
    fail(ErrorCode::InvalidArgument, "dynamic model: dimensions must be positive");
  const std::size_t D = cfg.embed_dim, H = cfg.hidden_dim, M = n_items;
  Rng rng(derive_seed(cfg.seed, kInitStream));
  auto weight = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (double& x : t.values()) x = cfg.init_scale * sample_standard_normal(rng);
    return t;
  };
  auto zeros = [](Shape shape) { return Tensor(std::move(shape)); };
  auto logvar_bias = [&] { return Tensor(Shape{D}, cfg.init_logvar); };
  // Row M of the item embedding is the start token.
  params_.add("item_embedding", weight({M + 1, D}));
  params_.add("rating_embedding", weight({D}));
  for (const char* gate : {"z", "r", "n"}) {
    params_.add(std::string("gru_W") + gate, weight({H, 2 * D}));
    params_.add(std::string("gru_U") + gate, weight({H, H}));
    params_.add(std::string("gru_b") + gate, zeros({H}));
  }
  params_.add("prior_mu_W", weight({D, H}));
  params_.add("prior_mu_b", zeros({D}));
  params_.add("prior_logvar_W", weight({D, H}));
  params_.add("prior_logvar_b", logvar_bias());
  params_.add("exposure_W", weight({M, 2 * D}));
  params_.add("exposure_b", zeros({M}));
  params_.add("qv_mu_item", weight({M, D}));
  params_.add("qv_mu_rating", weight({D}));
  params_.add("qv_mu_b", zeros({D}));
  params_.add("qv_logvar_item", weight({M, D}));
  params_.add("qv_logvar_rating", weight({D}));
  params_.add("qv_logvar_b", logvar_bias());
  params_.add("qu_mu_W", weight({D, H + 2 * D}));
  params_.add("qu_mu_b", zeros({D}));
  params_.add("qu_logvar_W", weight({D, H + 2 * D}));
  params_.add("qu_logvar_b", logvar_bias());
}

void DynamicModel::set_rating_moments(double mean, double sd) {
  if (!(sd > 0.0) || !std::isfinite(mean)) fail(ErrorCode::InvalidArgument, "rating moments must be finite with sd > 0");
  rating_mean_ = mean;
  rating_sd_ = sd;
}

DynamicModel::Graph DynamicModel::bind(Tape& tape, std::vector<Tensor>* grads) const {
  auto leaf = [&](const char* name) {
    const std::size_t i = params_.index_of(name);
    return tape.leaf(params_.values[i], grads ? &(*grads)[i] : nullptr);
  };
  Graph g;
  g.item_embedding = leaf("item_embedding");
  g.rating_embedding = leaf("rating_embedding");
  g.gru = {leaf("gru_Wz"), leaf("gru_Uz"), leaf("gru_bz"), leaf("gru_Wr"), leaf("gru_Ur"),
           leaf("gru_br"), leaf("gru_Wn"), leaf("gru_Un"), leaf("gru_bn")};
  g.prior_mu_W = leaf("prior_mu_W");
  g.prior_mu_b = leaf("prior_mu_b");
  g.prior_logvar_W = leaf("prior_logvar_W");
  g.prior_logvar_b = leaf("prior_logvar_b");
  g.exposure_W = leaf("exposure_W");
  g.exposure_b = leaf("exposure_b");
  g.qv_mu_item = leaf("qv_mu_item");
  g.qv_mu_rating = leaf("qv_mu_rating");
  g.qv_mu_b = leaf("qv_mu_b");
  g.qv_logvar_item = leaf("qv_logvar_item");
  g.qv_logvar_rating = leaf("qv_logvar_rating");
  g.qv_logvar_b = leaf("qv_logvar_b");
  g.qu_mu_W = leaf("qu_mu_W");
  g.qu_mu_b = leaf("qu_mu_b");
  g.qu_logvar_W = leaf("qu_logvar_W");
  g.qu_logvar_b = leaf("qu_logvar_b");
  return g;
}

// GRU input for the event consumed at a step: [item embedding, rating * w_y].
Var DynamicModel::event_input(Tape& tape, const Graph& g, std::uint32_t item, double rating) const {
  const std::array<Var, 2> parts = {ad::row(tape, g.item_embedding, item), ad::scale(tape, g.rating_embedding, rating)};
  return ad::concat(tape, parts);
}

ElboTerms DynamicModel::elbo(std::span<const RatedEvent> sequence, const ElboNoise& noise, std::vector<Tensor>* grads,
                             double scale) const {
  const std::size_t T = sequence.size();
  const std::size_t D = cfg_.embed_dim;
  if (T == 0) fail(ErrorCode::InvalidArgument, "elbo: empty sequence");
  if (noise.u.size() < T || noise.v.size() != D) fail(ErrorCode::ShapeMismatch, "elbo: noise does not match sequence");
  for (const auto& e : sequence)
    if (e.item >= n_items_) fail(ErrorCode::InvalidArgument, "elbo: item index out of range");

  Tape tape;
  const Graph g = bind(tape, grads);
  const double floor = cfg_.variance_floor;

  // q(v): mean-pooled per-event linear maps of (item, rating).
  Var pooled_mu, pooled_lv;
  for (std::size_t k = 0; k < T; ++k) {
    const double y = standardize(sequence[k].rating);
    const Var fm = ad::add(tape, ad::row(tape, g.qv_mu_item, sequence[k].item), ad::scale(tape, g.qv_mu_rating, y));
    const Var fl =
        ad::add(tape, ad::row(tape, g.qv_logvar_item, sequence[k].item), ad::scale(tape, g.qv_logvar_rating, y));
    pooled_mu = k == 0 ? fm : ad::add(tape, pooled_mu, fm);
    pooled_lv = k == 0 ? fl : ad::add(tape, pooled_lv, fl);
  }
  const double inv_t = 1.0 / static_cast<double>(T);
  const Var mu_v = ad::add(tape, ad::scale(tape, pooled_mu, inv_t), g.qv_mu_b);
  const Var var_v = ad::exp_floor(tape, ad::add(tape, ad::scale(tape, pooled_lv, inv_t), g.qv_logvar_b), floor);
  const Var zero = tape.constant(Tensor(Shape{D}, 0.0));
  const Var one = tape.constant(Tensor(Shape{D}, 1.0));
  const Var kl_v = ad::gaussian_kl(tape, mu_v, var_v, zero, one);
  const Var v = ad::reparam_sample(tape, mu_v, var_v, noise.v);

  ElboTerms terms;
  terms.kl_v = tape.value(kl_v).item();
  Var total = ad::scale(tape, kl_v, -1.0);
  Var h = tape.constant(Tensor(Shape{cfg_.hidden_dim}, 0.0));
  std::uint32_t prev_item = static_cast<std::uint32_t>(n_items_);
  double prev_y = 0.0;
  for (std::size_t k = 0; k < T; ++k) {
    h = ad::gru_cell(tape, event_input(tape, g, prev_item, prev_y), h, g.gru);
    const Var mu_p = ad::affine(tape, h, g.prior_mu_W, g.prior_mu_b);
    const Var var_p = ad::exp_floor(tape, ad::affine(tape, h, g.prior_logvar_W, g.prior_logvar_b), floor);
    const std::array<Var, 3> q_parts = {h, ad::row(tape, g.item_embedding, sequence[k].item), v};
    const Var q_in = ad::concat(tape, q_parts);
    const Var mu_q = ad::affine(tape, q_in, g.qu_mu_W, g.qu_mu_b);
    const Var var_q = ad::exp_floor(tape, ad::affine(tape, q_in, g.qu_logvar_W, g.qu_logvar_b), floor);
    const Var kl_u = ad::gaussian_kl(tape, mu_q, var_q, mu_p, var_p);
    const Var u = ad::reparam_sample(tape, mu_q, var_q, noise.u[k]);
    const std::array<Var, 2> z_parts = {v, u};
    const Var logits = ad::affine(tape, ad::concat(tape, z_parts), g.exposure_W, g.exposure_b);
    const Var lp = ad::softmax_logprob(tape, logits, sequence[k].item);
    terms.kl_u.push_back(tape.value(kl_u).item());
    terms.log_prob.push_back(tape.value(lp).item());
    total = ad::add(tape, total, ad::sub(tape, lp, kl_u));
    prev_item = sequence[k].item;
    prev_y = standardize(sequence[k].rating);
  }
  terms.elbo = tape.value(total).item();
  if (!std::isfinite(terms.elbo)) {
    std::size_t bad = 0;
    while (bad < T && std::isfinite(terms.log_prob[bad]) && std::isfinite(terms.kl_u[bad])) ++bad;
    fail(ErrorCode::Numeric, "elbo: non-finite value at step " + std::to_string(bad + 1));
  }
  if (grads != nullptr) tape.backward(ad::scale(tape, total, scale));
  return terms;
}

std::vector<double> DynamicModel::posterior_propensities(std::span<const RatedEvent> sequence) const {
  const auto terms = elbo(sequence, ElboNoise::zeros(sequence.size(), cfg_.embed_dim));
  std::vector<double> p;
  p.reserve(terms.log_prob.size());
  for (double lp : terms.log_prob) p.push_back(std::exp(lp));
  return p;
}

std::vector<std::vector<double>> DynamicModel::predict_steps(std::size_t, std::span<const RatedEvent> sequence,
                                                             std::size_t first) const {
  std::vector<std::vector<double>> out;
  if (first >= sequence.size()) return out;
  Tape tape;
  const Graph g = bind(tape, nullptr);
  const std::size_t D = cfg_.embed_dim;
  std::vector<double> pooled(D, 0.0);
  const Tensor& qv_item = params_.values[params_.index_of("qv_mu_item")];
  const Tensor& qv_rating = params_.values[params_.index_of("qv_mu_rating")];
  const Tensor& qv_b = params_.values[params_.index_of("qv_mu_b")];

  Var h = tape.constant(Tensor(Shape{cfg_.hidden_dim}, 0.0));
  std::uint32_t prev_item = static_cast<std::uint32_t>(n_items_);
  double prev_y = 0.0;
  for (std::size_t t = 0; t < sequence.size(); ++t) {
    h = ad::gru_cell(tape, event_input(tape, g, prev_item, prev_y), h, g.gru);
    if (t >= first) {
      Tensor mu_v(Shape{D});
      for (std::size_t d = 0; d < D; ++d) mu_v[d] = (t > 0 ? pooled[d] / static_cast<double>(t) : 0.0) + qv_b[d];
      const Var u = ad::affine(tape, h, g.prior_mu_W, g.prior_mu_b);
      const std::array<Var, 2> z_parts = {tape.constant(std::move(mu_v)), u};
      const Var logits = ad::affine(tape, ad::concat(tape, z_parts), g.exposure_W, g.exposure_b);
      std::vector<double> p(tape.value(logits).values().begin(), tape.value(logits).values().end());
      ad::softmax_inplace(p);
      out.push_back(std::move(p));
    }
    const auto& e = sequence[t];
    if (e.item >= n_items_) fail(ErrorCode::InvalidArgument, "predict: item index out of range");
    const double y = standardize(e.rating);
    for (std::size_t d = 0; d < D; ++d) pooled[d] += qv_item.at(e.item, d) + y * qv_rating[d];
    prev_item = e.item;
    prev_y = y;
  }
  return out;
}

std::vector<double> DynamicModel::predict(std::size_t user, std::span<const RatedEvent> history) const {
  // One extra placeholder event makes the final step condition on the whole history.
  std::vector<RatedEvent> seq(history.begin(), history.end());
  seq.push_back({0, rating_mean_, 0});
  return predict_steps(user, seq, history.size()).front();
}

Checkpoint DynamicModel::to_checkpoint() const {
  Checkpoint c;
  c.kind = "dynamic";
  c.params = params_;
  c.meta = {{"n_items", n_items_},
            {"embed_dim", cfg_.embed_dim},
            {"hidden_dim", cfg_.hidden_dim},
            {"l2", cfg_.l2},
            {"lr", cfg_.lr},
            {"variance_floor", cfg_.variance_floor},
            {"rating_mean", rating_mean_},
            {"rating_sd", rating_sd_}};
  return c;
}

DynamicModel DynamicModel::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "dynamic") fail(ErrorCode::InvalidArgument, "checkpoint holds '" + ckpt.kind + "', not a dynamic model");
  DynamicConfig cfg;
  cfg.embed_dim = ckpt.meta.at("embed_dim").get<std::size_t>();
  cfg.hidden_dim = ckpt.meta.at("hidden_dim").get<std::size_t>();
  cfg.l2 = ckpt.meta.at("l2").get<double>();
  cfg.lr = ckpt.meta.at("lr").get<double>();
  cfg.variance_floor = ckpt.meta.at("variance_floor").get<double>();
  DynamicModel m(ckpt.meta.at("n_items").get<std::size_t>(), cfg);
  if (m.params_.names != ckpt.params.names) fail(ErrorCode::InvalidArgument, "dynamic checkpoint parameter manifest differs");
  for (std::size_t i = 0; i < m.params_.size(); ++i)
    if (m.params_.values[i].shape() != ckpt.params.values[i].shape())
      fail(ErrorCode::ShapeMismatch, "dynamic checkpoint: shape mismatch for '" + ckpt.params.names[i] + "'");
  m.params_ = ckpt.params;
  m.set_rating_moments(ckpt.meta.at("rating_mean").get<double>(), ckpt.meta.at("rating_sd").get<double>());
  return m;
}

namespace {

void rating_moments(const SplitDataset& ds, double& mean, double& sd) {
  double s = 0.0, s2 = 0.0;
  std::size_t n = 0;
  for (const auto& u : ds.users)
    for (const auto& e : u[Partition::Train]) {
      s += e.rating;
      s2 += e.rating * e.rating;
      ++n;
    }
  if (n == 0) fail(ErrorCode::EmptyDataset, "train_dynamic: empty train partition");
  mean = s / static_cast<double>(n);
  sd = std::sqrt(std::max(s2 / static_cast<double>(n) - mean * mean, 0.0));
  if (!(sd > 1e-12)) sd = 1.0;
}

template <class Fn>
void run_shards(std::size_t shards, Fn&& fn) {
  const std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (shards <= 1 || hw <= 1) {
    for (std::size_t s = 0; s < shards; ++s) fn(s);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t s = 1; s < shards; ++s) pool.emplace_back([&fn, s] { fn(s); });
  fn(0);
  for (auto& t : pool) t.join();
}

}  // namespace

DynamicModel train_dynamic(const SplitDataset& ds, const DynamicConfig& cfg, TrainingTrace* trace) {
  if (cfg.batch_users == 0 || cfg.shards == 0) fail(ErrorCode::InvalidArgument, "train_dynamic: batch and shards must be positive");
  DynamicModel model(ds.n_items, cfg);
  double mean = 0.0, sd = 1.0;
  rating_moments(ds, mean, sd);
  model.set_rating_moments(mean, sd);

  std::vector<std::size_t> users;
  for (std::size_t u = 0; u < ds.n_users; ++u)
    if (!ds.users[u][Partition::Train].empty()) users.push_back(u);
  const bool has_validation = ds.count(Partition::Validation) > 0;

  AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.l2 = cfg.l2;
  AdamState state(acfg, model.parameters());
  Rng shuffle_rng(derive_seed(cfg.seed, kShuffleStream));
  std::vector<std::vector<Tensor>> shard_grads(cfg.shards, model.parameters().zero_gradients());
  std::vector<double> shard_elbo(cfg.shards);
  std::vector<Tensor> total = model.parameters().zero_gradients();

  ParameterSet best = model.parameters();
  double best_score = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  TrainingTrace local;
  TrainingTrace& tr = trace ? *trace : local;
  std::size_t last_finite_epoch = 0;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(users.begin(), users.end(), shuffle_rng);
    double epoch_elbo = 0.0;
    for (std::size_t start = 0; start < users.size(); start += cfg.batch_users) {
      const std::size_t end = std::min(users.size(), start + cfg.batch_users);
      const double scale = -1.0 / static_cast<double>(end - start);
      run_shards(cfg.shards, [&](std::size_t s) {
        for (auto& g : shard_grads[s]) g.fill(0.0);
        shard_elbo[s] = 0.0;
        for (std::size_t p = start + s; p < end; p += cfg.shards) {
          const std::size_t u = users[p];
          const auto& seq = ds.users[u][Partition::Train];
          Rng noise_rng(derive_seed(cfg.seed ^ kNoiseStream, epoch * ds.n_users + u));
          const auto noise = cfg.stochastic ? ElboNoise::sample(noise_rng, seq.size(), cfg.embed_dim)
                                            : ElboNoise::zeros(seq.size(), cfg.embed_dim);
          shard_elbo[s] += model.elbo(seq, noise, &shard_grads[s], scale).elbo;
        }
      });
      for (std::size_t i = 0; i < total.size(); ++i) {
        total[i] = shard_grads[0][i];
        for (std::size_t s = 1; s < cfg.shards; ++s) {
          double* dst = total[i].data();
          const double* src = shard_grads[s][i].data();
          for (std::size_t e = 0; e < total[i].size(); ++e) dst[e] += src[e];
        }
      }
      for (double e : shard_elbo) epoch_elbo += e;
      adam_step(model.parameters(), total, state);
    }
    epoch_elbo /= static_cast<double>(users.size());
    if (!std::isfinite(epoch_elbo))
      fail(ErrorCode::Numeric, "train_dynamic: ELBO diverged; last finite epoch " + std::to_string(last_finite_epoch));
    last_finite_epoch = epoch;
    tr.train_elbo.push_back(epoch_elbo);

    const double score =
        has_validation ? evaluate_exposure(model, ds, Partition::Validation).nll : -epoch_elbo;
    tr.valid_nll.push_back(score);
    if (cfg.verbose)
      std::cerr << "dynamic epoch " << epoch << " elbo " << epoch_elbo << " valid_nll " << score << '\n';
    if (score < best_score) {
      best_score = score;
      best = model.parameters();
      tr.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  model.parameters() = best;
  return model;
}

PropensityTable estimate_propensities(const DynamicModel& model, const SplitDataset& ds) {
  PropensityTable t;
  t.model = model.tag();
  for (std::uint32_t u = 0; u < ds.n_users; ++u) {
    const auto& train = ds.users[u][Partition::Train];
    if (train.empty()) continue;
    const auto p = model.posterior_propensities(train);
    for (std::size_t k = 0; k < train.size(); ++k)
      t.entries.push_back({u, static_cast<std::uint32_t>(k + 1), train[k].item, p[k]});
  }
  return t;
}

}  // namespace fbd
