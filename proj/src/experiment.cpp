#include "fbdebias/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>
#include <tuple>

#include "fbdebias/error.hpp"
#include "fbdebias/metrics.hpp"
#include "fbdebias/rng.hpp"

namespace fbd {

namespace {

constexpr std::uint64_t kPfStream = 0xe0001;
constexpr std::uint64_t kDynamicStream = 0xe0002;
constexpr std::uint64_t kSelectStream = 0xe0003;
constexpr std::uint64_t kRunStream = 0xe1000;

template <class F>
void for_keys(const json& j, const std::string& what, F&& f) {
  if (!j.is_object()) fail(ErrorCode::InvalidArgument, what + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!f(it.key(), it.value())) fail(ErrorCode::InvalidArgument, "unknown key '" + it.key() + "' in " + what);
}

template <class T>
bool take(const std::string& key, const json& v, const char* name, T& field) {
  if (key != name) return false;
  try {
    field = v.get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, "bad value for '" + key + "': " + e.what());
  }
  return true;
}

}  // namespace

std::string version_tag() { return std::string("fbdebias ") + FBD_VERSION; }

json to_json(const SimConfig& c) {
  return {{"n_users", c.n_users},
          {"n_items", c.n_items},
          {"latent_dim", c.latent_dim},
          {"dirichlet_user_conc", c.dirichlet_user_conc},
          {"dirichlet_item_conc", c.dirichlet_item_conc},
          {"user_conc_scale", c.user_conc_scale},
          {"item_conc_scale", c.item_conc_scale},
          {"rating_variance", c.rating_variance},
          {"similarity_noise_variance", c.similarity_noise_variance},
          {"top_rank", c.top_rank},
          {"boost_factor", c.boost_factor},
          {"n_rounds", c.n_rounds},
          {"train_rounds", c.train_rounds},
          {"validation_rounds", c.validation_rounds},
          {"n_unbiased", c.n_unbiased},
          {"rating_max", c.rating_max},
          {"seed", c.seed}};
}

void update_from_json(SimConfig& c, const json& j) {
  for_keys(j, "simulation", [&](const std::string& k, const json& v) {
    return take(k, v, "n_users", c.n_users) || take(k, v, "n_items", c.n_items) ||
           take(k, v, "latent_dim", c.latent_dim) || take(k, v, "dirichlet_user_conc", c.dirichlet_user_conc) ||
           take(k, v, "dirichlet_item_conc", c.dirichlet_item_conc) ||
           take(k, v, "user_conc_scale", c.user_conc_scale) || take(k, v, "item_conc_scale", c.item_conc_scale) ||
           take(k, v, "rating_variance", c.rating_variance) ||
           take(k, v, "similarity_noise_variance", c.similarity_noise_variance) ||
           take(k, v, "top_rank", c.top_rank) || take(k, v, "boost_factor", c.boost_factor) ||
           take(k, v, "n_rounds", c.n_rounds) || take(k, v, "train_rounds", c.train_rounds) ||
           take(k, v, "validation_rounds", c.validation_rounds) || take(k, v, "n_unbiased", c.n_unbiased) ||
           take(k, v, "rating_max", c.rating_max) || take(k, v, "seed", c.seed);
  });
}

json to_json(const PFConfig& c) {
  return {{"factors", c.factors},       {"max_iters", c.max_iters}, {"tolerance", c.tolerance},
          {"user_shape", c.user_shape}, {"user_rate", c.user_rate}, {"item_shape", c.item_shape},
          {"item_rate", c.item_rate},   {"seed", c.seed}};
}

void update_from_json(PFConfig& c, const json& j) {
  for_keys(j, "pf", [&](const std::string& k, const json& v) {
    return take(k, v, "factors", c.factors) || take(k, v, "max_iters", c.max_iters) ||
           take(k, v, "tolerance", c.tolerance) || take(k, v, "user_shape", c.user_shape) ||
           take(k, v, "user_rate", c.user_rate) || take(k, v, "item_shape", c.item_shape) ||
           take(k, v, "item_rate", c.item_rate) || take(k, v, "seed", c.seed);
  });
}

json to_json(const DynamicConfig& c) {
  return {{"embed_dim", c.embed_dim},
          {"hidden_dim", c.hidden_dim},
          {"l2", c.l2},
          {"lr", c.lr},
          {"batch_users", c.batch_users},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"variance_floor", c.variance_floor},
          {"init_scale", c.init_scale},
          {"init_logvar", c.init_logvar},
          {"shards", c.shards},
          {"stochastic", c.stochastic},
          {"seed", c.seed}};
}

void update_from_json(DynamicConfig& c, const json& j) {
  for_keys(j, "dynamic", [&](const std::string& k, const json& v) {
    return take(k, v, "embed_dim", c.embed_dim) || take(k, v, "hidden_dim", c.hidden_dim) ||
           take(k, v, "l2", c.l2) || take(k, v, "lr", c.lr) || take(k, v, "batch_users", c.batch_users) ||
           take(k, v, "max_epochs", c.max_epochs) || take(k, v, "patience", c.patience) ||
           take(k, v, "variance_floor", c.variance_floor) || take(k, v, "init_scale", c.init_scale) ||
           take(k, v, "init_logvar", c.init_logvar) || take(k, v, "shards", c.shards) ||
           take(k, v, "stochastic", c.stochastic) || take(k, v, "seed", c.seed) || take(k, v, "verbose", c.verbose);
  });
}

json to_json(const GMFConfig& c) {
  return {{"dim", c.dim},
          {"l2", c.l2},
          {"lr", c.lr},
          {"batch", c.batch},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"init_scale", c.init_scale},
          {"h_init", c.h_init},
          {"seed", c.seed}};
}

void update_from_json(GMFConfig& c, const json& j) {
  for_keys(j, "gmf", [&](const std::string& k, const json& v) {
    return take(k, v, "dim", c.dim) || take(k, v, "l2", c.l2) || take(k, v, "lr", c.lr) ||
           take(k, v, "batch", c.batch) || take(k, v, "max_epochs", c.max_epochs) ||
           take(k, v, "patience", c.patience) || take(k, v, "init_scale", c.init_scale) ||
           take(k, v, "h_init", c.h_init) || take(k, v, "seed", c.seed) || take(k, v, "verbose", c.verbose);
  });
}

std::vector<json> expand_grid(const json& base, const json& grid) {
  std::vector<json> out{base};
  if (grid.is_null()) return out;
  if (!grid.is_object()) fail(ErrorCode::InvalidArgument, "grid must be an object of arrays");
  for (auto it = grid.begin(); it != grid.end(); ++it) {
    if (!it.value().is_array() || it.value().empty())
      fail(ErrorCode::InvalidArgument, "grid entry '" + it.key() + "' must be a nonempty array");
    std::vector<json> next;
    for (const auto& partial : out)
      for (const auto& v : it.value()) {
        json c = partial;
        c[it.key()] = v;
        next.push_back(std::move(c));
      }
    out = std::move(next);
  }
  return out;
}

void ExperimentConfig::validate() const {
  static const std::vector<std::string> kinds{"simulate", "movielens", "goodreads", "canonical"};
  if (std::find(kinds.begin(), kinds.end(), source.kind) == kinds.end())
    fail(ErrorCode::InvalidArgument, "unknown data source '" + source.kind + "'");
  if (source.kind != "simulate" && source.path.empty())
    fail(ErrorCode::InvalidArgument, "data source '" + source.kind + "' needs a path");
  if ((source.kind == "movielens" || source.kind == "goodreads") &&
      (source.period_start.empty() || source.period_end.empty()))
    fail(ErrorCode::InvalidArgument, "data source '" + source.kind + "' needs period_start and period_end");
  if (source.kind == "simulate") sim.validate();
  for (const auto& m : exposure_models)
    if (m != "pop" && m != "pf" && m != "dynamic") fail(ErrorCode::InvalidArgument, "unknown exposure model '" + m + "'");
  for (const auto& m : rating_methods) {
    if (m == "naive") continue;
    if (m == "true") {
      if (source.kind != "simulate") fail(ErrorCode::InvalidArgument, "rating method 'true' needs simulated data");
      continue;
    }
    if (std::find(exposure_models.begin(), exposure_models.end(), m) == exposure_models.end())
      fail(ErrorCode::InvalidArgument, "rating method '" + m + "' needs exposure model '" + m + "' in the config");
  }
  if (seeds.empty()) fail(ErrorCode::InvalidArgument, "seed list is empty");
  auto sorted = seeds;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    fail(ErrorCode::InvalidArgument, "seeds must be distinct");
  if (clip.lo.empty() || clip.hi.empty()) fail(ErrorCode::InvalidArgument, "clip grid is empty");
  if (rating_runs == 0) fail(ErrorCode::InvalidArgument, "rating_runs must be positive");
  if (top_k == 0) fail(ErrorCode::InvalidArgument, "top_k must be positive");
  // Every grid point must be a valid config, so typos fail before training.
  for (const auto& j : expand_grid(to_json(dynamic), dynamic_grid)) {
    DynamicConfig d;
    update_from_json(d, j);
  }
  for (const auto& j : expand_grid(to_json(gmf), gmf_grid)) {
    GMFConfig g;
    update_from_json(g, j);
    if (g.dim == 0 || g.batch == 0) fail(ErrorCode::InvalidArgument, "gmf: dim and batch must be positive");
    if (g.h_init != "ones" && g.h_init != "gaussian")
      fail(ErrorCode::InvalidArgument, "gmf: h_init must be 'ones' or 'gaussian'");
  }
}

json to_json(const ExperimentConfig& c) {
  return {{"source",
           {{"kind", c.source.kind},
            {"path", c.source.path},
            {"movies_path", c.source.movies_path},
            {"period_start", c.source.period_start},
            {"period_end", c.source.period_end},
            {"sample_users", c.source.sample_users}}},
          {"simulation", to_json(c.sim)},
          {"exposure_models", c.exposure_models},
          {"pf", to_json(c.pf)},
          {"dynamic", to_json(c.dynamic)},
          {"dynamic_grid", c.dynamic_grid},
          {"rating_methods", c.rating_methods},
          {"gmf", to_json(c.gmf)},
          {"gmf_grid", c.gmf_grid},
          {"clip", {{"lo", c.clip.lo}, {"hi", c.clip.hi}, {"rescale", rescale_name(c.clip.rescale)}}},
          {"rating_runs", c.rating_runs},
          {"top_k", c.top_k},
          {"seeds", c.seeds},
          {"output_dir", c.output_dir},
          {"threads", c.threads}};
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig c;
  for_keys(j, "experiment config", [&](const std::string& k, const json& v) {
    if (k == "source") {
      for_keys(v, "source", [&](const std::string& sk, const json& sv) {
        return take(sk, sv, "kind", c.source.kind) || take(sk, sv, "path", c.source.path) ||
               take(sk, sv, "movies_path", c.source.movies_path) ||
               take(sk, sv, "period_start", c.source.period_start) ||
               take(sk, sv, "period_end", c.source.period_end) ||
               take(sk, sv, "sample_users", c.source.sample_users);
      });
      return true;
    }
    if (k == "simulation") return update_from_json(c.sim, v), true;
    if (k == "pf") return update_from_json(c.pf, v), true;
    if (k == "dynamic") return update_from_json(c.dynamic, v), true;
    if (k == "gmf") return update_from_json(c.gmf, v), true;
    if (k == "clip") {
      for_keys(v, "clip", [&](const std::string& ck, const json& cv) {
        if (ck == "rescale") return c.clip.rescale = parse_rescale(cv.get<std::string>()), true;
        return take(ck, cv, "lo", c.clip.lo) || take(ck, cv, "hi", c.clip.hi);
      });
      return true;
    }
    return take(k, v, "exposure_models", c.exposure_models) || take(k, v, "dynamic_grid", c.dynamic_grid) ||
           take(k, v, "rating_methods", c.rating_methods) || take(k, v, "gmf_grid", c.gmf_grid) ||
           take(k, v, "rating_runs", c.rating_runs) || take(k, v, "top_k", c.top_k) ||
           take(k, v, "seeds", c.seeds) || take(k, v, "output_dir", c.output_dir) ||
           take(k, v, "threads", c.threads) || take(k, v, "verbose", c.verbose);
  });
  c.validate();
  return c;
}

SplitDataset load_source(const ExperimentConfig& cfg, std::uint64_t seed, SimulationResult* sim) {
  const auto& src = cfg.source;
  if (src.kind == "simulate") {
    SimConfig s = cfg.sim;
    s.seed = seed;
    SimulationResult r = simulate_interactions(generate_world(s));
    SplitDataset ds = r.dataset;
    if (sim) *sim = std::move(r);
    return ds;
  }
  if (src.kind == "canonical") return load_dataset(src.path);
  const PeriodSpec period = PeriodSpec::from_dates(src.period_start, src.period_end);
  if (src.kind == "movielens") {
    SplitDataset ds = build_movielens_split(load_interactions(src.path, RawFormat::MovielensCsv), period);
    if (!src.movies_path.empty()) attach_movielens_genres(ds, src.movies_path);
    return ds;
  }
  return build_goodreads_split(load_interactions(src.path, RawFormat::GoodreadsJsonLines), period, src.sample_users,
                               seed);
}

PropensityTable true_propensity_table(const SimulationResult& sim) {
  PropensityTable t;
  t.model = "true";
  const auto& ds = sim.dataset;
  for (std::uint32_t u = 0; u < ds.n_users; ++u) {
    const auto& train = ds.users[u][Partition::Train];
    for (std::size_t k = 0; k < train.size(); ++k)
      t.entries.push_back({u, static_cast<std::uint32_t>(k + 1), train[k].item, sim.true_propensity(u, k)});
  }
  return t;
}

const ExposureOutcome& WorldResult::exposure_of(const std::string& model) const {
  for (const auto& e : exposure)
    if (e.model == model) return e;
  fail(ErrorCode::InvalidArgument, "no exposure result for '" + model + "'");
}

const RatingOutcome& WorldResult::rating_of(const std::string& method) const {
  for (const auto& r : rating)
    if (r.method == method) return r;
  fail(ErrorCode::InvalidArgument, "no rating result for '" + method + "'");
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::unique_ptr<ExposureModel> train_exposure_model(const ExperimentConfig& cfg, const SplitDataset& ds,
                                                    const std::string& model, std::uint64_t seed, json* selected) {
  if (model == "pop") return std::make_unique<PopModel>(train_pop(ds));
  if (model == "pf") {
    PFConfig c = cfg.pf;
    c.seed = derive_seed(seed, kPfStream);
    if (selected) *selected = to_json(c);
    return std::make_unique<PFModel>(train_pf(ds, c));
  }
  if (model != "dynamic") fail(ErrorCode::InvalidArgument, "unknown exposure model '" + model + "'");
  std::unique_ptr<DynamicModel> best;
  double best_nll = std::numeric_limits<double>::infinity();
  for (const auto& cand : expand_grid(to_json(cfg.dynamic), cfg.dynamic_grid)) {
    DynamicConfig c = cfg.dynamic;
    update_from_json(c, cand);
    c.seed = derive_seed(seed, kDynamicStream);
    c.verbose = c.verbose || cfg.verbose;
    auto m = std::make_unique<DynamicModel>(train_dynamic(ds, c));
    const double v = evaluate_exposure(*m, ds, Partition::Validation).nll;
    if (v < best_nll) {
      best_nll = v;
      best = std::move(m);
      if (selected) *selected = to_json(c);
    }
  }
  return best;
}

PropensityTable model_propensities(const ExposureModel& model, const SplitDataset& ds) {
  if (const auto* d = dynamic_cast<const DynamicModel*>(&model)) return estimate_propensities(*d, ds);
  return static_propensities(model, ds);
}

ExposureOutcome fit_exposure(const ExperimentConfig& cfg, const SplitDataset& ds, const std::string& model,
                             std::uint64_t seed) {
  ExposureOutcome out;
  out.model = model;
  const auto m = train_exposure_model(cfg, ds, model, seed, &out.selected);
  out.validation = evaluate_exposure(*m, ds, Partition::Validation);
  out.test = evaluate_exposure(*m, ds, Partition::ExposureTest);
  out.propensities = model_propensities(*m, ds);
  out.propensities.validate_against(ds);
  return out;
}

IpsWeights select_clip(const SplitDataset& ds, const PropensityTable& table, const ClipGrid& grid,
                       const GMFConfig& gmf, std::size_t threads, double* best_mse) {
  std::vector<std::pair<double, double>> bounds;
  for (double lo : grid.lo)
    for (double hi : grid.hi)
      if (lo < hi) bounds.emplace_back(lo, hi);
  if (bounds.empty()) fail(ErrorCode::InvalidArgument, "clip grid has no pair with lo < hi");
  std::vector<double> scores(bounds.size());
  parallel_for(bounds.size(), threads, [&](std::size_t i) {
    const IpsWeights w = clip_propensities(table, bounds[i].first, bounds[i].second, grid.rescale);
    scores[i] = evaluate_rating(train_gmf(ds, gmf, &w), ds, Partition::Validation).mse;
  });
  const std::size_t best = static_cast<std::size_t>(std::min_element(scores.begin(), scores.end()) - scores.begin());
  if (best_mse) *best_mse = scores[best];
  return clip_propensities(table, bounds[best].first, bounds[best].second, grid.rescale);
}

WorldResult run_world(const ExperimentConfig& cfg, std::uint64_t seed) {
  WorldResult w;
  w.seed = seed;
  SimulationResult sim;
  const SplitDataset ds = load_source(cfg, seed, &sim);
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& m : cfg.exposure_models) {
    w.exposure.push_back(fit_exposure(cfg, ds, m, seed));
    if (cfg.verbose)
      std::cerr << "seed " << seed << " " << m << " exposure_test nll " << w.exposure.back().test.nll << " recall "
                << w.exposure.back().test.recall << '\n';
  }

  const auto t1 = std::chrono::steady_clock::now();
  w.exposure_seconds = std::chrono::duration<double>(t1 - t0).count();

  GMFConfig gmf = cfg.gmf;
  gmf.seed = derive_seed(seed, kSelectStream);
  const auto gmf_grid = expand_grid(to_json(cfg.gmf), cfg.gmf_grid);
  if (gmf_grid.size() > 1) {
    std::vector<double> scores(gmf_grid.size());
    parallel_for(gmf_grid.size(), cfg.threads, [&](std::size_t i) {
      GMFConfig c = gmf;
      update_from_json(c, gmf_grid[i]);
      c.seed = gmf.seed;
      scores[i] = evaluate_rating(train_gmf(ds, c, nullptr), ds, Partition::Validation).mse;
    });
    const auto best = std::min_element(scores.begin(), scores.end()) - scores.begin();
    update_from_json(gmf, gmf_grid[static_cast<std::size_t>(best)]);
    gmf.seed = derive_seed(seed, kSelectStream);
  }

  for (const auto& method : cfg.rating_methods) {
    RatingOutcome out;
    out.method = method;
    if (method == "true" && sim.exposures.empty())
      fail(ErrorCode::InvalidArgument, "rating method 'true' needs simulated data");
    if (method != "naive") {
      const PropensityTable table = method == "true" ? true_propensity_table(sim) : w.exposure_of(method).propensities;
      out.clip = select_clip(ds, table, cfg.clip, gmf, cfg.threads, &out.validation_mse);
    } else {
      out.validation_mse = evaluate_rating(train_gmf(ds, gmf, nullptr), ds, Partition::Validation).mse;
    }
    out.runs.resize(cfg.rating_runs);
    const IpsWeights* ips = out.clip ? &*out.clip : nullptr;
    parallel_for(cfg.rating_runs, cfg.threads, [&](std::size_t r) {
      GMFConfig c = gmf;
      c.seed = derive_seed(seed, kRunStream + r);
      const GMFModel model = train_gmf(ds, c, ips);
      RatingRun run;
      run.unbiased = evaluate_rating(model, ds, Partition::UnbiasedTest);
      const auto lists = recommend_all(model, ds, cfg.top_k);
      run.gini = gini(recommendation_counts(lists, ds.n_items));
      if (!ds.item_features.empty()) run.avg_dissimilarity = avg_dissimilarity(lists, ds.item_features);
      out.runs[r] = run;
    });
    if (out.clip) out.clip->weights.clear();
    if (cfg.verbose) {
      double m = 0.0;
      for (const auto& r : out.runs) m += r.unbiased.mse;
      std::cerr << "seed " << seed << " " << method << " unbiased mse " << m / static_cast<double>(out.runs.size())
                << '\n';
    }
    w.rating.push_back(std::move(out));
  }
  w.rating_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  return w;
}

std::vector<MetricRecord> world_records(const WorldResult& w) {
  std::vector<MetricRecord> recs;
  for (const auto& e : w.exposure) {
    for (const auto& [split, m] : {std::pair{"validation", e.validation}, std::pair{"exposure_test", e.test}}) {
      recs.push_back({"nll", split, e.model, w.seed, -1, m.nll});
      recs.push_back({"recall@50", split, e.model, w.seed, -1, m.recall});
      recs.push_back({"ndcg@50", split, e.model, w.seed, -1, m.ndcg});
    }
  }
  for (const auto& r : w.rating) {
    recs.push_back({"validation_mse", "validation", r.method, w.seed, -1, r.validation_mse});
    for (std::size_t i = 0; i < r.runs.size(); ++i) {
      const auto& run = r.runs[i];
      const auto ri = static_cast<std::int64_t>(i);
      recs.push_back({"mse", "unbiased_test", r.method, w.seed, ri, run.unbiased.mse});
      recs.push_back({"mae", "unbiased_test", r.method, w.seed, ri, run.unbiased.mae});
      recs.push_back({"mse_clamped", "unbiased_test", r.method, w.seed, ri, run.unbiased.mse_clamped});
      recs.push_back({"mae_clamped", "unbiased_test", r.method, w.seed, ri, run.unbiased.mae_clamped});
      recs.push_back({"gini", "top_k", r.method, w.seed, ri, run.gini});
      if (run.avg_dissimilarity) recs.push_back({"avg_dissimilarity", "top_k", r.method, w.seed, ri, *run.avg_dissimilarity});
    }
  }
  return recs;
}

std::vector<Aggregate> aggregate(const std::vector<MetricRecord>& records) {
  std::vector<Aggregate> out;
  std::map<std::tuple<std::string, std::string, std::string>, std::size_t> index;
  std::vector<std::vector<double>> values;
  for (const auto& r : records) {
    const auto key = std::make_tuple(r.metric, r.split, r.model);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, out.size()).first;
      out.push_back({r.metric, r.split, r.model, 0.0, 0.0, 0});
      values.emplace_back();
    }
    values[it->second].push_back(r.value);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& v = values[i];
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    out[i].mean = mean;
    out[i].std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    out[i].n = v.size();
  }
  return out;
}

RunReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  RunReport rep;
  rep.config = to_json(cfg);
  rep.version = version_tag();
  for (auto seed : cfg.seeds) {
    const auto recs = world_records(run_world(cfg, seed));
    rep.records.insert(rep.records.end(), recs.begin(), recs.end());
  }
  rep.aggregates = aggregate(rep.records);
  return rep;
}

json report_to_json(const RunReport& r) {
  json recs = json::array(), aggs = json::array();
  for (const auto& m : r.records)
    recs.push_back({{"metric", m.metric}, {"split", m.split}, {"model", m.model}, {"seed", m.seed}, {"run", m.run},
                    {"value", m.value}});
  for (const auto& a : r.aggregates)
    aggs.push_back({{"metric", a.metric}, {"split", a.split}, {"model", a.model}, {"mean", a.mean}, {"std", a.std},
                    {"n", a.n}});
  return {{"version", r.version}, {"config", r.config}, {"records", recs}, {"aggregates", aggs}};
}

RunReport report_from_json(const json& j) {
  RunReport r;
  try {
    r.version = j.at("version").get<std::string>();
    r.config = j.at("config");
    for (const auto& m : j.at("records"))
      r.records.push_back({m.at("metric").get<std::string>(), m.at("split").get<std::string>(),
                           m.at("model").get<std::string>(), m.at("seed").get<std::uint64_t>(),
                           m.at("run").get<std::int64_t>(), m.at("value").get<double>()});
    for (const auto& a : j.at("aggregates"))
      r.aggregates.push_back({a.at("metric").get<std::string>(), a.at("split").get<std::string>(),
                              a.at("model").get<std::string>(), a.at("mean").get<double>(), a.at("std").get<double>(),
                              a.at("n").get<std::size_t>()});
  } catch (const json::exception& e) {
    fail(ErrorCode::Parse, std::string("malformed report: ") + e.what());
  }
  const auto recomputed = aggregate(r.records);
  if (recomputed.size() != r.aggregates.size()) fail(ErrorCode::Parse, "report aggregates do not match its records");
  for (std::size_t i = 0; i < recomputed.size(); ++i) {
    const auto& a = r.aggregates[i];
    const auto& b = recomputed[i];
    if (a.metric != b.metric || a.split != b.split || a.model != b.model || a.n != b.n ||
        std::abs(a.mean - b.mean) > 1e-9 * (1.0 + std::abs(b.mean)) || std::abs(a.std - b.std) > 1e-9 * (1.0 + b.std))
      fail(ErrorCode::Parse, "report aggregate for " + a.metric + "/" + a.split + "/" + a.model +
                                 " does not match its records");
  }
  return r;
}

std::string report_to_csv(const RunReport& r) {
  std::ostringstream out;
  out << "metric,split,model,mean,std,n\n";
  for (const auto& a : r.aggregates)
    out << a.metric << ',' << a.split << ',' << a.model << ',' << format_double(a.mean) << ','
        << format_double(a.std) << ',' << a.n << '\n';
  return out.str();
}

}  // namespace fbd
