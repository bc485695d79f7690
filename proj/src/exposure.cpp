#include "fbdebias/exposure.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <boost/math/special_functions/digamma.hpp>

#include "fbdebias/error.hpp"
#include "fbdebias/rng.hpp"

namespace fbd {

std::vector<std::vector<double>> ExposureModel::predict_steps(std::size_t user, std::span<const RatedEvent> sequence,
                                                              std::size_t first) const {
  std::vector<std::vector<double>> out;
  for (std::size_t t = first; t < sequence.size(); ++t) out.push_back(predict(user, sequence.first(t)));
  return out;
}

void PropensityTable::validate_against(const SplitDataset& ds) const {
  std::size_t idx = 0;
  for (std::size_t u = 0; u < ds.n_users; ++u) {
    const auto& train = ds.users[u][Partition::Train];
    for (std::size_t k = 0; k < train.size(); ++k, ++idx) {
      if (idx >= entries.size()) fail(ErrorCode::InvalidArgument, "propensity table is missing train events");
      const auto& e = entries[idx];
      if (e.user != u || e.k != k + 1 || e.item != train[k].item)
        fail(ErrorCode::InvalidArgument, "propensity table entry " + std::to_string(idx) + " does not match user " +
                                             std::to_string(u) + " train event " + std::to_string(k + 1));
      if (!(e.propensity > 0.0 && e.propensity <= 1.0))
        fail(ErrorCode::InvalidArgument, "propensity outside (0,1] at entry " + std::to_string(idx));
    }
  }
  if (idx != entries.size()) fail(ErrorCode::InvalidArgument, "propensity table has entries beyond the train events");
}

void save_propensities(const PropensityTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write '" + path.string() + "'");
  out << "# model " << table.model << '\n';
  for (const auto& e : table.entries)
    out << e.user << '\t' << e.k << '\t' << e.item << '\t' << format_double(e.propensity) << '\n';
  if (!out) fail(ErrorCode::Io, "write failed for '" + path.string() + "'");
}

PropensityTable load_propensities(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path.string() + "'");
  PropensityTable t;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    if (line.starts_with("# model ")) {
      t.model = line.substr(8);
      continue;
    }
    if (line.starts_with('#')) continue;
    std::istringstream ls(line);
    std::string user, k, item, p;
    if (!std::getline(ls, user, '\t') || !std::getline(ls, k, '\t') || !std::getline(ls, item, '\t') ||
        !std::getline(ls, p, '\t'))
      fail(ErrorCode::Parse, path.filename().string() + ":" + std::to_string(n) + ": expected 4 tab-separated fields");
    const std::string ctx = path.filename().string() + ":" + std::to_string(n);
    PropensityEntry e;
    e.user = static_cast<std::uint32_t>(parse_double(user, ctx));
    e.k = static_cast<std::uint32_t>(parse_double(k, ctx));
    e.item = static_cast<std::uint32_t>(parse_double(item, ctx));
    e.propensity = parse_double(p, ctx);
    t.entries.push_back(e);
  }
  return t;
}

// ---------------------------------------------------------------- Pop

std::vector<double> PopModel::predict(std::size_t, std::span<const RatedEvent> history) const {
  std::vector<double> p = probs_;
  for (const auto& e : history) p[e.item] = 0.0;
  double total = 0.0;
  for (double x : p) total += x;
  if (!(total > 0.0)) fail(ErrorCode::InvalidArgument, "pop predict: history covers every item");
  for (double& x : p) x /= total;
  return p;
}

Checkpoint PopModel::to_checkpoint() const {
  Checkpoint c;
  c.kind = "pop";
  c.params.add("probs", Tensor(Shape{probs_.size()}, probs_));
  return c;
}

PopModel PopModel::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "pop") fail(ErrorCode::InvalidArgument, "checkpoint holds '" + ckpt.kind + "', not a pop model");
  const auto& t = ckpt.params.values.at(ckpt.params.index_of("probs"));
  return PopModel(std::vector<double>(t.values().begin(), t.values().end()));
}

PopModel train_pop(const SplitDataset& ds) {
  if (ds.count(Partition::Train) == 0) fail(ErrorCode::EmptyDataset, "train_pop: empty train partition");
  const double N = static_cast<double>(ds.n_users);
  std::vector<double> raw(ds.n_items, 0.0);
  for (const auto& u : ds.users)
    for (const auto& e : u[Partition::Train]) raw[e.item] += 1.0;
  const double floor = 1.0 / (N * static_cast<double>(ds.n_items));
  double total = 0.0;
  for (double& r : raw) {
    r = r > 0.0 ? r / N : floor;
    total += r;
  }
  for (double& r : raw) r /= total;
  return PopModel(std::move(raw));
}

// ---------------------------------------------------------------- PF

namespace {

struct GammaExpectations {
  Tensor mean;      // E[x]
  Tensor log_mean;  // E[log x]
};

GammaExpectations expectations(const Tensor& shape, const Tensor& rate) {
  GammaExpectations e{Tensor::zeros_like(shape), Tensor::zeros_like(shape)};
  for (std::size_t i = 0; i < shape.size(); ++i) {
    e.mean[i] = shape[i] / rate[i];
    e.log_mean[i] = boost::math::digamma(shape[i]) - std::log(rate[i]);
  }
  return e;
}

// E_q[log p(x)] - E_q[log q(x)] for Gamma prior (a, b) and posterior (shape, rate).
double gamma_elbo_term(const Tensor& shape, const Tensor& rate, const GammaExpectations& e, double a, double b) {
  double s = 0.0;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const double al = shape[i], be = rate[i];
    s += a * std::log(b) - std::lgamma(a) + (a - 1.0) * e.log_mean[i] - b * e.mean[i];
    s -= al * std::log(be) - std::lgamma(al) + (al - 1.0) * e.log_mean[i] - al;
  }
  return s;
}

struct Exposure {
  std::uint32_t user;
  std::uint32_t item;
};

double pf_elbo(const PFModel& m, const std::vector<Exposure>& obs, const PFConfig& cfg) {
  const auto et = expectations(m.theta_shape, m.theta_rate);
  const auto eb = expectations(m.beta_shape, m.beta_rate);
  const std::size_t K = cfg.factors;
  double s = 0.0;
  std::vector<double> buf(K);
  for (const auto& o : obs) {
    double mx = -INFINITY;
    for (std::size_t k = 0; k < K; ++k) {
      buf[k] = et.log_mean.at(o.user, k) + eb.log_mean.at(o.item, k);
      mx = std::max(mx, buf[k]);
    }
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(buf[k] - mx);
    s += mx + std::log(z);
  }
  for (std::size_t k = 0; k < K; ++k) {
    double su = 0.0, si = 0.0;
    for (std::size_t u = 0; u < et.mean.rows(); ++u) su += et.mean.at(u, k);
    for (std::size_t i = 0; i < eb.mean.rows(); ++i) si += eb.mean.at(i, k);
    s -= su * si;
  }
  s += gamma_elbo_term(m.theta_shape, m.theta_rate, et, cfg.user_shape, cfg.user_rate);
  s += gamma_elbo_term(m.beta_shape, m.beta_rate, eb, cfg.item_shape, cfg.item_rate);
  return s;
}

}  // namespace

double PFModel::rate(std::size_t user, std::size_t item) const {
  double s = 0.0;
  for (std::size_t k = 0; k < theta_shape.cols(); ++k)
    s += theta_shape.at(user, k) / theta_rate.at(user, k) * beta_shape.at(item, k) / beta_rate.at(item, k);
  return s;
}

std::vector<double> PFModel::predict(std::size_t user, std::span<const RatedEvent> history) const {
  if (user >= theta_shape.rows()) fail(ErrorCode::InvalidArgument, "pf predict: user out of range");
  const std::size_t M = n_items(), K = theta_shape.cols();
  std::vector<double> theta(K);
  for (std::size_t k = 0; k < K; ++k) theta[k] = theta_shape.at(user, k) / theta_rate.at(user, k);
  std::vector<double> p(M, 0.0);
  for (std::size_t j = 0; j < M; ++j)
    for (std::size_t k = 0; k < K; ++k) p[j] += theta[k] * beta_shape.at(j, k) / beta_rate.at(j, k);
  for (const auto& e : history) p[e.item] = 0.0;
  double total = 0.0;
  for (double x : p) total += x;
  if (!(total > 0.0)) fail(ErrorCode::Numeric, "pf predict: zero total rate");
  for (double& x : p) x /= total;
  return p;
}

Checkpoint PFModel::to_checkpoint() const {
  Checkpoint c;
  c.kind = "pf";
  c.params.add("theta_shape", theta_shape);
  c.params.add("theta_rate", theta_rate);
  c.params.add("beta_shape", beta_shape);
  c.params.add("beta_rate", beta_rate);
  c.meta["elbo_trace"] = elbo_trace;
  return c;
}

PFModel PFModel::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "pf") fail(ErrorCode::InvalidArgument, "checkpoint holds '" + ckpt.kind + "', not a pf model");
  PFModel m;
  m.theta_shape = ckpt.params.values.at(ckpt.params.index_of("theta_shape"));
  m.theta_rate = ckpt.params.values.at(ckpt.params.index_of("theta_rate"));
  m.beta_shape = ckpt.params.values.at(ckpt.params.index_of("beta_shape"));
  m.beta_rate = ckpt.params.values.at(ckpt.params.index_of("beta_rate"));
  if (ckpt.meta.contains("elbo_trace")) m.elbo_trace = ckpt.meta["elbo_trace"].get<std::vector<double>>();
  return m;
}

PFModel train_pf(const SplitDataset& ds, const PFConfig& cfg) {
  if (cfg.factors == 0) fail(ErrorCode::InvalidArgument, "train_pf: K must be >= 1");
  const std::size_t N = ds.n_users, M = ds.n_items, K = cfg.factors;
  std::vector<Exposure> obs;
  for (std::uint32_t u = 0; u < N; ++u)
    for (const auto& e : ds.users[u][Partition::Train]) obs.push_back({u, e.item});
  if (obs.empty()) fail(ErrorCode::EmptyDataset, "train_pf: empty train partition");

  Rng rng(derive_seed(cfg.seed, 0x9f));
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  PFModel m;
  m.theta_shape = Tensor(Shape{N, K});
  m.theta_rate = Tensor(Shape{N, K});
  m.beta_shape = Tensor(Shape{M, K});
  m.beta_rate = Tensor(Shape{M, K});
  for (std::size_t i = 0; i < N * K; ++i) {
    m.theta_shape[i] = cfg.user_shape + 0.01 * jitter(rng);
    m.theta_rate[i] = cfg.user_rate + 0.1 * jitter(rng);
  }
  for (std::size_t i = 0; i < M * K; ++i) {
    m.beta_shape[i] = cfg.item_shape + 0.01 * jitter(rng);
    m.beta_rate[i] = cfg.item_rate + 0.1 * jitter(rng);
  }

  std::vector<double> phi(K);
  double prev = -INFINITY;
  for (std::size_t iter = 0; iter < cfg.max_iters; ++iter) {
    const auto et = expectations(m.theta_shape, m.theta_rate);
    const auto eb = expectations(m.beta_shape, m.beta_rate);
    Tensor theta_shape(Shape{N, K}, cfg.user_shape);
    Tensor beta_shape(Shape{M, K}, cfg.item_shape);
    // Auxiliary multinomials, folded straight into the shape updates.
    for (const auto& o : obs) {
      double mx = -INFINITY;
      for (std::size_t k = 0; k < K; ++k) {
        phi[k] = et.log_mean.at(o.user, k) + eb.log_mean.at(o.item, k);
        mx = std::max(mx, phi[k]);
      }
      double z = 0.0;
      for (std::size_t k = 0; k < K; ++k) z += (phi[k] = std::exp(phi[k] - mx));
      for (std::size_t k = 0; k < K; ++k) {
        theta_shape.at(o.user, k) += phi[k] / z;
        beta_shape.at(o.item, k) += phi[k] / z;
      }
    }
    m.theta_shape = std::move(theta_shape);
    for (std::size_t k = 0; k < K; ++k) {
      double sb = 0.0;
      for (std::size_t i = 0; i < M; ++i) sb += eb.mean.at(i, k);
      for (std::size_t u = 0; u < N; ++u) m.theta_rate.at(u, k) = cfg.user_rate + sb;
    }
    m.beta_shape = std::move(beta_shape);
    for (std::size_t k = 0; k < K; ++k) {
      double st = 0.0;
      for (std::size_t u = 0; u < N; ++u) st += m.theta_shape.at(u, k) / m.theta_rate.at(u, k);
      for (std::size_t i = 0; i < M; ++i) m.beta_rate.at(i, k) = cfg.item_rate + st;
    }
    const double elbo = pf_elbo(m, obs, cfg);
    if (!std::isfinite(elbo)) fail(ErrorCode::Numeric, "train_pf: non-finite ELBO at iteration " + std::to_string(iter));
    m.elbo_trace.push_back(elbo);
    if (std::isfinite(prev) && std::abs(elbo - prev) < cfg.tolerance * std::abs(prev)) break;
    prev = elbo;
  }
  return m;
}

// ---------------------------------------------------------------- shared

PropensityTable static_propensities(const ExposureModel& model, const SplitDataset& ds) {
  PropensityTable t;
  t.model = model.tag();
  for (std::uint32_t u = 0; u < ds.n_users; ++u) {
    const auto& train = ds.users[u][Partition::Train];
    const auto steps = model.predict_steps(u, train, 0);
    for (std::size_t k = 0; k < train.size(); ++k)
      t.entries.push_back({u, static_cast<std::uint32_t>(k + 1), train[k].item, steps[k][train[k].item]});
  }
  return t;
}

std::vector<ExposureEval> exposure_evals(const ExposureModel& model, const SplitDataset& ds, Partition target) {
  if (target == Partition::UnbiasedTest || target == Partition::Train)
    fail(ErrorCode::InvalidArgument, "exposure evaluation targets validation or exposure_test");
  std::vector<ExposureEval> evals;
  for (std::size_t u = 0; u < ds.n_users; ++u) {
    const auto& user = ds.users[u];
    std::vector<RatedEvent> seq = user[Partition::Train];
    seq.insert(seq.end(), user[Partition::Validation].begin(), user[Partition::Validation].end());
    if (target == Partition::ExposureTest)
      seq.insert(seq.end(), user[Partition::ExposureTest].begin(), user[Partition::ExposureTest].end());
    const std::size_t first = seq.size() - user[target].size();
    const auto steps = model.predict_steps(u, seq, first);
    std::vector<std::uint32_t> history;
    for (std::size_t t = 0; t < first; ++t) history.push_back(seq[t].item);
    for (std::size_t t = first; t < seq.size(); ++t) {
      evals.push_back(make_exposure_eval(steps[t - first], seq[t].item, history));
      history.push_back(seq[t].item);
    }
  }
  return evals;
}

ExposureMetrics evaluate_exposure(const ExposureModel& model, const SplitDataset& ds, Partition target, std::size_t k) {
  const auto evals = exposure_evals(model, ds, target);
  ExposureMetrics m;
  m.events = evals.size();
  m.nll = nll(evals);
  m.recall = recall_at_k(evals, k);
  m.ndcg = ndcg_at_k(evals, k);
  return m;
}

}  // namespace fbd
