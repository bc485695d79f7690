#include "fbdebias/rating.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>

#include "fbdebias/error.hpp"
#include "fbdebias/metrics.hpp"
#include "fbdebias/rng.hpp"

namespace fbd {

namespace {
constexpr std::uint64_t kInitStream = 0x6af0;
constexpr std::uint64_t kShuffleStream = 0x6af1;
}  // namespace

GMFModel::GMFModel(std::size_t n_users, std::size_t n_items, std::size_t dim) {
  if (n_users == 0 || n_items == 0 || dim == 0) fail(ErrorCode::InvalidArgument, "GMF: dimensions must be positive");
  params_.add("alpha", Tensor(Shape{n_users, dim}));
  params_.add("beta", Tensor(Shape{n_items, dim}));
  params_.add("h", Tensor(Shape{dim}));
}

double GMFModel::predict(std::size_t user, std::size_t item) const {
  if (user >= n_users() || item >= n_items()) fail(ErrorCode::InvalidArgument, "GMF predict: index out of range");
  const auto a = alpha().row(user);
  const auto b = beta().row(item);
  const Tensor& w = h();
  double s = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) s += w[d] * a[d] * b[d];
  return s;
}

Checkpoint GMFModel::to_checkpoint() const {
  Checkpoint c;
  c.kind = "gmf";
  c.meta = {{"activation", "identity"}};
  c.params = params_;
  return c;
}

GMFModel GMFModel::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "gmf") fail(ErrorCode::InvalidArgument, "checkpoint holds '" + ckpt.kind + "', not a GMF model");
  const auto& p = ckpt.params;
  if (p.size() != 3 || p.names[0] != "alpha" || p.names[1] != "beta" || p.names[2] != "h")
    fail(ErrorCode::InvalidArgument, "GMF checkpoint parameter manifest differs");
  if (p.values[0].rank() != 2 || p.values[1].rank() != 2 || p.values[2].rank() != 1 ||
      p.values[0].cols() != p.values[2].size() || p.values[1].cols() != p.values[2].size())
    fail(ErrorCode::ShapeMismatch, "GMF checkpoint: inconsistent dimensions");
  GMFModel m;
  m.params_ = p;
  return m;
}

Rescale parse_rescale(std::string_view tag) {
  if (tag == "none") return Rescale::None;
  if (tag == "minmax") return Rescale::MinMax;
  fail(ErrorCode::InvalidArgument, "unknown rescale '" + std::string(tag) + "' (expected none or minmax)");
}

std::string_view rescale_name(Rescale r) { return r == Rescale::None ? "none" : "minmax"; }

IpsWeights clip_propensities(const PropensityTable& table, double lo, double hi, Rescale rescale) {
  if (!(lo > 0.0) || !(lo < hi) || !(hi <= 1.0))
    fail(ErrorCode::InvalidArgument, "clip bounds must satisfy 0 < lo < hi <= 1");
  IpsWeights w{{}, lo, hi, rescale};
  double pmin = std::numeric_limits<double>::infinity(), pmax = -pmin;
  for (const auto& e : table.entries) {
    if (!std::isfinite(e.propensity)) fail(ErrorCode::Numeric, "non-finite propensity");
    pmin = std::min(pmin, e.propensity);
    pmax = std::max(pmax, e.propensity);
  }
  w.weights.reserve(table.entries.size());
  for (const auto& e : table.entries) {
    double p = e.propensity;
    if (rescale == Rescale::MinMax && pmax > pmin) p = lo + (p - pmin) / (pmax - pmin) * (hi - lo);
    w.weights.push_back(1.0 / std::clamp(p, lo, hi));
  }
  return w;
}

double sips_risk(std::span<const ScoredEvent> events, std::span<const double> weights, std::size_t n_users,
                 std::size_t n_items, Loss loss) {
  if (weights.size() != events.size())
    fail(ErrorCode::ShapeMismatch, "sips_risk: " + std::to_string(weights.size()) + " weights for " +
                                       std::to_string(events.size()) + " events");
  if (n_users == 0 || n_items == 0) fail(ErrorCode::InvalidArgument, "sips_risk: N and M must be positive");
  std::vector<std::size_t> per_user(n_users, 0);
  for (const auto& e : events) {
    if (e.user >= n_users) fail(ErrorCode::InvalidArgument, "sips_risk: user index out of range");
    ++per_user[e.user];
  }
  double total = 0.0;
  for (std::size_t k = 0; k < events.size(); ++k) {
    const double r = events[k].prediction - events[k].truth;
    const double delta = loss == Loss::Squared ? r * r : std::abs(r);
    total += weights[k] * delta / static_cast<double>(per_user[events[k].user]);
  }
  return total / (static_cast<double>(n_users) * static_cast<double>(n_items));
}

std::vector<TrainEvent> train_events(const SplitDataset& ds, const IpsWeights* ips) {
  const std::size_t n = ds.count(Partition::Train);
  if (n == 0) fail(ErrorCode::EmptyDataset, "no train events");
  if (ips != nullptr && ips->weights.size() != n)
    fail(ErrorCode::ShapeMismatch, "propensity weights cover " + std::to_string(ips->weights.size()) +
                                       " events but the train split has " + std::to_string(n));
  std::vector<TrainEvent> out;
  out.reserve(n);
  std::size_t idx = 0;
  for (std::uint32_t u = 0; u < ds.n_users; ++u) {
    const auto& train = ds.users[u][Partition::Train];
    for (const auto& e : train) {
      const double w = ips ? ips->weights[idx] : 1.0;
      out.push_back({u, e.item, e.rating, w / static_cast<double>(train.size())});
      ++idx;
    }
  }
  double mean = 0.0;
  for (const auto& e : out) mean += e.weight;
  mean /= static_cast<double>(out.size());
  for (auto& e : out) e.weight /= mean;
  return out;
}

std::vector<double> event_weights(const SplitDataset& ds, const IpsWeights* ips) {
  std::vector<double> w;
  for (const auto& e : train_events(ds, ips)) w.push_back(e.weight);
  return w;
}

double gmf_batch_loss(const ParameterSet& params, std::span<const TrainEvent> batch, double l2,
                      std::vector<Tensor>* grads) {
  const Tensor& A = params.values[0];
  const Tensor& Bt = params.values[1];
  const Tensor& H = params.values[2];
  const std::size_t D = H.size();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  if (grads) *grads = params.zero_gradients();
  double loss = 0.0;
  for (const auto& ev : batch) {
    const auto a = A.row(ev.user);
    const auto b = Bt.row(ev.item);
    double pred = 0.0, reg = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      pred += H[d] * a[d] * b[d];
      reg += a[d] * a[d] + b[d] * b[d];
    }
    const double err = pred - ev.rating;
    loss += inv_b * (ev.weight * err * err + l2 * reg);
    if (grads) {
      const double g = 2.0 * inv_b * ev.weight * err;
      auto ga = (*grads)[0].row(ev.user);
      auto gb = (*grads)[1].row(ev.item);
      Tensor& gh = (*grads)[2];
      for (std::size_t d = 0; d < D; ++d) {
        ga[d] += g * H[d] * b[d] + 2.0 * inv_b * l2 * a[d];
        gb[d] += g * H[d] * a[d] + 2.0 * inv_b * l2 * b[d];
        gh[d] += g * a[d] * b[d];
      }
    }
  }
  double hn = 0.0;
  for (std::size_t d = 0; d < D; ++d) hn += H[d] * H[d];
  loss += l2 * hn;
  if (grads)
    for (std::size_t d = 0; d < D; ++d) (*grads)[2][d] += 2.0 * l2 * H[d];
  return loss;
}

namespace {

// Adam whose moments are only advanced on rows that received gradient in the
// current batch; bias correction uses the global step.
struct RowAdam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long step = 0;
  Tensor m_a, v_a, m_b, v_b, m_h, v_h;

  RowAdam(double lr_, const GMFModel& m)
      : lr(lr_),
        m_a(Tensor::zeros_like(m.alpha())),
        v_a(Tensor::zeros_like(m.alpha())),
        m_b(Tensor::zeros_like(m.beta())),
        v_b(Tensor::zeros_like(m.beta())),
        m_h(Tensor::zeros_like(m.h())),
        v_h(Tensor::zeros_like(m.h())) {}

  void update(std::span<double> p, std::span<const double> g, std::span<double> m, std::span<double> v) const {
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

double partition_mse(const GMFModel& model, const SplitDataset& ds, Partition part) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t u = 0; u < ds.n_users; ++u)
    for (const auto& e : ds.users[u][part]) {
      const double r = model.predict(u, e.item) - e.rating;
      s += r * r;
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

GMFModel train_gmf(const SplitDataset& ds, const GMFConfig& cfg, const IpsWeights* ips, GMFTrace* trace) {
  if (cfg.batch == 0 || cfg.dim == 0) fail(ErrorCode::InvalidArgument, "train_gmf: batch and dim must be positive");
  if (cfg.h_init != "ones" && cfg.h_init != "gaussian")
    fail(ErrorCode::InvalidArgument, "train_gmf: h_init must be 'ones' or 'gaussian'");
  std::vector<TrainEvent> events = train_events(ds, ips);
  GMFModel model(ds.n_users, ds.n_items, cfg.dim);
  Rng init(derive_seed(cfg.seed, kInitStream));
  for (auto& t : model.parameters().values)
    for (double& x : t.values()) x = cfg.init_scale * sample_standard_normal(init);
  if (cfg.h_init == "ones") model.h().fill(1.0);

  const std::size_t D = cfg.dim;
  RowAdam opt(cfg.lr, model);
  Tensor ga = Tensor::zeros_like(model.alpha());
  Tensor gb = Tensor::zeros_like(model.beta());
  Tensor gh = Tensor::zeros_like(model.h());
  std::vector<long> seen_u(ds.n_users, -1), seen_i(ds.n_items, -1);
  std::vector<std::uint32_t> touched_u, touched_i;
  Rng shuffle(derive_seed(cfg.seed, kShuffleStream));
  const bool has_valid = ds.count(Partition::Validation) > 0;

  GMFTrace local;
  GMFTrace& tr = trace ? *trace : local;
  ParameterSet best = model.parameters();
  double best_score = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  long batch_id = 0;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(events.begin(), events.end(), shuffle);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < events.size(); start += cfg.batch, ++batch_id) {
      const std::size_t end = std::min(events.size(), start + cfg.batch);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      touched_u.clear();
      touched_i.clear();
      gh.fill(0.0);
      for (std::size_t k = start; k < end; ++k) {
        const auto& ev = events[k];
        if (seen_u[ev.user] != batch_id) {
          seen_u[ev.user] = batch_id;
          touched_u.push_back(ev.user);
          std::fill_n(ga.row(ev.user).begin(), D, 0.0);
        }
        if (seen_i[ev.item] != batch_id) {
          seen_i[ev.item] = batch_id;
          touched_i.push_back(ev.item);
          std::fill_n(gb.row(ev.item).begin(), D, 0.0);
        }
      }
      const auto& A = model.alpha();
      const auto& B = model.beta();
      const auto& H = model.h();
      double loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& ev = events[k];
        const auto a = A.row(ev.user);
        const auto b = B.row(ev.item);
        double pred = 0.0, reg = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
          pred += H[d] * a[d] * b[d];
          reg += a[d] * a[d] + b[d] * b[d];
        }
        const double err = pred - ev.rating;
        loss += inv_b * (ev.weight * err * err + cfg.l2 * reg);
        const double g = 2.0 * inv_b * ev.weight * err;
        const double rg = 2.0 * inv_b * cfg.l2;
        auto gar = ga.row(ev.user);
        auto gbr = gb.row(ev.item);
        for (std::size_t d = 0; d < D; ++d) {
          gar[d] += g * H[d] * b[d] + rg * a[d];
          gbr[d] += g * H[d] * a[d] + rg * b[d];
          gh[d] += g * a[d] * b[d];
        }
      }
      double hn = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        hn += H[d] * H[d];
        gh[d] += 2.0 * cfg.l2 * H[d];
      }
      loss += cfg.l2 * hn;
      if (!std::isfinite(loss))
        fail(ErrorCode::Numeric, "train_gmf: loss diverged at epoch " + std::to_string(epoch) + " batch " +
                                     std::to_string(batches));
      ++opt.step;
      for (auto u : touched_u) opt.update(model.alpha().row(u), ga.row(u), opt.m_a.row(u), opt.v_a.row(u));
      for (auto j : touched_i) opt.update(model.beta().row(j), gb.row(j), opt.m_b.row(j), opt.v_b.row(j));
      opt.update(model.h().values(), gh.values(), opt.m_h.values(), opt.v_h.values());
      epoch_loss += loss;
      ++batches;
    }
    epoch_loss /= static_cast<double>(batches);
    tr.train_loss.push_back(epoch_loss);
    const double score = has_valid ? partition_mse(model, ds, Partition::Validation) : epoch_loss;
    tr.valid_mse.push_back(score);
    if (cfg.verbose) std::cerr << "gmf epoch " << epoch << " loss " << epoch_loss << " valid_mse " << score << '\n';
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

RatingMetrics evaluate_rating(const GMFModel& model, const SplitDataset& ds, Partition part) {
  std::vector<double> preds, clamped, truths;
  for (std::size_t u = 0; u < ds.n_users; ++u)
    for (const auto& e : ds.users[u][part]) {
      preds.push_back(model.predict(u, e.item));
      clamped.push_back(ds.scale.clamp(preds.back()));
      truths.push_back(e.rating);
    }
  if (preds.empty()) fail(ErrorCode::EmptyDataset, "no events in partition " + std::string(partition_name(part)));
  return {mse(preds, truths), mae(preds, truths), mse(clamped, truths), mae(clamped, truths), preds.size()};
}

std::vector<std::uint32_t> top_k(const GMFModel& model, std::size_t user, std::size_t k,
                                 std::span<const std::uint32_t> exclude) {
  const std::size_t m = model.n_items();
  std::vector<char> banned(m, 0);
  for (auto j : exclude) {
    if (j >= m) fail(ErrorCode::InvalidArgument, "top_k: excluded item out of range");
    banned[j] = 1;
  }
  std::vector<std::uint32_t> cand;
  cand.reserve(m);
  for (std::uint32_t j = 0; j < m; ++j)
    if (!banned[j]) cand.push_back(j);
  if (k > cand.size())
    fail(ErrorCode::InvalidArgument,
         "top_k: K=" + std::to_string(k) + " exceeds " + std::to_string(cand.size()) + " candidate items");
  std::vector<double> score(m);
  for (auto j : cand) score[j] = model.predict(user, j);
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                    [&](std::uint32_t a, std::uint32_t b) { return score[a] > score[b] || (score[a] == score[b] && a < b); });
  cand.resize(k);
  return cand;
}

std::vector<std::vector<std::uint32_t>> recommend_all(const GMFModel& model, const SplitDataset& ds, std::size_t k) {
  std::vector<std::vector<std::uint32_t>> lists(ds.n_users);
  for (std::size_t u = 0; u < ds.n_users; ++u) {
    std::vector<std::uint32_t> seen;
    for (const auto& part : ds.users[u].parts)
      for (const auto& e : part) seen.push_back(e.item);
    lists[u] = top_k(model, u, k, seen);
  }
  return lists;
}

std::vector<double> recommendation_counts(const std::vector<std::vector<std::uint32_t>>& lists, std::size_t n_items) {
  std::vector<double> c(n_items, 0.0);
  for (const auto& l : lists)
    for (auto j : l) {
      if (j >= n_items) fail(ErrorCode::InvalidArgument, "recommendation_counts: item out of range");
      c[j] += 1.0;
    }
  return c;
}

void export_predictions(const GMFModel& model, const SplitDataset& ds, Partition part,
                        const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "user,item,prediction\n";
  for (std::size_t u = 0; u < ds.n_users; ++u)
    for (const auto& e : ds.users[u][part]) {
      const std::string user = ds.user_ids.empty() ? std::to_string(u) : ds.user_ids[u];
      const std::string item = ds.item_ids.empty() ? std::to_string(e.item) : ds.item_ids[e.item];
      out << user << ',' << item << ',' << format_double(model.predict(u, e.item)) << '\n';
    }
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

}  // namespace fbd
