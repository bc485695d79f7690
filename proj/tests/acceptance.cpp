// Acceptance suite. One PASS/FAIL/SKIP line per criterion; tolerances are
// pinned below. Exits nonzero only when something throws: a FAIL that is a
// property of the simulated world, not a defect, is reported but does not
// break the build. Set FBD_ACCEPT_STRICT=1 to turn any FAIL into exit 1.
//
// Environment:
//   FBD_ACCEPT_WORLDS   number of simulated worlds (default 10)
//   FBD_MOVIELENS       Movielens-20M ratings.csv, enables criterion 7
//   FBD_GOODREADS       Goodreads interactions (json lines), enables criterion 7
//
// An optional argument names a file that receives a copy of the criterion
// lines.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "fbdebias/autodiff.hpp"
#include "fbdebias/dataset.hpp"
#include "fbdebias/dynamic.hpp"
#include "fbdebias/experiment.hpp"
#include "fbdebias/metrics.hpp"
#include "fbdebias/optim.hpp"
#include "fbdebias/rating.hpp"
#include "fbdebias/rng.hpp"
#include "fbdebias/simulator.hpp"
#include "sips_oracle.hpp"

using namespace fbd;

namespace {

// Criterion 1
constexpr double kLnItems = 6.907755278982137;
constexpr double kPopNllBand = 0.1;
constexpr double kRecallRatio = 1.4;
constexpr double kMagnitudeBand = 0.5;
constexpr double kRefNll[3] = {6.884, 7.035, 6.813};  // pop, pf, dynamic
constexpr double kRefRecall[3] = {0.0566, 0.0785, 0.1351};
constexpr double kExposureBudget = 45 * 60.0;
// Criterion 2
constexpr double kMinImprovement = 0.02;
constexpr double kRefMse[3] = {2.001, 1.945, 1.896};  // naive, pf, dynamic
constexpr double kRatingBudget = 20 * 60.0;
// Criterion 3
constexpr std::size_t kResamples = 2000;
constexpr double kSigmas = 3.0;
constexpr double kOracleBudget = 60.0;
// Criterion 4
constexpr double kGradTol = 1e-4;
// Criterion 6
constexpr std::size_t kGiniWins = 7;
// Criterion 7
constexpr double kSplitBand = 0.05;

int failures = 0;
std::ofstream report;

void line(const char* id, const std::string& status, const std::string& detail) {
  if (status == "FAIL") ++failures;
  std::cout << status << "  " << id << "  " << detail << std::endl;
  if (report.is_open()) report << status << "  " << id << "  " << detail << std::endl;
}

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

bool within(double v, double ref, double band) { return std::abs(v - ref) <= band * std::abs(ref); }

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

void unit_values() {
  std::vector<std::string> bad;
  if (std::abs(gini(std::vector<double>{0, 0, 0, 1}) - 0.75) > 1e-15) bad.push_back("gini");
  const std::vector<ExposureEval> second{{0.5, 2}};
  if (std::abs(ndcg_at_k(second, 50) - 1.0 / std::log2(3.0)) > 1e-15) bad.push_back("ndcg");
  const std::vector<double> one{1.0}, zero{0.0};
  if (std::abs(ad::gaussian_kl_value(one, one, zero, one) - 0.5) > 1e-15) bad.push_back("kl");
  const std::vector<ScoredEvent> ev{{0, 3.0, 1.0}};
  const std::vector<double> w{1.0 / 0.5};
  if (std::abs(sips_risk(ev, w, 1, 2) - 4.0) > 1e-12) bad.push_back("sips");
  const auto s = beta_shape_from_moments(0.5, 0.01);
  if (std::abs(s.a - 12.0) > 1e-9 || std::abs(s.b - 12.0) > 1e-9) bad.push_back("beta");
  std::string detail = "gini 3/4, ndcg 1/log2(3), kl 0.5, sips 4, beta(12,12)";
  for (const auto& b : bad) detail += " [" + b + " wrong]";
  line("5", bad.empty() ? "PASS" : "FAIL", detail);
}

void gradients() {
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
  const Objective elbo = [&](const ParameterSet& p, std::vector<Tensor>* grads) {
    DynamicModel probe = m;
    probe.parameters() = p;
    return probe.elbo(seq, noise, grads).elbo;
  };
  const auto re = grad_check(elbo, m.parameters(), 1e-5, kGradTol);

  GMFModel g(4, 5, 3);
  Rng grng(2);
  for (auto& t : g.parameters().values)
    for (double& x : t.values()) x = sample_standard_normal(grng);
  const std::vector<TrainEvent> batch{{0, 1, 3.0, 0.7}, {2, 4, -1.0, 2.5}, {0, 4, 0.5, 1.0}, {3, 1, 2.0, 4.0}};
  const Objective loss = [&](const ParameterSet& p, std::vector<Tensor>* grads) {
    return gmf_batch_loss(p, batch, 0.01, grads);
  };
  const auto rg = grad_check(loss, g.parameters(), 1e-5, kGradTol);
  std::ostringstream d;
  d << "max rel err elbo " << re.max_relative_error << " (" << re.parameter_name << "), gmf " << rg.max_relative_error
    << " (" << rg.parameter_name << "), tol " << kGradTol;
  line("4", re.max_relative_error < kGradTol && rg.max_relative_error < kGradTol ? "PASS" : "FAIL", d.str());
}

void sips_oracle() {
  const auto t = std::chrono::steady_clock::now();
  const auto r = testing::run_sips_oracle(kResamples, 42);
  const double secs = seconds_since(t);
  const bool sips_ok = std::abs(r.sips_mean - r.truth) < kSigmas * r.sips_se;
  const bool naive_off = std::abs(r.naive_mean - r.truth) > kSigmas * r.naive_se;
  std::ostringstream d;
  d << "R " << fmt(r.truth) << "  sips " << fmt(r.sips_mean) << " (" << fmt((r.sips_mean - r.truth) / r.sips_se, 2)
    << " se)  naive " << fmt(r.naive_mean) << " (" << fmt((r.naive_mean - r.truth) / r.naive_se, 2) << " se)  "
    << fmt(secs, 1) << "s";
  line("3", sips_ok && naive_off && secs < kOracleBudget ? "PASS" : "FAIL", d.str());
}

void simulation(std::size_t n_worlds) {
  ExperimentConfig cfg;
  cfg.exposure_models = {"pop", "pf", "dynamic"};
  cfg.rating_methods = {"naive", "pf", "dynamic"};
  const char* models[3] = {"pop", "pf", "dynamic"};
  const char* methods[3] = {"naive", "pf", "dynamic"};

  std::vector<double> nll[3], recall[3], ndcg[3], mse[3];
  double exposure_secs = 0.0, rating_secs = 0.0;
  std::size_t gini_wins = 0;
  for (std::size_t s = 0; s < n_worlds; ++s) {
    const WorldResult w = run_world(cfg, s);
    exposure_secs += w.exposure_seconds;
    rating_secs += w.rating_seconds;
    double world_mse[3] = {0.0, 0.0, 0.0};
    for (int i = 0; i < 3; ++i) {
      const auto& e = w.exposure_of(models[i]).test;
      nll[i].push_back(e.nll);
      recall[i].push_back(e.recall);
      ndcg[i].push_back(e.ndcg);
      const auto& runs = w.rating_of(methods[i]).runs;
      for (const auto& run : runs) {
        mse[i].push_back(run.unbiased.mse);
        world_mse[i] += run.unbiased.mse / static_cast<double>(runs.size());
      }
    }
    double g_naive = 0.0, g_dyn = 0.0;
    for (const auto& run : w.rating_of("naive").runs) g_naive += run.gini;
    for (const auto& run : w.rating_of("dynamic").runs) g_dyn += run.gini;
    if (g_dyn <= g_naive) ++gini_wins;
    std::ostringstream wl;
    wl << "world " << s << ": nll " << fmt(nll[0].back()) << "/" << fmt(nll[1].back()) << "/" << fmt(nll[2].back())
       << " recall " << fmt(recall[0].back()) << "/" << fmt(recall[1].back()) << "/" << fmt(recall[2].back())
       << " mse " << fmt(world_mse[0]) << "/" << fmt(world_mse[1]) << "/" << fmt(world_mse[2]) << " gini "
       << (g_dyn <= g_naive ? "win" : "loss") << "  (" << fmt(w.exposure_seconds, 0) << "s + "
       << fmt(w.rating_seconds, 0) << "s)";
    std::cerr << wl.str() << std::endl;
    if (report.is_open()) report << wl.str() << std::endl;
  }

  double N[3], R[3], D[3], E[3];
  for (int i = 0; i < 3; ++i) {
    N[i] = mean_of(nll[i]);
    R[i] = mean_of(recall[i]);
    D[i] = mean_of(ndcg[i]);
    E[i] = mean_of(mse[i]);
  }
  const std::string worlds = std::to_string(n_worlds) + " worlds";

  {
    std::vector<std::string> failed;
    if (!(N[2] < N[0])) failed.push_back("nll(dyn) < nll(pop)");
    if (!(std::abs(N[0] - kLnItems) <= kPopNllBand)) failed.push_back("nll(pop) ~ ln 1000");
    if (!(R[2] >= kRecallRatio * R[1])) failed.push_back("recall(dyn) >= 1.4 recall(pf)");
    if (!(R[1] >= R[0])) failed.push_back("recall(pf) >= recall(pop)");
    for (int i = 0; i < 3; ++i) {
      if (!within(N[i], kRefNll[i], kMagnitudeBand)) failed.push_back(std::string("nll magnitude ") + models[i]);
      if (!within(R[i], kRefRecall[i], kMagnitudeBand)) failed.push_back(std::string("recall magnitude ") + models[i]);
    }
    if (exposure_secs > kExposureBudget) failed.push_back("runtime");
    std::ostringstream d;
    d << worlds << "; nll pop/pf/dyn " << fmt(N[0]) << "/" << fmt(N[1]) << "/" << fmt(N[2]) << "; recall@50 "
      << fmt(R[0]) << "/" << fmt(R[1]) << "/" << fmt(R[2]) << "; ndcg@50 " << fmt(D[0]) << "/" << fmt(D[1]) << "/"
      << fmt(D[2]) << "; " << fmt(exposure_secs / 60.0, 1) << " min";
    for (const auto& f : failed) d << " [" << f << " violated]";
    line("1", failed.empty() ? "PASS" : "FAIL", d.str());
  }
  {
    std::vector<std::string> failed;
    const double improvement = (E[0] - E[2]) / E[0];
    if (!(E[2] < E[1])) failed.push_back("dyn < pf");
    if (!(E[1] <= E[0])) failed.push_back("pf <= naive");
    if (!(improvement >= kMinImprovement)) failed.push_back("improvement >= 2%");
    if (rating_secs > kRatingBudget) failed.push_back("runtime");
    std::ostringstream d;
    d << worlds << " x " << cfg.rating_runs << " runs; mse naive/pf/dyn " << fmt(E[0]) << "/" << fmt(E[1]) << "/"
      << fmt(E[2]) << " (reference " << kRefMse[0] << "/" << kRefMse[1] << "/" << kRefMse[2]
      << "); dyn vs naive " << fmt(100.0 * improvement, 2) << "%; " << fmt(rating_secs / 60.0, 1) << " min";
    for (const auto& f : failed) d << " [" << f << " violated]";
    line("2", failed.empty() ? "PASS" : "FAIL", d.str());
  }
  {
    const std::size_t needed = (kGiniWins * n_worlds + 9) / 10;
    std::ostringstream d;
    d << "gini(dyn-ips) <= gini(naive) on " << gini_wins << " of " << n_worlds << " worlds (need " << needed << ")";
    line("6", gini_wins >= needed ? "PASS" : "FAIL", d.str());
  }
}

struct PeriodRow {
  const char* start;
  const char* end;
  double users, items, records;
};

void real_data() {
  const char* ml = std::getenv("FBD_MOVIELENS");
  const char* gr = std::getenv("FBD_GOODREADS");
  if (!ml && !gr) {
    line("7", "SKIP", "no real data (set FBD_MOVIELENS and/or FBD_GOODREADS)");
    return;
  }
  std::vector<std::string> failed;
  std::ostringstream d;
  auto compare = [&](const std::string& tag, const SplitDataset& ds, const PeriodRow& row) {
    const double recs = static_cast<double>(ds.count(Partition::UnbiasedTest) + ds.count(Partition::Train) +
                                            ds.count(Partition::Validation) + ds.count(Partition::ExposureTest));
    d << tag << " " << ds.n_users << "/" << ds.n_items << "/" << recs << "; ";
    if (!within(static_cast<double>(ds.n_users), row.users, kSplitBand) ||
        !within(static_cast<double>(ds.n_items), row.items, kSplitBand) || !within(recs, row.records, kSplitBand))
      failed.push_back(tag + " split statistics");
  };
  if (ml) {
    const PeriodRow rows[3] = {{"2005-01-01", "2008-12-31", 16627, 1493, 980617},
                               {"2006-01-01", "2010-12-31", 16835, 1669, 982136},
                               {"2007-01-01", "2011-12-31", 15717, 1674, 905040}};
    const auto raw = load_interactions(ml, RawFormat::MovielensCsv);
    for (int p = 0; p < 3; ++p) {
      const auto ds = build_movielens_split(raw, PeriodSpec::from_dates(rows[p].start, rows[p].end));
      compare("ml-P" + std::to_string(p + 1), ds, rows[p]);
      const auto pos = rating_by_position(ds, 1, 16);
      double early = 0.0;
      std::size_t n = 0;
      for (std::size_t k = 0; k < 15; ++k)
        if (pos[k].mean) {
          early += *pos[k].mean * static_cast<double>(pos[k].count);
          n += pos[k].count;
        }
      early /= static_cast<double>(n);
      if (!(pos[15].mean && *pos[15].mean > early)) failed.push_back("ml-P" + std::to_string(p + 1) + " k=16 jump");
    }
  }
  if (gr) {
    const PeriodRow rows[3] = {{"2011-09-16", "2012-12-31", 10000, 2970, 642658},
                               {"2013-01-01", "2014-12-31", 10000, 2992, 648177},
                               {"2015-01-01", "2017-12-31", 10000, 2999, 651600}};
    const auto raw = load_interactions(gr, RawFormat::GoodreadsJsonLines);
    for (int p = 0; p < 3; ++p)
      compare("gr-P" + std::to_string(p + 1),
              build_goodreads_split(raw, PeriodSpec::from_dates(rows[p].start, rows[p].end), 10000, 0), rows[p]);
  }
  for (const auto& f : failed) d << " [" << f << " violated]";
  line("7", failed.empty() ? "PASS" : "FAIL", d.str());
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) report.open(argv[1]);
  std::size_t n_worlds = 10;
  if (const char* e = std::getenv("FBD_ACCEPT_WORLDS")) n_worlds = std::strtoul(e, nullptr, 10);
  try {
    unit_values();
    gradients();
    sips_oracle();
    simulation(n_worlds);
    real_data();
  } catch (const std::exception& e) {
    std::cout << "ERROR  " << e.what() << std::endl;
    if (report.is_open()) report << "ERROR  " << e.what() << std::endl;
    return 2;
  }
  std::cout << failures << " criterion(s) failed" << std::endl;
  if (report.is_open()) report << failures << " criterion(s) failed" << std::endl;
  const char* strict = std::getenv("FBD_ACCEPT_STRICT");
  return strict && std::string(strict) == "1" && failures > 0 ? 1 : 0;
}
