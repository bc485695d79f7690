// Exercises the shared library through its C header only.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "fbdebias/fbdebias.h"
#include "json.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* kSim = R"({"n_users": 80, "n_items": 60, "top_rank": 6, "seed": 3})";

json take_json(char* s) {
  REQUIRE(s != nullptr);
  json j = json::parse(s);
  fbd_string_free(s);
  return j;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Work {
  fs::path dir = fs::temp_directory_path() / ("fbd_capi_" + std::to_string(std::rand()));
  Work() { fs::create_directories(dir); }
  ~Work() { fs::remove_all(dir); }
  std::string operator/(const char* name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("c api: version, status names, null handling") {
  CHECK(std::string(fbd_version()) == "0.1.0");
  CHECK(std::string(fbd_status_name(FBD_OK)) == "ok");
  CHECK(std::string(fbd_status_name(FBD_ERR_PARSE)) != std::string(fbd_status_name(FBD_ERR_IO)));
  CHECK(fbd_simulate(kSim, nullptr, nullptr) == FBD_ERR_INVALID_ARGUMENT);
  CHECK(std::string(fbd_last_error()).size() > 0);
  fbd_dataset* ds = nullptr;
  CHECK(fbd_simulate("{not json", &ds, nullptr) == FBD_ERR_PARSE);
  CHECK(ds == nullptr);
  CHECK(fbd_simulate(R"({"n_users": 5, "bogus": 1})", &ds, nullptr) == FBD_ERR_INVALID_ARGUMENT);
  CHECK(std::string(fbd_last_error()).find("bogus") != std::string::npos);
  CHECK(fbd_dataset_load("/nonexistent/data.fdb", &ds) == FBD_ERR_IO);
  CHECK(std::string(fbd_last_error()).find("/nonexistent/data.fdb") != std::string::npos);
  fbd_dataset_free(nullptr);
  fbd_propensities_free(nullptr);
  fbd_exposure_free(nullptr);
  fbd_rating_free(nullptr);
  fbd_string_free(nullptr);
}

TEST_CASE("c api: simulate, save, load, deterministic bytes") {
  Work w;
  fbd_dataset* ds = nullptr;
  fbd_propensities* props = nullptr;
  REQUIRE(fbd_simulate(kSim, &ds, &props) == FBD_OK);
  char* info = nullptr;
  REQUIRE(fbd_dataset_info(ds, &info) == FBD_OK);
  const json j = take_json(info);
  CHECK(j["n_users"] == 80);
  CHECK(j["events"]["train"] == 80 * 20);
  CHECK(j["events"]["unbiased_test"] == 80 * 20);
  CHECK(fbd_propensities_size(props) == 80 * 20);

  REQUIRE(fbd_dataset_save(ds, (w / "a.fdb").c_str()) == FBD_OK);
  REQUIRE(fbd_propensities_save(props, (w / "a.tsv").c_str()) == FBD_OK);
  fbd_dataset* again = nullptr;
  fbd_propensities* props2 = nullptr;
  REQUIRE(fbd_simulate(kSim, &again, &props2) == FBD_OK);
  REQUIRE(fbd_dataset_save(again, (w / "b.fdb").c_str()) == FBD_OK);
  REQUIRE(fbd_propensities_save(props2, (w / "b.tsv").c_str()) == FBD_OK);
  CHECK(slurp(w / "a.fdb") == slurp(w / "b.fdb"));
  CHECK(slurp(w / "a.tsv") == slurp(w / "b.tsv"));

  fbd_dataset* loaded = nullptr;
  REQUIRE(fbd_dataset_load((w / "a.fdb").c_str(), &loaded) == FBD_OK);
  REQUIRE(fbd_dataset_save(loaded, (w / "c.fdb").c_str()) == FBD_OK);
  CHECK(slurp(w / "a.fdb") == slurp(w / "c.fdb"));
  fbd_propensities* lp = nullptr;
  REQUIRE(fbd_propensities_load((w / "a.tsv").c_str(), &lp) == FBD_OK);
  CHECK(fbd_propensities_size(lp) == fbd_propensities_size(props));

  fbd_dataset_free(ds);
  fbd_dataset_free(again);
  fbd_dataset_free(loaded);
  fbd_propensities_free(props);
  fbd_propensities_free(props2);
  fbd_propensities_free(lp);
}

TEST_CASE("c api: exposure and rating models") {
  Work w;
  fbd_dataset* ds = nullptr;
  REQUIRE(fbd_simulate(kSim, &ds, nullptr) == FBD_OK);

  for (const char* model : {"pop", "pf", "dynamic"}) {
    const json cfg = {{"model", model}, {"seed", 2}, {"pf", {{"max_iters", 10}}}, {"dynamic", {{"max_epochs", 2}, {"embed_dim", 4}, {"hidden_dim", 4}}}};
    fbd_exposure_model* m = nullptr;
    REQUIRE(fbd_exposure_train(ds, cfg.dump().c_str(), &m) == FBD_OK);
    char* out = nullptr;
    REQUIRE(fbd_exposure_evaluate(m, ds, "exposure_test", 50, &out) == FBD_OK);
    const json metrics = take_json(out);
    CHECK(metrics["nll"].get<double>() > 0.0);
    CHECK(metrics["events"] == 80 * 5);

    REQUIRE(fbd_exposure_save(m, (w / "m.ckpt").c_str()) == FBD_OK);
    fbd_exposure_model* back = nullptr;
    REQUIRE(fbd_exposure_load((w / "m.ckpt").c_str(), &back) == FBD_OK);
    REQUIRE(fbd_exposure_evaluate(back, ds, "exposure_test", 50, &out) == FBD_OK);
    CHECK(take_json(out)["nll"] == metrics["nll"]);
    CHECK(fbd_exposure_evaluate(m, ds, "train_set", 50, &out) == FBD_ERR_PARSE);

    fbd_propensities* p = nullptr;
    REQUIRE(fbd_exposure_propensities(m, ds, &p) == FBD_OK);
    CHECK(fbd_propensities_size(p) == 80 * 20);

    if (std::string(model) == "dynamic") {
      const json rcfg = {{"gmf", {{"dim", 8}, {"max_epochs", 3}}}, {"clip", {{"lo", {0.001, 0.01}}, {"hi", 1.0}}}};
      fbd_rating_model* r = nullptr;
      char* info = nullptr;
      REQUIRE(fbd_rating_train(ds, p, rcfg.dump().c_str(), &r, &info) == FBD_OK);
      const json ij = take_json(info);
      CHECK(ij["objective"] == "ips");
      CHECK(ij["clip"]["hi"] == 1.0);
      double y = 0.0;
      REQUIRE(fbd_rating_predict(r, 3, 7, &y) == FBD_OK);
      CHECK(fbd_rating_predict(r, 80, 7, &y) == FBD_ERR_INVALID_ARGUMENT);
      REQUIRE(fbd_rating_evaluate(r, ds, 10, &out) == FBD_OK);
      const json ev = take_json(out);
      CHECK(ev["mse"].get<double>() >= 0.0);
      CHECK(ev["gini"].get<double>() >= 0.0);
      REQUIRE(fbd_rating_save(r, (w / "r.ckpt").c_str()) == FBD_OK);
      fbd_rating_model* rb = nullptr;
      REQUIRE(fbd_rating_load((w / "r.ckpt").c_str(), &rb) == FBD_OK);
      double yb = 0.0;
      REQUIRE(fbd_rating_predict(rb, 3, 7, &yb) == FBD_OK);
      CHECK(y == yb);
      REQUIRE(fbd_rating_export_predictions(r, ds, "unbiased_test", (w / "p.csv").c_str()) == FBD_OK);
      CHECK(slurp(w / "p.csv").rfind("user,item,prediction\n", 0) == 0);
      CHECK(fbd_exposure_load((w / "r.ckpt").c_str(), &back) != FBD_OK);
      fbd_rating_free(r);
      fbd_rating_free(rb);

      fbd_rating_model* naive = nullptr;
      REQUIRE(fbd_rating_train(ds, nullptr, R"({"gmf": {"dim": 8, "max_epochs": 2}})", &naive, &info) == FBD_OK);
      CHECK(take_json(info)["objective"] == "naive");
      fbd_rating_free(naive);
    }
    fbd_propensities_free(p);
    fbd_exposure_free(m);
    fbd_exposure_free(back);
  }
  fbd_exposure_model* bad = nullptr;
  CHECK(fbd_exposure_train(ds, R"({"model": "mf"})", &bad) == FBD_ERR_INVALID_ARGUMENT);
  fbd_dataset_free(ds);
}

TEST_CASE("c api: experiment report, verification and config resolution") {
  const json cfg = {{"simulation", {{"n_users", 50}, {"n_items", 60}, {"top_rank", 6}}},
                    {"exposure_models", {"pop"}},
                    {"rating_methods", {"naive", "pop"}},
                    {"gmf", {{"dim", 4}, {"max_epochs", 2}}},
                    {"clip", {{"lo", {0.01}}, {"hi", {1.0}}}},
                    {"rating_runs", 2},
                    {"seeds", {4, 5}}};
  char* report = nullptr;
  REQUIRE(fbd_run_experiment(cfg.dump().c_str(), &report) == FBD_OK);
  json rep = take_json(report);
  CHECK(rep["version"] == std::string("fbdebias ") + fbd_version());
  CHECK(rep["config"]["seeds"] == json({4, 5}));
  char* csv = nullptr;
  REQUIRE(fbd_report_to_csv(rep.dump().c_str(), &csv) == FBD_OK);
  const std::string table = csv;
  fbd_string_free(csv);
  CHECK(table.rfind("metric,split,model,mean,std,n\n", 0) == 0);
  CHECK(table.find("mse,unbiased_test,naive,") != std::string::npos);

  rep["records"][0]["value"] = rep["records"][0]["value"].get<double>() + 1.0;
  CHECK(fbd_report_to_csv(rep.dump().c_str(), &csv) == FBD_ERR_PARSE);

  char* resolved = nullptr;
  REQUIRE(fbd_config_resolve("{}", &resolved) == FBD_OK);
  const json full = take_json(resolved);
  CHECK(full["simulation"]["n_users"] == 3000);
  CHECK(full["gmf"]["dim"] == 64);
  CHECK(fbd_config_resolve(R"({"seeds": [1, 1]})", &resolved) == FBD_ERR_INVALID_ARGUMENT);
}
