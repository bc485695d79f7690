// Command-line front end. Talks to the library only through fbdebias.h.
//
// Configuration precedence (later wins): built-in defaults, the --config
// JSON file, --set key.path=value overrides, then dedicated flags such as
// --seed or --out-dir.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fbdebias/fbdebias.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliError : std::runtime_error {
  int code;
  CliError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

void check(fbd_status s, const std::string& context) {
  if (s != FBD_OK)
    throw CliError(static_cast<int>(s), context + ": " + fbd_status_name(s) + ": " + fbd_last_error());
}

// Owns a string returned by the library.
std::string take(char* s) {
  std::string out = s ? s : "";
  fbd_string_free(s);
  return out;
}

template <class T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Free(p); }
};
using Dataset = Handle<fbd_dataset, fbd_dataset_free>;
using Props = Handle<fbd_propensities, fbd_propensities_free>;
using Exposure = Handle<fbd_exposure_model, fbd_exposure_free>;
using Rating = Handle<fbd_rating_model, fbd_rating_free>;

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CliError(FBD_ERR_IO, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out || !(out << text)) throw CliError(FBD_ERR_IO, "cannot write '" + path.string() + "'");
}

json load_config(const std::string& path, const std::vector<std::string>& sets) {
  json cfg = json::object();
  if (!path.empty()) {
    try {
      cfg = json::parse(read_file(path));
    } catch (const json::exception& e) {
      throw CliError(FBD_ERR_PARSE, "config '" + path + "': " + e.what());
    }
  }
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw CliError(FBD_ERR_INVALID_ARGUMENT, "--set expects key.path=value, got '" + s + "'");
    std::string pointer = "/" + s.substr(0, eq);
    for (auto& c : pointer)
      if (c == '.') c = '/';
    const std::string raw = s.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    cfg[json::json_pointer(pointer)] = value;
  }
  return cfg;
}

json section(const json& cfg, const char* key) { return cfg.contains(key) ? cfg.at(key) : json::object(); }

void print_json(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) std::cout << text << '\n';
  else write_file(out_path, text + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feedback-loop debiasing toolkit: simulate, train exposure and rating models, evaluate."};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(fbd_version()));

  std::string config_path;
  std::vector<std::string> sets;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--set", sets, "Override a config key, e.g. --set simulation.n_users=500");
  };

  // simulate
  auto* sim = app.add_subcommand("simulate", "Generate a feedback-loop biased dataset");
  std::string sim_out, sim_props;
  std::optional<std::uint64_t> sim_seed;
  add_config(sim);
  sim->add_option("-o,--out", sim_out, "Output dataset path")->required();
  sim->add_option("--true-propensities", sim_props, "Also write the simulator's train propensities");
  sim->add_option("--seed", sim_seed, "World seed");

  // ingest
  auto* ing = app.add_subcommand("ingest", "Convert a raw rating dump into the canonical dataset format");
  std::string ing_format, ing_input, ing_movies, ing_start, ing_end, ing_out;
  std::size_t ing_sample = 10000;
  std::uint64_t ing_seed = 0;
  ing->add_option("--format", ing_format, "movielens | goodreads | canonical")->required();
  ing->add_option("-i,--input", ing_input, "Raw interactions file")->required();
  ing->add_option("--movies", ing_movies, "Movielens movies.csv for genre features");
  ing->add_option("--period-start", ing_start, "YYYY-MM-DD");
  ing->add_option("--period-end", ing_end, "YYYY-MM-DD (inclusive)");
  ing->add_option("--sample-users", ing_sample, "Goodreads users to sample");
  ing->add_option("--seed", ing_seed, "Sampling seed");
  ing->add_option("-o,--out", ing_out, "Output dataset path")->required();

  // train-exposure
  auto* tex = app.add_subcommand("train-exposure", "Fit an exposure model and estimate propensities");
  std::string tex_data, tex_model = "dynamic", tex_ckpt, tex_props, tex_metrics;
  std::uint64_t tex_seed = 0;
  add_config(tex);
  tex->add_option("-d,--data", tex_data, "Canonical dataset")->required();
  tex->add_option("-m,--model", tex_model, "pop | pf | dynamic")->check(CLI::IsMember({"pop", "pf", "dynamic"}));
  tex->add_option("--seed", tex_seed, "Training seed");
  tex->add_option("--out-model", tex_ckpt, "Checkpoint path");
  tex->add_option("--out-propensities", tex_props, "Propensity table path");
  tex->add_option("--metrics", tex_metrics, "Write exposure metrics JSON here (default stdout)");

  // train-rating
  auto* trt = app.add_subcommand("train-rating", "Fit a GMF rating model, naive or IPS-weighted");
  std::string trt_data, trt_props, trt_ckpt, trt_metrics, trt_preds;
  std::size_t trt_topk = 10;
  std::optional<std::uint64_t> trt_seed;
  add_config(trt);
  trt->add_option("-d,--data", trt_data, "Canonical dataset")->required();
  trt->add_option("-p,--propensities", trt_props, "Propensity table; omit for the naive objective");
  trt->add_option("--seed", trt_seed, "Training seed");
  trt->add_option("--top-k", trt_topk, "Recommendation list length for diversity metrics");
  trt->add_option("--out-model", trt_ckpt, "Checkpoint path");
  trt->add_option("--predictions", trt_preds, "CSV of unbiased-test predictions");
  trt->add_option("--metrics", trt_metrics, "Write metrics JSON here (default stdout)");

  // evaluate
  auto* evl = app.add_subcommand("evaluate", "Run the full multi-seed experiment and write a report");
  std::string evl_out;
  std::vector<std::uint64_t> evl_seeds;
  bool evl_verbose = false;
  add_config(evl);
  evl->add_option("--seeds", evl_seeds, "Seeds (override config)")->delimiter(',');
  evl->add_option("-o,--out-dir", evl_out, "Output directory (override config)");
  evl->add_flag("-v,--verbose", evl_verbose, "Progress on stderr");

  // report
  auto* rep = app.add_subcommand("report", "Verify a report and render its metric table as CSV");
  std::string rep_in, rep_out;
  rep->add_option("-i,--input", rep_in, "report.json")->required()->check(CLI::ExistingFile);
  rep->add_option("-o,--out", rep_out, "CSV output (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sim) {
      json cfg = load_config(config_path, sets);
      json simcfg = section(cfg, "simulation");
      if (sim_seed) simcfg["seed"] = *sim_seed;
      Dataset ds;
      Props props;
      check(fbd_simulate(simcfg.dump().c_str(), &ds.p, sim_props.empty() ? nullptr : &props.p), "simulate");
      check(fbd_dataset_save(ds.p, sim_out.c_str()), "save dataset");
      if (!sim_props.empty()) check(fbd_propensities_save(props.p, sim_props.c_str()), "save propensities");
      char* info = nullptr;
      check(fbd_dataset_info(ds.p, &info), "dataset info");
      std::cout << take(info) << '\n';
    } else if (*ing) {
      json req = {{"format", ing_format}, {"path", ing_input}, {"sample_users", ing_sample}, {"seed", ing_seed}};
      if (!ing_movies.empty()) req["movies_path"] = ing_movies;
      if (!ing_start.empty()) req["period_start"] = ing_start;
      if (!ing_end.empty()) req["period_end"] = ing_end;
      Dataset ds;
      check(fbd_ingest(req.dump().c_str(), &ds.p), "ingest '" + ing_input + "'");
      check(fbd_dataset_save(ds.p, ing_out.c_str()), "save dataset");
      char* info = nullptr;
      check(fbd_dataset_info(ds.p, &info), "dataset info");
      std::cout << take(info) << '\n';
    } else if (*tex) {
      json cfg = load_config(config_path, sets);
      json req = {{"model", tex_model}, {"seed", tex_seed}};
      for (const char* k : {"pf", "dynamic", "dynamic_grid"})
        if (cfg.contains(k)) req[k] = cfg[k];
      Dataset ds;
      check(fbd_dataset_load(tex_data.c_str(), &ds.p), "load dataset");
      Exposure m;
      check(fbd_exposure_train(ds.p, req.dump().c_str(), &m.p), "train exposure model");
      if (!tex_ckpt.empty()) check(fbd_exposure_save(m.p, tex_ckpt.c_str()), "save model");
      if (!tex_props.empty()) {
        Props p;
        check(fbd_exposure_propensities(m.p, ds.p, &p.p), "estimate propensities");
        check(fbd_propensities_save(p.p, tex_props.c_str()), "save propensities");
      }
      json metrics = json::object();
      for (const char* part : {"validation", "exposure_test"}) {
        char* out = nullptr;
        check(fbd_exposure_evaluate(m.p, ds.p, part, 50, &out), std::string("evaluate on ") + part);
        metrics[part] = json::parse(take(out));
      }
      print_json(metrics.dump(2), tex_metrics);
    } else if (*trt) {
      json cfg = load_config(config_path, sets);
      json req = json::object();
      for (const char* k : {"gmf", "clip"})
        if (cfg.contains(k)) req[k] = cfg[k];
      if (trt_seed) req["gmf"]["seed"] = *trt_seed;
      Dataset ds;
      check(fbd_dataset_load(trt_data.c_str(), &ds.p), "load dataset");
      Props props;
      if (!trt_props.empty()) check(fbd_propensities_load(trt_props.c_str(), &props.p), "load propensities");
      Rating m;
      char* info = nullptr;
      check(fbd_rating_train(ds.p, props.p, req.dump().c_str(), &m.p, &info), "train rating model");
      json out = {{"training", json::parse(take(info))}};
      if (!trt_ckpt.empty()) check(fbd_rating_save(m.p, trt_ckpt.c_str()), "save model");
      if (!trt_preds.empty())
        check(fbd_rating_export_predictions(m.p, ds.p, "unbiased_test", trt_preds.c_str()), "export predictions");
      char* ev = nullptr;
      check(fbd_rating_evaluate(m.p, ds.p, trt_topk, &ev), "evaluate rating model");
      out["unbiased_test"] = json::parse(take(ev));
      print_json(out.dump(2), trt_metrics);
    } else if (*evl) {
      json cfg = load_config(config_path, sets);
      if (!evl_seeds.empty()) cfg["seeds"] = evl_seeds;
      if (!evl_out.empty()) cfg["output_dir"] = evl_out;
      if (evl_verbose) cfg["verbose"] = true;
      char* resolved = nullptr;
      check(fbd_config_resolve(cfg.dump().c_str(), &resolved), "config");
      const json full = json::parse(take(resolved));
      const fs::path dir = full.value("output_dir", std::string());
      char* report = nullptr;
      check(fbd_run_experiment(cfg.dump().c_str(), &report), "experiment");
      const std::string report_text = take(report);
      char* csv = nullptr;
      check(fbd_report_to_csv(report_text.c_str(), &csv), "render report");
      const std::string csv_text = take(csv);
      if (dir.empty()) {
        std::cout << csv_text;
      } else {
        write_file(dir / "report.json", report_text + "\n");
        write_file(dir / "report.csv", csv_text);
        std::cout << csv_text;
        std::cerr << "wrote " << (dir / "report.json").string() << " and " << (dir / "report.csv").string() << '\n';
      }
    } else if (*rep) {
      char* csv = nullptr;
      check(fbd_report_to_csv(read_file(rep_in).c_str(), &csv), "report '" + rep_in + "'");
      const std::string text = take(csv);
      if (rep_out.empty()) std::cout << text;
      else write_file(rep_out, text);
    }
  } catch (const CliError& e) {
    std::cerr << "fbd: " << e.what() << '\n';
    return e.code == 0 ? 1 : e.code;
  } catch (const std::exception& e) {
    std::cerr << "fbd: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
