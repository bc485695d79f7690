#include "fbdebias/fbdebias.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <string>

#include "fbdebias/error.hpp"
#include "fbdebias/experiment.hpp"
#include "fbdebias/metrics.hpp"

struct fbd_dataset {
  fbd::SplitDataset ds;
};
struct fbd_propensities {
  fbd::PropensityTable table;
};
struct fbd_exposure_model {
  std::unique_ptr<fbd::ExposureModel> model;
};
struct fbd_rating_model {
  fbd::GMFModel model;
};

namespace {

thread_local std::string g_last_error;

fbd_status to_status(fbd::ErrorCode c) {
  switch (c) {
    case fbd::ErrorCode::InvalidArgument: return FBD_ERR_INVALID_ARGUMENT;
    case fbd::ErrorCode::Io: return FBD_ERR_IO;
    case fbd::ErrorCode::Parse: return FBD_ERR_PARSE;
    case fbd::ErrorCode::EmptyDataset: return FBD_ERR_EMPTY_DATASET;
    case fbd::ErrorCode::Numeric: return FBD_ERR_NUMERIC;
    case fbd::ErrorCode::Version: return FBD_ERR_VERSION;
    case fbd::ErrorCode::ShapeMismatch: return FBD_ERR_SHAPE_MISMATCH;
    case fbd::ErrorCode::Internal: return FBD_ERR_INTERNAL;
  }
  return FBD_ERR_INTERNAL;
}

template <class F>
fbd_status guard(F&& f) {
  try {
    f();
    g_last_error.clear();
    return FBD_OK;
  } catch (const fbd::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const nlohmann::json::exception& e) {
    g_last_error = std::string("json: ") + e.what();
    return FBD_ERR_PARSE;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return FBD_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return FBD_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (p == nullptr) fbd::fail(fbd::ErrorCode::InvalidArgument, std::string(what) + " is NULL");
}

nlohmann::json parse_json(const char* text) {
  if (text == nullptr || *text == '\0') return nlohmann::json::object();
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fbd::fail(fbd::ErrorCode::Parse, std::string("invalid JSON: ") + e.what());
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void emit(char** out, const nlohmann::json& j) {
  require(out, "output pointer");
  *out = dup_string(j.dump(2));
}

fbd::Partition parse_target(const char* partition) {
  require(partition, "partition");
  return fbd::parse_partition(partition);
}

}  // namespace

extern "C" {

const char* fbd_version(void) { return FBD_VERSION; }

const char* fbd_last_error(void) { return g_last_error.c_str(); }

const char* fbd_status_name(fbd_status s) {
  switch (s) {
    case FBD_OK: return "ok";
    case FBD_ERR_INVALID_ARGUMENT: return "invalid argument";
    case FBD_ERR_IO: return "i/o error";
    case FBD_ERR_PARSE: return "parse error";
    case FBD_ERR_EMPTY_DATASET: return "empty dataset";
    case FBD_ERR_NUMERIC: return "numeric error";
    case FBD_ERR_VERSION: return "version mismatch";
    case FBD_ERR_SHAPE_MISMATCH: return "shape mismatch";
    case FBD_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void fbd_string_free(char* s) { std::free(s); }

fbd_status fbd_simulate(const char* sim_json, fbd_dataset** out, fbd_propensities** true_props) {
  return guard([&] {
    require(out, "output pointer");
    fbd::SimConfig cfg;
    fbd::update_from_json(cfg, parse_json(sim_json));
    auto sim = fbd::simulate_interactions(fbd::generate_world(cfg));
    if (true_props) *true_props = new fbd_propensities{fbd::true_propensity_table(sim)};
    *out = new fbd_dataset{std::move(sim.dataset)};
  });
}

fbd_status fbd_ingest(const char* ingest_json, fbd_dataset** out) {
  return guard([&] {
    require(out, "output pointer");
    const auto j = parse_json(ingest_json);
    fbd::ExperimentConfig cfg;
    std::uint64_t seed = 0;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      if (k == "format") cfg.source.kind = it.value().get<std::string>();
      else if (k == "path") cfg.source.path = it.value().get<std::string>();
      else if (k == "movies_path") cfg.source.movies_path = it.value().get<std::string>();
      else if (k == "period_start") cfg.source.period_start = it.value().get<std::string>();
      else if (k == "period_end") cfg.source.period_end = it.value().get<std::string>();
      else if (k == "sample_users") cfg.source.sample_users = it.value().get<std::size_t>();
      else if (k == "seed") seed = it.value().get<std::uint64_t>();
      else fbd::fail(fbd::ErrorCode::InvalidArgument, "unknown ingest key '" + k + "'");
    }
    if (cfg.source.kind == "simulate") fbd::fail(fbd::ErrorCode::InvalidArgument, "ingest needs a file format");
    cfg.validate();
    *out = new fbd_dataset{fbd::load_source(cfg, seed, nullptr)};
  });
}

fbd_status fbd_dataset_load(const char* path, fbd_dataset** out) {
  return guard([&] {
    require(path, "path");
    require(out, "output pointer");
    *out = new fbd_dataset{fbd::load_dataset(path)};
  });
}

fbd_status fbd_dataset_save(const fbd_dataset* ds, const char* path) {
  return guard([&] {
    require(ds, "dataset");
    require(path, "path");
    fbd::save_dataset(ds->ds, path);
  });
}

fbd_status fbd_dataset_info(const fbd_dataset* ds, char** json_out) {
  return guard([&] {
    require(ds, "dataset");
    nlohmann::json events = nlohmann::json::object();
    for (auto p : fbd::kAllPartitions) events[std::string(fbd::partition_name(p))] = ds->ds.count(p);
    emit(json_out, {{"n_users", ds->ds.n_users},
                    {"n_items", ds->ds.n_items},
                    {"rating_min", ds->ds.scale.min},
                    {"rating_max", ds->ds.scale.max},
                    {"has_item_features", !ds->ds.item_features.empty()},
                    {"events", events}});
  });
}

void fbd_dataset_free(fbd_dataset* ds) { delete ds; }

fbd_status fbd_propensities_load(const char* path, fbd_propensities** out) {
  return guard([&] {
    require(path, "path");
    require(out, "output pointer");
    *out = new fbd_propensities{fbd::load_propensities(path)};
  });
}

fbd_status fbd_propensities_save(const fbd_propensities* p, const char* path) {
  return guard([&] {
    require(p, "propensities");
    require(path, "path");
    fbd::save_propensities(p->table, path);
  });
}

size_t fbd_propensities_size(const fbd_propensities* p) { return p ? p->table.entries.size() : 0; }

void fbd_propensities_free(fbd_propensities* p) { delete p; }

fbd_status fbd_exposure_train(const fbd_dataset* ds, const char* cfg_json, fbd_exposure_model** out) {
  return guard([&] {
    require(ds, "dataset");
    require(out, "output pointer");
    const auto j = parse_json(cfg_json);
    fbd::ExperimentConfig cfg;
    std::string model = "dynamic";
    std::uint64_t seed = 0;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      if (k == "model") model = it.value().get<std::string>();
      else if (k == "seed") seed = it.value().get<std::uint64_t>();
      else if (k == "pf") fbd::update_from_json(cfg.pf, it.value());
      else if (k == "dynamic") fbd::update_from_json(cfg.dynamic, it.value());
      else if (k == "dynamic_grid") cfg.dynamic_grid = it.value();
      else if (k == "verbose") cfg.verbose = it.value().get<bool>();
      else fbd::fail(fbd::ErrorCode::InvalidArgument, "unknown exposure key '" + k + "'");
    }
    *out = new fbd_exposure_model{fbd::train_exposure_model(cfg, ds->ds, model, seed)};
  });
}

fbd_status fbd_exposure_load(const char* path, fbd_exposure_model** out) {
  return guard([&] {
    require(path, "path");
    require(out, "output pointer");
    const auto ckpt = fbd::load_checkpoint(path);
    std::unique_ptr<fbd::ExposureModel> m;
    if (ckpt.kind == "pop") m = std::make_unique<fbd::PopModel>(fbd::PopModel::from_checkpoint(ckpt));
    else if (ckpt.kind == "pf") m = std::make_unique<fbd::PFModel>(fbd::PFModel::from_checkpoint(ckpt));
    else if (ckpt.kind == "dynamic") m = std::make_unique<fbd::DynamicModel>(fbd::DynamicModel::from_checkpoint(ckpt));
    else fbd::fail(fbd::ErrorCode::InvalidArgument, "'" + std::string(path) + "' holds a '" + ckpt.kind + "' model, not an exposure model");
    *out = new fbd_exposure_model{std::move(m)};
  });
}

fbd_status fbd_exposure_save(const fbd_exposure_model* m, const char* path) {
  return guard([&] {
    require(m, "exposure model");
    require(path, "path");
    fbd::save_checkpoint(m->model->to_checkpoint(), path);
  });
}

fbd_status fbd_exposure_evaluate(const fbd_exposure_model* m, const fbd_dataset* ds, const char* partition, size_t k,
                                 char** json_out) {
  return guard([&] {
    require(m, "exposure model");
    require(ds, "dataset");
    if (m->model->n_items() != ds->ds.n_items)
      fbd::fail(fbd::ErrorCode::ShapeMismatch, "model has " + std::to_string(m->model->n_items()) +
                                                   " items, dataset has " + std::to_string(ds->ds.n_items));
    const auto r = fbd::evaluate_exposure(*m->model, ds->ds, parse_target(partition), k);
    emit(json_out, {{"model", m->model->tag()},
                    {"partition", partition},
                    {"nll", r.nll},
                    {"recall", r.recall},
                    {"ndcg", r.ndcg},
                    {"k", k},
                    {"events", r.events}});
  });
}

fbd_status fbd_exposure_propensities(const fbd_exposure_model* m, const fbd_dataset* ds, fbd_propensities** out) {
  return guard([&] {
    require(m, "exposure model");
    require(ds, "dataset");
    require(out, "output pointer");
    *out = new fbd_propensities{fbd::model_propensities(*m->model, ds->ds)};
  });
}

void fbd_exposure_free(fbd_exposure_model* m) { delete m; }

fbd_status fbd_rating_train(const fbd_dataset* ds, const fbd_propensities* props, const char* cfg_json,
                            fbd_rating_model** out, char** info_json) {
  return guard([&] {
    require(ds, "dataset");
    require(out, "output pointer");
    const auto j = parse_json(cfg_json);
    fbd::GMFConfig gmf;
    fbd::ClipGrid grid;
    std::size_t threads = 0;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      if (k == "gmf") {
        fbd::update_from_json(gmf, it.value());
      } else if (k == "clip") {
        for (auto c = it.value().begin(); c != it.value().end(); ++c) {
          auto list = [](const nlohmann::json& v) {
            return v.is_array() ? v.get<std::vector<double>>() : std::vector<double>{v.get<double>()};
          };
          if (c.key() == "lo") grid.lo = list(c.value());
          else if (c.key() == "hi") grid.hi = list(c.value());
          else if (c.key() == "rescale") grid.rescale = fbd::parse_rescale(c.value().get<std::string>());
          else fbd::fail(fbd::ErrorCode::InvalidArgument, "unknown clip key '" + c.key() + "'");
        }
      } else if (k == "threads") {
        threads = it.value().get<std::size_t>();
      } else {
        fbd::fail(fbd::ErrorCode::InvalidArgument, "unknown rating key '" + k + "'");
      }
    }
    nlohmann::json info = {{"objective", props ? "ips" : "naive"}, {"gmf", fbd::to_json(gmf)}};
    fbd::GMFModel model;
    if (props) {
      props->table.validate_against(ds->ds);
      double vmse = 0.0;
      const auto w = fbd::select_clip(ds->ds, props->table, grid, gmf, threads, &vmse);
      model = fbd::train_gmf(ds->ds, gmf, &w);
      info["propensity_model"] = props->table.model;
      info["clip"] = {{"lo", w.lo}, {"hi", w.hi}, {"rescale", fbd::rescale_name(w.rescale)}};
    } else {
      model = fbd::train_gmf(ds->ds, gmf, nullptr);
    }
    if (ds->ds.count(fbd::Partition::Validation) > 0)
      info["validation_mse"] = fbd::evaluate_rating(model, ds->ds, fbd::Partition::Validation).mse;
    *out = new fbd_rating_model{std::move(model)};
    if (info_json) emit(info_json, info);
  });
}

fbd_status fbd_rating_load(const char* path, fbd_rating_model** out) {
  return guard([&] {
    require(path, "path");
    require(out, "output pointer");
    *out = new fbd_rating_model{fbd::GMFModel::from_checkpoint(fbd::load_checkpoint(path))};
  });
}

fbd_status fbd_rating_save(const fbd_rating_model* m, const char* path) {
  return guard([&] {
    require(m, "rating model");
    require(path, "path");
    fbd::save_checkpoint(m->model.to_checkpoint(), path);
  });
}

fbd_status fbd_rating_predict(const fbd_rating_model* m, size_t user, size_t item, double* out) {
  return guard([&] {
    require(m, "rating model");
    require(out, "output pointer");
    *out = m->model.predict(user, item);
  });
}

fbd_status fbd_rating_evaluate(const fbd_rating_model* m, const fbd_dataset* ds, size_t top_k, char** json_out) {
  return guard([&] {
    require(m, "rating model");
    require(ds, "dataset");
    if (m->model.n_users() != ds->ds.n_users || m->model.n_items() != ds->ds.n_items)
      fbd::fail(fbd::ErrorCode::ShapeMismatch, "rating model does not match the dataset dimensions");
    const auto r = fbd::evaluate_rating(m->model, ds->ds, fbd::Partition::UnbiasedTest);
    const auto lists = fbd::recommend_all(m->model, ds->ds, top_k);
    nlohmann::json j = {{"mse", r.mse},
                        {"mae", r.mae},
                        {"mse_clamped", r.mse_clamped},
                        {"mae_clamped", r.mae_clamped},
                        {"events", r.events},
                        {"top_k", top_k},
                        {"gini", fbd::gini(fbd::recommendation_counts(lists, ds->ds.n_items))}};
    if (!ds->ds.item_features.empty()) j["avg_dissimilarity"] = fbd::avg_dissimilarity(lists, ds->ds.item_features);
    emit(json_out, j);
  });
}

fbd_status fbd_rating_export_predictions(const fbd_rating_model* m, const fbd_dataset* ds, const char* partition,
                                         const char* path) {
  return guard([&] {
    require(m, "rating model");
    require(ds, "dataset");
    require(path, "path");
    fbd::export_predictions(m->model, ds->ds, parse_target(partition), path);
  });
}

void fbd_rating_free(fbd_rating_model* m) { delete m; }

fbd_status fbd_run_experiment(const char* config_json, char** report_json) {
  return guard([&] {
    const auto cfg = fbd::experiment_from_json(parse_json(config_json));
    emit(report_json, fbd::report_to_json(fbd::run_experiment(cfg)));
  });
}

fbd_status fbd_report_to_csv(const char* report_json, char** csv_out) {
  return guard([&] {
    require(csv_out, "output pointer");
    const auto rep = fbd::report_from_json(parse_json(report_json));
    *csv_out = dup_string(fbd::report_to_csv(rep));
  });
}

fbd_status fbd_config_resolve(const char* config_json, char** json_out) {
  return guard([&] { emit(json_out, fbd::to_json(fbd::experiment_from_json(parse_json(config_json)))); });
}

}  // extern "C"
