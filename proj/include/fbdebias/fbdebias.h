/* C interface to the fbdebias library. All objects are opaque handles
 * released with their *_free function. Functions return FBD_OK or an error
 * code; fbd_last_error() then describes the failure (per thread). Strings
 * returned through char** outputs are owned by the caller and released with
 * fbd_string_free(). JSON arguments may be NULL for defaults. */
#ifndef FBDEBIAS_H
#define FBDEBIAS_H

#include <stddef.h>

#if defined(FBD_BUILDING_LIBRARY)
#define FBD_API __attribute__((visibility("default")))
#else
#define FBD_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fbd_status {
  FBD_OK = 0,
  FBD_ERR_INVALID_ARGUMENT = 1,
  FBD_ERR_IO = 2,
  FBD_ERR_PARSE = 3,
  FBD_ERR_EMPTY_DATASET = 4,
  FBD_ERR_NUMERIC = 5,
  FBD_ERR_VERSION = 6,
  FBD_ERR_SHAPE_MISMATCH = 7,
  FBD_ERR_INTERNAL = 8
} fbd_status;

typedef struct fbd_dataset fbd_dataset;
typedef struct fbd_propensities fbd_propensities;
typedef struct fbd_exposure_model fbd_exposure_model;
typedef struct fbd_rating_model fbd_rating_model;

FBD_API const char* fbd_version(void);
FBD_API const char* fbd_last_error(void);
FBD_API const char* fbd_status_name(fbd_status status);
FBD_API void fbd_string_free(char* s);

/* ---- datasets ---- */

/* sim_json: simulation keys (n_users, n_items, seed, ...). true_props may be
 * NULL; otherwise receives the simulator's propensities of the train events. */
FBD_API fbd_status fbd_simulate(const char* sim_json, fbd_dataset** out, fbd_propensities** true_props);
/* ingest_json: {"format": "movielens"|"goodreads"|"canonical", "path",
 * "movies_path", "period_start", "period_end", "sample_users", "seed"}. */
FBD_API fbd_status fbd_ingest(const char* ingest_json, fbd_dataset** out);
FBD_API fbd_status fbd_dataset_load(const char* path, fbd_dataset** out);
FBD_API fbd_status fbd_dataset_save(const fbd_dataset* ds, const char* path);
/* {"n_users", "n_items", "rating_min", "rating_max", "events": {partition: count}} */
FBD_API fbd_status fbd_dataset_info(const fbd_dataset* ds, char** json_out);
FBD_API void fbd_dataset_free(fbd_dataset* ds);

/* ---- propensities ---- */

FBD_API fbd_status fbd_propensities_load(const char* path, fbd_propensities** out);
FBD_API fbd_status fbd_propensities_save(const fbd_propensities* p, const char* path);
FBD_API size_t fbd_propensities_size(const fbd_propensities* p);
FBD_API void fbd_propensities_free(fbd_propensities* p);

/* ---- exposure models ---- */

/* cfg_json: {"model": "pop"|"pf"|"dynamic", "pf": {...}, "dynamic": {...},
 * "dynamic_grid": {...}, "seed": n}. */
FBD_API fbd_status fbd_exposure_train(const fbd_dataset* ds, const char* cfg_json, fbd_exposure_model** out);
FBD_API fbd_status fbd_exposure_load(const char* path, fbd_exposure_model** out);
FBD_API fbd_status fbd_exposure_save(const fbd_exposure_model* m, const char* path);
/* partition: "validation" or "exposure_test". {"nll", "recall", "ndcg", "k", "events"} */
FBD_API fbd_status fbd_exposure_evaluate(const fbd_exposure_model* m, const fbd_dataset* ds, const char* partition,
                                         size_t k, char** json_out);
FBD_API fbd_status fbd_exposure_propensities(const fbd_exposure_model* m, const fbd_dataset* ds,
                                             fbd_propensities** out);
FBD_API void fbd_exposure_free(fbd_exposure_model* m);

/* ---- rating models ---- */

/* props NULL trains the naive objective. cfg_json: {"gmf": {...},
 * "clip": {"lo", "hi", "rescale"}}; lo/hi given as arrays are searched on
 * validation MSE. info_json (may be NULL) receives the chosen clip bounds and
 * validation MSE. */
FBD_API fbd_status fbd_rating_train(const fbd_dataset* ds, const fbd_propensities* props, const char* cfg_json,
                                    fbd_rating_model** out, char** info_json);
FBD_API fbd_status fbd_rating_load(const char* path, fbd_rating_model** out);
FBD_API fbd_status fbd_rating_save(const fbd_rating_model* m, const char* path);
FBD_API fbd_status fbd_rating_predict(const fbd_rating_model* m, size_t user, size_t item, double* out);
/* {"mse", "mae", "mse_clamped", "mae_clamped", "gini", "avg_dissimilarity", "top_k"} on unbiased_test */
FBD_API fbd_status fbd_rating_evaluate(const fbd_rating_model* m, const fbd_dataset* ds, size_t top_k,
                                       char** json_out);
FBD_API fbd_status fbd_rating_export_predictions(const fbd_rating_model* m, const fbd_dataset* ds,
                                                 const char* partition, const char* path);
FBD_API void fbd_rating_free(fbd_rating_model* m);

/* ---- experiments ---- */

/* Full multi-seed pipeline; report_json receives the run report. */
FBD_API fbd_status fbd_run_experiment(const char* config_json, char** report_json);
/* Re-parses a report, checks its aggregates against the records and renders
 * the CSV metric table. */
FBD_API fbd_status fbd_report_to_csv(const char* report_json, char** csv_out);
/* Effective configuration (defaults filled in) for a partial config. */
FBD_API fbd_status fbd_config_resolve(const char* config_json, char** json_out);

#ifdef __cplusplus
}
#endif

#endif
