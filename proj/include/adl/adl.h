#ifndef ADL_ADL_H
#define ADL_ADL_H

#include <stddef.h>
#include <stdint.h>

#if defined(ADL_BUILDING_LIBRARY)
#define ADL_API __attribute__((visibility("default")))
#else
#define ADL_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum adl_status {
  ADL_OK = 0,
  ADL_INVALID_ARGUMENT = 1,
  ADL_DOMAIN_ERROR = 2,
  ADL_IO_ERROR = 3,
  ADL_PARSE_ERROR = 4,
  ADL_NUMERIC_ERROR = 5,
  ADL_STATE_ERROR = 6,
  ADL_CHECK_FAILED = 7,
  ADL_INTERNAL_ERROR = 99
} adl_status;

typedef struct adl_dataset adl_dataset;
typedef struct adl_model adl_model;

/* Message of the last failing call on this thread; empty after success. */
ADL_API const char* adl_last_error(void);
ADL_API const char* adl_status_string(adl_status status);
/* Frees strings returned through char** out-parameters. */
ADL_API void adl_string_free(char* s);

/* Width of the deterministic reduction (also read from ADL_THREADS). */
ADL_API int adl_threads(void);
ADL_API adl_status adl_set_threads(int width);

/* Datasets. `config_json` is an experiment config; only its scheme block is used. */
ADL_API adl_status adl_dataset_generate(const char* config_json, uint64_t seed, adl_dataset** train,
                                        adl_dataset** test);
/* num_classes <= 0 infers the class count from the labels. */
ADL_API adl_status adl_dataset_load(const char* path, int num_classes, adl_dataset** out);
ADL_API adl_status adl_dataset_save(const adl_dataset* dataset, const char* path);
ADL_API size_t adl_dataset_size(const adl_dataset* dataset);
ADL_API size_t adl_dataset_vocab_size(const adl_dataset* dataset);
ADL_API int adl_dataset_num_classes(const adl_dataset* dataset);
/* purity is NaN when the word never occurs. */
ADL_API adl_status adl_dataset_purity(const adl_dataset* dataset, uint32_t word, double* purity,
                                      size_t* occurrences);
ADL_API void adl_dataset_free(adl_dataset* dataset);

/* Models. `config_json` may hold "model" and "train" blocks; both are optional. */
ADL_API adl_status adl_model_create(const char* config_json, size_t vocab_size, int num_classes,
                                    uint64_t seed, adl_model** out);
ADL_API adl_status adl_model_load(const char* path, adl_model** out);
ADL_API adl_status adl_model_save(const adl_model* model, const char* path);
ADL_API size_t adl_model_vocab_size(const adl_model* model);
ADL_API adl_status adl_model_evaluate(const adl_model* model, const adl_dataset* data, double* loss,
                                      double* accuracy);
/* Writes one score per word id; `count` must equal the vocabulary size. */
ADL_API adl_status adl_model_scores(const adl_model* model, double* scores, size_t count);
/* Trains in place with the model's train block; the report is JSON. */
ADL_API adl_status adl_model_train(adl_model* model, const adl_dataset* train, const adl_dataset* test,
                                   char** report_json);
/* Max relative error between analytic and central-difference gradients. */
ADL_API adl_status adl_model_check_gradients(const adl_model* model, const adl_dataset* batch, double epsilon,
                                             double* max_relative_error);
ADL_API void adl_model_free(adl_model* model);

ADL_API adl_status adl_sen_norm_from_score(double score, int m, double* norm);
ADL_API adl_status adl_sen_score_from_norm(double norm, int m, double* score);

/* keys and new_keys are row-major dim x count. */
ADL_API adl_status adl_requery_keys(const double* keys, const double* query, const double* new_query, size_t dim,
                                    size_t count, double* new_keys);

/* Runs a named recipe. request_json: {"config", "seed", "out", "inputs", "plot"}.
 * Returns ADL_OK when the recipe ran; `passed` reports its own checks. */
ADL_API adl_status adl_run(const char* command, const char* request_json, char** result_json, int* passed);
/* Newline-separated recipe names. */
ADL_API adl_status adl_command_names(char** names);

#ifdef __cplusplus
}
#endif

#endif
