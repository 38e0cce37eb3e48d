#include "adl/adl.h"

#include <cmath>
#include <cstring>
#include <exception>
#include <limits>
#include <new>
#include <string>

#include <nlohmann/json.hpp>

#include "adl/checkpoint.hpp"
#include "adl/error.hpp"
#include "adl/experiment.hpp"
#include "adl/theory.hpp"

struct adl_dataset {
  adl::Dataset data;
};

struct adl_model {
  adl::ModelState state;
  adl::TrainConfig train;
};

namespace {

using nlohmann::json;

thread_local std::string g_last_error;

adl_status status_of(adl::ErrorCode code) {
  switch (code) {
    case adl::ErrorCode::kInvalidArgument: return ADL_INVALID_ARGUMENT;
    case adl::ErrorCode::kDomain: return ADL_DOMAIN_ERROR;
    case adl::ErrorCode::kIo: return ADL_IO_ERROR;
    case adl::ErrorCode::kParse: return ADL_PARSE_ERROR;
    case adl::ErrorCode::kNumeric: return ADL_NUMERIC_ERROR;
    case adl::ErrorCode::kState: return ADL_STATE_ERROR;
  }
  return ADL_INTERNAL_ERROR;
}

template <class F>
adl_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return ADL_OK;
  } catch (const adl::Error& e) {
    g_last_error = e.what();
    return status_of(e.code());
  } catch (const json::exception& e) {
    g_last_error = e.what();
    return ADL_PARSE_ERROR;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
  } catch (const std::exception& e) {
    g_last_error = e.what();
  } catch (...) {
    g_last_error = "unknown error";
  }
  return ADL_INTERNAL_ERROR;
}

void require(bool ok, const char* what) {
  if (!ok) throw adl::InvalidArgument(what);
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

json parse_object(const char* text) {
  if (!text || !*text) return json::object();
  json j = json::parse(text);
  require(j.is_object(), "expected a JSON object");
  return j;
}

}  // namespace

extern "C" {

const char* adl_last_error(void) { return g_last_error.c_str(); }

const char* adl_status_string(adl_status status) {
  switch (status) {
    case ADL_OK: return "ok";
    case ADL_INVALID_ARGUMENT: return "invalid argument";
    case ADL_DOMAIN_ERROR: return "domain error";
    case ADL_IO_ERROR: return "i/o error";
    case ADL_PARSE_ERROR: return "parse error";
    case ADL_NUMERIC_ERROR: return "numeric error";
    case ADL_STATE_ERROR: return "state error";
    case ADL_CHECK_FAILED: return "check failed";
    case ADL_INTERNAL_ERROR: return "internal error";
  }
  return "unknown status";
}

void adl_string_free(char* s) { delete[] s; }

int adl_threads(void) { return adl::reduction_width(); }

adl_status adl_set_threads(int width) {
  return guarded([&] {
    require(width >= 1, "thread width must be at least 1");
    adl::set_reduction_width(width);
  });
}

adl_status adl_dataset_generate(const char* config_json, uint64_t seed, adl_dataset** train, adl_dataset** test) {
  return guarded([&] {
    require(train && test, "null output");
    *train = *test = nullptr;
    const auto cfg = adl::make_config(parse_object(config_json), seed);
    auto data = adl::build_data(cfg);
    auto a = std::make_unique<adl_dataset>(adl_dataset{std::move(data.train)});
    auto b = std::make_unique<adl_dataset>(adl_dataset{std::move(data.test)});
    *train = a.release();
    *test = b.release();
  });
}

adl_status adl_dataset_load(const char* path, int num_classes, adl_dataset** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = nullptr;
    adl::IngestOptions opts;
    if (num_classes > 0) opts.num_classes = num_classes;
    *out = new adl_dataset{adl::ingest_jsonl(path, opts)};
  });
}

adl_status adl_dataset_save(const adl_dataset* dataset, const char* path) {
  return guarded([&] {
    require(dataset && path, "null argument");
    adl::write_jsonl(dataset->data, path);
  });
}

size_t adl_dataset_size(const adl_dataset* dataset) { return dataset ? dataset->data.size() : 0; }

size_t adl_dataset_vocab_size(const adl_dataset* dataset) { return dataset ? dataset->data.vocab_size : 0; }

int adl_dataset_num_classes(const adl_dataset* dataset) { return dataset ? dataset->data.num_topics : 0; }

adl_status adl_dataset_purity(const adl_dataset* dataset, uint32_t word, double* purity, size_t* occurrences) {
  return guarded([&] {
    require(dataset && purity, "null argument");
    const auto st = adl::topic_purity(dataset->data, word);
    *purity = st.purity.value_or(std::numeric_limits<double>::quiet_NaN());
    if (occurrences) *occurrences = st.occurrence_count;
  });
}

void adl_dataset_free(adl_dataset* dataset) { delete dataset; }

adl_status adl_model_create(const char* config_json, size_t vocab_size, int num_classes, uint64_t seed,
                            adl_model** out) {
  return guarded([&] {
    require(out, "null output");
    *out = nullptr;
    const json user = parse_object(config_json);
    json blocks = json::object();
    for (const char* key : {"model", "train"}) {
      if (user.contains(key)) blocks[key] = user[key];
    }
    require(blocks.size() == user.size(), "model config takes only 'model' and 'train' blocks");
    const auto cfg = adl::make_config(blocks, seed);
    auto m = std::make_unique<adl_model>();
    m->state = adl::init_model(cfg.model(), vocab_size, num_classes, seed);
    m->train = cfg.train();
    m->state.freeze = m->train.freeze_mask(m->state);
    *out = m.release();
  });
}

adl_status adl_model_load(const char* path, adl_model** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = nullptr;
    auto m = std::make_unique<adl_model>();
    m->state = adl::load_model(path);
    *out = m.release();
  });
}

adl_status adl_model_save(const adl_model* model, const char* path) {
  return guarded([&] {
    require(model && path, "null argument");
    adl::save_model(path, model->state, {});
  });
}

size_t adl_model_vocab_size(const adl_model* model) { return model ? model->state.vocab_size() : 0; }

adl_status adl_model_evaluate(const adl_model* model, const adl_dataset* data, double* loss, double* accuracy) {
  return guarded([&] {
    require(model && data, "null argument");
    const auto e = adl::evaluate(model->state, data->data);
    if (loss) *loss = e.loss;
    if (accuracy) *accuracy = e.accuracy;
  });
}

adl_status adl_model_scores(const adl_model* model, double* scores, size_t count) {
  return guarded([&] {
    require(model && scores, "null argument");
    require(count == model->state.vocab_size(), "count must equal the vocabulary size");
    const adl::Vector s = model->state.word_scores();
    std::copy(s.data(), s.data() + s.size(), scores);
  });
}

adl_status adl_model_train(adl_model* model, const adl_dataset* train, const adl_dataset* test,
                           char** report_json) {
  return guarded([&] {
    require(model && train && test, "null argument");
    const auto rep = adl::train(model->state, train->data, test->data, model->train);
    if (report_json) {
      const json j = {{"final_train_loss", rep.final_train_loss},
                      {"final_test_loss", rep.final_test_loss},
                      {"final_train_accuracy", rep.final_train_accuracy},
                      {"final_test_accuracy", rep.final_test_accuracy},
                      {"epochs", rep.epochs},
                      {"early_stopped", rep.early_stopped},
                      {"best_epoch", rep.best_epoch},
                      {"diverged", rep.diverged},
                      {"last_good_epoch", rep.last_good_epoch}};
      *report_json = dup_string(j.dump());
    }
  });
}

adl_status adl_model_check_gradients(const adl_model* model, const adl_dataset* batch, double epsilon,
                                     double* max_relative_error) {
  return guarded([&] {
    require(model && batch && max_relative_error, "null argument");
    const auto g = adl::compute_gradients(model->state, batch->data);
    const auto fd = adl::finite_diff_gradients(model->state, batch->data, epsilon);
    *max_relative_error = adl::max_relative_error(g.descent, fd);
  });
}

void adl_model_free(adl_model* model) { delete model; }

adl_status adl_sen_norm_from_score(double score, int m, double* norm) {
  return guarded([&] {
    require(norm, "null output");
    *norm = adl::sen_norm_from_score(score, m);
  });
}

adl_status adl_sen_score_from_norm(double norm, int m, double* score) {
  return guarded([&] {
    require(score, "null output");
    *score = adl::sen_score_from_norm(norm, m);
  });
}

adl_status adl_requery_keys(const double* keys, const double* query, const double* new_query, size_t dim,
                            size_t count, double* new_keys) {
  return guarded([&] {
    require(keys && query && new_query && new_keys, "null argument");
    require(dim > 0, "dim must be positive");
    const auto d = static_cast<Eigen::Index>(dim);
    const auto n = static_cast<Eigen::Index>(count);
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Eigen::MatrixXd k = Eigen::Map<const RowMajor>(keys, d, n);
    const Eigen::VectorXd q = Eigen::Map<const Eigen::VectorXd>(query, d);
    const Eigen::VectorXd q_new = Eigen::Map<const Eigen::VectorXd>(new_query, d);
    Eigen::Map<RowMajor>(new_keys, d, n) = adl::requery_keys(k, q, q_new);
  });
}

adl_status adl_run(const char* command, const char* request_json, char** result_json, int* passed) {
  return guarded([&] {
    require(command, "null command");
    const json j = parse_object(request_json);
    adl::CommandRequest req;
    for (const auto& [key, value] : j.items()) {
      if (key == "config") {
        if (!value.is_null()) req.config_path = value.get<std::string>();
      } else if (key == "seed") {
        if (!value.is_null()) req.seed = value.get<std::uint64_t>();
      } else if (key == "out") {
        req.out = value.get<std::string>();
      } else if (key == "inputs") {
        req.inputs = value.get<std::vector<std::string>>();
      } else if (key == "plot") {
        req.plot = value.get<bool>();
      } else {
        throw adl::InvalidArgument("unknown request key '" + key + "'");
      }
    }
    const auto r = adl::run_command(command, req);
    if (passed) *passed = r.passed ? 1 : 0;
    if (result_json) *result_json = dup_string(r.result.dump(2));
  });
}

adl_status adl_command_names(char** names) {
  return guarded([&] {
    require(names, "null output");
    std::string out;
    for (const auto& n : adl::command_names()) out += n + "\n";
    *names = dup_string(out);
  });
}

}  // extern "C"
