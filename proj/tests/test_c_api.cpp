#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adl/adl.h"

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("adl_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

const char* kSmall = R"({"scheme": {"kind": "synthetic", "dictionary_size": 40, "words_per_sentence": 6,
                                    "n_train": 60, "n_test": 20}})";

std::string take(char* s) {
  std::string out(s);
  adl_string_free(s);
  return out;
}

}  // namespace

TEST_CASE("status strings and the last error") {
  CHECK(std::string(adl_status_string(ADL_OK)) == "ok");
  CHECK(std::string(adl_status_string(ADL_CHECK_FAILED)) == "check failed");
  double v = 0;
  CHECK(adl_sen_norm_from_score(-1.0, 20, &v) == ADL_DOMAIN_ERROR);
  CHECK(std::string(adl_last_error()).find("manifold") != std::string::npos);
  CHECK(adl_sen_norm_from_score(1.0, 20, &v) == ADL_OK);
  CHECK(std::string(adl_last_error()).empty());
  CHECK(v == doctest::Approx(std::sqrt(2.0 * (1.0 + std::expm1(1.0) / 20))));
  double s = 0;
  CHECK(adl_sen_score_from_norm(v, 20, &s) == ADL_OK);
  CHECK(s == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(adl_sen_score_from_norm(v, 20, nullptr) == ADL_INVALID_ARGUMENT);
}

TEST_CASE("threads") {
  const int width = adl_threads();
  CHECK(width >= 1);
  CHECK(adl_set_threads(2) == ADL_OK);
  CHECK(adl_threads() == 2);
  CHECK(adl_set_threads(0) == ADL_INVALID_ARGUMENT);
  CHECK(adl_set_threads(width) == ADL_OK);
}

TEST_CASE("datasets and models through the C interface") {
  const auto dir = scratch("c_api");
  adl_dataset* train = nullptr;
  adl_dataset* test = nullptr;
  REQUIRE(adl_dataset_generate(kSmall, 3, &train, &test) == ADL_OK);
  CHECK(adl_dataset_size(train) == 60);
  CHECK(adl_dataset_size(test) == 20);
  CHECK(adl_dataset_num_classes(train) == 4);
  const size_t vocab = adl_dataset_vocab_size(train);
  CHECK(vocab == 48);

  double purity = 0;
  size_t occ = 0;
  CHECK(adl_dataset_purity(train, 0, &purity, &occ) == ADL_OK);
  CHECK(purity == 1.0);
  CHECK(occ > 0);
  CHECK(adl_dataset_purity(train, 9999, &purity, &occ) != ADL_OK);

  const auto path = (dir / "train.jsonl").string();
  CHECK(adl_dataset_save(train, path.c_str()) == ADL_OK);
  adl_dataset* loaded = nullptr;
  CHECK(adl_dataset_load(path.c_str(), 0, &loaded) == ADL_OK);
  CHECK(adl_dataset_size(loaded) == 60);
  CHECK(adl_dataset_load("/nonexistent.jsonl", 0, &loaded) == ADL_IO_ERROR);
  adl_dataset_free(loaded);

  adl_model* model = nullptr;
  CHECK(adl_model_create(R"({"model": {"colour": 1}})", vocab, 4, 1, &model) == ADL_INVALID_ARGUMENT);
  CHECK(adl_model_create("not json", vocab, 4, 1, &model) == ADL_PARSE_ERROR);
  REQUIRE(adl_model_create(R"({"model": {"head": "trainable_linear"}, "train": {"max_epochs": 30}})", vocab, 4, 1,
                           &model) == ADL_OK);
  CHECK(adl_model_vocab_size(model) == vocab);

  double loss = 0, acc = 0;
  CHECK(adl_model_evaluate(model, train, &loss, &acc) == ADL_OK);
  CHECK(loss == doctest::Approx(std::log(4.0)).epsilon(1e-3));

  char* report = nullptr;
  REQUIRE(adl_model_train(model, train, test, &report) == ADL_OK);
  const auto r = nlohmann::json::parse(take(report));
  CHECK(r["epochs"] == 30);
  CHECK(r["diverged"] == false);
  double after = 0;
  CHECK(adl_model_evaluate(model, train, &after, &acc) == ADL_OK);
  CHECK(after == doctest::Approx(r["final_train_loss"].get<double>()).epsilon(1e-12));
  CHECK(after < loss);

  std::vector<double> scores(vocab);
  CHECK(adl_model_scores(model, scores.data(), vocab) == ADL_OK);
  CHECK(adl_model_scores(model, scores.data(), vocab - 1) == ADL_INVALID_ARGUMENT);

  double err = 1;
  CHECK(adl_model_check_gradients(model, test, 1e-5, &err) == ADL_OK);
  CHECK(err < 1e-5);

  const auto mpath = (dir / "model.json").string();
  CHECK(adl_model_save(model, mpath.c_str()) == ADL_OK);
  adl_model* back = nullptr;
  REQUIRE(adl_model_load(mpath.c_str(), &back) == ADL_OK);
  std::vector<double> back_scores(vocab);
  CHECK(adl_model_scores(back, back_scores.data(), vocab) == ADL_OK);
  CHECK(back_scores == scores);

  adl_dataset* other = nullptr;
  adl_dataset* other_test = nullptr;
  REQUIRE(adl_dataset_generate(R"({"scheme": {"kind": "synthetic", "num_topics": 2, "dictionary_size": 10,
      "words_per_sentence": 4, "n_train": 10, "n_test": 2}})", 1, &other, &other_test) == ADL_OK);
  CHECK(adl_model_evaluate(model, other, &loss, &acc) == ADL_INVALID_ARGUMENT);

  CHECK(adl_model_evaluate(nullptr, train, &loss, &acc) == ADL_INVALID_ARGUMENT);
  CHECK(adl_model_train(model, nullptr, test, nullptr) == ADL_INVALID_ARGUMENT);
  CHECK(adl_dataset_generate(kSmall, 1, nullptr, &test) == ADL_INVALID_ARGUMENT);

  adl_model_free(back);
  adl_model_free(model);
  adl_dataset_free(other);
  adl_dataset_free(other_test);
  adl_dataset_free(train);
  adl_dataset_free(test);
  adl_model_free(nullptr);
  adl_dataset_free(nullptr);
}

TEST_CASE("requery through the C interface") {
  // Row-major 2 x 2 keys with columns (1.5, -0.5) and (0, 0).
  const double keys[] = {1.5, 0.0, -0.5, 0.0};
  const double q[] = {1.0, 1.0};
  const double q2[] = {1.0, 0.0};
  double out[4] = {};
  CHECK(adl_requery_keys(keys, q, q2, 2, 2, out) == ADL_OK);
  CHECK(out[0] == doctest::Approx(1.0));
  CHECK(out[1] == 0.0);
  CHECK(out[2] == 0.0);
  const double zero[] = {0.0, 0.0};
  CHECK(adl_requery_keys(keys, q, zero, 2, 2, out) == ADL_INVALID_ARGUMENT);
  CHECK(adl_requery_keys(keys, q, q2, 0, 2, out) == ADL_INVALID_ARGUMENT);
}

TEST_CASE("recipes through the C interface") {
  char* names = nullptr;
  REQUIRE(adl_command_names(&names) == ADL_OK);
  const auto list = take(names);
  CHECK(list.find("verify-flow\n") != std::string::npos);

  const auto dir = scratch("c_api_run");
  const std::string req = R"({"out": ")" + (dir / "rq").string() + R"(", "seed": 4})";
  char* result = nullptr;
  int passed = 0;
  REQUIRE(adl_run("requery", req.c_str(), &result, &passed) == ADL_OK);
  CHECK(passed == 1);
  CHECK(nlohmann::json::parse(take(result)).is_object());

  CHECK(adl_run("requery", R"({"colour": 1})", &result, &passed) == ADL_INVALID_ARGUMENT);
  CHECK(adl_run("fly", "{}", &result, &passed) == ADL_INVALID_ARGUMENT);
  CHECK(adl_run("requery", "[", &result, &passed) == ADL_PARSE_ERROR);
  CHECK(adl_run(nullptr, "{}", &result, &passed) == ADL_INVALID_ARGUMENT);
}
