#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "adl/error.hpp"
#include "adl/model.hpp"
#include "helpers.hpp"

using namespace adl;

namespace {

ModelState plain_state(HeadKind head, std::uint64_t seed) {
  auto s = init_model(testing::small_config(head), 7, 3, seed);
  testing::randomize(s, seed + 100);
  return s;
}

}  // namespace

TEST_CASE("zero keys give the word-averaging model") {
  auto s = init_model(testing::small_config(HeadKind::kFixedLinear), 7, 2, 1);
  s.embeddings.setRandom();
  const std::vector<WordId> words{1, 4, 6};
  const auto t = attention_forward(s, words);
  for (double w : t.weights) CHECK(w == doctest::Approx(1.0 / 3).epsilon(1e-14));
  const Vector mean = s.query_norm() * (s.embeddings.row(1) + s.embeddings.row(4) + s.embeddings.row(6)).transpose() / 3.0;
  CHECK((t.context - mean).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(std::abs(std::accumulate(t.weights.begin(), t.weights.end(), 0.0) - 1.0) < 1e-12);
  CHECK(std::abs(t.head.probabilities.sum() - 1.0) < 1e-12);
}

TEST_CASE("scores (ln 2, 0, 0) give weights (1/2, 1/4, 1/4)") {
  auto s = init_model(testing::small_config(HeadKind::kFixedLinear), 7, 2, 1);
  s.query = Vector::Zero(2);
  s.query[0] = 1.0;
  s.keys.setZero();
  s.keys(2, 0) = std::log(2.0);
  const std::vector<WordId> words{2, 3, 5};
  const auto t = attention_forward(s, words);
  CHECK(t.weights[0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(t.weights[1] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(t.weights[2] == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("the plain model is order invariant") {
  for (auto head : {HeadKind::kFixedLinear, HeadKind::kTrainableLinear, HeadKind::kTwoLayer}) {
    const auto s = plain_state(head, 3);
    std::vector<WordId> words{0, 3, 3, 5, 6, 1};
    const auto ref = attention_forward(s, words, 2);
    std::mt19937 rng(4);
    for (int k = 0; k < 10; ++k) {
      std::shuffle(words.begin(), words.end(), rng);
      const auto t = attention_forward(s, words, 2);
      CHECK((t.context - ref.context).cwiseAbs().maxCoeff() < 1e-14);
      CHECK(std::abs(t.loss - ref.loss) < 1e-14);
    }
  }
}

TEST_CASE("softmax ignores a common shift of the scores") {
  auto s = plain_state(HeadKind::kTrainableLinear, 5);
  const std::vector<WordId> words{0, 2, 4, 6};
  const auto a = attention_forward(s, words);
  // Adding c*q/|q|^2 to every key shifts every score by c.
  const Vector shift = 3.7 * s.query / s.query.squaredNorm();
  s.keys.rowwise() += shift.transpose();
  const auto b = attention_forward(s, words);
  for (std::size_t i = 0; i < words.size(); ++i) CHECK(std::abs(a.weights[i] - b.weights[i]) < 1e-12);
}

TEST_CASE("rescaling embeddings by |q| and the query to unit length keeps the context") {
  const auto s = plain_state(HeadKind::kTwoLayer, 8);
  ModelState r = s;
  const double qn = s.query_norm();
  r.embeddings *= qn;
  r.query /= qn;
  r.keys *= qn;  // keeps every score
  const std::vector<WordId> words{1, 2, 5};
  const auto a = attention_forward(s, words);
  const auto b = attention_forward(r, words);
  CHECK((a.context - b.context).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("pads are excluded from attention") {
  const auto s = plain_state(HeadKind::kFixedLinear, 2);
  const std::vector<WordId> with_pad{1, 6, 2, 6};
  const std::vector<WordId> without{1, 2};
  const auto a = attention_forward(s, with_pad, std::nullopt, WordId{6});
  const auto b = attention_forward(s, without);
  CHECK(a.weights.size() == 2);
  CHECK((a.context - b.context).cwiseAbs().maxCoeff() < 1e-15);
  const std::vector<WordId> pads{6, 6};
  CHECK_THROWS_AS(attention_forward(s, pads, std::nullopt, WordId{6}), InvalidArgument);
}

TEST_CASE("classifier heads") {
  const Vector x = Vector::LinSpaced(3, -1.0, 2.0);
  SUBCASE("zero U is uniform") {
    const auto h = ClassifierHead::trainable_linear(Matrix::Zero(3, 4));
    const auto o = classifier_forward(h, x);
    for (int j = 0; j < 4; ++j) CHECK(o.probabilities[j] == doctest::Approx(0.25).epsilon(1e-15));
  }
  SUBCASE("two-layer with zero U2 and constant b2 is uniform") {
    const auto h = ClassifierHead::two_layer(Matrix::Random(3, 5), Vector::Random(5), Matrix::Zero(5, 3),
                                             Vector::Constant(3, 0.8));
    const auto o = classifier_forward(h, x);
    for (int j = 0; j < 3; ++j) CHECK(o.probabilities[j] == doctest::Approx(1.0 / 3).epsilon(1e-15));
  }
  SUBCASE("random head gives a distribution") {
    const auto h = ClassifierHead::two_layer(Matrix::Random(3, 5), Vector::Random(5), Matrix::Random(5, 3),
                                             Vector::Random(3));
    const auto o = classifier_forward(h, x);
    CHECK(std::abs(o.probabilities.sum() - 1.0) < 1e-12);
    CHECK(o.probabilities.minCoeff() > 0.0);
    CHECK(o.probabilities.maxCoeff() < 1.0);
    // ReLU applied after the first affine map.
    const Vector pre = h.u1.transpose() * x + h.b1;
    CHECK((o.hidden_post - pre.cwiseMax(0.0)).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("dimension mismatch") {
    const auto h = ClassifierHead::trainable_linear(Matrix::Zero(4, 2));
    CHECK_THROWS_AS(classifier_forward(h, x), InvalidArgument);
  }
}

TEST_CASE("fixed linear heads need independent columns") {
  Matrix u(3, 2);
  u << 1, 1, 2, 2, 3, 3;
  CHECK_THROWS_AS(ClassifierHead::fixed_linear(u), InvalidArgument);
  u(0, 1) = 0;
  CHECK_NOTHROW(ClassifierHead::fixed_linear(u));
}

TEST_CASE("cross entropy") {
  Vector one_hot = Vector::Zero(3);
  one_hot[1] = 1.0;
  CHECK(cross_entropy(one_hot, 1) == 0.0);
  CHECK(cross_entropy(Vector::Constant(4, 0.25), 2) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  Vector p(3);
  p << 0.7, 0.2, 0.1;
  CHECK(cross_entropy(p, 1) == doctest::Approx(-std::log(0.2)).epsilon(1e-15));
  CHECK(cross_entropy(one_hot, 0) == doctest::Approx(-std::log(kProbabilityFloor)));
}

TEST_CASE("initial state follows the init contract") {
  ModelConfig c;
  const auto s = init_model(c, 500, 4, 3);
  CHECK(s.keys.isZero(0));
  CHECK(s.word_scores().isZero(0));
  CHECK(s.query_norm() == doctest::Approx(1.0).epsilon(1e-14));
  const Matrix gram = s.head.u1.transpose() * s.head.u1;
  CHECK((gram - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-12);
  // Per-coordinate variance close to 1e-6.
  const double var = s.embeddings.squaredNorm() / static_cast<double>(s.embeddings.size());
  CHECK(var == doctest::Approx(1e-6).epsilon(0.05));
  const auto again = init_model(c, 500, 4, 3);
  CHECK(again.embeddings == s.embeddings);
}

TEST_CASE("state validation catches bad values") {
  auto s = plain_state(HeadKind::kFixedLinear, 1);
  s.freeze.query = true;
  s.query.setZero();
  CHECK_THROWS(s.validate());
  s = plain_state(HeadKind::kFixedLinear, 1);
  s.embeddings(0, 0) = std::nan("");
  CHECK_THROWS(s.validate());
}

TEST_CASE("convolution output shape and kernels") {
  auto cfg = testing::small_config(HeadKind::kTrainableLinear, true);
  auto s = init_model(cfg, 7, 2, 4);
  testing::randomize(s, 40);
  const std::vector<WordId> words{3, 1, 4, 1, 5, 6};

  SUBCASE("length m+1 gives m columns") {
    const auto out = conv_preprocess(s, words);
    CHECK(out.embeddings.cols() == 5);
    CHECK(out.keys.cols() == 5);
    CHECK(out.embeddings.rows() == 3);
    CHECK(out.keys.rows() == 2);
  }
  SUBCASE("first-slice identity selects the leading word") {
    s.conv->emb_first = Matrix::Identity(3, 3);
    s.conv->emb_second.setZero();
    const auto out = conv_preprocess(s, words);
    for (std::size_t i = 0; i + 1 < words.size(); ++i) {
      CHECK((out.embeddings.col(static_cast<Eigen::Index>(i)) - s.embeddings.row(words[i]).transpose()).norm() ==
            0.0);
    }
  }
  SUBCASE("matches a sliding-window dot product") {
    const auto out = conv_preprocess(s, words);
    const auto& c = *s.conv;
    for (std::size_t i = 0; i + 1 < words.size(); ++i) {
      for (int k = 0; k < 3; ++k) {
        double e = 0;
        for (int j = 0; j < 3; ++j) {
          e += c.emb_first(k, j) * s.embeddings(words[i], j) + c.emb_second(k, j) * s.embeddings(words[i + 1], j);
        }
        CHECK(std::abs(out.embeddings(k, static_cast<Eigen::Index>(i)) - e) < 1e-12);
      }
      for (int k = 0; k < 2; ++k) {
        double e = 0;
        for (int j = 0; j < 2; ++j) {
          e += c.key_first(k, j) * s.keys(words[i], j) + c.key_second(k, j) * s.keys(words[i + 1], j);
        }
        CHECK(std::abs(out.keys(k, static_cast<Eigen::Index>(i)) - e) < 1e-12);
      }
    }
    // The attention path scores pair columns with the query.
    const auto t = attention_forward(s, words);
    for (std::size_t i = 0; i < t.scores.size(); ++i) {
      CHECK(std::abs(t.scores[i] - s.query.dot(out.keys.col(static_cast<Eigen::Index>(i)))) < 1e-12);
    }
  }
  SUBCASE("errors") {
    const std::vector<WordId> one{2};
    CHECK_THROWS_AS(conv_preprocess(s, one), InvalidArgument);
    const auto plain = plain_state(HeadKind::kFixedLinear, 1);
    CHECK_THROWS_AS(conv_preprocess(plain, words), InvalidArgument);
  }
}

TEST_CASE("unit scores and embeddings") {
  auto s = init_model(testing::small_config(HeadKind::kFixedLinear, true), 7, 2, 4);
  testing::randomize(s, 41);
  const UnitId u = pair_unit(2, 5, 7);
  const Vector k = s.conv->key_first * s.keys.row(2).transpose() + s.conv->key_second * s.keys.row(5).transpose();
  CHECK(std::abs(unit_score(s, u) - s.query.dot(k)) < 1e-12);
  const Vector e = s.conv->emb_first * s.embeddings.row(2).transpose() +
                   s.conv->emb_second * s.embeddings.row(5).transpose();
  CHECK((unit_raw_embedding(s, u) - e).norm() < 1e-12);
  CHECK((unit_embedding(s, u) - s.query_norm() * e).norm() < 1e-12);
}
