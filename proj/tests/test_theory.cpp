#include <doctest.h>

#include <cmath>
#include <random>

#include "adl/error.hpp"
#include "adl/theory.hpp"
#include "helpers.hpp"

using namespace adl;

namespace {

long double curve_oracle(long double s, int m) { return std::sqrt(2.0L * (s + (std::exp(s) - 1.0L) / m)); }

ModelState tiny_plain(std::uint64_t seed, int classes = 2) {
  auto s = init_model(testing::small_config(HeadKind::kTrainableLinear), 7, classes, seed);
  testing::randomize(s, seed + 1, 0.3);
  return s;
}

}  // namespace

TEST_CASE("score/norm curve values") {
  CHECK(sen_norm_from_score(0.0, 20) == 0.0);
  CHECK(std::abs(sen_norm_from_score(1.0, 20) - static_cast<double>(curve_oracle(1.0L, 20))) < 1e-14);
  CHECK(sen_norm_from_score(1.0, 20) == doctest::Approx(1.47371).epsilon(1e-5));
  for (double s : {1e-8, 0.3, 2.0, 7.5}) {
    for (int m : {1, 5, 20, 100}) {
      CHECK(std::abs(sen_norm_from_score(s, m) - static_cast<double>(curve_oracle(s, m))) <
            1e-13 * (1 + static_cast<double>(curve_oracle(s, m))));
    }
  }
  CHECK_THROWS_AS(sen_norm_from_score(-1.0, 20), DomainError);
  CHECK(sen_radicand(-1.0, 20) < 0.0);
  CHECK_THROWS_AS(sen_norm_from_score(1.0, 0), InvalidArgument);
  CHECK_THROWS_AS(sen_norm_from_score(std::nan(""), 3), InvalidArgument);
}

TEST_CASE("the curve is increasing and its inverse round-trips") {
  for (int m : {1, 5, 20, 100}) {
    double prev = -1.0;
    for (int i = 0; i <= 200; ++i) {
      const double s = 0.05 * i;
      const double v = sen_norm_from_score(s, m);
      CHECK(v > prev);
      prev = v;
      CHECK(std::abs(sen_score_from_norm(v, m) - s) < 1e-9);
    }
  }
  const double v = sen_norm_from_score(2.5, 20);
  CHECK(std::abs(sen_score_from_norm(v, 20) - 2.5) < 1e-10);
  const double s10 = sen_score_from_norm(10.0, 20);
  CHECK(std::abs(sen_norm_from_score(s10, 20) - 10.0) < 1e-9);
  CHECK(sen_score_from_norm(0.0, 20) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK_THROWS_AS(sen_score_from_norm(-0.1, 20), InvalidArgument);
}

TEST_CASE("curve CSV") {
  const auto dir = testing::scratch_dir("curve");
  const auto path = (dir / "c.csv").string();
  write_sen_curve_csv(20, 4.0, 5, path);
  const auto text = testing::slurp(path);
  CHECK(text.rfind("s,norm\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 6);
  CHECK_THROWS_AS(write_sen_curve_csv(20, 4.0, 1, path), InvalidArgument);
}

TEST_CASE("identity residuals on a short low-variance run") {
  const auto [train_set, test_set] = generate_synthetic(TopicScheme::contiguous(2, 1, 40, 6), 60, 10, 2);
  ModelConfig mc;
  mc.dim = 8;
  auto state = init_model(mc, train_set.vocab_size, 2, 4);
  TrainConfig tc;
  tc.max_epochs = 40;
  tc.learning_rate = 0.1;
  tc.tracked_units = {0, 1, 5};
  tc.background_epochs = {0, 20, 40};
  const auto report = train(state, train_set, test_set, tc);
  const auto& traj = report.trajectory;

  const auto same = sen_identity_residual(traj, train_set, 0, 20, 20);
  CHECK(same.residual == 0.0);

  for (WordId w : {WordId{0}, WordId{1}}) {
    const auto general = sen_identity_residual(traj, train_set, w, 0, 40);
    const auto reduced = sen_reduced_residual(traj, w, 5, 0, 40);
    CAPTURE(w);
    CHECK(general.lhs > 0.0);
    CHECK(general.normalized < 0.05);
    // With near-zero embeddings the background means approach 1/m and 0.
    CHECK(std::abs(general.lhs - reduced.lhs) < 0.05 * (1 + std::abs(general.lhs)));
    CHECK(std::abs(general.rhs - reduced.rhs) < 0.05 * (1 + std::abs(general.rhs)));
  }
  CHECK_THROWS_AS(sen_identity_residual(traj, train_set, 0, 0, 10), StateError);
  CHECK_THROWS_AS(sen_reduced_residual(traj, 3, 5, 0, 40), InvalidArgument);
}

TEST_CASE("background means from a hand-built snapshot") {
  Trajectory t({}, {0, 1, 2});
  t.append(EpochMetrics{0, 1, 1, 0, 0, 1}, {});
  BackgroundSnapshot b;
  b.epoch = 0;
  b.scores = Vector::Zero(3);
  b.scores[1] = std::log(3.0);
  b.embeddings = Matrix::Zero(3, 2);
  b.embeddings(1, 0) = 3.0;
  b.embeddings(2, 1) = 1.0;
  t.add_background(b);
  const Dataset d = testing::dataset({testing::sentence({0, 1, 2}, 0), testing::sentence({0, 2}, 1)}, 3, 2);
  const auto m = background_means(t, *t.background(0), d, 0);
  // Sentence one: Z = 3 + 1, v = (3*3 + 1*(0,1)) / 4. Sentence two: Z = 1, v = (0,1).
  CHECK(m.sentences == 2);
  CHECK(m.mean_inverse_partition == doctest::Approx((0.25 + 1.0) / 2));
  CHECK(m.mean_context[0] == doctest::Approx(9.0 / 4 / 2));
  CHECK(m.mean_context[1] == doctest::Approx((0.25 + 1.0) / 2));
}

TEST_CASE("gradient flow") {
  const auto s = tiny_plain(3);
  const auto data = testing::random_dataset(12, 7, 2, 2, 5, 9);
  FlowOptions opt;
  opt.tracked = {0, 1, 2};

  SUBCASE("zero horizon returns the initial state") {
    const auto r = integrate_gradient_flow(s, data, 0.0, 0.1, opt);
    CHECK(r.times.size() == 1);
    CHECK(r.final_state.embeddings == s.embeddings);
  }
  SUBCASE("Euler with dt = 1 is gradient descent") {
    const auto r = integrate_gradient_flow(s, data, 5.0, 1.0, opt);
    ModelState gd = s;
    for (int k = 0; k < 5; ++k) apply_step(gd, compute_gradients(gd, data).descent, opt.learning_rate);
    CHECK(r.final_state.embeddings == gd.embeddings);
    CHECK(r.final_state.keys == gd.keys);
    CHECK(r.final_state.head.u1 == gd.head.u1);
    CHECK(r.times.size() == 6);
  }
  SUBCASE("RK4 beats Euler against a fine reference") {
    const auto ref = integrate_gradient_flow(s, data, 2.0, 0.002, opt);
    const auto euler = integrate_gradient_flow(s, data, 2.0, 0.2, opt);
    FlowOptions rk = opt;
    rk.method = FlowMethod::kRk4;
    const auto rk4 = integrate_gradient_flow(s, data, 2.0, 0.2, rk);
    const double e_err = (euler.final_state.keys - ref.final_state.keys).norm();
    const double r_err = (rk4.final_state.keys - ref.final_state.keys).norm();
    CHECK(r_err < 0.1 * e_err);
  }
  SUBCASE("argument checks") {
    CHECK_THROWS_AS(integrate_gradient_flow(s, data, 1.0, 0.0, opt), InvalidArgument);
    CHECK_THROWS_AS(integrate_gradient_flow(s, data, 1.0, 2.0, opt), InvalidArgument);
    CHECK_THROWS_AS(integrate_gradient_flow(s, data, -1.0, 0.1, opt), InvalidArgument);
  }
}

TEST_CASE("requeried keys keep every score") {
  Eigen::MatrixXd k(2, 2);
  k << 1.5, 0.0, -0.5, 0.0;
  Eigen::VectorXd q(2), q2(2);
  q << 1.0, 1.0;
  q2 << 1.0, 0.0;
  const auto out = requery_keys(k, q, q2);
  CHECK(out(0, 0) == doctest::Approx(1.0));
  CHECK(out(1, 0) == 0.0);
  CHECK((q2.transpose() * out - q.transpose() * k).cwiseAbs().maxCoeff() < 1e-15);

  std::mt19937_64 rng(12);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd kk(4, 9);
    Eigen::VectorXd a(4), b(4);
    for (Eigen::Index i = 0; i < kk.size(); ++i) kk.data()[i] = n(rng);
    for (int i = 0; i < 4; ++i) a[i] = n(rng), b[i] = n(rng);
    if (trial % 3 == 0) b[0] = 0.0;
    const auto r = requery_keys(kk, a, b);
    CHECK((b.transpose() * r - a.transpose() * kk).cwiseAbs().maxCoeff() < 1e-12);
  }
  // Same query: scores already agree.
  const auto same = requery_keys(k, q, q);
  CHECK((q.transpose() * same - q.transpose() * k).cwiseAbs().maxCoeff() < 1e-15);
  CHECK_THROWS_AS(requery_keys(k, q, Eigen::VectorXd::Zero(2)), InvalidArgument);
  CHECK_THROWS_AS(requery_keys(k, Eigen::VectorXd::Ones(3), q2), InvalidArgument);
}

TEST_CASE("rescaled update matches a raw step") {
  auto s = tiny_plain(6);
  s.query *= 2.3 / s.query_norm();
  s.freeze.query = true;
  s.freeze.classifier = true;
  const auto data = testing::random_dataset(10, 7, 2, 2, 6, 3);
  const double tau = 0.05;
  ModelState next = s;
  apply_step(next, compute_gradients(s, data).descent, tau);
  const auto r = rescaled_update(s, data, tau * s.query_norm());
  const Matrix dv = s.query_norm() * (next.embeddings - s.embeddings);
  const Vector ds = (next.keys - s.keys) * s.query;
  CHECK((dv - r.delta_v).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((ds - r.delta_s).cwiseAbs().maxCoeff() < 1e-10);

  ModelState trainable = s;
  trainable.freeze.query = false;
  CHECK_THROWS_AS(rescaled_update(trainable, data, 0.1), InvalidArgument);
  auto conv = init_model(testing::small_config(HeadKind::kTrainableLinear, true), 7, 2, 1);
  CHECK_THROWS_AS(rescaled_update(conv, data, 0.1), InvalidArgument);
  CHECK_THROWS_AS(rescaled_update(s, testing::dataset({}, 7, 2), 0.1), InvalidArgument);
}
