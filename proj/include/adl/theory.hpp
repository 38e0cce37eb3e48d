#pragma once

#include <optional>
#include <string>
#include <vector>

#include "adl/corpus.hpp"
#include "adl/engine.hpp"
#include "adl/model.hpp"
#include "adl/trajectory.hpp"

namespace adl {

// ‖v‖ = sqrt(2 (s + e^s / m - 1 / m)). Throws DomainError when the radicand
// is negative (below the initial manifold, i.e. s < 0).
double sen_norm_from_score(double score, int m);

// Radicand of the map above; negative below the manifold.
double sen_radicand(double score, int m);

// Inverse of sen_norm_from_score on s >= 0 by bisection; the bracket doubles
// until it contains the root.
double sen_score_from_norm(double norm, int m, double tol = 1e-12);

// Writes `s,norm` rows for s on a uniform grid over [0, s_max].
void write_sen_curve_csv(int m, double s_max, int points, const std::string& path);

struct BackgroundMeans {
  double mean_inverse_partition = 0.0;  // <1 / Z(chi \ t)>
  Vector mean_context;                  // <v(chi \ t)>, scaled units
  std::size_t sentences = 0;
};

// Sample means over the training sentences containing `word`, evaluated from
// a recorded background snapshot. Plain (word-level) models only.
BackgroundMeans background_means(const Trajectory& trajectory,
                                 const BackgroundSnapshot& snapshot,
                                 const Dataset& dataset, WordId word);

struct IdentityTerms {
  double lhs = 0.0;
  double rhs = 0.0;
  double residual = 0.0;    // lhs - rhs
  double normalized = 0.0;  // |residual| / (1 + |lhs|)
};

// [s + e^s <1/Z(chi\t)>]_{t0}^{t1} versus [1/2 ‖v - <v(chi\t)>‖^2]_{t0}^{t1}
// with the means taken from the background snapshots at t0 and t1.
IdentityTerms sen_identity_residual(const Trajectory& trajectory,
                                    const Dataset& dataset, WordId word,
                                    int t0, int t1);

// The same identity with <1/Z> = 1/m and <v(chi\t)> = 0.
IdentityTerms sen_reduced_residual(const Trajectory& trajectory, WordId word,
                                   int m, int t0, int t1);

enum class FlowMethod { kEuler, kRk4 };

struct FlowResult {
  std::vector<double> times;
  std::vector<UnitId> tracked;
  std::vector<std::vector<double>> scores;   // [time][unit]
  std::vector<std::vector<double>> v_norms;  // [time][unit]
  ModelState final_state;
  // States at the recorded times, kept only when requested.
  std::vector<ModelState> states;
};

struct FlowOptions {
  double learning_rate = 0.1;  // folded into the vector field
  FlowMethod method = FlowMethod::kEuler;
  std::vector<UnitId> tracked;
  double record_interval = 1.0;
  bool keep_states = false;
  FreezeMask freeze;
  bool use_state_freeze = true;
};

// Integrates d(param)/dt = learning_rate * descent(param) for every unfrozen
// block. One Euler step with dt = 1 is exactly one gradient-descent update.
FlowResult integrate_gradient_flow(const ModelState& state,
                                   const Dataset& dataset, double t_end,
                                   double dt, const FlowOptions& options);

// Column i of the result is (s_i / q_new[j]) e_j with s = q^T K and j the
// first non-zero coordinate of q_new, so q_new^T result = q^T K.
// K is d' x N with keys as columns.
Eigen::MatrixXd requery_keys(const Eigen::MatrixXd& keys,
                             const Eigen::VectorXd& query,
                             const Eigen::VectorXd& new_query);

struct RescaledUpdate {
  Matrix delta_v;  // N x d
  Vector delta_s;  // N
};

// One gradient-descent step written directly in (v, s) coordinates:
//   dv_w = eta/|Psi| sum a_w h,  ds_w = eta/|Psi| sum a_w (v_w - vbar)^T h
// with h the descent signal -dl/d(raw context) and eta = tau ‖q‖. Plain
// models with a fixed query only.
RescaledUpdate rescaled_update(const ModelState& state, const Dataset& dataset,
                               double eta);

}  // namespace adl
