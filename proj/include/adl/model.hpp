#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "adl/corpus.hpp"

namespace adl {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class HeadKind { kFixedLinear, kTrainableLinear, kTwoLayer };

std::string to_string(HeadKind kind);
HeadKind head_kind_from_string(const std::string& name);

// softmax(U^T x) for the linear heads;
// softmax(U2^T relu(U1^T x + b1) + b2) for the two-layer head.
struct ClassifierHead {
  HeadKind kind = HeadKind::kFixedLinear;
  Matrix u1;  // d x J (linear) or d x H (two-layer)
  Vector b1;  // H, two-layer only
  Matrix u2;  // H x J, two-layer only
  Vector b2;  // J, two-layer only

  int input_dim() const { return static_cast<int>(u1.rows()); }
  int num_classes() const;
  bool trainable() const { return kind != HeadKind::kFixedLinear; }

  static ClassifierHead fixed_linear(Matrix u);
  static ClassifierHead trainable_linear(Matrix u);
  static ClassifierHead two_layer(Matrix u1, Vector b1, Matrix u2, Vector b2);
};

struct HeadOutput {
  Vector logits;
  Vector probabilities;
  Vector log_probabilities;
  Vector hidden_pre;   // two-layer only
  Vector hidden_post;  // two-layer only
};

HeadOutput classifier_forward(const ClassifierHead& head,
                              const Eigen::Ref<const Vector>& context);

// -log(probs[label]) with the probability floored at 1e-300.
double cross_entropy(const Eigen::Ref<const Vector>& probs, int label);

inline constexpr double kProbabilityFloor = 1e-300;

// Two-word convolution applied to embeddings and keys before attention.
// Position i of a sentence mixes words i and i+1:
//   e_i = first * nu[w_i] + second * nu[w_{i+1}]
struct ConvParams {
  Matrix emb_first;   // d x d
  Matrix emb_second;  // d x d
  Matrix key_first;   // d' x d'
  Matrix key_second;  // d' x d'
};

struct FreezeMask {
  bool embeddings = false;  // nu and the embedding kernels
  bool keys = false;        // kappa and the key kernels
  bool query = true;
  bool classifier = false;
};

struct ModelState {
  Matrix embeddings;  // N x d, raw nu
  Matrix keys;        // N x d'
  Vector query;       // d'
  ClassifierHead head;
  FreezeMask freeze;
  std::optional<ConvParams> conv;

  std::size_t vocab_size() const { return static_cast<std::size_t>(embeddings.rows()); }
  int dim() const { return static_cast<int>(embeddings.cols()); }
  int key_dim() const { return static_cast<int>(keys.cols()); }
  double query_norm() const { return query.norm(); }
  bool classifier_frozen() const { return freeze.classifier || !head.trainable(); }

  // Per-word scores q^T kappa_w.
  Vector word_scores() const { return keys * query; }

  // Throws on non-finite entries, dimension mismatch, or a zero query while
  // the query is frozen.
  void validate() const;
};

struct ModelConfig {
  int dim = 15;
  int key_dim = 15;
  HeadKind head = HeadKind::kFixedLinear;
  int hidden = 10;
  bool conv = false;
  // Per-coordinate variance of the initial embeddings (sigma^2 / d).
  double embedding_variance = 1e-6;
  // 0 draws the query uniformly on the unit sphere; otherwise each entry is
  // N(0, query_variance).
  double query_variance = 0.0;
};

// Embeddings ~ N(0, embedding_variance); keys = 0; query on the unit sphere;
// fixed heads get orthonormal columns, trainable weights N(0, 1/fan_in) and
// zero biases.
ModelState init_model(const ModelConfig& config, std::size_t vocab_size,
                      int num_classes, std::uint64_t seed);

// Orthonormal d x J matrix from the QR factor of a Gaussian draw.
Matrix random_orthonormal(int rows, int cols, std::uint64_t seed);

// Throws InvalidArgument unless U has full column rank.
void check_full_column_rank(const Matrix& u);

// Attention "units" are words on the plain path and adjacent word pairs on the
// convolution path. A pair (a, b) is encoded as a * N + b.
using UnitId = std::uint64_t;

inline UnitId pair_unit(WordId a, WordId b, std::size_t vocab_size) {
  return static_cast<UnitId>(a) * vocab_size + b;
}

struct ForwardTrace {
  std::vector<UnitId> units;       // attended positions (pads excluded)
  std::vector<double> scores;      // s per position
  std::vector<double> weights;     // exp(s)/Z per position
  double log_partition = 0.0;      // log Z
  Vector raw_context;              // sum_i weight_i * e_i (raw nu units)
  Vector context;                  // ||q|| * raw_context
  HeadOutput head;
  double loss = 0.0;               // only when a label is given
};

// Word-level projections shared by every sentence of a batch. On the plain
// path first_emb = nu and first_score = kappa q; on the convolution path the
// kernels are folded in so a position costs O(d).
struct Projections {
  bool conv = false;
  std::size_t vocab_size = 0;
  Matrix first_emb;
  Matrix second_emb;
  Vector first_score;
  Vector second_score;
  double query_norm = 1.0;
  std::optional<WordId> pad_id;

  std::size_t positions(std::span<const WordId> words) const;
  bool position_valid(std::span<const WordId> words, std::size_t i) const;
  UnitId unit(std::span<const WordId> words, std::size_t i) const;
  double score(std::span<const WordId> words, std::size_t i) const;
  Vector embedding(std::span<const WordId> words, std::size_t i) const;
};

Projections make_projections(const ModelState& state,
                             std::optional<WordId> pad_id = std::nullopt);

ForwardTrace attention_forward(const ModelState& state,
                               std::span<const WordId> sentence,
                               std::optional<int> label = std::nullopt,
                               std::optional<WordId> pad_id = std::nullopt);

ForwardTrace attention_forward(const ModelState& state, const Projections& proj,
                               std::span<const WordId> sentence,
                               std::optional<int> label = std::nullopt);

// Convolution outputs for one sentence: columns are positions.
struct ConvOutput {
  Matrix embeddings;  // d x (len-1)
  Matrix keys;        // d' x (len-1)
};

ConvOutput conv_preprocess(const ModelState& state,
                           std::span<const WordId> sentence);

// Unit-level quantities used by the trajectory recorder.
double unit_score(const ModelState& state, UnitId unit);
Vector unit_raw_embedding(const ModelState& state, UnitId unit);
inline Vector unit_embedding(const ModelState& state, UnitId unit) {
  return state.query_norm() * unit_raw_embedding(state, unit);
}

}  // namespace adl
