#include "adl/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "adl/error.hpp"
#include "rng.hpp"

namespace adl {

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::kFixedLinear: return "fixed_linear";
    case HeadKind::kTrainableLinear: return "trainable_linear";
    case HeadKind::kTwoLayer: return "two_layer";
  }
  return "unknown";
}

HeadKind head_kind_from_string(const std::string& name) {
  if (name == "fixed_linear") return HeadKind::kFixedLinear;
  if (name == "trainable_linear") return HeadKind::kTrainableLinear;
  if (name == "two_layer") return HeadKind::kTwoLayer;
  throw InvalidArgument("unknown head kind '" + name +
                        "' (expected fixed_linear, trainable_linear or two_layer)");
}

// ---------------------------------------------------------------------------
// Classifier heads

int ClassifierHead::num_classes() const {
  return static_cast<int>(kind == HeadKind::kTwoLayer ? u2.cols() : u1.cols());
}

void check_full_column_rank(const Matrix& u) {
  if (u.cols() == 0 || u.rows() < u.cols()) {
    throw InvalidArgument("classifier: U needs at least as many rows as columns");
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(u);
  qr.setThreshold(1e-10);
  if (qr.rank() != u.cols()) {
    throw InvalidArgument("classifier: columns of the fixed U are linearly dependent");
  }
}

ClassifierHead ClassifierHead::fixed_linear(Matrix u) {
  check_full_column_rank(u);
  ClassifierHead h;
  h.kind = HeadKind::kFixedLinear;
  h.u1 = std::move(u);
  return h;
}

ClassifierHead ClassifierHead::trainable_linear(Matrix u) {
  ClassifierHead h;
  h.kind = HeadKind::kTrainableLinear;
  h.u1 = std::move(u);
  return h;
}

ClassifierHead ClassifierHead::two_layer(Matrix u1, Vector b1, Matrix u2, Vector b2) {
  if (b1.size() != u1.cols() || u2.rows() != u1.cols() || b2.size() != u2.cols()) {
    throw InvalidArgument("classifier: two-layer head dimensions do not chain");
  }
  ClassifierHead h;
  h.kind = HeadKind::kTwoLayer;
  h.u1 = std::move(u1);
  h.b1 = std::move(b1);
  h.u2 = std::move(u2);
  h.b2 = std::move(b2);
  return h;
}

namespace {

void softmax_into(const Vector& logits, Vector& probs, Vector& log_probs) {
  const double shift = logits.maxCoeff();
  Vector shifted = logits.array() - shift;
  const double log_z = std::log(shifted.array().exp().sum());
  log_probs = shifted.array() - log_z;
  probs = log_probs.array().exp();
}

}  // namespace

HeadOutput classifier_forward(const ClassifierHead& head,
                              const Eigen::Ref<const Vector>& context) {
  if (context.size() != head.u1.rows()) {
    throw InvalidArgument("classifier: context has dimension " +
                          std::to_string(context.size()) + ", head expects " +
                          std::to_string(head.u1.rows()));
  }
  HeadOutput out;
  if (head.kind == HeadKind::kTwoLayer) {
    out.hidden_pre = head.u1.transpose() * context + head.b1;
    out.hidden_post = out.hidden_pre.cwiseMax(0.0);
    out.logits = head.u2.transpose() * out.hidden_post + head.b2;
  } else {
    out.logits = head.u1.transpose() * context;
  }
  softmax_into(out.logits, out.probabilities, out.log_probabilities);
  return out;
}

double cross_entropy(const Eigen::Ref<const Vector>& probs, int label) {
  if (label < 0 || label >= probs.size()) {
    throw InvalidArgument("cross_entropy: label out of range");
  }
  return -std::log(std::max(probs[label], kProbabilityFloor));
}

// ---------------------------------------------------------------------------
// Model state

void ModelState::validate() const {
  const auto n = embeddings.rows();
  if (keys.rows() != n) throw InvalidArgument("model: keys and embeddings disagree on N");
  if (query.size() != keys.cols()) throw InvalidArgument("model: query dimension != key dimension");
  if (head.u1.rows() != embeddings.cols()) {
    throw InvalidArgument("model: classifier input dimension != embedding dimension");
  }
  auto finite = [](const auto& m) { return m.allFinite(); };
  if (!finite(embeddings) || !finite(keys) || !finite(query) || !finite(head.u1) ||
      !finite(head.b1) || !finite(head.u2) || !finite(head.b2)) {
    throw NumericError("model: non-finite parameter");
  }
  if (conv) {
    const auto d = embeddings.cols();
    const auto dk = keys.cols();
    if (conv->emb_first.rows() != d || conv->emb_first.cols() != d ||
        conv->emb_second.rows() != d || conv->emb_second.cols() != d ||
        conv->key_first.rows() != dk || conv->key_first.cols() != dk ||
        conv->key_second.rows() != dk || conv->key_second.cols() != dk) {
      throw InvalidArgument("model: convolution kernel shapes");
    }
    if (!finite(conv->emb_first) || !finite(conv->emb_second) ||
        !finite(conv->key_first) || !finite(conv->key_second)) {
      throw NumericError("model: non-finite convolution kernel");
    }
  }
  if (freeze.query && query.squaredNorm() == 0.0) {
    throw InvalidArgument("model: the query must be non-zero when it is held fixed");
  }
}

namespace {

template <typename Rng>
Matrix gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double variance) {
  std::normal_distribution<double> normal(0.0, std::sqrt(variance));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = variance > 0 ? normal(rng) : 0.0;
  return m;
}

}  // namespace

Matrix random_orthonormal(int rows, int cols, std::uint64_t seed) {
  if (rows < cols || cols <= 0) {
    throw InvalidArgument("random_orthonormal: need rows >= cols > 0");
  }
  auto rng = detail::make_rng(seed, 0x0a7d);
  Eigen::MatrixXd g = gaussian(rng, rows, cols, 1.0);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
  return q;
}

ModelState init_model(const ModelConfig& config, std::size_t vocab_size,
                      int num_classes, std::uint64_t seed) {
  if (config.dim <= 0 || config.key_dim <= 0) throw InvalidArgument("model: dimensions must be positive");
  if (vocab_size == 0) throw InvalidArgument("model: empty vocabulary");
  if (num_classes <= 0) throw InvalidArgument("model: need at least one class");
  if (config.embedding_variance < 0 || config.query_variance < 0) {
    throw InvalidArgument("model: variances must be non-negative");
  }
  const auto n = static_cast<Eigen::Index>(vocab_size);
  ModelState state;
  auto emb_rng = detail::make_rng(seed, 1);
  state.embeddings = gaussian(emb_rng, n, config.dim, config.embedding_variance);
  state.keys = Matrix::Zero(n, config.key_dim);

  auto q_rng = detail::make_rng(seed, 2);
  if (config.query_variance > 0) {
    state.query = gaussian(q_rng, config.key_dim, 1, config.query_variance);
  } else {
    Vector q;
    do {
      q = gaussian(q_rng, config.key_dim, 1, 1.0);
    } while (q.norm() == 0.0);
    state.query = q / q.norm();
  }

  auto head_rng = detail::make_rng(seed, 3);
  switch (config.head) {
    case HeadKind::kFixedLinear:
      if (config.dim < num_classes) {
        throw InvalidArgument("model: fixed linear head needs d >= J for independent columns");
      }
      state.head = ClassifierHead::fixed_linear(
          random_orthonormal(config.dim, num_classes, detail::splitmix64(seed ^ 0x4ead)));
      break;
    case HeadKind::kTrainableLinear:
      state.head = ClassifierHead::trainable_linear(
          gaussian(head_rng, config.dim, num_classes, 1.0 / config.dim));
      break;
    case HeadKind::kTwoLayer: {
      if (config.hidden <= 0) throw InvalidArgument("model: hidden width must be positive");
      Matrix u1 = gaussian(head_rng, config.dim, config.hidden, 1.0 / config.dim);
      Matrix u2 = gaussian(head_rng, config.hidden, num_classes, 1.0 / config.hidden);
      state.head = ClassifierHead::two_layer(std::move(u1), Vector::Zero(config.hidden),
                                             std::move(u2), Vector::Zero(num_classes));
      break;
    }
  }
  if (config.conv) {
    auto conv_rng = detail::make_rng(seed, 4);
    ConvParams c;
    c.emb_first = gaussian(conv_rng, config.dim, config.dim, 1.0 / (2.0 * config.dim));
    c.emb_second = gaussian(conv_rng, config.dim, config.dim, 1.0 / (2.0 * config.dim));
    c.key_first = gaussian(conv_rng, config.key_dim, config.key_dim, 1.0 / (2.0 * config.key_dim));
    c.key_second = gaussian(conv_rng, config.key_dim, config.key_dim, 1.0 / (2.0 * config.key_dim));
    state.conv = std::move(c);
  }
  state.validate();
  return state;
}

// ---------------------------------------------------------------------------
// Projections and attention

Projections make_projections(const ModelState& state, std::optional<WordId> pad_id) {
  Projections p;
  p.conv = state.conv.has_value();
  p.vocab_size = state.vocab_size();
  p.query_norm = state.query_norm();
  p.pad_id = pad_id;
  if (p.conv) {
    const auto& c = *state.conv;
    p.first_emb = state.embeddings * c.emb_first.transpose();
    p.second_emb = state.embeddings * c.emb_second.transpose();
    p.first_score = state.keys * (c.key_first.transpose() * state.query);
    p.second_score = state.keys * (c.key_second.transpose() * state.query);
  } else {
    p.first_emb = state.embeddings;
    p.first_score = state.keys * state.query;
  }
  return p;
}

std::size_t Projections::positions(std::span<const WordId> words) const {
  if (!conv) return words.size();
  return words.size() < 2 ? 0 : words.size() - 1;
}

bool Projections::position_valid(std::span<const WordId> words, std::size_t i) const {
  if (!pad_id) return true;
  if (words[i] == *pad_id) return false;
  return !conv || words[i + 1] != *pad_id;
}

UnitId Projections::unit(std::span<const WordId> words, std::size_t i) const {
  return conv ? pair_unit(words[i], words[i + 1], vocab_size) : UnitId{words[i]};
}

double Projections::score(std::span<const WordId> words, std::size_t i) const {
  if (!conv) return first_score[words[i]];
  return first_score[words[i]] + second_score[words[i + 1]];
}

Vector Projections::embedding(std::span<const WordId> words, std::size_t i) const {
  if (!conv) return first_emb.row(words[i]).transpose();
  return (first_emb.row(words[i]) + second_emb.row(words[i + 1])).transpose();
}

ForwardTrace attention_forward(const ModelState& state, std::span<const WordId> sentence,
                               std::optional<int> label, std::optional<WordId> pad_id) {
  state.validate();
  for (WordId w : sentence) {
    if (w >= state.vocab_size()) throw InvalidArgument("attention: word id out of range");
  }
  return attention_forward(state, make_projections(state, pad_id), sentence, label);
}

ForwardTrace attention_forward(const ModelState& state, const Projections& proj,
                               std::span<const WordId> sentence, std::optional<int> label) {
  if (proj.conv && sentence.size() < 2) {
    throw InvalidArgument("attention: convolution needs a sentence of length >= 2");
  }
  ForwardTrace t;
  const std::size_t n = proj.positions(sentence);
  double max_score = -std::numeric_limits<double>::infinity();
  std::vector<Vector> embeddings;
  for (std::size_t i = 0; i < n; ++i) {
    if (!proj.position_valid(sentence, i)) continue;
    t.units.push_back(proj.unit(sentence, i));
    t.scores.push_back(proj.score(sentence, i));
    embeddings.push_back(proj.embedding(sentence, i));
    max_score = std::max(max_score, t.scores.back());
  }
  if (t.units.empty()) throw InvalidArgument("attention: sentence has no non-pad position");
  if (!std::isfinite(max_score)) throw NumericError("attention: non-finite score");
  double z = 0.0;
  t.weights.resize(t.scores.size());
  for (std::size_t i = 0; i < t.scores.size(); ++i) {
    t.weights[i] = std::exp(t.scores[i] - max_score);
    z += t.weights[i];
  }
  t.log_partition = max_score + std::log(z);
  t.raw_context = Vector::Zero(state.dim());
  for (std::size_t i = 0; i < t.weights.size(); ++i) {
    t.weights[i] /= z;
    t.raw_context += t.weights[i] * embeddings[i];
  }
  t.context = proj.query_norm * t.raw_context;
  t.head = classifier_forward(state.head, t.raw_context);
  if (label) {
    if (*label < 0 || *label >= state.head.num_classes()) {
      throw InvalidArgument("attention: label out of range");
    }
    t.loss = -t.head.log_probabilities[*label];
  }
  return t;
}

ConvOutput conv_preprocess(const ModelState& state, std::span<const WordId> sentence) {
  if (!state.conv) throw InvalidArgument("conv_preprocess: model has no convolution parameters");
  if (sentence.size() < 2) throw InvalidArgument("conv_preprocess: sentence length must be >= 2");
  const auto& c = *state.conv;
  const auto cols = static_cast<Eigen::Index>(sentence.size() - 1);
  ConvOutput out{Matrix(state.dim(), cols), Matrix(state.key_dim(), cols)};
  for (Eigen::Index i = 0; i < cols; ++i) {
    const WordId a = sentence[i];
    const WordId b = sentence[i + 1];
    if (a >= state.vocab_size() || b >= state.vocab_size()) {
      throw InvalidArgument("conv_preprocess: word id out of range");
    }
    out.embeddings.col(i) = c.emb_first * state.embeddings.row(a).transpose() +
                            c.emb_second * state.embeddings.row(b).transpose();
    out.keys.col(i) = c.key_first * state.keys.row(a).transpose() +
                      c.key_second * state.keys.row(b).transpose();
  }
  return out;
}

double unit_score(const ModelState& state, UnitId unit) {
  const auto n = static_cast<UnitId>(state.vocab_size());
  if (!state.conv) {
    if (unit >= n) throw InvalidArgument("unit_score: word id out of range");
    return state.keys.row(static_cast<Eigen::Index>(unit)).dot(state.query);
  }
  if (unit >= n * n) throw InvalidArgument("unit_score: pair id out of range");
  const auto a = static_cast<Eigen::Index>(unit / n);
  const auto b = static_cast<Eigen::Index>(unit % n);
  const auto& c = *state.conv;
  Vector key = c.key_first * state.keys.row(a).transpose() + c.key_second * state.keys.row(b).transpose();
  return key.dot(state.query);
}

Vector unit_raw_embedding(const ModelState& state, UnitId unit) {
  const auto n = static_cast<UnitId>(state.vocab_size());
  if (!state.conv) {
    if (unit >= n) throw InvalidArgument("unit_embedding: word id out of range");
    return state.embeddings.row(static_cast<Eigen::Index>(unit)).transpose();
  }
  if (unit >= n * n) throw InvalidArgument("unit_embedding: pair id out of range");
  const auto a = static_cast<Eigen::Index>(unit / n);
  const auto b = static_cast<Eigen::Index>(unit % n);
  const auto& c = *state.conv;
  return c.emb_first * state.embeddings.row(a).transpose() +
         c.emb_second * state.embeddings.row(b).transpose();
}

}  // namespace adl
