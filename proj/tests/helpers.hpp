#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "adl/corpus.hpp"
#include "adl/model.hpp"

namespace testing {

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("adl_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

inline adl::Sentence sentence(std::vector<adl::WordId> words, int label) {
  adl::Sentence s;
  s.words = std::move(words);
  s.label = label;
  return s;
}

inline adl::Dataset dataset(std::vector<adl::Sentence> sentences, std::size_t vocab, int classes) {
  adl::Dataset d;
  d.sentences = std::move(sentences);
  d.vocab_size = vocab;
  d.num_topics = classes;
  return d;
}

// Small random dataset over `vocab` words with sentence lengths in [lo, hi].
inline adl::Dataset random_dataset(std::size_t n, std::size_t vocab, int classes, std::size_t lo,
                                   std::size_t hi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(lo, hi);
  std::uniform_int_distribution<adl::WordId> word(0, static_cast<adl::WordId>(vocab - 1));
  std::uniform_int_distribution<int> label(0, classes - 1);
  std::vector<adl::Sentence> out;
  for (std::size_t i = 0; i < n; ++i) {
    adl::Sentence s;
    const auto l = len(rng);
    for (std::size_t k = 0; k < l; ++k) s.words.push_back(word(rng));
    s.label = label(rng);
    out.push_back(std::move(s));
  }
  return dataset(std::move(out), vocab, classes);
}

// Overwrites every parameter with O(1) Gaussian noise.
inline void randomize(adl::ModelState& s, std::uint64_t seed, double scale = 0.7) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  auto fill = [&](auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  };
  fill(s.embeddings);
  fill(s.keys);
  fill(s.query);
  if (s.head.kind != adl::HeadKind::kFixedLinear) fill(s.head.u1);
  fill(s.head.b1);
  fill(s.head.u2);
  fill(s.head.b2);
  if (s.conv) {
    fill(s.conv->emb_first);
    fill(s.conv->emb_second);
    fill(s.conv->key_first);
    fill(s.conv->key_second);
  }
}

inline adl::ModelConfig small_config(adl::HeadKind head, bool conv = false) {
  adl::ModelConfig c;
  c.dim = 3;
  c.key_dim = 2;
  c.hidden = 4;
  c.head = head;
  c.conv = conv;
  c.embedding_variance = 1.0;
  return c;
}

}  // namespace testing
