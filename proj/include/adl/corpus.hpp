#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace adl {

using WordId = std::uint32_t;

struct Sentence {
  std::vector<WordId> words;
  int label = 0;

  bool operator==(const Sentence&) const = default;
};

// Labeled sentences over a vocabulary of `vocab_size` word ids.
struct Dataset {
  std::vector<Sentence> sentences;
  std::size_t vocab_size = 0;
  int num_topics = 0;
  std::optional<WordId> pad_id;
  // Token strings indexed by word id; empty when the corpus was id-based.
  std::vector<std::string> tokens;

  std::size_t size() const { return sentences.size(); }
  bool empty() const { return sentences.empty(); }

  // Throws InvalidArgument if any word id or label is out of range.
  void validate() const;

  // For each word id, the indices of sentences that contain it (each sentence
  // listed once even if the word repeats).
  std::vector<std::vector<std::size_t>> sentence_index() const;
};

// Topic words are grouped into `num_topics()` disjoint sets; every synthetic
// sentence holds exactly one of them plus `words_per_sentence` distractors
// drawn from `non_topic_dictionary`.
struct TopicScheme {
  std::vector<std::vector<WordId>> topic_word_sets;
  std::vector<WordId> non_topic_dictionary;
  int words_per_sentence = 0;
  bool with_replacement = false;

  int num_topics() const { return static_cast<int>(topic_word_sets.size()); }
  std::size_t vocab_size() const;
  std::vector<WordId> topic_words() const;
  // Topic index of `word`, or -1 for non-topic words.
  int topic_of(WordId word) const;

  void validate() const;

  // Topic j owns ids [j*k, (j+1)*k); the dictionary follows at J*k.
  static TopicScheme contiguous(int num_topics, int words_per_topic,
                                int dictionary_size, int words_per_sentence);
};

using WordPair = std::pair<WordId, WordId>;

// Two Markov chains over a shared dictionary, one per topic. Each chain starts
// from the uniform kernel and then forces the designated successors of the
// leading words of its topic pairs.
struct MarkovPairScheme {
  int dictionary_size = 0;
  int sentence_length = 0;
  std::vector<WordPair> topic_a_pairs;
  std::vector<WordPair> topic_b_pairs;

  void validate() const;

  const std::vector<WordPair>& pairs(int topic) const {
    return topic == 0 ? topic_a_pairs : topic_b_pairs;
  }

  // Row `from` of the transition kernel of chain `topic`.
  std::vector<double> transition_row(int topic, WordId from) const;

  // Samples `pairs_per_topic` distinct pairs per topic (s != e, no pair shared
  // between topics).
  static MarkovPairScheme random(int dictionary_size, int sentence_length,
                                 int pairs_per_topic, std::uint64_t seed);
};

std::pair<Dataset, Dataset> generate_synthetic(const TopicScheme& scheme,
                                               std::size_t n_train,
                                               std::size_t n_test,
                                               std::uint64_t seed);

std::pair<Dataset, Dataset> generate_markov_pairs(
    const MarkovPairScheme& scheme, std::size_t n_train, std::size_t n_test,
    std::uint64_t seed);

// A binary corpus in which a frequent but impure candidate word competes with
// a rare pure one. Distractors come from a small shared dictionary so they
// occur often with mixed labels.
struct CompetitionScheme {
  int filler_dictionary_size = 40;
  int fillers_per_sentence = 8;
  int impure_positive = 103;    // sentences with the impure word, label 1
  int impure_negative = 25;     // sentences with the impure word, label 0
  int pure_with_impure = 24;    // of the pure word's sentences, co-occurring
  int pure_alone = 12;          // pure word without the impure word
  int negative_anchor_words = 4;
  int background_per_class = 60;  // sentences carrying only anchors

  void validate() const;

  WordId impure_word() const { return 0; }
  WordId pure_word() const { return 1; }
  // Positive anchors are 2..2+a-1, negative anchors follow, then fillers.
  std::size_t vocab_size() const;
};

// Returns (train, test). The test split repeats the construction with a
// different stream.
std::pair<Dataset, Dataset> generate_competition(const CompetitionScheme& scheme,
                                                 std::uint64_t seed);

struct IngestOptions {
  std::optional<int> num_classes;
  std::optional<std::string> pad_token;
};

// Reads {"words": [...], "label": k} records. Token strings get ids in
// first-seen order; integer tokens are taken as ids.
Dataset ingest_jsonl(const std::string& path, const IngestOptions& options = {});

// Ingests two files against one shared vocabulary (train first).
std::pair<Dataset, Dataset> ingest_jsonl_pair(const std::string& train_path,
                                              const std::string& test_path,
                                              const IngestOptions& options = {});

void write_jsonl(const Dataset& dataset, const std::string& path);
void write_vocabulary(const Dataset& dataset, const std::string& path);

struct WordStats {
  WordId word = 0;
  std::size_t occurrence_count = 0;
  std::vector<std::size_t> class_counts;
  // Binary case: fractions of positive (label 1) and negative (label 0)
  // sentences among those containing the word.
  double positive_fraction = 0.0;
  double negative_fraction = 0.0;
  // Empty when the word never occurs.
  std::optional<double> purity;
};

WordStats topic_purity(const Dataset& dataset, WordId word);
// Stats for every word id in one pass.
std::vector<WordStats> word_statistics(const Dataset& dataset);

}  // namespace adl
