#include "adl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "adl/error.hpp"
#include "fileio.hpp"
#include "rng.hpp"

namespace adl {

using nlohmann::json;

void Dataset::validate() const {
  if (num_topics <= 0) throw InvalidArgument("dataset: num_topics must be positive");
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto& s = sentences[i];
    if (s.label < 0 || s.label >= num_topics) {
      throw InvalidArgument("dataset: sentence " + std::to_string(i) +
                            " has label " + std::to_string(s.label) +
                            " outside [0, " + std::to_string(num_topics) + ")");
    }
    for (WordId w : s.words) {
      if (w >= vocab_size) {
        throw InvalidArgument("dataset: sentence " + std::to_string(i) +
                              " has word id " + std::to_string(w) +
                              " >= vocab size " + std::to_string(vocab_size));
      }
    }
  }
  if (pad_id && *pad_id >= vocab_size) {
    throw InvalidArgument("dataset: pad id out of range");
  }
}

std::vector<std::vector<std::size_t>> Dataset::sentence_index() const {
  std::vector<std::vector<std::size_t>> index(vocab_size);
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    for (WordId w : sentences[i].words) {
      auto& list = index[w];
      if (list.empty() || list.back() != i) list.push_back(i);
    }
  }
  return index;
}

// ---------------------------------------------------------------------------
// TopicScheme

std::size_t TopicScheme::vocab_size() const {
  WordId max_id = 0;
  bool any = false;
  for (const auto& set : topic_word_sets) {
    for (WordId w : set) {
      max_id = std::max(max_id, w);
      any = true;
    }
  }
  for (WordId w : non_topic_dictionary) {
    max_id = std::max(max_id, w);
    any = true;
  }
  return any ? static_cast<std::size_t>(max_id) + 1 : 0;
}

std::vector<WordId> TopicScheme::topic_words() const {
  std::vector<WordId> out;
  for (const auto& set : topic_word_sets) out.insert(out.end(), set.begin(), set.end());
  return out;
}

int TopicScheme::topic_of(WordId word) const {
  for (int j = 0; j < num_topics(); ++j) {
    const auto& set = topic_word_sets[j];
    if (std::find(set.begin(), set.end(), word) != set.end()) return j;
  }
  return -1;
}

void TopicScheme::validate() const {
  if (topic_word_sets.empty()) throw InvalidArgument("topic scheme: no topics");
  if (words_per_sentence < 0) {
    throw InvalidArgument("topic scheme: words_per_sentence must be >= 0");
  }
  std::unordered_set<WordId> seen;
  for (int j = 0; j < num_topics(); ++j) {
    if (topic_word_sets[j].empty()) {
      throw InvalidArgument("topic scheme: topic " + std::to_string(j) +
                            " has no topic words");
    }
    for (WordId w : topic_word_sets[j]) {
      if (!seen.insert(w).second) {
        throw InvalidArgument("topic scheme: word " + std::to_string(w) +
                              " appears in more than one set");
      }
    }
  }
  for (WordId w : non_topic_dictionary) {
    if (!seen.insert(w).second) {
      throw InvalidArgument("topic scheme: dictionary word " + std::to_string(w) +
                            " overlaps a topic set or repeats");
    }
  }
  const auto dict = non_topic_dictionary.size();
  if (words_per_sentence > 0 && dict == 0) {
    throw InvalidArgument("topic scheme: empty non-topic dictionary");
  }
  if (!with_replacement && static_cast<std::size_t>(words_per_sentence) > dict) {
    throw InvalidArgument("topic scheme: m = " + std::to_string(words_per_sentence) +
                          " exceeds dictionary size " + std::to_string(dict) +
                          " (sampling without replacement)");
  }
}

TopicScheme TopicScheme::contiguous(int num_topics, int words_per_topic,
                                    int dictionary_size, int words_per_sentence) {
  if (num_topics <= 0 || words_per_topic <= 0 || dictionary_size < 0) {
    throw InvalidArgument("topic scheme: sizes must be positive");
  }
  TopicScheme scheme;
  WordId next = 0;
  scheme.topic_word_sets.resize(num_topics);
  for (auto& set : scheme.topic_word_sets) {
    for (int k = 0; k < words_per_topic; ++k) set.push_back(next++);
  }
  for (int k = 0; k < dictionary_size; ++k) scheme.non_topic_dictionary.push_back(next++);
  scheme.words_per_sentence = words_per_sentence;
  return scheme;
}

namespace {

template <typename Rng>
void sample_distinct(Rng& rng, std::size_t population, std::size_t count,
                     std::vector<std::size_t>& out) {
  out.clear();
  if (count * 4 <= population) {
    // Rejection sampling keeps the cost O(count) for |dict| >> m.
    while (out.size() < count) {
      std::size_t k = detail::uniform_index(rng, population);
      if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
    }
    return;
  }
  std::vector<std::size_t> pool(population);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t j = i + detail::uniform_index(rng, population - i);
    std::swap(pool[i], pool[j]);
    out.push_back(pool[i]);
  }
}

template <typename Rng>
Sentence synthetic_sentence(const TopicScheme& scheme, Rng& rng,
                            std::vector<std::size_t>& scratch) {
  Sentence s;
  s.label = static_cast<int>(detail::uniform_index(rng, scheme.num_topics()));
  const auto& topic_set = scheme.topic_word_sets[s.label];
  s.words.push_back(topic_set[detail::uniform_index(rng, topic_set.size())]);
  const auto m = static_cast<std::size_t>(scheme.words_per_sentence);
  const auto dict = scheme.non_topic_dictionary.size();
  if (scheme.with_replacement) {
    for (std::size_t k = 0; k < m; ++k) {
      s.words.push_back(scheme.non_topic_dictionary[detail::uniform_index(rng, dict)]);
    }
  } else {
    sample_distinct(rng, dict, m, scratch);
    for (std::size_t k : scratch) s.words.push_back(scheme.non_topic_dictionary[k]);
  }
  std::shuffle(s.words.begin(), s.words.end(), rng);
  return s;
}

}  // namespace

std::pair<Dataset, Dataset> generate_synthetic(const TopicScheme& scheme,
                                               std::size_t n_train,
                                               std::size_t n_test,
                                               std::uint64_t seed) {
  scheme.validate();
  if (n_train == 0 || n_test == 0) {
    throw InvalidArgument("generate_synthetic: n_train and n_test must be positive");
  }
  auto rng = detail::make_rng(seed, 0x5e57);
  std::vector<std::size_t> scratch;
  auto make = [&](std::size_t n) {
    Dataset d;
    d.vocab_size = scheme.vocab_size();
    d.num_topics = scheme.num_topics();
    d.sentences.reserve(n);
    for (std::size_t i = 0; i < n; ++i) d.sentences.push_back(synthetic_sentence(scheme, rng, scratch));
    return d;
  };
  Dataset train = make(n_train);
  Dataset test = make(n_test);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Markov word pairs

void MarkovPairScheme::validate() const {
  if (dictionary_size < 2) throw InvalidArgument("markov scheme: dictionary too small");
  if (sentence_length < 2) throw InvalidArgument("markov scheme: sentence_length must be >= 2");
  if (topic_a_pairs.empty() || topic_b_pairs.empty()) {
    throw InvalidArgument("markov scheme: both topic pair sets must be non-empty");
  }
  std::set<WordPair> seen;
  for (const auto* set : {&topic_a_pairs, &topic_b_pairs}) {
    for (const auto& [s, e] : *set) {
      if (s == e) throw InvalidArgument("markov scheme: pair repeats a word");
      if (s >= static_cast<WordId>(dictionary_size) ||
          e >= static_cast<WordId>(dictionary_size)) {
        throw InvalidArgument("markov scheme: pair word outside dictionary");
      }
      if (!seen.insert({s, e}).second) {
        throw InvalidArgument("markov scheme: pair (" + std::to_string(s) + ", " +
                              std::to_string(e) + ") listed twice or shared by topics");
      }
    }
  }
}

std::vector<double> MarkovPairScheme::transition_row(int topic, WordId from) const {
  std::vector<WordId> successors;
  for (const auto& [s, e] : pairs(topic)) {
    if (s == from) successors.push_back(e);
  }
  std::vector<double> row(dictionary_size, 0.0);
  if (successors.empty()) {
    std::fill(row.begin(), row.end(), 1.0 / dictionary_size);
  } else {
    for (WordId e : successors) row[e] += 1.0 / static_cast<double>(successors.size());
  }
  return row;
}

MarkovPairScheme MarkovPairScheme::random(int dictionary_size, int sentence_length,
                                          int pairs_per_topic, std::uint64_t seed) {
  if (dictionary_size < 2 || pairs_per_topic <= 0) {
    throw InvalidArgument("markov scheme: invalid sizes");
  }
  const auto total = static_cast<long long>(dictionary_size) * (dictionary_size - 1);
  if (2LL * pairs_per_topic > total) throw InvalidArgument("markov scheme: too many pairs");
  MarkovPairScheme scheme;
  scheme.dictionary_size = dictionary_size;
  scheme.sentence_length = sentence_length;
  auto rng = detail::make_rng(seed, 0x3a1c);
  std::set<WordPair> used;
  auto draw = [&]() {
    while (true) {
      auto s = static_cast<WordId>(detail::uniform_index(rng, dictionary_size));
      auto e = static_cast<WordId>(detail::uniform_index(rng, dictionary_size));
      if (s == e || used.count({s, e})) continue;
      used.insert({s, e});
      return WordPair{s, e};
    }
  };
  for (int k = 0; k < pairs_per_topic; ++k) scheme.topic_a_pairs.push_back(draw());
  for (int k = 0; k < pairs_per_topic; ++k) scheme.topic_b_pairs.push_back(draw());
  scheme.validate();
  return scheme;
}

std::pair<Dataset, Dataset> generate_markov_pairs(const MarkovPairScheme& scheme,
                                                  std::size_t n_train,
                                                  std::size_t n_test,
                                                  std::uint64_t seed) {
  scheme.validate();
  if (n_train == 0 || n_test == 0) {
    throw InvalidArgument("generate_markov_pairs: sizes must be positive");
  }
  // successors[topic][word]; empty means the uniform row.
  std::vector<std::vector<std::vector<WordId>>> successors(
      2, std::vector<std::vector<WordId>>(scheme.dictionary_size));
  for (int topic = 0; topic < 2; ++topic) {
    for (const auto& [s, e] : scheme.pairs(topic)) successors[topic][s].push_back(e);
  }
  auto rng = detail::make_rng(seed, 0x3a2c);
  auto make = [&](std::size_t n) {
    Dataset d;
    d.vocab_size = static_cast<std::size_t>(scheme.dictionary_size);
    d.num_topics = 2;
    d.sentences.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      Sentence s;
      s.label = static_cast<int>(detail::uniform_index(rng, 2));
      const auto& pairs = scheme.pairs(s.label);
      WordId current = pairs[detail::uniform_index(rng, pairs.size())].first;
      s.words.push_back(current);
      for (int step = 1; step < scheme.sentence_length; ++step) {
        const auto& next = successors[s.label][current];
        current = next.empty()
                      ? static_cast<WordId>(detail::uniform_index(rng, scheme.dictionary_size))
                      : next[detail::uniform_index(rng, next.size())];
        s.words.push_back(current);
      }
      d.sentences.push_back(std::move(s));
    }
    return d;
  };
  Dataset train = make(n_train);
  Dataset test = make(n_test);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Competition corpus

void CompetitionScheme::validate() const {
  if (filler_dictionary_size <= 0 || fillers_per_sentence < 0 ||
      fillers_per_sentence > filler_dictionary_size) {
    throw InvalidArgument("competition scheme: invalid filler sizes");
  }
  if (impure_positive < 0 || impure_negative < 0 || pure_alone < 0 ||
      pure_with_impure < 0 || background_per_class < 0) {
    throw InvalidArgument("competition scheme: counts must be non-negative");
  }
  if (pure_with_impure > impure_positive) {
    throw InvalidArgument("competition scheme: pure_with_impure exceeds impure_positive");
  }
  if (negative_anchor_words <= 0) {
    throw InvalidArgument("competition scheme: need at least one anchor word per class");
  }
}

std::size_t CompetitionScheme::vocab_size() const {
  return 2 + 2 * static_cast<std::size_t>(negative_anchor_words) +
         static_cast<std::size_t>(filler_dictionary_size);
}

std::pair<Dataset, Dataset> generate_competition(const CompetitionScheme& scheme,
                                                 std::uint64_t seed) {
  scheme.validate();
  const auto anchors = static_cast<WordId>(scheme.negative_anchor_words);
  const WordId positive_anchor0 = 2;
  const WordId negative_anchor0 = 2 + anchors;
  const WordId filler0 = 2 + 2 * anchors;

  auto make = [&](std::uint64_t stream) {
    auto rng = detail::make_rng(seed, stream);
    std::vector<std::size_t> scratch;
    Dataset d;
    d.vocab_size = scheme.vocab_size();
    d.num_topics = 2;
    auto sentence = [&](std::vector<WordId> core, int label) {
      sample_distinct(rng, scheme.filler_dictionary_size, scheme.fillers_per_sentence, scratch);
      for (std::size_t k : scratch) core.push_back(filler0 + static_cast<WordId>(k));
      std::shuffle(core.begin(), core.end(), rng);
      d.sentences.push_back({std::move(core), label});
    };
    auto anchor = [&](WordId first) {
      return first + static_cast<WordId>(detail::uniform_index(rng, anchors));
    };
    for (int i = 0; i < scheme.impure_positive; ++i) {
      if (i < scheme.pure_with_impure) {
        sentence({scheme.impure_word(), scheme.pure_word()}, 1);
      } else {
        sentence({scheme.impure_word()}, 1);
      }
    }
    for (int i = 0; i < scheme.impure_negative; ++i) {
      sentence({scheme.impure_word(), anchor(negative_anchor0)}, 0);
    }
    for (int i = 0; i < scheme.pure_alone; ++i) sentence({scheme.pure_word()}, 1);
    for (int i = 0; i < scheme.background_per_class; ++i) {
      sentence({anchor(positive_anchor0)}, 1);
      sentence({anchor(negative_anchor0)}, 0);
    }
    std::shuffle(d.sentences.begin(), d.sentences.end(), rng);
    return d;
  };
  return {make(0xc0de), make(0xc0df)};
}

// ---------------------------------------------------------------------------
// JSON lines

namespace {

struct RawRecord {
  std::vector<json> words;
  long long label = 0;
  std::size_t line = 0;
};

std::vector<RawRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<RawRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    auto fail = [&](const std::string& why) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + why);
    };
    if (!rec.is_object()) fail("record is not an object");
    if (!rec.contains("words") || !rec["words"].is_array()) fail("missing \"words\" array");
    if (!rec.contains("label") || !rec["label"].is_number_integer()) {
      fail("missing integer \"label\"");
    }
    RawRecord r;
    r.line = line_no;
    r.label = rec["label"].get<long long>();
    for (const auto& w : rec["words"]) {
      if (!w.is_string() && !w.is_number_unsigned() && !w.is_number_integer()) {
        fail("word entries must be strings or non-negative integers");
      }
      if (w.is_number_integer() && w.get<long long>() < 0) fail("negative word id");
      r.words.push_back(w);
    }
    records.push_back(std::move(r));
  }
  if (records.empty()) throw ParseError(path + ": empty corpus");
  return records;
}

struct VocabularyBuilder {
  std::unordered_map<std::string, WordId> ids;
  std::vector<std::string> tokens;
  bool strings = false;
  bool integers = false;
  std::size_t max_int = 0;

  WordId add(const json& w, const std::string& where) {
    if (w.is_string()) {
      if (integers) throw ParseError(where + ": mixes string and integer tokens");
      strings = true;
      const auto& tok = w.get_ref<const std::string&>();
      auto [it, inserted] = ids.emplace(tok, static_cast<WordId>(tokens.size()));
      if (inserted) tokens.push_back(tok);
      return it->second;
    }
    if (strings) throw ParseError(where + ": mixes string and integer tokens");
    integers = true;
    auto id = w.get<std::uint64_t>();
    if (id > 0xffffffffULL) throw ParseError(where + ": word id too large");
    max_int = std::max<std::size_t>(max_int, id);
    return static_cast<WordId>(id);
  }

  std::size_t size() const { return strings ? tokens.size() : max_int + 1; }
};

Dataset build_dataset(const std::vector<RawRecord>& records, const std::string& path,
                      VocabularyBuilder& vocab) {
  Dataset d;
  for (const auto& r : records) {
    Sentence s;
    const std::string where = path + ":" + std::to_string(r.line);
    if (r.label < 0) throw ParseError(where + ": negative label");
    s.label = static_cast<int>(r.label);
    for (const auto& w : r.words) s.words.push_back(vocab.add(w, where));
    d.sentences.push_back(std::move(s));
  }
  return d;
}

void finish(Dataset& d, const VocabularyBuilder& vocab, int num_classes,
            const IngestOptions& options, const std::string& path,
            const std::vector<RawRecord>& records) {
  d.vocab_size = vocab.size();
  d.num_topics = num_classes;
  if (vocab.strings) d.tokens = vocab.tokens;
  for (std::size_t i = 0; i < d.sentences.size(); ++i) {
    if (d.sentences[i].label >= num_classes) {
      throw ParseError(path + ":" + std::to_string(records[i].line) + ": label " +
                       std::to_string(d.sentences[i].label) + " outside declared range [0, " +
                       std::to_string(num_classes) + ")");
    }
  }
  if (options.pad_token) {
    auto it = vocab.ids.find(*options.pad_token);
    if (it != vocab.ids.end()) d.pad_id = it->second;
  }
}

int infer_classes(const std::vector<const std::vector<RawRecord>*>& sets,
                  const IngestOptions& options) {
  if (options.num_classes) {
    if (*options.num_classes <= 0) throw InvalidArgument("num_classes must be positive");
    return *options.num_classes;
  }
  long long max_label = 0;
  for (const auto* set : sets) {
    for (const auto& r : *set) max_label = std::max(max_label, r.label);
  }
  return static_cast<int>(max_label) + 1;
}

}  // namespace

Dataset ingest_jsonl(const std::string& path, const IngestOptions& options) {
  auto records = read_records(path);
  VocabularyBuilder vocab;
  Dataset d = build_dataset(records, path, vocab);
  finish(d, vocab, infer_classes({&records}, options), options, path, records);
  return d;
}

std::pair<Dataset, Dataset> ingest_jsonl_pair(const std::string& train_path,
                                              const std::string& test_path,
                                              const IngestOptions& options) {
  auto train_records = read_records(train_path);
  auto test_records = read_records(test_path);
  VocabularyBuilder vocab;
  Dataset train = build_dataset(train_records, train_path, vocab);
  Dataset test = build_dataset(test_records, test_path, vocab);
  const int classes = infer_classes({&train_records, &test_records}, options);
  finish(train, vocab, classes, options, train_path, train_records);
  finish(test, vocab, classes, options, test_path, test_records);
  return {std::move(train), std::move(test)};
}

void write_jsonl(const Dataset& dataset, const std::string& path) {
  std::ostringstream out;
  for (const auto& s : dataset.sentences) {
    json rec;
    json words = json::array();
    for (WordId w : s.words) {
      if (!dataset.tokens.empty()) {
        words.push_back(dataset.tokens.at(w));
      } else {
        words.push_back(w);
      }
    }
    rec["words"] = std::move(words);
    rec["label"] = s.label;
    out << rec.dump() << '\n';
  }
  detail::write_file_atomic(path, out.str());
}

void write_vocabulary(const Dataset& dataset, const std::string& path) {
  json map = json::object();
  if (!dataset.tokens.empty()) {
    for (std::size_t i = 0; i < dataset.tokens.size(); ++i) map[dataset.tokens[i]] = i;
  } else {
    for (std::size_t i = 0; i < dataset.vocab_size; ++i) map[std::to_string(i)] = i;
  }
  detail::write_file_atomic(path, map.dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Purity

namespace {

void finish_stats(WordStats& st) {
  if (st.occurrence_count == 0) return;
  const double n = static_cast<double>(st.occurrence_count);
  if (st.class_counts.size() == 2) {
    st.positive_fraction = st.class_counts[1] / n;
    st.negative_fraction = st.class_counts[0] / n;
    st.purity = std::abs(st.positive_fraction - st.negative_fraction);
    return;
  }
  // More than two classes: top fraction minus runner-up.
  std::vector<std::size_t> sorted = st.class_counts;
  std::sort(sorted.rbegin(), sorted.rend());
  const double top = sorted.empty() ? 0.0 : sorted[0] / n;
  const double second = sorted.size() > 1 ? sorted[1] / n : 0.0;
  st.purity = top - second;
}

}  // namespace

WordStats topic_purity(const Dataset& dataset, WordId word) {
  if (word >= dataset.vocab_size) throw InvalidArgument("topic_purity: word id out of range");
  WordStats st;
  st.word = word;
  st.class_counts.assign(dataset.num_topics, 0);
  for (const auto& s : dataset.sentences) {
    if (std::find(s.words.begin(), s.words.end(), word) != s.words.end()) {
      ++st.occurrence_count;
      ++st.class_counts.at(s.label);
    }
  }
  finish_stats(st);
  return st;
}

std::vector<WordStats> word_statistics(const Dataset& dataset) {
  std::vector<WordStats> stats(dataset.vocab_size);
  for (std::size_t w = 0; w < stats.size(); ++w) {
    stats[w].word = static_cast<WordId>(w);
    stats[w].class_counts.assign(dataset.num_topics, 0);
  }
  std::vector<std::size_t> last_seen(dataset.vocab_size, static_cast<std::size_t>(-1));
  for (std::size_t i = 0; i < dataset.sentences.size(); ++i) {
    const auto& s = dataset.sentences[i];
    for (WordId w : s.words) {
      if (last_seen[w] == i) continue;
      last_seen[w] = i;
      ++stats[w].occurrence_count;
      ++stats[w].class_counts.at(s.label);
    }
  }
  for (auto& st : stats) finish_stats(st);
  return stats;
}

}  // namespace adl
