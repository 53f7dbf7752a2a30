#pragma once

// Seeded synthetic retrieval collection for end-to-end checks.
//
// Each topic has one relevant document that mentions the topic word once
// together with the marker word "gold". Distractor documents mention two
// topic words two or three times each, so BM25 prefers them over the
// relevant document. A reranker has to learn the marker to recover it.

#include <algorithm>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ssmrank/data_io.hpp"
#include "ssmrank/error.hpp"
#include "ssmrank/rerank.hpp"
#include "ssmrank/trec.hpp"

namespace ssmrank {

struct SyntheticSpec {
  std::size_t topics = 40;
  std::size_t distractors = 216;
  std::size_t train_queries = 32;  // the remaining topics are held out
  std::size_t doc_words = 8;
  std::uint64_t seed = 7;
};

struct SyntheticCollection {
  Corpus corpus{"doc"};
  TextTable queries{"query"};
  Qrels qrels;
  std::vector<std::string> train_qids;
  std::vector<std::string> heldout_qids;
  std::vector<std::string> topic_words;
};

namespace detail {

inline std::string pseudo_word(std::mt19937_64& rng, std::size_t syllables) {
  static const char* kCons = "bdfgklmnprstvz";
  static const char* kVow = "aeiou";
  std::string w;
  for (std::size_t i = 0; i < syllables; ++i) {
    w.push_back(kCons[bounded_draw(rng, 14)]);
    w.push_back(kVow[bounded_draw(rng, 5)]);
  }
  return w;
}

}  // namespace detail

inline SyntheticCollection make_synthetic(const SyntheticSpec& spec) {
  if (spec.topics < 2 || spec.train_queries > spec.topics || spec.doc_words < 4)
    throw InputError("make_synthetic: need >= 2 topics, train_queries <= topics, doc_words >= 4");
  std::mt19937_64 rng(spec.seed);
  std::set<std::string> used{"gold"};
  auto fresh = [&](std::size_t syl) {
    for (;;) {
      std::string w = detail::pseudo_word(rng, syl);
      if (used.insert(w).second) return w;
    }
  };
  SyntheticCollection c;
  for (std::size_t t = 0; t < spec.topics; ++t) c.topic_words.push_back(fresh(3));
  std::vector<std::string> filler;
  for (int i = 0; i < 24; ++i) filler.push_back(fresh(2));

  auto pick_filler = [&] { return filler[detail::bounded_draw(rng, filler.size())]; };
  auto shuffle = [&](std::vector<std::string>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[detail::bounded_draw(rng, i)]);
  };
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& w : v) s += (s.empty() ? "" : " ") + w;
    return s;
  };
  auto id = [](const char* p, std::size_t i) {
    std::string n = std::to_string(i);
    return std::string(p) + std::string(n.size() < 3 ? 3 - n.size() : 0, '0') + n;
  };

  for (std::size_t t = 0; t < spec.topics; ++t) {
    std::vector<std::string> words{c.topic_words[t], "gold"};
    while (words.size() < spec.doc_words) words.push_back(pick_filler());
    shuffle(words);
    c.corpus.add(id("rel", t), join(words));
    const std::string qid = id("q", t);
    c.queries.add(qid, c.topic_words[t] + " information");
    c.qrels.add(qid, id("rel", t), 1);
    (t < spec.train_queries ? c.train_qids : c.heldout_qids).push_back(qid);
  }
  for (std::size_t i = 0; i < spec.distractors; ++i) {
    const std::size_t a = i % spec.topics;
    std::size_t b = (i * 7 + 13) % spec.topics;
    if (b == a) b = (b + 1) % spec.topics;
    std::vector<std::string> words;
    for (std::size_t k = 0; k < 2 + detail::bounded_draw(rng, 2); ++k) words.push_back(c.topic_words[a]);
    for (std::size_t k = 0; k < 2 + detail::bounded_draw(rng, 2); ++k) words.push_back(c.topic_words[b]);
    while (words.size() < spec.doc_words) words.push_back(pick_filler());
    shuffle(words);
    c.corpus.add(id("dis", i), join(words));
  }
  return c;
}

}  // namespace ssmrank
