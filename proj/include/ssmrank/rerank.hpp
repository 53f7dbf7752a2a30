#pragma once

// Cross-encoder inputs, hard-negative sampling, the contrastive softmax loss
// and score-based reranking of a candidate list.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssmrank/data_io.hpp"
#include "ssmrank/error.hpp"
#include "ssmrank/model.hpp"
#include "ssmrank/tokenizer.hpp"
#include "ssmrank/trec.hpp"

namespace ssmrank {

/// Collapses whitespace runs to one space and trims both ends.
inline std::string normalize_whitespace(std::string_view s) {
  std::string out;
  bool pending = false;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      pending = !out.empty();
    } else {
      if (pending) out.push_back(' ');
      pending = false;
      out.push_back(c);
    }
  }
  return out;
}

struct TruncationPolicy {
  std::size_t limit = 512;

  static TruncationPolicy first_p() { return {512}; }
  static TruncationPolicy long_p() { return {1536}; }
  static TruncationPolicy custom(std::size_t n) {
    if (n < 8) throw ParameterError("truncation limit must be >= 8, got " + std::to_string(n));
    return {n};
  }

  /// "firstp", "longp" or a token count.
  static TruncationPolicy parse(const std::string& s) {
    if (s == "firstp" || s == "FirstP") return first_p();
    if (s == "longp" || s == "LongP") return long_p();
    std::size_t v = 0;
    if (!detail::parse_int(s, v) || s.empty() || s[0] == '-')
      throw InputError("truncation: expected firstp, longp or a number, got '" + s + "'");
    return custom(v);
  }
};

/// "document: {d} ; query: {q} ; " as bytes, cut to limit-1 ids, then EOS.
/// Document bytes go first, then query bytes; the template text itself is only
/// cut when both are already empty.
inline std::vector<int> format_input(std::string_view query, std::string_view doc, const TruncationPolicy& policy) {
  if (policy.limit < 8) throw ParameterError("truncation limit must be >= 8");
  std::string q = normalize_whitespace(query), d = normalize_whitespace(doc);
  if (q.empty()) throw InputError("format_input: empty query");
  if (d.empty()) throw InputError("format_input: empty document");
  static constexpr std::string_view kDoc = "document: ", kQuery = " ; query: ", kEnd = " ; ";
  const std::size_t budget = policy.limit - 1;
  const std::size_t fixed = kDoc.size() + kQuery.size() + kEnd.size();
  std::size_t over = fixed + q.size() + d.size() > budget ? fixed + q.size() + d.size() - budget : 0;
  const std::size_t cut_d = std::min(over, d.size());
  d.resize(d.size() - cut_d);
  over -= cut_d;
  q.resize(q.size() - std::min(over, q.size()));
  std::string text;
  text.append(kDoc).append(d).append(kQuery).append(q).append(kEnd);
  if (text.size() > budget) text.resize(budget);
  std::vector<int> ids = ByteTokenizer::encode(text);
  ids.push_back(ByteTokenizer::kEos);
  return ids;
}

namespace detail {

/// Uniform integer in [0, n) by rejection; identical on every platform.
inline std::uint64_t bounded_draw(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

}  // namespace detail

/// Uniform sample without replacement of m candidates not judged relevant.
inline std::vector<std::string> sample_negatives(const RankedList& ranklist, const Qrels& qrels, std::size_t m,
                                                 std::uint64_t seed) {
  if (m < 1) throw InputError("sample_negatives: m must be >= 1");
  std::vector<std::string> pool;
  for (const auto& e : ranklist.entries)
    if (qrels.grade(ranklist.query_id, e.doc_id) < 1) pool.push_back(e.doc_id);
  if (pool.size() < m)
    throw InputError("sample_negatives: query " + ranklist.query_id + " has " + std::to_string(pool.size()) +
                     " eligible negatives, " + std::to_string(m) + " requested");
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + detail::bounded_draw(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(m);
  return pool;
}

/// One manifest line per (query, relevant doc) pair in the run's queries.
/// Each line draws its negatives with its own seed derived from `seed`.
inline std::vector<ManifestEntry> build_manifest(const RunSet& run, const Qrels& qrels, std::size_t m,
                                                 std::uint64_t seed) {
  std::vector<ManifestEntry> out;
  for (const auto& [qid, list] : run) {
    for (const auto& [doc, g] : qrels.query(qid)) {
      if (g < 1) continue;
      const std::uint64_t s = seed + 0x9E3779B97F4A7C15ULL * (out.size() + 1);
      out.push_back({qid, doc, sample_negatives(list, qrels, m, s)});
    }
  }
  return out;
}

/// -log(exp(s+) / (exp(s+) + sum exp(s-))) via a max shift.
inline double softmax_loss(double score_pos, std::span<const double> score_negs) {
  if (score_negs.empty()) throw InputError("softmax_loss: at least one negative is required");
  double mx = score_pos;
  if (!std::isfinite(score_pos)) throw NumericError("softmax_loss: non-finite positive score");
  for (double s : score_negs) {
    if (!std::isfinite(s)) throw NumericError("softmax_loss: non-finite negative score");
    mx = std::max(mx, s);
  }
  double z = std::exp(score_pos - mx);
  for (double s : score_negs) z += std::exp(s - mx);
  return mx + std::log(z) - score_pos;
}

inline double softmax_loss(double score_pos, std::initializer_list<double> negs) {
  return softmax_loss(score_pos, std::span<const double>(negs.begin(), negs.size()));
}

struct ScoredInstance {
  double pos;
  std::vector<double> negs;
};

/// Mean of softmax_loss over the instances.
inline double batch_softmax_loss(std::span<const ScoredInstance> batch) {
  if (batch.empty()) throw InputError("batch_softmax_loss: empty batch");
  double sum = 0.0;
  for (const auto& b : batch) sum += softmax_loss(b.pos, b.negs);
  return sum / static_cast<double>(batch.size());
}

struct TrainingInstance {
  std::string query_id;
  std::string query;
  std::string pos_id;
  std::string positive;
  std::vector<std::string> neg_ids;
  std::vector<std::string> negatives;
};

inline std::vector<TrainingInstance> resolve_manifest(const std::vector<ManifestEntry>& manifest,
                                                      const TextTable& queries, const Corpus& corpus) {
  std::vector<TrainingInstance> out;
  for (const auto& e : manifest) {
    if (e.neg_ids.empty()) throw InputError("training instance for " + e.query_id + " has no negatives");
    TrainingInstance t{e.query_id, queries.text(e.query_id), e.pos_id, corpus.text(e.pos_id), e.neg_ids, {}};
    for (const auto& n : e.neg_ids) {
      if (n == e.pos_id) throw InputError("training instance for " + e.query_id + " lists the positive as a negative");
      t.negatives.push_back(corpus.text(n));
    }
    out.push_back(std::move(t));
  }
  return out;
}

using PairScorer = std::function<double(const std::string& query, const std::string& doc)>;

/// Rescores the top `threshold` candidates (clamped to the list size), sorts
/// them by score with ascending doc id on ties, and appends the rest in their
/// original order with scores stepping down from the lowest rescored score.
inline RankedList rerank(const PairScorer& scorer, const std::string& query, const RankedList& candidates,
                         const Corpus& corpus, std::size_t threshold) {
  RankedList out;
  out.query_id = candidates.query_id;
  const std::size_t n = std::min(threshold, candidates.size());
  if (n == 0) return candidates;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = candidates.entries[i];
    const double s = scorer(query, corpus.text(e.doc_id));
    if (!std::isfinite(s)) throw NumericError("rerank: non-finite score for doc " + e.doc_id);
    out.entries.push_back({e.doc_id, s, 0});
  }
  out.sort_by_score();
  const double floor = out.entries.back().score;
  for (std::size_t i = n; i < candidates.size(); ++i)
    out.entries.push_back({candidates.entries[i].doc_id, floor - static_cast<double>(i - n + 1), 0});
  out.renumber();
  return out;
}

/// Scores (query, doc) pairs with a model through the input template.
template <typename T>
PairScorer model_scorer(const ModelParams<T>& params, const ModelConfig& config, TruncationPolicy policy,
                        TimerRegistry* profiler = nullptr) {
  return [&params, config, policy, profiler](const std::string& q, const std::string& d) {
    return static_cast<double>(score<T>(format_input(q, d, policy), params, config, profiler));
  };
}

/// Reranks every query of a run.
inline RunSet rerank_run(const PairScorer& scorer, const RunSet& run, const TextTable& queries, const Corpus& corpus,
                         std::size_t threshold) {
  RunSet out;
  for (const auto& [qid, list] : run) out[qid] = rerank(scorer, queries.text(qid), list, corpus, threshold);
  return out;
}

}  // namespace ssmrank
