#pragma once

// Ranking metrics over a run and graded qrels.
//
// Queries judged in qrels but missing from the run contribute 0 to the mean.
// Queries that appear only in the run are skipped; `run_only_queries` lists
// them so callers can warn.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ssmrank/error.hpp"
#include "ssmrank/trec.hpp"

namespace ssmrank {

namespace detail {

inline void require_k(std::size_t k) {
  if (k < 1) throw InputError("metric cutoff k must be >= 1");
}

inline int grade_in(const std::map<std::string, int>& grades, const std::string& doc) {
  auto it = grades.find(doc);
  return it == grades.end() ? 0 : it->second;
}

template <typename PerQuery>
double mean_over_qrels(const RunSet& run, const Qrels& qrels, PerQuery per_query) {
  if (qrels.num_queries() == 0) return 0.0;
  double sum = 0.0;
  static const RankedList kEmpty;
  for (const auto& [qid, grades] : qrels.all()) {
    auto it = run.find(qid);
    sum += per_query(it == run.end() ? kEmpty : it->second, grades);
  }
  return sum / static_cast<double>(qrels.num_queries());
}

}  // namespace detail

inline double reciprocal_rank(const RankedList& list, const std::map<std::string, int>& grades, std::size_t k) {
  detail::require_k(k);
  const std::size_t n = std::min(k, list.size());
  for (std::size_t i = 0; i < n; ++i)
    if (detail::grade_in(grades, list.entries[i].doc_id) >= 1) return 1.0 / static_cast<double>(i + 1);
  return 0.0;
}

inline double ndcg(const RankedList& list, const std::map<std::string, int>& grades, std::size_t k) {
  detail::require_k(k);
  auto gain = [](int g) { return std::exp2(static_cast<double>(g)) - 1.0; };
  double dcg = 0.0;
  const std::size_t n = std::min(k, list.size());
  for (std::size_t i = 0; i < n; ++i)
    dcg += gain(detail::grade_in(grades, list.entries[i].doc_id)) / std::log2(static_cast<double>(i + 2));
  std::vector<int> ideal;
  for (const auto& [doc, g] : grades)
    if (g > 0) ideal.push_back(g);
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ideal.size()); ++i)
    idcg += gain(ideal[i]) / std::log2(static_cast<double>(i + 2));
  return idcg == 0.0 ? 0.0 : dcg / idcg;
}

/// Fraction of relevant (grade >= 1) docs found in the top k; 0 when none exist.
inline double recall(const RankedList& list, const std::map<std::string, int>& grades, std::size_t k) {
  detail::require_k(k);
  std::size_t total = 0;
  for (const auto& [doc, g] : grades)
    if (g >= 1) ++total;
  if (total == 0) return 0.0;
  std::size_t hit = 0;
  const std::size_t n = std::min(k, list.size());
  for (std::size_t i = 0; i < n; ++i)
    if (detail::grade_in(grades, list.entries[i].doc_id) >= 1) ++hit;
  return static_cast<double>(hit) / static_cast<double>(total);
}

inline double mrr_at_k(const RunSet& run, const Qrels& qrels, std::size_t k) {
  detail::require_k(k);
  return detail::mean_over_qrels(run, qrels, [k](const RankedList& l, const auto& g) { return reciprocal_rank(l, g, k); });
}

inline double ndcg_at_k(const RunSet& run, const Qrels& qrels, std::size_t k) {
  detail::require_k(k);
  return detail::mean_over_qrels(run, qrels, [k](const RankedList& l, const auto& g) { return ndcg(l, g, k); });
}

inline double recall_at_k(const RunSet& run, const Qrels& qrels, std::size_t k) {
  detail::require_k(k);
  return detail::mean_over_qrels(run, qrels, [k](const RankedList& l, const auto& g) { return recall(l, g, k); });
}

inline std::vector<std::string> run_only_queries(const RunSet& run, const Qrels& qrels) {
  std::vector<std::string> out;
  for (const auto& [qid, list] : run)
    if (!qrels.has_query(qid)) out.push_back(qid);
  return out;
}

/// Restricts qrels to the given queries.
inline Qrels subset(const Qrels& qrels, const std::vector<std::string>& query_ids) {
  Qrels out;
  for (const auto& q : query_ids)
    for (const auto& [d, g] : qrels.query(q)) out.add(q, d, g);
  return out;
}

}  // namespace ssmrank
