#pragma once

// Ranked lists, relevance judgments and their TREC text formats.
//
//   run:   query_id Q0 doc_id rank score run_tag     (score with 6 decimals)
//   qrels: query_id 0 doc_id relevance

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "ssmrank/error.hpp"

namespace ssmrank {

struct RankedEntry {
  std::string doc_id;
  double score = 0.0;
  std::size_t rank = 0;  // 1-based

  bool operator==(const RankedEntry&) const = default;
};

struct RankedList {
  std::string query_id;
  std::vector<RankedEntry> entries;

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }

  /// Assigns ranks 1..n in current order.
  void renumber() {
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i].rank = i + 1;
  }

  /// Sorts by descending score, ties by ascending doc_id, then renumbers.
  void sort_by_score() {
    std::stable_sort(entries.begin(), entries.end(), [](const RankedEntry& a, const RankedEntry& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.doc_id < b.doc_id;
    });
    renumber();
  }

  /// Scores non-increasing, ranks contiguous from 1, doc ids unique.
  void validate() const {
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      if (e.rank != i + 1) throw InputError("run " + query_id + ": ranks are not contiguous from 1");
      if (i > 0 && entries[i - 1].score < e.score)
        throw InputError("run " + query_id + ": scores increase at rank " + std::to_string(e.rank));
      if (!seen.insert(e.doc_id).second) throw InputError("run " + query_id + ": duplicate doc " + e.doc_id);
    }
  }

  bool operator==(const RankedList&) const = default;
};

/// Runs keyed by query id.
using RunSet = std::map<std::string, RankedList>;

class Qrels {
 public:
  void add(const std::string& query_id, const std::string& doc_id, int grade) {
    if (grade < 0)
      throw InputError("qrels: negative relevance " + std::to_string(grade) + " for " + query_id + "/" + doc_id);
    if (!judgments_[query_id].emplace(doc_id, grade).second)
      throw InputError("qrels: duplicate judgment for " + query_id + "/" + doc_id);
  }

  /// Grade of (query, doc); unjudged pairs are 0.
  int grade(const std::string& query_id, const std::string& doc_id) const {
    auto q = judgments_.find(query_id);
    if (q == judgments_.end()) return 0;
    auto d = q->second.find(doc_id);
    return d == q->second.end() ? 0 : d->second;
  }

  bool has_query(const std::string& query_id) const { return judgments_.count(query_id) > 0; }

  const std::map<std::string, int>& query(const std::string& query_id) const {
    static const std::map<std::string, int> kEmpty;
    auto q = judgments_.find(query_id);
    return q == judgments_.end() ? kEmpty : q->second;
  }

  const std::map<std::string, std::map<std::string, int>>& all() const noexcept { return judgments_; }
  std::size_t num_queries() const noexcept { return judgments_.size(); }

 private:
  std::map<std::string, std::map<std::string, int>> judgments_;
};

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

inline bool blank(const std::string& line) { return line.find_first_not_of(" \t\r") == std::string::npos; }

template <typename Int>
bool parse_int(const std::string& s, Int& out) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) return false;
    out = static_cast<Int>(v);
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace detail

inline std::string format_score(double s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", s);
  return buf;
}

inline void write_run(std::ostream& out, const RunSet& run, const std::string& tag = "ssmrank") {
  for (const auto& [qid, list] : run)
    for (const auto& e : list.entries)
      out << qid << " Q0 " << e.doc_id << ' ' << e.rank << ' ' << format_score(e.score) << ' ' << tag << '\n';
}

inline void write_run(const std::string& path, const RunSet& run, const std::string& tag = "ssmrank") {
  std::ofstream out(path);
  if (!out) throw InputError("run: cannot write " + path);
  write_run(out, run, tag);
}

/// Entries keep file order within each query.
inline RunSet read_run(std::istream& in) {
  RunSet run;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::blank(line)) continue;
    const auto f = detail::split_ws(line);
    if (f.size() != 6) throw ParseError("run: expected 6 fields, got " + std::to_string(f.size()), lineno);
    RankedEntry e;
    e.doc_id = f[2];
    long long rank = 0;
    if (!detail::parse_int(f[3], rank) || rank < 1) throw ParseError("run: bad rank '" + f[3] + "'", lineno);
    e.rank = static_cast<std::size_t>(rank);
    try {
      std::size_t pos = 0;
      e.score = std::stod(f[4], &pos);
      if (pos != f[4].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError("run: bad score '" + f[4] + "'", lineno);
    }
    auto& list = run[f[0]];
    list.query_id = f[0];
    list.entries.push_back(std::move(e));
  }
  return run;
}

inline RunSet read_run(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("run: cannot open " + path);
  return read_run(in);
}

inline Qrels read_qrels(std::istream& in) {
  Qrels q;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::blank(line)) continue;
    const auto f = detail::split_ws(line);
    if (f.size() != 4) throw ParseError("qrels: expected 4 fields, got " + std::to_string(f.size()), lineno);
    int grade = 0;
    if (!detail::parse_int(f[3], grade)) throw ParseError("qrels: bad relevance '" + f[3] + "'", lineno);
    try {
      q.add(f[0], f[2], grade);
    } catch (const InputError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return q;
}

inline Qrels read_qrels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("qrels: cannot open " + path);
  return read_qrels(in);
}

inline void write_qrels(std::ostream& out, const Qrels& q) {
  for (const auto& [qid, docs] : q.all())
    for (const auto& [did, g] : docs) out << qid << " 0 " << did << ' ' << g << '\n';
}

}  // namespace ssmrank
