#pragma once

// BM25 first-stage retrieval over an in-memory inverted index.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ssmrank/data_io.hpp"
#include "ssmrank/error.hpp"
#include "ssmrank/trec.hpp"

namespace ssmrank {

/// Lowercased ASCII alphanumeric runs; every other byte separates terms.
inline std::vector<std::string> analyze(std::string_view text) {
  std::vector<std::string> terms;
  std::string cur;
  for (unsigned char c : text) {
    if (c < 128 && std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      terms.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) terms.push_back(std::move(cur));
  return terms;
}

struct Bm25Params {
  double k1 = 0.9;
  double b = 0.4;
};

struct Posting {
  std::uint32_t doc = 0;  // index into doc_ids(), which is sorted by id
  std::uint32_t tf = 0;

  bool operator==(const Posting&) const = default;
};

class InvertedIndex {
 public:
  static constexpr int kVersion = 1;

  static InvertedIndex build(const Corpus& corpus, Bm25Params params = {}) {
    if (corpus.empty()) throw InputError("build_index: empty corpus");
    InvertedIndex idx;
    idx.params_ = params;
    std::vector<const Corpus::Item*> docs;
    for (const auto& it : corpus.items()) docs.push_back(&it);
    std::sort(docs.begin(), docs.end(), [](auto* a, auto* b) { return a->id < b->id; });
    for (std::size_t i = 0; i < docs.size(); ++i) {
      if (i > 0 && docs[i]->id == docs[i - 1]->id) throw InputError("build_index: duplicate doc id " + docs[i]->id);
      const auto terms = analyze(docs[i]->text);
      std::map<std::string, std::uint32_t> tf;
      for (const auto& t : terms) ++tf[t];
      for (const auto& [t, n] : tf) idx.postings_[t].push_back({static_cast<std::uint32_t>(i), n});
      idx.doc_ids_.push_back(docs[i]->id);
      idx.doc_len_.push_back(static_cast<std::uint32_t>(terms.size()));
    }
    idx.finalize();
    return idx;
  }

  std::size_t doc_count() const noexcept { return doc_ids_.size(); }
  double avg_doc_length() const noexcept { return avg_len_; }
  const Bm25Params& params() const noexcept { return params_; }
  const std::vector<std::string>& doc_ids() const noexcept { return doc_ids_; }

  std::size_t doc_length(const std::string& doc_id) const { return doc_len_[doc_index(doc_id)]; }

  std::size_t df(const std::string& term) const {
    auto it = postings_.find(term);
    return it == postings_.end() ? 0 : it->second.size();
  }

  std::size_t tf(const std::string& term, const std::string& doc_id) const {
    const std::uint32_t d = static_cast<std::uint32_t>(doc_index(doc_id));
    auto it = postings_.find(term);
    if (it == postings_.end()) return 0;
    auto p = std::lower_bound(it->second.begin(), it->second.end(), d,
                              [](const Posting& x, std::uint32_t v) { return x.doc < v; });
    return (p != it->second.end() && p->doc == d) ? p->tf : 0;
  }

  const std::vector<Posting>& postings(const std::string& term) const {
    static const std::vector<Posting> kNone;
    auto it = postings_.find(term);
    return it == postings_.end() ? kNone : it->second;
  }

  const std::map<std::string, std::vector<Posting>>& all_postings() const noexcept { return postings_; }

  double idf(const std::string& term) const {
    const double n = static_cast<double>(doc_count()), d = static_cast<double>(df(term));
    return std::log(1.0 + (n - d + 0.5) / (d + 0.5));
  }

  /// Top-k documents with a nonzero score; ties by ascending doc id.
  RankedList search(const std::string& query_id, std::string_view query, std::size_t k) const {
    if (k < 1) throw InputError("bm25_search: k must be >= 1");
    std::vector<double> score(doc_count(), 0.0);
    std::vector<char> hit(doc_count(), 0);
    auto terms = analyze(query);
    std::sort(terms.begin(), terms.end());
    terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
    for (const auto& t : terms) {
      auto it = postings_.find(t);
      if (it == postings_.end()) continue;
      const double w = idf(t);
      for (const auto& p : it->second) {
        const double tf = p.tf;
        const double norm = params_.k1 * (1.0 - params_.b + params_.b * doc_len_[p.doc] / avg_len_);
        score[p.doc] += w * tf * (params_.k1 + 1.0) / (tf + norm);
        hit[p.doc] = 1;
      }
    }
    std::vector<std::uint32_t> cand;
    for (std::uint32_t d = 0; d < doc_count(); ++d)
      if (hit[d]) cand.push_back(d);
    const std::size_t n = std::min(k, cand.size());
    // doc indices follow doc id order, so index order is the tie-break
    auto better = [&](std::uint32_t a, std::uint32_t b) { return score[a] != score[b] ? score[a] > score[b] : a < b; };
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(n), cand.end(), better);
    RankedList out;
    out.query_id = query_id;
    for (std::size_t i = 0; i < n; ++i) out.entries.push_back({doc_ids_[cand[i]], score[cand[i]], i + 1});
    return out;
  }

  void save(std::ostream& out) const {
    out << "ssmrank-index " << kVersion << '\n';
    out << std::hexfloat << "bm25 " << params_.k1 << ' ' << params_.b << std::defaultfloat << '\n';
    out << "docs " << doc_count() << '\n';
    for (std::size_t i = 0; i < doc_count(); ++i) out << doc_ids_[i] << ' ' << doc_len_[i] << '\n';
    out << "terms " << postings_.size() << '\n';
    for (const auto& [t, ps] : postings_) {
      out << t << ' ' << ps.size();
      for (const auto& p : ps) out << ' ' << p.doc << ':' << p.tf;
      out << '\n';
    }
    out << "end\n";
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw InputError("index: cannot write " + path);
    save(out);
  }

  static InvertedIndex load(std::istream& in) {
    InvertedIndex idx;
    std::string line, tag;
    std::size_t lineno = 0;
    auto next = [&](const char* what) -> std::istringstream {
      if (!std::getline(in, line)) throw ParseError(std::string("index: truncated before ") + what, lineno + 1);
      ++lineno;
      return std::istringstream(line);
    };
    next("header");
    if (line != "ssmrank-index " + std::to_string(kVersion))
      throw ParseError("index: missing or unsupported header", lineno);
    {
      auto s = next("bm25");
      std::string k1, b;
      if (!(s >> tag >> k1 >> b) || tag != "bm25") throw ParseError("index: expected bm25 line", lineno);
      idx.params_.k1 = std::strtod(k1.c_str(), nullptr);
      idx.params_.b = std::strtod(b.c_str(), nullptr);
    }
    std::size_t n = 0;
    if (auto s = next("docs"); !(s >> tag >> n) || tag != "docs") throw ParseError("index: expected docs line", lineno);
    for (std::size_t i = 0; i < n; ++i) {
      auto s = next("doc");
      std::string id;
      std::uint32_t len = 0;
      if (!(s >> id >> len)) throw ParseError("index: bad doc line", lineno);
      if (i > 0 && !(idx.doc_ids_.back() < id)) throw ParseError("index: doc ids not strictly sorted", lineno);
      idx.doc_ids_.push_back(id);
      idx.doc_len_.push_back(len);
    }
    std::size_t nt = 0;
    if (auto s = next("terms"); !(s >> tag >> nt) || tag != "terms")
      throw ParseError("index: expected terms line", lineno);
    for (std::size_t i = 0; i < nt; ++i) {
      auto s = next("term");
      std::string term;
      std::size_t np = 0;
      if (!(s >> term >> np)) throw ParseError("index: bad term line", lineno);
      auto& ps = idx.postings_[term];
      for (std::size_t j = 0; j < np; ++j) {
        std::string pair;
        if (!(s >> pair)) throw ParseError("index: missing posting", lineno);
        const auto colon = pair.find(':');
        Posting p;
        if (colon == std::string::npos || !detail::parse_int(pair.substr(0, colon), p.doc) ||
            !detail::parse_int(pair.substr(colon + 1), p.tf) || p.doc >= n || (!ps.empty() && ps.back().doc >= p.doc))
          throw ParseError("index: bad posting '" + pair + "'", lineno);
        ps.push_back(p);
      }
    }
    if (next("end"); line != "end") throw ParseError("index: expected end", lineno);
    idx.finalize();
    return idx;
  }

  static InvertedIndex load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("index: cannot open " + path);
    return load(in);
  }

 private:
  std::size_t doc_index(const std::string& doc_id) const {
    auto it = std::lower_bound(doc_ids_.begin(), doc_ids_.end(), doc_id);
    if (it == doc_ids_.end() || *it != doc_id) throw InputError("index: unknown doc id " + doc_id);
    return static_cast<std::size_t>(it - doc_ids_.begin());
  }

  void finalize() {
    double total = 0.0;
    for (auto l : doc_len_) total += l;
    avg_len_ = doc_ids_.empty() ? 0.0 : total / static_cast<double>(doc_ids_.size());
    // An all-empty corpus has no postings, so the zero average is never divided by.
  }

  Bm25Params params_;
  std::vector<std::string> doc_ids_;
  std::vector<std::uint32_t> doc_len_;
  double avg_len_ = 0.0;
  std::map<std::string, std::vector<Posting>> postings_;
};

inline InvertedIndex build_index(const Corpus& corpus, Bm25Params params = {}) {
  return InvertedIndex::build(corpus, params);
}

/// BM25 top-k for every query.
inline RunSet bm25_run(const InvertedIndex& index, const TextTable& queries, std::size_t k) {
  RunSet run;
  for (const auto& q : queries.items()) run[q.id] = index.search(q.id, q.text, k);
  return run;
}

}  // namespace ssmrank
