#pragma once

// Tab-separated text collections:
//   corpus   doc_id<TAB>text
//   queries  query_id<TAB>text
//   manifest query_id<TAB>pos_doc_id<TAB>neg_1,neg_2,...

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssmrank/error.hpp"

namespace ssmrank {

/// Ordered id -> text table with unique ids.
class TextTable {
 public:
  explicit TextTable(std::string kind = "doc") : kind_(std::move(kind)) {}

  void add(std::string id, std::string text) {
    if (id.empty() || id.find_first_of(" \t\r\n") != std::string::npos)
      throw InputError(kind_ + " id '" + id + "' is empty or contains whitespace");
    if (!index_.emplace(id, items_.size()).second) throw InputError("duplicate " + kind_ + " id " + id);
    items_.push_back({std::move(id), std::move(text)});
  }

  bool contains(const std::string& id) const { return index_.count(id) > 0; }

  const std::string& text(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw InputError("missing " + kind_ + " text for id " + id);
    return items_[it->second].text;
  }

  struct Item {
    std::string id;
    std::string text;
  };
  const std::vector<Item>& items() const noexcept { return items_; }
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }

 private:
  std::string kind_;
  std::vector<Item> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

using Corpus = TextTable;

inline TextTable read_tsv_table(std::istream& in, const std::string& kind) {
  TextTable t(kind);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(kind + " file: expected id<TAB>text", lineno);
    try {
      t.add(line.substr(0, tab), line.substr(tab + 1));
    } catch (const ParseError&) {
      throw;
    } catch (const InputError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return t;
}

inline TextTable read_tsv_table(const std::string& path, const std::string& kind) {
  std::ifstream in(path);
  if (!in) throw InputError(kind + " file: cannot open " + path);
  return read_tsv_table(in, kind);
}

inline Corpus read_corpus(const std::string& path) { return read_tsv_table(path, "doc"); }
inline TextTable read_queries(const std::string& path) { return read_tsv_table(path, "query"); }

inline void write_tsv_table(std::ostream& out, const TextTable& t) {
  for (const auto& it : t.items()) out << it.id << '\t' << it.text << '\n';
}

struct ManifestEntry {
  std::string query_id;
  std::string pos_id;
  std::vector<std::string> neg_ids;

  bool operator==(const ManifestEntry&) const = default;
};

inline std::vector<ManifestEntry> read_manifest(std::istream& in) {
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, '\t')) f.push_back(tok);
    if (f.size() != 3 || f[0].empty() || f[1].empty() || f[2].empty())
      throw ParseError("manifest: expected query_id<TAB>pos_id<TAB>neg_ids", lineno);
    ManifestEntry e{f[0], f[1], {}};
    std::stringstream ns(f[2]);
    while (std::getline(ns, tok, ',')) {
      if (tok.empty()) throw ParseError("manifest: empty negative id", lineno);
      e.neg_ids.push_back(tok);
    }
    for (const auto& n : e.neg_ids)
      if (n == e.pos_id) throw ParseError("manifest: positive " + n + " listed as a negative", lineno);
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("manifest: cannot open " + path);
  return read_manifest(in);
}

inline void write_manifest(std::ostream& out, const std::vector<ManifestEntry>& m) {
  for (const auto& e : m) {
    out << e.query_id << '\t' << e.pos_id << '\t';
    for (std::size_t i = 0; i < e.neg_ids.size(); ++i) out << (i ? "," : "") << e.neg_ids[i];
    out << '\n';
  }
}

}  // namespace ssmrank
