#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace ssmrank {

inline std::uint64_t steady_now_ns() {
  return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(
                                        std::chrono::steady_clock::now().time_since_epoch())
                                        .count());
}

/// Hierarchical named wall-clock scopes. Scopes opened while another scope is
/// active become its children; repeated scopes with the same name under the
/// same parent are merged (count and time accumulate).
class TimerRegistry {
 public:
  using Clock = std::function<std::uint64_t()>;

  struct Node {
    std::string name;
    std::size_t parent = 0;
    std::size_t calls = 0;
    std::uint64_t total_ns = 0;
    std::vector<std::size_t> children;
  };

  struct Row {
    std::string name;  // slash-joined path
    std::size_t depth = 0;
    std::size_t calls = 0;
    double cumulative_ms = 0.0;
    double percent = 0.0;  // of the sum over top-level scopes
  };

  class Scope {
   public:
    Scope() = default;
    Scope(TimerRegistry* reg, std::size_t node) : reg_(reg), node_(node), start_(reg->clock_()) {}
    Scope(Scope&& o) noexcept : reg_(o.reg_), node_(o.node_), start_(o.start_) { o.reg_ = nullptr; }
    Scope& operator=(Scope&&) = delete;
    Scope(const Scope&) = delete;
    ~Scope() {
      if (reg_) reg_->close(node_, reg_->clock_() - start_);
    }

   private:
    TimerRegistry* reg_ = nullptr;
    std::size_t node_ = 0;
    std::uint64_t start_ = 0;
  };

  explicit TimerRegistry(bool enabled = true, Clock clock = steady_now_ns)
      : enabled_(enabled), clock_(std::move(clock)) {
    nodes_.push_back(Node{"<root>", 0, 0, 0, {}});
  }

  bool enabled() const noexcept { return enabled_; }

  Scope scope(std::string_view name) {
    if (!enabled_) return Scope{};
    const std::size_t parent = current_;
    std::size_t id = 0;
    for (std::size_t c : nodes_[parent].children)
      if (nodes_[c].name == name) id = c;
    if (id == 0) {
      id = nodes_.size();
      nodes_.push_back(Node{std::string(name), parent, 0, 0, {}});
      nodes_[parent].children.push_back(id);
    }
    current_ = id;
    return Scope(this, id);
  }

  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  bool empty() const noexcept { return nodes_.size() == 1; }

  /// Total time attributed to scopes named `name` anywhere in the tree.
  std::uint64_t total_ns(std::string_view name) const {
    std::uint64_t s = 0;
    for (std::size_t i = 1; i < nodes_.size(); ++i)
      if (nodes_[i].name == name) s += nodes_[i].total_ns;
    return s;
  }
  std::size_t calls(std::string_view name) const {
    std::size_t s = 0;
    for (std::size_t i = 1; i < nodes_.size(); ++i)
      if (nodes_[i].name == name) s += nodes_[i].calls;
    return s;
  }
  std::uint64_t root_total_ns() const {
    std::uint64_t s = 0;
    for (std::size_t c : nodes_[0].children) s += nodes_[c].total_ns;
    return s;
  }

  /// Depth-first rows; siblings sorted by descending cumulative time, then name.
  std::vector<Row> rows() const {
    std::vector<Row> out;
    const double total = static_cast<double>(root_total_ns());
    walk(0, "", 0, total, out);
    return out;
  }

  void clear() {
    nodes_.resize(1);
    nodes_[0].children.clear();
    current_ = 0;
  }

 private:
  void close(std::size_t node, std::uint64_t elapsed) {
    nodes_[node].calls += 1;
    nodes_[node].total_ns += elapsed;
    current_ = nodes_[node].parent;
  }

  void walk(std::size_t node, const std::string& prefix, std::size_t depth, double total,
            std::vector<Row>& out) const {
    std::vector<std::size_t> kids = nodes_[node].children;
    std::sort(kids.begin(), kids.end(), [&](std::size_t a, std::size_t b) {
      if (nodes_[a].total_ns != nodes_[b].total_ns) return nodes_[a].total_ns > nodes_[b].total_ns;
      return nodes_[a].name < nodes_[b].name;
    });
    for (std::size_t k : kids) {
      const Node& n = nodes_[k];
      const std::string path = prefix.empty() ? n.name : prefix + "/" + n.name;
      out.push_back(Row{path, depth, n.calls, n.total_ns / 1e6,
                        total > 0 ? 100.0 * static_cast<double>(n.total_ns) / total : 0.0});
      walk(k, path, depth + 1, total, out);
    }
  }

  bool enabled_;
  Clock clock_;
  std::vector<Node> nodes_;
  std::size_t current_ = 0;
};

/// Opens a scope on an optional registry.
inline TimerRegistry::Scope profile_scope(TimerRegistry* reg, std::string_view name) {
  return reg ? reg->scope(name) : TimerRegistry::Scope{};
}

inline std::string render_rows_text(const std::vector<TimerRegistry::Row>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(40) << "scope" << std::right << std::setw(10) << "calls"
     << std::setw(14) << "cum_ms" << std::setw(9) << "pct" << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(40) << (std::string(2 * r.depth, ' ') + r.name.substr(r.name.rfind('/') + 1))
       << std::right << std::setw(10) << r.calls << std::setw(14) << std::fixed
       << std::setprecision(3) << r.cumulative_ms << std::setw(8) << std::setprecision(2)
       << r.percent << "%\n";
  }
  return os.str();
}

inline std::string render_rows_csv(const std::vector<TimerRegistry::Row>& rows) {
  std::ostringstream os;
  os << "scope,depth,calls,cumulative_ms,percent\n";
  for (const auto& r : rows)
    os << r.name << ',' << r.depth << ',' << r.calls << ',' << std::fixed << std::setprecision(6)
       << r.cumulative_ms << ',' << std::setprecision(4) << r.percent << '\n';
  return os.str();
}

}  // namespace ssmrank
