#pragma once

// Efficiency measurements: training throughput, inference speed, operator
// profiles, analytic operation counts and length-scaling curves.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ssmrank/autograd.hpp"
#include "ssmrank/error.hpp"
#include "ssmrank/model.hpp"
#include "ssmrank/profiler.hpp"
#include "ssmrank/rerank.hpp"
#include "ssmrank/train.hpp"

namespace ssmrank::bench {

// ---------------------------------------------------------------------------
// Memory budget

/// Rough peak bytes for one sequence of length L: parameters (with gradient
/// and two optimizer moments when training) plus recorded activations.
inline double estimate_peak_bytes(const ModelConfig& c, std::size_t L, bool training) {
  const double params = static_cast<double>(parameter_count(c));
  const double d = c.d_model, e = c.inner(), n = c.state_size, l = static_cast<double>(L);
  double per_layer = 0.0;
  switch (c.block_kind) {
    case BlockKind::kMamba1:
      per_layer = l * (12.0 * e + 4.0 * n + 4.0 * d) + (training ? l * e * n : 0.0);
      break;
    case BlockKind::kMamba2: {
      const double h = c.ssd_heads(), p = c.head_dim, q = std::min<double>(c.chunk_len, l);
      const double states = c.chunked ? std::ceil(l / q) * h * p * n : l * h * p * n;
      per_layer = l * (12.0 * e + 4.0 * h * n + 4.0 * d) + h * q * q + (training ? states : 0.0);
      break;
    }
    case BlockKind::kAttention:
      per_layer = 2.0 * l * l * c.n_heads + l * (14.0 * d + 2.0 * c.ffn_mult * d);
      break;
  }
  const double activations = c.n_layers * per_layer + l * d * 4.0;
  return 8.0 * ((training ? 4.0 : 1.0) * params + activations);
}

struct CapacityBudget {
  double max_bytes = 2048.0 * 1024 * 1024;

  void check(const ModelConfig& c, std::size_t L, bool training) const {
    const double need = estimate_peak_bytes(c, L, training);
    if (need > max_bytes) {
      std::ostringstream os;
      os << "capacity: " << to_string(c.block_kind) << " d_model=" << c.d_model << " n_layers=" << c.n_layers
         << " L=" << L << (training ? " (training)" : " (inference)") << " needs ~" << std::fixed
         << std::setprecision(1) << need / (1024.0 * 1024.0) << " MiB, budget " << max_bytes / (1024.0 * 1024.0)
         << " MiB";
      throw CapacityError(os.str());
    }
  }
};

// ---------------------------------------------------------------------------
// Synthetic inputs

inline std::vector<int> random_sequence(const ModelConfig& c, std::size_t L, std::mt19937_64& rng) {
  if (L == 0) throw InputError("random_sequence: length must be positive");
  std::vector<int> ids(L);
  const std::uint64_t bytes = std::min<std::uint64_t>(256, c.vocab_size);
  for (auto& v : ids) v = static_cast<int>(ssmrank::detail::bounded_draw(rng, bytes));
  ids.back() = c.eos_id;
  return ids;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

// ---------------------------------------------------------------------------
// Training throughput

struct ThroughputResult {
  double tokens_per_second = 0.0;
  double stddev_tokens_per_second = 0.0;  // over per-step rates
  std::vector<double> step_seconds;       // counted steps only
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
};

/// Runs `steps` optimizer steps on random sequences; the first is discarded
/// as warm-up. Each step scores `batch` sequences and back-propagates.
inline ThroughputResult measure_training_throughput(const ModelConfig& config, std::size_t batch, std::size_t seq_len,
                                                    std::size_t steps, std::uint64_t seed = 0,
                                                    const CapacityBudget& budget = {},
                                                    const TimerRegistry::Clock& clock = steady_now_ns) {
  if (steps < 3) throw InputError("measure_training_throughput: steps must be >= 3");
  if (batch == 0 || seq_len == 0) throw InputError("measure_training_throughput: batch and seq_len must be positive");
  config.validate();
  budget.check(config, seq_len, true);
  auto params = init_params<double>(config, seed);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  TrainConfig tc;
  AdamW opt(params, tc);
  ThroughputResult res;
  res.batch_size = batch;
  res.seq_len = seq_len;
  std::vector<double> rates;
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<std::vector<int>> seqs;
    for (std::size_t b = 0; b < batch; ++b) seqs.push_back(random_sequence(config, seq_len, rng));
    const std::uint64_t t0 = clock();
    params.zero_grad();
    for (const auto& ids : seqs) {
      ag::Tape<double> tape(true);
      ModelGraph<double> g(tape, params, config);
      ag::Var sc = g.score(ids);
      tape.backward(sc, Matrix<double>(1, 1, 1.0 / static_cast<double>(batch)));
      g.accumulate_grads(params);
    }
    opt.step(params, 1e-4);
    const double sec = static_cast<double>(clock() - t0) * 1e-9;
    if (s == 0) continue;
    res.step_seconds.push_back(sec);
    rates.push_back(sec > 0 ? static_cast<double>(batch * seq_len) / sec : 0.0);
  }
  double total = 0.0;
  for (double t : res.step_seconds) total += t;
  res.tokens_per_second = total > 0 ? static_cast<double>(batch * seq_len * res.step_seconds.size()) / total : 0.0;
  res.stddev_tokens_per_second = stddev(rates);
  return res;
}

// ---------------------------------------------------------------------------
// Inference

/// Scores several sequences on one no-grad tape. Parameter leaves are bound
/// once for the whole batch and activations are dropped after each sequence.
template <typename T>
std::vector<T> score_batch(const std::vector<std::vector<int>>& seqs, const ModelParams<T>& params,
                           const ModelConfig& config, TimerRegistry* profiler = nullptr) {
  ag::Tape<T> tape(false, profiler);
  ModelGraph<T> g(tape, params, config);
  const std::size_t mark = g.bind_parameters();
  std::vector<T> out;
  out.reserve(seqs.size());
  for (const auto& ids : seqs) {
    out.push_back(tape.value(g.score(ids))(0, 0));
    tape.truncate(mark);
  }
  return out;
}

struct EvalQuery {
  std::string query;
  std::vector<std::string> docs;  // candidates, one forward each
};

struct QpsResult {
  double queries_per_second = 0.0;
  double seconds = 0.0;
  std::size_t queries = 0;
  std::size_t forwards = 0;
};

template <typename T>
QpsResult measure_inference_qps(const ModelParams<T>& params, const ModelConfig& config,
                                const std::vector<EvalQuery>& eval, std::size_t batch, std::size_t max_len,
                                const CapacityBudget& budget = {},
                                const TimerRegistry::Clock& clock = steady_now_ns) {
  if (eval.empty()) throw InputError("measure_inference_qps: empty eval set");
  if (batch == 0) throw InputError("measure_inference_qps: batch must be positive");
  const TruncationPolicy policy = TruncationPolicy::custom(max_len);
  budget.check(config, max_len, false);
  std::vector<std::vector<int>> all;
  for (const auto& q : eval)
    for (const auto& d : q.docs) all.push_back(format_input(q.query, d, policy));
  QpsResult res;
  res.queries = eval.size();
  res.forwards = all.size();
  const std::uint64_t t0 = clock();
  volatile T sink = T(0);
  for (std::size_t i = 0; i < all.size(); i += batch) {
    std::vector<std::vector<int>> chunk(all.begin() + static_cast<std::ptrdiff_t>(i),
                                        all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), i + batch)));
    for (T s : score_batch<T>(chunk, params, config)) sink = sink + s;
  }
  res.seconds = static_cast<double>(clock() - t0) * 1e-9;
  res.queries_per_second = res.seconds > 0 ? static_cast<double>(res.queries) / res.seconds : 0.0;
  return res;
}

// ---------------------------------------------------------------------------
// Operator profile

/// Forward passes of `inputs` with every compute scope timed.
template <typename T>
std::vector<TimerRegistry::Row> profile_operators(const ModelParams<T>& params, const ModelConfig& config,
                                                  const std::vector<std::vector<int>>& inputs,
                                                  TimerRegistry& registry) {
  for (const auto& ids : inputs) {
    auto tr = forward<T>(ids, params, config, {false, &registry});
    (void)tr;
  }
  return registry.rows();
}

// ---------------------------------------------------------------------------
// Analytic operation counts

/// c * L^l_exp * N^n_exp
struct Monomial {
  double coef = 0.0;
  int l_exp = 0;
  int n_exp = 0;
};

struct FlopPolynomial {
  std::vector<Monomial> terms;

  double operator()(double L, double N) const {
    double s = 0.0;
    for (const auto& t : terms) s += t.coef * std::pow(L, t.l_exp) * std::pow(N, t.n_exp);
    return s;
  }

  /// Highest power of L, and the highest power of N among terms with it.
  std::pair<int, int> leading() const {
    int l = -1, n = -1;
    for (const auto& t : terms) {
      if (t.coef == 0.0) continue;
      if (t.l_exp > l || (t.l_exp == l && t.n_exp > n)) {
        l = t.l_exp;
        n = t.n_exp;
      }
    }
    return {l, n};
  }
};

struct FlopEstimate {
  BlockKind kind = BlockKind::kMamba2;
  std::size_t seq_len = 0;
  double layer_forward = 0.0;   // one block at the config's widths
  double layer_training = 0.0;  // forward + backward, counted as 3x forward
  double inference_step = 0.0;  // one new token at position seq_len
  // Core sequence-mixing cost with the channel dimension dropped and head
  // width equal to the state size N (the convention of the complexity table).
  FlopPolynomial core_training;
  FlopPolynomial core_inference;
};

/// Closed-form counts; a multiply-add counts as 2, exp/log/div as 1 each.
inline FlopEstimate estimate_flops(const ModelConfig& c, std::size_t L) {
  c.validate();
  if (L == 0) throw InputError("estimate_flops: L must be positive");
  FlopEstimate f;
  f.kind = c.block_kind;
  f.seq_len = L;
  const double l = static_cast<double>(L), d = c.d_model, e = c.inner(), n = c.state_size,
               w = c.local_conv_width;
  const double norm = 4.0 * d;
  switch (c.block_kind) {
    case BlockKind::kMamba1: {
      const double per_token = norm + 2.0 * d * 2.0 * e + 2.0 * w * e + 4.0 * e + 2.0 * e * e + 4.0 * e +
                               2.0 * 2.0 * e * n + 11.0 * e * n + 4.0 * e + 2.0 * e * d + d;
      f.layer_forward = l * per_token;
      f.inference_step = per_token;
      // selective scan over N channels with N states: discretize, update, read out
      f.core_training = {{{11.0, 1, 2}}};
      f.core_inference = {{{11.0, 0, 2}}};
      break;
    }
    case BlockKind::kMamba2: {
      const double h = c.ssd_heads(), p = c.head_dim, q = static_cast<double>(std::min<std::size_t>(c.chunk_len, L));
      const double proj = norm + 2.0 * d * (2.0 * e + 2.0 * h * n + h) + 2.0 * w * e + 4.0 * e + 3.0 * h +
                          4.0 * e + 2.0 * e * d + d;
      // chunked: C B^T and masked decay (2QN + Q per row), M U (2QP), state read
      // and carry (4PN) per token and head
      const double core_chunked = h * (2.0 * q * n + 3.0 * q + 2.0 * q * p + 4.0 * p * n + 2.0 * n);
      const double core_seq = h * (p * n * 5.0 + 3.0);
      f.layer_forward = l * (proj + (c.chunked ? core_chunked : core_seq));
      f.inference_step = proj + core_seq;
      // with P = N and chunk length Q as a constant: 2QN + 3Q + 2QN + 4N^2 + 2N per token
      f.core_training = {{{4.0 * q + 2.0, 1, 1}, {3.0 * q, 1, 0}, {4.0, 1, 2}}};
      f.core_inference = {{{5.0, 0, 2}, {3.0, 0, 0}}};
      break;
    }
    case BlockKind::kAttention: {
      const double ff = c.ffn_mult * d, heads = c.n_heads;
      const double per_token = 2.0 * norm + 2.0 * d * 3.0 * d + 3.0 * d + 2.0 * d * d + 2.0 * d +
                               2.0 * d * ff + 5.0 * ff + 2.0 * ff * d + 2.0 * d;
      // full L x L scores: QK^T (2LD), softmax (5 per score per head), PV (2LD)
      const double mix = l * l * (4.0 * d + 5.0 * heads);
      f.layer_forward = l * per_token + mix;
      f.inference_step = per_token + l * (4.0 * d + 5.0 * heads);
      f.core_training = {{{4.0, 2, 1}, {5.0, 2, 0}}};
      f.core_inference = {{{4.0, 1, 1}, {5.0, 1, 0}}};
      break;
    }
  }
  f.layer_training = 3.0 * f.layer_forward;
  return f;
}

// ---------------------------------------------------------------------------
// Length scaling

struct ScalingRow {
  BlockKind kind;
  std::size_t seq_len;
  double forward_ms;  // best of the repeats
};

struct SlopeFit {
  BlockKind kind;
  double slope;
  double intercept;
};

/// Least-squares line through (log L, log t).
inline std::pair<double, double> fit_loglog(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw InputError("fit_loglog: need at least two points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double k = static_cast<double>(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(xs[i] > 0) || !(ys[i] > 0)) throw NumericError("fit_loglog: non-positive value");
    const double x = std::log(xs[i]), y = std::log(ys[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
  return {slope, (sy - slope * sx) / k};
}

struct ScalingResult {
  std::vector<ScalingRow> rows;
  std::vector<SlopeFit> fits;
};

/// Times one no-grad forward per (kind, L). Kinds share every width in `base`.
inline ScalingResult scaling_curve(const ModelConfig& base, const std::vector<BlockKind>& kinds,
                                   const std::vector<std::size_t>& lengths, std::size_t repeats = 3,
                                   std::uint64_t seed = 0, const CapacityBudget& budget = {},
                                   const TimerRegistry::Clock& clock = steady_now_ns) {
  if (lengths.size() < 2) throw InputError("scaling_curve: need at least two lengths");
  for (std::size_t i = 1; i < lengths.size(); ++i)
    if (lengths[i] <= lengths[i - 1]) throw InputError("scaling_curve: lengths must be strictly ascending");
  if (repeats == 0) throw InputError("scaling_curve: repeats must be positive");
  ScalingResult res;
  for (BlockKind k : kinds) {
    ModelConfig c = base;
    c.block_kind = k;
    c.max_seq_len = std::max(c.max_seq_len, lengths.back());
    c.validate();
    for (std::size_t L : lengths) budget.check(c, L, false);
    auto params = init_params<double>(c, seed);
    std::mt19937_64 rng(seed + 1);
    std::vector<double> xs, ys;
    for (std::size_t L : lengths) {
      const auto ids = random_sequence(c, L, rng);
      double best = 0.0;
      for (std::size_t r = 0; r < repeats; ++r) {
        const std::uint64_t t0 = clock();
        volatile double s = score<double>(ids, params, c);
        (void)s;
        const double ms = static_cast<double>(clock() - t0) * 1e-6;
        best = r == 0 ? ms : std::min(best, ms);
      }
      res.rows.push_back({k, L, best});
      xs.push_back(static_cast<double>(L));
      ys.push_back(best);
    }
    const auto [slope, icpt] = fit_loglog(xs, ys);
    res.fits.push_back({k, slope, icpt});
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reports

struct BenchReport {
  std::string title;
  std::vector<std::pair<std::string, std::string>> config;  // echoed verbatim
  std::vector<std::pair<std::string, double>> metrics;      // e.g. tokens_per_second
  std::vector<TimerRegistry::Row> scopes;
  std::vector<ScalingRow> scaling;
  std::vector<SlopeFit> fits;
};

namespace detail {

inline std::string fixed(double v, int prec) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace detail

inline std::string render_text(const BenchReport& r) {
  std::ostringstream os;
  os << "# " << r.title << '\n';
  for (const auto& [k, v] : r.config) os << "config." << k << " = " << v << '\n';
  for (const auto& [k, v] : r.metrics) os << k << " = " << detail::fixed(v, 6) << '\n';
  if (!r.scopes.empty()) os << '\n' << render_rows_text(r.scopes);
  if (!r.scaling.empty()) {
    os << '\n' << std::left << std::setw(12) << "kind" << std::right << std::setw(8) << "L" << std::setw(14)
       << "forward_ms" << '\n';
    for (const auto& s : r.scaling)
      os << std::left << std::setw(12) << to_string(s.kind) << std::right << std::setw(8) << s.seq_len
         << std::setw(14) << detail::fixed(s.forward_ms, 3) << '\n';
  }
  for (const auto& f : r.fits) os << "slope." << to_string(f.kind) << " = " << detail::fixed(f.slope, 4) << '\n';
  return os.str();
}

/// One CSV table per section, separated by blank lines.
inline std::string render_csv(const BenchReport& r) {
  std::ostringstream os;
  os << "key,value\n";
  for (const auto& [k, v] : r.config) os << "config." << k << ',' << v << '\n';
  for (const auto& [k, v] : r.metrics) os << k << ',' << detail::fixed(v, 6) << '\n';
  if (!r.scopes.empty()) os << '\n' << render_rows_csv(r.scopes);
  if (!r.scaling.empty()) {
    os << "\nkind,L,forward_ms\n";
    for (const auto& s : r.scaling) os << to_string(s.kind) << ',' << s.seq_len << ',' << detail::fixed(s.forward_ms, 6) << '\n';
  }
  if (!r.fits.empty()) {
    os << "\nkind,slope,intercept\n";
    for (const auto& f : r.fits)
      os << to_string(f.kind) << ',' << detail::fixed(f.slope, 6) << ',' << detail::fixed(f.intercept, 6) << '\n';
  }
  return os.str();
}

}  // namespace ssmrank::bench
