#pragma once

// Tape-based reverse-mode differentiation over dense matrices. Every node
// stores its forward closure, so a recorded tape can be replayed; nodes that
// depend on a gradient-requiring input also carry a backward closure.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssmrank/error.hpp"
#include "ssmrank/matrix.hpp"
#include "ssmrank/profiler.hpp"
#include "ssmrank/selective_ssm.hpp"

namespace ssmrank::ag {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

template <typename T>
class Tape {
 public:
  using Fn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    Fn forward;
    Fn backward;
    bool needs_grad = false;
  };

  explicit Tape(bool record_grad = true, TimerRegistry* profiler = nullptr)
      : record_grad_(record_grad), profiler_(profiler) {}

  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  bool record_grad() const noexcept { return record_grad_; }
  TimerRegistry* profiler() const noexcept { return profiler_; }
  void set_profiler(TimerRegistry* p) noexcept { profiler_ = p; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Drops every node recorded after the first `n`.
  void truncate(std::size_t n) {
    if (n > nodes_.size()) throw ContractError("Tape::truncate: beyond the end of the tape");
    nodes_.resize(n);
  }

  Var leaf(Matrix<T> value, bool needs_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, needs_grad && record_grad_});
    return Var{nodes_.size() - 1};
  }

  /// Appends an op node and evaluates it immediately.
  Var push(const std::vector<Var>& inputs, Fn forward, Fn backward, std::string_view scope) {
    bool ng = false;
    if (record_grad_)
      for (Var v : inputs) ng = ng || nodes_.at(v.id).needs_grad;
    nodes_.push_back(Node{{}, {}, std::move(forward), ng ? std::move(backward) : Fn{}, ng});
    const std::size_t id = nodes_.size() - 1;
    {
      auto s = profile_scope(profiler_, scope);
      nodes_[id].forward(*this, id);
    }
    return Var{id};
  }

  const Matrix<T>& value(Var v) const { return nodes_.at(v.id).value; }
  Matrix<T>& value_mut(std::size_t id) { return nodes_[id].value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  const Matrix<T>& grad(Var v) const { return nodes_.at(v.id).grad; }
  Matrix<T>& grad_mut(std::size_t id) { return nodes_[id].grad; }

  /// Accumulates into the gradient of `v` if it participates in differentiation.
  Matrix<T>* grad_slot(Var v) {
    Node& n = nodes_[v.id];
    return n.needs_grad ? &n.grad : nullptr;
  }

  /// Seeds d(out) = seed and runs every backward closure in reverse order.
  void backward(Var out, const Matrix<T>& seed) { backward({{out, seed}}); }

  /// Multiple seeds: the implied loss is the sum of <seed_i, out_i>.
  void backward(const std::vector<std::pair<Var, Matrix<T>>>& seeds) {
    if (!record_grad_) throw ContractError("Tape::backward: tape was recorded without gradients");
    for (Node& n : nodes_)
      if (n.needs_grad) n.grad = Matrix<T>(n.value.rows(), n.value.cols());
    std::size_t last = 0;
    for (const auto& [v, seed] : seeds) {
      Node& o = nodes_.at(v.id);
      require_shape(seed, o.value.rows(), o.value.cols(), "Tape::backward seed");
      if (!o.needs_grad) continue;
      for (std::size_t i = 0; i < seed.size(); ++i) o.grad[i] += seed[i];
      last = std::max(last, v.id + 1);
    }
    for (std::size_t i = last; i-- > 0;)
      if (nodes_[i].backward) nodes_[i].backward(*this, i);
  }

  /// Re-executes every recorded forward closure in order.
  void replay() {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].forward) nodes_[i].forward(*this, i);
  }

 private:
  std::vector<Node> nodes_;
  bool record_grad_;
  TimerRegistry* profiler_;
};

template <typename T>
void accumulate(Matrix<T>* dst, const Matrix<T>& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

template <typename T>
Var matmul(Tape<T>& tp, Var a, Var b, std::string_view scope = "projection") {
  return tp.push(
      {a, b}, [a, b](Tape<T>& t, std::size_t self) { t.value_mut(self) = ssmrank::matmul(t.value(a), t.value(b)); },
      [a, b](Tape<T>& t, std::size_t self) {
        const Matrix<T>& g = t.grad_mut(self);
        if (auto* ga = t.grad_slot(a)) accumulate(ga, matmul_bt(g, t.value(b)));
        if (auto* gb = t.grad_slot(b)) accumulate(gb, matmul_at(t.value(a), g));
      },
      scope);
}

template <typename T>
Var add(Tape<T>& tp, Var a, Var b, std::string_view scope = "elementwise") {
  detail::require(tp.value(a).same_shape(tp.value(b)), "ag::add: shape mismatch");
  return tp.push(
      {a, b},
      [a, b](Tape<T>& t, std::size_t self) {
        Matrix<T> out = t.value(a);
        const Matrix<T>& bv = t.value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
        t.value_mut(self) = std::move(out);
      },
      [a, b](Tape<T>& t, std::size_t self) {
        const Matrix<T>& g = t.grad_mut(self);
        accumulate(t.grad_slot(a), g);
        accumulate(t.grad_slot(b), g);
      },
      scope);
}

/// a + row, broadcasting a 1 x C row over every row of a.
template <typename T>
Var add_row(Tape<T>& tp, Var a, Var row, std::string_view scope = "projection") {
  require_shape(tp.value(row), 1, tp.value(a).cols(), "ag::add_row");
  return tp.push(
      {a, row},
      [a, row](Tape<T>& t, std::size_t self) {
        Matrix<T> out = t.value(a);
        const Matrix<T>& r = t.value(row);
        for (std::size_t i = 0; i < out.rows(); ++i)
          for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += r(0, j);
        t.value_mut(self) = std::move(out);
      },
      [a, row](Tape<T>& t, std::size_t self) {
        const Matrix<T>& g = t.grad_mut(self);
        accumulate(t.grad_slot(a), g);
        if (auto* gr = t.grad_slot(row))
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) (*gr)(0, j) += g(i, j);
      },
      scope);
}

template <typename T>
Var mul(Tape<T>& tp, Var a, Var b, std::string_view scope = "elementwise") {
  detail::require(tp.value(a).same_shape(tp.value(b)), "ag::mul: shape mismatch");
  return tp.push(
      {a, b},
      [a, b](Tape<T>& t, std::size_t self) {
        Matrix<T> out = t.value(a);
        const Matrix<T>& bv = t.value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
        t.value_mut(self) = std::move(out);
      },
      [a, b](Tape<T>& t, std::size_t self) {
        const Matrix<T>& g = t.grad_mut(self);
        const Matrix<T>& av = t.value(a);
        const Matrix<T>& bv = t.value(b);
        if (auto* ga = t.grad_slot(a))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
        if (auto* gb = t.grad_slot(b))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
      },
      scope);
}

/// a * row, broadcasting a 1 x C row.
template <typename T>
Var mul_row(Tape<T>& tp, Var a, Var row, std::string_view scope = "elementwise") {
  require_shape(tp.value(row), 1, tp.value(a).cols(), "ag::mul_row");
  return tp.push(
      {a, row},
      [a, row](Tape<T>& t, std::size_t self) {
        Matrix<T> out = t.value(a);
        const Matrix<T>& r = t.value(row);
        for (std::size_t i = 0; i < out.rows(); ++i)
          for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= r(0, j);
        t.value_mut(self) = std::move(out);
      },
      [a, row](Tape<T>& t, std::size_t self) {
        const Matrix<T>& g = t.grad_mut(self);
        const Matrix<T>& av = t.value(a);
        const Matrix<T>& r = t.value(row);
        if (auto* ga = t.grad_slot(a))
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) (*ga)(i, j) += g(i, j) * r(0, j);
        if (auto* gr = t.grad_slot(row))
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) (*gr)(0, j) += g(i, j) * av(i, j);
      },
      scope);
}

namespace detail {

// Elementwise map with derivative expressed through the input value.
template <typename T, typename F, typename DF>
Var unary(Tape<T>& tp, Var a, F f, DF df, std::string_view scope) {
  return tp.push(
      {a},
      [a, f](Tape<T>& t, std::size_t self) {
        Matrix<T> out = t.value(a);
        for (auto& v : out.storage()) v = f(v);
        t.value_mut(self) = std::move(out);
      },
      [a, df](Tape<T>& t, std::size_t self) {
        const Matrix<T>& g = t.grad_mut(self);
        const Matrix<T>& av = t.value(a);
        if (auto* ga = t.grad_slot(a))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * df(av[i]);
      },
      scope);
}

}  // namespace detail

/// x * sigmoid(x)
template <typename T>
Var silu(Tape<T>& tp, Var a, std::string_view scope = "activation") {
  return detail::unary(
      tp, a, [](T v) { return v * ssm::sigmoid(v); },
      [](T v) {
        const T s = ssm::sigmoid(v);
        return s * (T(1) + v * (T(1) - s));
      },
      scope);
}

template <typename T>
Var softplus(Tape<T>& tp, Var a, std::string_view scope = "activation") {
  return detail::unary(
      tp, a, [](T v) { return ssm::softplus(v); }, [](T v) { return ssm::sigmoid(v); }, scope);
}

/// -exp(a); maps a log-magnitude parameter to a strictly negative decay rate.
template <typename T>
Var neg_exp(Tape<T>& tp, Var a, std::string_view scope = "elementwise") {
  return detail::unary(
      tp, a, [](T v) { return -std::exp(v); }, [](T v) { return -std::exp(v); }, scope);
}

/// Row-wise RMS normalization with a learned 1 x C gain.
template <typename T>
Var rmsnorm(Tape<T>& tp, Var a, Var gain, T eps = T(1e-5), std::string_view scope = "normalization") {
  require_shape(tp.value(gain), 1, tp.value(a).cols(), "ag::rmsnorm gain");
  return tp.push(
      {a, gain},
      [a, gain, eps](Tape<T>& t, std::size_t self) {
        const Matrix<T>& x = t.value(a);
        const Matrix<T>& g = t.value(gain);
        Matrix<T> out(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i) {
          T ss = T(0);
          for (std::size_t j = 0; j < x.cols(); ++j) ss += x(i, j) * x(i, j);
          const T inv = T(1) / std::sqrt(ss / T(x.cols()) + eps);
          for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) * inv * g(0, j);
        }
        t.value_mut(self) = std::move(out);
      },
      [a, gain, eps](Tape<T>& t, std::size_t self) {
        const Matrix<T>& gy = t.grad_mut(self);
        const Matrix<T>& x = t.value(a);
        const Matrix<T>& g = t.value(gain);
        auto* gx = t.grad_slot(a);
        auto* gg = t.grad_slot(gain);
        const std::size_t n = x.cols();
        for (std::size_t i = 0; i < x.rows(); ++i) {
          T ss = T(0);
          for (std::size_t j = 0; j < n; ++j) ss += x(i, j) * x(i, j);
          const T inv = T(1) / std::sqrt(ss / T(n) + eps);
          T dot = T(0);
          for (std::size_t j = 0; j < n; ++j) dot += gy(i, j) * g(0, j) * x(i, j);
          for (std::size_t j = 0; j < n; ++j) {
            if (gx) (*gx)(i, j) += gy(i, j) * g(0, j) * inv - x(i, j) * dot * inv * inv * inv / T(n);
            if (gg) (*gg)(0, j) += gy(i, j) * x(i, j) * inv;
          }
        }
      },
      scope);
}

/// Columns [c0, c1) of a.
template <typename T>
Var slice_cols(Tape<T>& tp, Var a, std::size_t c0, std::size_t c1, std::string_view scope = "elementwise") {
  ssmrank::detail::require(c0 <= c1 && c1 <= tp.value(a).cols(), "ag::slice_cols: bad range");
  return tp.push(
      {a},
      [a, c0, c1](Tape<T>& t, std::size_t self) {
        const Matrix<T>& x = t.value(a);
        Matrix<T> out(x.rows(), c1 - c0);
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = c0; j < c1; ++j) out(i, j - c0) = x(i, j);
        t.value_mut(self) = std::move(out);
      },
      [a, c0](Tape<T>& t, std::size_t self) {
        const Matrix<T>& g = t.grad_mut(self);
        if (auto* ga = t.grad_slot(a))
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) (*ga)(i, j + c0) += g(i, j);
      },
      scope);
}

/// Row r of a as a 1 x C matrix.
template <typename T>
Var take_row(Tape<T>& tp, Var a, std::size_t r, std::string_view scope = "elementwise") {
  ssmrank::detail::require(r < tp.value(a).rows(), "ag::take_row: row out of range");
  return tp.push(
      {a},
      [a, r](Tape<T>& t, std::size_t self) {
        const Matrix<T>& x = t.value(a);
        Matrix<T> out(1, x.cols());
        for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) = x(r, j);
        t.value_mut(self) = std::move(out);
      },
      [a, r](Tape<T>& t, std::size_t self) {
        const Matrix<T>& g = t.grad_mut(self);
        if (auto* ga = t.grad_slot(a))
          for (std::size_t j = 0; j < g.cols(); ++j) (*ga)(r, j) += g(0, j);
      },
      scope);
}

/// Gathers rows of `table` (V x C) by id.
template <typename T>
Var embedding(Tape<T>& tp, Var table, std::vector<int> ids, std::string_view scope = "embedding") {
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tp.value(table).rows())
      throw InputError("embedding: id " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside table of " +
                       std::to_string(tp.value(table).rows()) + " rows");
  return tp.push(
      {table},
      [table, ids](Tape<T>& t, std::size_t self) {
        const Matrix<T>& e = t.value(table);
        Matrix<T> out(ids.size(), e.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
          auto src = e.row(static_cast<std::size_t>(ids[i]));
          std::copy(src.begin(), src.end(), out.row(i).begin());
        }
        t.value_mut(self) = std::move(out);
      },
      [table, ids](Tape<T>& t, std::size_t self) {
        const Matrix<T>& g = t.grad_mut(self);
        if (auto* ge = t.grad_slot(table))
          for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) (*ge)(static_cast<std::size_t>(ids[i]), j) += g(i, j);
      },
      scope);
}

/// Depthwise causal convolution: y[t][c] = bias[c] + sum_k w[k][c] * x[t - (W-1) + k][c].
template <typename T>
Var causal_conv(Tape<T>& tp, Var x, Var w, Var bias, std::string_view scope = "local_conv") {
  const std::size_t ch = tp.value(x).cols();
  ssmrank::detail::require(tp.value(w).cols() == ch, "ag::causal_conv: weight width mismatch");
  require_shape(tp.value(bias), 1, ch, "ag::causal_conv bias");
  return tp.push(
      {x, w, bias},
      [x, w, bias](Tape<T>& t, std::size_t self) {
        const Matrix<T>& xv = t.value(x);
        const Matrix<T>& wv = t.value(w);
        const Matrix<T>& bv = t.value(bias);
        const std::size_t width = wv.rows(), len = xv.rows(), c = xv.cols();
        Matrix<T> out(len, c);
        for (std::size_t i = 0; i < len; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            T s = bv(0, j);
            for (std::size_t k = 0; k < width; ++k) {
              const std::size_t back = width - 1 - k;
              if (back <= i) s += wv(k, j) * xv(i - back, j);
            }
            out(i, j) = s;
          }
        t.value_mut(self) = std::move(out);
      },
      [x, w, bias](Tape<T>& t, std::size_t self) {
        const Matrix<T>& g = t.grad_mut(self);
        const Matrix<T>& xv = t.value(x);
        const Matrix<T>& wv = t.value(w);
        auto* gx = t.grad_slot(x);
        auto* gw = t.grad_slot(w);
        auto* gb = t.grad_slot(bias);
        const std::size_t width = wv.rows();
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) {
            const T gv = g(i, j);
            if (gb) (*gb)(0, j) += gv;
            for (std::size_t k = 0; k < width; ++k) {
              const std::size_t back = width - 1 - k;
              if (back > i) continue;
              if (gw) (*gw)(k, j) += gv * xv(i - back, j);
              if (gx) (*gx)(i - back, j) += gv * wv(k, j);
            }
          }
      },
      scope);
}

/// Selective scan with per-channel delta (L x D), A (D x N), shared B, C (L x N).
template <typename T>
Var selective_scan(Tape<T>& tp, Var x, Var delta, Var a, Var b, Var c, std::string_view scope = "scan") {
  auto states = std::make_shared<Matrix<T>>();
  return tp.push(
      {x, delta, a, b, c},
      [=](Tape<T>& t, std::size_t self) {
        ssm::SelectiveTrace<T> tr{t.value(delta), t.value(b), t.value(c)};
        t.value_mut(self) = ssm::selective_scan_sequential(t.value(x), tr, t.value(a), nullptr,
                                                          t.record_grad() ? states.get() : nullptr);
      },
      [=](Tape<T>& t, std::size_t self) {
        ssm::SelectiveTrace<T> tr{t.value(delta), t.value(b), t.value(c)};
        auto g = ssm::selective_scan_backward(t.value(x), tr, t.value(a), *states, t.grad_mut(self));
        accumulate(t.grad_slot(x), g.x);
        accumulate(t.grad_slot(delta), g.delta);
        accumulate(t.grad_slot(a), g.a_diag);
        accumulate(t.grad_slot(b), g.b);
        accumulate(t.grad_slot(c), g.c);
      },
      scope);
}

/// Multi-head SSD: delta L x H, a 1 x H (negative), B and C L x (H*N).
/// With `chunked` the forward uses the chunked evaluator and keeps only the
/// chunk-boundary states for the reverse pass.
template <typename T>
Var ssd(Tape<T>& tp, Var x, Var delta, Var a, Var b, Var c, std::size_t head_dim, std::size_t state_size,
        bool chunked, std::size_t chunk_len, std::string_view scope = "scan") {
  auto states = std::make_shared<Matrix<T>>();
  auto heads_of = [head_dim, state_size](const Matrix<T>& av) {
    ssm::SsdHeadParams<T> h;
    h.num_heads = av.cols();
    h.head_dim = head_dim;
    h.state_size = state_size;
    h.a_scalar = av.storage();
    return h;
  };
  return tp.push(
      {x, delta, a, b, c},
      [=](Tape<T>& t, std::size_t self) {
        ssm::SelectiveTrace<T> tr{t.value(delta), t.value(b), t.value(c)};
        const auto heads = heads_of(t.value(a));
        Matrix<T>* keep = t.record_grad() ? states.get() : nullptr;
        if (chunked)
          t.value_mut(self) = ssm::ssd_forward_chunked(t.value(x), heads, tr, ssm::ChunkPlan{chunk_len}, nullptr, keep);
        else
          t.value_mut(self) = ssm::ssd_forward_sequential(t.value(x), heads, tr, nullptr, keep);
      },
      [=](Tape<T>& t, std::size_t self) {
        ssm::SelectiveTrace<T> tr{t.value(delta), t.value(b), t.value(c)};
        const auto heads = heads_of(t.value(a));
        auto g = chunked ? ssm::ssd_backward_chunked(t.value(x), heads, tr, *states, ssm::ChunkPlan{chunk_len},
                                                     t.grad_mut(self))
                         : ssm::ssd_backward(t.value(x), heads, tr, *states, t.grad_mut(self));
        accumulate(t.grad_slot(x), g.x);
        accumulate(t.grad_slot(delta), g.delta);
        if (auto* ga = t.grad_slot(a))
          for (std::size_t h = 0; h < g.a_scalar.size(); ++h) (*ga)(0, h) += g.a_scalar[h];
        accumulate(t.grad_slot(b), g.b);
        accumulate(t.grad_slot(c), g.c);
      },
      scope);
}

/// Naive multi-head causal softmax attention over q, k, v (L x D each): the
/// full L x L score matrix is formed and the upper triangle masked out.
template <typename T>
Var causal_attention(Tape<T>& tp, Var q, Var k, Var v, std::size_t n_heads, std::string_view scope = "attention") {
  const std::size_t d = tp.value(q).cols();
  ssmrank::detail::require(n_heads > 0 && d % n_heads == 0, "ag::causal_attention: D not divisible by heads");
  ssmrank::detail::require(tp.value(k).same_shape(tp.value(q)) && tp.value(v).same_shape(tp.value(q)),
                           "ag::causal_attention: q, k, v shapes differ");
  auto probs = std::make_shared<std::vector<Matrix<T>>>();
  return tp.push(
      {q, k, v},
      [=](Tape<T>& t, std::size_t self) {
        const Matrix<T>& qv = t.value(q);
        const Matrix<T>& kv = t.value(k);
        const Matrix<T>& vv = t.value(v);
        const std::size_t len = qv.rows(), dh = d / n_heads;
        const T scale = T(1) / std::sqrt(T(dh));
        Matrix<T> out(len, d);
        const bool keep = t.record_grad();
        probs->assign(keep ? n_heads : 0, Matrix<T>());
        std::vector<T> row(len);
        for (std::size_t h = 0; h < n_heads; ++h) {
          Matrix<T> p(keep ? len : 0, keep ? len : 0);
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < len; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < len; ++j) {
              T s = T(0);
              for (std::size_t e = 0; e < dh; ++e) s += qv(i, off + e) * kv(j, off + e);
              row[j] = j <= i ? s * scale : -std::numeric_limits<T>::infinity();
              mx = std::max(mx, row[j]);
            }
            T z = T(0);
            for (std::size_t j = 0; j < len; ++j) {
              row[j] = std::exp(row[j] - mx);
              z += row[j];
            }
            for (std::size_t j = 0; j < len; ++j) row[j] /= z;
            for (std::size_t j = 0; j <= i; ++j) {
              const T w = row[j];
              for (std::size_t e = 0; e < dh; ++e) out(i, off + e) += w * vv(j, off + e);
            }
            if (keep) std::copy(row.begin(), row.end(), p.row(i).begin());
          }
          if (keep) (*probs)[h] = std::move(p);
        }
        t.value_mut(self) = std::move(out);
      },
      [=](Tape<T>& t, std::size_t self) {
        const Matrix<T>& go = t.grad_mut(self);
        const Matrix<T>& qv = t.value(q);
        const Matrix<T>& kv = t.value(k);
        const Matrix<T>& vv = t.value(v);
        auto* gq = t.grad_slot(q);
        auto* gk = t.grad_slot(k);
        auto* gv = t.grad_slot(v);
        const std::size_t len = qv.rows(), dh = d / n_heads;
        const T scale = T(1) / std::sqrt(T(dh));
        std::vector<T> gp(len);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const Matrix<T>& p = (*probs)[h];
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < len; ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j <= i; ++j) {
              T s = T(0);
              for (std::size_t e = 0; e < dh; ++e) s += go(i, off + e) * vv(j, off + e);
              gp[j] = s;
              dot += s * p(i, j);
              if (gv)
                for (std::size_t e = 0; e < dh; ++e) (*gv)(j, off + e) += p(i, j) * go(i, off + e);
            }
            for (std::size_t j = 0; j <= i; ++j) {
              const T gs = p(i, j) * (gp[j] - dot) * scale;
              for (std::size_t e = 0; e < dh; ++e) {
                if (gq) (*gq)(i, off + e) += gs * kv(j, off + e);
                if (gk) (*gk)(j, off + e) += gs * qv(i, off + e);
              }
            }
          }
        }
      },
      scope);
}

/// Contrastive softmax cross-entropy over a list of 1 x 1 scores where the
/// first entry is the positive: logsumexp(s) - s[0].
template <typename T>
Var softmax_ce(Tape<T>& tp, std::vector<Var> scores, std::string_view scope = "loss") {
  ssmrank::detail::require(scores.size() >= 2, "ag::softmax_ce: need a positive and at least one negative");
  auto forward = [scores](Tape<T>& t, std::size_t self) {
    T mx = -std::numeric_limits<T>::infinity();
    for (Var s : scores) mx = std::max(mx, t.value(s)(0, 0));
    T z = T(0);
    for (Var s : scores) z += std::exp(t.value(s)(0, 0) - mx);
    t.value_mut(self) = Matrix<T>(1, 1, mx + std::log(z) - t.value(scores[0])(0, 0));
  };
  auto backward = [scores](Tape<T>& t, std::size_t self) {
    const T g = t.grad_mut(self)(0, 0);
    T mx = -std::numeric_limits<T>::infinity();
    for (Var s : scores) mx = std::max(mx, t.value(s)(0, 0));
    T z = T(0);
    for (Var s : scores) z += std::exp(t.value(s)(0, 0) - mx);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (auto* gs = t.grad_slot(scores[i])) {
        const T p = std::exp(t.value(scores[i])(0, 0) - mx) / z;
        (*gs)(0, 0) += g * (p - (i == 0 ? T(1) : T(0)));
      }
    }
  };
  return tp.push(scores, forward, backward, scope);
}

}  // namespace ssmrank::ag
