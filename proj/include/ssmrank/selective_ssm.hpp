#pragma once

// Input-dependent SSM layers.
//
// Selective scan: every channel d has its own diagonal A row (N entries);
// delta_t is per channel, B_t and C_t (N wide) are shared by all channels.
//
// SSD: channels are grouped into H heads of width P. A head's A is a negative
// scalar times identity, delta_t is one scalar per head, and B_t/C_t are N-wide
// per head (trace columns [h*N, (h+1)*N)). The chunked evaluator computes the
// same map with dense masked matrix products inside each chunk and a P x N
// carried state between chunks.
//
// Both use the zero-order-hold rule a_bar = exp(delta*a),
// b_bar = expm1(delta*a)/a * b.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ssmrank/error.hpp"
#include "ssmrank/matrix.hpp"

namespace ssmrank::ssm {

template <typename T>
T softplus(T v) {
  return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
}

template <typename T>
T sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

/// Discretized scalar decay and input factor for one (delta, a) pair, plus
/// the partial derivatives needed by the reverse pass.
template <typename T>
struct ZohFactor {
  T a_bar;   // exp(delta*a)
  T f;       // b_bar / b = expm1(delta*a) / a
  T df_da;   // d f / d a = delta^2 * phi(delta*a)

  ZohFactor(T delta, T a) {
    const T z = delta * a;
    a_bar = std::exp(z);
    f = std::abs(z) < T(1e-8) ? delta * (T(1) + z / T(2)) : std::expm1(z) / a;
    T phi;
    if (std::abs(z) < T(1e-3)) {
      phi = T(0.5) + z * (T(1) / T(3) + z * (T(0.125) + z * (T(1) / T(30) + z * (T(1) / T(144)))));
    } else {
      phi = (z * a_bar - std::expm1(z)) / (z * z);
    }
    df_da = delta * delta * phi;
  }
};

/// Counters filled in by the scan paths. The sequential paths allocate their
/// recurrent state exactly once; state_elements records its size.
struct ScanCounters {
  std::size_t state_elements = 0;
  std::size_t state_allocations = 0;
  std::size_t arithmetic_ops = 0;
};

template <typename T>
struct SelectiveProjections {
  Matrix<T> w_delta;   // D x D
  Matrix<T> b_delta;   // 1 x D
  Matrix<T> w_b;       // D x N
  Matrix<T> w_c;       // D x N
};

/// Per-timestep delta (positive), B_t and C_t streams.
template <typename T>
struct SelectiveTrace {
  Matrix<T> delta;
  Matrix<T> b;
  Matrix<T> c;
  std::size_t length() const noexcept { return delta.rows(); }
};

template <typename T>
SelectiveTrace<T> project_selective(const Matrix<T>& x, const SelectiveProjections<T>& proj) {
  const std::size_t d = x.cols();
  require_shape(proj.w_delta, d, d, "project_selective w_delta");
  require_shape(proj.b_delta, 1, d, "project_selective b_delta");
  detail::require(proj.w_b.rows() == d && proj.w_c.rows() == d && proj.w_b.cols() == proj.w_c.cols(),
                  "project_selective: w_b / w_c shapes disagree with D");
  SelectiveTrace<T> tr{matmul(x, proj.w_delta), matmul(x, proj.w_b), matmul(x, proj.w_c)};
  for (std::size_t t = 0; t < x.rows(); ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      T& v = tr.delta(t, j);
      v = softplus(v + proj.b_delta(0, j));
      if (!std::isfinite(v) || !(v > T(0)))
        throw NumericError("project_selective: non-finite or non-positive delta at timestep " +
                           std::to_string(t));
    }
    for (std::size_t j = 0; j < tr.b.cols(); ++j)
      if (!std::isfinite(tr.b(t, j)) || !std::isfinite(tr.c(t, j)))
        throw NumericError("project_selective: non-finite B/C at timestep " + std::to_string(t));
  }
  return tr;
}

/// Reference recurrence for the selective scan. When `states` is given it
/// receives h_t for every t as an L x (D*N) matrix.
template <typename T>
Matrix<T> selective_scan_sequential(const Matrix<T>& x, const SelectiveTrace<T>& tr,
                                    const Matrix<T>& a_diag, ScanCounters* counters = nullptr,
                                    Matrix<T>* states = nullptr) {
  const std::size_t len = x.rows(), d_ch = x.cols(), n_st = a_diag.cols();
  require_shape(a_diag, d_ch, n_st, "selective_scan a_diag");
  require_shape(tr.delta, len, d_ch, "selective_scan delta");
  require_shape(tr.b, len, n_st, "selective_scan B");
  require_shape(tr.c, len, n_st, "selective_scan C");
  Matrix<T> y(len, d_ch);
  std::vector<T> h(d_ch * n_st, T(0));
  if (counters) {
    counters->state_elements = std::max(counters->state_elements, h.size());
    ++counters->state_allocations;
  }
  if (states) *states = Matrix<T>(len, d_ch * n_st);
  for (std::size_t t = 0; t < len; ++t) {
    const T* bt = tr.b.data() + t * n_st;
    const T* ct = tr.c.data() + t * n_st;
    for (std::size_t d = 0; d < d_ch; ++d) {
      const T delta = tr.delta(t, d), xv = x(t, d);
      T* hd = h.data() + d * n_st;
      T acc = T(0);
      for (std::size_t n = 0; n < n_st; ++n) {
        const ZohFactor<T> z(delta, a_diag(d, n));
        hd[n] = z.a_bar * hd[n] + z.f * bt[n] * xv;
        acc += ct[n] * hd[n];
      }
      y(t, d) = acc;
    }
    if (states) std::copy(h.begin(), h.end(), states->data() + t * h.size());
    // per (d, n): exp, expm1/a, 2 mul + add for h, mul + add for y
    if (counters) counters->arithmetic_ops += d_ch * n_st * 7;
  }
  return y;
}

template <typename T>
struct SelectiveScanGrads {
  Matrix<T> x, delta, a_diag, b, c;
};

/// Reverse pass of selective_scan_sequential given its recorded states.
template <typename T>
SelectiveScanGrads<T> selective_scan_backward(const Matrix<T>& x, const SelectiveTrace<T>& tr,
                                              const Matrix<T>& a_diag, const Matrix<T>& states,
                                              const Matrix<T>& gy) {
  const std::size_t len = x.rows(), d_ch = x.cols(), n_st = a_diag.cols();
  require_shape(states, len, d_ch * n_st, "selective_scan_backward states");
  require_shape(gy, len, d_ch, "selective_scan_backward upstream");
  SelectiveScanGrads<T> g{Matrix<T>(len, d_ch), Matrix<T>(len, d_ch), Matrix<T>(d_ch, n_st),
                          Matrix<T>(len, n_st), Matrix<T>(len, n_st)};
  std::vector<T> gh(d_ch * n_st, T(0));  // dL/dh_t flowing back through a_bar_{t+1}
  for (std::size_t t = len; t-- > 0;) {
    const T* ht = states.data() + t * d_ch * n_st;
    const T* hprev = t > 0 ? states.data() + (t - 1) * d_ch * n_st : nullptr;
    const T* bt = tr.b.data() + t * n_st;
    const T* ct = tr.c.data() + t * n_st;
    for (std::size_t d = 0; d < d_ch; ++d) {
      const T delta = tr.delta(t, d), xv = x(t, d), gyv = gy(t, d);
      T gx = T(0), gdelta = T(0);
      for (std::size_t n = 0; n < n_st; ++n) {
        const std::size_t i = d * n_st + n;
        const T a = a_diag(d, n);
        const ZohFactor<T> z(delta, a);
        g.c(t, n) += gyv * ht[i];
        const T gtot = gh[i] + gyv * ct[n];
        const T hp = hprev ? hprev[i] : T(0);
        const T g_abar = gtot * hp;
        const T g_f = gtot * bt[n] * xv;
        gx += gtot * z.f * bt[n];
        g.b(t, n) += gtot * z.f * xv;
        gdelta += g_abar * a * z.a_bar + g_f * z.a_bar;
        g.a_diag(d, n) += g_abar * delta * z.a_bar + g_f * z.df_da;
        gh[i] = gtot * z.a_bar;
      }
      g.x(t, d) = gx;
      g.delta(t, d) = gdelta;
    }
  }
  return g;
}

/// H heads of width P; a_scalar[h] < 0.
template <typename T>
struct SsdHeadParams {
  std::size_t num_heads = 1;
  std::size_t head_dim = 1;
  std::size_t state_size = 1;
  std::vector<T> a_scalar;

  std::size_t channels() const noexcept { return num_heads * head_dim; }

  void validate(std::size_t d_channels) const {
    if (num_heads == 0 || head_dim == 0 || state_size == 0)
      throw ParameterError("SsdHeadParams: H, P and N must be positive");
    if (num_heads * head_dim != d_channels)
      throw ParameterError("SsdHeadParams: D != P * H (" + std::to_string(d_channels) +
                           " vs " + std::to_string(head_dim) + "*" + std::to_string(num_heads) + ")");
    if (a_scalar.size() != num_heads) throw ParameterError("SsdHeadParams: need one a per head");
    for (T a : a_scalar)
      if (!(a < T(0))) throw ParameterError("SsdHeadParams: a_scalar must be negative");
  }
};

struct ChunkPlan {
  std::size_t chunk_len = 16;

  std::size_t num_chunks(std::size_t len) const {
    return chunk_len == 0 ? 0 : (len + chunk_len - 1) / chunk_len;
  }
  std::size_t begin(std::size_t chunk) const { return chunk * chunk_len; }
  std::size_t end(std::size_t chunk, std::size_t len) const {
    return std::min(len, (chunk + 1) * chunk_len);
  }
};

namespace detail {

template <typename T>
void check_ssd_inputs(const Matrix<T>& x, const SsdHeadParams<T>& heads, const SelectiveTrace<T>& tr) {
  heads.validate(x.cols());
  const std::size_t len = x.rows();
  require_shape(tr.delta, len, heads.num_heads, "ssd delta");
  require_shape(tr.b, len, heads.num_heads * heads.state_size, "ssd B");
  require_shape(tr.c, len, heads.num_heads * heads.state_size, "ssd C");
  for (T v : tr.delta.storage())
    if (!(v > T(0)) || !std::isfinite(v)) throw ParameterError("ssd: delta must be positive");
}

}  // namespace detail

/// Plain per-timestep recurrence. `states`, when given, receives the L x (H*P*N)
/// state history (head-major, then p, then n).
template <typename T>
Matrix<T> ssd_forward_sequential(const Matrix<T>& x, const SsdHeadParams<T>& heads,
                                 const SelectiveTrace<T>& tr, ScanCounters* counters = nullptr,
                                 Matrix<T>* states = nullptr) {
  detail::check_ssd_inputs(x, heads, tr);
  const std::size_t len = x.rows(), n_h = heads.num_heads, p_dim = heads.head_dim,
                    n_st = heads.state_size;
  const std::size_t per_head = p_dim * n_st;
  Matrix<T> y(len, x.cols());
  std::vector<T> s(n_h * per_head, T(0));
  if (counters) {
    counters->state_elements = std::max(counters->state_elements, s.size());
    ++counters->state_allocations;
  }
  if (states) *states = Matrix<T>(len, s.size());
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t h = 0; h < n_h; ++h) {
      const ZohFactor<T> z(tr.delta(t, h), heads.a_scalar[h]);
      const T* bt = tr.b.data() + t * tr.b.cols() + h * n_st;
      const T* ct = tr.c.data() + t * tr.c.cols() + h * n_st;
      T* sh = s.data() + h * per_head;
      for (std::size_t p = 0; p < p_dim; ++p) {
        const T u = z.f * x(t, h * p_dim + p);
        T* sp = sh + p * n_st;
        T acc = T(0);
        for (std::size_t n = 0; n < n_st; ++n) {
          sp[n] = z.a_bar * sp[n] + bt[n] * u;
          acc += ct[n] * sp[n];
        }
        y(t, h * p_dim + p) = acc;
      }
    }
    if (states) std::copy(s.begin(), s.end(), states->data() + t * s.size());
    if (counters) counters->arithmetic_ops += n_h * (2 + p_dim * (1 + 5 * n_st));
  }
  return y;
}

/// Chunked evaluation: inside a chunk of length q the outputs are
///   Y = (L o C B^T) U + diag(exp(cum)) C S^T
/// with L[i][j] = exp(cum_i - cum_j) for j <= i, U = f * x, and the carried
/// P x N state S advanced once per chunk.
///
/// `boundaries`, when given, receives the state at the start of every chunk as
/// a num_chunks x (H*P*N) matrix; ssd_backward_chunked consumes it.
template <typename T>
Matrix<T> ssd_forward_chunked(const Matrix<T>& x, const SsdHeadParams<T>& heads,
                              const SelectiveTrace<T>& tr, const ChunkPlan& plan,
                              ScanCounters* counters = nullptr, Matrix<T>* boundaries = nullptr) {
  if (plan.chunk_len < 1) throw ContractError("ssd_forward_chunked: chunk_len must be >= 1");
  detail::check_ssd_inputs(x, heads, tr);
  const std::size_t len = x.rows(), n_h = heads.num_heads, p_dim = heads.head_dim,
                    n_st = heads.state_size, q_max = plan.chunk_len;
  Matrix<T> y(len, x.cols());
  std::vector<T> state(p_dim * n_st);
  std::vector<T> cum(q_max), f(q_max), m(q_max * q_max), u(q_max * p_dim), decay_out(q_max);
  if (counters) {
    counters->state_elements = std::max(counters->state_elements, n_h * state.size());
    ++counters->state_allocations;
  }
  if (boundaries) *boundaries = Matrix<T>(plan.num_chunks(len), n_h * state.size());
  for (std::size_t h = 0; h < n_h; ++h) {
    std::fill(state.begin(), state.end(), T(0));
    const T a = heads.a_scalar[h];
    for (std::size_t ch = 0; ch < plan.num_chunks(len); ++ch) {
      const std::size_t t0 = plan.begin(ch), q = plan.end(ch, len) - t0;
      if (boundaries)
        std::copy(state.begin(), state.end(), boundaries->data() + ch * boundaries->cols() + h * state.size());
      T run = T(0);
      for (std::size_t i = 0; i < q; ++i) {
        const ZohFactor<T> z(tr.delta(t0 + i, h), a);
        run += tr.delta(t0 + i, h) * a;
        cum[i] = run;
        f[i] = z.f;
        for (std::size_t p = 0; p < p_dim; ++p) u[i * p_dim + p] = z.f * x(t0 + i, h * p_dim + p);
      }
      // masked decay-weighted C B^T
      for (std::size_t i = 0; i < q; ++i) {
        const T* ci = tr.c.data() + (t0 + i) * tr.c.cols() + h * n_st;
        for (std::size_t j = 0; j <= i; ++j) {
          const T* bj = tr.b.data() + (t0 + j) * tr.b.cols() + h * n_st;
          T g = T(0);
          for (std::size_t n = 0; n < n_st; ++n) g += ci[n] * bj[n];
          m[i * q_max + j] = g * std::exp(cum[i] - cum[j]);
        }
      }
      for (std::size_t i = 0; i < q; ++i) {
        const T* ci = tr.c.data() + (t0 + i) * tr.c.cols() + h * n_st;
        const T carry = std::exp(cum[i]);
        for (std::size_t p = 0; p < p_dim; ++p) {
          T acc = T(0);
          for (std::size_t j = 0; j <= i; ++j) acc += m[i * q_max + j] * u[j * p_dim + p];
          const T* sp = state.data() + p * n_st;
          T inter = T(0);
          for (std::size_t n = 0; n < n_st; ++n) inter += ci[n] * sp[n];
          y(t0 + i, h * p_dim + p) = acc + carry * inter;
        }
      }
      // advance the carried state to the chunk end
      const T total = std::exp(cum[q - 1]);
      for (std::size_t j = 0; j < q; ++j) decay_out[j] = std::exp(cum[q - 1] - cum[j]);
      for (std::size_t p = 0; p < p_dim; ++p) {
        T* sp = state.data() + p * n_st;
        for (std::size_t n = 0; n < n_st; ++n) sp[n] *= total;
        for (std::size_t j = 0; j < q; ++j) {
          const T w = decay_out[j] * u[j * p_dim + p];
          const T* bj = tr.b.data() + (t0 + j) * tr.b.cols() + h * n_st;
          for (std::size_t n = 0; n < n_st; ++n) sp[n] += w * bj[n];
        }
      }
      if (counters)
        counters->arithmetic_ops += q * (4 + p_dim) + q * (q + 1) / 2 * (2 * n_st + 2) +
                                    q * p_dim * (4 * n_st + (q + 1)) + p_dim * n_st * (1 + 3 * q);
    }
  }
  return y;
}

template <typename T>
struct SsdGrads {
  Matrix<T> x, delta, b, c;
  std::vector<T> a_scalar;
};

namespace detail {

// One reverse step at time t. `st` / `sprev` point at the H*P*N state after
// and before step t (sprev may be null for t = 0); gs carries dL/dS.
template <typename T>
void ssd_reverse_step(const Matrix<T>& x, const SsdHeadParams<T>& heads, const SelectiveTrace<T>& tr,
                      const Matrix<T>& gy, std::size_t t, const T* st, const T* sprev,
                      std::vector<T>& gs, SsdGrads<T>& g) {
  const std::size_t n_h = heads.num_heads, p_dim = heads.head_dim, n_st = heads.state_size,
                    per_head = p_dim * n_st;
  for (std::size_t h = 0; h < n_h; ++h) {
    const T a = heads.a_scalar[h], delta = tr.delta(t, h);
    const ZohFactor<T> z(delta, a);
    const T* bt = tr.b.data() + t * tr.b.cols() + h * n_st;
    const T* ct = tr.c.data() + t * tr.c.cols() + h * n_st;
    T* gbt = g.b.data() + t * g.b.cols() + h * n_st;
    T* gct = g.c.data() + t * g.c.cols() + h * n_st;
    T g_abar = T(0), g_f = T(0);
    for (std::size_t p = 0; p < p_dim; ++p) {
      const std::size_t col = h * p_dim + p;
      const T gyv = gy(t, col), xv = x(t, col);
      T gx = T(0);
      for (std::size_t n = 0; n < n_st; ++n) {
        const std::size_t i = h * per_head + p * n_st + n;
        gct[n] += gyv * st[i];
        const T gtot = gs[i] + gyv * ct[n];
        if (sprev) g_abar += gtot * sprev[i];
        g_f += gtot * bt[n] * xv;
        gx += gtot * bt[n];
        gbt[n] += gtot * z.f * xv;
        gs[i] = gtot * z.a_bar;
      }
      g.x(t, col) = gx * z.f;
    }
    g.delta(t, h) = g_abar * a * z.a_bar + g_f * z.a_bar;
    g.a_scalar[h] += g_abar * delta * z.a_bar + g_f * z.df_da;
  }
}

template <typename T>
SsdGrads<T> ssd_grads_like(const Matrix<T>& x, const SsdHeadParams<T>& heads, const SelectiveTrace<T>& tr) {
  const std::size_t len = x.rows();
  return SsdGrads<T>{Matrix<T>(len, x.cols()), Matrix<T>(len, heads.num_heads), Matrix<T>(len, tr.b.cols()),
                     Matrix<T>(len, tr.c.cols()), std::vector<T>(heads.num_heads, T(0))};
}

}  // namespace detail

/// Reverse pass of the SSD map, driven by the full sequential state history.
template <typename T>
SsdGrads<T> ssd_backward(const Matrix<T>& x, const SsdHeadParams<T>& heads,
                         const SelectiveTrace<T>& tr, const Matrix<T>& states, const Matrix<T>& gy) {
  detail::check_ssd_inputs(x, heads, tr);
  const std::size_t len = x.rows(), width = heads.num_heads * heads.head_dim * heads.state_size;
  require_shape(states, len, width, "ssd_backward states");
  require_shape(gy, len, x.cols(), "ssd_backward upstream");
  auto g = detail::ssd_grads_like(x, heads, tr);
  std::vector<T> gs(width, T(0));
  for (std::size_t t = len; t-- > 0;)
    detail::ssd_reverse_step(x, heads, tr, gy, t, states.data() + t * width,
                             t > 0 ? states.data() + (t - 1) * width : nullptr, gs, g);
  return g;
}

/// Reverse pass from chunk-boundary states: each chunk's per-step states are
/// recomputed from its boundary before stepping backwards through it.
template <typename T>
SsdGrads<T> ssd_backward_chunked(const Matrix<T>& x, const SsdHeadParams<T>& heads,
                                 const SelectiveTrace<T>& tr, const Matrix<T>& boundaries,
                                 const ChunkPlan& plan, const Matrix<T>& gy) {
  detail::check_ssd_inputs(x, heads, tr);
  const std::size_t len = x.rows(), n_h = heads.num_heads, p_dim = heads.head_dim,
                    n_st = heads.state_size, per_head = p_dim * n_st, width = n_h * per_head;
  require_shape(boundaries, plan.num_chunks(len), width, "ssd_backward_chunked boundaries");
  require_shape(gy, len, x.cols(), "ssd_backward_chunked upstream");
  auto g = detail::ssd_grads_like(x, heads, tr);
  std::vector<T> gs(width, T(0));
  Matrix<T> local(plan.chunk_len, width);
  for (std::size_t ch = plan.num_chunks(len); ch-- > 0;) {
    const std::size_t t0 = plan.begin(ch), t1 = plan.end(ch, len);
    const T* start = boundaries.data() + ch * width;
    for (std::size_t t = t0; t < t1; ++t) {
      const T* prev = t == t0 ? start : local.data() + (t - t0 - 1) * width;
      T* cur = local.data() + (t - t0) * width;
      for (std::size_t h = 0; h < n_h; ++h) {
        const ZohFactor<T> z(tr.delta(t, h), heads.a_scalar[h]);
        const T* bt = tr.b.data() + t * tr.b.cols() + h * n_st;
        for (std::size_t p = 0; p < p_dim; ++p) {
          const T u = z.f * x(t, h * p_dim + p);
          const std::size_t o = h * per_head + p * n_st;
          for (std::size_t n = 0; n < n_st; ++n) cur[o + n] = z.a_bar * prev[o + n] + bt[n] * u;
        }
      }
    }
    for (std::size_t t = t1; t-- > t0;) {
      const T* prev = t == t0 ? (t0 == 0 ? nullptr : start) : local.data() + (t - t0 - 1) * width;
      detail::ssd_reverse_step(x, heads, tr, gy, t, local.data() + (t - t0) * width, prev, gs, g);
    }
  }
  return g;
}

}  // namespace ssmrank::ssm
