#pragma once

// Stacked causal sequence models for cross-encoder scoring.
//
// Every block is pre-normalized and residual. The Mamba-style blocks expand
// the width to E = expand_factor * D, run a depthwise causal convolution and a
// selective SSM core, gate by silu(z) and project back to D. The attention
// block is the causal softmax baseline with a feed-forward sublayer; it relies
// on learned absolute position embeddings added after the token embedding.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssmrank/autograd.hpp"
#include "ssmrank/config.hpp"
#include "ssmrank/error.hpp"
#include "ssmrank/matrix.hpp"
#include "ssmrank/profiler.hpp"

namespace ssmrank {

enum class BlockKind { kMamba1, kMamba2, kAttention };

inline std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::kMamba1: return "mamba1";
    case BlockKind::kMamba2: return "mamba2";
    case BlockKind::kAttention: return "attention";
  }
  return "?";
}

inline BlockKind parse_block_kind(const std::string& s) {
  if (s == "mamba1") return BlockKind::kMamba1;
  if (s == "mamba2" || s == "ssd") return BlockKind::kMamba2;
  if (s == "attention") return BlockKind::kAttention;
  throw InputError("unknown block kind '" + s + "' (expected mamba1, mamba2 or attention)");
}

struct ModelConfig {
  std::size_t vocab_size = 259;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  BlockKind block_kind = BlockKind::kMamba2;
  std::size_t state_size = 64;      // see default_state_size
  std::size_t head_dim = 4;         // SSD head width P
  std::size_t n_heads = 4;          // attention heads
  std::size_t expand_factor = 2;
  std::size_t local_conv_width = 4;
  std::size_t max_seq_len = 2048;
  std::size_t chunk_len = 16;
  bool chunked = true;              // SSD forward via the chunked evaluator
  std::size_t ffn_mult = 4;
  int eos_id = 257;
  double init_std = 0.02;

  /// 16 for Mamba-1 layers, 64 for SSD layers; irrelevant for attention.
  static std::size_t default_state_size(BlockKind k) { return k == BlockKind::kMamba1 ? 16 : 64; }

  static ModelConfig for_kind(BlockKind k) {
    ModelConfig c;
    c.block_kind = k;
    c.state_size = default_state_size(k);
    return c;
  }

  std::size_t inner() const { return expand_factor * d_model; }
  std::size_t ssd_heads() const { return inner() / head_dim; }

  void validate() const {
    auto pos = [](std::size_t v, const char* what) {
      if (v == 0) throw ParameterError(std::string("ModelConfig: ") + what + " must be positive");
    };
    pos(vocab_size, "vocab_size");
    pos(d_model, "d_model");
    pos(n_layers, "n_layers");
    pos(state_size, "state_size");
    pos(head_dim, "head_dim");
    pos(n_heads, "n_heads");
    pos(expand_factor, "expand_factor");
    pos(local_conv_width, "local_conv_width");
    pos(max_seq_len, "max_seq_len");
    pos(chunk_len, "chunk_len");
    pos(ffn_mult, "ffn_mult");
    if (block_kind == BlockKind::kAttention && d_model % n_heads != 0)
      throw ParameterError("ModelConfig: d_model must be divisible by n_heads");
    if (block_kind == BlockKind::kMamba2 && inner() % head_dim != 0)
      throw ParameterError("ModelConfig: expand_factor*d_model must be divisible by head_dim");
    if (eos_id < 0 || static_cast<std::size_t>(eos_id) >= vocab_size)
      throw ParameterError("ModelConfig: eos_id outside vocabulary");
    if (!(init_std > 0.0)) throw ParameterError("ModelConfig: init_std must be positive");
  }

  /// Reads recognised keys, leaving unrelated ones for other consumers.
  static ModelConfig from_kv(KeyValueConfig& kv) { return from_kv(kv, ModelConfig{}); }
  static ModelConfig from_kv(KeyValueConfig& kv, const ModelConfig& base) {
    ModelConfig c = base;
    c.vocab_size = kv.get_uint("vocab_size", c.vocab_size);
    c.d_model = kv.get_uint("d_model", c.d_model);
    c.n_layers = kv.get_uint("n_layers", c.n_layers);
    if (kv.has("block_kind")) {
      c.block_kind = parse_block_kind(kv.get_string("block_kind", ""));
      c.state_size = default_state_size(c.block_kind);
    }
    c.state_size = kv.get_uint("state_size", c.state_size);
    c.head_dim = kv.get_uint("head_dim", c.head_dim);
    c.n_heads = kv.get_uint("n_heads", c.n_heads);
    c.expand_factor = kv.get_uint("expand_factor", c.expand_factor);
    c.local_conv_width = kv.get_uint("local_conv_width", c.local_conv_width);
    c.max_seq_len = kv.get_uint("max_seq_len", c.max_seq_len);
    c.chunk_len = kv.get_uint("chunk_len", c.chunk_len);
    c.chunked = kv.get_bool("chunked", c.chunked);
    c.ffn_mult = kv.get_uint("ffn_mult", c.ffn_mult);
    c.eos_id = static_cast<int>(kv.get_uint("eos_id", static_cast<std::uint64_t>(c.eos_id)));
    c.init_std = kv.get_double("init_std", c.init_std);
    c.validate();
    return c;
  }

  std::vector<std::pair<std::string, std::string>> to_kv() const {
    auto u = [](std::size_t v) { return std::to_string(v); };
    std::ostringstream d;
    d.precision(17);
    d << init_std;
    return {{"vocab_size", u(vocab_size)},       {"d_model", u(d_model)},
            {"n_layers", u(n_layers)},           {"block_kind", to_string(block_kind)},
            {"state_size", u(state_size)},       {"head_dim", u(head_dim)},
            {"n_heads", u(n_heads)},             {"expand_factor", u(expand_factor)},
            {"local_conv_width", u(local_conv_width)}, {"max_seq_len", u(max_seq_len)},
            {"chunk_len", u(chunk_len)},         {"chunked", chunked ? "true" : "false"},
            {"ffn_mult", u(ffn_mult)},           {"eos_id", std::to_string(eos_id)},
            {"init_std", d.str()}};
  }
};

template <typename T>
struct Param {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool decay = true;  // subject to AdamW weight decay
};

/// theta: every trainable array with a same-shaped gradient slot.
template <typename T>
class ModelParams {
 public:
  std::size_t add(std::string name, Matrix<T> value, bool decay) {
    if (index_.count(name)) throw ContractError("ModelParams: duplicate parameter " + name);
    index_[name] = params_.size();
    Matrix<T> g(value.rows(), value.cols());
    params_.push_back(Param<T>{std::move(name), std::move(value), std::move(g), decay});
    return params_.size() - 1;
  }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ModelParams: no parameter named " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Param<T>& operator[](std::size_t i) { return params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return params_[i]; }
  Param<T>& at(const std::string& name) { return params_[index(name)]; }
  const Param<T>& at(const std::string& name) const { return params_[index(name)]; }
  std::size_t size() const noexcept { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(T(0));
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>(), p.decay);
    return out;
  }

 private:
  std::vector<Param<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l) + "."; }

/// Closed-form trainable scalar count for a configuration.
inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, e = c.inner(), n = c.state_size, w = c.local_conv_width;
  std::size_t per_layer = 0;
  switch (c.block_kind) {
    case BlockKind::kMamba1:
      per_layer = d + d * 2 * e + w * e + e + e * e + e + 2 * e * n + e * n + e + e * d;
      break;
    case BlockKind::kMamba2: {
      const std::size_t h = c.ssd_heads();
      per_layer = d + d * (2 * e + 2 * h * n + h) + w * e + e + h + h + e + e * d;
      break;
    }
    case BlockKind::kAttention: {
      const std::size_t f = c.ffn_mult * d;
      per_layer = d + d * 3 * d + 3 * d + d * d + d + d + d * f + f + f * d + d;
      break;
    }
  }
  std::size_t total = c.vocab_size * d + c.n_layers * per_layer + d + d + 1;
  if (c.block_kind == BlockKind::kAttention) total += c.max_seq_len * d;
  return total;
}

namespace detail {

template <typename T, typename Rng>
Matrix<T> normal_matrix(std::size_t r, std::size_t c, double std, Rng& rng) {
  std::normal_distribution<double> nd(0.0, std);
  Matrix<T> m(r, c);
  for (auto& v : m.storage()) v = static_cast<T>(nd(rng));
  return m;
}

// Inverse softplus of a step size drawn log-uniformly in [1e-3, 1e-1].
template <typename Rng>
double dt_bias_sample(Rng& rng) {
  std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
  const double dt = std::exp(u(rng));
  return dt + std::log(-std::expm1(-dt));
}

}  // namespace detail

/// Scaled-normal projections, zero biases, unit gains, a_log = log(n+1).
template <typename T>
ModelParams<T> init_params(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  ModelParams<T> p;
  const std::size_t d = c.d_model, e = c.inner(), n = c.state_size, w = c.local_conv_width;
  const double sd = c.init_std, conv_sd = 1.0 / std::sqrt(double(w));
  auto ones = [](std::size_t k) { return Matrix<T>(1, k, T(1)); };
  auto zeros = [](std::size_t r, std::size_t k) { return Matrix<T>(r, k); };
  p.add("embedding", detail::normal_matrix<T>(c.vocab_size, d, sd, rng), true);
  if (c.block_kind == BlockKind::kAttention)
    p.add("pos_embedding", detail::normal_matrix<T>(c.max_seq_len, d, sd, rng), true);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = layer_prefix(l);
    switch (c.block_kind) {
      case BlockKind::kMamba1: {
        p.add(pre + "norm.gain", ones(d), false);
        p.add(pre + "in_proj.weight", detail::normal_matrix<T>(d, 2 * e, sd, rng), true);
        p.add(pre + "conv.weight", detail::normal_matrix<T>(w, e, conv_sd, rng), true);
        p.add(pre + "conv.bias", zeros(1, e), false);
        p.add(pre + "dt_proj.weight", detail::normal_matrix<T>(e, e, sd, rng), true);
        Matrix<T> dtb(1, e);
        for (auto& v : dtb.storage()) v = static_cast<T>(detail::dt_bias_sample(rng));
        p.add(pre + "dt_proj.bias", std::move(dtb), false);
        p.add(pre + "b_proj.weight", detail::normal_matrix<T>(e, n, sd, rng), true);
        p.add(pre + "c_proj.weight", detail::normal_matrix<T>(e, n, sd, rng), true);
        Matrix<T> alog(e, n);
        for (std::size_t i = 0; i < e; ++i)
          for (std::size_t j = 0; j < n; ++j) alog(i, j) = static_cast<T>(std::log(double(j + 1)));
        p.add(pre + "a_log", std::move(alog), false);
        p.add(pre + "d_skip", ones(e), false);
        p.add(pre + "out_proj.weight", detail::normal_matrix<T>(e, d, sd, rng), true);
        break;
      }
      case BlockKind::kMamba2: {
        const std::size_t h = c.ssd_heads();
        p.add(pre + "norm.gain", ones(d), false);
        p.add(pre + "in_proj.weight", detail::normal_matrix<T>(d, 2 * e + 2 * h * n + h, sd, rng), true);
        p.add(pre + "conv.weight", detail::normal_matrix<T>(w, e, conv_sd, rng), true);
        p.add(pre + "conv.bias", zeros(1, e), false);
        Matrix<T> dtb(1, h);
        for (auto& v : dtb.storage()) v = static_cast<T>(detail::dt_bias_sample(rng));
        p.add(pre + "dt_bias", std::move(dtb), false);
        Matrix<T> alog(1, h);
        for (std::size_t i = 0; i < h; ++i) alog(0, i) = static_cast<T>(std::log(double(i + 1)));
        p.add(pre + "a_log", std::move(alog), false);
        p.add(pre + "d_skip", ones(e), false);
        p.add(pre + "out_proj.weight", detail::normal_matrix<T>(e, d, sd, rng), true);
        break;
      }
      case BlockKind::kAttention: {
        const std::size_t f = c.ffn_mult * d;
        p.add(pre + "attn_norm.gain", ones(d), false);
        p.add(pre + "qkv.weight", detail::normal_matrix<T>(d, 3 * d, sd, rng), true);
        p.add(pre + "qkv.bias", zeros(1, 3 * d), false);
        p.add(pre + "attn_out.weight", detail::normal_matrix<T>(d, d, sd, rng), true);
        p.add(pre + "attn_out.bias", zeros(1, d), false);
        p.add(pre + "ffn_norm.gain", ones(d), false);
        p.add(pre + "ffn_in.weight", detail::normal_matrix<T>(d, f, sd, rng), true);
        p.add(pre + "ffn_in.bias", zeros(1, f), false);
        p.add(pre + "ffn_out.weight", detail::normal_matrix<T>(f, d, sd, rng), true);
        p.add(pre + "ffn_out.bias", zeros(1, d), false);
        break;
      }
    }
  }
  p.add("final_norm.gain", ones(d), false);
  p.add("score.weight", detail::normal_matrix<T>(d, 1, sd, rng), true);
  p.add("score.bias", zeros(1, 1), false);
  return p;
}

/// Builds the model's forward computation on a tape. Parameter leaves are
/// created once per tape and shared by every sequence recorded on it.
template <typename T>
class ModelGraph {
 public:
  ModelGraph(ag::Tape<T>& tape, const ModelParams<T>& params, const ModelConfig& config)
      : tape_(tape), params_(params), config_(config), leaves_(params.size()) {
    config_.validate();
  }

  ag::Var param(const std::string& name) { return param(params_.index(name)); }
  ag::Var param(std::size_t idx) {
    if (!leaves_[idx]) leaves_[idx] = tape_.leaf(params_[idx].value, true);
    return *leaves_[idx];
  }

  /// Creates every parameter leaf now. Returns the tape size afterwards, a
  /// point the tape can be truncated back to between sequences.
  std::size_t bind_parameters() {
    for (std::size_t i = 0; i < leaves_.size(); ++i) param(i);
    return tape_.size();
  }

  /// Final-normalized hidden states, L x D.
  ag::Var hidden(std::span<const int> ids) {
    if (ids.empty()) throw InputError("forward: empty token sequence");
    if (ids.size() > config_.max_seq_len)
      throw InputError("forward: sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                       std::to_string(config_.max_seq_len));
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= config_.vocab_size)
        throw InputError("forward: token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                         " outside vocabulary of " + std::to_string(config_.vocab_size));
    std::vector<int> idv(ids.begin(), ids.end());
    ag::Var x = ag::embedding(tape_, param("embedding"), idv);
    if (config_.block_kind == BlockKind::kAttention) {
      std::vector<int> pos(ids.size());
      for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
      x = ag::add(tape_, x, ag::embedding(tape_, param("pos_embedding"), pos), "embedding");
    }
    for (std::size_t l = 0; l < config_.n_layers; ++l) x = block(x, l);
    return ag::rmsnorm(tape_, x, param("final_norm.gain"));
  }

  ag::Var block(ag::Var x, std::size_t layer) {
    switch (config_.block_kind) {
      case BlockKind::kMamba1: {
        auto s = profile_scope(tape_.profiler(), "block.mamba1");
        return mamba1_block(x, layer_prefix(layer));
      }
      case BlockKind::kMamba2: {
        auto s = profile_scope(tape_.profiler(), "block.mamba2");
        return mamba2_block(x, layer_prefix(layer));
      }
      case BlockKind::kAttention: {
        auto s = profile_scope(tape_.profiler(), "block.attention");
        return attention_block(x, layer_prefix(layer));
      }
    }
    return x;
  }

  /// Linear head applied to row `pos` of the hidden states (1 x 1).
  ag::Var score_at(ag::Var hidden, std::size_t pos) {
    ag::Var row = ag::take_row(tape_, hidden, pos, "score_head");
    return ag::add_row(tape_, ag::matmul(tape_, row, param("score.weight"), "score_head"), param("score.bias"),
                       "score_head");
  }

  /// Scores a sequence that must end with the end-of-sequence id.
  ag::Var score(std::span<const int> ids) {
    if (ids.empty() || ids.back() != config_.eos_id)
      throw ContractError("score: input must end with the end-of-sequence id " + std::to_string(config_.eos_id));
    return score_at(hidden(ids), ids.size() - 1);
  }

  /// Adds every parameter leaf's gradient into the parameter's grad slot.
  void accumulate_grads(ModelParams<T>& params) const {
    if (&params != &params_) throw ContractError("accumulate_grads: parameters differ from the recorded ones");
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      if (!leaves_[i]) continue;
      const Matrix<T>& g = tape_.grad(*leaves_[i]);
      if (g.empty()) continue;
      Matrix<T>& dst = params[i].grad;
      for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
    }
  }

  const ModelConfig& config() const noexcept { return config_; }
  ag::Tape<T>& tape() noexcept { return tape_; }

 private:
  // softplus underflows to 0 or overflows once activations blow up.
  ag::Var checked_step(ag::Var dt, const std::string& pre) {
    for (T v : tape_.value(dt).storage())
      if (!(v > T(0)) || !std::isfinite(v)) throw NumericError(pre.substr(0, pre.size() - 1) + ": step size is not positive and finite");
    return dt;
  }

  ag::Var mamba1_block(ag::Var x, const std::string& pre) {
    auto& t = tape_;
    const std::size_t e = config_.inner();
    ag::Var xn = ag::rmsnorm(t, x, param(pre + "norm.gain"));
    ag::Var xz = ag::matmul(t, xn, param(pre + "in_proj.weight"));
    ag::Var xs = ag::slice_cols(t, xz, 0, e);
    ag::Var z = ag::slice_cols(t, xz, e, 2 * e);
    ag::Var xc = ag::silu(t, ag::causal_conv(t, xs, param(pre + "conv.weight"), param(pre + "conv.bias")));
    ag::Var dt = checked_step(ag::softplus(
        t, ag::add_row(t, ag::matmul(t, xc, param(pre + "dt_proj.weight")), param(pre + "dt_proj.bias"))), pre);
    ag::Var b = ag::matmul(t, xc, param(pre + "b_proj.weight"));
    ag::Var c = ag::matmul(t, xc, param(pre + "c_proj.weight"));
    ag::Var a = ag::neg_exp(t, param(pre + "a_log"));
    ag::Var y = ag::selective_scan(t, xc, dt, a, b, c);
    y = ag::add(t, y, ag::mul_row(t, xc, param(pre + "d_skip")));
    y = ag::mul(t, y, ag::silu(t, z));
    return ag::add(t, x, ag::matmul(t, y, param(pre + "out_proj.weight")));
  }

  ag::Var mamba2_block(ag::Var x, const std::string& pre) {
    auto& t = tape_;
    const std::size_t e = config_.inner(), h = config_.ssd_heads(), n = config_.state_size;
    ag::Var xn = ag::rmsnorm(t, x, param(pre + "norm.gain"));
    ag::Var proj = ag::matmul(t, xn, param(pre + "in_proj.weight"));
    ag::Var z = ag::slice_cols(t, proj, 0, e);
    ag::Var xs = ag::slice_cols(t, proj, e, 2 * e);
    ag::Var b = ag::slice_cols(t, proj, 2 * e, 2 * e + h * n);
    ag::Var c = ag::slice_cols(t, proj, 2 * e + h * n, 2 * e + 2 * h * n);
    ag::Var dtr = ag::slice_cols(t, proj, 2 * e + 2 * h * n, 2 * e + 2 * h * n + h);
    ag::Var xc = ag::silu(t, ag::causal_conv(t, xs, param(pre + "conv.weight"), param(pre + "conv.bias")));
    ag::Var dt = checked_step(ag::softplus(t, ag::add_row(t, dtr, param(pre + "dt_bias"))), pre);
    ag::Var a = ag::neg_exp(t, param(pre + "a_log"));
    ag::Var y = ag::ssd(t, xc, dt, a, b, c, config_.head_dim, n, config_.chunked, config_.chunk_len,
                        config_.chunked ? "chunk_matmul" : "scan");
    y = ag::add(t, y, ag::mul_row(t, xc, param(pre + "d_skip")));
    y = ag::mul(t, y, ag::silu(t, z));
    return ag::add(t, x, ag::matmul(t, y, param(pre + "out_proj.weight")));
  }

  ag::Var attention_block(ag::Var x, const std::string& pre) {
    auto& t = tape_;
    const std::size_t d = config_.d_model;
    ag::Var h = ag::rmsnorm(t, x, param(pre + "attn_norm.gain"));
    ag::Var qkv = ag::add_row(t, ag::matmul(t, h, param(pre + "qkv.weight")), param(pre + "qkv.bias"));
    ag::Var q = ag::slice_cols(t, qkv, 0, d);
    ag::Var k = ag::slice_cols(t, qkv, d, 2 * d);
    ag::Var v = ag::slice_cols(t, qkv, 2 * d, 3 * d);
    ag::Var att = ag::causal_attention(t, q, k, v, config_.n_heads);
    ag::Var o = ag::add_row(t, ag::matmul(t, att, param(pre + "attn_out.weight")), param(pre + "attn_out.bias"));
    ag::Var x1 = ag::add(t, x, o);
    ag::Var h2 = ag::rmsnorm(t, x1, param(pre + "ffn_norm.gain"));
    ag::Var f = ag::silu(t, ag::add_row(t, ag::matmul(t, h2, param(pre + "ffn_in.weight")), param(pre + "ffn_in.bias")));
    ag::Var f2 = ag::add_row(t, ag::matmul(t, f, param(pre + "ffn_out.weight")), param(pre + "ffn_out.bias"));
    return ag::add(t, x1, f2);
  }

  ag::Tape<T>& tape_;
  const ModelParams<T>& params_;
  ModelConfig config_;
  std::vector<std::optional<ag::Var>> leaves_;
};

struct ForwardOptions {
  bool record_grad = true;
  TimerRegistry* profiler = nullptr;
};

/// Recorded forward pass: the tape holds every activation needed for the
/// reverse pass and can be replayed.
template <typename T>
struct ForwardTrace {
  std::unique_ptr<ag::Tape<T>> tape;
  std::unique_ptr<ModelGraph<T>> graph;
  ag::Var hidden;
  std::optional<ag::Var> score;
  const ModelParams<T>* params = nullptr;

  const Matrix<T>& hidden_value() const { return tape->value(hidden); }
  T score_value() const {
    if (!score) throw ContractError("ForwardTrace: no score was recorded");
    return tape->value(*score)(0, 0);
  }

  /// Re-executes the recorded computation and returns the hidden states.
  Matrix<T> replay() {
    tape->set_profiler(nullptr);
    tape->replay();
    return tape->value(hidden);
  }
};

template <typename T>
ForwardTrace<T> forward(std::span<const int> ids, const ModelParams<T>& params, const ModelConfig& config,
                        ForwardOptions opts = {}) {
  ForwardTrace<T> tr;
  tr.tape = std::make_unique<ag::Tape<T>>(opts.record_grad, opts.profiler);
  tr.graph = std::make_unique<ModelGraph<T>>(*tr.tape, params, config);
  tr.params = &params;
  tr.hidden = tr.graph->hidden(ids);
  if (!ids.empty() && ids.back() == config.eos_id) tr.score = tr.graph->score_at(tr.hidden, ids.size() - 1);
  return tr;
}

/// Relevance score of an input ending in the end-of-sequence id.
template <typename T>
T score(std::span<const int> ids, const ModelParams<T>& params, const ModelConfig& config,
        TimerRegistry* profiler = nullptr) {
  ag::Tape<T> tape(false, profiler);
  ModelGraph<T> g(tape, params, config);
  return tape.value(g.score(ids))(0, 0);
}

/// Upstream gradient of a scalar loss w.r.t. the hidden states (optional)
/// and the recorded score.
template <typename T>
struct Upstream {
  Matrix<T> hidden;  // empty = zero
  T score = T(0);
};

/// Reverse pass: accumulates dLoss/dtheta into params' grad slots.
template <typename T>
void backward(ForwardTrace<T>& trace, const Upstream<T>& up, ModelParams<T>& params) {
  if (trace.params != &params || !trace.tape)
    throw ContractError("backward: trace was recorded with different parameters");
  auto& tape = *trace.tape;
  if (!tape.record_grad()) throw ContractError("backward: trace was recorded without gradients");
  const Matrix<T>& hv = tape.value(trace.hidden);
  Matrix<T> seed_h = up.hidden.empty() ? Matrix<T>(hv.rows(), hv.cols()) : up.hidden;
  require_shape(seed_h, hv.rows(), hv.cols(), "backward upstream hidden");
  std::vector<std::pair<ag::Var, Matrix<T>>> seeds{{trace.hidden, std::move(seed_h)}};
  if (up.score != T(0)) {
    if (!trace.score) throw ContractError("backward: score gradient given but no score was recorded");
    seeds.emplace_back(*trace.score, Matrix<T>(1, 1, up.score));
  }
  tape.backward(seeds);
  trace.graph->accumulate_grads(params);
}

/// Output of one attention block (no gradient recording).
template <typename T>
Matrix<T> attention_block_forward(const Matrix<T>& x, const ModelParams<T>& params, const ModelConfig& config,
                                  std::size_t layer, TimerRegistry* profiler = nullptr) {
  if (config.block_kind != BlockKind::kAttention)
    throw ContractError("attention_block_forward: config is not an attention model");
  require_shape(x, x.rows(), config.d_model, "attention_block_forward input");
  ag::Tape<T> tape(false, profiler);
  ModelGraph<T> g(tape, params, config);
  return tape.value(g.block(tape.leaf(x), layer));
}

/// Output of one block of any kind (no gradient recording).
template <typename T>
Matrix<T> block_forward(const Matrix<T>& x, const ModelParams<T>& params, const ModelConfig& config,
                        std::size_t layer, TimerRegistry* profiler = nullptr) {
  require_shape(x, x.rows(), config.d_model, "block_forward input");
  ag::Tape<T> tape(false, profiler);
  ModelGraph<T> g(tape, params, config);
  return tape.value(g.block(tape.leaf(x), layer));
}

}  // namespace ssmrank
