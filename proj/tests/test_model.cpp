#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ssmrank/model.hpp"
#include "test_util.hpp"

using namespace ssmrank;
using ssmrank::testing::random_matrix;

namespace {

ModelConfig tiny(BlockKind kind) {
  ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 8;
  c.n_layers = 2;
  c.block_kind = kind;
  c.state_size = 4;
  c.head_dim = 4;
  c.n_heads = 2;
  c.max_seq_len = 32;
  c.chunk_len = 5;
  c.eos_id = 63;
  c.init_std = 0.3;
  return c;
}

std::vector<int> random_ids(std::size_t len, std::size_t vocab, std::mt19937_64& rng, int eos = -1) {
  std::uniform_int_distribution<int> u(0, static_cast<int>(vocab) - 2);
  std::vector<int> ids(len);
  for (auto& v : ids) v = u(rng);
  if (eos >= 0) ids.back() = eos;
  return ids;
}

// ---- straight-line reference forward, written without the tape ----

using M = Matrix<double>;

M mm(const M& a, const M& b) {
  M o(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      o(i, j) = s;
    }
  return o;
}
double silu(double v) { return v / (1.0 + std::exp(-v)); }
double softplus(double v) { return std::log(1.0 + std::exp(v)); }

M rms(const M& x, const M& g) {
  M o(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) ss += x(i, j) * x(i, j);
    const double r = std::sqrt(ss / x.cols() + 1e-5);
    for (std::size_t j = 0; j < x.cols(); ++j) o(i, j) = x(i, j) / r * g(0, j);
  }
  return o;
}

M cols(const M& x, std::size_t a, std::size_t b) {
  M o(x.rows(), b - a);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = a; j < b; ++j) o(i, j - a) = x(i, j);
  return o;
}

M conv_silu(const M& x, const M& w, const M& b) {
  const std::size_t W = w.rows();
  M o(x.rows(), x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double s = b(0, c);
      for (std::size_t k = 0; k < W; ++k) {
        const long src = long(t) - long(W - 1) + long(k);
        if (src >= 0) s += w(k, c) * x(std::size_t(src), c);
      }
      o(t, c) = silu(s);
    }
  return o;
}

M reference_hidden(const std::vector<int>& ids, const ModelParams<double>& p, const ModelConfig& c) {
  const std::size_t L = ids.size(), D = c.d_model, E = c.inner(), N = c.state_size;
  M x(L, D);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t j = 0; j < D; ++j) {
      x(t, j) = p.at("embedding").value(ids[t], j);
      if (c.block_kind == BlockKind::kAttention) x(t, j) += p.at("pos_embedding").value(t, j);
    }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = layer_prefix(l);
    auto P = [&](const std::string& n) -> const M& { return p.at(pre + n).value; };
    if (c.block_kind == BlockKind::kMamba1) {
      M xz = mm(rms(x, P("norm.gain")), P("in_proj.weight"));
      M xc = conv_silu(cols(xz, 0, E), P("conv.weight"), P("conv.bias"));
      M dtp = mm(xc, P("dt_proj.weight")), bm = mm(xc, P("b_proj.weight")), cm = mm(xc, P("c_proj.weight"));
      M y(L, E);
      for (std::size_t d = 0; d < E; ++d) {
        std::vector<double> h(N, 0.0);
        for (std::size_t t = 0; t < L; ++t) {
          const double dt = softplus(dtp(t, d) + P("dt_proj.bias")(0, d));
          double acc = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const double a = -std::exp(P("a_log")(d, n));
            h[n] = std::exp(dt * a) * h[n] + (std::exp(dt * a) - 1.0) / a * bm(t, n) * xc(t, d);
            acc += cm(t, n) * h[n];
          }
          y(t, d) = (acc + xc(t, d) * P("d_skip")(0, d)) * silu(xz(t, E + d));
        }
      }
      M out = mm(y, P("out_proj.weight"));
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += out[i];
    } else if (c.block_kind == BlockKind::kMamba2) {
      const std::size_t H = c.ssd_heads(), Pd = c.head_dim;
      M pr = mm(rms(x, P("norm.gain")), P("in_proj.weight"));
      M xc = conv_silu(cols(pr, E, 2 * E), P("conv.weight"), P("conv.bias"));
      M y(L, E);
      for (std::size_t h = 0; h < H; ++h) {
        const double a = -std::exp(P("a_log")(0, h));
        M s(Pd, N);
        for (std::size_t t = 0; t < L; ++t) {
          const double dt = softplus(pr(t, 2 * E + 2 * H * N + h) + P("dt_bias")(0, h));
          for (std::size_t q = 0; q < Pd; ++q) {
            const std::size_t ch = h * Pd + q;
            double acc = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
              s(q, n) = std::exp(dt * a) * s(q, n) + (std::exp(dt * a) - 1.0) / a * pr(t, 2 * E + h * N + n) * xc(t, ch);
              acc += pr(t, 2 * E + H * N + h * N + n) * s(q, n);
            }
            y(t, ch) = (acc + xc(t, ch) * P("d_skip")(0, ch)) * silu(pr(t, ch));
          }
        }
      }
      M out = mm(y, P("out_proj.weight"));
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += out[i];
    } else {
      const std::size_t nh = c.n_heads, dh = D / nh;
      M qkv = mm(rms(x, P("attn_norm.gain")), P("qkv.weight"));
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t j = 0; j < 3 * D; ++j) qkv(t, j) += P("qkv.bias")(0, j);
      M att(L, D);
      for (std::size_t h = 0; h < nh; ++h)
        for (std::size_t i = 0; i < L; ++i) {
          std::vector<double> w(i + 1);
          double mx = -1e300, z = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e) s += qkv(i, h * dh + e) * qkv(j, D + h * dh + e);
            w[j] = s / std::sqrt(double(dh));
            mx = std::max(mx, w[j]);
          }
          for (auto& v : w) z += (v = std::exp(v - mx));
          for (std::size_t j = 0; j <= i; ++j)
            for (std::size_t e = 0; e < dh; ++e) att(i, h * dh + e) += w[j] / z * qkv(j, 2 * D + h * dh + e);
        }
      M o = mm(att, P("attn_out.weight"));
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t j = 0; j < D; ++j) x(t, j) += o(t, j) + P("attn_out.bias")(0, j);
      M f = mm(rms(x, P("ffn_norm.gain")), P("ffn_in.weight"));
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t j = 0; j < f.cols(); ++j) f(t, j) = silu(f(t, j) + P("ffn_in.bias")(0, j));
      M f2 = mm(f, P("ffn_out.weight"));
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t j = 0; j < D; ++j) x(t, j) += f2(t, j) + P("ffn_out.bias")(0, j);
    }
  }
  return rms(x, p.at("final_norm.gain").value);
}

class EveryKind : public ::testing::TestWithParam<BlockKind> {};

}  // namespace

TEST_P(EveryKind, SingleTokenAndReplay) {
  auto cfg = tiny(GetParam());
  auto params = init_params<double>(cfg, 1);
  std::vector<int> ids{5};
  auto tr = forward<double>(ids, params, cfg);
  EXPECT_EQ(tr.hidden_value().rows(), 1u);
  const Matrix<double> first = tr.hidden_value();
  EXPECT_EQ(tr.replay(), first);
}

TEST_P(EveryKind, ReplayIsBitIdentical) {
  auto cfg = tiny(GetParam());
  auto params = init_params<double>(cfg, 2);
  std::mt19937_64 rng(2);
  auto ids = random_ids(16, cfg.vocab_size, rng, cfg.eos_id);
  auto tr = forward<double>(ids, params, cfg);
  const Matrix<double> first = tr.hidden_value();
  const double s = tr.score_value();
  EXPECT_EQ(tr.replay(), first);
  EXPECT_EQ(tr.score_value(), s);
}

TEST_P(EveryKind, PrefixCausality) {
  auto cfg = tiny(GetParam());
  auto params = init_params<double>(cfg, 3);
  std::mt19937_64 rng(3);
  auto a = random_ids(20, cfg.vocab_size, rng);
  auto b = a;
  for (std::size_t i = 12; i < 20; ++i) b[i] = (b[i] + 7) % 60;
  b.resize(17);
  auto ha = forward<double>(a, params, cfg).hidden_value();
  auto hb = forward<double>(b, params, cfg).hidden_value();
  for (std::size_t t = 0; t < 12; ++t)
    for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_EQ(ha(t, j), hb(t, j));
}

TEST_P(EveryKind, MatchesStraightLineOracle) {
  auto cfg = tiny(GetParam());
  auto params = init_params<double>(cfg, 4);
  std::mt19937_64 rng(4);
  auto ids = random_ids(16, cfg.vocab_size, rng);
  auto h = forward<double>(ids, params, cfg, {false, nullptr}).hidden_value();
  EXPECT_LT(max_relative_error(h, reference_hidden(ids, params, cfg)), 1e-12);
}

TEST_P(EveryKind, ParameterCountFormula) {
  auto cfg = tiny(GetParam());
  EXPECT_EQ(init_params<double>(cfg, 5).scalar_count(), parameter_count(cfg));
  cfg.d_model = 12;
  cfg.n_layers = 3;
  cfg.state_size = 7;
  cfg.head_dim = 6;
  cfg.n_heads = 3;
  EXPECT_EQ(init_params<double>(cfg, 5).scalar_count(), parameter_count(cfg));
}

TEST_P(EveryKind, ScoreIsLinearHeadOnLastRow) {
  auto cfg = tiny(GetParam());
  auto params = init_params<double>(cfg, 6);
  std::mt19937_64 rng(6);
  auto ids = random_ids(10, cfg.vocab_size, rng, cfg.eos_id);
  auto h = forward<double>(ids, params, cfg).hidden_value();
  double manual = params.at("score.bias").value(0, 0);
  for (std::size_t j = 0; j < cfg.d_model; ++j) manual += params.at("score.weight").value(j, 0) * h(9, j);
  EXPECT_NEAR(score<double>(ids, params, cfg), manual, 1e-12);

  params.at("score.weight").value.fill(0.0);
  params.at("score.bias").value(0, 0) = 0.25;
  EXPECT_EQ(score<double>(ids, params, cfg), 0.25);
  params.at("score.weight").value(3, 0) = 1.0;
  EXPECT_NEAR(score<double>(ids, params, cfg), h(9, 3) + 0.25, 1e-15);
}

TEST_P(EveryKind, GradientsMatchFiniteDifferences) {
  auto cfg = tiny(GetParam());
  auto params = init_params<double>(cfg, 7);
  std::mt19937_64 rng(7);
  auto ids = random_ids(16, cfg.vocab_size, rng, cfg.eos_id);
  auto weights = random_matrix(16, cfg.d_model, rng);
  auto rep = ssmrank::testing::check_model_gradients(params, cfg, ids, weights);
  for (const auto& f : rep.failures) ADD_FAILURE() << f;
  EXPECT_EQ(rep.passed, rep.checked);
  EXPECT_EQ(rep.checked, parameter_count(cfg));
  RecordProperty("worst_relative_error", std::to_string(rep.worst));
}

TEST_P(EveryKind, UnusedParametersHaveExactlyZeroGradient) {
  auto cfg = tiny(GetParam());
  auto params = init_params<double>(cfg, 8);
  std::vector<int> ids{1, 2, 3, cfg.eos_id};
  params.zero_grad();
  auto tr = forward<double>(ids, params, cfg);
  backward(tr, Upstream<double>{{}, 1.0}, params);
  const auto& ge = params.at("embedding").grad;
  for (int tok : {0, 10, 40})
    for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_EQ(ge(tok, j), 0.0);
  if (cfg.block_kind == BlockKind::kAttention) {
    for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_EQ(params.at("pos_embedding").grad(10, j), 0.0);
  }
}

INSTANTIATE_TEST_SUITE_P(Kinds, EveryKind,
                         ::testing::Values(BlockKind::kMamba1, BlockKind::kMamba2, BlockKind::kAttention),
                         [](const auto& info) { return to_string(info.param); });

TEST(Model, ChunkedAndSequentialSsdAgree) {
  auto cfg = tiny(BlockKind::kMamba2);
  auto params = init_params<double>(cfg, 9);
  std::mt19937_64 rng(9);
  auto ids = random_ids(30, cfg.vocab_size, rng);
  auto seq_cfg = cfg;
  seq_cfg.chunked = false;
  EXPECT_LT(max_relative_error(forward<double>(ids, params, cfg).hidden_value(),
                               forward<double>(ids, params, seq_cfg).hidden_value()),
            1e-10);
}

TEST(Model, InputErrors) {
  auto cfg = tiny(BlockKind::kMamba2);
  auto params = init_params<double>(cfg, 10);
  std::vector<int> bad{1, 2, 64, 3};
  try {
    forward<double>(bad, params, cfg);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("position 2"), std::string::npos);
  }
  std::vector<int> no_eos{1, 2, 3};
  EXPECT_THROW(score<double>(no_eos, params, cfg), ContractError);
  std::vector<int> too_long(40, 1);
  EXPECT_THROW(forward<double>(too_long, params, cfg), InputError);
}

TEST(Model, BackwardRejectsForeignParameters) {
  auto cfg = tiny(BlockKind::kMamba1);
  auto params = init_params<double>(cfg, 11);
  auto other = init_params<double>(cfg, 11);
  std::vector<int> ids{1, 2, cfg.eos_id};
  auto tr = forward<double>(ids, params, cfg);
  EXPECT_THROW(backward(tr, Upstream<double>{{}, 1.0}, other), ContractError);
  auto nograd = forward<double>(ids, params, cfg, {false, nullptr});
  EXPECT_THROW(backward(nograd, Upstream<double>{{}, 1.0}, params), ContractError);
}

TEST(Model, InitIsDeterministic) {
  auto cfg = tiny(BlockKind::kMamba2);
  auto a = init_params<double>(cfg, 42), b = init_params<double>(cfg, 42), c = init_params<double>(cfg, 43);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].value, b[i].value);
    differs = differs || !(a[i].value == c[i].value);
  }
  EXPECT_TRUE(differs);
}

TEST(Model, FloatPathTracksDoublePath) {
  auto cfg = tiny(BlockKind::kMamba2);
  auto pd = init_params<double>(cfg, 12);
  auto pf = pd.cast<float>();
  std::mt19937_64 rng(12);
  auto ids = random_ids(24, cfg.vocab_size, rng, cfg.eos_id);
  EXPECT_NEAR(score<float>(ids, pf, cfg), score<double>(ids, pd, cfg), 1e-4);
}

// Linear least squares: loss = 1/2 |X W - Y|^2 has gradient X^T (X W - Y).
TEST(Autograd, LinearModelClosedFormGradient) {
  std::mt19937_64 rng(13);
  auto X = random_matrix(6, 4, rng), W = random_matrix(4, 3, rng), Y = random_matrix(6, 3, rng);
  ag::Tape<double> tape;
  auto xv = tape.leaf(X), wv = tape.leaf(W, true);
  auto pred = ag::matmul(tape, xv, wv);
  Matrix<double> resid = tape.value(pred);
  for (std::size_t i = 0; i < resid.size(); ++i) resid[i] -= Y[i];
  tape.backward(pred, resid);
  EXPECT_LT(max_relative_error(tape.grad(wv), matmul_at(X, resid)), 1e-14);
}

TEST(Attention, SingleTokenReturnsValue) {
  std::mt19937_64 rng(14);
  ag::Tape<double> tape(false);
  auto v = random_matrix(1, 8, rng);
  auto out = ag::causal_attention(tape, tape.leaf(random_matrix(1, 8, rng)), tape.leaf(random_matrix(1, 8, rng)),
                                  tape.leaf(v), 2);
  EXPECT_EQ(tape.value(out), v);
}

TEST(Attention, ZeroQueryKeyGivesRunningMean) {
  std::mt19937_64 rng(15);
  ag::Tape<double> tape(false);
  auto v = random_matrix(9, 6, rng);
  auto out = tape.value(ag::causal_attention(tape, tape.leaf(Matrix<double>(9, 6)), tape.leaf(Matrix<double>(9, 6)),
                                             tape.leaf(v), 3));
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      double mean = 0.0;
      for (std::size_t s = 0; s <= i; ++s) mean += v(s, j);
      EXPECT_NEAR(out(i, j), mean / double(i + 1), 1e-14);
    }
}

TEST(Attention, BlockMatchesNaiveDoubleLoop) {
  auto cfg = tiny(BlockKind::kAttention);
  cfg.n_layers = 1;
  auto params = init_params<double>(cfg, 16);
  std::mt19937_64 rng(16);
  auto x = random_matrix(8, cfg.d_model, rng);
  // The straight-line oracle starts from embeddings; feed it via a one-hot embedding table.
  auto p2 = params;
  p2.at("embedding").value = Matrix<double>(cfg.vocab_size, cfg.d_model);
  p2.at("pos_embedding").value = Matrix<double>(cfg.max_seq_len, cfg.d_model);
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t j = 0; j < cfg.d_model; ++j) p2.at("pos_embedding").value(t, j) = x(t, j);
  std::vector<int> ids(8, 0);
  auto ref = reference_hidden(ids, p2, cfg);
  // undo the final norm on the block output for comparison
  auto blk = attention_block_forward(x, params, cfg, 0);
  ag::Tape<double> t(false);
  auto normed = t.value(ag::rmsnorm(t, t.leaf(blk), t.leaf(params.at("final_norm.gain").value)));
  EXPECT_LT(max_relative_error(normed, ref), 1e-12);
}

TEST(Tape, TruncateDropsLaterNodes) {
  ag::Tape<double> tape(false);
  auto a = tape.leaf(Matrix<double>(1, 1));
  tape.leaf(Matrix<double>(2, 2));
  tape.truncate(1);
  EXPECT_EQ(tape.size(), 1u);
  EXPECT_EQ(tape.value(a).rows(), 1u);
  EXPECT_THROW(tape.truncate(5), ContractError);
}
