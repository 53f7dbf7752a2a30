#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ssmrank/bench.hpp"
#include "ssmrank/profiler.hpp"

using namespace ssmrank;
using namespace ssmrank::bench;

namespace {

// Advances by a fixed step on every read.
struct FakeClock {
  std::uint64_t now = 0, step = 1000000;
  std::uint64_t operator()() { return now += step; }
};

ModelConfig small(BlockKind k) {
  ModelConfig c;
  c.vocab_size = 64;
  c.eos_id = 63;
  c.d_model = 8;
  c.n_layers = 2;
  c.block_kind = k;
  c.state_size = 4;
  c.head_dim = 4;
  c.n_heads = 2;
  c.chunk_len = 8;
  c.max_seq_len = 512;
  return c;
}

}  // namespace

TEST(Profiler, DisabledRecordsNothing) {
  TimerRegistry reg(false);
  {
    auto s = reg.scope("a");
    auto t = reg.scope("b");
  }
  EXPECT_TRUE(reg.empty());
  EXPECT_TRUE(reg.rows().empty());
}

TEST(Profiler, NestedScopesMergeAndChildrenFitInParent) {
  FakeClock clk;
  TimerRegistry reg(true, std::ref(clk));
  for (int i = 0; i < 3; ++i) {
    auto outer = reg.scope("block");
    { auto a = reg.scope("projection"); }
    { auto b = reg.scope("scan"); }
  }
  EXPECT_EQ(reg.calls("block"), 3u);
  EXPECT_EQ(reg.calls("projection"), 3u);
  EXPECT_LE(reg.total_ns("projection") + reg.total_ns("scan"), reg.total_ns("block"));
  auto rows = reg.rows();
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].name, "block");
  EXPECT_DOUBLE_EQ(rows[0].percent, 100.0);
  EXPECT_LE(rows[1].percent + rows[2].percent, 100.0);
}

TEST(Profiler, ReportIsByteStableWithFakeClock) {
  auto run = [] {
    FakeClock clk;
    TimerRegistry reg(true, std::ref(clk));
    {
      auto a = reg.scope("block.mamba2");
      { auto p = reg.scope("projection"); }
      { auto p = reg.scope("projection"); }
      { auto c = reg.scope("chunk_matmul"); }
    }
    { auto s = reg.scope("score_head"); }
    BenchReport r;
    r.title = "profile";
    r.config = {{"block_kind", "mamba2"}};
    r.metrics = {{"forward_calls", 1.0}};
    r.scopes = reg.rows();
    return std::make_pair(render_text(r), render_csv(r));
  };
  const auto [text, csv] = run();
  EXPECT_EQ(run().first, text);
  EXPECT_EQ(run().second, csv);
  const std::string golden_csv =
      "key,value\n"
      "config.block_kind,mamba2\n"
      "forward_calls,1.000000\n"
      "\n"
      "scope,depth,calls,cumulative_ms,percent\n"
      "block.mamba2,0,1,7.000000,87.5000\n"
      "block.mamba2/projection,1,2,2.000000,25.0000\n"
      "block.mamba2/chunk_matmul,1,1,1.000000,12.5000\n"
      "score_head,0,1,1.000000,12.5000\n";
  EXPECT_EQ(csv, golden_csv);
  EXPECT_NE(text.find("  projection"), std::string::npos);
}

TEST(Profiler, ObserverNeutralityAndScopeNames) {
  const std::vector<std::pair<BlockKind, std::vector<std::string>>> expect{
      {BlockKind::kMamba1, {"embedding", "projection", "local_conv", "scan", "normalization", "score_head"}},
      {BlockKind::kMamba2, {"embedding", "projection", "local_conv", "chunk_matmul", "normalization", "score_head"}},
      {BlockKind::kAttention, {"embedding", "projection", "attention", "normalization", "score_head"}}};
  for (const auto& [kind, names] : expect) {
    auto c = small(kind);
    auto params = init_params<double>(c, 1);
    std::mt19937_64 rng(1);
    auto ids = random_sequence(c, 40, rng);
    TimerRegistry reg(true), off(false);
    auto a = forward<double>(ids, params, c, {false, &reg});
    auto b = forward<double>(ids, params, c, {false, nullptr});
    auto d = forward<double>(ids, params, c, {false, &off});
    EXPECT_EQ(a.hidden_value(), b.hidden_value());
    EXPECT_EQ(a.score_value(), b.score_value());
    EXPECT_EQ(d.hidden_value(), b.hidden_value());
    EXPECT_TRUE(off.empty());
    for (const auto& n : names) EXPECT_GT(reg.calls(n), 0u) << to_string(kind) << " " << n;
  }
  auto c = small(BlockKind::kMamba2);
  c.chunked = false;
  auto params = init_params<double>(c, 1);
  std::mt19937_64 rng(2);
  TimerRegistry reg;
  profile_operators(params, c, {random_sequence(c, 20, rng)}, reg);
  EXPECT_GT(reg.calls("scan"), 0u);
}

TEST(Flops, AttentionQuadraticSsmLinear) {
  for (auto k : {BlockKind::kMamba1, BlockKind::kMamba2, BlockKind::kAttention}) {
    auto c = small(k);
    const double r = estimate_flops(c, 2 * (1 << 22)).layer_training / estimate_flops(c, 1 << 22).layer_training;
    if (k == BlockKind::kAttention) {
      EXPECT_NEAR(r, 4.0, 1e-4);
      EXPECT_GT(estimate_flops(c, 2048).inference_step, estimate_flops(c, 1024).inference_step);
    } else {
      EXPECT_DOUBLE_EQ(r, 2.0);
      EXPECT_EQ(estimate_flops(c, 64).inference_step, estimate_flops(c, 4096).inference_step);
    }
  }
}

TEST(Flops, CoreExponentsMatchComplexityTable) {
  auto att = estimate_flops(small(BlockKind::kAttention), 128);
  auto ssm = estimate_flops(small(BlockKind::kMamba1), 128);
  auto ssd = estimate_flops(small(BlockKind::kMamba2), 128);
  EXPECT_EQ(att.core_training.leading(), std::make_pair(2, 1));
  EXPECT_EQ(ssm.core_training.leading(), std::make_pair(1, 2));
  EXPECT_EQ(ssd.core_training.leading(), std::make_pair(1, 2));
  EXPECT_EQ(att.core_inference.leading(), std::make_pair(1, 1));
  EXPECT_EQ(ssm.core_inference.leading(), std::make_pair(0, 2));
  EXPECT_EQ(ssd.core_inference.leading(), std::make_pair(0, 2));
}

TEST(Flops, SequentialSsdAndValidation) {
  auto c = small(BlockKind::kMamba2);
  c.chunked = false;
  auto f = estimate_flops(c, 100);
  EXPECT_GT(f.layer_forward, 0.0);
  EXPECT_THROW(estimate_flops(c, 0), InputError);
}

TEST(Throughput, SanityAndValidation) {
  auto c = small(BlockKind::kMamba2);
  EXPECT_THROW(measure_training_throughput(c, 2, 32, 2), InputError);
  auto r = measure_training_throughput(c, 2, 32, 3);
  EXPECT_TRUE(std::isfinite(r.tokens_per_second));
  EXPECT_GT(r.tokens_per_second, 0.0);
  EXPECT_EQ(r.step_seconds.size(), 2u);
  FakeClock clk;
  auto fake = measure_training_throughput(c, 2, 32, 4, 0, {}, std::ref(clk));
  EXPECT_DOUBLE_EQ(fake.tokens_per_second, 64.0 / 1e-3);
  EXPECT_EQ(fake.stddev_tokens_per_second, 0.0);
}

TEST(Throughput, CapacityErrorNamesConfig) {
  auto c = small(BlockKind::kAttention);
  c.max_seq_len = 1 << 20;
  CapacityBudget tiny{1024.0 * 1024.0};
  try {
    measure_training_throughput(c, 1, 100000, 3, 0, tiny);
    FAIL();
  } catch (const CapacityError& e) {
    EXPECT_NE(std::string(e.what()).find("attention"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("L=100000"), std::string::npos);
  }
}

TEST(Inference, EmptySetIsAnErrorAndBatchScoresMatch) {
  auto c = small(BlockKind::kMamba1);
  c.vocab_size = ByteTokenizer::kVocabSize;
  c.eos_id = ByteTokenizer::kEos;
  auto params = init_params<double>(c, 3);
  EXPECT_THROW(measure_inference_qps(params, c, {}, 1, 64), InputError);
  std::vector<EvalQuery> eval{{"q one", {"doc a", "doc b"}}, {"q two", {"doc c"}}};
  auto r = measure_inference_qps(params, c, eval, 2, 64);
  EXPECT_EQ(r.queries, 2u);
  EXPECT_EQ(r.forwards, 3u);
  EXPECT_GT(r.queries_per_second, 0.0);
  std::vector<std::vector<int>> seqs;
  for (const auto& q : eval)
    for (const auto& d : q.docs) seqs.push_back(format_input(q.query, d, TruncationPolicy::custom(64)));
  auto batched = score_batch<double>(seqs, params, c);
  for (std::size_t i = 0; i < seqs.size(); ++i) EXPECT_EQ(batched[i], score<double>(seqs[i], params, c));
}

TEST(Scaling, FitRecoversPowerLaw) {
  std::vector<double> xs{256, 512, 1024, 2048}, ys;
  for (double x : xs) ys.push_back(3.0 * std::pow(x, 1.7));
  auto [slope, icpt] = fit_loglog(xs, ys);
  EXPECT_NEAR(slope, 1.7, 1e-12);
  EXPECT_NEAR(icpt, std::log(3.0), 1e-10);
  EXPECT_THROW(fit_loglog({1.0}, {1.0}), InputError);
}

TEST(Scaling, CurveRowsAndValidation) {
  auto c = small(BlockKind::kMamba2);
  FakeClock clk;
  auto res = scaling_curve(c, {BlockKind::kMamba2, BlockKind::kAttention}, {16, 32, 64}, 2, 0, {}, std::ref(clk));
  ASSERT_EQ(res.rows.size(), 6u);
  ASSERT_EQ(res.fits.size(), 2u);
  EXPECT_NEAR(res.fits[0].slope, 0.0, 1e-12);  // fake clock: constant time
  EXPECT_THROW(scaling_curve(c, {BlockKind::kMamba2}, {64, 32}), InputError);
}

TEST(Measured, AttentionScopeGrowsSuperlinearly) {
  auto c = small(BlockKind::kAttention);
  c.d_model = 16;
  auto params = init_params<double>(c, 4);
  std::mt19937_64 rng(4);
  std::vector<double> ms;
  for (std::size_t L : {128, 256, 512}) {
    TimerRegistry reg;
    profile_operators(params, c, {random_sequence(c, L, rng)}, reg);
    ms.push_back(static_cast<double>(reg.total_ns("attention")));
  }
  // Linear growth would give 4x from 128 to 512.
  EXPECT_GT(ms[2] / ms[0], 6.0);
  EXPECT_GT(ms[2], ms[1]);
}

TEST(Measured, LongerTruncationLowersQps) {
  auto c = small(BlockKind::kMamba2);
  c.vocab_size = ByteTokenizer::kVocabSize;
  c.eos_id = ByteTokenizer::kEos;
  c.max_seq_len = 2048;
  auto params = init_params<double>(c, 5);
  std::string doc;
  for (int i = 0; i < 400; ++i) doc += "token ";
  std::vector<EvalQuery> eval{{"a query", {doc, doc}}, {"another query", {doc, doc}}};
  const double q512 = measure_inference_qps(params, c, eval, 2, 512).queries_per_second;
  const double q1536 = measure_inference_qps(params, c, eval, 2, 1536).queries_per_second;
  EXPECT_LT(q1536, q512);
}
