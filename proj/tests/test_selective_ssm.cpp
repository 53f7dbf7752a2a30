#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "ssmrank/selective_ssm.hpp"
#include "ssmrank/ssm_core.hpp"
#include "test_util.hpp"

using namespace ssmrank;
using namespace ssmrank::ssm;
using ssmrank::testing::random_matrix;

namespace {

SelectiveTrace<double> random_trace(std::size_t len, std::size_t delta_cols, std::size_t bc_cols,
                                    std::mt19937_64& rng) {
  return {random_matrix(len, delta_cols, rng, 0.01, 0.5), random_matrix(len, bc_cols, rng),
          random_matrix(len, bc_cols, rng)};
}

SsdHeadParams<double> random_heads(std::size_t h, std::size_t p, std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-3.0, -0.2);
  SsdHeadParams<double> hp{h, p, n, {}};
  for (std::size_t i = 0; i < h; ++i) hp.a_scalar.push_back(u(rng));
  return hp;
}

// Plain-formula ZOH, written independently of ZohFactor.
std::pair<double, double> zoh(double delta, double a) {
  return {std::exp(delta * a), (std::exp(delta * a) - 1.0) / a};
}

// Straight per-head recurrence with explicit loops.
Matrix<double> ssd_oracle(const Matrix<double>& x, const SsdHeadParams<double>& hp, const SelectiveTrace<double>& tr) {
  const std::size_t L = x.rows(), P = hp.head_dim, N = hp.state_size;
  Matrix<double> y(L, x.cols());
  for (std::size_t h = 0; h < hp.num_heads; ++h) {
    Matrix<double> s(P, N);
    for (std::size_t t = 0; t < L; ++t) {
      auto [ab, f] = zoh(tr.delta(t, h), hp.a_scalar[h]);
      for (std::size_t p = 0; p < P; ++p) {
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          s(p, n) = ab * s(p, n) + f * tr.b(t, h * N + n) * x(t, h * P + p);
          acc += tr.c(t, h * N + n) * s(p, n);
        }
        y(t, h * P + p) = acc;
      }
    }
  }
  return y;
}

}  // namespace

TEST(ProjectSelective, ZeroInputGivesLn2) {
  std::mt19937_64 rng(1);
  SelectiveProjections<double> proj{random_matrix(3, 3, rng), Matrix<double>(1, 3), random_matrix(3, 4, rng),
                                    random_matrix(3, 4, rng)};
  auto tr = project_selective(Matrix<double>(5, 3), proj);
  for (double v : tr.delta.storage()) EXPECT_DOUBLE_EQ(v, std::log(2.0));
}

TEST(ProjectSelective, ConstantProjectionIsTimeInvariant) {
  std::mt19937_64 rng(2);
  const double beta = -1.3;
  SelectiveProjections<double> proj{Matrix<double>(3, 3), Matrix<double>(1, 3, beta), random_matrix(3, 4, rng),
                                    random_matrix(3, 4, rng)};
  auto tr = project_selective(random_matrix(6, 3, rng), proj);
  for (double v : tr.delta.storage()) EXPECT_DOUBLE_EQ(v, std::log1p(std::exp(beta)));
}

TEST(ProjectSelective, MatchesNaiveMatmul) {
  std::mt19937_64 rng(3);
  const std::size_t L = 9, D = 4, N = 5;
  SelectiveProjections<double> proj{random_matrix(D, D, rng), random_matrix(1, D, rng), random_matrix(D, N, rng),
                                    random_matrix(D, N, rng)};
  auto x = random_matrix(L, D, rng);
  auto tr = project_selective(x, proj);
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t j = 0; j < D; ++j) {
      double pre = proj.b_delta(0, j);
      for (std::size_t i = 0; i < D; ++i) pre += x(t, i) * proj.w_delta(i, j);
      EXPECT_NEAR(tr.delta(t, j), std::log(1.0 + std::exp(pre)), 1e-12);
    }
    for (std::size_t n = 0; n < N; ++n) {
      double b = 0.0, c = 0.0;
      for (std::size_t i = 0; i < D; ++i) {
        b += x(t, i) * proj.w_b(i, n);
        c += x(t, i) * proj.w_c(i, n);
      }
      EXPECT_NEAR(tr.b(t, n), b, 1e-12);
      EXPECT_NEAR(tr.c(t, n), c, 1e-12);
    }
  }
}

TEST(ProjectSelective, NonFiniteNamesTimestep) {
  std::mt19937_64 rng(4);
  SelectiveProjections<double> proj{random_matrix(2, 2, rng), Matrix<double>(1, 2), random_matrix(2, 2, rng),
                                    random_matrix(2, 2, rng)};
  auto x = random_matrix(4, 2, rng);
  x(2, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    project_selective(x, proj);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("timestep 2"), std::string::npos);
  }
}

TEST(SelectiveScan, ConstantTraceReducesToLti) {
  std::mt19937_64 rng(5);
  const std::size_t L = 20, D = 3, N = 6;
  auto lti = LtiSsmParams<double>::random_init(D, N, rng);
  std::vector<double> bvec(N), cvec(N);
  for (std::size_t n = 0; n < N; ++n) {
    bvec[n] = lti.b()(0, n);
    cvec[n] = lti.c()(0, n);
  }
  Matrix<double> b(D, N), c(D, N);
  SelectiveTrace<double> tr{Matrix<double>(L, D), Matrix<double>(L, N), Matrix<double>(L, N)};
  std::vector<double> delta(D);
  for (std::size_t d = 0; d < D; ++d) {
    delta[d] = lti.delta(d);
    for (std::size_t n = 0; n < N; ++n) {
      b(d, n) = bvec[n];
      c(d, n) = cvec[n];
    }
  }
  LtiSsmParams<double> shared(delta, lti.a_diag(), b, c);
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t d = 0; d < D; ++d) tr.delta(t, d) = shared.delta(d);
    for (std::size_t n = 0; n < N; ++n) {
      tr.b(t, n) = bvec[n];
      tr.c(t, n) = cvec[n];
    }
  }
  auto x = random_matrix(L, D, rng);
  EXPECT_LT(max_relative_error(selective_scan_sequential(x, tr, lti.a_diag()), recurrent_forward(x, shared)), 1e-12);
}

TEST(SelectiveScan, SingleStepEqualsRecurrentStep) {
  std::mt19937_64 rng(6);
  const std::size_t D = 3, N = 4;
  auto tr = random_trace(1, D, N, rng);
  auto a = random_matrix(D, N, rng, -3.0, -0.1);
  auto x = random_matrix(1, D, rng);
  DiscreteSsmParams<double> disc{Matrix<double>(D, N), Matrix<double>(D, N)};
  Matrix<double> c(D, N);
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t n = 0; n < N; ++n) {
      auto [ab, bb] = discretize_entry(tr.delta(0, d), a(d, n), tr.b(0, n));
      disc.a_bar(d, n) = ab;
      disc.b_bar(d, n) = bb;
      c(d, n) = tr.c(0, n);
    }
  SsmState<double> st(D, N);
  auto y1 = recurrent_step<double>(st, x.row(0), disc, c);
  auto y = selective_scan_sequential(x, tr, a);
  for (std::size_t d = 0; d < D; ++d) EXPECT_NEAR(y(0, d), y1[d], 1e-15);
}

TEST(SelectiveScan, MatchesHandRecurrence) {
  std::mt19937_64 rng(7);
  const std::size_t L = 16, D = 2, N = 4;
  auto tr = random_trace(L, D, N, rng);
  auto a = random_matrix(D, N, rng, -3.0, -0.1);
  auto x = random_matrix(L, D, rng);
  Matrix<double> expect(L, D);
  for (std::size_t d = 0; d < D; ++d) {
    std::vector<double> h(N, 0.0);
    for (std::size_t t = 0; t < L; ++t) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        auto [ab, f] = zoh(tr.delta(t, d), a(d, n));
        h[n] = ab * h[n] + f * tr.b(t, n) * x(t, d);
        acc += tr.c(t, n) * h[n];
      }
      expect(t, d) = acc;
    }
  }
  EXPECT_LT(max_relative_error(selective_scan_sequential(x, tr, a), expect), 1e-12);
}

TEST(SelectiveScan, StateSizeIsIndependentOfLength) {
  std::mt19937_64 rng(8);
  const std::size_t D = 4, N = 8;
  auto a = random_matrix(D, N, rng, -3.0, -0.1);
  for (std::size_t L : {8u, 64u, 256u}) {
    ScanCounters cnt;
    selective_scan_sequential(random_matrix(L, D, rng), random_trace(L, D, N, rng), a, &cnt);
    EXPECT_EQ(cnt.state_elements, D * N);
    EXPECT_EQ(cnt.state_allocations, 1u);
  }
}

TEST(SelectiveScan, WorkIsLinearInLength) {
  std::mt19937_64 rng(9);
  const std::size_t D = 3, N = 5;
  auto a = random_matrix(D, N, rng, -3.0, -0.1);
  ScanCounters c1, c2;
  selective_scan_sequential(random_matrix(50, D, rng), random_trace(50, D, N, rng), a, &c1);
  selective_scan_sequential(random_matrix(100, D, rng), random_trace(100, D, N, rng), a, &c2);
  EXPECT_EQ(c2.arithmetic_ops, 2 * c1.arithmetic_ops);
  auto hp = random_heads(2, 3, 4, rng);
  ScanCounters s1, s2;
  ssd_forward_sequential(random_matrix(50, 6, rng), hp, random_trace(50, 2, 8, rng), &s1);
  ssd_forward_sequential(random_matrix(100, 6, rng), hp, random_trace(100, 2, 8, rng), &s2);
  EXPECT_EQ(s2.arithmetic_ops, 2 * s1.arithmetic_ops);
}

TEST(Ssd, SingleHeadReducesToSelectiveScan) {
  std::mt19937_64 rng(10);
  const std::size_t L = 18, D = 5, N = 6;
  auto hp = random_heads(1, D, N, rng);
  auto tr = random_trace(L, 1, N, rng);
  auto x = random_matrix(L, D, rng);
  SelectiveTrace<double> wide{Matrix<double>(L, D), tr.b, tr.c};
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < D; ++d) wide.delta(t, d) = tr.delta(t, 0);
  Matrix<double> a(D, N, hp.a_scalar[0]);
  EXPECT_LT(max_relative_error(ssd_forward_sequential(x, hp, tr), selective_scan_sequential(x, wide, a)), 1e-12);
}

TEST(Ssd, ZeroInputZeroOutput) {
  std::mt19937_64 rng(11);
  auto hp = random_heads(2, 3, 4, rng);
  auto tr = random_trace(10, 2, 8, rng);
  Matrix<double> x(10, 6);
  EXPECT_EQ(ssd_forward_sequential(x, hp, tr), x);
  EXPECT_EQ(ssd_forward_chunked(x, hp, tr, ChunkPlan{4}), x);
}

TEST(Ssd, SequentialMatchesHandRecurrence) {
  std::mt19937_64 rng(12);
  auto hp = random_heads(2, 3, 8, rng);
  auto tr = random_trace(24, 2, 16, rng);
  auto x = random_matrix(24, 6, rng);
  EXPECT_LT(max_relative_error(ssd_forward_sequential(x, hp, tr), ssd_oracle(x, hp, tr)), 1e-12);
}

TEST(Ssd, RejectsBadShapes) {
  std::mt19937_64 rng(13);
  auto hp = random_heads(2, 3, 4, rng);
  auto tr = random_trace(5, 2, 8, rng);
  EXPECT_THROW(ssd_forward_sequential(random_matrix(5, 7, rng), hp, tr), ParameterError);
  hp.a_scalar[1] = 0.5;
  EXPECT_THROW(ssd_forward_sequential(random_matrix(5, 6, rng), hp, tr), ParameterError);
  hp.a_scalar[1] = -0.5;
  EXPECT_THROW(ssd_forward_chunked(random_matrix(5, 6, rng), hp, tr, ChunkPlan{0}), ContractError);
}

TEST(SsdChunked, DegenerateChunkings) {
  std::mt19937_64 rng(14);
  const std::size_t L = 37;
  auto hp = random_heads(3, 2, 5, rng);
  auto tr = random_trace(L, 3, 15, rng);
  auto x = random_matrix(L, 6, rng);
  auto seq = ssd_forward_sequential(x, hp, tr);
  EXPECT_LT(max_relative_error(ssd_forward_chunked(x, hp, tr, ChunkPlan{L}), seq), 1e-10);
  EXPECT_LT(max_relative_error(ssd_forward_chunked(x, hp, tr, ChunkPlan{1}), seq), 1e-12);
}

TEST(SsdChunked, MatchesSequential) {
  std::mt19937_64 rng(15);
  auto hp = random_heads(2, 4, 8, rng);
  auto tr = random_trace(64, 2, 16, rng);
  auto x = random_matrix(64, 8, rng);
  EXPECT_LT(max_relative_error(ssd_forward_chunked(x, hp, tr, ChunkPlan{16}), ssd_forward_sequential(x, hp, tr)),
            1e-10);
}

TEST(SsdChunked, FloatPathWithinSinglePrecisionTolerance) {
  std::mt19937_64 rng(16);
  auto hp = random_heads(2, 4, 8, rng);
  auto tr = random_trace(96, 2, 16, rng);
  auto x = random_matrix(96, 8, rng);
  SsdHeadParams<float> hf{hp.num_heads, hp.head_dim, hp.state_size, {}};
  for (double a : hp.a_scalar) hf.a_scalar.push_back(float(a));
  SelectiveTrace<float> tf{tr.delta.cast<float>(), tr.b.cast<float>(), tr.c.cast<float>()};
  auto xf = x.cast<float>();
  EXPECT_LT(max_relative_error(ssd_forward_chunked(xf, hf, tf, ChunkPlan{16}), ssd_forward_sequential(xf, hf, tf)),
            1e-6);
}

TEST(SsdChunked, EquivalenceProperty) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> ld(1, 128), hd(1, 3), pd(1, 4), nd(1, 8);
  for (int rep = 0; rep < 25; ++rep) {
    const std::size_t L = ld(rng), H = hd(rng), P = pd(rng), N = nd(rng);
    auto hp = random_heads(H, P, N, rng);
    auto tr = random_trace(L, H, H * N, rng);
    auto x = random_matrix(L, H * P, rng);
    auto seq = ssd_forward_sequential(x, hp, tr);
    for (std::size_t q : {std::size_t(1), std::size_t(2), std::size_t(7), std::size_t(16), L})
      EXPECT_LT(max_relative_error(ssd_forward_chunked(x, hp, tr, ChunkPlan{q}), seq), 1e-10)
          << "L=" << L << " Q=" << q;
  }
}

TEST(SsdChunked, PlanCoversSequenceExactly) {
  for (std::size_t L : {1u, 15u, 16u, 17u, 100u})
    for (std::size_t q : {1u, 3u, 16u, 200u}) {
      ChunkPlan plan{q};
      std::size_t covered = 0;
      for (std::size_t c = 0; c < plan.num_chunks(L); ++c) {
        EXPECT_EQ(plan.begin(c), covered);
        covered = plan.end(c, L);
      }
      EXPECT_EQ(covered, L);
    }
}

TEST(SelectiveProperties, Causality) {
  std::mt19937_64 rng(18);
  const std::size_t L = 40;
  auto hp = random_heads(2, 3, 4, rng);
  auto tr = random_trace(L, 2, 8, rng);
  auto x = random_matrix(L, 6, rng);
  auto a = random_matrix(6, 4, rng, -2.0, -0.1);
  SelectiveTrace<double> str{random_matrix(L, 6, rng, 0.01, 0.5), random_matrix(L, 4, rng), random_matrix(L, 4, rng)};
  const std::size_t t = 23;
  auto x2 = x;
  x2(t, 4) -= 2.0;
  auto str2 = str;
  str2.b(t, 1) += 1.0;
  auto tr2 = tr;
  tr2.delta(t, 1) += 0.2;
  std::vector<std::pair<Matrix<double>, Matrix<double>>> pairs{
      {selective_scan_sequential(x, str, a), selective_scan_sequential(x2, str2, a)},
      {ssd_forward_sequential(x, hp, tr), ssd_forward_sequential(x2, hp, tr2)},
      {ssd_forward_chunked(x, hp, tr, ChunkPlan{7}), ssd_forward_chunked(x2, hp, tr2, ChunkPlan{7})},
  };
  for (auto& [y1, y2] : pairs) {
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t d = 0; d < 6; ++d) EXPECT_EQ(y1(s, d), y2(s, d));
    double diff = 0.0;
    for (std::size_t d = 0; d < 6; ++d) diff += std::abs(y1(t, d) - y2(t, d));
    EXPECT_GT(diff, 0.0);
  }
}

TEST(SsdChunked, StateSizeIsIndependentOfLength) {
  std::mt19937_64 rng(19);
  auto hp = random_heads(2, 3, 4, rng);
  for (std::size_t L : {16u, 128u}) {
    ScanCounters cs, cc;
    auto tr = random_trace(L, 2, 8, rng);
    auto x = random_matrix(L, 6, rng);
    ssd_forward_sequential(x, hp, tr, &cs);
    ssd_forward_chunked(x, hp, tr, ChunkPlan{16}, &cc);
    EXPECT_EQ(cs.state_elements, 2u * 3u * 4u);
    EXPECT_EQ(cc.state_elements, 2u * 3u * 4u);
  }
}

// Reverse passes against central finite differences of <gy, forward(.)>.

namespace {

template <typename F>
double fd(F&& loss, double& slot, double h = 1e-6) {
  const double keep = slot;
  slot = keep + h;
  const double up = loss();
  slot = keep - h;
  const double dn = loss();
  slot = keep;
  return (up - dn) / (2 * h);
}

double dot(const Matrix<double>& a, const Matrix<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void expect_close(double got, double want) {
  EXPECT_LT(std::abs(got - want), 1e-6 * std::max(1.0, std::abs(want))) << got << " vs " << want;
}

}  // namespace

TEST(SelectiveScanBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(20);
  const std::size_t L = 7, D = 3, N = 4;
  auto tr = random_trace(L, D, N, rng);
  auto a = random_matrix(D, N, rng, -2.0, -0.1);
  auto x = random_matrix(L, D, rng);
  auto gy = random_matrix(L, D, rng);
  Matrix<double> states;
  selective_scan_sequential(x, tr, a, nullptr, &states);
  auto g = selective_scan_backward(x, tr, a, states, gy);
  auto loss = [&] { return dot(gy, selective_scan_sequential(x, tr, a)); };
  for (std::size_t i = 0; i < x.size(); ++i) expect_close(g.x[i], fd(loss, x[i]));
  for (std::size_t i = 0; i < tr.delta.size(); ++i) expect_close(g.delta[i], fd(loss, tr.delta[i]));
  for (std::size_t i = 0; i < a.size(); ++i) expect_close(g.a_diag[i], fd(loss, a[i]));
  for (std::size_t i = 0; i < tr.b.size(); ++i) expect_close(g.b[i], fd(loss, tr.b[i]));
  for (std::size_t i = 0; i < tr.c.size(); ++i) expect_close(g.c[i], fd(loss, tr.c[i]));
}

TEST(SsdBackward, SequentialAndChunkedMatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  const std::size_t L = 11, H = 2, P = 2, N = 3;
  auto hp = random_heads(H, P, N, rng);
  auto tr = random_trace(L, H, H * N, rng);
  auto x = random_matrix(L, H * P, rng);
  auto gy = random_matrix(L, H * P, rng);
  Matrix<double> states, bounds;
  ssd_forward_sequential(x, hp, tr, nullptr, &states);
  ssd_forward_chunked(x, hp, tr, ChunkPlan{4}, nullptr, &bounds);
  auto gs = ssd_backward(x, hp, tr, states, gy);
  auto gc = ssd_backward_chunked(x, hp, tr, bounds, ChunkPlan{4}, gy);
  auto loss = [&] { return dot(gy, ssd_forward_sequential(x, hp, tr)); };
  for (auto* g : {&gs, &gc}) {
    for (std::size_t i = 0; i < x.size(); ++i) expect_close(g->x[i], fd(loss, x[i]));
    for (std::size_t i = 0; i < tr.delta.size(); ++i) expect_close(g->delta[i], fd(loss, tr.delta[i]));
    for (std::size_t h = 0; h < H; ++h) expect_close(g->a_scalar[h], fd(loss, hp.a_scalar[h]));
    for (std::size_t i = 0; i < tr.b.size(); ++i) expect_close(g->b[i], fd(loss, tr.b[i]));
    for (std::size_t i = 0; i < tr.c.size(); ++i) expect_close(g->c[i], fd(loss, tr.c[i]));
  }
}

TEST(ZohFactor, DerivativeSeriesBranchIsContinuous) {
  const double delta = 0.37;
  for (double a : {-1e-9, -1e-5, -2.6e-3, -2.8e-3, -0.5, -20.0}) {
    ZohFactor<double> z(delta, a);
    const double h = std::max(1e-7, std::abs(a) * 1e-4);
    ZohFactor<double> up(delta, a + h), dn(delta, a - h);
    EXPECT_NEAR(z.df_da, (up.f - dn.f) / (2 * h), 1e-6 * std::max(1.0, std::abs(z.df_da))) << a;
  }
}
