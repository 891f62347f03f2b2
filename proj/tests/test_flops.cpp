// Multiply-add accounting: exact counts on hand-sized attention shapes, the
// linear/quadratic scaling of the routed subtotal, and the two-constant cost
// fit on a small grid.

#include <gtest/gtest.h>

#include "hattn/bench.hpp"
#include "oracles.hpp"

using namespace hattn;
using oracle::fill_normal;

namespace {

ModelConfig bench_cfg() {
  ModelConfig mc;
  mc.vocab = 64;
  mc.n_layers = 1;
  mc.block.d_model = 16;
  mc.block.h_softmax = 2;
  mc.block.h_lin = 1;
  mc.block.d_head = 8;
  mc.block.C = 8;
  mc.block.c = 8;
  mc.seed = 6;
  return mc;
}

}  // namespace

TEST(Flops, SoftmaxPairCountIsExact) {
  Rng rng(3);
  const int L = 16, h = 2, d = 8, C = 4, T = L / C;
  Tensor<double> Q({L, h, d}), K({L, h, d}), V({L, h, d});
  fill_normal(Q, rng);
  fill_normal(K, rng);
  fill_normal(V, rng);
  std::vector<int> groups{0, 1};
  ChunkRouting r = ChunkRouting::uniform(2, T, OpChoice::Softmax);
  r.set(0, 0, OpChoice::Linear);
  const ColumnMask mask = ColumnMask::from_routing(r, C);
  FlopCounter fc;
  masked_attention_forward(Q, K, V, mask, groups, static_cast<AttnSaved<double>*>(nullptr), true,
                           &fc);
  // Diagonal: per head, per chunk, sum_{i=1..C} i = C(C+1)/2 pairs.
  const uint64_t diag_pairs = static_cast<uint64_t>(h) * T * C * (C + 1) / 2;
  EXPECT_EQ(fc.attn_softmax_diag, diag_pairs * 2 * d);
  // Cross: group 0 has chunk 0 inactive; active-earlier pairs per row chunk.
  uint64_t cross_pairs = 0;
  for (int g = 0; g < 2; ++g)
    for (int ti = 0; ti < T; ++ti)
      for (int tj = 0; tj < ti; ++tj)
        if (r.at(g, tj) == OpChoice::Softmax) cross_pairs += C * C;
  EXPECT_EQ(fc.attn_softmax_cross, cross_pairs * 2 * d);
}

TEST(Flops, LinearUpdateCountsOnlyCommittedFolds) {
  Rng rng(5);
  const int L = 32, h = 1, d = 8, C = 8, T = L / C;
  Tensor<double> Q({L, h, d}), K({L, h, d}), V({L, h, d});
  Tensor<double> alpha = Tensor<double>::full({L, h}, 0.9);
  Tensor<double> beta = Tensor<double>::full({L, h}, 0.5);
  fill_normal(Q, rng);
  fill_normal(K, rng);
  fill_normal(V, rng);
  ChunkRouting r = ChunkRouting::uniform(1, T, OpChoice::Softmax);
  r.set(0, 1, OpChoice::Linear);
  r.set(0, 3, OpChoice::Linear);
  FlopCounter fc;
  gdn_chunkwise_forward(Q, K, V, alpha, beta, r, C, C, static_cast<const Tensor<double>*>(nullptr),
                        static_cast<GdnSaved<double>*>(nullptr), GdnFlags{}, &fc);
  // Two linear chunks, one fold each: C*d_v*d_k + d_v*d_k multiply-adds.
  const uint64_t per_fold = static_cast<uint64_t>(C) * d * d + static_cast<uint64_t>(d) * d;
  EXPECT_EQ(fc.attn_linear_update, 2 * per_fold);
  EXPECT_GT(fc.attn_linear_other, 0u);
}

TEST(Flops, RoutedSubtotalScalesAsExpected) {
  ModelConfig mc = bench_cfg();
  ParamStore<float> ps;
  init_params(ps, mc);
  auto counted = [&](int L, double p) {
    FlopCounter fc;
    Rng rng(7);
    std::vector<int> toks(static_cast<size_t>(L));
    for (int& t : toks) t = rng.below(mc.vocab);
    model_forward(toks, ps, mc, RoutingPolicy::with_fraction(p),
                  static_cast<ModelSaved<float>*>(nullptr), nullptr, &fc);
    return static_cast<double>(fc.attention_routed());
  };
  // All-linear: exactly linear in L.
  EXPECT_NEAR(counted(256, 0.0) / counted(128, 0.0), 2.0, 1e-9);
  // All-softmax: ratio approaches 4 from below as L grows.
  const double r1 = counted(512, 1.0) / counted(256, 1.0);
  EXPECT_GT(r1, 3.6);
  EXPECT_LT(r1, 4.4);
}

TEST(Flops, CostFitTracksCountsWithinFivePercent) {
  ModelConfig mc = bench_cfg();
  ParamStore<float> ps;
  init_params(ps, mc);
  std::vector<BenchRow> rows;
  for (int L : {128, 256, 512})
    for (double p : {0.0, 0.25, 0.5, 1.0})
      rows.push_back(bench_point(ps, mc, L, RoutingPolicy::with_fraction(p), "fraction", p, 0,
                                 false, 99));
  const BenchFit fit = fit_cost_model(rows, mc.block.C);
  ASSERT_TRUE(fit.valid);
  for (const BenchRow& r : rows) {
    EXPECT_NEAR(r.predicted, static_cast<double>(r.counted), 0.05 * static_cast<double>(r.counted))
        << "L=" << r.L << " p=" << r.p;
  }
}

TEST(Flops, CountsAreDeterministic) {
  ModelConfig mc = bench_cfg();
  ParamStore<float> ps;
  init_params(ps, mc);
  auto run = [&] {
    FlopCounter fc;
    std::vector<int> toks(64, 3);
    model_forward(toks, ps, mc, RoutingMode::Learned, static_cast<ModelSaved<float>*>(nullptr),
                  nullptr, &fc);
    return fc.total();
  };
  EXPECT_EQ(run(), run());
}
