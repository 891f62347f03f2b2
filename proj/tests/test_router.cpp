// Attention score layer: chunk scores, argmax routing with the documented
// tie-break, and the straight-through backward checked by hand and against
// finite differences of the differentiable score map.

#include <gtest/gtest.h>

#include <cmath>

#include "hattn/router.hpp"
#include "oracles.hpp"

using namespace hattn;
using oracle::central_diff;
using oracle::fill_normal;
using oracle::rel_err;

using T64 = Tensor<double>;

TEST(ComputeScores, SpecExamples) {
  // Zero map -> all scores zero.
  T64 x({8, 3});
  Rng rng(3);
  fill_normal(x, rng);
  T64 w0({3, 4});
  T64 s0 = compute_scores(x, w0, 4);
  for (double v : s0.data) EXPECT_EQ(v, 0.0);

  // Constant rows per chunk -> score is the linear map of that row.
  T64 xc({4, 2});
  for (int i = 0; i < 4; ++i) {
    xc(i, 0) = 1.0;
    xc(i, 1) = 2.0;
  }
  T64 w({2, 2});
  w(0, 0) = 3.0;
  w(1, 0) = -1.0;
  w(0, 1) = 0.5;
  w(1, 1) = 0.25;
  T64 s = compute_scores(xc, w, 4);
  EXPECT_DOUBLE_EQ(s(0, 0, 0), 1.0);  // 3*1 + (-1)*2
  EXPECT_DOUBLE_EQ(s(0, 0, 1), 1.0);  // 0.5 + 0.5
}

TEST(Route, ArgmaxAndTieBreak) {
  T64 s({1, 3, 2});
  s(0, 0, 0) = 0.2;
  s(0, 0, 1) = 0.7;  // linear
  s(0, 1, 0) = 0.5;
  s(0, 1, 1) = 0.5;  // tie -> softmax
  s(0, 2, 0) = 1.5;
  s(0, 2, 1) = 0.5;  // softmax
  ChunkRouting r = route(s);
  EXPECT_EQ(r.at(0, 0), OpChoice::Linear);
  EXPECT_EQ(r.at(0, 1), OpChoice::Softmax);
  EXPECT_EQ(r.at(0, 2), OpChoice::Softmax);

  // Shift invariance: adding a constant per chunk never changes the choice.
  T64 s2 = s;
  for (int t = 0; t < 3; ++t) {
    s2(0, t, 0) += 10.0 * (t + 1);
    s2(0, t, 1) += 10.0 * (t + 1);
  }
  ChunkRouting r2 = route(s2);
  for (int t = 0; t < 3; ++t) EXPECT_EQ(r.at(0, t), r2.at(0, t));
}

TEST(Route, NanScoreThrows) {
  T64 s({1, 1, 2});
  s(0, 0, 0) = std::nan("");
  EXPECT_THROW(route(s), numeric_error);
}

TEST(Route, DeterministicOverRepeats) {
  Rng rng(17);
  T64 x({32, 6}), w({6, 4});
  fill_normal(x, rng);
  fill_normal(w, rng);
  ChunkRouting a = route(compute_scores(x, w, 8));
  ChunkRouting b = route(compute_scores(x, w, 8));
  EXPECT_EQ(a.choice, b.choice);
}

TEST(ScoreBackward, ZeroUpstreamGivesZero) {
  Rng rng(19);
  T64 x({16, 4}), w({4, 4});
  fill_normal(x, rng);
  fill_normal(w, rng);
  const ChunkRouting r = route(compute_scores(x, w, 4));
  T64 dnla({2, 4}), dla({2, 4}), dw({4, 4}), dx({16, 4});
  score_backward(dnla, dla, r, x, w, 4, &dw, &dx);
  for (double v : dw.data) EXPECT_EQ(v, 0.0);
  for (double v : dx.data) EXPECT_EQ(v, 0.0);
}

TEST(ScoreBackward, HandChainRuleSingleChunk) {
  const int C = 4, d = 3;
  T64 x({C, d});
  Rng rng(23);
  fill_normal(x, rng);
  T64 w({d, 2});
  fill_normal(w, rng);
  ChunkRouting r = ChunkRouting::uniform(1, 1, OpChoice::Softmax);
  T64 dnla({1, 1}), dla({1, 1});
  dnla(0, 0) = 0.37;  // chosen op is softmax -> this value routes through
  dla(0, 0) = 123.0;  // unchosen: must be ignored

  T64 dw({d, 2}), dx({C, d});
  score_backward(dnla, dla, r, x, w, C, &dw, &dx);

  for (int j = 0; j < d; ++j) {
    double mean = 0;
    for (int i = 0; i < C; ++i) mean += x(i, j);
    mean /= C;
    EXPECT_NEAR(dw(j, 0), 0.37 * mean, 1e-12);
    EXPECT_EQ(dw(j, 1), 0.0);  // unchosen column untouched
  }
  for (int i = 0; i < C; ++i)
    for (int j = 0; j < d; ++j) EXPECT_NEAR(dx(i, j), 0.37 / C * w(j, 0), 1e-12);
}

// The straight-through map is linear in W_score and X once the routing is
// fixed: check against FD of sum_(g,t) s[g,t] * score[g,t,chosen].
TEST(ScoreBackward, MatchesFiniteDifferencesOfChosenScores) {
  Rng rng(29);
  const int L = 24, d = 5, C = 4, G = 2, T = L / C;
  T64 x({L, d}), w({d, G * 2});
  fill_normal(x, rng);
  fill_normal(w, rng);
  const ChunkRouting r = route(compute_scores(x, w, C));
  T64 dnla({G, T}), dla({G, T});
  fill_normal(dnla, rng);
  fill_normal(dla, rng);
  T64 dw({d, G * 2}), dx({L, d});
  score_backward(dnla, dla, r, x, w, C, &dw, &dx);

  auto loss = [&] {
    T64 s = compute_scores(x, w, C);
    double acc = 0;
    for (int g = 0; g < G; ++g)
      for (int t = 0; t < T; ++t) {
        const bool sm = r.at(g, t) == OpChoice::Softmax;
        acc += (sm ? dnla(g, t) : dla(g, t)) * s(g, t, sm ? 0 : 1);
      }
    return acc;
  };
  for (size_t i = 0; i < w.data.size(); ++i)
    EXPECT_LT(rel_err(dw.data[i], central_diff(loss, &w.data[i], 1e-6)), 1e-6);
  for (size_t i = 0; i < x.data.size(); ++i) {
    const double fd = central_diff(loss, &x.data[i], 1e-6);
    if (std::abs(fd) < 1e-12 && std::abs(dx.data[i]) < 1e-12) continue;
    EXPECT_LT(rel_err(dx.data[i], fd), 1e-6);
  }
}

TEST(ScoreBackward, ExactlyOneNonzeroPerChunk) {
  // Gradient sparsity: with distinct upstream values, only the chosen op's
  // column of W_score receives gradient from each chunk.
  Rng rng(31);
  const int L = 8, d = 3, C = 4;
  T64 x({L, d}), w({d, 2});
  fill_normal(x, rng);
  fill_normal(w, rng);
  const ChunkRouting r = route(compute_scores(x, w, C));
  for (int t = 0; t < 2; ++t) {
    T64 dnla({1, 2}), dla({1, 2});
    dnla(0, t) = 1.0;
    dla(0, t) = 1.0;
    T64 dw({d, 2}), dx({L, d});
    score_backward(dnla, dla, r, x, w, C, &dw, &dx);
    const int chosen = r.at(0, t) == OpChoice::Softmax ? 0 : 1;
    double chosen_norm = 0, other_norm = 0;
    for (int j = 0; j < d; ++j) {
      chosen_norm += std::abs(dw(j, chosen));
      other_norm += std::abs(dw(j, 1 - chosen));
    }
    EXPECT_GT(chosen_norm, 0.0);
    EXPECT_EQ(other_norm, 0.0);
  }
}
