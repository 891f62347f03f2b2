#pragma once

// Per-chunk operation routing: chunk scores from a mean-pool + linear map,
// argmax choice between the softmax and linear paths, and the
// straight-through backward into the score projection and the inputs.

#include <cmath>
#include <vector>

#include "hattn/ops.hpp"
#include "hattn/tensor.hpp"

namespace hattn {

enum class OpChoice : uint8_t { Softmax = 0, Linear = 1 };

struct ChunkRouting {
  int n_groups = 0;
  int n_chunks = 0;
  std::vector<OpChoice> choice;  // [n_groups x n_chunks]
  // Raw scores [n_groups x n_chunks x 2]; index 0 = softmax, 1 = linear.
  // Stored as double so routing decisions are identical across precisions of
  // downstream compute (only argmax consumes them).
  std::vector<double> scores;

  OpChoice at(int g, int t) const { return choice[static_cast<size_t>(g) * n_chunks + t]; }
  void set(int g, int t, OpChoice c) { choice[static_cast<size_t>(g) * n_chunks + t] = c; }

  double score(int g, int t, int op) const {
    return scores[(static_cast<size_t>(g) * n_chunks + t) * 2 + op];
  }

  static ChunkRouting uniform(int n_groups, int n_chunks, OpChoice c) {
    ChunkRouting r;
    r.n_groups = n_groups;
    r.n_chunks = n_chunks;
    r.choice.assign(static_cast<size_t>(n_groups) * n_chunks, c);
    r.scores.assign(static_cast<size_t>(n_groups) * n_chunks * 2, 0.0);
    return r;
  }
};

// scores[g, t, op] = W_score[:, g*2+op] . mean(X rows of chunk t).
// W_score: [d_model x (n_groups*2)].
template <typename R>
inline Tensor<R> compute_scores(const Tensor<R>& x, const Tensor<R>& w_score, int C) {
  require(x.rank() == 2, "compute_scores: X must be [L x d]");
  const int d = x.dim(1);
  require(w_score.rank() == 2 && w_score.dim(0) == d, "compute_scores: W_score shape mismatch");
  require(w_score.dim(1) % 2 == 0, "compute_scores: W_score column count must be even");
  const int n_groups = w_score.dim(1) / 2;
  Tensor<R> means = mean_pool_chunks(x, C);  // [T x d]
  const int T = means.dim(0);
  Tensor<R> s({n_groups, T, 2});
  for (int t = 0; t < T; ++t) {
    const R* mr = means.row(t);
    for (int g = 0; g < n_groups; ++g)
      for (int op = 0; op < 2; ++op) {
        R acc = 0;
        for (int j = 0; j < d; ++j) acc += w_score(j, g * 2 + op) * mr[j];
        s(g, t, op) = acc;
      }
  }
  return s;
}

// Argmax per (group, chunk); ties go to softmax.
template <typename R>
inline ChunkRouting route(const Tensor<R>& scores) {
  require(scores.rank() == 3 && scores.dim(2) == 2, "route: scores must be [G x T x 2]");
  const int G = scores.dim(0), T = scores.dim(1);
  ChunkRouting r = ChunkRouting::uniform(G, T, OpChoice::Softmax);
  for (int g = 0; g < G; ++g)
    for (int t = 0; t < T; ++t) {
      const R s0 = scores(g, t, 0), s1 = scores(g, t, 1);
      if (std::isnan(static_cast<double>(s0)) || std::isnan(static_cast<double>(s1)))
        throw numeric_error("route: NaN score at group " + std::to_string(g) + " chunk " +
                            std::to_string(t));
      r.set(g, t, s1 > s0 ? OpChoice::Linear : OpChoice::Softmax);
      r.scores[(static_cast<size_t>(g) * T + t) * 2 + 0] = static_cast<double>(s0);
      r.scores[(static_cast<size_t>(g) * T + t) * 2 + 1] = static_cast<double>(s1);
    }
  return r;
}

// Straight-through composition: the chosen op's score receives the routed
// gradient (dscore_nla for softmax-routed chunks, dscore_la for linear-routed
// ones), the unchosen op's score receives zero. That scalar flows through the
// linear map into dW_score and, via the mean-pool adjoint, into dX.
template <typename R>
inline void score_backward(const Tensor<R>& dscore_nla, const Tensor<R>& dscore_la,
                           const ChunkRouting& routing, const Tensor<R>& x,
                           const Tensor<R>& w_score, int C, Tensor<R>* dw_score, Tensor<R>* dx) {
  const int G = routing.n_groups, T = routing.n_chunks;
  require(dscore_nla.rank() == 2 && dscore_nla.dim(0) == G && dscore_nla.dim(1) == T,
          "score_backward: dscore_nla shape mismatch");
  require(dscore_la.rank() == 2 && dscore_la.dim(0) == G && dscore_la.dim(1) == T,
          "score_backward: dscore_la shape mismatch");
  const int d = x.dim(1);
  Tensor<R> means = mean_pool_chunks(x, C);
  Tensor<R> dmeans({T, d});
  for (int g = 0; g < G; ++g)
    for (int t = 0; t < T; ++t) {
      const bool is_sm = routing.at(g, t) == OpChoice::Softmax;
      const R s = is_sm ? dscore_nla(g, t) : dscore_la(g, t);
      if (s == R(0)) continue;
      const int col = g * 2 + (is_sm ? 0 : 1);
      const R* mr = means.row(t);
      R* dmr = dmeans.row(t);
      for (int j = 0; j < d; ++j) {
        if (dw_score) (*dw_score)(j, col) += s * mr[j];
        dmr[j] += s * w_score(j, col);
      }
    }
  if (dx) mean_pool_chunks_grad_acc(dmeans, C, dx);
}

}  // namespace hattn
