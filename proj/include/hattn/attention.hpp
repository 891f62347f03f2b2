#pragma once

// Chunked causal softmax attention with a column-wise routing mask.
//
// Column chunks routed away from the softmax path are skipped outright, both
// forward and backward. The diagonal chunk is always visible: routing scores
// exist only once a chunk is complete, so a chunk cannot be masked for its
// own queries. Forward streams over column chunks with an online
// log-sum-exp; backward recomputes probabilities from the saved lse and
// accumulates, inline, the per-chunk mask gradient
//   dM[i,j] = P[i,j] * (dP[i,j] - dO_i . O_i)
// summed column-chunk-wise into dscore (strictly-earlier chunks only;
// inactive chunks keep gradient zero).

#include <cmath>
#include <limits>
#include <vector>

#include "hattn/flops.hpp"
#include "hattn/router.hpp"
#include "hattn/tensor.hpp"

namespace hattn {

struct ColumnMask {
  int C = 0;
  int n_groups = 0;
  int n_chunks = 0;
  std::vector<uint8_t> chunk_active;  // [n_groups x n_chunks]

  bool active(int g, int t) const {
    return chunk_active[static_cast<size_t>(g) * n_chunks + t] != 0;
  }

  static ColumnMask all_active(int n_groups, int n_chunks, int C) {
    ColumnMask m;
    m.C = C;
    m.n_groups = n_groups;
    m.n_chunks = n_chunks;
    m.chunk_active.assign(static_cast<size_t>(n_groups) * n_chunks, 1);
    return m;
  }

  // Softmax-path visibility: a chunk's columns are visible iff it routed to
  // the softmax op.
  static ColumnMask from_routing(const ChunkRouting& r, int C) {
    ColumnMask m;
    m.C = C;
    m.n_groups = r.n_groups;
    m.n_chunks = r.n_chunks;
    m.chunk_active.resize(static_cast<size_t>(r.n_groups) * r.n_chunks);
    for (size_t i = 0; i < m.chunk_active.size(); ++i)
      m.chunk_active[i] = r.choice[i] == OpChoice::Softmax ? 1 : 0;
    return m;
  }
};

template <typename R>
struct AttnSaved {
  Tensor<R> lse;  // [L x h], log sum of exp over visible columns; -inf if none
  int L = 0, h = 0, d = 0;
};

// Test hook: records per-entry mask gradients for strictly-earlier active
// chunks, summed over heads of each group.
struct MaskGradProbe {
  int L = 0;
  int n_groups = 0;
  std::vector<double> dM;  // [n_groups x L x L]

  void init(int n_groups_, int L_) {
    n_groups = n_groups_;
    L = L_;
    dM.assign(static_cast<size_t>(n_groups) * L * L, 0.0);
  }

  double& at(int g, int i, int j) {
    return dM[(static_cast<size_t>(g) * L + i) * L + j];
  }
};

template <typename R>
inline Tensor<R> masked_attention_forward(const Tensor<R>& Q, const Tensor<R>& K,
                                          const Tensor<R>& V, const ColumnMask& mask,
                                          const std::vector<int>& group_of_head,
                                          AttnSaved<R>* saved, bool include_diagonal = true,
                                          FlopCounter* flops = nullptr) {
  require(Q.rank() == 3 && K.same_shape(Q) && V.same_shape(Q),
          "masked_attention_forward: Q/K/V must share shape [L x h x d]");
  const int L = Q.dim(0), h = Q.dim(1), d = Q.dim(2);
  const int C = mask.C;
  require(C > 0 && L == mask.n_chunks * C,
          "masked_attention_forward: mask covers " + std::to_string(mask.n_chunks * C) +
              " positions, sequence has " + std::to_string(L));
  require(static_cast<int>(group_of_head.size()) == h,
          "masked_attention_forward: group_of_head length mismatch");

  const R scale = R(1) / std::sqrt(static_cast<R>(d));
  Tensor<R> O({L, h, d});
  if (saved) {
    saved->lse = Tensor<R>({L, h});
    saved->L = L;
    saved->h = h;
    saved->d = d;
  }

  std::vector<R> acc(static_cast<size_t>(d));
  std::vector<R> logits(static_cast<size_t>(C));
  for (int hh = 0; hh < h; ++hh) {
    const int g = group_of_head[static_cast<size_t>(hh)];
    require(g >= 0 && g < mask.n_groups, "masked_attention_forward: head group out of range");
    for (int ti = 0; ti < mask.n_chunks; ++ti) {
      for (int i = ti * C; i < ti * C + C; ++i) {
        const R* qi = &Q(i, hh, 0);
        R m = -std::numeric_limits<R>::infinity();
        R l = 0;
        std::fill(acc.begin(), acc.end(), R(0));
        uint64_t pairs_cross = 0, pairs_diag = 0;
        for (int tj = 0; tj <= ti; ++tj) {
          const bool diag = tj == ti;
          if (diag && !include_diagonal) continue;
          if (!diag && !mask.active(g, tj)) continue;  // compute skip
          const int jmin = tj * C;
          const int n = (diag ? i : tj * C + C - 1) - jmin + 1;
          R blk_max = -std::numeric_limits<R>::infinity();
          for (int jj = 0; jj < n; ++jj) {
            const R* kj = &K(jmin + jj, hh, 0);
            R s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            int x = 0;
            for (; x + 4 <= d; x += 4) {
              s0 += qi[x] * kj[x];
              s1 += qi[x + 1] * kj[x + 1];
              s2 += qi[x + 2] * kj[x + 2];
              s3 += qi[x + 3] * kj[x + 3];
            }
            for (; x < d; ++x) s0 += qi[x] * kj[x];
            const R a = ((s0 + s1) + (s2 + s3)) * scale;
            logits[static_cast<size_t>(jj)] = a;
            blk_max = std::max(blk_max, a);
          }
          // One online rescale per block.
          if (blk_max > m) {
            const R corr = std::exp(m - blk_max);
            l *= corr;
            for (int x = 0; x < d; ++x) acc[static_cast<size_t>(x)] *= corr;
            m = blk_max;
          }
          for (int jj = 0; jj < n; ++jj) {
            const R p = std::exp(logits[static_cast<size_t>(jj)] - m);
            l += p;
            const R* vj = &V(jmin + jj, hh, 0);
            for (int x = 0; x < d; ++x) acc[static_cast<size_t>(x)] += p * vj[x];
          }
          if (diag)
            pairs_diag += static_cast<uint64_t>(n);
          else
            pairs_cross += static_cast<uint64_t>(n);
        }
        if (flops) {
          flops->attn_softmax_cross += pairs_cross * 2 * static_cast<uint64_t>(d);
          flops->attn_softmax_diag += pairs_diag * 2 * static_cast<uint64_t>(d);
        }
        R* oi = &O(i, hh, 0);
        if (l > R(0)) {
          const R inv = R(1) / l;
          for (int x = 0; x < d; ++x) oi[x] = acc[static_cast<size_t>(x)] * inv;
          if (saved) saved->lse(i, hh) = m + std::log(l);
        } else {
          // Only reachable with the diagonal disabled (ablation); normal
          // routing guarantees self-visibility.
          require(!include_diagonal, "masked_attention_forward: empty softmax row");
          for (int x = 0; x < d; ++x) oi[x] = R(0);
          if (saved) saved->lse(i, hh) = -std::numeric_limits<R>::infinity();
        }
      }
    }
  }
  assert_finite(O, "masked_attention_forward");
  return O;
}

// Exact gradients of the masked forward plus the per-chunk routing-score
// gradient dscore_nla[g,t] (zero for inactive chunks and for the diagonal,
// which carries no routing freedom).
template <typename R>
inline void masked_attention_backward(const Tensor<R>& dO, const AttnSaved<R>& saved,
                                      const Tensor<R>& Q, const Tensor<R>& K, const Tensor<R>& V,
                                      const Tensor<R>& O, const ColumnMask& mask,
                                      const std::vector<int>& group_of_head, Tensor<R>* dQ,
                                      Tensor<R>* dK, Tensor<R>* dV, Tensor<R>* dscore_nla,
                                      bool include_diagonal = true, MaskGradProbe* probe = nullptr,
                                      FlopCounter* flops = nullptr) {
  const int L = Q.dim(0), h = Q.dim(1), d = Q.dim(2);
  require(saved.L == L && saved.h == h && saved.d == d,
          "masked_attention_backward: saved state does not match inputs");
  require(dO.same_shape(Q), "masked_attention_backward: dO shape mismatch");
  const int C = mask.C;
  const R scale = R(1) / std::sqrt(static_cast<R>(d));
  if (dscore_nla)
    require(dscore_nla->dim(0) == mask.n_groups && dscore_nla->dim(1) == mask.n_chunks,
            "masked_attention_backward: dscore shape mismatch");
  if (probe) probe->init(mask.n_groups, L);

  std::vector<R> dqi_acc(static_cast<size_t>(d));
  std::vector<R> pbuf(static_cast<size_t>(C)), dabuf(static_cast<size_t>(C));
  for (int hh = 0; hh < h; ++hh) {
    const int g = group_of_head[static_cast<size_t>(hh)];
    for (int ti = 0; ti < mask.n_chunks; ++ti) {
      for (int i = ti * C; i < ti * C + C; ++i) {
        const R lse = saved.lse(i, hh);
        if (!(lse > -std::numeric_limits<R>::infinity())) continue;  // empty row
        const R* qi = &Q(i, hh, 0);
        const R* doi = &dO(i, hh, 0);
        const R* oi = &O(i, hh, 0);
        R D = 0;
        for (int x = 0; x < d; ++x) D += doi[x] * oi[x];
        std::fill(dqi_acc.begin(), dqi_acc.end(), R(0));
        uint64_t pairs_cross = 0, pairs_diag = 0;
        for (int tj = 0; tj <= ti; ++tj) {
          const bool diag = tj == ti;
          if (diag && !include_diagonal) continue;
          if (!diag && !mask.active(g, tj)) continue;
          const int jmin = tj * C;
          const int n = (diag ? i : tj * C + C - 1) - jmin + 1;
          for (int jj = 0; jj < n; ++jj) {
            const R* kj = &K(jmin + jj, hh, 0);
            const R* vj = &V(jmin + jj, hh, 0);
            R a0 = 0, a1 = 0, p0 = 0, p1 = 0;
            int x = 0;
            for (; x + 2 <= d; x += 2) {
              a0 += qi[x] * kj[x];
              a1 += qi[x + 1] * kj[x + 1];
              p0 += doi[x] * vj[x];
              p1 += doi[x + 1] * vj[x + 1];
            }
            for (; x < d; ++x) {
              a0 += qi[x] * kj[x];
              p0 += doi[x] * vj[x];
            }
            const R p = std::exp((a0 + a1) * scale - lse);
            pbuf[static_cast<size_t>(jj)] = p;
            dabuf[static_cast<size_t>(jj)] = p * ((p0 + p1) - D);
          }
          R block_sum = 0;
          for (int jj = 0; jj < n; ++jj) {
            const int j = jmin + jj;
            const R p = pbuf[static_cast<size_t>(jj)];
            const R da = dabuf[static_cast<size_t>(jj)];
            const R das = da * scale;
            const R* kj = &K(j, hh, 0);
            R* dkj = &(*dK)(j, hh, 0);
            R* dvj = &(*dV)(j, hh, 0);
            for (int x = 0; x < d; ++x) {
              dqi_acc[static_cast<size_t>(x)] += das * kj[x];
              dkj[x] += das * qi[x];
              dvj[x] += p * doi[x];
            }
            if (!diag) {
              block_sum += da;
              if (probe) probe->at(g, i, j) += static_cast<double>(da);
            }
          }
          if (!diag) {
            if (dscore_nla) (*dscore_nla)(g, tj) += block_sum;
            pairs_cross += static_cast<uint64_t>(n);
          } else {
            pairs_diag += static_cast<uint64_t>(n);
          }
        }
        R* dqi = &(*dQ)(i, hh, 0);
        for (int x = 0; x < d; ++x) dqi[x] += dqi_acc[static_cast<size_t>(x)];
        if (flops) {
          // QK recompute, dP, dQ/dK, dV: ~5d multiply-adds per pair.
          flops->attn_softmax_cross += pairs_cross * 5 * static_cast<uint64_t>(d);
          flops->attn_softmax_diag += pairs_diag * 5 * static_cast<uint64_t>(d);
        }
      }
    }
  }
}

}  // namespace hattn
