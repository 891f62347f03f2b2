#pragma once

// Gated DeltaNet linear attention.
//
// Recurrent rule per token (state S maps key space to value space, o = S q):
//   S' = alpha * (S - beta * (S k) k^T) + beta * v k^T,   o = S' q
//
// The chunkwise form processes sub-chunks of size c in parallel form via the
// WY trick: solve the unit-lower-triangular system (I + T) W = B by forward
// substitution, where
//   T[i][j] = beta_i * (g_i/g_j) * (k_i . k_j)        (j < i)
//   B[i]    = beta_i * (v_i - g_i * S k_i)
//   g_i     = prod_{j<=i} alpha_j   (within the sub-chunk)
// giving outputs o_i = g_i * S q_i + sum_{j<=i} (g_i/g_j)(q_i . k_j) w_j and
// the state fold S_out = g_{n-1} S + sum_j (g_{n-1}/g_j) w_j k_j^T.
//
// Routing gates only the committed state handoff: every chunk computes its
// within-chunk outputs from the tentatively updated state, but a chunk that
// routed to the softmax op rolls its writes back and commits decay alone
// (S_next = prod(alpha) * S_enter). Decay ratios are carried in log space.

#include <cmath>
#include <vector>

#include "hattn/flops.hpp"
#include "hattn/router.hpp"
#include "hattn/tensor.hpp"

namespace hattn {

struct GdnFlags {
  bool always_decay = true;  // decay the state through softmax-routed chunks
  bool inner_output = true;  // include within-chunk correlations in the output
};

// One recurrent update on a single head slice. S, S_new: [d_v x d_k].
template <typename R>
inline void gdn_recurrent_step(const R* S, const R* q, const R* k, const R* v, R alpha, R beta,
                               int d_k, int d_v, R* o, R* S_new) {
  std::vector<R> sk(static_cast<size_t>(d_v), R(0));
  for (int a = 0; a < d_v; ++a) {
    const R* Sr = S + static_cast<size_t>(a) * d_k;
    R acc = 0;
    for (int b = 0; b < d_k; ++b) acc += Sr[b] * k[b];
    sk[static_cast<size_t>(a)] = acc;
  }
  for (int a = 0; a < d_v; ++a) {
    const R* Sr = S + static_cast<size_t>(a) * d_k;
    R* Nr = S_new + static_cast<size_t>(a) * d_k;
    const R skb = beta * sk[static_cast<size_t>(a)];
    const R vb = beta * v[a];
    for (int b = 0; b < d_k; ++b) Nr[b] = alpha * (Sr[b] - skb * k[b]) + vb * k[b];
  }
  for (int a = 0; a < d_v; ++a) {
    const R* Nr = S_new + static_cast<size_t>(a) * d_k;
    R acc = 0;
    for (int b = 0; b < d_k; ++b) acc += Nr[b] * q[b];
    o[a] = acc;
  }
}

template <typename R>
struct GdnSaved {
  // Committed states at every routing-chunk boundary: [(T+1) x h x d_v x d_k].
  Tensor<R> boundaries;
  int C = 0, c = 0, L = 0, h = 0, d_k = 0, d_v = 0;
};

namespace detail {

// Recomputable per-sub-chunk intermediates.
template <typename R>
struct SubWork {
  int i0 = 0;  // first row (global)
  int n = 0;
  std::vector<R> S_in;  // entering state, d_v x d_k
  std::vector<R> lg;    // cumulative log decay, n
  std::vector<R> Tm;    // n x n, strictly lower
  std::vector<R> W;     // n x d_v
  std::vector<R> Sk;    // n x d_v, S_in k_i
  std::vector<R> Sq;    // n x d_v, S_in q_i
};

// Runs one sub-chunk from state S (d_v x d_k, updated in place when
// `fold` is set). Optionally writes outputs rows into O and fills `work`.
template <typename R>
inline void run_subchunk(const Tensor<R>& Q, const Tensor<R>& K, const Tensor<R>& V,
                         const Tensor<R>& alpha, const Tensor<R>& beta, int head, int i0, int n,
                         std::vector<R>& S, bool fold, Tensor<R>* O, SubWork<R>* work,
                         uint64_t* fold_macs, uint64_t* other_macs) {
  const int d_k = Q.dim(2), d_v = V.dim(2);
  std::vector<R> lg(static_cast<size_t>(n));
  {
    R acc = 0;
    for (int i = 0; i < n; ++i) {
      acc += std::log(alpha(i0 + i, head));
      lg[static_cast<size_t>(i)] = acc;
    }
  }
  std::vector<R> Sk(static_cast<size_t>(n) * d_v), Sq(static_cast<size_t>(n) * d_v);
  for (int i = 0; i < n; ++i) {
    const R* ki = &K(i0 + i, head, 0);
    const R* qi = &Q(i0 + i, head, 0);
    for (int a = 0; a < d_v; ++a) {
      const R* Sr = S.data() + static_cast<size_t>(a) * d_k;
      R sk = 0, sq = 0;
      for (int b = 0; b < d_k; ++b) {
        sk += Sr[b] * ki[b];
        sq += Sr[b] * qi[b];
      }
      Sk[static_cast<size_t>(i) * d_v + a] = sk;
      Sq[static_cast<size_t>(i) * d_v + a] = sq;
    }
  }
  if (other_macs) *other_macs += static_cast<uint64_t>(n) * d_v * d_k * 2;

  std::vector<R> Tm(static_cast<size_t>(n) * n, R(0));
  for (int i = 1; i < n; ++i) {
    const R* ki = &K(i0 + i, head, 0);
    const R bi = beta(i0 + i, head);
    for (int j = 0; j < i; ++j) {
      const R* kj = &K(i0 + j, head, 0);
      R kk = 0;
      for (int b = 0; b < d_k; ++b) kk += ki[b] * kj[b];
      Tm[static_cast<size_t>(i) * n + j] =
          bi * std::exp(lg[static_cast<size_t>(i)] - lg[static_cast<size_t>(j)]) * kk;
    }
  }
  if (other_macs) *other_macs += static_cast<uint64_t>(n) * (n - 1) / 2 * d_k;

  // (I + T) W = B by forward substitution.
  std::vector<R> W(static_cast<size_t>(n) * d_v);
  for (int i = 0; i < n; ++i) {
    const R bi = beta(i0 + i, head);
    const R gi = std::exp(lg[static_cast<size_t>(i)]);
    const R* vi = &V(i0 + i, head, 0);
    R* wi = W.data() + static_cast<size_t>(i) * d_v;
    for (int a = 0; a < d_v; ++a) wi[a] = bi * (vi[a] - gi * Sk[static_cast<size_t>(i) * d_v + a]);
    for (int j = 0; j < i; ++j) {
      const R t = Tm[static_cast<size_t>(i) * n + j];
      if (t == R(0)) continue;
      const R* wj = W.data() + static_cast<size_t>(j) * d_v;
      for (int a = 0; a < d_v; ++a) wi[a] -= t * wj[a];
    }
  }
  if (other_macs) *other_macs += static_cast<uint64_t>(n) * (n - 1) / 2 * d_v;

  if (O) {
    for (int i = 0; i < n; ++i) {
      const R* qi = &Q(i0 + i, head, 0);
      const R gi = std::exp(lg[static_cast<size_t>(i)]);
      R* oi = &(*O)(i0 + i, head, 0);
      for (int a = 0; a < d_v; ++a) oi[a] += gi * Sq[static_cast<size_t>(i) * d_v + a];
      for (int j = 0; j <= i; ++j) {
        const R* kj = &K(i0 + j, head, 0);
        R qk = 0;
        for (int b = 0; b < d_k; ++b) qk += qi[b] * kj[b];
        const R a_ij = std::exp(lg[static_cast<size_t>(i)] - lg[static_cast<size_t>(j)]) * qk;
        const R* wj = W.data() + static_cast<size_t>(j) * d_v;
        for (int a = 0; a < d_v; ++a) oi[a] += a_ij * wj[a];
      }
    }
    if (other_macs)
      *other_macs += static_cast<uint64_t>(n) * (n + 1) / 2 * (d_k + d_v) +
                     static_cast<uint64_t>(n) * d_v;
  }

  if (work) {
    work->i0 = i0;
    work->n = n;
    work->S_in = S;
    work->lg = lg;
    work->Tm = Tm;
    work->W = W;
    work->Sk = Sk;
    work->Sq = Sq;
  }

  if (fold) {
    const R gn = std::exp(lg[static_cast<size_t>(n - 1)]);
    for (size_t idx = 0; idx < S.size(); ++idx) S[idx] *= gn;
    for (int j = 0; j < n; ++j) {
      const R scale = std::exp(lg[static_cast<size_t>(n - 1)] - lg[static_cast<size_t>(j)]);
      const R* kj = &K(i0 + j, head, 0);
      const R* wj = W.data() + static_cast<size_t>(j) * d_v;
      for (int a = 0; a < d_v; ++a) {
        R* Sr = S.data() + static_cast<size_t>(a) * d_k;
        const R ws = scale * wj[a];
        for (int b = 0; b < d_k; ++b) Sr[b] += ws * kj[b];
      }
    }
    if (fold_macs)
      *fold_macs += static_cast<uint64_t>(n) * d_v * d_k + static_cast<uint64_t>(d_v) * d_k;
  }
}

}  // namespace detail

// Q, K: [L x h x d_k]; V: [L x h x d_v]; alpha, beta: [L x h].
// Each head is its own routing group. S0 (optional): [h x d_v x d_k].
template <typename R>
inline Tensor<R> gdn_chunkwise_forward(const Tensor<R>& Q, const Tensor<R>& K, const Tensor<R>& V,
                                       const Tensor<R>& alpha, const Tensor<R>& beta,
                                       const ChunkRouting& routing, int C, int c,
                                       const Tensor<R>* S0, GdnSaved<R>* saved, GdnFlags flags = {},
                                       FlopCounter* flops = nullptr) {
  require(Q.rank() == 3 && K.rank() == 3 && V.rank() == 3, "gdn: Q/K/V must be rank 3");
  const int L = Q.dim(0), h = Q.dim(1), d_k = Q.dim(2), d_v = V.dim(2);
  require(K.dim(0) == L && K.dim(1) == h && K.dim(2) == d_k, "gdn: K shape mismatch");
  require(V.dim(0) == L && V.dim(1) == h, "gdn: V shape mismatch");
  require(alpha.rank() == 2 && alpha.dim(0) == L && alpha.dim(1) == h, "gdn: alpha shape mismatch");
  require(beta.same_shape(alpha), "gdn: beta shape mismatch");
  require(C >= 1 && L % C == 0, "gdn: L must be divisible by the routing chunk size");
  require(c >= 1 && C % c == 0, "gdn: sub-chunk size must divide the routing chunk size");
  const int T = L / C;
  require(routing.n_groups == h && routing.n_chunks == T, "gdn: routing does not cover inputs");
  if (S0) require(S0->rank() == 3 && S0->dim(0) == h && S0->dim(1) == d_v && S0->dim(2) == d_k,
                  "gdn: S0 shape mismatch");

  Tensor<R> O({L, h, d_v});
  if (saved) {
    saved->boundaries = Tensor<R>({T + 1, h, d_v, d_k});
    saved->C = C;
    saved->c = c;
    saved->L = L;
    saved->h = h;
    saved->d_k = d_k;
    saved->d_v = d_v;
  }

  std::vector<R> S(static_cast<size_t>(d_v) * d_k);
  for (int head = 0; head < h; ++head) {
    if (S0) {
      const R* s0 = &(*S0)(head, 0, 0);
      std::copy(s0, s0 + S.size(), S.begin());
    } else {
      std::fill(S.begin(), S.end(), R(0));
    }
    uint64_t fold_macs = 0, other_macs = 0;
    for (int t = 0; t < T; ++t) {
      if (saved)
        std::copy(S.begin(), S.end(), &saved->boundaries(t, head, 0, 0));
      const bool linear = routing.at(head, t) == OpChoice::Linear;

      if (!flags.inner_output) {
        // Cross-chunk term only: o_i = (decay from chunk entry) * S_enter q_i.
        R cum = 0;
        for (int i = t * C; i < t * C + C; ++i) {
          cum += std::log(alpha(i, head));
          const R gi = std::exp(cum);
          const R* qi = &Q(i, head, 0);
          R* oi = &O(i, head, 0);
          for (int a = 0; a < d_v; ++a) {
            const R* Sr = S.data() + static_cast<size_t>(a) * d_k;
            R acc = 0;
            for (int b = 0; b < d_k; ++b) acc += Sr[b] * qi[b];
            oi[a] = gi * acc;
          }
        }
        other_macs += static_cast<uint64_t>(C) * d_v * d_k;
        if (linear) {
          std::vector<R> St = S;  // advance writes on a scratch copy
          for (int s = 0; s < C / c; ++s)
            detail::run_subchunk(Q, K, V, alpha, beta, head, t * C + s * c, c, St, true,
                                 static_cast<Tensor<R>*>(nullptr),
                                 static_cast<detail::SubWork<R>*>(nullptr), &fold_macs,
                                 &other_macs);
          S = St;
          continue;
        }
      } else {
        std::vector<R> St = S;
        for (int s = 0; s < C / c; ++s) {
          const bool last = s == C / c - 1;
          // The final fold of a softmax-routed chunk is never consumed.
          const bool fold = linear || !last;
          detail::run_subchunk(Q, K, V, alpha, beta, head, t * C + s * c, c, St, fold, &O,
                               static_cast<detail::SubWork<R>*>(nullptr),
                               linear ? &fold_macs : &other_macs, &other_macs);
        }
        if (linear) {
          S = St;
          continue;
        }
      }

      // Softmax-routed: commit decay only (Eq.-20-style always-on decay).
      if (flags.always_decay) {
        R prod = R(1);
        for (int i = t * C; i < t * C + C; ++i) prod *= alpha(i, head);
        for (R& v : S) v *= prod;
        other_macs += static_cast<uint64_t>(d_v) * d_k;
      }
    }
    if (saved)
      std::copy(S.begin(), S.end(), &saved->boundaries(T, head, 0, 0));
    if (flops) {
      flops->attn_linear_update += fold_macs;
      flops->attn_linear_other += other_macs;
    }
  }
  assert_finite(O, "gdn_chunkwise_forward");
  return O;
}

namespace detail {

// Reverse-mode sweep over one sub-chunk. dS holds the adjoint of the
// sub-chunk's outgoing state on entry (zero if the fold was skipped) and the
// adjoint of its entering state on exit. dO may be null.
template <typename R>
inline void backward_subchunk(const Tensor<R>& Q, const Tensor<R>& K, const Tensor<R>& V,
                              const Tensor<R>& alpha, const Tensor<R>& beta, int head,
                              const SubWork<R>& wk, const Tensor<R>* dO, bool folded,
                              std::vector<R>& dS, Tensor<R>* dQ, Tensor<R>* dK, Tensor<R>* dV,
                              Tensor<R>* dalpha, Tensor<R>* dbeta) {
  const int d_k = Q.dim(2), d_v = V.dim(2);
  const int n = wk.n, i0 = wk.i0;
  const R* S = wk.S_in.data();

  std::vector<R> dW(static_cast<size_t>(n) * d_v, R(0));
  std::vector<R> dlg(static_cast<size_t>(n), R(0));
  std::vector<R> dS_in(static_cast<size_t>(d_v) * d_k, R(0));

  auto r_of = [&](int i, int j) {
    return std::exp(wk.lg[static_cast<size_t>(i)] - wk.lg[static_cast<size_t>(j)]);
  };

  if (folded) {
    // S_out = g_{n-1} S + sum_j r(n-1,j) w_j k_j^T
    const R gn = std::exp(wk.lg[static_cast<size_t>(n - 1)]);
    R dot = 0;
    for (size_t idx = 0; idx < dS.size(); ++idx) {
      dS_in[idx] += gn * dS[idx];
      dot += dS[idx] * S[idx];
    }
    dlg[static_cast<size_t>(n - 1)] += gn * dot;
    for (int j = 0; j < n; ++j) {
      const R rj = r_of(n - 1, j);
      const R* kj = &K(i0 + j, head, 0);
      const R* wj = wk.W.data() + static_cast<size_t>(j) * d_v;
      R* dwj = dW.data() + static_cast<size_t>(j) * d_v;
      R* dkj = &(*dK)(i0 + j, head, 0);
      R drj = 0;
      for (int a = 0; a < d_v; ++a) {
        const R* dSr = dS.data() + static_cast<size_t>(a) * d_k;
        R u = 0;
        for (int b = 0; b < d_k; ++b) u += dSr[b] * kj[b];
        dwj[a] += rj * u;
        drj += u * wj[a];
        const R wa = rj * wj[a];
        for (int b = 0; b < d_k; ++b) dkj[b] += wa * dSr[b];
      }
      dlg[static_cast<size_t>(n - 1)] += rj * drj;
      dlg[static_cast<size_t>(j)] -= rj * drj;
    }
  }

  if (dO) {
    // o_i = g_i (S q_i) + sum_{j<=i} r(i,j)(q_i . k_j) w_j
    for (int i = 0; i < n; ++i) {
      const R* doi = &(*dO)(i0 + i, head, 0);
      const R* qi = &Q(i0 + i, head, 0);
      const R gi = std::exp(wk.lg[static_cast<size_t>(i)]);
      R* dqi = &(*dQ)(i0 + i, head, 0);
      R dot = 0;
      for (int a = 0; a < d_v; ++a) dot += doi[a] * wk.Sq[static_cast<size_t>(i) * d_v + a];
      dlg[static_cast<size_t>(i)] += gi * dot;
      for (int a = 0; a < d_v; ++a) {
        R* dSr = dS_in.data() + static_cast<size_t>(a) * d_k;
        const R* Sr = S + static_cast<size_t>(a) * d_k;
        const R da = gi * doi[a];
        for (int b = 0; b < d_k; ++b) {
          dSr[b] += da * qi[b];
          dqi[b] += da * Sr[b];
        }
      }
      for (int j = 0; j <= i; ++j) {
        const R* kj = &K(i0 + j, head, 0);
        const R* wj = wk.W.data() + static_cast<size_t>(j) * d_v;
        R qk = 0, dA = 0;
        for (int b = 0; b < d_k; ++b) qk += qi[b] * kj[b];
        for (int a = 0; a < d_v; ++a) dA += doi[a] * wj[a];
        const R rij = r_of(i, j);
        const R a_ij = rij * qk;
        R* dwj = dW.data() + static_cast<size_t>(j) * d_v;
        for (int a = 0; a < d_v; ++a) dwj[a] += a_ij * doi[a];
        const R dqk = dA * rij;
        R* dkj = &(*dK)(i0 + j, head, 0);
        for (int b = 0; b < d_k; ++b) {
          dqi[b] += dqk * kj[b];
          dkj[b] += dqk * qi[b];
        }
        const R dr = dA * qk;
        dlg[static_cast<size_t>(i)] += rij * dr;
        dlg[static_cast<size_t>(j)] -= rij * dr;
      }
    }
  }

  // Solve adjoint: (I + T)^T dB = dW, bottom-up; then dT = -dB W^T.
  std::vector<R>& dB = dW;  // solved in place
  for (int i = n - 1; i >= 0; --i) {
    R* dbi = dB.data() + static_cast<size_t>(i) * d_v;
    for (int j = i + 1; j < n; ++j) {
      const R t = wk.Tm[static_cast<size_t>(j) * n + i];
      if (t == R(0)) continue;
      const R* dbj = dB.data() + static_cast<size_t>(j) * d_v;
      for (int a = 0; a < d_v; ++a) dbi[a] -= t * dbj[a];
    }
  }
  for (int i = 1; i < n; ++i) {
    const R* dbi = dB.data() + static_cast<size_t>(i) * d_v;
    const R bi = beta(i0 + i, head);
    const R* ki = &K(i0 + i, head, 0);
    R* dki = &(*dK)(i0 + i, head, 0);
    for (int j = 0; j < i; ++j) {
      const R* wj = wk.W.data() + static_cast<size_t>(j) * d_v;
      R dT = 0;
      for (int a = 0; a < d_v; ++a) dT -= dbi[a] * wj[a];
      if (dT == R(0)) continue;
      // T_ij = beta_i r(i,j) (k_i . k_j)
      const R* kj = &K(i0 + j, head, 0);
      R kk = 0;
      for (int b = 0; b < d_k; ++b) kk += ki[b] * kj[b];
      const R rij = r_of(i, j);
      (*dbeta)(i0 + i, head) += dT * rij * kk;
      const R dkk = dT * bi * rij;
      R* dkj = &(*dK)(i0 + j, head, 0);
      for (int b = 0; b < d_k; ++b) {
        dki[b] += dkk * kj[b];
        dkj[b] += dkk * ki[b];
      }
      const R dr = dT * bi * kk;
      dlg[static_cast<size_t>(i)] += rij * dr;
      dlg[static_cast<size_t>(j)] -= rij * dr;
    }
  }

  // b_i = beta_i v_i - beta_i g_i (S k_i)
  for (int i = 0; i < n; ++i) {
    const R* dbi = dB.data() + static_cast<size_t>(i) * d_v;
    const R bi = beta(i0 + i, head);
    const R gi = std::exp(wk.lg[static_cast<size_t>(i)]);
    const R* vi = &V(i0 + i, head, 0);
    const R* ki = &K(i0 + i, head, 0);
    R* dvi = &(*dV)(i0 + i, head, 0);
    R* dki = &(*dK)(i0 + i, head, 0);
    R dot_v = 0, dot_sk = 0;
    for (int a = 0; a < d_v; ++a) {
      dot_v += dbi[a] * vi[a];
      dot_sk += dbi[a] * wk.Sk[static_cast<size_t>(i) * d_v + a];
      dvi[a] += bi * dbi[a];
    }
    (*dbeta)(i0 + i, head) += dot_v - gi * dot_sk;
    dlg[static_cast<size_t>(i)] += -bi * gi * dot_sk;
    const R coef = -bi * gi;
    for (int a = 0; a < d_v; ++a) {
      const R dsk = coef * dbi[a];
      R* dSr = dS_in.data() + static_cast<size_t>(a) * d_k;
      const R* Sr = S + static_cast<size_t>(a) * d_k;
      for (int b = 0; b < d_k; ++b) {
        dSr[b] += dsk * ki[b];
        dki[b] += dsk * Sr[b];
      }
    }
  }

  // lg_i = sum_{j<=i} log alpha_j -> suffix sums.
  R suffix = 0;
  for (int i = n - 1; i >= 0; --i) {
    suffix += dlg[static_cast<size_t>(i)];
    (*dalpha)(i0 + i, head) += suffix / alpha(i0 + i, head);
  }

  dS = dS_in;
}

}  // namespace detail

// Gradients for the routing actually taken, plus the linear-path score
// gradient: for a linear-routed chunk, dscore_la[g,t] is the elementwise
// product of the committed post-chunk state's adjoint with the chunk's
// additive state contribution; softmax-routed chunks get zero.
template <typename R>
inline void gdn_chunkwise_backward(const Tensor<R>& dO, const GdnSaved<R>& saved,
                                   const Tensor<R>& Q, const Tensor<R>& K, const Tensor<R>& V,
                                   const Tensor<R>& alpha, const Tensor<R>& beta,
                                   const ChunkRouting& routing, GdnFlags flags, Tensor<R>* dQ,
                                   Tensor<R>* dK, Tensor<R>* dV, Tensor<R>* dalpha,
                                   Tensor<R>* dbeta, Tensor<R>* dS0, Tensor<R>* dscore_la) {
  const int L = Q.dim(0), h = Q.dim(1), d_k = Q.dim(2), d_v = V.dim(2);
  require(saved.L == L && saved.h == h && saved.d_k == d_k && saved.d_v == d_v,
          "gdn_chunkwise_backward: saved state does not match inputs");
  require(dO.dim(0) == L && dO.dim(1) == h && dO.dim(2) == d_v,
          "gdn_chunkwise_backward: dO shape mismatch");
  const int C = saved.C, c = saved.c, T = L / C;
  const size_t state_n = static_cast<size_t>(d_v) * d_k;

  std::vector<detail::SubWork<R>> works(static_cast<size_t>(C / c));
  std::vector<R> St(state_n), dS(state_n), dS_direct(state_n);

  for (int head = 0; head < h; ++head) {
    std::fill(dS.begin(), dS.end(), R(0));  // adjoint of the committed state after chunk t
    for (int t = T - 1; t >= 0; --t) {
      const bool linear = routing.at(head, t) == OpChoice::Linear;
      const R* S_enter = &saved.boundaries(t, head, 0, 0);
      const R* S_next = &saved.boundaries(t + 1, head, 0, 0);

      R decay_prod = R(1);
      if (flags.always_decay)
        for (int i = t * C; i < t * C + C; ++i) decay_prod *= alpha(i, head);

      if (dscore_la) {
        if (linear) {
          R acc = 0;
          for (size_t idx = 0; idx < state_n; ++idx)
            acc += dS[idx] * (S_next[idx] - decay_prod * S_enter[idx]);
          (*dscore_la)(head, t) = acc;
        } else {
          (*dscore_la)(head, t) = R(0);
        }
      }

      std::fill(dS_direct.begin(), dS_direct.end(), R(0));
      if (!linear) {
        // Committed path S_next = decay_prod * S_enter.
        R ddecay = 0;
        for (size_t idx = 0; idx < state_n; ++idx) {
          dS_direct[idx] = decay_prod * dS[idx];
          ddecay += dS[idx] * S_enter[idx];
        }
        if (flags.always_decay) {
          for (int i = t * C; i < t * C + C; ++i)
            (*dalpha)(i, head) += ddecay * decay_prod / alpha(i, head);
        }
        std::fill(dS.begin(), dS.end(), R(0));  // tentative end state unused
      }

      const int n_sub = C / c;
      const bool need_tentative = flags.inner_output || linear;
      if (need_tentative) {
        // Recompute the tentative chain through the chunk.
        std::copy(S_enter, S_enter + state_n, St.begin());
        for (int s = 0; s < n_sub; ++s) {
          const bool last = s == n_sub - 1;
          const bool fold = linear || !last;
          detail::run_subchunk(Q, K, V, alpha, beta, head, t * C + s * c, c, St, fold,
                               static_cast<Tensor<R>*>(nullptr), &works[static_cast<size_t>(s)],
                               static_cast<uint64_t*>(nullptr), static_cast<uint64_t*>(nullptr));
        }
        for (int s = n_sub - 1; s >= 0; --s) {
          const bool last = s == n_sub - 1;
          const bool folded = linear || !last;
          detail::backward_subchunk(Q, K, V, alpha, beta, head, works[static_cast<size_t>(s)],
                                    flags.inner_output ? &dO : nullptr, folded, dS, dQ, dK, dV,
                                    dalpha, dbeta);
        }
      } else {
        std::fill(dS.begin(), dS.end(), R(0));
      }

      if (!flags.inner_output) {
        // Output path o_i = exp(cum log alpha) * S_enter q_i.
        R cum = 0;
        std::vector<R> gs(static_cast<size_t>(C));
        for (int i = 0; i < C; ++i) {
          cum += std::log(alpha(t * C + i, head));
          gs[static_cast<size_t>(i)] = std::exp(cum);
        }
        std::vector<R> dlg(static_cast<size_t>(C), R(0));
        for (int i = 0; i < C; ++i) {
          const int gi_idx = t * C + i;
          const R* doi = &dO(gi_idx, head, 0);
          const R* qi = &Q(gi_idx, head, 0);
          R* dqi = &(*dQ)(gi_idx, head, 0);
          const R g = gs[static_cast<size_t>(i)];
          R dot = 0;
          for (int a = 0; a < d_v; ++a) {
            const R* Sr = S_enter + static_cast<size_t>(a) * d_k;
            R sq = 0;
            for (int b = 0; b < d_k; ++b) sq += Sr[b] * qi[b];
            dot += doi[a] * sq;
            const R da = g * doi[a];
            R* dSr = dS.data() + static_cast<size_t>(a) * d_k;
            for (int b = 0; b < d_k; ++b) {
              dSr[b] += da * qi[b];
              dqi[b] += da * Sr[b];
            }
          }
          dlg[static_cast<size_t>(i)] += g * dot;
        }
        R suffix = 0;
        for (int i = C - 1; i >= 0; --i) {
          suffix += dlg[static_cast<size_t>(i)];
          (*dalpha)(t * C + i, head) += suffix / alpha(t * C + i, head);
        }
      }

      if (!linear)
        for (size_t idx = 0; idx < state_n; ++idx) dS[idx] += dS_direct[idx];
    }
    if (dS0) {
      for (int a = 0; a < d_v; ++a)
        for (int b = 0; b < d_k; ++b)
          (*dS0)(head, a, b) += dS[static_cast<size_t>(a) * d_k + b];
    }
  }
}

}  // namespace hattn
