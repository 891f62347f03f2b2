#pragma once

// The hybrid token-mixer block: shared q/k/v projections with short causal
// conv + SiLU, per-path normalization (RMS for the softmax path, L2 for the
// linear path), chunk routing, both attention ops, RMS-normed weighted merge,
// sigmoid output gate, output projection. Softmax heads are grouped; each
// group shares one routing decision and one linear-attention head whose
// inputs are the group means of q/k/v and whose output is broadcast back to
// the group at merge time.

#include <optional>
#include <vector>

#include "hattn/attention.hpp"
#include "hattn/gdn.hpp"
#include "hattn/ops.hpp"
#include "hattn/rope.hpp"
#include "hattn/router.hpp"
#include "hattn/tensor.hpp"

namespace hattn {

struct BlockConfig {
  int d_model = 128;
  int h_softmax = 4;
  int h_lin = 2;
  int d_head = 32;
  int C = 16;  // routing chunk
  int c = 16;  // linear-attention sub-chunk
  bool rope = false;
  double theta_base = 10000.0;
  double eps_rms = 1e-6;
  double eps_l2 = 1e-6;
  // Ablation switches (all off = the reference design).
  bool sattn_out = false;       // inner-chunk correlation via softmax path only
  bool gdn_out = false;         // inner-chunk correlation via linear path only
  bool no_lattn_decay = false;  // freeze the state through softmax chunks
  bool no_attn_norm = false;    // single post-sum norm instead of per-op norms
  bool no_attn_weights = false; // fixed (0.5, 0.5) merge weights
  bool weights_from_x = false;  // merge weights mapped from X instead of q

  int hd() const { return h_softmax * d_head; }
  int n_groups() const { return h_lin; }
  int group_size() const { return h_softmax / h_lin; }

  void validate() const {
    require(d_model > 0 && h_softmax > 0 && h_lin > 0 && d_head > 0, "block: bad dims");
    require(h_softmax % h_lin == 0, "block: h_softmax must be a multiple of h_lin");
    require(C >= 1 && c >= 1 && C % c == 0, "block: sub-chunk size must divide the chunk size");
    require(!rope || d_head % 2 == 0, "block: rope needs an even head dim");
    require(!(sattn_out && gdn_out), "block: sattn_out and gdn_out are mutually exclusive");
  }
};

static constexpr int kConvWidth = 4;

// Resolved parameter handles for one block (owned by a ParamStore).
template <typename R>
struct BlockParams {
  Param<R>*wq, *wk, *wv;
  Param<R>*conv_q, *conv_k, *conv_v;
  Param<R>*wa, *ba, *wb, *bb;
  Param<R>* w_score;
  Param<R>* w_merge;    // from q, [hd x h_lin*2]
  Param<R>* w_merge_x;  // from X, [d_model x h_lin*2]; allocated only if used
  Param<R>*wg, *bg;
  Param<R>* wo;
  Param<R>*g_rms_q, *g_rms_k;
  Param<R>*g_out_nla, *g_out_la;
};

template <typename R>
inline void add_block_params(ParamStore<R>& ps, const std::string& prefix, const BlockConfig& cfg,
                             Rng& rng, double init_std = 0.02) {
  const int dm = cfg.d_model, hd = cfg.hd(), hl = cfg.h_lin, d = cfg.d_head;
  auto normal = [&](std::vector<int> shape, double std) {
    Tensor<R> t(std::move(shape));
    for (R& v : t.data) v = static_cast<R>(rng.normal() * std);
    return t;
  };
  ps.add(prefix + "wq", normal({dm, hd}, init_std));
  ps.add(prefix + "wk", normal({dm, hd}, init_std));
  ps.add(prefix + "wv", normal({dm, hd}, init_std));
  ps.add(prefix + "conv_q", normal({hd, kConvWidth}, init_std));
  ps.add(prefix + "conv_k", normal({hd, kConvWidth}, init_std));
  ps.add(prefix + "conv_v", normal({hd, kConvWidth}, init_std));
  ps.add(prefix + "wa", normal({dm, hl}, init_std));
  // Bias chosen so the initial per-step decay sits near 0.98; a zero init
  // halves the state every token and recall signals never survive warmup.
  ps.add(prefix + "ba", Tensor<R>::full({hl}, static_cast<R>(-3.9)));
  ps.add(prefix + "wb", normal({dm, hl}, init_std));
  ps.add(prefix + "bb", Tensor<R>::zeros({hl}));
  ps.add(prefix + "w_score", normal({dm, hl * 2}, init_std));
  if (cfg.weights_from_x)
    ps.add(prefix + "w_merge_x", normal({dm, hl * 2}, init_std));
  else
    ps.add(prefix + "w_merge", normal({hd, hl * 2}, init_std));
  ps.add(prefix + "wg", normal({dm, hd}, init_std));
  ps.add(prefix + "bg", Tensor<R>::zeros({hd}));
  ps.add(prefix + "wo", normal({hd, dm}, init_std));
  ps.add(prefix + "g_rms_q", Tensor<R>::full({d}, R(1)));
  ps.add(prefix + "g_rms_k", Tensor<R>::full({d}, R(1)));
  ps.add(prefix + "g_out_nla", Tensor<R>::full({d}, R(1)));
  ps.add(prefix + "g_out_la", Tensor<R>::full({d}, R(1)));
}

template <typename R>
inline BlockParams<R> resolve_block_params(ParamStore<R>& ps, const std::string& prefix,
                                           const BlockConfig& cfg) {
  BlockParams<R> p{};
  p.wq = &ps.at(prefix + "wq");
  p.wk = &ps.at(prefix + "wk");
  p.wv = &ps.at(prefix + "wv");
  p.conv_q = &ps.at(prefix + "conv_q");
  p.conv_k = &ps.at(prefix + "conv_k");
  p.conv_v = &ps.at(prefix + "conv_v");
  p.wa = &ps.at(prefix + "wa");
  p.ba = &ps.at(prefix + "ba");
  p.wb = &ps.at(prefix + "wb");
  p.bb = &ps.at(prefix + "bb");
  p.w_score = &ps.at(prefix + "w_score");
  p.w_merge = cfg.weights_from_x ? nullptr : &ps.at(prefix + "w_merge");
  p.w_merge_x = cfg.weights_from_x ? &ps.at(prefix + "w_merge_x") : nullptr;
  p.wg = &ps.at(prefix + "wg");
  p.bg = &ps.at(prefix + "bg");
  p.wo = &ps.at(prefix + "wo");
  p.g_rms_q = &ps.at(prefix + "g_rms_q");
  p.g_rms_k = &ps.at(prefix + "g_rms_k");
  p.g_out_nla = &ps.at(prefix + "g_out_nla");
  p.g_out_la = &ps.at(prefix + "g_out_la");
  return p;
}

// Forcing knobs for baselines and ablation tests. A routing override severs
// the score-gradient path entirely.
struct BlockOverrides {
  const ChunkRouting* routing = nullptr;
  bool force_w = false;
  double w0 = 1.0, w1 = 0.0;
  bool force_gate_open = false;
};

template <typename R>
struct BlockSaved {
  Tensor<R> X;
  Tensor<R> xq, xk, xv;  // pre-conv projections
  Tensor<R> cq, ck, cv;  // post-conv, pre-SiLU
  Tensor<R> q, k, v;     // post-SiLU, [L x hd]
  Tensor<R> q_s, k_s, v_h;       // softmax-path inputs [L x h_s x d]
  Tensor<R> q_l, k_l, v_l;       // group-pooled [L x h_lin x d]
  Tensor<R> q_ln, k_ln;          // L2-normalized
  Tensor<R> a_lin, b_lin, alpha, beta;  // [L x h_lin]
  AttnSaved<R> attn_saved;
  Tensor<R> O_nla;  // [L x h_s x d]
  GdnSaved<R> gdn_saved;
  Tensor<R> O_la;  // [L x h_lin x d]
  Tensor<R> w;     // [L x h_lin x 2]
  Tensor<R> n1;    // normed O_nla [L x h_s x d] (unused when no_attn_norm)
  Tensor<R> n2;    // normed O_la [L x h_lin x d]
  Tensor<R> pre;   // pre-norm sum, only for no_attn_norm
  Tensor<R> merged;  // [L x h_s x d]
  Tensor<R> g_lin, gate, o_gated;  // [L x hd]
  ChunkRouting routing;
  bool learned_routing = false;
  BlockOverrides overrides;
  int pos_offset = 0;
};

template <typename R>
inline void linear_fwd(const Tensor<R>& x, const Tensor<R>& w, const Tensor<R>* b, Tensor<R>& y,
                       FlopCounter* flops) {
  y = Tensor<R>({x.dim(0), w.dim(1)});
  matmul_acc(x.ptr(), w.ptr(), y.ptr(), x.dim(0), x.dim(1), w.dim(1));
  if (b)
    for (int i = 0; i < y.dim(0); ++i) {
      R* yr = y.row(i);
      for (int j = 0; j < y.dim(1); ++j) yr[j] += (*b)(j);
    }
  if (flops)
    flops->projections +=
        static_cast<uint64_t>(x.dim(0)) * static_cast<uint64_t>(x.dim(1)) * w.dim(1);
}

// Group-mean pooling of per-head vectors: [L x h_s x d] -> [L x h_lin x d].
template <typename R>
inline Tensor<R> pool_groups(const Tensor<R>& x, int h_lin, int G) {
  const int L = x.dim(0), d = x.dim(2);
  Tensor<R> y({L, h_lin, d});
  for (int l = 0; l < L; ++l)
    for (int g = 0; g < h_lin; ++g) {
      R* yr = &y(l, g, 0);
      for (int m = 0; m < G; ++m) {
        const R* xr = &x(l, g * G + m, 0);
        for (int j = 0; j < d; ++j) yr[j] += xr[j];
      }
      for (int j = 0; j < d; ++j) yr[j] /= R(G);
    }
  return y;
}

template <typename R>
inline void pool_groups_grad_acc(const Tensor<R>& dy, int G, Tensor<R>* dx) {
  const int L = dy.dim(0), h_lin = dy.dim(1), d = dy.dim(2);
  for (int l = 0; l < L; ++l)
    for (int g = 0; g < h_lin; ++g) {
      const R* dyr = &dy(l, g, 0);
      for (int m = 0; m < G; ++m) {
        R* dxr = &(*dx)(l, g * G + m, 0);
        for (int j = 0; j < d; ++j) dxr[j] += dyr[j] / R(G);
      }
    }
}

// Per-op RMS-normed convex merge: out[l,h] = w0 * Norm(O_nla[l,h]) +
// w1 * Norm(O_la[l,group(h)]), the group's linear output broadcast across its
// softmax heads. w rows are softmax pairs (nonnegative, summing to one).
template <typename R>
inline Tensor<R> merge_outputs(const Tensor<R>& O_nla, const Tensor<R>& O_la, const Tensor<R>& w,
                               const Tensor<R>& gamma_nla, const Tensor<R>& gamma_la, R eps,
                               Tensor<R>* n1_out = nullptr, Tensor<R>* n2_out = nullptr) {
  const int L = O_nla.dim(0), h_s = O_nla.dim(1), d = O_nla.dim(2);
  const int h_lin = O_la.dim(1);
  require(O_la.dim(0) == L && O_la.dim(2) == d, "merge_outputs: O_la shape mismatch");
  require(w.rank() == 3 && w.dim(0) == L && w.dim(1) == h_lin && w.dim(2) == 2,
          "merge_outputs: w must be [L x h_lin x 2]");
  require(h_s % h_lin == 0, "merge_outputs: head count must be a multiple of the group count");
  const int G = h_s / h_lin;
  Tensor<R> n1 = rmsnorm(O_nla, gamma_nla, eps);
  Tensor<R> n2 = rmsnorm(O_la, gamma_la, eps);
  Tensor<R> out({L, h_s, d});
  for (int l = 0; l < L; ++l)
    for (int hh = 0; hh < h_s; ++hh) {
      const int g = hh / G;
      const R w0 = w(l, g, 0), w1 = w(l, g, 1);
      R* o = &out(l, hh, 0);
      const R* r1 = &n1(l, hh, 0);
      const R* r2 = &n2(l, g, 0);
      for (int j = 0; j < d; ++j) o[j] = w0 * r1[j] + w1 * r2[j];
    }
  if (n1_out) *n1_out = std::move(n1);
  if (n2_out) *n2_out = std::move(n2);
  return out;
}

template <typename R>
inline Tensor<R> block_forward(const Tensor<R>& X, const BlockParams<R>& p, const BlockConfig& cfg,
                               const BlockOverrides& ov, BlockSaved<R>* saved, int pos_offset = 0,
                               FlopCounter* flops = nullptr) {
  cfg.validate();
  require(X.rank() == 2 && X.dim(1) == cfg.d_model, "block_forward: X must be [L x d_model]");
  const int L = X.dim(0);
  require(L % cfg.C == 0, "block_forward: L must be a multiple of the chunk size (pad upstream)");
  const int h_s = cfg.h_softmax, d = cfg.d_head, hd = cfg.hd();
  const int h_lin = cfg.h_lin, G = cfg.group_size();
  const int T = L / cfg.C;

  BlockSaved<R> local;
  BlockSaved<R>& sv = saved ? *saved : local;
  sv.X = X;
  sv.overrides = ov;
  sv.overrides.routing = nullptr;  // saved state keeps its own routing copy
  sv.pos_offset = pos_offset;

  // Projections -> short conv -> SiLU, shared by both paths.
  linear_fwd(X, p.wq->value, static_cast<const Tensor<R>*>(nullptr), sv.xq, flops);
  linear_fwd(X, p.wk->value, static_cast<const Tensor<R>*>(nullptr), sv.xk, flops);
  linear_fwd(X, p.wv->value, static_cast<const Tensor<R>*>(nullptr), sv.xv, flops);
  sv.cq = depthwise_causal_conv(sv.xq, p.conv_q->value, static_cast<const Tensor<R>*>(nullptr));
  sv.ck = depthwise_causal_conv(sv.xk, p.conv_k->value, static_cast<const Tensor<R>*>(nullptr));
  sv.cv = depthwise_causal_conv(sv.xv, p.conv_v->value, static_cast<const Tensor<R>*>(nullptr));
  if (flops) flops->projections += 3ull * L * hd * kConvWidth;
  sv.q = activation(Act::Silu, sv.cq);
  sv.k = activation(Act::Silu, sv.ck);
  sv.v = activation(Act::Silu, sv.cv);

  // Head views.
  Tensor<R> qh({L, h_s, d}, sv.q.data);
  Tensor<R> kh({L, h_s, d}, sv.k.data);
  sv.v_h = Tensor<R>({L, h_s, d}, sv.v.data);

  // Softmax path: RMS-normed q/k (+ optional rope).
  sv.q_s = rmsnorm(qh, p.g_rms_q->value, static_cast<R>(cfg.eps_rms));
  sv.k_s = rmsnorm(kh, p.g_rms_k->value, static_cast<R>(cfg.eps_rms));
  if (cfg.rope) {
    std::vector<int> positions(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) positions[static_cast<size_t>(l)] = pos_offset + l;
    sv.q_s = rope_apply(sv.q_s, positions, cfg.theta_base);
    sv.k_s = rope_apply(sv.k_s, positions, cfg.theta_base);
  }

  // Linear path: group-pooled, L2-normalized q/k.
  sv.q_l = pool_groups(qh, h_lin, G);
  sv.k_l = pool_groups(kh, h_lin, G);
  sv.v_l = pool_groups(sv.v_h, h_lin, G);
  sv.q_ln = l2_normalize(sv.q_l, static_cast<R>(cfg.eps_l2));
  sv.k_ln = l2_normalize(sv.k_l, static_cast<R>(cfg.eps_l2));

  // Per-step decay and write strength.
  linear_fwd(X, p.wa->value, &p.ba->value, sv.a_lin, flops);
  linear_fwd(X, p.wb->value, &p.bb->value, sv.b_lin, flops);
  sv.alpha = Tensor<R>({L, h_lin});
  sv.beta = Tensor<R>({L, h_lin});
  for (size_t i = 0; i < sv.alpha.data.size(); ++i) {
    sv.alpha.data[i] = std::exp(-softplus_s(sv.a_lin.data[i]));
    sv.beta.data[i] = sigmoid_s(sv.b_lin.data[i]);
  }

  // Routing.
  if (ov.routing) {
    require(ov.routing->n_groups == h_lin && ov.routing->n_chunks == T,
            "block_forward: routing override shape mismatch");
    sv.routing = *ov.routing;
    sv.learned_routing = false;
  } else {
    Tensor<R> scores = compute_scores(X, p.w_score->value, cfg.C);
    if (flops) flops->projections += static_cast<uint64_t>(T) * cfg.d_model * h_lin * 2;
    sv.routing = route(scores);
    sv.learned_routing = true;
  }

  // Both attention paths.
  std::vector<int> group_of_head(static_cast<size_t>(h_s));
  for (int hh = 0; hh < h_s; ++hh) group_of_head[static_cast<size_t>(hh)] = hh / G;
  const ColumnMask mask = ColumnMask::from_routing(sv.routing, cfg.C);
  sv.O_nla = masked_attention_forward(sv.q_s, sv.k_s, sv.v_h, mask, group_of_head, &sv.attn_saved,
                                      /*include_diagonal=*/!cfg.gdn_out, flops);
  const GdnFlags gflags{!cfg.no_lattn_decay, !cfg.sattn_out};
  sv.O_la = gdn_chunkwise_forward(sv.q_ln, sv.k_ln, sv.v_l, sv.alpha, sv.beta, sv.routing, cfg.C,
                                  cfg.c, static_cast<const Tensor<R>*>(nullptr), &sv.gdn_saved,
                                  gflags, flops);

  // Merge weights.
  sv.w = Tensor<R>({L, h_lin, 2});
  if (ov.force_w) {
    for (int l = 0; l < L; ++l)
      for (int g = 0; g < h_lin; ++g) {
        sv.w(l, g, 0) = static_cast<R>(ov.w0);
        sv.w(l, g, 1) = static_cast<R>(ov.w1);
      }
  } else if (cfg.no_attn_weights) {
    sv.w.fill(static_cast<R>(0.5));
  } else {
    const Tensor<R>& src = cfg.weights_from_x ? X : sv.q;
    const Tensor<R>& wm = cfg.weights_from_x ? p.w_merge_x->value : p.w_merge->value;
    Tensor<R> logits;
    linear_fwd(src, wm, static_cast<const Tensor<R>*>(nullptr), logits, flops);  // [L x h_lin*2]
    for (int l = 0; l < L; ++l)
      for (int g = 0; g < h_lin; ++g) {
        const R a = logits(l, g * 2), b = logits(l, g * 2 + 1);
        const R m = std::max(a, b);
        const R ea = std::exp(a - m), eb = std::exp(b - m);
        sv.w(l, g, 0) = ea / (ea + eb);
        sv.w(l, g, 1) = eb / (ea + eb);
      }
  }

  // Normed weighted merge; the group's linear output is broadcast to each of
  // its softmax heads.
  sv.merged = Tensor<R>({L, h_s, d});
  if (cfg.no_attn_norm) {
    sv.pre = Tensor<R>({L, h_s, d});
    for (int l = 0; l < L; ++l)
      for (int hh = 0; hh < h_s; ++hh) {
        const int g = hh / G;
        const R w0 = sv.w(l, g, 0), w1 = sv.w(l, g, 1);
        R* pr = &sv.pre(l, hh, 0);
        const R* on = &sv.O_nla(l, hh, 0);
        const R* ol = &sv.O_la(l, g, 0);
        for (int j = 0; j < d; ++j) pr[j] = w0 * on[j] + w1 * ol[j];
      }
    sv.merged = rmsnorm(sv.pre, p.g_out_nla->value, static_cast<R>(cfg.eps_rms));
  } else {
    sv.merged = merge_outputs(sv.O_nla, sv.O_la, sv.w, p.g_out_nla->value, p.g_out_la->value,
                              static_cast<R>(cfg.eps_rms), &sv.n1, &sv.n2);
  }

  // Output gate and projection.
  Tensor<R> merged_flat({L, hd}, sv.merged.data);
  if (ov.force_gate_open) {
    sv.o_gated = merged_flat;
  } else {
    linear_fwd(X, p.wg->value, &p.bg->value, sv.g_lin, flops);
    sv.gate = activation(Act::Sigmoid, sv.g_lin);
    sv.o_gated = Tensor<R>({L, hd});
    for (size_t i = 0; i < sv.o_gated.data.size(); ++i)
      sv.o_gated.data[i] = merged_flat.data[i] * sv.gate.data[i];
  }
  Tensor<R> Y;
  linear_fwd(sv.o_gated, p.wo->value, static_cast<const Tensor<R>*>(nullptr), Y, flops);
  assert_finite(Y, "block_forward");
  return Y;
}

// Full reverse pass. Parameter gradients accumulate into the store; returns
// dX. Routing is fixed except for the straight-through score path, which is
// severed entirely when the forward ran under a routing override.
template <typename R>
inline Tensor<R> block_backward(const Tensor<R>& dY, const BlockSaved<R>& sv,
                                const BlockParams<R>& p, const BlockConfig& cfg) {
  const int L = sv.X.dim(0), hd = cfg.hd(), h_s = cfg.h_softmax, d = cfg.d_head;
  const int h_lin = cfg.h_lin, G = cfg.group_size();
  require(dY.rank() == 2 && dY.dim(0) == L && dY.dim(1) == cfg.d_model,
          "block_backward: dY shape mismatch");
  const BlockOverrides& ov = sv.overrides;

  Tensor<R> dX({L, cfg.d_model});

  // Output projection.
  Tensor<R> dOg({L, hd});
  matmul_grad_acc(dY, sv.o_gated, p.wo->value, &dOg, &p.wo->grad);

  // Gate.
  Tensor<R> dmerged_flat({L, hd});
  if (ov.force_gate_open) {
    dmerged_flat = dOg;
  } else {
    Tensor<R> dg_lin({L, hd});
    Tensor<R> merged_flat({L, hd}, sv.merged.data);
    for (size_t i = 0; i < dOg.data.size(); ++i) {
      dmerged_flat.data[i] = dOg.data[i] * sv.gate.data[i];
      const R s = sv.gate.data[i];
      dg_lin.data[i] = dOg.data[i] * merged_flat.data[i] * s * (R(1) - s);
    }
    matmul_grad_acc(dg_lin, sv.X, p.wg->value, &dX, &p.wg->grad);
    for (int l = 0; l < L; ++l)
      for (int j = 0; j < hd; ++j) p.bg->grad(j) += dg_lin(l, j);
  }
  Tensor<R> dmerged({L, h_s, d}, dmerged_flat.data);

  // Merge.
  Tensor<R> dO_nla({L, h_s, d});
  Tensor<R> dO_la({L, h_lin, d});
  Tensor<R> dw({L, h_lin, 2});
  if (cfg.no_attn_norm) {
    Tensor<R> dpre({L, h_s, d});
    rmsnorm_grad_acc(dmerged, sv.pre, p.g_out_nla->value, static_cast<R>(cfg.eps_rms), &dpre,
                     &p.g_out_nla->grad);
    for (int l = 0; l < L; ++l)
      for (int hh = 0; hh < h_s; ++hh) {
        const int g = hh / G;
        const R w0 = sv.w(l, g, 0), w1 = sv.w(l, g, 1);
        const R* dpr = &dpre(l, hh, 0);
        const R* on = &sv.O_nla(l, hh, 0);
        const R* ol = &sv.O_la(l, g, 0);
        R* don = &dO_nla(l, hh, 0);
        R* dol = &dO_la(l, g, 0);
        R a0 = 0, a1 = 0;
        for (int j = 0; j < d; ++j) {
          don[j] += w0 * dpr[j];
          dol[j] += w1 * dpr[j];
          a0 += dpr[j] * on[j];
          a1 += dpr[j] * ol[j];
        }
        dw(l, g, 0) += a0;
        dw(l, g, 1) += a1;
      }
  } else {
    Tensor<R> dn1({L, h_s, d});
    Tensor<R> dn2({L, h_lin, d});
    for (int l = 0; l < L; ++l)
      for (int hh = 0; hh < h_s; ++hh) {
        const int g = hh / G;
        const R w0 = sv.w(l, g, 0), w1 = sv.w(l, g, 1);
        const R* dmr = &dmerged(l, hh, 0);
        const R* r1 = &sv.n1(l, hh, 0);
        const R* r2 = &sv.n2(l, g, 0);
        R* d1 = &dn1(l, hh, 0);
        R* d2 = &dn2(l, g, 0);
        R a0 = 0, a1 = 0;
        for (int j = 0; j < d; ++j) {
          d1[j] += w0 * dmr[j];
          d2[j] += w1 * dmr[j];
          a0 += dmr[j] * r1[j];
          a1 += dmr[j] * r2[j];
        }
        dw(l, g, 0) += a0;
        dw(l, g, 1) += a1;
      }
    rmsnorm_grad_acc(dn1, sv.O_nla, p.g_out_nla->value, static_cast<R>(cfg.eps_rms), &dO_nla,
                     &p.g_out_nla->grad);
    rmsnorm_grad_acc(dn2, sv.O_la, p.g_out_la->value, static_cast<R>(cfg.eps_rms), &dO_la,
                     &p.g_out_la->grad);
  }

  // Post-SiLU gradients accumulate from several consumers.
  Tensor<R> dq_flat({L, hd}), dk_flat({L, hd}), dv_flat({L, hd});

  // Merge-weight path.
  if (!ov.force_w && !cfg.no_attn_weights) {
    Tensor<R> dlogits({L, h_lin * 2});
    for (int l = 0; l < L; ++l)
      for (int g = 0; g < h_lin; ++g) {
        const R w0 = sv.w(l, g, 0), w1 = sv.w(l, g, 1);
        const R dot = dw(l, g, 0) * w0 + dw(l, g, 1) * w1;
        dlogits(l, g * 2) = w0 * (dw(l, g, 0) - dot);
        dlogits(l, g * 2 + 1) = w1 * (dw(l, g, 1) - dot);
      }
    if (cfg.weights_from_x) {
      matmul_grad_acc(dlogits, sv.X, p.w_merge_x->value, &dX, &p.w_merge_x->grad);
    } else {
      matmul_grad_acc(dlogits, sv.q, p.w_merge->value, &dq_flat, &p.w_merge->grad);
    }
  }

  // Attention paths.
  const int T = L / cfg.C;
  std::vector<int> group_of_head(static_cast<size_t>(h_s));
  for (int hh = 0; hh < h_s; ++hh) group_of_head[static_cast<size_t>(hh)] = hh / G;
  const ColumnMask mask = ColumnMask::from_routing(sv.routing, cfg.C);

  Tensor<R> dq_s({L, h_s, d}), dk_s({L, h_s, d});
  Tensor<R> dv_h({L, h_s, d});  // collects softmax-path and pooled linear-path dV
  Tensor<R> dscore_nla({h_lin, T});
  masked_attention_backward(dO_nla, sv.attn_saved, sv.q_s, sv.k_s, sv.v_h, sv.O_nla, mask,
                            group_of_head, &dq_s, &dk_s, &dv_h, &dscore_nla,
                            /*include_diagonal=*/!cfg.gdn_out);

  Tensor<R> dq_ln({L, h_lin, d}), dk_ln({L, h_lin, d}), dv_l({L, h_lin, d});
  Tensor<R> dalpha({L, h_lin}), dbeta({L, h_lin});
  Tensor<R> dscore_la({h_lin, T});
  const GdnFlags gflags{!cfg.no_lattn_decay, !cfg.sattn_out};
  gdn_chunkwise_backward(dO_la, sv.gdn_saved, sv.q_ln, sv.k_ln, sv.v_l, sv.alpha, sv.beta,
                         sv.routing, gflags, &dq_ln, &dk_ln, &dv_l, &dalpha, &dbeta,
                         static_cast<Tensor<R>*>(nullptr), &dscore_la);

  // Straight-through score path (absent under an override).
  if (sv.learned_routing)
    score_backward(dscore_nla, dscore_la, sv.routing, sv.X, p.w_score->value, cfg.C,
                   &p.w_score->grad, &dX);

  // alpha = exp(-softplus(a_lin)), beta = sigmoid(b_lin).
  Tensor<R> da_lin({L, h_lin}), db_lin({L, h_lin});
  for (size_t i = 0; i < da_lin.data.size(); ++i) {
    da_lin.data[i] = -dalpha.data[i] * sv.alpha.data[i] * sigmoid_s(sv.a_lin.data[i]);
    const R b = sv.beta.data[i];
    db_lin.data[i] = dbeta.data[i] * b * (R(1) - b);
  }
  matmul_grad_acc(da_lin, sv.X, p.wa->value, &dX, &p.wa->grad);
  matmul_grad_acc(db_lin, sv.X, p.wb->value, &dX, &p.wb->grad);
  for (int l = 0; l < L; ++l)
    for (int g = 0; g < h_lin; ++g) {
      p.ba->grad(g) += da_lin(l, g);
      p.bb->grad(g) += db_lin(l, g);
    }

  // L2 norms, then group pooling back to per-head gradients.
  Tensor<R> dq_l({L, h_lin, d}), dk_l({L, h_lin, d});
  l2_normalize_grad_acc(dq_ln, sv.q_l, static_cast<R>(cfg.eps_l2), &dq_l);
  l2_normalize_grad_acc(dk_ln, sv.k_l, static_cast<R>(cfg.eps_l2), &dk_l);
  Tensor<R> dqh({L, h_s, d}, dq_flat.data);
  Tensor<R> dkh({L, h_s, d}, dk_flat.data);
  pool_groups_grad_acc(dq_l, G, &dqh);
  pool_groups_grad_acc(dk_l, G, &dkh);
  pool_groups_grad_acc(dv_l, G, &dv_h);

  // Softmax-path norms (+ rope).
  if (cfg.rope) {
    std::vector<int> positions(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) positions[static_cast<size_t>(l)] = sv.pos_offset + l;
    Tensor<R> dq_pre({L, h_s, d}), dk_pre({L, h_s, d});
    rope_grad_acc(dq_s, positions, cfg.theta_base, &dq_pre);
    rope_grad_acc(dk_s, positions, cfg.theta_base, &dk_pre);
    dq_s = dq_pre;
    dk_s = dk_pre;
  }
  Tensor<R> qh({L, h_s, d}, sv.q.data);
  Tensor<R> kh({L, h_s, d}, sv.k.data);
  rmsnorm_grad_acc(dq_s, qh, p.g_rms_q->value, static_cast<R>(cfg.eps_rms), &dqh, &p.g_rms_q->grad);
  rmsnorm_grad_acc(dk_s, kh, p.g_rms_k->value, static_cast<R>(cfg.eps_rms), &dkh, &p.g_rms_k->grad);
  dq_flat.data = dqh.data;
  dk_flat.data = dkh.data;
  dv_flat.data = dv_h.data;

  // SiLU -> conv -> projections.
  Tensor<R> dcq({L, hd}), dck({L, hd}), dcv({L, hd});
  activation_grad_acc(Act::Silu, dq_flat, sv.cq, &dcq);
  activation_grad_acc(Act::Silu, dk_flat, sv.ck, &dck);
  activation_grad_acc(Act::Silu, dv_flat, sv.cv, &dcv);
  Tensor<R> dxq({L, hd}), dxk({L, hd}), dxv({L, hd});
  depthwise_causal_conv_grad_acc(dcq, sv.xq, p.conv_q->value, &dxq, &p.conv_q->grad);
  depthwise_causal_conv_grad_acc(dck, sv.xk, p.conv_k->value, &dxk, &p.conv_k->grad);
  depthwise_causal_conv_grad_acc(dcv, sv.xv, p.conv_v->value, &dxv, &p.conv_v->grad);
  matmul_grad_acc(dxq, sv.X, p.wq->value, &dX, &p.wq->grad);
  matmul_grad_acc(dxk, sv.X, p.wk->value, &dX, &p.wk->grad);
  matmul_grad_acc(dxv, sv.X, p.wv->value, &dX, &p.wv->grad);

  return dX;
}

}  // namespace hattn
