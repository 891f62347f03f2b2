#pragma once

// Token-by-token decoding with routing-aware state. The softmax KV cache
// holds only chunks that committed to the softmax op; the linear path keeps
// one fixed-size state per group plus a tentative copy carrying the current
// chunk's uncommitted delta-rule writes. Pending tokens sit in a chunk
// buffer; when the C-th token arrives the chunk is scored from the running
// mean, routed, and committed: softmax -> buffered K/V rows move to the
// cache and the linear state takes decay only; linear -> the tentative state
// is committed and the buffered K/V rows are dropped.

#include <vector>

#include "hattn/model.hpp"
#include "hattn/tensor.hpp"

namespace hattn {

template <typename R>
struct LayerDecodeState {
  Tensor<R> tail_q, tail_k, tail_v;             // [kw-1 x hd], oldest row first
  std::vector<std::vector<R>> k_cache, v_cache; // per softmax head, packed d-rows
  Tensor<R> lin_committed;                      // [h_lin x d x d]
  Tensor<R> lin_tentative;
  std::vector<R> alpha_prod;                    // per group, over the open chunk
  std::vector<R> buf_k, buf_v;                  // [buf_len x h_s x d], packed
  std::vector<R> score_accum;                   // d_model
  std::vector<uint8_t> trace;                   // committed choices, group-major per chunk
};

template <typename R>
struct DecodeState {
  ModelConfig cfg;
  RoutingPolicy policy;
  std::vector<LayerDecodeState<R>> layers;
  int position = 0;
  int buf_len = 0;
};

template <typename R>
struct StateFootprint {
  size_t kv = 0;      // cached K/V values for committed softmax chunks
  size_t linear = 0;  // committed per-group states
  size_t buffer = 0;  // chunk buffer, tentative state, running accumulators
  size_t conv = 0;    // convolution tails
  size_t total() const { return kv + linear + buffer + conv; }
};

template <typename R>
inline StateFootprint<R> state_footprint(const DecodeState<R>& st) {
  StateFootprint<R> f;
  for (const auto& ls : st.layers) {
    for (const auto& kc : ls.k_cache) f.kv += kc.size();
    for (const auto& vc : ls.v_cache) f.kv += vc.size();
    f.linear += ls.lin_committed.numel();
    f.buffer += ls.buf_k.size() + ls.buf_v.size() + ls.lin_tentative.numel() +
                ls.alpha_prod.size() + ls.score_accum.size();
    f.conv += ls.tail_q.numel() + ls.tail_k.numel() + ls.tail_v.numel();
  }
  return f;
}

template <typename R>
inline DecodeState<R> make_decode_state(const ModelConfig& cfg, const RoutingPolicy& policy) {
  cfg.validate();
  DecodeState<R> st;
  st.cfg = cfg;
  st.policy = policy;
  const int hd = cfg.block.hd(), d = cfg.block.d_head, hl = cfg.block.h_lin;
  st.layers.assign(static_cast<size_t>(cfg.n_layers), LayerDecodeState<R>{});
  for (auto& ls : st.layers) {
    ls.tail_q = Tensor<R>::zeros({kConvWidth - 1, hd});
    ls.tail_k = Tensor<R>::zeros({kConvWidth - 1, hd});
    ls.tail_v = Tensor<R>::zeros({kConvWidth - 1, hd});
    ls.k_cache.assign(static_cast<size_t>(cfg.block.h_softmax), {});
    ls.v_cache.assign(static_cast<size_t>(cfg.block.h_softmax), {});
    ls.lin_committed = Tensor<R>::zeros({hl, d, d});
    ls.lin_tentative = ls.lin_committed;
    ls.alpha_prod.assign(static_cast<size_t>(hl), R(1));
    ls.score_accum.assign(static_cast<size_t>(cfg.block.d_model), R(0));
  }
  return st;
}

namespace detail {

// Routing decision for one layer at chunk-commit time, honoring layer kinds
// and the global routing mode; learned layers score the buffered chunk mean.
template <typename R>
inline std::vector<OpChoice> decode_route(const DecodeState<R>& st, int layer,
                                          const LayerDecodeState<R>& ls, ParamStore<R>& ps) {
  const auto pattern = st.cfg.pattern();
  const int hl = st.cfg.block.h_lin;
  const LayerKind kind = pattern[static_cast<size_t>(layer)];
  std::vector<OpChoice> choice(static_cast<size_t>(hl), OpChoice::Softmax);
  auto all = [&](OpChoice c) { std::fill(choice.begin(), choice.end(), c); };
  if (st.policy.forced_fraction()) {
    const int t = static_cast<int>(ls.trace.size()) / hl;  // committed chunks so far
    all(fraction_chunk_is_softmax(st.policy.fraction, t) ? OpChoice::Softmax : OpChoice::Linear);
  } else if (kind == LayerKind::GdnOnly) {
    all(OpChoice::Linear);
  } else if (kind == LayerKind::SoftmaxOnly) {
    all(OpChoice::Softmax);
  } else if (st.policy.mode == RoutingMode::AllSoftmax) {
    all(OpChoice::Softmax);
  } else if (st.policy.mode == RoutingMode::AllLinear) {
    all(OpChoice::Linear);
  } else {
    const Tensor<R>& w_score = ps.at(layer_prefix<R>(layer) + "attn.w_score").value;
    const int dm = st.cfg.block.d_model;
    for (int g = 0; g < hl; ++g) {
      R s0 = 0, s1 = 0;
      for (int j = 0; j < dm; ++j) {
        const R mean = ls.score_accum[static_cast<size_t>(j)] / R(st.cfg.block.C);
        s0 += w_score(j, g * 2) * mean;
        s1 += w_score(j, g * 2 + 1) * mean;
      }
      if (std::isnan(static_cast<double>(s0)) || std::isnan(static_cast<double>(s1)))
        throw numeric_error("decode: NaN routing score");
      choice[static_cast<size_t>(g)] = s1 > s0 ? OpChoice::Linear : OpChoice::Softmax;
    }
  }
  return choice;
}

template <typename R>
inline void commit_chunk(DecodeState<R>& st, ParamStore<R>& ps) {
  const BlockConfig& bc = st.cfg.block;
  const int h_s = bc.h_softmax, d = bc.d_head, hl = bc.h_lin, G = bc.group_size();
  for (int layer = 0; layer < st.cfg.n_layers; ++layer) {
    LayerDecodeState<R>& ls = st.layers[static_cast<size_t>(layer)];
    const std::vector<OpChoice> choice = decode_route(st, layer, ls, ps);
    for (int g = 0; g < hl; ++g) {
      const bool softmax = choice[static_cast<size_t>(g)] == OpChoice::Softmax;
      ls.trace.push_back(softmax ? 1 : 0);
      if (softmax) {
        for (int m = 0; m < G; ++m) {
          const int hh = g * G + m;
          for (int b = 0; b < st.buf_len; ++b) {
            const R* kr = ls.buf_k.data() + (static_cast<size_t>(b) * h_s + hh) * d;
            const R* vr = ls.buf_v.data() + (static_cast<size_t>(b) * h_s + hh) * d;
            ls.k_cache[static_cast<size_t>(hh)].insert(ls.k_cache[static_cast<size_t>(hh)].end(),
                                                       kr, kr + d);
            ls.v_cache[static_cast<size_t>(hh)].insert(ls.v_cache[static_cast<size_t>(hh)].end(),
                                                       vr, vr + d);
          }
        }
        // Decay-only state transition through a softmax chunk.
        const R prod = bc.no_lattn_decay ? R(1) : ls.alpha_prod[static_cast<size_t>(g)];
        for (int a = 0; a < d; ++a)
          for (int b = 0; b < d; ++b) ls.lin_committed(g, a, b) *= prod;
      } else {
        for (int a = 0; a < d; ++a)
          for (int b = 0; b < d; ++b) ls.lin_committed(g, a, b) = ls.lin_tentative(g, a, b);
      }
      ls.alpha_prod[static_cast<size_t>(g)] = R(1);
    }
    ls.lin_tentative = ls.lin_committed;
    ls.buf_k.clear();
    ls.buf_v.clear();
    std::fill(ls.score_accum.begin(), ls.score_accum.end(), R(0));
  }
  st.buf_len = 0;
}

template <typename R>
inline void matvec(const Tensor<R>& w, const R* x, R* y) {
  // y[j] = sum_i x[i] * w(i, j)
  const int rows = w.dim(0), cols = w.dim(1);
  for (int j = 0; j < cols; ++j) y[j] = R(0);
  for (int i = 0; i < rows; ++i) {
    const R xi = x[i];
    if (xi == R(0)) continue;
    const R* wr = w.row(i);
    for (int j = 0; j < cols; ++j) y[j] += xi * wr[j];
  }
}

// One mixer step on a single (already normed) row. Appends to the layer's
// chunk buffer and tentative state; committing happens separately.
template <typename R>
inline std::vector<R> mixer_decode(DecodeState<R>& st, int layer, const std::vector<R>& xrow,
                                   ParamStore<R>& ps) {
  const BlockConfig& bc = st.cfg.block;
  const int dm = bc.d_model, hd = bc.hd(), h_s = bc.h_softmax, d = bc.d_head;
  const int hl = bc.h_lin, G = bc.group_size();
  const std::string lp = layer_prefix<R>(layer) + "attn.";
  LayerDecodeState<R>& ls = st.layers[static_cast<size_t>(layer)];
  const auto pattern = st.cfg.pattern();
  const LayerKind kind = pattern[static_cast<size_t>(layer)];

  for (int j = 0; j < dm; ++j) ls.score_accum[static_cast<size_t>(j)] += xrow[static_cast<size_t>(j)];

  // Projections + conv tail window + SiLU.
  std::vector<R> pq(static_cast<size_t>(hd)), pk(static_cast<size_t>(hd)), pv(static_cast<size_t>(hd));
  matvec(ps.at(lp + "wq").value, xrow.data(), pq.data());
  matvec(ps.at(lp + "wk").value, xrow.data(), pk.data());
  matvec(ps.at(lp + "wv").value, xrow.data(), pv.data());
  auto conv_step = [&](Tensor<R>& tail, const std::vector<R>& cur, const Tensor<R>& kern,
                       std::vector<R>& out) {
    out.assign(static_cast<size_t>(hd), R(0));
    for (int ch = 0; ch < hd; ++ch) {
      R acc = kern(ch, kConvWidth - 1) * cur[static_cast<size_t>(ch)];
      for (int j = 0; j < kConvWidth - 1; ++j) acc += kern(ch, j) * tail(j, ch);
      out[static_cast<size_t>(ch)] = acc;
    }
    // shift the window
    for (int j = 0; j + 1 < kConvWidth - 1; ++j)
      for (int ch = 0; ch < hd; ++ch) tail(j, ch) = tail(j + 1, ch);
    for (int ch = 0; ch < hd; ++ch) tail(kConvWidth - 2, ch) = cur[static_cast<size_t>(ch)];
  };
  std::vector<R> q, k, v;
  conv_step(ls.tail_q, pq, ps.at(lp + "conv_q").value, q);
  conv_step(ls.tail_k, pk, ps.at(lp + "conv_k").value, k);
  conv_step(ls.tail_v, pv, ps.at(lp + "conv_v").value, v);
  for (int ch = 0; ch < hd; ++ch) {
    q[static_cast<size_t>(ch)] = activation_s(Act::Silu, q[static_cast<size_t>(ch)]);
    k[static_cast<size_t>(ch)] = activation_s(Act::Silu, k[static_cast<size_t>(ch)]);
    v[static_cast<size_t>(ch)] = activation_s(Act::Silu, v[static_cast<size_t>(ch)]);
  }

  // Softmax-path per-head q/k (RMS norm + optional rope at this position).
  const Tensor<R>& g_rms_q = ps.at(lp + "g_rms_q").value;
  const Tensor<R>& g_rms_k = ps.at(lp + "g_rms_k").value;
  std::vector<R> q_s(static_cast<size_t>(hd)), k_s(static_cast<size_t>(hd));
  for (int hh = 0; hh < h_s; ++hh) {
    rmsnorm_row(q.data() + hh * d, g_rms_q.ptr(), static_cast<R>(bc.eps_rms), d, q_s.data() + hh * d);
    rmsnorm_row(k.data() + hh * d, g_rms_k.ptr(), static_cast<R>(bc.eps_rms), d, k_s.data() + hh * d);
    if (bc.rope) {
      rope_rotate_head(q_s.data() + hh * d, d, static_cast<double>(st.position), bc.theta_base, false);
      rope_rotate_head(k_s.data() + hh * d, d, static_cast<double>(st.position), bc.theta_base, false);
    }
  }
  ls.buf_k.insert(ls.buf_k.end(), k_s.begin(), k_s.end());
  ls.buf_v.insert(ls.buf_v.end(), v.begin(), v.end());
  const int n_buf = static_cast<int>(ls.buf_k.size() / static_cast<size_t>(hd));

  // Linear path: group-pooled, L2-normalized q/k; per-group alpha/beta.
  std::vector<R> q_l(static_cast<size_t>(hl) * d, R(0)), k_l(static_cast<size_t>(hl) * d, R(0)),
      v_l(static_cast<size_t>(hl) * d, R(0));
  for (int g = 0; g < hl; ++g)
    for (int m = 0; m < G; ++m)
      for (int j = 0; j < d; ++j) {
        q_l[static_cast<size_t>(g) * d + j] += q[static_cast<size_t>((g * G + m) * d + j)];
        k_l[static_cast<size_t>(g) * d + j] += k[static_cast<size_t>((g * G + m) * d + j)];
        v_l[static_cast<size_t>(g) * d + j] += v[static_cast<size_t>((g * G + m) * d + j)];
      }
  for (R& x : q_l) x /= R(G);
  for (R& x : k_l) x /= R(G);
  for (R& x : v_l) x /= R(G);
  std::vector<R> q_ln(q_l.size()), k_ln(k_l.size());
  for (int g = 0; g < hl; ++g) {
    l2_normalize_row(q_l.data() + g * d, static_cast<R>(bc.eps_l2), d, q_ln.data() + g * d);
    l2_normalize_row(k_l.data() + g * d, static_cast<R>(bc.eps_l2), d, k_ln.data() + g * d);
  }
  std::vector<R> a_lin(static_cast<size_t>(hl)), b_lin(static_cast<size_t>(hl));
  matvec(ps.at(lp + "wa").value, xrow.data(), a_lin.data());
  matvec(ps.at(lp + "wb").value, xrow.data(), b_lin.data());
  std::vector<R> o_la(static_cast<size_t>(hl) * d);
  for (int g = 0; g < hl; ++g) {
    const R alpha = std::exp(-softplus_s(a_lin[static_cast<size_t>(g)] + ps.at(lp + "ba").value(g)));
    const R beta = sigmoid_s(b_lin[static_cast<size_t>(g)] + ps.at(lp + "bb").value(g));
    ls.alpha_prod[static_cast<size_t>(g)] *= alpha;
    std::vector<R> s_new(static_cast<size_t>(d) * d);
    gdn_recurrent_step(&ls.lin_tentative(g, 0, 0), q_ln.data() + g * d, k_ln.data() + g * d,
                       v_l.data() + g * d, alpha, beta, d, d, o_la.data() + g * d, s_new.data());
    std::copy(s_new.begin(), s_new.end(), &ls.lin_tentative(g, 0, 0));
    if (bc.sattn_out) {
      // Cross-chunk output only: decayed read of the state at chunk entry.
      const R gcum = ls.alpha_prod[static_cast<size_t>(g)];
      for (int a = 0; a < d; ++a) {
        const R* Sr = &ls.lin_committed(g, a, 0);
        R acc = 0;
        for (int b = 0; b < d; ++b) acc += Sr[b] * q_ln[static_cast<size_t>(g) * d + b];
        o_la[static_cast<size_t>(g) * d + a] = gcum * acc;
      }
    }
  }

  // Softmax path: attend over committed cache plus the chunk buffer.
  const R scale = R(1) / std::sqrt(static_cast<R>(d));
  std::vector<R> o_nla(static_cast<size_t>(hd), R(0));
  std::vector<R> logits_buf;
  for (int hh = 0; hh < h_s; ++hh) {
    const std::vector<R>& kc = ls.k_cache[static_cast<size_t>(hh)];
    const std::vector<R>& vc = ls.v_cache[static_cast<size_t>(hh)];
    const int n_cache = static_cast<int>(kc.size() / static_cast<size_t>(d));
    const int n_vis = bc.gdn_out ? n_cache : n_cache + n_buf;
    if (n_vis == 0) continue;  // only possible under the gdn_out ablation
    logits_buf.assign(static_cast<size_t>(n_vis), R(0));
    const R* qh = q_s.data() + hh * d;
    R m = -std::numeric_limits<R>::infinity();
    for (int j = 0; j < n_vis; ++j) {
      const R* kr = j < n_cache ? kc.data() + static_cast<size_t>(j) * d
                                : ls.buf_k.data() + (static_cast<size_t>(j - n_cache) * h_s + hh) * d;
      R a = 0;
      for (int x = 0; x < d; ++x) a += qh[x] * kr[x];
      a *= scale;
      logits_buf[static_cast<size_t>(j)] = a;
      m = std::max(m, a);
    }
    R z = 0;
    for (int j = 0; j < n_vis; ++j) {
      logits_buf[static_cast<size_t>(j)] = std::exp(logits_buf[static_cast<size_t>(j)] - m);
      z += logits_buf[static_cast<size_t>(j)];
    }
    R* oh = o_nla.data() + hh * d;
    for (int j = 0; j < n_vis; ++j) {
      const R p = logits_buf[static_cast<size_t>(j)] / z;
      const R* vr = j < n_cache ? vc.data() + static_cast<size_t>(j) * d
                                : ls.buf_v.data() + (static_cast<size_t>(j - n_cache) * h_s + hh) * d;
      for (int x = 0; x < d; ++x) oh[x] += p * vr[x];
    }
  }

  // Merge weights.
  std::vector<R> w(static_cast<size_t>(hl) * 2);
  bool force_w = false;
  R w0f = 0, w1f = 0;
  if (kind == LayerKind::GdnOnly) force_w = true, w0f = R(0), w1f = R(1);
  if (kind == LayerKind::SoftmaxOnly) force_w = true, w0f = R(1), w1f = R(0);
  if (force_w) {
    for (int g = 0; g < hl; ++g) {
      w[static_cast<size_t>(g) * 2] = w0f;
      w[static_cast<size_t>(g) * 2 + 1] = w1f;
    }
  } else if (bc.no_attn_weights) {
    std::fill(w.begin(), w.end(), static_cast<R>(0.5));
  } else {
    std::vector<R> wl(static_cast<size_t>(hl) * 2);
    if (bc.weights_from_x)
      matvec(ps.at(lp + "w_merge_x").value, xrow.data(), wl.data());
    else
      matvec(ps.at(lp + "w_merge").value, q.data(), wl.data());
    for (int g = 0; g < hl; ++g) {
      const R a = wl[static_cast<size_t>(g) * 2], b = wl[static_cast<size_t>(g) * 2 + 1];
      const R mx = std::max(a, b);
      const R ea = std::exp(a - mx), eb = std::exp(b - mx);
      w[static_cast<size_t>(g) * 2] = ea / (ea + eb);
      w[static_cast<size_t>(g) * 2 + 1] = eb / (ea + eb);
    }
  }

  // Normed weighted merge, gate, output projection.
  const Tensor<R>& g_out_nla = ps.at(lp + "g_out_nla").value;
  const Tensor<R>& g_out_la = ps.at(lp + "g_out_la").value;
  std::vector<R> merged(static_cast<size_t>(hd));
  std::vector<R> tmp1(static_cast<size_t>(d)), tmp2(static_cast<size_t>(d));
  for (int hh = 0; hh < h_s; ++hh) {
    const int g = hh / G;
    const R w0 = w[static_cast<size_t>(g) * 2], w1 = w[static_cast<size_t>(g) * 2 + 1];
    if (bc.no_attn_norm) {
      for (int j = 0; j < d; ++j)
        tmp1[static_cast<size_t>(j)] =
            w0 * o_nla[static_cast<size_t>(hh) * d + j] + w1 * o_la[static_cast<size_t>(g) * d + j];
      rmsnorm_row(tmp1.data(), g_out_nla.ptr(), static_cast<R>(bc.eps_rms), d, merged.data() + hh * d);
    } else {
      rmsnorm_row(o_nla.data() + hh * d, g_out_nla.ptr(), static_cast<R>(bc.eps_rms), d, tmp1.data());
      rmsnorm_row(o_la.data() + g * d, g_out_la.ptr(), static_cast<R>(bc.eps_rms), d, tmp2.data());
      for (int j = 0; j < d; ++j)
        merged[static_cast<size_t>(hh) * d + j] = w0 * tmp1[static_cast<size_t>(j)] + w1 * tmp2[static_cast<size_t>(j)];
    }
  }
  std::vector<R> g_lin(static_cast<size_t>(hd));
  matvec(ps.at(lp + "wg").value, xrow.data(), g_lin.data());
  const Tensor<R>& bg = ps.at(lp + "bg").value;
  for (int ch = 0; ch < hd; ++ch)
    merged[static_cast<size_t>(ch)] *= sigmoid_s(g_lin[static_cast<size_t>(ch)] + bg(ch));
  std::vector<R> out(static_cast<size_t>(dm));
  matvec(ps.at(lp + "wo").value, merged.data(), out.data());
  return out;
}

}  // namespace detail

// Runs one token through the whole stack and returns its logits. The chunk
// commits after the outputs are computed, once the buffer holds C tokens.
template <typename R>
inline Tensor<R> decode_step(int token, DecodeState<R>& st, ParamStore<R>& ps) {
  const ModelConfig& cfg = st.cfg;
  require(token >= 0 && token < cfg.vocab, "decode_step: token out of vocabulary");
  const int dm = cfg.block.d_model;

  const Tensor<R>& E = ps.at("embed").value;
  std::vector<R> x(E.row(token), E.row(token) + dm);
  std::vector<R> normed(static_cast<size_t>(dm));
  const int mh = cfg.mlp_hidden();
  std::vector<R> mg(static_cast<size_t>(mh)), mu(static_cast<size_t>(mh));

  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string lpfx = layer_prefix<R>(layer);
    rmsnorm_row(x.data(), ps.at(lpfx + "norm_attn.gamma").value.ptr(),
                static_cast<R>(cfg.block.eps_rms), dm, normed.data());
    std::vector<R> a_out = detail::mixer_decode(st, layer, normed, ps);
    for (int j = 0; j < dm; ++j) x[static_cast<size_t>(j)] += a_out[static_cast<size_t>(j)];

    rmsnorm_row(x.data(), ps.at(lpfx + "norm_mlp.gamma").value.ptr(),
                static_cast<R>(cfg.block.eps_rms), dm, normed.data());
    detail::matvec(ps.at(lpfx + "mlp.w_gate").value, normed.data(), mg.data());
    detail::matvec(ps.at(lpfx + "mlp.w_up").value, normed.data(), mu.data());
    for (int j = 0; j < mh; ++j)
      mg[static_cast<size_t>(j)] = activation_s(Act::Silu, mg[static_cast<size_t>(j)]) * mu[static_cast<size_t>(j)];
    std::vector<R> m_out(static_cast<size_t>(dm));
    detail::matvec(ps.at(lpfx + "mlp.w_down").value, mg.data(), m_out.data());
    for (int j = 0; j < dm; ++j) x[static_cast<size_t>(j)] += m_out[static_cast<size_t>(j)];
  }

  rmsnorm_row(x.data(), ps.at("norm_final.gamma").value.ptr(), static_cast<R>(cfg.block.eps_rms),
              dm, normed.data());
  Tensor<R> logits({cfg.vocab});
  for (int v = 0; v < cfg.vocab; ++v) {
    const R* er = E.row(v);
    R acc = 0;
    for (int j = 0; j < dm; ++j) acc += normed[static_cast<size_t>(j)] * er[j];
    logits(v) = acc;
  }

  st.position += 1;
  st.buf_len += 1;
  if (st.buf_len == cfg.block.C) detail::commit_chunk(st, ps);
  return logits;
}

// One-shot prompt processing: complete chunks run through the training-mode
// forward and are harvested into the decode state; the remainder is decoded
// token by token. Returns the logits of the last position; all positions go
// to `all_logits` when provided.
template <typename R>
inline DecodeState<R> prefill(const std::vector<int>& tokens, ParamStore<R>& ps,
                              const ModelConfig& cfg, const RoutingPolicy& policy,
                              Tensor<R>* last_logits,
                              std::vector<Tensor<R>>* all_logits = nullptr) {
  DecodeState<R> st = make_decode_state<R>(cfg, policy);
  const int L = static_cast<int>(tokens.size());
  const int C = cfg.block.C;
  const int n_full = L / C * C;
  const int h_s = cfg.block.h_softmax, d = cfg.block.d_head, hl = cfg.block.h_lin;
  const int G = cfg.block.group_size();

  if (n_full > 0) {
    std::vector<int> head(tokens.begin(), tokens.begin() + n_full);
    ModelSaved<R> saved;
    Tensor<R> logits = model_forward(head, ps, cfg, policy, &saved);
    const int T = n_full / C;
    for (int layer = 0; layer < cfg.n_layers; ++layer) {
      LayerDecodeState<R>& ls = st.layers[static_cast<size_t>(layer)];
      const BlockSaved<R>& bs = saved.layers[static_cast<size_t>(layer)].block;
      for (int t = 0; t < T; ++t)
        for (int g = 0; g < hl; ++g) {
          const bool softmax = bs.routing.at(g, t) == OpChoice::Softmax;
          ls.trace.push_back(softmax ? 1 : 0);
          if (!softmax) continue;
          for (int m = 0; m < G; ++m) {
            const int hh = g * G + m;
            for (int i = t * C; i < t * C + C; ++i) {
              const R* kr = &bs.k_s(i, hh, 0);
              const R* vr = &bs.v_h(i, hh, 0);
              ls.k_cache[static_cast<size_t>(hh)].insert(ls.k_cache[static_cast<size_t>(hh)].end(),
                                                         kr, kr + d);
              ls.v_cache[static_cast<size_t>(hh)].insert(ls.v_cache[static_cast<size_t>(hh)].end(),
                                                         vr, vr + d);
            }
          }
        }
      for (int g = 0; g < hl; ++g)
        for (int a = 0; a < d; ++a)
          for (int b = 0; b < d; ++b)
            ls.lin_committed(g, a, b) = bs.gdn_saved.boundaries(T, g, a, b);
      ls.lin_tentative = ls.lin_committed;
      for (int j = 0; j < kConvWidth - 1; ++j) {
        const int src = n_full - (kConvWidth - 1) + j;
        if (src < 0) continue;
        for (int ch = 0; ch < cfg.block.hd(); ++ch) {
          ls.tail_q(j, ch) = bs.xq(src, ch);
          ls.tail_k(j, ch) = bs.xk(src, ch);
          ls.tail_v(j, ch) = bs.xv(src, ch);
        }
      }
    }
    st.position = n_full;
    if (all_logits)
      for (int i = 0; i < n_full; ++i) {
        Tensor<R> row({cfg.vocab});
        for (int v = 0; v < cfg.vocab; ++v) row(v) = logits(i, v);
        all_logits->push_back(row);
      }
    if (last_logits && n_full == L) {
      *last_logits = Tensor<R>({cfg.vocab});
      for (int v = 0; v < cfg.vocab; ++v) (*last_logits)(v) = logits(n_full - 1, v);
    }
  }

  for (int i = n_full; i < L; ++i) {
    Tensor<R> lg = decode_step(tokens[static_cast<size_t>(i)], st, ps);
    if (all_logits) all_logits->push_back(lg);
    if (last_logits && i == L - 1) *last_logits = lg;
  }
  return st;
}

// Greedy (temperature <= 0) or temperature sampling.
template <typename R>
inline int sample_token(const Tensor<R>& logits, double temperature, Rng& rng) {
  const int V = logits.dim(0);
  if (temperature <= 0) {
    int best = 0;
    for (int v = 1; v < V; ++v)
      if (logits(v) > logits(best)) best = v;
    return best;
  }
  std::vector<double> p(static_cast<size_t>(V));
  double m = -1e300;
  for (int v = 0; v < V; ++v) m = std::max(m, static_cast<double>(logits(v)) / temperature);
  double z = 0;
  for (int v = 0; v < V; ++v) {
    p[static_cast<size_t>(v)] = std::exp(static_cast<double>(logits(v)) / temperature - m);
    z += p[static_cast<size_t>(v)];
  }
  double r = rng.uniform() * z;
  for (int v = 0; v < V; ++v) {
    r -= p[static_cast<size_t>(v)];
    if (r <= 0) return v;
  }
  return V - 1;
}

}  // namespace hattn
