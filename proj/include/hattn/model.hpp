#pragma once

// Decoder-only language model: tied embeddings, pre-norm residual stack of
// [token mixer, SwiGLU MLP] pairs, final RMS norm. The mixer of every layer
// is the hybrid block; layer kinds reduce it to pure-GDN or pure-softmax
// variants through routing overrides and forced merge weights, so all three
// model families come out of one code path.

#include <cmath>
#include <string>
#include <vector>

#include "hattn/block.hpp"
#include "hattn/ops.hpp"
#include "hattn/tensor.hpp"

namespace hattn {

enum class LayerKind { Hybrid, GdnOnly, SoftmaxOnly };

enum class RoutingMode { Learned, AllSoftmax, AllLinear };

// Routing behavior for a whole run. A fraction in [0, 1] forces a fixed
// periodic pattern with that share of softmax chunks on every layer
// (benchmark grids); otherwise the mode applies, with layer kinds taking
// precedence on non-hybrid layers.
struct RoutingPolicy {
  RoutingMode mode = RoutingMode::Learned;
  double fraction = -1.0;

  RoutingPolicy() = default;
  RoutingPolicy(RoutingMode m) : mode(m) {}  // NOLINT: implicit by design
  static RoutingPolicy with_fraction(double p) {
    RoutingPolicy r;
    r.fraction = p;
    return r;
  }
  bool forced_fraction() const { return fraction >= 0.0; }
};

// Deterministic pattern with softmax share p, mirror-symmetric within each
// period so the softmax chunks' centroid sits at the sequence average. That
// balance keeps the measured attention cost on the ideal L_nla * L line; a
// one-sided pattern carries an O(T) phase bias that distorts small grids.
inline bool fraction_chunk_is_softmax(double p, int t) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  int best_q = 1, best_a = 0;
  double best_err = 1e9;
  for (int q = 1; q <= 16; ++q) {
    const int a = static_cast<int>(std::lround(p * q));
    const double err = std::abs(p * q - a);
    if (err < best_err - 1e-12) {
      best_err = err;
      best_q = q;
      best_a = a;
    }
  }
  const int q = best_q;
  const int a = std::min(best_a, q);
  const int pos = t % (2 * q);
  const int i = pos < q ? pos : 2 * q - 1 - pos;  // second half mirrors the first
  return (i + 1) * a / q > i * a / q;
}

inline ChunkRouting fraction_routing(int n_groups, int n_chunks, double p) {
  ChunkRouting r = ChunkRouting::uniform(n_groups, n_chunks, OpChoice::Linear);
  for (int t = 0; t < n_chunks; ++t)
    if (fraction_chunk_is_softmax(p, t))
      for (int g = 0; g < n_groups; ++g) r.set(g, t, OpChoice::Softmax);
  return r;
}

struct ModelConfig {
  int vocab = 256;
  int n_layers = 2;
  std::vector<LayerKind> layer_pattern;  // empty -> all Hybrid
  BlockConfig block;
  int mlp_mult = 4;
  uint64_t seed = 1;

  int mlp_hidden() const {
    // SwiGLU convention: two thirds of mult*d, rounded up to a multiple of 8.
    const int target = block.d_model * mlp_mult * 2 / 3;
    return (target + 7) / 8 * 8;
  }

  std::vector<LayerKind> pattern() const {
    if (!layer_pattern.empty()) return layer_pattern;
    return std::vector<LayerKind>(static_cast<size_t>(n_layers), LayerKind::Hybrid);
  }

  void validate() const {
    require(vocab > 0 && n_layers > 0, "model: bad sizes");
    require(layer_pattern.empty() || static_cast<int>(layer_pattern.size()) == n_layers,
            "model: layer_pattern length must equal n_layers");
    block.validate();
  }
};

template <typename R>
inline std::string layer_prefix(int i) {
  return "layers." + std::to_string(i) + ".";
}

template <typename R>
inline void init_params(ParamStore<R>& ps, const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  auto normal = [&](std::vector<int> shape, double std) {
    Tensor<R> t(std::move(shape));
    for (R& v : t.data) v = static_cast<R>(rng.normal() * std);
    return t;
  };
  const int dm = cfg.block.d_model, m = cfg.mlp_hidden();
  ps.add("embed", normal({cfg.vocab, dm}, 0.02));
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string lp = layer_prefix<R>(i);
    ps.add(lp + "norm_attn.gamma", Tensor<R>::full({dm}, R(1)));
    ps.add(lp + "norm_mlp.gamma", Tensor<R>::full({dm}, R(1)));
    add_block_params(ps, lp + "attn.", cfg.block, rng);
    ps.add(lp + "mlp.w_gate", normal({dm, m}, 0.02));
    ps.add(lp + "mlp.w_up", normal({dm, m}, 0.02));
    ps.add(lp + "mlp.w_down", normal({m, dm}, 0.02));
  }
  ps.add("norm_final.gamma", Tensor<R>::full({dm}, R(1)));
}

template <typename R>
struct LayerSaved {
  Tensor<R> x_in;      // residual stream entering the layer
  Tensor<R> a_normed;  // rmsnorm before the mixer
  BlockSaved<R> block;
  Tensor<R> x_mid;     // residual after the mixer
  Tensor<R> m_normed;  // rmsnorm before the MLP
  Tensor<R> mlp_g, mlp_u, mlp_h;
};

template <typename R>
struct ModelSaved {
  std::vector<LayerSaved<R>> layers;
  Tensor<R> x_final;   // residual stream before the final norm
  Tensor<R> x_normed;  // final-normed stream (feeds the tied head)
};

// Per-layer routing override resolved from the layer kind and the global
// routing policy. Returned routing objects live in `storage`.
inline BlockOverrides layer_overrides(LayerKind kind, const RoutingPolicy& policy, int n_groups,
                                      int n_chunks, std::vector<ChunkRouting>& storage) {
  BlockOverrides ov;
  auto forced = [&](OpChoice c) -> const ChunkRouting* {
    storage.push_back(ChunkRouting::uniform(n_groups, n_chunks, c));
    return &storage.back();
  };
  if (policy.forced_fraction()) {
    storage.push_back(fraction_routing(n_groups, n_chunks, policy.fraction));
    ov.routing = &storage.back();
    if (kind == LayerKind::GdnOnly) ov.force_w = true, ov.w0 = 0.0, ov.w1 = 1.0;
    if (kind == LayerKind::SoftmaxOnly) ov.force_w = true, ov.w0 = 1.0, ov.w1 = 0.0;
    return ov;
  }
  const RoutingMode mode = policy.mode;
  switch (kind) {
    case LayerKind::Hybrid:
      if (mode == RoutingMode::AllSoftmax) ov.routing = forced(OpChoice::Softmax);
      if (mode == RoutingMode::AllLinear) ov.routing = forced(OpChoice::Linear);
      break;
    case LayerKind::GdnOnly:
      ov.routing = forced(OpChoice::Linear);
      ov.force_w = true;
      ov.w0 = 0.0;
      ov.w1 = 1.0;
      break;
    case LayerKind::SoftmaxOnly:
      ov.routing = forced(OpChoice::Softmax);
      ov.force_w = true;
      ov.w0 = 1.0;
      ov.w1 = 0.0;
      break;
  }
  return ov;
}

// Forward over one sequence. Routing overrides storage must outlive saved
// state, so the caller passes it in.
template <typename R>
inline Tensor<R> model_forward(const std::vector<int>& tokens, ParamStore<R>& ps,
                               const ModelConfig& cfg, const RoutingPolicy& policy, ModelSaved<R>* saved,
                               std::vector<ChunkRouting>* routings_out = nullptr,
                               FlopCounter* flops = nullptr) {
  cfg.validate();
  const int L = static_cast<int>(tokens.size());
  const int dm = cfg.block.d_model, m = cfg.mlp_hidden(), V = cfg.vocab;
  require(L >= 1 && L % cfg.block.C == 0, "model_forward: L must be a multiple of the chunk size");

  const Tensor<R>& E = ps.at("embed").value;
  Tensor<R> x({L, dm});
  for (int l = 0; l < L; ++l) {
    const int t = tokens[static_cast<size_t>(l)];
    require(t >= 0 && t < V, "model_forward: token id " + std::to_string(t) + " out of vocabulary");
    const R* er = E.row(t);
    R* xr = x.row(l);
    for (int j = 0; j < dm; ++j) xr[j] = er[j];
  }

  const auto pattern = cfg.pattern();
  ModelSaved<R> local;
  ModelSaved<R>& sv = saved ? *saved : local;
  sv.layers.assign(static_cast<size_t>(cfg.n_layers), LayerSaved<R>{});
  std::vector<ChunkRouting> ov_storage;
  ov_storage.reserve(static_cast<size_t>(cfg.n_layers));

  for (int i = 0; i < cfg.n_layers; ++i) {
    LayerSaved<R>& ls = sv.layers[static_cast<size_t>(i)];
    const std::string lp = layer_prefix<R>(i);
    ls.x_in = x;
    ls.a_normed = rmsnorm(x, ps.at(lp + "norm_attn.gamma").value, static_cast<R>(cfg.block.eps_rms));
    BlockParams<R> bp = resolve_block_params(ps, lp + "attn.", cfg.block);
    const BlockOverrides ov = layer_overrides(pattern[static_cast<size_t>(i)], policy,
                                              cfg.block.n_groups(), L / cfg.block.C, ov_storage);
    Tensor<R> a_out = block_forward(ls.a_normed, bp, cfg.block, ov, &ls.block, 0, flops);
    for (size_t idx = 0; idx < x.data.size(); ++idx) x.data[idx] += a_out.data[idx];
    ls.x_mid = x;
    if (routings_out) routings_out->push_back(ls.block.routing);

    ls.m_normed = rmsnorm(x, ps.at(lp + "norm_mlp.gamma").value, static_cast<R>(cfg.block.eps_rms));
    const uint64_t proj_before = flops ? flops->projections : 0;
    linear_fwd(ls.m_normed, ps.at(lp + "mlp.w_gate").value, static_cast<const Tensor<R>*>(nullptr),
               ls.mlp_g, flops);
    linear_fwd(ls.m_normed, ps.at(lp + "mlp.w_up").value, static_cast<const Tensor<R>*>(nullptr),
               ls.mlp_u, flops);
    ls.mlp_h = Tensor<R>({L, m});
    for (size_t idx = 0; idx < ls.mlp_h.data.size(); ++idx)
      ls.mlp_h.data[idx] = activation_s(Act::Silu, ls.mlp_g.data[idx]) * ls.mlp_u.data[idx];
    Tensor<R> m_out;
    linear_fwd(ls.mlp_h, ps.at(lp + "mlp.w_down").value, static_cast<const Tensor<R>*>(nullptr),
               m_out, flops);
    if (flops) {
      flops->mlp += flops->projections - proj_before;
      flops->projections = proj_before;
    }
    for (size_t idx = 0; idx < x.data.size(); ++idx) x.data[idx] += m_out.data[idx];
  }

  sv.x_final = x;
  sv.x_normed = rmsnorm(x, ps.at("norm_final.gamma").value, static_cast<R>(cfg.block.eps_rms));

  Tensor<R> logits({L, V});
  matmul_nt_acc(sv.x_normed.ptr(), E.ptr(), logits.ptr(), L, dm, V);
  if (flops) flops->projections += static_cast<uint64_t>(L) * dm * V;
  assert_finite(logits, "model_forward");
  return logits;
}

// Reverse pass for one sequence; parameter gradients accumulate into `ps`.
template <typename R>
inline void model_backward(const Tensor<R>& dlogits, const std::vector<int>& tokens,
                           ParamStore<R>& ps, const ModelConfig& cfg, const ModelSaved<R>& sv) {
  const int L = static_cast<int>(tokens.size());
  const int dm = cfg.block.d_model;
  Param<R>& E = ps.at("embed");

  // Tied head: logits = x_normed E^T.
  Tensor<R> dxn({L, dm});
  matmul_acc(dlogits.ptr(), E.value.ptr(), dxn.ptr(), L, cfg.vocab, dm);
  matmul_tn_acc(dlogits.ptr(), sv.x_normed.ptr(), E.grad.ptr(), cfg.vocab, L, dm);

  Tensor<R> dx({L, dm});
  rmsnorm_grad_acc(dxn, sv.x_final, ps.at("norm_final.gamma").value,
                   static_cast<R>(cfg.block.eps_rms), &dx, &ps.at("norm_final.gamma").grad);

  for (int i = cfg.n_layers - 1; i >= 0; --i) {
    const LayerSaved<R>& ls = sv.layers[static_cast<size_t>(i)];
    const std::string lp = layer_prefix<R>(i);

    // MLP branch.
    const Tensor<R>& w_down = ps.at(lp + "mlp.w_down").value;
    Tensor<R> dh({L, cfg.mlp_hidden()});
    matmul_grad_acc(dx, ls.mlp_h, w_down, &dh, &ps.at(lp + "mlp.w_down").grad);
    Tensor<R> dg(dh.shape), du(dh.shape);
    for (size_t idx = 0; idx < dh.data.size(); ++idx) {
      const R gv = ls.mlp_g.data[idx];
      dg.data[idx] = dh.data[idx] * ls.mlp_u.data[idx] * activation_deriv_s(Act::Silu, gv);
      du.data[idx] = dh.data[idx] * activation_s(Act::Silu, gv);
    }
    Tensor<R> dm_normed({L, dm});
    matmul_grad_acc(dg, ls.m_normed, ps.at(lp + "mlp.w_gate").value, &dm_normed,
                    &ps.at(lp + "mlp.w_gate").grad);
    matmul_grad_acc(du, ls.m_normed, ps.at(lp + "mlp.w_up").value, &dm_normed,
                    &ps.at(lp + "mlp.w_up").grad);
    rmsnorm_grad_acc(dm_normed, ls.x_mid, ps.at(lp + "norm_mlp.gamma").value,
                     static_cast<R>(cfg.block.eps_rms), &dx, &ps.at(lp + "norm_mlp.gamma").grad);

    // Mixer branch.
    BlockParams<R> bp = resolve_block_params(ps, lp + "attn.", cfg.block);
    Tensor<R> da_normed = block_backward(dx, ls.block, bp, cfg.block);
    rmsnorm_grad_acc(da_normed, ls.x_in, ps.at(lp + "norm_attn.gamma").value,
                     static_cast<R>(cfg.block.eps_rms), &dx, &ps.at(lp + "norm_attn.gamma").grad);
  }

  for (int l = 0; l < L; ++l) {
    R* er = E.grad.row(tokens[static_cast<size_t>(l)]);
    const R* dxr = dx.row(l);
    for (int j = 0; j < dm; ++j) er[j] += dxr[j];
  }
}

}  // namespace hattn
