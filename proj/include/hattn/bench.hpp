#pragma once

// FLOP accounting and wall-clock microbenchmarks over a (length, routing)
// grid, plus the two-constant analytic cost fit
//   counted ~= a * L_nla * L + b * L_la * C
// where L_nla / L_la count tokens in softmax- / linear-routed chunks. Wall
// times are reported, never asserted; only the multiply-add counts are exact.

#include <chrono>
#include <string>
#include <vector>

#include "hattn/infer.hpp"
#include "hattn/model.hpp"

namespace hattn {

struct BenchRow {
  int L = 0;
  std::string mode;      // "fraction:p" or "learned"
  double p = -1.0;       // requested softmax fraction, -1 for learned
  double l_nla = 0;      // softmax-routed tokens per (layer, group), averaged
  double l_la = 0;
  FlopCounter flops;
  uint64_t counted = 0;  // routed attention multiply-adds
  double predicted = 0;  // filled after the fit
  double prefill_ms = 0;
  double decode_us = 0;  // median per-token decode, microseconds
  size_t kv_values = 0;
  size_t total_values = 0;
};

struct BenchFit {
  double a = 0, b = 0;
  bool valid = false;
};

// Least squares over rows with a forced fraction, minimizing relative
// residuals so small all-linear points count as much as large quadratic ones.
inline BenchFit fit_cost_model(std::vector<BenchRow>& rows, int C) {
  double s11 = 0, s12 = 0, s22 = 0, y1 = 0, y2 = 0;
  for (const BenchRow& r : rows) {
    if (r.p < 0 || r.counted == 0) continue;
    const double w = 1.0 / static_cast<double>(r.counted);
    const double x1 = r.l_nla * r.L * w;
    const double x2 = r.l_la * C * w;
    s11 += x1 * x1;
    s12 += x1 * x2;
    s22 += x2 * x2;
    y1 += x1;  // target is counted * w == 1
    y2 += x2;
  }
  BenchFit fit;
  const double det = s11 * s22 - s12 * s12;
  if (std::abs(det) > 1e-12 * (std::abs(s11 * s22) + 1.0)) {
    fit.a = (y1 * s22 - y2 * s12) / det;
    fit.b = (s11 * y2 - s12 * y1) / det;
    fit.valid = true;
  } else if (s11 > 0) {
    fit.a = y1 / s11;
    fit.valid = true;
  } else if (s22 > 0) {
    fit.b = y2 / s22;
    fit.valid = true;
  }
  for (BenchRow& r : rows)
    r.predicted = fit.a * r.l_nla * r.L + fit.b * r.l_la * C;
  return fit;
}

template <typename R>
inline BenchRow bench_point(ParamStore<R>& ps, const ModelConfig& cfg, int L,
                            const RoutingPolicy& policy, const std::string& mode_name,
                            double fraction, int decode_steps, bool with_timing,
                            uint64_t token_seed) {
  using clock = std::chrono::steady_clock;
  BenchRow row;
  row.L = L;
  row.mode = mode_name;
  row.p = fraction;

  Rng rng(token_seed);
  std::vector<int> tokens(static_cast<size_t>(L));
  for (int& t : tokens) t = rng.below(cfg.vocab);

  std::vector<ChunkRouting> routings;
  model_forward(tokens, ps, cfg, policy, static_cast<ModelSaved<R>*>(nullptr), &routings,
                &row.flops);
  row.counted = row.flops.attention_routed();

  // Realized softmax/linear token counts, averaged per (layer, group).
  long long softmax_chunks = 0, total_chunks = 0;
  for (const ChunkRouting& r : routings) {
    for (OpChoice c : r.choice) softmax_chunks += c == OpChoice::Softmax ? 1 : 0;
    total_chunks += static_cast<long long>(r.choice.size());
  }
  const double share = total_chunks > 0 ? static_cast<double>(softmax_chunks) / total_chunks : 0.0;
  row.l_nla = share * L;
  row.l_la = (1.0 - share) * L;

  if (with_timing) {
    const auto t0 = clock::now();
    Tensor<R> last;
    DecodeState<R> st = prefill(tokens, ps, cfg, policy, &last);
    const auto t1 = clock::now();
    row.prefill_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    const StateFootprint<R> fp = state_footprint(st);
    row.kv_values = fp.kv;
    row.total_values = fp.total();
    std::vector<double> times;
    int tok = 2;
    for (int i = 0; i < decode_steps; ++i) {
      const auto d0 = clock::now();
      Tensor<R> lg = decode_step(tok, st, ps);
      const auto d1 = clock::now();
      times.push_back(std::chrono::duration<double, std::micro>(d1 - d0).count());
      tok = sample_token(lg, 0.0, rng) % cfg.vocab;
    }
    std::sort(times.begin(), times.end());
    row.decode_us = times.empty() ? 0.0 : times[times.size() / 2];
  }
  return row;
}

}  // namespace hattn
