#pragma once

// Exact multiply-add accounting for the attention paths. Counters are plain
// integers incremented by the kernels; exp/div and other scalar ops are not
// counted. The routed subtotal is the quantity the analytic cost model
// a*L_nla*L + b*L_la*C describes: softmax work over visible KV plus the
// linear-path state folds that committed chunks actually perform.

#include <cstdint>

namespace hattn {

struct FlopCounter {
  // Softmax path: QK^T and PV multiply-adds over processed (query, key) pairs.
  uint64_t attn_softmax_cross = 0;  // strictly-earlier active chunks
  uint64_t attn_softmax_diag = 0;   // always-visible diagonal chunks
  // Linear path.
  uint64_t attn_linear_update = 0;  // state folds committed by linear-routed chunks
  uint64_t attn_linear_other = 0;   // inner-chunk terms, state reads, decay (always on)
  // Everything else.
  uint64_t projections = 0;
  uint64_t mlp = 0;

  uint64_t attention_routed() const {
    return attn_softmax_cross + attn_softmax_diag + attn_linear_update;
  }

  uint64_t attention_total() const { return attention_routed() + attn_linear_other; }

  uint64_t total() const { return attention_total() + projections + mlp; }

  FlopCounter& operator+=(const FlopCounter& o) {
    attn_softmax_cross += o.attn_softmax_cross;
    attn_softmax_diag += o.attn_softmax_diag;
    attn_linear_update += o.attn_linear_update;
    attn_linear_other += o.attn_linear_other;
    projections += o.projections;
    mlp += o.mlp;
    return *this;
  }
};

}  // namespace hattn
