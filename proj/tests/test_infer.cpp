// Decode engine: prefill/decode consistency against the one-shot forward,
// routing-aware KV cache growth, state footprint accounting, and the exact
// match between decode-time and train-time routing.

#include <gtest/gtest.h>

#include <cmath>

#include "hattn/infer.hpp"
#include "oracles.hpp"

using namespace hattn;

using T32 = Tensor<float>;
using T64 = Tensor<double>;

namespace {

ModelConfig small_cfg() {
  ModelConfig mc;
  mc.vocab = 48;
  mc.n_layers = 2;
  mc.block.d_model = 16;
  mc.block.h_softmax = 2;
  mc.block.h_lin = 1;
  mc.block.d_head = 8;
  mc.block.C = 8;
  mc.block.c = 8;
  mc.seed = 4;
  return mc;
}

std::vector<int> random_tokens(int L, int vocab, uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t(static_cast<size_t>(L));
  for (int& v : t) v = rng.below(vocab);
  return t;
}

template <typename R>
double logits_gap(const Tensor<R>& full, const std::vector<Tensor<R>>& per_pos) {
  double m = 0;
  for (int i = 0; i < full.dim(0); ++i)
    for (int v = 0; v < full.dim(1); ++v)
      m = std::max(m, std::abs(static_cast<double>(full(i, v)) -
                               static_cast<double>(per_pos[static_cast<size_t>(i)](v))));
  return m;
}

}  // namespace

TEST(Prefill, MatchesTrainingForwardOnChunkAlignedPrompt) {
  const ModelConfig mc = small_cfg();
  ParamStore<float> ps;
  init_params(ps, mc);
  const auto toks = random_tokens(32, mc.vocab, 7);
  T32 full = model_forward(toks, ps, mc, RoutingMode::Learned,
                           static_cast<ModelSaved<float>*>(nullptr));
  Tensor<float> last;
  std::vector<T32> all;
  prefill(toks, ps, mc, RoutingMode::Learned, &last, &all);
  ASSERT_EQ(all.size(), toks.size());
  EXPECT_LT(logits_gap(full, all), 1e-6);  // same code path for full chunks
  for (int v = 0; v < mc.vocab; ++v) EXPECT_EQ(last(v), full(31, v));
}

TEST(Prefill, ShortPromptStaysBuffered) {
  const ModelConfig mc = small_cfg();
  ParamStore<float> ps;
  init_params(ps, mc);
  const auto toks = random_tokens(5, mc.vocab, 8);  // L < C
  Tensor<float> last;
  DecodeState<float> st = prefill(toks, ps, mc, RoutingMode::Learned, &last);
  EXPECT_EQ(st.buf_len, 5);
  const StateFootprint<float> fp = state_footprint(st);
  EXPECT_EQ(fp.kv, 0u);
  EXPECT_GT(fp.buffer, 0u);
}

TEST(DecodeStep, TokenByTokenMatchesOneShotForward) {
  const ModelConfig mc = small_cfg();
  ParamStore<float> ps;
  init_params(ps, mc);
  const int L = 40;  // 5 chunks
  const auto toks = random_tokens(L, mc.vocab, 9);
  T32 full = model_forward(toks, ps, mc, RoutingMode::Learned,
                           static_cast<ModelSaved<float>*>(nullptr));
  DecodeState<float> st = make_decode_state<float>(mc, RoutingMode::Learned);
  double max_gap = 0;
  for (int i = 0; i < L; ++i) {
    T32 lg = decode_step(toks[static_cast<size_t>(i)], st, ps);
    for (int v = 0; v < mc.vocab; ++v)
      max_gap = std::max(max_gap, std::abs(static_cast<double>(lg(v)) -
                                           static_cast<double>(full(i, v))));
  }
  EXPECT_LT(max_gap, 1e-4);
}

TEST(DecodeStep, PrefixSplitsAgree) {
  // Splitting the prompt between prefill and decode at arbitrary points gives
  // the same logits as the one-shot forward.
  const ModelConfig mc = small_cfg();
  ParamStore<float> ps;
  init_params(ps, mc);
  const int L = 36;  // not chunk-aligned: 4 full chunks + 4 buffered
  const auto toks = random_tokens(L, mc.vocab, 10);
  std::vector<T32> all;
  Tensor<float> last;
  prefill(toks, ps, mc, RoutingMode::Learned, &last, &all);

  DecodeState<float> st = make_decode_state<float>(mc, RoutingMode::Learned);
  double max_gap = 0;
  for (int i = 0; i < L; ++i) {
    T32 lg = decode_step(toks[static_cast<size_t>(i)], st, ps);
    for (int v = 0; v < mc.vocab; ++v)
      max_gap = std::max(max_gap, std::abs(static_cast<double>(lg(v)) -
                                           static_cast<double>(all[static_cast<size_t>(i)](v))));
  }
  EXPECT_LT(max_gap, 1e-4);
}

TEST(DecodeStep, RoutingMatchesTrainingForwardExactly) {
  const ModelConfig mc = small_cfg();
  ParamStore<float> ps;
  init_params(ps, mc);
  const int L = 48;
  const auto toks = random_tokens(L, mc.vocab, 11);
  std::vector<ChunkRouting> routings;
  model_forward(toks, ps, mc, RoutingMode::Learned, static_cast<ModelSaved<float>*>(nullptr),
                &routings);

  DecodeState<float> st = make_decode_state<float>(mc, RoutingMode::Learned);
  for (int t : toks) decode_step(t, st, ps);
  const int T = L / mc.block.C, hl = mc.block.h_lin;
  for (int layer = 0; layer < mc.n_layers; ++layer) {
    ASSERT_EQ(st.layers[static_cast<size_t>(layer)].trace.size(), static_cast<size_t>(T * hl));
    for (int t = 0; t < T; ++t)
      for (int g = 0; g < hl; ++g) {
        const bool train_sm = routings[static_cast<size_t>(layer)].at(g, t) == OpChoice::Softmax;
        const bool decode_sm = st.layers[static_cast<size_t>(layer)].trace[static_cast<size_t>(t * hl + g)] != 0;
        EXPECT_EQ(train_sm, decode_sm) << "layer " << layer << " chunk " << t;
      }
  }
}

TEST(Footprint, AllLinearKeepsKvEmptyAndStateConstant) {
  const ModelConfig mc = small_cfg();
  ParamStore<float> ps;
  init_params(ps, mc);
  DecodeState<float> st = make_decode_state<float>(mc, RoutingMode::AllLinear);
  Rng rng(12);
  size_t committed_footprint = 0;
  for (int i = 0; i < 10 * mc.block.C; ++i) {
    decode_step(rng.below(mc.vocab), st, ps);
    if (st.buf_len == 0) {
      const StateFootprint<float> fp = state_footprint(st);
      EXPECT_EQ(fp.kv, 0u);
      if (committed_footprint == 0) committed_footprint = fp.total();
      EXPECT_EQ(fp.total(), committed_footprint) << "linear-only state must not grow";
    }
  }
}

TEST(Footprint, KvGrowsExactlyWithSoftmaxChunks) {
  const ModelConfig mc = small_cfg();
  ParamStore<float> ps;
  init_params(ps, mc);
  for (RoutingMode mode : {RoutingMode::AllSoftmax, RoutingMode::Learned}) {
    DecodeState<float> st = make_decode_state<float>(mc, mode);
    Rng rng(13);
    for (int i = 0; i < 6 * mc.block.C; ++i) decode_step(rng.below(mc.vocab), st, ps);
    const StateFootprint<float> fp = state_footprint(st);
    size_t expected = 0;
    const int G = mc.block.group_size();
    for (const auto& ls : st.layers) {
      size_t softmax_chunks = 0;
      for (uint8_t c : ls.trace) softmax_chunks += c;
      expected += softmax_chunks * static_cast<size_t>(mc.block.C) * G * 2 * mc.block.d_head;
    }
    EXPECT_EQ(fp.kv, expected);
    if (mode == RoutingMode::AllSoftmax) {
      // Closed form: C * chunks * h_softmax * 2 * d_head per layer.
      const size_t chunks = 6;
      EXPECT_EQ(fp.kv, static_cast<size_t>(mc.n_layers) * chunks * mc.block.C *
                           mc.block.h_softmax * 2 * mc.block.d_head);
    }
  }
}

TEST(Sampling, GreedyPicksArgmaxAndTemperatureIsSeeded) {
  Tensor<float> logits({4});
  logits(0) = 0.1f;
  logits(1) = 2.0f;
  logits(2) = -1.0f;
  logits(3) = 1.9f;
  Rng rng(1);
  EXPECT_EQ(sample_token(logits, 0.0, rng), 1);
  Rng r1(42), r2(42);
  for (int i = 0; i < 16; ++i)
    EXPECT_EQ(sample_token(logits, 1.0, r1), sample_token(logits, 1.0, r2));
}

TEST(DecodeStep, ContinuationAfterPrefillMatchesOneShot) {
  // Prefill an arbitrary-length prefix, then keep decoding the rest of the
  // sequence; every continuation logit must match the one-shot forward.
  const ModelConfig mc = small_cfg();
  ParamStore<float> ps;
  init_params(ps, mc);
  const int L = 48;
  const auto toks = random_tokens(L, mc.vocab, 21);
  T32 full = model_forward(toks, ps, mc, RoutingMode::Learned,
                           static_cast<ModelSaved<float>*>(nullptr));
  for (int split : {3, 8, 13, 24, 29}) {
    std::vector<int> prefix(toks.begin(), toks.begin() + split);
    Tensor<float> last;
    DecodeState<float> st = prefill(prefix, ps, mc, RoutingMode::Learned, &last);
    double gap = 0;
    for (int v = 0; v < mc.vocab; ++v)
      gap = std::max(gap, std::abs(static_cast<double>(last(v)) -
                                   static_cast<double>(full(split - 1, v))));
    for (int i = split; i < L; ++i) {
      T32 lg = decode_step(toks[static_cast<size_t>(i)], st, ps);
      for (int v = 0; v < mc.vocab; ++v)
        gap = std::max(gap, std::abs(static_cast<double>(lg(v)) -
                                     static_cast<double>(full(i, v))));
    }
    EXPECT_LT(gap, 1e-4) << "split at " << split;
  }
}

TEST(DecodeStep, MixedLayerPatternStaysConsistent) {
  ModelConfig mc = small_cfg();
  mc.layer_pattern = {LayerKind::GdnOnly, LayerKind::Hybrid};
  ParamStore<float> ps;
  init_params(ps, mc);
  const int L = 32;
  const auto toks = random_tokens(L, mc.vocab, 22);
  T32 full = model_forward(toks, ps, mc, RoutingMode::Learned,
                           static_cast<ModelSaved<float>*>(nullptr));
  DecodeState<float> st = make_decode_state<float>(mc, RoutingMode::Learned);
  double gap = 0;
  for (int i = 0; i < L; ++i) {
    T32 lg = decode_step(toks[static_cast<size_t>(i)], st, ps);
    for (int v = 0; v < mc.vocab; ++v)
      gap = std::max(gap, std::abs(static_cast<double>(lg(v)) -
                                   static_cast<double>(full(i, v))));
  }
  EXPECT_LT(gap, 1e-4);
  // The gdn-only layer must never have cached anything.
  for (const auto& kc : st.layers[0].k_cache) EXPECT_TRUE(kc.empty());
}

TEST(DecodeStep, EveryAblationFlagStaysConsistentWithForward) {
  // The decode path reimplements each ablation's semantics; any drift from
  // the training forward shows up as a logit gap.
  const int L = 40;
  for (int flag = 0; flag < 6; ++flag) {
    ModelConfig mc = small_cfg();
    switch (flag) {
      case 0: mc.block.sattn_out = true; break;
      case 1: mc.block.gdn_out = true; break;
      case 2: mc.block.no_lattn_decay = true; break;
      case 3: mc.block.no_attn_norm = true; break;
      case 4: mc.block.no_attn_weights = true; break;
      case 5: mc.block.weights_from_x = true; break;
    }
    ParamStore<float> ps;
    init_params(ps, mc);
    const auto toks = random_tokens(L, mc.vocab, 23 + static_cast<uint64_t>(flag));
    T32 full = model_forward(toks, ps, mc, RoutingMode::Learned,
                             static_cast<ModelSaved<float>*>(nullptr));
    DecodeState<float> st = make_decode_state<float>(mc, RoutingMode::Learned);
    double gap = 0;
    for (int i = 0; i < L; ++i) {
      T32 lg = decode_step(toks[static_cast<size_t>(i)], st, ps);
      for (int v = 0; v < mc.vocab; ++v)
        gap = std::max(gap, std::abs(static_cast<double>(lg(v)) -
                                     static_cast<double>(full(i, v))));
    }
    EXPECT_LT(gap, 1e-4) << "ablation flag " << flag;
  }
}

TEST(DecodeStep, SubChunkedLinearKernelStaysConsistent) {
  ModelConfig mc = small_cfg();
  mc.block.c = mc.block.C / 4;  // training uses sub-chunks; decode is per token
  ParamStore<float> ps;
  init_params(ps, mc);
  const int L = 32;
  const auto toks = random_tokens(L, mc.vocab, 29);
  T32 full = model_forward(toks, ps, mc, RoutingMode::Learned,
                           static_cast<ModelSaved<float>*>(nullptr));
  DecodeState<float> st = make_decode_state<float>(mc, RoutingMode::Learned);
  double gap = 0;
  for (int i = 0; i < L; ++i) {
    T32 lg = decode_step(toks[static_cast<size_t>(i)], st, ps);
    for (int v = 0; v < mc.vocab; ++v)
      gap = std::max(gap, std::abs(static_cast<double>(lg(v)) -
                                   static_cast<double>(full(i, v))));
  }
  EXPECT_LT(gap, 1e-4);
}

TEST(DecodeStep, RopeVariantStaysConsistent) {
  ModelConfig mc = small_cfg();
  mc.block.rope = true;
  ParamStore<float> ps;
  init_params(ps, mc);
  const int L = 24;
  const auto toks = random_tokens(L, mc.vocab, 14);
  T32 full = model_forward(toks, ps, mc, RoutingMode::Learned,
                           static_cast<ModelSaved<float>*>(nullptr));
  DecodeState<float> st = make_decode_state<float>(mc, RoutingMode::Learned);
  double max_gap = 0;
  for (int i = 0; i < L; ++i) {
    T32 lg = decode_step(toks[static_cast<size_t>(i)], st, ps);
    for (int v = 0; v < mc.vocab; ++v)
      max_gap = std::max(max_gap, std::abs(static_cast<double>(lg(v)) -
                                           static_cast<double>(full(i, v))));
  }
  EXPECT_LT(max_gap, 1e-4);
}
