// Model stack and training: shape/causality/determinism contracts, the
// end-to-end finite-difference check on a frozen-routing model, schedule
// endpoints, task-generator properties, batch permutation equivariance, and
// a short training smoke run that must cut the loss by at least 10%.

#include <gtest/gtest.h>

#include <cmath>

#include "hattn/config.hpp"
#include "hattn/model.hpp"
#include "hattn/train.hpp"
#include "oracles.hpp"

using namespace hattn;
using oracle::central_diff;
using oracle::rel_err;

using T64 = Tensor<double>;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig mc;
  mc.vocab = 32;
  mc.n_layers = 2;
  mc.block.d_model = 8;
  mc.block.h_softmax = 2;
  mc.block.h_lin = 1;
  mc.block.d_head = 4;
  mc.block.C = 4;
  mc.block.c = 4;
  mc.seed = 3;
  return mc;
}

std::vector<int> random_tokens(int L, int vocab, uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t(static_cast<size_t>(L));
  for (int& v : t) v = rng.below(vocab);
  return t;
}

}  // namespace

TEST(Model, LogitShapeAndOovRejection) {
  const ModelConfig mc = tiny_cfg();
  ParamStore<double> ps;
  init_params(ps, mc);
  auto toks = random_tokens(16, mc.vocab, 1);
  T64 logits = model_forward(toks, ps, mc, RoutingMode::Learned,
                             static_cast<ModelSaved<double>*>(nullptr));
  EXPECT_EQ(logits.dim(0), 16);
  EXPECT_EQ(logits.dim(1), mc.vocab);

  toks[3] = mc.vocab;  // out of vocabulary
  EXPECT_THROW(model_forward(toks, ps, mc, RoutingMode::Learned,
                             static_cast<ModelSaved<double>*>(nullptr)),
               dim_error);
}

TEST(Model, CausalityOfLogits) {
  const ModelConfig mc = tiny_cfg();
  ParamStore<double> ps;
  init_params(ps, mc);
  auto toks = random_tokens(16, mc.vocab, 2);
  T64 a = model_forward(toks, ps, mc, RoutingMode::Learned,
                        static_cast<ModelSaved<double>*>(nullptr));
  auto toks2 = toks;
  toks2[12] = (toks2[12] + 5) % mc.vocab;
  toks2[15] = (toks2[15] + 9) % mc.vocab;
  T64 b = model_forward(toks2, ps, mc, RoutingMode::Learned,
                        static_cast<ModelSaved<double>*>(nullptr));
  for (int i = 0; i < 12; ++i)
    for (int v = 0; v < mc.vocab; ++v) EXPECT_EQ(a(i, v), b(i, v));
}

TEST(Model, DeterministicAcrossRuns) {
  const ModelConfig mc = tiny_cfg();
  ParamStore<double> ps1, ps2;
  init_params(ps1, mc);
  init_params(ps2, mc);
  auto toks = random_tokens(16, mc.vocab, 3);
  T64 a = model_forward(toks, ps1, mc, RoutingMode::Learned,
                        static_cast<ModelSaved<double>*>(nullptr));
  T64 b = model_forward(toks, ps2, mc, RoutingMode::Learned,
                        static_cast<ModelSaved<double>*>(nullptr));
  EXPECT_EQ(a.data, b.data);
}

TEST(Model, BaselineReductionsRouteUniformly) {
  ModelConfig mc = tiny_cfg();
  mc.layer_pattern = {LayerKind::GdnOnly, LayerKind::SoftmaxOnly};
  ParamStore<double> ps;
  init_params(ps, mc);
  auto toks = random_tokens(16, mc.vocab, 4);
  std::vector<ChunkRouting> routings;
  model_forward(toks, ps, mc, RoutingMode::Learned, static_cast<ModelSaved<double>*>(nullptr),
                &routings);
  for (OpChoice c : routings[0].choice) EXPECT_EQ(c, OpChoice::Linear);
  for (OpChoice c : routings[1].choice) EXPECT_EQ(c, OpChoice::Softmax);

  // A global override wins on hybrid layers.
  mc.layer_pattern.clear();
  routings.clear();
  model_forward(toks, ps, mc, RoutingMode::AllLinear, static_cast<ModelSaved<double>*>(nullptr),
                &routings);
  for (const auto& r : routings)
    for (OpChoice c : r.choice) EXPECT_EQ(c, OpChoice::Linear);
}

TEST(Model, EndToEndGradientsMatchFiniteDifferences) {
  ModelConfig mc = tiny_cfg();
  ParamStore<double> ps;
  init_params(ps, mc);
  auto toks = random_tokens(16, mc.vocab, 5);
  std::vector<int> targets(toks.begin() + 1, toks.end());
  targets.push_back(kIgnoreTarget);
  targets[2] = kIgnoreTarget;

  // Frozen routing so the loss is differentiable along the checked path.
  const RoutingPolicy policy(RoutingMode::AllLinear);
  auto loss = [&] {
    T64 logits = model_forward(toks, ps, mc, policy, static_cast<ModelSaved<double>*>(nullptr));
    return static_cast<double>(cross_entropy(logits, targets, kIgnoreTarget));
  };

  ModelSaved<double> saved;
  T64 logits = model_forward(toks, ps, mc, policy, &saved);
  int scored = 0;
  cross_entropy(logits, targets, kIgnoreTarget, &scored);
  T64 dlogits(logits.shape);
  cross_entropy_grad_acc(logits, targets, kIgnoreTarget, scored, &dlogits);
  model_backward(dlogits, toks, ps, mc, saved);

  // >= 32 sampled coordinates spread over every parameter tensor.
  Rng rng(11);
  int checked = 0;
  for (auto& [name, prm] : ps.entries) {
    const size_t n = prm.value.data.size();
    for (int k = 0; k < 2; ++k) {
      const size_t i = static_cast<size_t>(rng.below(static_cast<int>(n)));
      const double fd = central_diff(loss, &prm.value.data[i], 1e-5);
      const double an = prm.grad.data[i];
      ++checked;
      // Entries this far below the typical gradient scale are pure FD noise.
      if (std::abs(fd) < 1e-7 && std::abs(an) < 1e-7) continue;
      EXPECT_LT(rel_err(an, fd), 1e-3) << name << "[" << i << "]";
    }
  }
  EXPECT_GE(checked, 32);
}

TEST(Schedule, WarmupAndCosineEndpoints) {
  TrainConfig tc;
  tc.peak_lr = 4e-4;
  tc.lr_init_frac = 0.1;
  tc.warmup_steps = 50;
  tc.total_steps = 500;
  EXPECT_DOUBLE_EQ(lr_at(tc, 0), 4e-5);
  EXPECT_DOUBLE_EQ(lr_at(tc, 50), 4e-4);
  EXPECT_NEAR(lr_at(tc, 500), 4e-5, 1e-12);
  for (int s = 51; s < 500; ++s) EXPECT_LE(lr_at(tc, s), lr_at(tc, s - 1) + 1e-15);
}

TEST(Tasks, MqarLayoutAndDeterminism) {
  TaskSpec ts;
  ts.kind = TaskSpec::Kind::MqarRecall;
  ts.n_pairs = 4;
  ts.key_vocab = 8;
  ts.val_vocab = 8;
  ts.seq_len = 32;
  ts.seed = 9;
  const TaskSample a = gen_task(ts, 0);
  const TaskSample b = gen_task(ts, 0);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.targets, b.targets);
  const TaskSample c = gen_task(ts, 1);
  EXPECT_NE(a.tokens, c.tokens);

  EXPECT_EQ(a.tokens[2 * ts.n_pairs], kSepToken);
  std::map<int, int> kv;
  for (int i = 0; i < ts.n_pairs; ++i) {
    const int key = a.tokens[static_cast<size_t>(2 * i)];
    const int val = a.tokens[static_cast<size_t>(2 * i + 1)];
    EXPECT_GE(key, ts.first_key());
    EXPECT_LT(key, ts.first_key() + ts.key_vocab);
    EXPECT_GE(val, ts.first_val());
    EXPECT_LT(val, ts.first_val() + ts.val_vocab);
    EXPECT_EQ(kv.count(key), 0u) << "keys must be distinct";
    kv[key] = val;
  }
  for (int p = 0; p < ts.seq_len; ++p) {
    const int tgt = a.targets[static_cast<size_t>(p)];
    if (p <= 2 * ts.n_pairs) {
      EXPECT_EQ(tgt, kIgnoreTarget);
    } else {
      ASSERT_NE(tgt, kIgnoreTarget) << "query positions are all scored";
      EXPECT_EQ(tgt, kv.at(a.tokens[static_cast<size_t>(p)]));
    }
  }
  // n_pairs = 1 minimal layout: k v SEP k -> target v at the final position.
  TaskSpec one = ts;
  one.n_pairs = 1;
  one.seq_len = 4;
  const TaskSample s1 = gen_task(one, 5);
  EXPECT_EQ(s1.tokens[2], kSepToken);
  EXPECT_EQ(s1.tokens[3], s1.tokens[0]);
  EXPECT_EQ(s1.targets[3], s1.tokens[1]);

  TaskSpec too_small = ts;
  too_small.seq_len = 2 * ts.n_pairs + 1;  // no room for a query
  EXPECT_THROW(gen_task(too_small, 0), dim_error);
}

TEST(Tasks, CopyAndInductionScoring) {
  TaskSpec ts;
  ts.kind = TaskSpec::Kind::Copy;
  ts.val_vocab = 16;
  ts.seq_len = 17;
  const TaskSample s = gen_task(ts, 2);
  const int m = (ts.seq_len - 1) / 2;
  EXPECT_EQ(s.tokens[static_cast<size_t>(m)], kSepToken);
  for (int i = 0; i < m; ++i) EXPECT_EQ(s.tokens[static_cast<size_t>(i)], s.tokens[static_cast<size_t>(m + 1 + i)]);
  for (int p = m; p < 2 * m; ++p) EXPECT_EQ(s.targets[static_cast<size_t>(p)], s.tokens[static_cast<size_t>(p + 1)]);

  ts.kind = TaskSpec::Kind::Induction;
  ts.seq_len = 32;
  const TaskSample si = gen_task(ts, 3);
  EXPECT_NE(si.targets.back(), kIgnoreTarget);
  int scored = 0;
  for (int t : si.targets) scored += t != kIgnoreTarget;
  EXPECT_EQ(scored, 1);
}

TEST(RoutingStats, FractionsAreMeansOfChoices) {
  std::vector<ChunkRouting> rs;
  rs.push_back(ChunkRouting::uniform(2, 4, OpChoice::Linear));    // layer 0
  rs.push_back(ChunkRouting::uniform(2, 4, OpChoice::Softmax));   // layer 1
  rs.push_back(ChunkRouting::uniform(2, 4, OpChoice::Linear));    // layer 0, second sequence
  rs[2].set(0, 0, OpChoice::Softmax);
  rs[2].set(1, 3, OpChoice::Softmax);
  rs.push_back(ChunkRouting::uniform(2, 4, OpChoice::Softmax));   // layer 1
  const auto frac = routing_fractions(rs, 2);
  EXPECT_DOUBLE_EQ(frac[0], 2.0 / 16.0);
  EXPECT_DOUBLE_EQ(frac[1], 1.0);
}

TEST(Eval, UntrainedValueAccuracySitsAtChanceLevel) {
  // Restricting the argmax to the value vocabulary, an untrained model must
  // score 1/val_vocab within 3 binomial sigmas (targets are uniform and
  // independent of the predictions).
  ModelConfig mc = tiny_cfg();
  mc.vocab = 40;
  mc.block.d_model = 16;
  ParamStore<float> ps;
  init_params(ps, mc);
  TaskSpec ts;
  ts.kind = TaskSpec::Kind::MqarRecall;
  ts.n_pairs = 4;
  ts.key_vocab = 16;
  ts.val_vocab = 16;
  ts.seq_len = 64;
  ts.seed = 77;
  long long correct = 0, scored = 0;
  for (int i = 0; i < 40; ++i) {
    const TaskSample s = gen_task(ts, static_cast<uint64_t>(i));
    Tensor<float> logits = model_forward(s.tokens, ps, mc, RoutingMode::Learned,
                                         static_cast<ModelSaved<float>*>(nullptr));
    for (size_t pos = 0; pos < s.targets.size(); ++pos) {
      if (s.targets[pos] == kIgnoreTarget) continue;
      int best = ts.first_val();
      for (int v = ts.first_val(); v < ts.first_val() + ts.val_vocab; ++v)
        if (logits(static_cast<int>(pos), v) > logits(static_cast<int>(pos), best)) best = v;
      correct += best == s.targets[pos];
      ++scored;
    }
  }
  const double p = 1.0 / ts.val_vocab;
  const double acc = static_cast<double>(correct) / static_cast<double>(scored);
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(scored));
  EXPECT_NEAR(acc, p, 3 * sigma + 1e-12);
}

TEST(TrainStep, RejectsAllIgnoredBatch) {
  const ModelConfig mc = tiny_cfg();
  ParamStore<double> ps;
  init_params(ps, mc);
  AdamState<double> opt;
  opt.init(ps);
  TrainConfig tc;
  tc.batch = 1;
  tc.seq_len = 16;
  std::vector<ParamStore<double>> shadows{ps};
  TaskSample s;
  s.tokens = random_tokens(16, mc.vocab, 6);
  s.targets.assign(16, kIgnoreTarget);
  EXPECT_THROW(train_step<double>({s}, ps, opt, mc, tc, RoutingMode::Learned, &shadows), dim_error);
}

TEST(TrainStep, BatchPermutationLeavesLossBitwise) {
  const ModelConfig mc = tiny_cfg();
  TrainConfig tc;
  tc.batch = 4;
  tc.seq_len = 16;
  TaskSpec ts;
  ts.kind = TaskSpec::Kind::MqarRecall;
  ts.n_pairs = 3;
  ts.key_vocab = 8;
  ts.val_vocab = 8;
  ts.seq_len = 16;
  std::vector<TaskSample> batch;
  for (int b = 0; b < 4; ++b) batch.push_back(gen_task(ts, static_cast<uint64_t>(b)));

  auto run = [&](const std::vector<TaskSample>& items) {
    ParamStore<double> ps;
    init_params(ps, mc);
    AdamState<double> opt;
    opt.init(ps);
    std::vector<ParamStore<double>> shadows(4, ps);
    return train_step(items, ps, opt, mc, tc, RoutingMode::Learned, &shadows).loss;
  };
  const double l1 = run(batch);
  std::vector<TaskSample> permuted{batch[2], batch[0], batch[3], batch[1]};
  const double l2 = run(permuted);
  EXPECT_EQ(l1, l2);
}

TEST(TrainStep, RerunIsBitwiseDeterministic) {
  const ModelConfig mc = tiny_cfg();
  TrainConfig tc;
  tc.batch = 2;
  tc.seq_len = 16;
  tc.total_steps = 4;
  TaskSpec ts;
  ts.n_pairs = 3;
  ts.key_vocab = 8;
  ts.val_vocab = 8;
  ts.seq_len = 16;

  auto run = [&] {
    ParamStore<double> ps;
    init_params(ps, mc);
    AdamState<double> opt;
    opt.init(ps);
    std::vector<ParamStore<double>> shadows(2, ps);
    std::vector<double> losses;
    for (int step = 0; step < tc.total_steps; ++step) {
      std::vector<TaskSample> batch;
      for (int b = 0; b < tc.batch; ++b)
        batch.push_back(gen_task(ts, static_cast<uint64_t>(step * tc.batch + b)));
      losses.push_back(train_step(batch, ps, opt, mc, tc, RoutingMode::Learned, &shadows).loss);
    }
    return losses;
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainStep, SmokeRunCutsLossByTenPercent) {
  // 2-layer d=64 model on key-value recall: the loss must drop at least 10%
  // below its initial value within 200 steps.
  ModelConfig mc;
  mc.vocab = 40;
  mc.n_layers = 2;
  mc.block.d_model = 64;
  mc.block.h_softmax = 4;
  mc.block.h_lin = 2;
  mc.block.d_head = 16;
  mc.block.C = 8;
  mc.block.c = 8;
  mc.seed = 13;
  TrainConfig tc;
  tc.batch = 4;
  tc.seq_len = 64;
  tc.total_steps = 200;
  tc.warmup_steps = 20;
  tc.peak_lr = 2e-3;
  TaskSpec ts;
  ts.kind = TaskSpec::Kind::MqarRecall;
  ts.n_pairs = 4;
  ts.key_vocab = 16;
  ts.val_vocab = 16;
  ts.seq_len = 64;
  ts.seed = 21;

  ParamStore<float> ps;
  init_params(ps, mc);
  AdamState<float> opt;
  opt.init(ps);
  std::vector<ParamStore<float>> shadows(static_cast<size_t>(tc.batch), ps);
  double first = 0, last = 0;
  for (int step = 0; step < tc.total_steps; ++step) {
    std::vector<TaskSample> batch;
    for (int b = 0; b < tc.batch; ++b)
      batch.push_back(gen_task(ts, static_cast<uint64_t>(step * tc.batch + b)));
    const StepStats st = train_step(batch, ps, opt, mc, tc, RoutingMode::Learned, &shadows);
    if (step == 0) first = st.loss;
    last = st.loss;
  }
  EXPECT_NEAR(first, std::log(static_cast<double>(mc.vocab)), 1.0)
      << "initial loss should sit near ln(vocab)";
  EXPECT_LT(last, 0.9 * first);
}
