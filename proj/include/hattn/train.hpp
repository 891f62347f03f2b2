#pragma once

// Training loop pieces: synthetic task generators, AdamW with decoupled
// weight decay, cosine-with-warmup schedule, gradient clipping, and one
// train step over a batch of sequences. Batch items accumulate gradients
// into per-item shadow stores merged in index order, so results do not
// depend on how items are scheduled.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "hattn/model.hpp"
#include "hattn/tensor.hpp"
#include "hattn/threading.hpp"

namespace hattn {

// ---------------------------------------------------------------------------
// synthetic tasks
// ---------------------------------------------------------------------------

constexpr int kIgnoreTarget = -1;
constexpr int kPadToken = 0;
constexpr int kSepToken = 1;

struct TaskSpec {
  enum class Kind { MqarRecall, Copy, Induction };
  Kind kind = Kind::MqarRecall;
  int n_pairs = 16;
  int key_vocab = 64;
  int val_vocab = 64;
  int seq_len = 256;
  uint64_t seed = 0;

  int first_key() const { return 2; }
  int first_val() const { return 2 + key_vocab; }
  int min_vocab() const { return 2 + key_vocab + val_vocab; }
};

struct TaskSample {
  std::vector<int> tokens;
  std::vector<int> targets;  // kIgnoreTarget where unscored
};

// Key-value pairs, a separator, then queries; the target at a query position
// is that key's value. Keys are distinct within a sequence.
inline TaskSample gen_mqar(const TaskSpec& spec, Rng& rng) {
  const int n = spec.n_pairs;
  require(spec.key_vocab >= n, "gen_task: key vocabulary smaller than n_pairs");
  const int n_queries = spec.seq_len - (2 * n + 1);
  require(n_queries >= 1, "gen_task: seq_len too small for n_pairs key-value pairs");

  std::vector<int> keys(static_cast<size_t>(spec.key_vocab));
  for (int i = 0; i < spec.key_vocab; ++i) keys[static_cast<size_t>(i)] = spec.first_key() + i;
  for (int i = 0; i < n; ++i) {  // partial Fisher-Yates: first n entries distinct
    const int j = i + rng.below(spec.key_vocab - i);
    std::swap(keys[static_cast<size_t>(i)], keys[static_cast<size_t>(j)]);
  }
  std::vector<int> vals(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) vals[static_cast<size_t>(i)] = spec.first_val() + rng.below(spec.val_vocab);

  TaskSample s;
  s.tokens.assign(static_cast<size_t>(spec.seq_len), kPadToken);
  s.targets.assign(static_cast<size_t>(spec.seq_len), kIgnoreTarget);
  int p = 0;
  for (int i = 0; i < n; ++i) {
    s.tokens[static_cast<size_t>(p++)] = keys[static_cast<size_t>(i)];
    s.tokens[static_cast<size_t>(p++)] = vals[static_cast<size_t>(i)];
  }
  s.tokens[static_cast<size_t>(p++)] = kSepToken;
  for (int q = 0; q < n_queries; ++q) {
    const int i = rng.below(n);
    s.tokens[static_cast<size_t>(p)] = keys[static_cast<size_t>(i)];
    s.targets[static_cast<size_t>(p)] = vals[static_cast<size_t>(i)];
    ++p;
  }
  return s;
}

// t1..tm SEP t1..tm; scored on the second half (next-token form).
inline TaskSample gen_copy(const TaskSpec& spec, Rng& rng) {
  const int m = (spec.seq_len - 1) / 2;
  require(m >= 1, "gen_task: seq_len too small for copy");
  TaskSample s;
  s.tokens.assign(static_cast<size_t>(spec.seq_len), kPadToken);
  s.targets.assign(static_cast<size_t>(spec.seq_len), kIgnoreTarget);
  for (int i = 0; i < m; ++i)
    s.tokens[static_cast<size_t>(i)] = spec.first_val() + rng.below(spec.val_vocab);
  s.tokens[static_cast<size_t>(m)] = kSepToken;
  for (int i = 0; i < m; ++i) s.tokens[static_cast<size_t>(m + 1 + i)] = s.tokens[static_cast<size_t>(i)];
  for (int p = m; p < 2 * m; ++p) s.targets[static_cast<size_t>(p)] = s.tokens[static_cast<size_t>(p + 1)];
  return s;
}

// Random filler with one A,B bigram planted early and A repeated at the end;
// the final position must recall B.
inline TaskSample gen_induction(const TaskSpec& spec, Rng& rng) {
  require(spec.seq_len >= 8, "gen_task: seq_len too small for induction");
  TaskSample s;
  s.tokens.assign(static_cast<size_t>(spec.seq_len), 0);
  s.targets.assign(static_cast<size_t>(spec.seq_len), kIgnoreTarget);
  for (int i = 0; i < spec.seq_len; ++i)
    s.tokens[static_cast<size_t>(i)] = spec.first_val() + rng.below(spec.val_vocab);
  const int A = spec.first_key() + rng.below(spec.key_vocab);
  const int B = spec.first_val() + rng.below(spec.val_vocab);
  const int pos = rng.below(spec.seq_len / 2 - 2);
  s.tokens[static_cast<size_t>(pos)] = A;
  s.tokens[static_cast<size_t>(pos + 1)] = B;
  s.tokens[static_cast<size_t>(spec.seq_len - 1)] = A;
  s.targets[static_cast<size_t>(spec.seq_len - 1)] = B;
  return s;
}

// Deterministic per (spec.seed, index).
inline TaskSample gen_task(const TaskSpec& spec, uint64_t index) {
  Rng rng(spec.seed * 0x9e3779b97f4a7c15ull + index * 2 + 1);
  switch (spec.kind) {
    case TaskSpec::Kind::MqarRecall: return gen_mqar(spec, rng);
    case TaskSpec::Kind::Copy: return gen_copy(spec, rng);
    case TaskSpec::Kind::Induction: return gen_induction(spec, rng);
  }
  throw dim_error("gen_task: unknown task kind");
}

// ---------------------------------------------------------------------------
// optimizer and schedule
// ---------------------------------------------------------------------------

struct TrainConfig {
  double peak_lr = 3e-4;
  double lr_init_frac = 0.1;  // warmup start and cosine floor, as fraction of peak
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  int warmup_steps = 100;
  int total_steps = 1000;
  int batch = 8;
  int seq_len = 256;
};

inline double lr_at(const TrainConfig& tc, int step) {
  const double lr0 = tc.peak_lr * tc.lr_init_frac;
  if (step < tc.warmup_steps)
    return lr0 + (tc.peak_lr - lr0) * static_cast<double>(step) / tc.warmup_steps;
  const int span = std::max(1, tc.total_steps - tc.warmup_steps);
  const double t = std::min(1.0, static_cast<double>(step - tc.warmup_steps) / span);
  return lr0 + 0.5 * (tc.peak_lr - lr0) * (1.0 + std::cos(3.14159265358979323846 * t));
}

template <typename R>
struct AdamState {
  std::map<std::string, Tensor<R>> m, v;
  int step = 0;

  void init(const ParamStore<R>& ps) {
    for (const auto& [name, p] : ps.entries) {
      m.emplace(name, Tensor<R>::zeros(p.value.shape));
      v.emplace(name, Tensor<R>::zeros(p.value.shape));
    }
    step = 0;
  }
};

// Global-norm clip; returns the pre-clip norm.
template <typename R>
inline double clip_grad_norm(ParamStore<R>& ps, double max_norm) {
  double ss = 0;
  for (const auto& [name, p] : ps.entries)
    for (R g : p.grad.data) ss += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(ss);
  if (max_norm > 0 && norm > max_norm) {
    const R scale = static_cast<R>(max_norm / norm);
    for (auto& [name, p] : ps.entries)
      for (R& g : p.grad.data) g *= scale;
  }
  return norm;
}

// Decoupled weight decay on matrices only (norm gains and biases excluded).
template <typename R>
inline void adamw_step(ParamStore<R>& ps, AdamState<R>& st, const TrainConfig& tc, double lr) {
  st.step += 1;
  const double bc1 = 1.0 - std::pow(tc.beta1, st.step);
  const double bc2 = 1.0 - std::pow(tc.beta2, st.step);
  for (auto& [name, p] : ps.entries) {
    Tensor<R>& m = st.m.at(name);
    Tensor<R>& v = st.v.at(name);
    const bool decay = p.value.rank() >= 2;
    for (size_t i = 0; i < p.value.data.size(); ++i) {
      const double g = static_cast<double>(p.grad.data[i]);
      const double mi = tc.beta1 * static_cast<double>(m.data[i]) + (1.0 - tc.beta1) * g;
      const double vi = tc.beta2 * static_cast<double>(v.data[i]) + (1.0 - tc.beta2) * g * g;
      m.data[i] = static_cast<R>(mi);
      v.data[i] = static_cast<R>(vi);
      double upd = lr * (mi / bc1) / (std::sqrt(vi / bc2) + tc.adam_eps);
      if (decay) upd += lr * tc.weight_decay * static_cast<double>(p.value.data[i]);
      p.value.data[i] -= static_cast<R>(upd);
    }
  }
}

// ---------------------------------------------------------------------------
// train step
// ---------------------------------------------------------------------------

struct StepStats {
  double loss = 0;
  double grad_norm = 0;
  double lr = 0;
  std::vector<double> softmax_fraction;  // per layer
};

// Fraction of softmax-routed chunks per layer (averaged over groups/chunks);
// layout of `routings`: layer-major per sequence.
inline std::vector<double> routing_fractions(const std::vector<ChunkRouting>& routings,
                                             int n_layers) {
  std::vector<double> frac(static_cast<size_t>(n_layers), 0.0);
  std::vector<int> counts(static_cast<size_t>(n_layers), 0);
  for (size_t i = 0; i < routings.size(); ++i) {
    const int layer = static_cast<int>(i % static_cast<size_t>(n_layers));
    int softmax = 0;
    for (OpChoice c : routings[i].choice) softmax += c == OpChoice::Softmax ? 1 : 0;
    frac[static_cast<size_t>(layer)] += static_cast<double>(softmax);
    counts[static_cast<size_t>(layer)] += static_cast<int>(routings[i].choice.size());
  }
  for (int l = 0; l < n_layers; ++l)
    if (counts[static_cast<size_t>(l)] > 0) frac[static_cast<size_t>(l)] /= counts[static_cast<size_t>(l)];
  return frac;
}

// One optimizer step over a batch. Throws numeric_error with a diagnostics
// dump if the loss or gradients go non-finite.
template <typename R>
inline StepStats train_step(const std::vector<TaskSample>& batch, ParamStore<R>& ps,
                            AdamState<R>& opt, const ModelConfig& cfg, const TrainConfig& tc,
                            const RoutingPolicy& policy, std::vector<ParamStore<R>>* shadows) {
  const int B = static_cast<int>(batch.size());
  require(B >= 1, "train_step: empty batch");
  require(shadows && static_cast<int>(shadows->size()) == B, "train_step: shadow store mismatch");

  // First pass: scored-position counts (the mean divides by the batch total).
  int total_scored = 0;
  for (const TaskSample& s : batch)
    for (int t : s.targets) total_scored += t != kIgnoreTarget ? 1 : 0;
  if (total_scored == 0) throw dim_error("train_step: batch has no scored positions");

  std::vector<double> item_loss_sum(static_cast<size_t>(B), 0.0);
  std::vector<std::vector<ChunkRouting>> item_routings(static_cast<size_t>(B));

  parallel_for(B, [&](int b) {
    ParamStore<R>& sps = (*shadows)[static_cast<size_t>(b)];
    // Sync shadow values with the live parameters; gradients start at zero.
    for (auto& [name, p] : sps.entries) {
      p.value.data = ps.at(name).value.data;
      p.grad.zero();
    }
    ModelSaved<R> saved;
    const TaskSample& s = batch[static_cast<size_t>(b)];
    Tensor<R> logits = model_forward(s.tokens, sps, cfg, policy, &saved,
                                     &item_routings[static_cast<size_t>(b)]);
    int scored = 0;
    const R mean = cross_entropy(logits, s.targets, kIgnoreTarget, &scored);
    item_loss_sum[static_cast<size_t>(b)] = static_cast<double>(mean) * scored;
    Tensor<R> dlogits(logits.shape);
    cross_entropy_grad_acc(logits, s.targets, kIgnoreTarget, total_scored, &dlogits);
    model_backward(dlogits, s.tokens, sps, cfg, saved);
  });

  // Merge gradients in item order (thread-count independent), then reduce the
  // loss over sorted partials so batch order cannot perturb the sum.
  for (int b = 0; b < B; ++b)
    for (auto& [name, p] : ps.entries) {
      const Tensor<R>& g = (*shadows)[static_cast<size_t>(b)].at(name).grad;
      for (size_t i = 0; i < p.grad.data.size(); ++i) p.grad.data[i] += g.data[i];
    }
  std::vector<double> sorted_losses = item_loss_sum;
  std::sort(sorted_losses.begin(), sorted_losses.end());
  double loss_sum = 0;
  for (double v : sorted_losses) loss_sum += v;

  StepStats stats;
  stats.loss = loss_sum / total_scored;
  std::vector<ChunkRouting> flat;
  for (auto& rs : item_routings)
    for (auto& r : rs) flat.push_back(r);
  stats.softmax_fraction = routing_fractions(flat, cfg.n_layers);

  if (!std::isfinite(stats.loss)) {
    std::ostringstream os;
    os << "train_step: non-finite loss at optimizer step " << opt.step << "\n";
    os << "  routing softmax fractions per layer:";
    for (double f : stats.softmax_fraction) os << " " << f;
    os << "\n  per-layer grad norms:\n";
    for (int i = 0; i < cfg.n_layers; ++i) {
      double ss = 0;
      const std::string lp = layer_prefix<R>(i);
      for (const auto& [name, p] : ps.entries)
        if (name.rfind(lp, 0) == 0)
          for (R g : p.grad.data) ss += static_cast<double>(g) * g;
      os << "    layer " << i << ": " << std::sqrt(ss) << "\n";
    }
    throw numeric_error(os.str());
  }

  stats.grad_norm = clip_grad_norm(ps, tc.clip_norm);
  if (!std::isfinite(stats.grad_norm))
    throw numeric_error("train_step: non-finite gradient norm at step " + std::to_string(opt.step));
  stats.lr = lr_at(tc, opt.step);
  adamw_step(ps, opt, tc, stats.lr);
  ps.zero_grads();
  return stats;
}

}  // namespace hattn
