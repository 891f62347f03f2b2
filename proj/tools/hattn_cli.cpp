// Command-line front end: train / eval / generate / bench / route-stats.
// Exit codes: 0 ok, 2 config error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hattn/bench.hpp"
#include "hattn/checkpoint.hpp"
#include "hattn/config.hpp"
#include "hattn/infer.hpp"
#include "hattn/model.hpp"
#include "hattn/train.hpp"

namespace fs = std::filesystem;
using namespace hattn;

namespace {

constexpr uint64_t kEvalIndexBase = 1ull << 40;  // keeps eval sequences off the training stream

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir = "run";
  int64_t seed = -1;
  std::string precision;
  std::string routing;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "config file (key = value lines)");
  cmd->add_option("--set", a.sets, "override, repeatable: key=value")->take_all();
  cmd->add_option("--out", a.out_dir, "output directory");
  cmd->add_option("--seed", a.seed, "override model and task seeds");
  cmd->add_option("--precision", a.precision, "f32 or f64");
  cmd->add_option("--routing", a.routing, "learned | all_softmax | all_linear | fraction:P");
}

RunConfig build_config(const CommonArgs& a) {
  RunConfig rc;
  if (!a.config_path.empty()) parse_config_file(rc, a.config_path);
  for (const std::string& kv : a.sets) apply_set(rc, kv);
  if (a.seed >= 0) {
    rc.seed = static_cast<uint64_t>(a.seed);
    rc.task_seed = static_cast<uint64_t>(a.seed);
  }
  if (!a.precision.empty()) rc.precision = a.precision;
  if (!a.routing.empty()) rc.routing = a.routing;
  if (rc.precision != "f32" && rc.precision != "f64")
    throw config_error("config: run.precision must be f32 or f64");
  return rc;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Creates the leaf directory only; a missing parent is a config error.
void ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directory(dir, ec);
  if (!fs::is_directory(dir))
    throw config_error("output directory " + dir + " is missing and cannot be created");
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw config_error("cannot write " + path);
  out << text;
}

// Per-(layer, group) softmax fractions over a batch of forward passes.
template <typename R>
std::string routing_stats_report(ParamStore<R>& ps, const ModelConfig& mc, const TaskSpec& ts,
                                 const RoutingPolicy& policy, int n_sequences) {
  const int hl = mc.block.h_lin;
  std::vector<long long> softmax(static_cast<size_t>(mc.n_layers * hl), 0);
  std::vector<long long> total(static_cast<size_t>(mc.n_layers * hl), 0);
  for (int i = 0; i < n_sequences; ++i) {
    const TaskSample s = gen_task(ts, kEvalIndexBase + static_cast<uint64_t>(i));
    std::vector<ChunkRouting> routings;
    model_forward(s.tokens, ps, mc, policy, static_cast<ModelSaved<R>*>(nullptr), &routings);
    for (int layer = 0; layer < mc.n_layers; ++layer)
      for (int g = 0; g < hl; ++g)
        for (int t = 0; t < routings[static_cast<size_t>(layer)].n_chunks; ++t) {
          const size_t idx = static_cast<size_t>(layer * hl + g);
          softmax[idx] += routings[static_cast<size_t>(layer)].at(g, t) == OpChoice::Softmax;
          total[idx] += 1;
        }
  }
  std::ostringstream os;
  os << "# layer group softmax_fraction\n";
  long long sm_all = 0, tot_all = 0;
  for (int layer = 0; layer < mc.n_layers; ++layer)
    for (int g = 0; g < hl; ++g) {
      const size_t idx = static_cast<size_t>(layer * hl + g);
      const double f = total[idx] ? static_cast<double>(softmax[idx]) / total[idx] : 0.0;
      os << layer << " " << g << " " << fmt(f) << "\n";
      sm_all += softmax[idx];
      tot_all += total[idx];
    }
  os << "# overall " << fmt(tot_all ? static_cast<double>(sm_all) / tot_all : 0.0) << "\n";
  return os.str();
}

template <typename R>
int cmd_train(const RunConfig& rc, const std::string& out_dir) {
  ensure_out_dir(out_dir);
  const ModelConfig mc = to_model_config(rc);
  const TrainConfig tc = to_train_config(rc);
  const TaskSpec ts = to_task_spec(rc);
  const RoutingPolicy policy = to_routing_policy(rc);
  if (ts.seq_len != tc.seq_len)
    throw config_error("config: task.seq_len and train.seq_len must agree");

  ParamStore<R> ps;
  init_params(ps, mc);
  AdamState<R> opt;
  opt.init(ps);
  std::vector<ParamStore<R>> shadows(static_cast<size_t>(tc.batch), ps);

  write_file(out_dir + "/config.echo", echo_config(rc));
  std::ofstream metrics(out_dir + "/metrics.txt");
  metrics << "# step loss lr grad_norm softmax_fraction_per_layer\n";

  for (int step = 0; step < tc.total_steps; ++step) {
    std::vector<TaskSample> batch;
    for (int b = 0; b < tc.batch; ++b)
      batch.push_back(gen_task(ts, static_cast<uint64_t>(step) * tc.batch + b));
    const StepStats st = train_step(batch, ps, opt, mc, tc, policy, &shadows);
    metrics << step << " " << fmt(st.loss) << " " << fmt(st.lr) << " " << fmt(st.grad_norm);
    for (double f : st.softmax_fraction) metrics << " " << fmt(f);
    metrics << "\n";
    if (rc.log_every > 0 && step % rc.log_every == 0)
      std::cout << "step " << step << " loss " << st.loss << " lr " << st.lr << " gnorm "
                << st.grad_norm << "\n";
  }
  metrics.close();

  save_checkpoint(out_dir + "/checkpoint.bin", ps, rc);
  write_file(out_dir + "/routing_stats.txt",
             routing_stats_report<R>(ps, mc, ts, policy, rc.eval_sequences));
  std::cout << "wrote " << out_dir << "/checkpoint.bin, metrics.txt, routing_stats.txt\n";
  return 0;
}

template <typename R>
int cmd_eval(const RunConfig& rc_overrides, const std::string& ckpt,
             const std::vector<std::string>& sets, const std::string& out_dir) {
  ensure_out_dir(out_dir);
  RunConfig rc = read_checkpoint_config(ckpt);
  for (const std::string& kv : sets) apply_set(rc, kv);
  rc.routing = rc_overrides.routing;  // --routing wins over the stored one
  const ModelConfig mc = to_model_config(rc);
  const TaskSpec ts = to_task_spec(rc);
  const RoutingPolicy policy = to_routing_policy(rc);

  ParamStore<R> ps;
  init_params(ps, mc);
  load_checkpoint(ckpt, ps);

  double loss_sum = 0;
  long long scored_total = 0, correct = 0, correct_in_vals = 0;
  std::ostringstream trace;
  trace << "# seq layer group chunk choice score_softmax score_linear\n";
  for (int i = 0; i < rc.eval_sequences; ++i) {
    const TaskSample s = gen_task(ts, kEvalIndexBase + static_cast<uint64_t>(i));
    std::vector<ChunkRouting> routings;
    Tensor<R> logits =
        model_forward(s.tokens, ps, mc, policy, static_cast<ModelSaved<R>*>(nullptr), &routings);
    int scored = 0;
    loss_sum += static_cast<double>(cross_entropy(logits, s.targets, kIgnoreTarget, &scored)) *
                scored;
    scored_total += scored;
    for (size_t pos = 0; pos < s.targets.size(); ++pos) {
      if (s.targets[pos] == kIgnoreTarget) continue;
      const R* row = logits.row(static_cast<int>(pos));
      int best = 0;
      int best_val = ts.first_val();
      for (int v = 1; v < mc.vocab; ++v)
        if (row[v] > row[best]) best = v;
      for (int v = ts.first_val(); v < ts.first_val() + ts.val_vocab; ++v)
        if (row[v] > row[best_val]) best_val = v;
      correct += best == s.targets[pos];
      correct_in_vals += best_val == s.targets[pos];
    }
    for (int layer = 0; layer < mc.n_layers; ++layer) {
      const ChunkRouting& r = routings[static_cast<size_t>(layer)];
      for (int g = 0; g < r.n_groups; ++g)
        for (int t = 0; t < r.n_chunks; ++t)
          trace << i << " " << layer << " " << g << " " << t << " "
                << (r.at(g, t) == OpChoice::Softmax ? 0 : 1) << " " << fmt(r.score(g, t, 0)) << " "
                << fmt(r.score(g, t, 1)) << "\n";
    }
  }
  const double loss = loss_sum / static_cast<double>(scored_total);
  const double acc = static_cast<double>(correct) / static_cast<double>(scored_total);
  const double acc_vals = static_cast<double>(correct_in_vals) / static_cast<double>(scored_total);
  write_file(out_dir + "/routing_trace.txt", trace.str());
  std::ostringstream report;
  report << "sequences " << rc.eval_sequences << "\nscored_positions " << scored_total
         << "\nmean_loss " << fmt(loss) << "\naccuracy " << fmt(acc) << "\nvalue_accuracy "
         << fmt(acc_vals) << "\n";
  write_file(out_dir + "/eval.txt", report.str());
  std::cout << report.str();
  return 0;
}

template <typename R>
int cmd_generate(const std::string& ckpt, const std::string& prompt_csv, int steps,
                 double temperature, uint64_t sample_seed, const std::string& out_dir) {
  ensure_out_dir(out_dir);
  RunConfig rc = read_checkpoint_config(ckpt);
  const ModelConfig mc = to_model_config(rc);
  const RoutingPolicy policy = to_routing_policy(rc);
  ParamStore<R> ps;
  init_params(ps, mc);
  load_checkpoint(ckpt, ps);

  std::vector<int> prompt;
  std::stringstream ss(prompt_csv);
  std::string item;
  while (std::getline(ss, item, ',')) prompt.push_back(std::stoi(item));
  if (prompt.empty()) throw config_error("generate: empty prompt");

  Tensor<R> logits;
  DecodeState<R> st = prefill(prompt, ps, mc, policy, &logits);
  Rng rng(sample_seed);
  std::vector<int> out_tokens;
  for (int i = 0; i < steps; ++i) {
    const int tok = sample_token(logits, temperature, rng);
    out_tokens.push_back(tok);
    logits = decode_step(tok, st, ps);
  }
  std::ostringstream os;
  for (size_t i = 0; i < out_tokens.size(); ++i) os << (i ? "," : "") << out_tokens[i];
  os << "\n";
  write_file(out_dir + "/generate.txt", os.str());
  std::cout << os.str();
  return 0;
}

template <typename R>
int cmd_bench(const RunConfig& rc, const std::string& lengths_csv, const std::string& modes_csv,
              int decode_steps, bool no_timing, const std::string& out_dir) {
  ensure_out_dir(out_dir);
  ModelConfig mc = to_model_config(rc);
  ParamStore<R> ps;
  init_params(ps, mc);

  std::vector<int> lengths;
  {
    std::stringstream ss(lengths_csv);
    std::string item;
    while (std::getline(ss, item, ',')) lengths.push_back(std::stoi(item));
  }
  for (int L : lengths)
    if (L <= 0 || L % mc.block.C != 0)
      throw config_error("bench: lengths must be positive multiples of model.chunk");

  std::vector<std::pair<std::string, double>> modes;  // name, fraction (-1 learned)
  {
    std::stringstream ss(modes_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item == "learned")
        modes.emplace_back("learned", -1.0);
      else if (item == "all_softmax")
        modes.emplace_back("fraction:1", 1.0);
      else if (item == "all_linear")
        modes.emplace_back("fraction:0", 0.0);
      else
        modes.emplace_back("fraction:" + item, std::stod(item));
    }
  }

  std::vector<BenchRow> rows;
  for (int L : lengths)
    for (const auto& [name, p] : modes) {
      const RoutingPolicy policy =
          p >= 0 ? RoutingPolicy::with_fraction(p) : RoutingPolicy(RoutingMode::Learned);
      rows.push_back(bench_point(ps, mc, L, policy, name, p, decode_steps, !no_timing,
                                 0xbeefull + static_cast<uint64_t>(L)));
    }
  const BenchFit fit = fit_cost_model(rows, mc.block.C);

  std::ostringstream os;
  os << "# L mode counted_attn_macs predicted sm_cross sm_diag lin_update lin_other proj mlp "
        "prefill_ms decode_us kv_values state_values\n";
  for (const BenchRow& r : rows) {
    os << r.L << " " << r.mode << " " << r.counted << " " << fmt(r.predicted) << " "
       << r.flops.attn_softmax_cross << " " << r.flops.attn_softmax_diag << " "
       << r.flops.attn_linear_update << " " << r.flops.attn_linear_other << " "
       << r.flops.projections << " " << r.flops.mlp << " " << fmt(r.prefill_ms) << " "
       << fmt(r.decode_us) << " " << r.kv_values << " " << r.total_values << "\n";
  }
  os << "# fit a " << fmt(fit.a) << " b " << fmt(fit.b) << "\n";
  write_file(out_dir + "/bench.txt", os.str());
  std::cout << os.str();
  return 0;
}

template <typename R>
int cmd_route_stats(const std::string& ckpt, const std::vector<std::string>& sets,
                    const std::string& routing, const std::string& out_dir) {
  ensure_out_dir(out_dir);
  RunConfig rc = read_checkpoint_config(ckpt);
  for (const std::string& kv : sets) apply_set(rc, kv);
  if (!routing.empty()) rc.routing = routing;
  const ModelConfig mc = to_model_config(rc);
  const TaskSpec ts = to_task_spec(rc);
  ParamStore<R> ps;
  init_params(ps, mc);
  load_checkpoint(ckpt, ps);
  const std::string report =
      routing_stats_report<R>(ps, mc, ts, to_routing_policy(rc), rc.eval_sequences);
  write_file(out_dir + "/routing_stats.txt", report);
  std::cout << report;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"token-level hybrid attention: training, evaluation and benchmarks"};
  app.require_subcommand(1);

  CommonArgs train_args, eval_args, gen_args, bench_args, stats_args;
  std::string eval_ckpt, gen_ckpt, stats_ckpt;
  std::string gen_prompt = "1";
  int gen_steps = 16;
  double gen_temp = 0.0;
  int64_t gen_sample_seed = 0;
  std::string bench_lengths = "256,512,1024,2048";
  std::string bench_modes = "0,0.25,0.5,1,learned";
  int bench_decode_steps = 32;
  bool bench_no_timing = false;

  CLI::App* train = app.add_subcommand("train", "train a model and write checkpoint + metrics");
  add_common(train, train_args);
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint, write routing trace");
  add_common(eval, eval_args);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  CLI::App* gen = app.add_subcommand("generate", "decode from a prompt");
  add_common(gen, gen_args);
  gen->add_option("--checkpoint", gen_ckpt, "checkpoint file")->required();
  gen->add_option("--prompt", gen_prompt, "comma-separated token ids");
  gen->add_option("--steps", gen_steps, "tokens to generate");
  gen->add_option("--temperature", gen_temp, "0 = greedy");
  gen->add_option("--sample-seed", gen_sample_seed, "sampling rng seed");
  CLI::App* bench = app.add_subcommand("bench", "FLOP accounting and latency microbenchmarks");
  add_common(bench, bench_args);
  bench->add_option("--lengths", bench_lengths, "comma-separated sequence lengths");
  bench->add_option("--modes", bench_modes, "softmax fractions and/or learned");
  bench->add_option("--decode-steps", bench_decode_steps, "decode samples per point");
  bench->add_flag("--no-timing", bench_no_timing, "FLOP counts only");
  CLI::App* stats = app.add_subcommand("route-stats", "routing distribution of a checkpoint");
  add_common(stats, stats_args);
  stats->add_option("--checkpoint", stats_ckpt, "checkpoint file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    auto dispatch = [&](const CommonArgs& a, auto&& fn32, auto&& fn64) -> int {
      const RunConfig rc = build_config(a);
      return rc.precision == "f64" ? fn64(rc) : fn32(rc);
    };
    if (app.got_subcommand(train))
      return dispatch(
          train_args, [&](const RunConfig& rc) { return cmd_train<float>(rc, train_args.out_dir); },
          [&](const RunConfig& rc) { return cmd_train<double>(rc, train_args.out_dir); });
    if (app.got_subcommand(eval))
      return dispatch(
          eval_args,
          [&](const RunConfig& rc) {
            return cmd_eval<float>(rc, eval_ckpt, eval_args.sets, eval_args.out_dir);
          },
          [&](const RunConfig& rc) {
            return cmd_eval<double>(rc, eval_ckpt, eval_args.sets, eval_args.out_dir);
          });
    if (app.got_subcommand(gen))
      return dispatch(
          gen_args,
          [&](const RunConfig&) {
            return cmd_generate<float>(gen_ckpt, gen_prompt, gen_steps, gen_temp,
                                       static_cast<uint64_t>(gen_sample_seed), gen_args.out_dir);
          },
          [&](const RunConfig&) {
            return cmd_generate<double>(gen_ckpt, gen_prompt, gen_steps, gen_temp,
                                        static_cast<uint64_t>(gen_sample_seed), gen_args.out_dir);
          });
    if (app.got_subcommand(bench))
      return dispatch(
          bench_args,
          [&](const RunConfig& rc) {
            return cmd_bench<float>(rc, bench_lengths, bench_modes, bench_decode_steps,
                                    bench_no_timing, bench_args.out_dir);
          },
          [&](const RunConfig& rc) {
            return cmd_bench<double>(rc, bench_lengths, bench_modes, bench_decode_steps,
                                     bench_no_timing, bench_args.out_dir);
          });
    if (app.got_subcommand(stats))
      return dispatch(
          stats_args,
          [&](const RunConfig&) {
            return cmd_route_stats<float>(stats_ckpt, stats_args.sets, stats_args.routing,
                                          stats_args.out_dir);
          },
          [&](const RunConfig&) {
            return cmd_route_stats<double>(stats_ckpt, stats_args.sets, stats_args.routing,
                                           stats_args.out_dir);
          });
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const dim_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
