#pragma once

// Run configuration: flat `key = value` pairs with dotted namespaces, read
// from a config file and/or repeated --set overrides. Unknown keys are
// rejected; the effective config echoes back in a canonical form that parses
// to an identical RunConfig.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hattn/model.hpp"
#include "hattn/train.hpp"

namespace hattn {

class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  // model
  int vocab = 160;
  int n_layers = 2;
  std::string layer_pattern = "hybrid";  // comma list, or one kind for all layers
  int d_model = 128;
  int h_softmax = 4;
  int h_lin = 2;
  int d_head = 32;
  int chunk = 16;
  int subchunk = 0;  // 0 -> same as chunk
  bool rope = false;
  double theta_base = 10000.0;
  double eps_rms = 1e-6;
  double eps_l2 = 1e-6;
  int mlp_mult = 4;
  uint64_t seed = 1;
  // ablations
  bool sattn_out = false;
  bool gdn_out = false;
  bool no_lattn_decay = false;
  bool no_attn_norm = false;
  bool no_attn_weights = false;
  bool weights_from_x = false;
  // training
  double peak_lr = 3e-4;
  double lr_init_frac = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int warmup_steps = 100;
  int total_steps = 1000;
  int batch = 8;
  int seq_len = 256;
  int log_every = 1;
  // task
  std::string task_kind = "mqar_recall";
  int n_pairs = 16;
  int key_vocab = 64;
  int val_vocab = 64;
  int task_seq_len = 256;
  uint64_t task_seed = 7;
  // eval
  int eval_sequences = 16;
  // run
  std::string precision = "f32";
  std::string routing = "learned";
};

namespace detail {

enum class FieldType { Int, U64, Double, Bool, Str };

struct FieldDef {
  const char* key;
  FieldType type;
  size_t offset;
};

#define HATTN_FIELD(key, type, member) \
  { key, FieldType::type, offsetof(RunConfig, member) }

inline const std::vector<FieldDef>& schema() {
  static const std::vector<FieldDef> defs = {
      HATTN_FIELD("model.vocab", Int, vocab),
      HATTN_FIELD("model.n_layers", Int, n_layers),
      HATTN_FIELD("model.layer_pattern", Str, layer_pattern),
      HATTN_FIELD("model.d_model", Int, d_model),
      HATTN_FIELD("model.h_softmax", Int, h_softmax),
      HATTN_FIELD("model.h_lin", Int, h_lin),
      HATTN_FIELD("model.d_head", Int, d_head),
      HATTN_FIELD("model.chunk", Int, chunk),
      HATTN_FIELD("model.subchunk", Int, subchunk),
      HATTN_FIELD("model.rope", Bool, rope),
      HATTN_FIELD("model.theta_base", Double, theta_base),
      HATTN_FIELD("model.eps_rms", Double, eps_rms),
      HATTN_FIELD("model.eps_l2", Double, eps_l2),
      HATTN_FIELD("model.mlp_mult", Int, mlp_mult),
      HATTN_FIELD("model.seed", U64, seed),
      HATTN_FIELD("ablate.sattn_out", Bool, sattn_out),
      HATTN_FIELD("ablate.gdn_out", Bool, gdn_out),
      HATTN_FIELD("ablate.no_lattn_decay", Bool, no_lattn_decay),
      HATTN_FIELD("ablate.no_attn_norm", Bool, no_attn_norm),
      HATTN_FIELD("ablate.no_attn_weights", Bool, no_attn_weights),
      HATTN_FIELD("ablate.weights_from_x", Bool, weights_from_x),
      HATTN_FIELD("train.peak_lr", Double, peak_lr),
      HATTN_FIELD("train.lr_init_frac", Double, lr_init_frac),
      HATTN_FIELD("train.beta1", Double, beta1),
      HATTN_FIELD("train.beta2", Double, beta2),
      HATTN_FIELD("train.weight_decay", Double, weight_decay),
      HATTN_FIELD("train.clip_norm", Double, clip_norm),
      HATTN_FIELD("train.warmup_steps", Int, warmup_steps),
      HATTN_FIELD("train.total_steps", Int, total_steps),
      HATTN_FIELD("train.batch", Int, batch),
      HATTN_FIELD("train.seq_len", Int, seq_len),
      HATTN_FIELD("train.log_every", Int, log_every),
      HATTN_FIELD("task.kind", Str, task_kind),
      HATTN_FIELD("task.n_pairs", Int, n_pairs),
      HATTN_FIELD("task.key_vocab", Int, key_vocab),
      HATTN_FIELD("task.val_vocab", Int, val_vocab),
      HATTN_FIELD("task.seq_len", Int, task_seq_len),
      HATTN_FIELD("task.seed", U64, task_seed),
      HATTN_FIELD("eval.n_sequences", Int, eval_sequences),
      HATTN_FIELD("run.precision", Str, precision),
      HATTN_FIELD("run.routing", Str, routing),
  };
  return defs;
}

#undef HATTN_FIELD

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline void set_field(RunConfig& rc, const FieldDef& def, const std::string& value) {
  char* base = reinterpret_cast<char*>(&rc);
  try {
    switch (def.type) {
      case FieldType::Int: *reinterpret_cast<int*>(base + def.offset) = std::stoi(value); break;
      case FieldType::U64:
        *reinterpret_cast<uint64_t*>(base + def.offset) = std::stoull(value);
        break;
      case FieldType::Double:
        *reinterpret_cast<double*>(base + def.offset) = std::stod(value);
        break;
      case FieldType::Bool: {
        if (value == "true" || value == "1")
          *reinterpret_cast<bool*>(base + def.offset) = true;
        else if (value == "false" || value == "0")
          *reinterpret_cast<bool*>(base + def.offset) = false;
        else
          throw config_error(std::string("config: boolean key ") + def.key + " got '" + value + "'");
        break;
      }
      case FieldType::Str: *reinterpret_cast<std::string*>(base + def.offset) = value; break;
    }
  } catch (const config_error&) {
    throw;
  } catch (const std::exception&) {
    throw config_error(std::string("config: cannot parse value '") + value + "' for key " + def.key);
  }
}

inline std::string get_field(const RunConfig& rc, const FieldDef& def) {
  const char* base = reinterpret_cast<const char*>(&rc);
  char buf[64];
  switch (def.type) {
    case FieldType::Int: return std::to_string(*reinterpret_cast<const int*>(base + def.offset));
    case FieldType::U64:
      return std::to_string(*reinterpret_cast<const uint64_t*>(base + def.offset));
    case FieldType::Double:
      std::snprintf(buf, sizeof(buf), "%.17g", *reinterpret_cast<const double*>(base + def.offset));
      return buf;
    case FieldType::Bool:
      return *reinterpret_cast<const bool*>(base + def.offset) ? "true" : "false";
    case FieldType::Str: return *reinterpret_cast<const std::string*>(base + def.offset);
  }
  return "";
}

}  // namespace detail

inline void apply_config_line(RunConfig& rc, const std::string& key, const std::string& value) {
  for (const auto& def : detail::schema())
    if (key == def.key) {
      detail::set_field(rc, def, value);
      return;
    }
  throw config_error("config: unknown key '" + key + "'");
}

// Parses `key = value` lines; '#' starts a comment.
inline void parse_config_text(RunConfig& rc, std::istream& in) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("config: line " + std::to_string(lineno) + " is not 'key = value'");
    apply_config_line(rc, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline void parse_config_file(RunConfig& rc, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("config: cannot open " + path);
  parse_config_text(rc, in);
}

// `--set key=value`
inline void apply_set(RunConfig& rc, const std::string& kv) {
  const size_t eq = kv.find('=');
  if (eq == std::string::npos) throw config_error("config: --set expects key=value, got " + kv);
  apply_config_line(rc, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

inline std::string echo_config(const RunConfig& rc) {
  std::ostringstream os;
  for (const auto& def : detail::schema()) os << def.key << " = " << detail::get_field(rc, def) << "\n";
  return os.str();
}

inline std::vector<LayerKind> parse_layer_pattern(const std::string& pattern, int n_layers) {
  std::vector<LayerKind> kinds;
  std::stringstream ss(pattern);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item == "hybrid")
      kinds.push_back(LayerKind::Hybrid);
    else if (item == "gdn")
      kinds.push_back(LayerKind::GdnOnly);
    else if (item == "softmax")
      kinds.push_back(LayerKind::SoftmaxOnly);
    else
      throw config_error("config: unknown layer kind '" + item + "'");
  }
  if (kinds.size() == 1) kinds.assign(static_cast<size_t>(n_layers), kinds[0]);
  if (static_cast<int>(kinds.size()) != n_layers)
    throw config_error("config: model.layer_pattern must list 1 or n_layers kinds");
  return kinds;
}

inline ModelConfig to_model_config(const RunConfig& rc) {
  ModelConfig mc;
  mc.vocab = rc.vocab;
  mc.n_layers = rc.n_layers;
  mc.layer_pattern = parse_layer_pattern(rc.layer_pattern, rc.n_layers);
  mc.block.d_model = rc.d_model;
  mc.block.h_softmax = rc.h_softmax;
  mc.block.h_lin = rc.h_lin;
  mc.block.d_head = rc.d_head;
  mc.block.C = rc.chunk;
  mc.block.c = rc.subchunk > 0 ? rc.subchunk : rc.chunk;
  mc.block.rope = rc.rope;
  mc.block.theta_base = rc.theta_base;
  mc.block.eps_rms = rc.eps_rms;
  mc.block.eps_l2 = rc.eps_l2;
  mc.block.sattn_out = rc.sattn_out;
  mc.block.gdn_out = rc.gdn_out;
  mc.block.no_lattn_decay = rc.no_lattn_decay;
  mc.block.no_attn_norm = rc.no_attn_norm;
  mc.block.no_attn_weights = rc.no_attn_weights;
  mc.block.weights_from_x = rc.weights_from_x;
  mc.mlp_mult = rc.mlp_mult;
  mc.seed = rc.seed;
  try {
    mc.validate();
  } catch (const dim_error& e) {
    throw config_error(std::string("config: ") + e.what());
  }
  return mc;
}

inline TrainConfig to_train_config(const RunConfig& rc) {
  TrainConfig tc;
  tc.peak_lr = rc.peak_lr;
  tc.lr_init_frac = rc.lr_init_frac;
  tc.beta1 = rc.beta1;
  tc.beta2 = rc.beta2;
  tc.weight_decay = rc.weight_decay;
  tc.clip_norm = rc.clip_norm;
  tc.warmup_steps = rc.warmup_steps;
  tc.total_steps = rc.total_steps;
  tc.batch = rc.batch;
  tc.seq_len = rc.seq_len;
  return tc;
}

inline TaskSpec to_task_spec(const RunConfig& rc) {
  TaskSpec ts;
  if (rc.task_kind == "mqar_recall")
    ts.kind = TaskSpec::Kind::MqarRecall;
  else if (rc.task_kind == "copy")
    ts.kind = TaskSpec::Kind::Copy;
  else if (rc.task_kind == "induction")
    ts.kind = TaskSpec::Kind::Induction;
  else
    throw config_error("config: unknown task.kind '" + rc.task_kind + "'");
  ts.n_pairs = rc.n_pairs;
  ts.key_vocab = rc.key_vocab;
  ts.val_vocab = rc.val_vocab;
  ts.seq_len = rc.task_seq_len;
  ts.seed = rc.task_seed;
  if (ts.min_vocab() > rc.vocab)
    throw config_error("config: model.vocab too small for the task vocabularies");
  if (ts.seq_len % rc.chunk != 0)
    throw config_error("config: task.seq_len must be a multiple of model.chunk");
  return ts;
}

inline RoutingPolicy to_routing_policy(const RunConfig& rc) {
  if (rc.routing == "learned") return RoutingPolicy(RoutingMode::Learned);
  if (rc.routing == "all_softmax") return RoutingPolicy(RoutingMode::AllSoftmax);
  if (rc.routing == "all_linear") return RoutingPolicy(RoutingMode::AllLinear);
  if (rc.routing.rfind("fraction:", 0) == 0) {
    const double p = std::stod(rc.routing.substr(9));
    if (p < 0.0 || p > 1.0) throw config_error("config: routing fraction must be in [0,1]");
    return RoutingPolicy::with_fraction(p);
  }
  throw config_error("config: unknown run.routing '" + rc.routing + "'");
}

}  // namespace hattn
