#pragma once

// Checkpoint container: a text header (format tag, the effective config
// echoed verbatim, one descriptor line per tensor) followed by raw
// little-endian float64 payloads in header order. Values are stored as
// doubles regardless of run precision, so checkpoints are lossless and
// precision-portable.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hattn/config.hpp"
#include "hattn/tensor.hpp"

namespace hattn {

inline constexpr const char* kCheckpointMagic = "HYBRID-ATTN-CKPT v1";

template <typename R>
inline void save_checkpoint(const std::string& path, const ParamStore<R>& ps,
                            const RunConfig& rc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("checkpoint: cannot write " + path);
  out << kCheckpointMagic << "\n";
  out << "CONFIG\n" << echo_config(rc) << "END CONFIG\n";
  out << "PARAMS " << ps.entries.size() << "\n";
  for (const auto& [name, p] : ps.entries) {
    out << "param " << name << " " << p.value.rank();
    for (int d : p.value.shape) out << " " << d;
    out << "\n";
  }
  out << "DATA\n";
  std::vector<double> buf;
  for (const auto& [name, p] : ps.entries) {
    buf.assign(p.value.data.begin(), p.value.data.end());
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(double)));
  }
  if (!out) throw config_error("checkpoint: write failed for " + path);
}

// Reads the header and returns the embedded config; `expect_line` trips on
// any container-format drift.
inline RunConfig load_checkpoint_config(std::ifstream& in, const std::string& path) {
  auto expect_line = [&](const std::string& want) {
    std::string line;
    if (!std::getline(in, line) || line != want)
      throw config_error("checkpoint: bad or corrupt file " + path + " (expected '" + want + "')");
  };
  expect_line(kCheckpointMagic);
  expect_line("CONFIG");
  std::ostringstream cfg_text;
  std::string line;
  while (std::getline(in, line) && line != "END CONFIG") cfg_text << line << "\n";
  if (line != "END CONFIG") throw config_error("checkpoint: unterminated config in " + path);
  RunConfig rc;
  std::istringstream cfg_in(cfg_text.str());
  parse_config_text(rc, cfg_in);
  return rc;
}

template <typename R>
inline RunConfig load_checkpoint(const std::string& path, ParamStore<R>& ps) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("checkpoint: cannot open " + path);
  const RunConfig rc = load_checkpoint_config(in, path);

  std::string line;
  if (!std::getline(in, line) || line.rfind("PARAMS ", 0) != 0)
    throw config_error("checkpoint: missing PARAMS section in " + path);
  const size_t count = std::stoull(line.substr(7));
  struct Desc {
    std::string name;
    std::vector<int> shape;
  };
  std::vector<Desc> descs;
  for (size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw config_error("checkpoint: truncated header in " + path);
    std::istringstream ls(line);
    std::string tag;
    Desc d;
    int rank = 0;
    ls >> tag >> d.name >> rank;
    if (tag != "param" || rank < 1 || rank > 4)
      throw config_error("checkpoint: bad descriptor '" + line + "'");
    d.shape.resize(static_cast<size_t>(rank));
    for (int& v : d.shape) ls >> v;
    descs.push_back(std::move(d));
  }
  if (!std::getline(in, line) || line != "DATA")
    throw config_error("checkpoint: missing DATA section in " + path);

  for (const Desc& d : descs) {
    if (!ps.has(d.name))
      throw config_error("checkpoint: parameter '" + d.name + "' not present in this model");
    Param<R>& p = ps.at(d.name);
    if (p.value.shape != d.shape)
      throw config_error("checkpoint: shape mismatch for '" + d.name + "' (file " +
                         Tensor<R>(d.shape).shape_str() + ", model " + p.value.shape_str() + ")");
    std::vector<double> buf(p.value.numel());
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(double)));
    if (!in) throw config_error("checkpoint: truncated payload in " + path);
    for (size_t i = 0; i < buf.size(); ++i) p.value.data[i] = static_cast<R>(buf[i]);
  }
  if (descs.size() != ps.entries.size())
    throw config_error("checkpoint: file lists " + std::to_string(descs.size()) +
                       " tensors, model has " + std::to_string(ps.entries.size()));
  return rc;
}

// Convenience: peek at the config without a parameter store.
inline RunConfig read_checkpoint_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("checkpoint: cannot open " + path);
  return load_checkpoint_config(in, path);
}

}  // namespace hattn
