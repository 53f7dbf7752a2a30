#pragma once

// Text checkpoint: model config plus named parameter arrays. Values are
// written as hexadecimal floats so a save/load round trip is bit-exact.
//
//   ssmrank-checkpoint 1
//   config <key>=<value>
//   ...
//   param <name> <rows> <cols> <decay 0|1>
//   <one row of hexfloats per line>
//   end

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>

#include "ssmrank/config.hpp"
#include "ssmrank/error.hpp"
#include "ssmrank/model.hpp"

namespace ssmrank {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams<double> params;
};

inline void write_checkpoint(std::ostream& out, const ModelConfig& config, const ModelParams<double>& params) {
  out << "ssmrank-checkpoint " << kCheckpointVersion << '\n';
  for (const auto& [k, v] : config.to_kv()) out << "config " << k << '=' << v << '\n';
  out << std::hexfloat;
  for (const auto& p : params) {
    out << "param " << p.name << ' ' << p.value.rows() << ' ' << p.value.cols() << ' ' << (p.decay ? 1 : 0) << '\n';
    for (std::size_t r = 0; r < p.value.rows(); ++r) {
      for (std::size_t c = 0; c < p.value.cols(); ++c) out << (c ? " " : "") << p.value(r, c);
      out << '\n';
    }
  }
  out << std::defaultfloat << "end\n";
}

inline void save_checkpoint(const std::string& path, const ModelConfig& config, const ModelParams<double>& params) {
  std::ofstream out(path);
  if (!out) throw InputError("checkpoint: cannot write " + path);
  write_checkpoint(out, config, params);
  if (!out) throw InputError("checkpoint: write failed for " + path);
}

inline Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++lineno;
    return true;
  };
  if (!next() || line != "ssmrank-checkpoint " + std::to_string(kCheckpointVersion))
    throw ParseError("checkpoint: missing or unsupported header", lineno == 0 ? 1 : lineno);

  KeyValueConfig kv;
  Checkpoint ck;
  bool config_done = false, ended = false;
  while (next()) {
    if (line.rfind("config ", 0) == 0) {
      if (config_done) throw ParseError("checkpoint: config line after parameters", lineno);
      const std::string body = line.substr(7);
      const auto eq = body.find('=');
      if (eq == std::string::npos) throw ParseError("checkpoint: malformed config line", lineno);
      kv.set(body.substr(0, eq), body.substr(eq + 1));
      continue;
    }
    if (!config_done) {
      ck.config = ModelConfig::from_kv(kv);
      kv.finish();
      config_done = true;
    }
    if (line == "end") {
      ended = true;
      break;
    }
    std::istringstream hdr(line);
    std::string tag, name;
    std::size_t rows = 0, cols = 0;
    int decay = 0;
    if (!(hdr >> tag >> name >> rows >> cols >> decay) || tag != "param" || (decay != 0 && decay != 1))
      throw ParseError("checkpoint: expected 'param <name> <rows> <cols> <decay>'", lineno);
    Matrix<double> m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
      if (!next()) throw ParseError("checkpoint: truncated parameter " + name, lineno);
      const char* p = line.c_str();
      for (std::size_t c = 0; c < cols; ++c) {
        char* endp = nullptr;
        m(r, c) = std::strtod(p, &endp);
        if (endp == p) throw ParseError("checkpoint: bad value in " + name, lineno);
        p = endp;
      }
      while (*p == ' ') ++p;
      if (*p != '\0') throw ParseError("checkpoint: extra values in " + name, lineno);
    }
    ck.params.add(name, std::move(m), decay == 1);
  }
  if (!ended) throw ParseError("checkpoint: missing 'end'", lineno);

  // The stored arrays must be exactly what this config would create.
  const auto expect = init_params<double>(ck.config, 0);
  if (expect.size() != ck.params.size()) throw InputError("checkpoint: parameter set does not match config");
  for (std::size_t i = 0; i < expect.size(); ++i)
    if (expect[i].name != ck.params[i].name || !expect[i].value.same_shape(ck.params[i].value))
      throw InputError("checkpoint: parameter " + ck.params[i].name + " does not match config");
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("checkpoint: cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace ssmrank
