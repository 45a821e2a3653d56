#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "glg/edges.hpp"
#include "glg/errors.hpp"
#include "glg/grid.hpp"
#include "glg/model.hpp"
#include "glg/wavelet.hpp"

namespace glg {

// Shortest exact decimal representation: %.17g round-trips every double.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// PGM (P5, 8-bit, maxval 255).  Pixels map to reals by value/255, so images
// live in the unit interval; writing clamps to [0, 1] first (display clip).

inline ImageGrid read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("read_pgm: cannot open " + path);

  auto next_token = [&]() -> std::string {
    std::string tok;
    for (;;) {
      const int c = in.get();
      if (c == EOF) throw io_error("read_pgm: truncated header in " + path);
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) return tok;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
  };

  if (next_token() != "P5") throw io_error("read_pgm: not a binary PGM (P5): " + path);
  const long width = std::strtol(next_token().c_str(), nullptr, 10);
  const long height = std::strtol(next_token().c_str(), nullptr, 10);
  const long maxval = std::strtol(next_token().c_str(), nullptr, 10);
  if (width <= 0 || height <= 0) throw io_error("read_pgm: bad dimensions in " + path);
  if (maxval != 255) throw io_error("read_pgm: only maxval 255 is supported: " + path);

  std::vector<unsigned char> bytes(static_cast<std::size_t>(width) *
                                   static_cast<std::size_t>(height));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw io_error("read_pgm: truncated pixel data in " + path);

  ImageGrid img(Grid(static_cast<std::size_t>(height), static_cast<std::size_t>(width)));
  for (std::size_t i = 0; i < bytes.size(); ++i)
    img.values.data[i] = static_cast<double>(bytes[i]) / 255.0;
  return img;
}

inline void write_pgm(const std::string& path, const ImageGrid& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("write_pgm: cannot open " + path);
  out << "P5\n" << image.width() << " " << image.height() << "\n255\n";
  for (double v : image.values.data) {
    double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    const auto byte = static_cast<unsigned char>(std::lround(c * 255.0));
    out.put(static_cast<char>(byte));
  }
  if (!out) throw io_error("write_pgm: write failed for " + path);
}

inline void write_edge_pgm(const std::string& path, const EdgeMap& map) {
  ImageGrid img(map.side);
  for (std::size_t i = 0; i < map.values.size(); ++i)
    img.values.data[i] = map.values[i] ? 1.0 : 0.0;
  write_pgm(path, img);
}

// ---------------------------------------------------------------------------
// Parameter files: versioned plain-text key-value lines, full precision.
// Round-trips losslessly (write -> read -> write is byte-identical).

struct FitMetadata {
  std::optional<int> quad_order;
  std::vector<int> iterations;  // per EM stage
  std::vector<std::uint8_t> fallback_sigma;
  std::vector<std::uint8_t> fallback_beta;
  std::vector<std::uint8_t> fallback_kappa;
  std::optional<std::uint64_t> seed;
};

struct ParamFile {
  enum class Kind { tied, homogeneous };
  int format_version = 1;
  Kind kind = Kind::tied;
  int levels = 1;
  GlgParams tied;
  HomogeneousGlgParams homogeneous;
  FitMetadata meta;
};

inline void write_param_file(const std::string& path, const ParamFile& pf) {
  std::ostringstream out;
  out << "glg-params " << pf.format_version << "\n";
  out << "kind " << (pf.kind == ParamFile::Kind::tied ? "tied" : "homogeneous") << "\n";
  out << "levels " << pf.levels << "\n";
  if (pf.kind == ParamFile::Kind::tied) {
    out << "mu0 " << format_double(pf.tied.mu0) << "\n";
    out << "sigma0_sq " << format_double(pf.tied.sigma0_sq) << "\n";
    for (int r = 1; r < pf.levels; ++r) {
      const std::size_t i = static_cast<std::size_t>(r - 1);
      out << "alpha " << r << " " << format_double(pf.tied.alpha[i]) << "\n";
      out << "beta " << r << " " << format_double(pf.tied.beta[i]) << "\n";
      out << "kappa_sq " << r << " " << format_double(pf.tied.kappa_sq[i]) << "\n";
    }
  } else {
    out << "mu0 " << format_double(pf.homogeneous.mu0) << "\n";
    out << "sigma0_sq " << format_double(pf.homogeneous.sigma0_sq) << "\n";
    out << "alpha " << format_double(pf.homogeneous.alpha) << "\n";
    out << "beta " << format_double(pf.homogeneous.beta) << "\n";
    out << "kappa_sq " << format_double(pf.homogeneous.kappa_sq) << "\n";
  }
  const FitMetadata& m = pf.meta;
  if (m.quad_order) out << "quad_order " << *m.quad_order << "\n";
  if (!m.iterations.empty()) {
    out << "iterations";
    for (int it : m.iterations) out << " " << it;
    out << "\n";
  }
  auto flags_line = [&](const char* key, const std::vector<std::uint8_t>& flags) {
    if (flags.empty()) return;
    out << key;
    for (std::uint8_t f : flags) out << " " << static_cast<int>(f);
    out << "\n";
  };
  flags_line("fallback_sigma", m.fallback_sigma);
  flags_line("fallback_beta", m.fallback_beta);
  flags_line("fallback_kappa", m.fallback_kappa);
  if (m.seed) out << "seed " << *m.seed << "\n";

  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("write_param_file: cannot open " + path);
  f << out.str();
  if (!f) throw io_error("write_param_file: write failed for " + path);
}

inline ParamFile read_param_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("read_param_file: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw io_error("read_param_file: empty file " + path);
  std::istringstream head(line);
  std::string magic;
  int version = 0;
  head >> magic >> version;
  if (magic != "glg-params") throw io_error("read_param_file: bad magic in " + path);
  if (version != 1)
    throw io_error("read_param_file: unsupported format version " + std::to_string(version));

  ParamFile pf;
  pf.format_version = version;
  bool have_kind = false, have_levels = false;
  std::vector<std::pair<int, double>> alphas, betas, kappas;
  std::optional<double> h_alpha, h_beta, h_kappa, mu0, sigma0;

  auto parse_flags = [](std::istringstream& ss) {
    std::vector<std::uint8_t> flags;
    int v;
    while (ss >> v) flags.push_back(static_cast<std::uint8_t>(v));
    return flags;
  };

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "kind") {
      std::string k;
      ss >> k;
      if (k == "tied") pf.kind = ParamFile::Kind::tied;
      else if (k == "homogeneous") pf.kind = ParamFile::Kind::homogeneous;
      else throw io_error("read_param_file: unknown kind '" + k + "'");
      have_kind = true;
    } else if (key == "levels") {
      ss >> pf.levels;
      have_levels = true;
    } else if (key == "mu0") {
      double v;
      ss >> v;
      mu0 = v;
    } else if (key == "sigma0_sq") {
      double v;
      ss >> v;
      sigma0 = v;
    } else if (key == "alpha" || key == "beta" || key == "kappa_sq") {
      std::string a, b;
      ss >> a >> b;
      if (b.empty()) {
        // homogeneous scalar form
        const double v = std::strtod(a.c_str(), nullptr);
        if (key == "alpha") h_alpha = v;
        else if (key == "beta") h_beta = v;
        else h_kappa = v;
      } else {
        const int r = static_cast<int>(std::strtol(a.c_str(), nullptr, 10));
        const double v = std::strtod(b.c_str(), nullptr);
        if (key == "alpha") alphas.emplace_back(r, v);
        else if (key == "beta") betas.emplace_back(r, v);
        else kappas.emplace_back(r, v);
      }
    } else if (key == "quad_order") {
      int v;
      ss >> v;
      pf.meta.quad_order = v;
    } else if (key == "iterations") {
      int v;
      while (ss >> v) pf.meta.iterations.push_back(v);
    } else if (key == "fallback_sigma") {
      pf.meta.fallback_sigma = parse_flags(ss);
    } else if (key == "fallback_beta") {
      pf.meta.fallback_beta = parse_flags(ss);
    } else if (key == "fallback_kappa") {
      pf.meta.fallback_kappa = parse_flags(ss);
    } else if (key == "seed") {
      std::uint64_t v;
      ss >> v;
      pf.meta.seed = v;
    } else {
      throw io_error("read_param_file: unknown key '" + key + "' in " + path);
    }
  }
  if (!have_kind || !have_levels || !mu0 || !sigma0)
    throw io_error("read_param_file: missing required fields in " + path);

  if (pf.kind == ParamFile::Kind::tied) {
    GlgParams& p = pf.tied;
    p.levels = pf.levels;
    p.mu0 = *mu0;
    p.sigma0_sq = *sigma0;
    const std::size_t trans = static_cast<std::size_t>(pf.levels - 1);
    if (alphas.size() != trans || betas.size() != trans || kappas.size() != trans)
      throw io_error("read_param_file: transition parameter count mismatch in " + path);
    p.alpha.resize(trans);
    p.beta.resize(trans);
    p.kappa_sq.resize(trans);
    for (const auto& [r, v] : alphas) {
      if (r < 1 || r > pf.levels - 1)
        throw io_error("read_param_file: alpha level out of range in " + path);
      p.alpha[static_cast<std::size_t>(r - 1)] = v;
    }
    for (const auto& [r, v] : betas) p.beta[static_cast<std::size_t>(r - 1)] = v;
    for (const auto& [r, v] : kappas) p.kappa_sq[static_cast<std::size_t>(r - 1)] = v;
    p.validate();
  } else {
    if (!h_alpha || !h_beta || !h_kappa)
      throw io_error("read_param_file: missing homogeneous parameters in " + path);
    pf.homogeneous.mu0 = *mu0;
    pf.homogeneous.sigma0_sq = *sigma0;
    pf.homogeneous.alpha = *h_alpha;
    pf.homogeneous.beta = *h_beta;
    pf.homogeneous.kappa_sq = *h_kappa;
    pf.homogeneous.validate();
  }
  return pf;
}

// ---------------------------------------------------------------------------
// Forest / state files: a small header, then one line of full-precision
// values per tree.

inline void write_forest_file(const std::string& path, const WaveletForest& forest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("write_forest_file: cannot open " + path);
  out << "glg-forest 1\n";
  out << "direction " << to_string(forest.direction) << "\n";
  out << "levels " << forest.topology.levels << "\n";
  out << "arity " << forest.topology.arity << "\n";
  out << "trees " << forest.tree_count << "\n";
  const std::size_t n = forest.topology.nodes();
  for (std::size_t t = 0; t < forest.tree_count; ++t) {
    const double* row = forest.tree(t);
    for (std::size_t i = 0; i < n; ++i) out << (i ? " " : "") << format_double(row[i]);
    out << "\n";
  }
  if (!out) throw io_error("write_forest_file: write failed for " + path);
}

namespace detail {

inline std::vector<double> parse_row(const std::string& line, std::size_t expect,
                                     const std::string& path) {
  std::vector<double> row;
  row.reserve(expect);
  const char* p = line.c_str();
  char* endp = nullptr;
  for (;;) {
    while (*p == ' ' || *p == '\t') ++p;
    if (*p == '\0') break;
    const double v = std::strtod(p, &endp);
    if (endp == p) throw io_error("corrupt numeric row in " + path);
    row.push_back(v);
    p = endp;
  }
  if (row.size() != expect)
    throw io_error("row length mismatch in " + path + ": expected " + std::to_string(expect) +
                   ", got " + std::to_string(row.size()));
  return row;
}

}  // namespace detail

inline WaveletForest read_forest_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("read_forest_file: cannot open " + path);
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != "glg-forest" || version != 1)
    throw io_error("read_forest_file: bad header in " + path);

  std::string key, dir;
  int levels = 0, arity = 0;
  std::size_t trees = 0;
  in >> key >> dir;
  if (key != "direction") throw io_error("read_forest_file: expected direction in " + path);
  in >> key >> levels;
  if (key != "levels") throw io_error("read_forest_file: expected levels in " + path);
  in >> key >> arity;
  if (key != "arity") throw io_error("read_forest_file: expected arity in " + path);
  in >> key >> trees;
  if (key != "trees") throw io_error("read_forest_file: expected trees in " + path);
  std::string rest;
  std::getline(in, rest);

  WaveletForest forest;
  if (dir == "horizontal") forest.direction = Direction::horizontal;
  else if (dir == "vertical") forest.direction = Direction::vertical;
  else if (dir == "diagonal") forest.direction = Direction::diagonal;
  else throw io_error("read_forest_file: unknown direction '" + dir + "'");
  forest.topology = ForestTopology::make(levels, arity);
  forest.tree_count = trees;
  const std::size_t n = forest.topology.nodes();
  forest.coefficients.reserve(trees * n);
  std::string line;
  for (std::size_t t = 0; t < trees; ++t) {
    if (!std::getline(in, line)) throw io_error("read_forest_file: truncated " + path);
    const std::vector<double> row = detail::parse_row(line, n, path);
    forest.coefficients.insert(forest.coefficients.end(), row.begin(), row.end());
  }
  return forest;
}

inline void write_states_file(const std::string& path, const StateField& states) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("write_states_file: cannot open " + path);
  out << "glg-states 1\n";
  out << "trees " << states.tree_count << "\n";
  out << "nodes " << states.node_count << "\n";
  for (std::size_t t = 0; t < states.tree_count; ++t) {
    const double* row = states.tree(t);
    for (std::size_t i = 0; i < states.node_count; ++i)
      out << (i ? " " : "") << format_double(row[i]);
    out << "\n";
  }
  if (!out) throw io_error("write_states_file: write failed for " + path);
}

inline StateField read_states_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("read_states_file: cannot open " + path);
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != "glg-states" || version != 1)
    throw io_error("read_states_file: bad header in " + path);
  std::string key;
  std::size_t trees = 0, nodes = 0;
  in >> key >> trees;
  if (key != "trees") throw io_error("read_states_file: expected trees in " + path);
  in >> key >> nodes;
  if (key != "nodes") throw io_error("read_states_file: expected nodes in " + path);
  std::string rest;
  std::getline(in, rest);

  StateField states(trees, nodes);
  std::string line;
  for (std::size_t t = 0; t < trees; ++t) {
    if (!std::getline(in, line)) throw io_error("read_states_file: truncated " + path);
    const std::vector<double> row = detail::parse_row(line, nodes, path);
    for (std::size_t i = 0; i < nodes; ++i) states.at(t, i) = row[i];
  }
  return states;
}

}  // namespace glg
