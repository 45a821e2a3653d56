#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "glg/errors.hpp"
#include "glg/estimate.hpp"
#include "glg/grid.hpp"
#include "glg/model.hpp"
#include "glg/states.hpp"
#include "glg/wavelet.hpp"

namespace glg {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

// Standard normal quantile via safeguarded Newton on the cdf; exact at
// p = 1/2 and accurate to ~1e-13 elsewhere in (0, 1).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("normal_quantile: p must be in (0,1)");
  double lo = -40.0, hi = 40.0, z = 0.0;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  for (int it = 0; it < 200; ++it) {
    const double err = normal_cdf(z) - p;
    if (err == 0.0) return z;
    if (err > 0.0) hi = std::min(hi, z);
    else lo = std::max(lo, z);
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * z * z);
    double step = (pdf > 0.0) ? err / pdf : 0.0;
    double next = z - step;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);  // bisection fallback
    if (std::abs(next - z) < 1e-15 * std::max(1.0, std::abs(z))) return next;
    z = next;
  }
  return z;
}

// Binary "large coefficient" labels per node: f = 1 iff the MAP state is at
// or above the p-fractile of its level's prior Gaussian.  Levels not listed
// in level_mask are forced to 0.
struct LabelForest {
  Direction direction = Direction::horizontal;
  ForestTopology topology;
  std::size_t tree_count = 0;
  std::vector<std::uint8_t> labels;  // k x n
  double fractile = 0.9;
  std::vector<int> level_mask;  // enabled tree levels (1-based)

  std::uint8_t label(std::size_t tree, std::size_t node) const {
    return labels[tree * topology.nodes() + node];
  }
};

struct EdgeMap {
  std::size_t side = 0;
  std::vector<std::uint8_t> values;  // row-major, 0/1

  std::uint8_t at(std::size_t row, std::size_t col) const { return values[row * side + col]; }
  std::size_t count() const {
    std::size_t c = 0;
    for (std::uint8_t v : values) c += v;
    return c;
  }
};

inline LabelForest label_states(const StateField& states, const ForestTopology& topo,
                                Direction direction, const GlgParams& params, double p,
                                std::span<const int> level_mask) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("label_states: p must be in (0,1)");
  if (states.node_count != topo.nodes())
    throw std::invalid_argument("label_states: states/topology node mismatch");
  const LevelMoments lm = level_moments(params);
  if (topo.levels != params.levels)
    throw std::invalid_argument("label_states: params/topology level mismatch");

  const double zq = normal_quantile(p);
  std::vector<double> threshold(topo.nodes());
  std::vector<std::uint8_t> enabled(static_cast<std::size_t>(topo.levels) + 1, 0);
  for (int lev : level_mask)
    if (lev >= 1 && lev <= topo.levels) enabled[static_cast<std::size_t>(lev)] = 1;
  for (std::size_t i = 0; i < topo.nodes(); ++i) {
    const std::size_t r = static_cast<std::size_t>(topo.level_of[i] - 1);
    threshold[i] = lm.mu[r] + std::sqrt(lm.sigma_sq[r]) * zq;
  }

  LabelForest out;
  out.direction = direction;
  out.topology = topo;
  out.tree_count = states.tree_count;
  out.fractile = p;
  out.level_mask.assign(level_mask.begin(), level_mask.end());
  out.labels.assign(states.tree_count * topo.nodes(), 0);
  for (std::size_t t = 0; t < states.tree_count; ++t) {
    const double* s = states.tree(t);
    for (std::size_t i = 0; i < topo.nodes(); ++i) {
      const int lev = topo.level_of[i];
      if (!enabled[static_cast<std::size_t>(lev)]) continue;
      out.labels[t * topo.nodes() + i] = (s[i] >= threshold[i]) ? 1 : 0;
    }
  }
  return out;
}

// Pixel support of one direction's labels: the labels are written into an
// otherwise zero pyramid (approximation zero), inverse transformed, and
// thresholded at a scale-relative epsilon.  Multiple forests are processed
// one direction at a time and the binary maps OR-combined, so directions can
// never cancel each other.
inline EdgeMap edge_map(const std::vector<LabelForest>& forests, std::size_t image_side,
                        Filter filter) {
  if (forests.empty()) throw std::invalid_argument("edge_map: need at least one label forest");
  const int levels = forests.front().topology.levels;
  const std::size_t coarse = image_side >> levels;
  if (coarse == 0 || (coarse << levels) != image_side)
    throw dimension_error("edge_map: image side incompatible with forest levels");

  EdgeMap out;
  out.side = image_side;
  out.values.assign(image_side * image_side, 0);

  for (const LabelForest& lf : forests) {
    if (lf.topology.levels != levels || lf.topology.arity != 4)
      throw dimension_error("edge_map: label forests must share a quadtree shape");
    if (lf.tree_count != coarse * coarse)
      throw dimension_error("edge_map: label forest does not match the image side");

    WaveletPyramid pyr;
    pyr.filter = filter;
    pyr.levels = levels;
    pyr.image_side = image_side;
    pyr.detail.resize(static_cast<std::size_t>(levels));
    for (int t = 1; t <= levels; ++t) {
      const std::size_t side = pyr.side_at_transform_level(t);
      DetailSet& ds = pyr.detail[static_cast<std::size_t>(t - 1)];
      ds.horizontal = Grid(side, side);
      ds.vertical = Grid(side, side);
      ds.diagonal = Grid(side, side);
    }
    pyr.approximation = Grid(coarse, coarse);

    WaveletForest asforest;
    asforest.direction = lf.direction;
    asforest.topology = lf.topology;
    asforest.tree_count = lf.tree_count;
    asforest.coefficients.resize(lf.labels.size());
    for (std::size_t i = 0; i < lf.labels.size(); ++i)
      asforest.coefficients[i] = static_cast<double>(lf.labels[i]);
    pyr = insert_forest(asforest, pyr, lf.direction);

    const ImageGrid back = dwt2_inverse(pyr);
    double peak = 0.0;
    for (double v : back.values.data) peak = std::max(peak, std::abs(v));
    const double eps = 1e-9 * peak;
    for (std::size_t i = 0; i < out.values.size(); ++i)
      if (std::abs(back.values.data[i]) > eps && peak > 0.0) out.values[i] = 1;
  }
  return out;
}

// Full pipeline: fit, MAP states, fractile labels and pixel transfer for each
// direction, OR-combined.
inline EdgeMap detect_edges(const ImageGrid& image, Filter filter, int levels, double p,
                            std::span<const int> level_mask, const FitConfig& fit_cfg = {}) {
  WaveletPyramid pyr = dwt2_forward(image, filter, levels);
  std::vector<LabelForest> labels;
  MapConfig map_cfg;
  map_cfg.threads = fit_cfg.threads;
  for (Direction d : {Direction::horizontal, Direction::vertical, Direction::diagonal}) {
    WaveletForest forest = extract_forest(pyr, d);
    LabelForest lf;
    try {
      FitResult fit = fit_glg(forest, fit_cfg);
      MapResult map = map_states(forest, fit.params, map_cfg);
      lf = label_states(map.states, forest.topology, d, fit.params, p, level_mask);
    } catch (const estimation_error&) {
      // A direction with no usable coefficients (e.g. a flat image) has
      // nothing to label; it contributes an empty set of edge pixels.
      lf.direction = d;
      lf.topology = forest.topology;
      lf.tree_count = forest.tree_count;
      lf.fractile = p;
      lf.level_mask.assign(level_mask.begin(), level_mask.end());
      lf.labels.assign(forest.tree_count * forest.topology.nodes(), 0);
    }
    labels.push_back(std::move(lf));
  }
  return edge_map(labels, image.width(), filter);
}

}  // namespace glg
