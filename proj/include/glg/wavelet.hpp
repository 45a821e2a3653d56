#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "glg/errors.hpp"
#include "glg/grid.hpp"

namespace glg {

enum class Filter { haar, daub4 };
enum class Direction { horizontal, vertical, diagonal };

inline const char* to_string(Direction d) {
  switch (d) {
    case Direction::horizontal: return "horizontal";
    case Direction::vertical: return "vertical";
    case Direction::diagonal: return "diagonal";
  }
  return "?";
}

inline const char* to_string(Filter f) {
  return f == Filter::haar ? "haar" : "daub4";
}

struct FilterPair {
  std::vector<double> lo;
  std::vector<double> hi;
};

// Orthonormal filter taps.  The high-pass is the standard quadrature mirror
// g_k = (-1)^k h_{L-1-k}.  Correctness is enforced by the orthonormality /
// Parseval tests rather than trusted from the constants alone.
inline FilterPair filter_coefficients(Filter f) {
  if (f == Filter::haar) {
    const double a = 1.0 / std::sqrt(2.0);
    return {{a, a}, {a, -a}};
  }
  const double s3 = std::sqrt(3.0);
  const double norm = 4.0 * std::sqrt(2.0);
  const std::array<double, 4> h = {(1.0 + s3) / norm, (3.0 + s3) / norm,
                                   (3.0 - s3) / norm, (1.0 - s3) / norm};
  return {{h[0], h[1], h[2], h[3]}, {h[3], -h[2], h[1], -h[0]}};
}

namespace detail {

// One level of the periodic 1D analysis: x (length n, even) -> approx | detail
// halves.  a_i = sum_k lo_k x_{(2i+k) mod n}, d_i likewise with hi.
inline void analyze_1d(const double* x, std::size_t n, const FilterPair& f, double* out) {
  const std::size_t half = n / 2;
  const std::size_t taps = f.lo.size();
  for (std::size_t i = 0; i < half; ++i) {
    double a = 0.0, d = 0.0;
    for (std::size_t k = 0; k < taps; ++k) {
      const double v = x[(2 * i + k) % n];
      a += f.lo[k] * v;
      d += f.hi[k] * v;
    }
    out[i] = a;
    out[half + i] = d;
  }
}

// Exact transpose of analyze_1d, which inverts it because the periodized
// filter bank is orthonormal for every even length.
inline void synthesize_1d(const double* in, std::size_t n, const FilterPair& f, double* x) {
  const std::size_t half = n / 2;
  const std::size_t taps = f.lo.size();
  for (std::size_t m = 0; m < n; ++m) x[m] = 0.0;
  for (std::size_t i = 0; i < half; ++i) {
    const double a = in[i];
    const double d = in[half + i];
    for (std::size_t k = 0; k < taps; ++k)
      x[(2 * i + k) % n] += f.lo[k] * a + f.hi[k] * d;
  }
}

}  // namespace detail

// Detail subbands of one transform level.  Subband naming follows the
// convention used throughout this library: rows of a matrix run along y and
// columns along x; "horizontal" is low-pass in x / high-pass in y (it responds
// to horizontal structure), "vertical" is high-pass in x / low-pass in y,
// "diagonal" is high-pass in both.
struct DetailSet {
  Grid horizontal;
  Grid vertical;
  Grid diagonal;

  Grid& by_direction(Direction d) {
    switch (d) {
      case Direction::horizontal: return horizontal;
      case Direction::vertical: return vertical;
      default: return diagonal;
    }
  }
  const Grid& by_direction(Direction d) const {
    return const_cast<DetailSet*>(this)->by_direction(d);
  }
};

// Separable 2D wavelet decomposition.  detail[t-1] holds transform level t,
// with t = 1 the finest (side N/2) and t = levels the coarsest.  Tree levels
// used by the forest run the other way: tree level 1 is the coarsest detail
// level, i.e. transform level (levels - tree_level + 1).
struct WaveletPyramid {
  Filter filter = Filter::daub4;
  int levels = 0;
  std::size_t image_side = 0;
  std::vector<DetailSet> detail;
  Grid approximation;

  std::size_t side_at_transform_level(int t) const { return image_side >> t; }
};

inline WaveletPyramid dwt2_forward(const ImageGrid& image, Filter filter, int levels) {
  require_square(image, "dwt2_forward");
  const std::size_t side = image.width();
  if (levels < 1) throw dimension_error("dwt2_forward: levels must be >= 1");
  if (side % (std::size_t{1} << levels) != 0)
    throw dimension_error("dwt2_forward: image side " + std::to_string(side) +
                          " not divisible by 2^" + std::to_string(levels));

  const FilterPair f = filter_coefficients(filter);
  WaveletPyramid pyr;
  pyr.filter = filter;
  pyr.levels = levels;
  pyr.image_side = side;
  pyr.detail.resize(static_cast<std::size_t>(levels));

  Grid approx = image.values;
  std::vector<double> buf;
  for (int t = 1; t <= levels; ++t) {
    const std::size_t m = approx.rows;
    const std::size_t half = m / 2;
    buf.resize(m);

    // Rows first (along x), then columns (along y).
    Grid rowpass(m, m);
    for (std::size_t r = 0; r < m; ++r)
      detail::analyze_1d(&approx.data[r * m], m, f, &rowpass.data[r * m]);
    Grid full(m, m);
    std::vector<double> col(m);
    for (std::size_t c = 0; c < m; ++c) {
      for (std::size_t r = 0; r < m; ++r) col[r] = rowpass(r, c);
      detail::analyze_1d(col.data(), m, f, buf.data());
      for (std::size_t r = 0; r < m; ++r) full(r, c) = buf[r];
    }

    DetailSet& ds = pyr.detail[static_cast<std::size_t>(t - 1)];
    ds.vertical = Grid(half, half);
    ds.horizontal = Grid(half, half);
    ds.diagonal = Grid(half, half);
    Grid next(half, half);
    for (std::size_t r = 0; r < half; ++r)
      for (std::size_t c = 0; c < half; ++c) {
        next(r, c) = full(r, c);
        ds.vertical(r, c) = full(r, c + half);
        ds.horizontal(r, c) = full(r + half, c);
        ds.diagonal(r, c) = full(r + half, c + half);
      }
    approx = std::move(next);
  }
  pyr.approximation = std::move(approx);
  return pyr;
}

inline void validate_pyramid(const WaveletPyramid& pyr) {
  if (pyr.levels < 1 || pyr.detail.size() != static_cast<std::size_t>(pyr.levels))
    throw dimension_error("pyramid: level count does not match detail storage");
  if (pyr.image_side % (std::size_t{1} << pyr.levels) != 0)
    throw dimension_error("pyramid: image side incompatible with level count");
  for (int t = 1; t <= pyr.levels; ++t) {
    const std::size_t want = pyr.side_at_transform_level(t);
    const DetailSet& ds = pyr.detail[static_cast<std::size_t>(t - 1)];
    for (const Grid* g : {&ds.horizontal, &ds.vertical, &ds.diagonal})
      if (g->rows != want || g->cols != want)
        throw dimension_error("pyramid: subband shape mismatch at transform level " +
                              std::to_string(t));
  }
  const std::size_t coarse = pyr.side_at_transform_level(pyr.levels);
  if (pyr.approximation.rows != coarse || pyr.approximation.cols != coarse)
    throw dimension_error("pyramid: approximation shape mismatch");
}

inline ImageGrid dwt2_inverse(const WaveletPyramid& pyr) {
  validate_pyramid(pyr);
  const FilterPair f = filter_coefficients(pyr.filter);

  Grid approx = pyr.approximation;
  std::vector<double> buf;
  for (int t = pyr.levels; t >= 1; --t) {
    const std::size_t half = approx.rows;
    const std::size_t m = half * 2;
    const DetailSet& ds = pyr.detail[static_cast<std::size_t>(t - 1)];
    buf.resize(m);

    Grid full(m, m);
    for (std::size_t r = 0; r < half; ++r)
      for (std::size_t c = 0; c < half; ++c) {
        full(r, c) = approx(r, c);
        full(r, c + half) = ds.vertical(r, c);
        full(r + half, c) = ds.horizontal(r, c);
        full(r + half, c + half) = ds.diagonal(r, c);
      }

    // Invert in reverse order: columns, then rows.
    Grid colpass(m, m);
    std::vector<double> col(m);
    for (std::size_t c = 0; c < m; ++c) {
      for (std::size_t r = 0; r < m; ++r) col[r] = full(r, c);
      detail::synthesize_1d(col.data(), m, f, buf.data());
      for (std::size_t r = 0; r < m; ++r) colpass(r, c) = buf[r];
    }
    Grid out(m, m);
    for (std::size_t r = 0; r < m; ++r)
      detail::synthesize_1d(&colpass.data[r * m], m, f, &out.data[r * m]);
    approx = std::move(out);
  }
  return ImageGrid(std::move(approx));
}

// Shared tree layout for every tree of a forest.  Nodes are numbered breadth
// first from the root (node 0, level 1); the children of a node are contiguous
// and children_of(i) lists them in row-major order over the refinement block.
struct ForestTopology {
  int levels = 0;
  int arity = 0;
  std::vector<int> level_of;   // node -> tree level, root = 1
  std::vector<int> parent_of;  // node -> parent, -1 for the root
  std::vector<std::vector<int>> children_of;

  static ForestTopology make(int levels, int arity) {
    if (levels < 1) throw topology_error("topology: levels must be >= 1");
    if (arity < 1) throw topology_error("topology: arity must be >= 1");
    ForestTopology t;
    t.levels = levels;
    t.arity = arity;
    std::size_t count = 0, width = 1;
    for (int r = 0; r < levels; ++r) {
      count += width;
      width *= static_cast<std::size_t>(arity);
    }
    t.level_of.resize(count);
    t.parent_of.assign(count, -1);
    t.children_of.resize(count);

    std::size_t level_start = 0;
    width = 1;
    for (int lev = 1; lev <= levels; ++lev) {
      const std::size_t next_start = level_start + width;
      for (std::size_t q = 0; q < width; ++q) {
        const std::size_t i = level_start + q;
        t.level_of[i] = lev;
        if (lev < levels) {
          t.children_of[i].resize(static_cast<std::size_t>(arity));
          for (int d = 0; d < arity; ++d) {
            const std::size_t child = next_start + q * static_cast<std::size_t>(arity) +
                                      static_cast<std::size_t>(d);
            t.children_of[i][static_cast<std::size_t>(d)] = static_cast<int>(child);
            t.parent_of[child] = static_cast<int>(i);
          }
        }
      }
      level_start = next_start;
      width *= static_cast<std::size_t>(arity);
    }
    return t;
  }

  static ForestTopology quadtree(int levels) { return make(levels, 4); }

  std::size_t nodes() const { return level_of.size(); }

  std::size_t level_start(int lev) const {
    std::size_t start = 0, width = 1;
    for (int r = 1; r < lev; ++r) {
      start += width;
      width *= static_cast<std::size_t>(arity);
    }
    return start;
  }

  std::size_t level_width(int lev) const {
    std::size_t width = 1;
    for (int r = 1; r < lev; ++r) width *= static_cast<std::size_t>(arity);
    return width;
  }

  bool operator==(const ForestTopology&) const = default;
};

// The k i.i.d. coefficient trees of one subband direction.  Coefficients are
// stored tree-major: coefficients[t * n + i] is node i of tree t.
struct WaveletForest {
  Direction direction = Direction::horizontal;
  ForestTopology topology;
  std::size_t tree_count = 0;
  std::vector<double> coefficients;

  std::size_t node_count_per_tree() const { return topology.nodes(); }

  double& coef(std::size_t tree, std::size_t node) {
    return coefficients[tree * topology.nodes() + node];
  }
  double coef(std::size_t tree, std::size_t node) const {
    return coefficients[tree * topology.nodes() + node];
  }
  const double* tree(std::size_t t) const { return &coefficients[t * topology.nodes()]; }
  double* tree(std::size_t t) { return &coefficients[t * topology.nodes()]; }
};

// Hidden states (simulated truth or MAP estimates), same k x n layout as the
// forest coefficients.
struct StateField {
  std::size_t tree_count = 0;
  std::size_t node_count = 0;
  std::vector<double> values;

  StateField() = default;
  StateField(std::size_t trees, std::size_t nodes)
      : tree_count(trees), node_count(nodes), values(trees * nodes, 0.0) {}

  double& at(std::size_t tree, std::size_t node) { return values[tree * node_count + node]; }
  double at(std::size_t tree, std::size_t node) const { return values[tree * node_count + node]; }
  const double* tree(std::size_t t) const { return &values[t * node_count]; }
  double* tree(std::size_t t) { return &values[t * node_count]; }
};

namespace detail {

// Walks one quadtree, pairing node indices with subband positions: the root of
// tree (x0, y0) sits at (x0, y0) in the coarsest detail subband, and the
// children of a node at (x, y) are at (2x+dx, 2y+dy), dx,dy in {0,1}, one
// transform level finer, visited in row-major order (dy, then dx) to match
// children_of.
template <class Fn>
void walk_quadtree(const ForestTopology& topo, int node, int tree_level, std::size_t x,
                   std::size_t y, Fn&& fn) {
  fn(node, tree_level, x, y);
  if (tree_level == topo.levels) return;
  const auto& kids = topo.children_of[static_cast<std::size_t>(node)];
  for (int d = 0; d < 4; ++d) {
    const std::size_t dx = static_cast<std::size_t>(d) & 1u;
    const std::size_t dy = static_cast<std::size_t>(d) >> 1u;
    walk_quadtree(topo, kids[static_cast<std::size_t>(d)], tree_level + 1, 2 * x + dx,
                  2 * y + dy, fn);
  }
}

}  // namespace detail

inline WaveletForest extract_forest(const WaveletPyramid& pyr, Direction direction) {
  validate_pyramid(pyr);
  const std::size_t coarse = pyr.side_at_transform_level(pyr.levels);
  WaveletForest forest;
  forest.direction = direction;
  forest.topology = ForestTopology::quadtree(pyr.levels);
  forest.tree_count = coarse * coarse;
  forest.coefficients.resize(forest.tree_count * forest.topology.nodes());

  const int L = pyr.levels;
  for (std::size_t y0 = 0; y0 < coarse; ++y0)
    for (std::size_t x0 = 0; x0 < coarse; ++x0) {
      const std::size_t t = y0 * coarse + x0;
      detail::walk_quadtree(forest.topology, 0, 1, x0, y0,
                            [&](int node, int tree_level, std::size_t x, std::size_t y) {
                              const int tl = L - tree_level + 1;
                              const Grid& band =
                                  pyr.detail[static_cast<std::size_t>(tl - 1)].by_direction(direction);
                              forest.coef(t, static_cast<std::size_t>(node)) = band(y, x);
                            });
    }
  return forest;
}

inline WaveletPyramid insert_forest(const WaveletForest& forest, const WaveletPyramid& pyr,
                                    Direction direction) {
  validate_pyramid(pyr);
  if (forest.topology.arity != 4 || forest.topology.levels != pyr.levels)
    throw dimension_error("insert_forest: forest topology does not match pyramid");
  const std::size_t coarse = pyr.side_at_transform_level(pyr.levels);
  if (forest.tree_count != coarse * coarse)
    throw dimension_error("insert_forest: tree count does not match pyramid");

  WaveletPyramid out = pyr;
  const int L = pyr.levels;
  for (std::size_t y0 = 0; y0 < coarse; ++y0)
    for (std::size_t x0 = 0; x0 < coarse; ++x0) {
      const std::size_t t = y0 * coarse + x0;
      detail::walk_quadtree(forest.topology, 0, 1, x0, y0,
                            [&](int node, int tree_level, std::size_t x, std::size_t y) {
                              const int tl = L - tree_level + 1;
                              Grid& band =
                                  out.detail[static_cast<std::size_t>(tl - 1)].by_direction(direction);
                              band(y, x) = forest.coef(t, static_cast<std::size_t>(node));
                            });
    }
  return out;
}

}  // namespace glg
