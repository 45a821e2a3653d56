#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "glg/errors.hpp"
#include "glg/grid.hpp"
#include "glg/parallel.hpp"
#include "glg/rng.hpp"
#include "glg/wavelet.hpp"

namespace glg {

// GLG model, parameters tied within levels.  The root state is
// N(mu0, sigma0_sq); a child at tree level r+1 given its parent s is
// N(alpha(r) + beta(r) s, kappa_sq(r)) for transition level r = 1..levels-1
// (stored at vector index r-1); a coefficient given its state s is
// N(0, exp(s)).  Parameter count: 2 + 3(levels-1) = 3*levels - 1.
struct GlgParams {
  double mu0 = 0.0;
  double sigma0_sq = 1.0;
  int levels = 1;
  std::vector<double> alpha;
  std::vector<double> beta;
  std::vector<double> kappa_sq;

  void validate() const {
    if (levels < 1) throw std::invalid_argument("GlgParams: levels must be >= 1");
    if (!(sigma0_sq > 0.0)) throw std::invalid_argument("GlgParams: sigma0_sq must be > 0");
    const std::size_t trans = static_cast<std::size_t>(levels - 1);
    if (alpha.size() != trans || beta.size() != trans || kappa_sq.size() != trans)
      throw std::invalid_argument("GlgParams: transition vectors must have levels-1 entries");
    for (double k2 : kappa_sq)
      if (!(k2 > 0.0)) throw std::invalid_argument("GlgParams: every kappa_sq must be > 0");
    for (double v : {mu0, sigma0_sq})
      if (!std::isfinite(v)) throw std::invalid_argument("GlgParams: non-finite parameter");
    for (const auto* vec : {&alpha, &beta, &kappa_sq})
      for (double v : *vec)
        if (!std::isfinite(v)) throw std::invalid_argument("GlgParams: non-finite parameter");
  }
};

// Marginal mean/variance of the hidden state per level, indexed r = 0 (root
// prior) .. levels-1; a node at tree level L has marginal index L-1.
struct LevelMoments {
  std::vector<double> mu;
  std::vector<double> sigma_sq;
};

struct HomogeneousGlgParams {
  double mu0 = 0.0;
  double sigma0_sq = 1.0;
  double alpha = 0.0;
  double beta = 0.0;
  double kappa_sq = 1.0;

  void validate() const {
    if (!(sigma0_sq > 0.0) || !(kappa_sq > 0.0))
      throw std::invalid_argument("HomogeneousGlgParams: variances must be > 0");
  }
};

inline GlgParams to_tied(const HomogeneousGlgParams& h, int levels) {
  h.validate();
  if (levels < 1) throw std::invalid_argument("to_tied: levels must be >= 1");
  GlgParams p;
  p.mu0 = h.mu0;
  p.sigma0_sq = h.sigma0_sq;
  p.levels = levels;
  p.alpha.assign(static_cast<std::size_t>(levels - 1), h.alpha);
  p.beta.assign(static_cast<std::size_t>(levels - 1), h.beta);
  p.kappa_sq.assign(static_cast<std::size_t>(levels - 1), h.kappa_sq);
  return p;
}

inline LevelMoments level_moments(const GlgParams& p) {
  p.validate();
  LevelMoments lm;
  lm.mu.resize(static_cast<std::size_t>(p.levels));
  lm.sigma_sq.resize(static_cast<std::size_t>(p.levels));
  lm.mu[0] = p.mu0;
  lm.sigma_sq[0] = p.sigma0_sq;
  for (int r = 1; r < p.levels; ++r) {
    const std::size_t t = static_cast<std::size_t>(r - 1);
    lm.mu[static_cast<std::size_t>(r)] =
        p.alpha[t] + p.beta[t] * lm.mu[static_cast<std::size_t>(r - 1)];
    lm.sigma_sq[static_cast<std::size_t>(r)] =
        p.kappa_sq[t] + p.beta[t] * p.beta[t] * lm.sigma_sq[static_cast<std::size_t>(r - 1)];
  }
  return lm;
}

// Closed forms for the homogeneous model:
//   mu(r)      = alpha (beta^r - 1)/(beta - 1) + beta^r mu0      (r alpha + mu0 when beta = 1)
//   sigma^2(r) = kappa^2 (beta^{2r} - 1)/(beta^2 - 1) + beta^{2r} sigma0^2
//                                                         (r kappa^2 + sigma0^2 when beta^2 = 1)
inline LevelMoments level_moments(const HomogeneousGlgParams& h, int levels) {
  h.validate();
  if (levels < 1) throw std::invalid_argument("level_moments: levels must be >= 1");
  LevelMoments lm;
  lm.mu.resize(static_cast<std::size_t>(levels));
  lm.sigma_sq.resize(static_cast<std::size_t>(levels));
  const double b2 = h.beta * h.beta;
  for (int r = 0; r < levels; ++r) {
    const double br = std::pow(h.beta, r);
    const double b2r = std::pow(b2, r);
    lm.mu[static_cast<std::size_t>(r)] =
        (h.beta == 1.0) ? r * h.alpha + h.mu0 : h.alpha * (br - 1.0) / (h.beta - 1.0) + br * h.mu0;
    lm.sigma_sq[static_cast<std::size_t>(r)] =
        (b2 == 1.0) ? r * h.kappa_sq + h.sigma0_sq
                    : h.kappa_sq * (b2r - 1.0) / (b2 - 1.0) + b2r * h.sigma0_sq;
  }
  return lm;
}

// Cov(s_i, s_j).  Both nodes are climbed to their lowest common ancestor a;
// each step from a node at tree level L to its parent multiplies by
// beta(L-1), and the meeting point contributes Var(s_a).
inline double hidden_covariance(const GlgParams& p, const ForestTopology& topo, int i, int j) {
  if (i < 0 || j < 0 || static_cast<std::size_t>(i) >= topo.nodes() ||
      static_cast<std::size_t>(j) >= topo.nodes())
    throw std::invalid_argument("hidden_covariance: node id out of range");
  if (topo.levels != p.levels)
    throw std::invalid_argument("hidden_covariance: params/topology level mismatch");
  const LevelMoments lm = level_moments(p);

  double prod_i = 1.0, prod_j = 1.0;
  int a = i, b = j;
  auto climb = [&](int node, double& prod) {
    const int r = topo.level_of[static_cast<std::size_t>(node)] - 1;  // transition index
    prod *= p.beta[static_cast<std::size_t>(r - 1)];
    return topo.parent_of[static_cast<std::size_t>(node)];
  };
  while (topo.level_of[static_cast<std::size_t>(a)] > topo.level_of[static_cast<std::size_t>(b)])
    a = climb(a, prod_i);
  while (topo.level_of[static_cast<std::size_t>(b)] > topo.level_of[static_cast<std::size_t>(a)])
    b = climb(b, prod_j);
  while (a != b) {
    a = climb(a, prod_i);
    b = climb(b, prod_j);
  }
  const int r = topo.level_of[static_cast<std::size_t>(a)] - 1;
  return prod_i * prod_j * lm.sigma_sq[static_cast<std::size_t>(r)];
}

// Precision matrix of the hidden field on one tree.  Sparse symmetric with
// nonzeros only on the diagonal and parent-child pairs, stored as the diagonal
// plus one off-diagonal value per non-root node (its entry against the
// parent).  Built from the conditional factorization, so positive definiteness
// is structural.
struct TreePrecision {
  std::vector<double> diag;
  std::vector<double> parent_off;  // parent_off[i] = Delta(i, parent(i)); unused at the root

  Grid dense(const ForestTopology& topo) const {
    const std::size_t n = diag.size();
    Grid m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = diag[i];
    for (std::size_t i = 1; i < n; ++i) {
      const auto parent = static_cast<std::size_t>(topo.parent_of[i]);
      m(i, parent) = parent_off[i];
      m(parent, i) = parent_off[i];
    }
    return m;
  }
};

inline TreePrecision precision_matrix(const GlgParams& p, const ForestTopology& topo) {
  p.validate();
  if (topo.levels != p.levels)
    throw std::invalid_argument("precision_matrix: params/topology level mismatch");
  const std::size_t n = topo.nodes();
  TreePrecision prec;
  prec.diag.assign(n, 0.0);
  prec.parent_off.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int lev = topo.level_of[i];
    const double cond_var = (lev == 1) ? p.sigma0_sq : p.kappa_sq[static_cast<std::size_t>(lev - 2)];
    prec.diag[i] += 1.0 / cond_var;
    if (lev > 1) {
      const double b = p.beta[static_cast<std::size_t>(lev - 2)];
      const double k2 = p.kappa_sq[static_cast<std::size_t>(lev - 2)];
      prec.parent_off[i] = -b / k2;
      prec.diag[static_cast<std::size_t>(topo.parent_of[i])] += b * b / k2;
    }
  }
  return prec;
}

namespace detail {

inline double log_normal_density(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + d * d / var);
}

}  // namespace detail

// log p(s, w | theta) for one tree, with all normalizing constants: the
// Gaussian chain over the states times N(0, exp(s_i)) per coefficient.
inline double joint_log_density(const GlgParams& p, const ForestTopology& topo,
                                std::span<const double> states, std::span<const double> wavelets) {
  p.validate();
  const std::size_t n = topo.nodes();
  if (states.size() != n || wavelets.size() != n)
    throw std::invalid_argument("joint_log_density: state/wavelet rows must have n entries");
  if (topo.levels != p.levels)
    throw std::invalid_argument("joint_log_density: params/topology level mismatch");

  double lp = detail::log_normal_density(states[0], p.mu0, p.sigma0_sq);
  for (std::size_t i = 1; i < n; ++i) {
    const std::size_t t = static_cast<std::size_t>(topo.level_of[i] - 2);
    const double parent_state = states[static_cast<std::size_t>(topo.parent_of[i])];
    lp += detail::log_normal_density(states[i], p.alpha[t] + p.beta[t] * parent_state,
                                     p.kappa_sq[t]);
  }
  const double log_2pi = std::log(2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = wavelets[i];
    const double t = (w == 0.0) ? 0.0 : w * w * std::exp(-states[i]);
    lp += -0.5 * (log_2pi + states[i] + t);
  }
  return lp;
}

// Draws k i.i.d. trees.  Each tree uses its own substream of the seed, so the
// output is identical regardless of evaluation order.  Within a tree, states
// are drawn in node order (root first), then coefficients in node order.
inline std::pair<StateField, WaveletForest> simulate_forest(const GlgParams& p,
                                                            const ForestTopology& topo,
                                                            std::size_t tree_count,
                                                            std::uint64_t seed,
                                                            int threads = 1) {
  p.validate();
  if (topo.levels != p.levels)
    throw std::invalid_argument("simulate_forest: params/topology level mismatch");
  if (tree_count < 1) throw std::invalid_argument("simulate_forest: tree_count must be >= 1");

  const std::size_t n = topo.nodes();
  StateField states(tree_count, n);
  WaveletForest forest;
  forest.topology = topo;
  forest.tree_count = tree_count;
  forest.coefficients.resize(tree_count * n);

  parallel_blocks(tree_count, 256, threads, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t) {
      RngStream rng(seed, t);
      double* s = states.tree(t);
      double* w = forest.tree(t);
      s[0] = p.mu0 + std::sqrt(p.sigma0_sq) * rng.normal();
      for (std::size_t i = 1; i < n; ++i) {
        const std::size_t tr = static_cast<std::size_t>(topo.level_of[i] - 2);
        const double parent_state = s[static_cast<std::size_t>(topo.parent_of[i])];
        s[i] = p.alpha[tr] + p.beta[tr] * parent_state +
               std::sqrt(p.kappa_sq[tr]) * rng.normal();
      }
      for (std::size_t i = 0; i < n; ++i) w[i] = std::exp(0.5 * s[i]) * rng.normal();
    }
  });
  return {std::move(states), std::move(forest)};
}

// Tied coefficient moments at marginal level r (nodes at tree level r+1):
//   eta2  = E[w^2]              = exp(mu(r) + sigma^2(r)/2)
//   eta4  = E[w^4]              = 3 exp(2 mu(r) + 2 sigma^2(r))
//   eta22 = E[w_i^2 w_j^2], i,j distinct siblings        (NaN at r = 0)
//   xi22  = E[w_parent^2 w_child^2] across one edge      (NaN at r = 0)
// The cross moments multiply the marginal product by exp(Cov) of the two
// log-variances: Cov = beta(r)^2 sigma^2(r-1) for siblings and
// beta(r) sigma^2(r-1) for a parent-child pair.
struct TheoreticalMoments {
  double eta2 = 0.0;
  double eta4 = 0.0;
  double eta22 = 0.0;
  double xi22 = 0.0;
};

inline TheoreticalMoments theoretical_moments(const GlgParams& p, int r) {
  p.validate();
  if (r < 0 || r >= p.levels)
    throw std::invalid_argument("theoretical_moments: level out of range");
  const LevelMoments lm = level_moments(p);
  const double mu = lm.mu[static_cast<std::size_t>(r)];
  const double s2 = lm.sigma_sq[static_cast<std::size_t>(r)];

  TheoreticalMoments m;
  m.eta2 = std::exp(mu + 0.5 * s2);
  m.eta4 = 3.0 * std::exp(2.0 * mu + 2.0 * s2);
  if (r == 0) {
    m.eta22 = std::numeric_limits<double>::quiet_NaN();
    m.xi22 = std::numeric_limits<double>::quiet_NaN();
    return m;
  }
  const double b = p.beta[static_cast<std::size_t>(r - 1)];
  const double s2_prev = lm.sigma_sq[static_cast<std::size_t>(r - 1)];
  const double mu_prev = lm.mu[static_cast<std::size_t>(r - 1)];
  m.eta22 = m.eta2 * m.eta2 * std::exp(b * b * s2_prev);
  const double eta2_prev = std::exp(mu_prev + 0.5 * s2_prev);
  m.xi22 = eta2_prev * m.eta2 * std::exp(b * s2_prev);
  return m;
}

}  // namespace glg
