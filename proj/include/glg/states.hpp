#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "glg/errors.hpp"
#include "glg/estimate.hpp"
#include "glg/model.hpp"
#include "glg/parallel.hpp"
#include "glg/wavelet.hpp"

namespace glg {

// log p(s, w | theta) for one tree up to an additive constant in (s, w):
//   -1/2 [ (s - mu)^T Delta (s - mu) + sum_i (w_i^2 exp(-s_i) + s_i) ].
inline double map_log_posterior(std::span<const double> states, std::span<const double> wavelets,
                                const GlgParams& params, const ForestTopology& topo) {
  const std::size_t n = topo.nodes();
  if (states.size() != n || wavelets.size() != n)
    throw std::invalid_argument("map_log_posterior: rows must have n entries");
  const LevelMoments lm = level_moments(params);
  const TreePrecision prec = precision_matrix(params, topo);

  double quad = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = states[i] - lm.mu[static_cast<std::size_t>(topo.level_of[i] - 1)];
    quad += prec.diag[i] * d * d;
    if (i > 0) {
      const std::size_t parent = static_cast<std::size_t>(topo.parent_of[i]);
      const double dp =
          states[parent] - lm.mu[static_cast<std::size_t>(topo.level_of[parent] - 1)];
      quad += 2.0 * prec.parent_off[i] * d * dp;
    }
  }
  double lik = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = wavelets[i];
    const double t = (w == 0.0) ? 0.0 : w * w * std::exp(-states[i]);
    lik += t + states[i];
  }
  return -0.5 * (quad + lik);
}

struct MapConfig {
  double tol = 1e-8;         // infinity-norm gradient target
  int max_iter = 100;
  double floor_sigmas = 10.0;  // clamp level for (near-)zero coefficients
  int threads = 1;
};

struct MapResult {
  StateField states;
  std::vector<std::uint8_t> converged;  // per tree
  std::vector<std::uint8_t> floored;    // per tree: some state was clamped at the floor
  std::size_t failures = 0;
};

namespace detail {

// One damped Newton solve on a single tree.  The Hessian of the negated
// objective is Delta + diag(w_i^2 exp(-s_i))/2, which is tree-sparse; the
// Newton system is solved exactly by eliminating nodes leaves-to-root (each
// elimination only touches the parent, so there is no fill-in) followed by a
// root-to-leaves back-substitution.
inline bool newton_tree(const ForestTopology& topo, const TreePrecision& prec,
                        std::span<const double> mu, std::span<const double> w, double* s,
                        double tol, int max_iter) {
  const std::size_t n = topo.nodes();
  std::vector<double> w2(n), d(n), grad(n), dd(n), rhs(n), delta(n), trial(n);
  for (std::size_t i = 0; i < n; ++i) w2[i] = w[i] * w[i];

  // gradient = -Delta (s - mu) + (w^2 exp(-s) - 1)/2; the off-diagonal part
  // couples each node with its parent in both directions
  auto gradient = [&](const double* x) {
    double gnorm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d[i] = x[i] - mu[i];
      const double e = (w2[i] == 0.0) ? 0.0 : w2[i] * std::exp(-x[i]);
      grad[i] = -prec.diag[i] * d[i] + 0.5 * (e - 1.0);
      dd[i] = prec.diag[i] + 0.5 * e;
    }
    for (std::size_t i = 1; i < n; ++i) {
      const std::size_t p = static_cast<std::size_t>(topo.parent_of[i]);
      grad[i] -= prec.parent_off[i] * d[p];
      grad[p] -= prec.parent_off[i] * d[i];
    }
    for (std::size_t i = 0; i < n; ++i) gnorm = std::max(gnorm, std::abs(grad[i]));
    return gnorm;
  };

  auto objective = [&](const double* x) {
    double quad = 0.0, lik = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = x[i] - mu[i];
      quad += prec.diag[i] * d * d;
      if (i > 0)
        quad += 2.0 * prec.parent_off[i] * d *
                (x[static_cast<std::size_t>(topo.parent_of[i])] -
                 mu[static_cast<std::size_t>(topo.parent_of[i])]);
      const double t = (w2[i] == 0.0) ? 0.0 : w2[i] * std::exp(-x[i]);
      lik += t + x[i];
    }
    return -0.5 * (quad + lik);
  };

  double f = objective(s);
  for (int it = 0; it < max_iter; ++it) {
    if (gradient(s) < tol) return true;

    // Solve (Delta + diag(e)/2) delta = grad on the tree.
    for (std::size_t i = 0; i < n; ++i) rhs[i] = grad[i];
    for (std::size_t i = n; i-- > 1;) {
      const std::size_t p = static_cast<std::size_t>(topo.parent_of[i]);
      const double o = prec.parent_off[i];
      if (!(dd[i] > 0.0)) return false;
      dd[p] -= o * o / dd[i];
      rhs[p] -= o * rhs[i] / dd[i];
    }
    if (!(dd[0] > 0.0)) return false;
    delta[0] = rhs[0] / dd[0];
    for (std::size_t i = 1; i < n; ++i) {
      const std::size_t p = static_cast<std::size_t>(topo.parent_of[i]);
      delta[i] = (rhs[i] - prec.parent_off[i] * delta[p]) / dd[i];
    }

    // Once the predicted gain of the full step drops below the rounding noise
    // of the objective, the ascent test becomes meaningless; take the plain
    // Newton step (locally convergent on this concave problem) instead.
    double pred = 0.0;
    for (std::size_t i = 0; i < n; ++i) pred += grad[i] * delta[i];
    if (0.5 * pred <= 1e-13 * (1.0 + std::abs(f))) {
      for (std::size_t i = 0; i < n; ++i) s[i] += delta[i];
      f = objective(s);
      continue;
    }

    // Step halving: the objective is strictly concave, so the full step is
    // eventually accepted; damping only guards the far-from-optimum region.
    double step = 1.0;
    bool accepted = false;
    for (int half = 0; half < 60; ++half) {
      for (std::size_t i = 0; i < n; ++i) trial[i] = s[i] + step * delta[i];
      const double ft = objective(trial.data());
      if (ft >= f) {
        for (std::size_t i = 0; i < n; ++i) s[i] = trial[i];
        f = ft;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) return false;
  }
  // Re-check: the last step may have landed within tolerance.
  return gradient(s) < tol;
}

}  // namespace detail

// MAP hidden states per tree: damped Newton from the prior mean on the
// strictly concave log posterior.  Coefficients with |w| below 1e-300 cannot
// pin their state from the likelihood side; their states are clamped at
// mu - floor_sigmas * sigma (per level) when the optimizer drifts below, and
// the tree is flagged.  A tree that fails to converge keeps its last iterate
// and is recorded; other trees are unaffected.
inline MapResult map_states(const WaveletForest& forest, const GlgParams& params,
                            const MapConfig& cfg = {}) {
  params.validate();
  const ForestTopology& topo = forest.topology;
  if (topo.levels != params.levels)
    throw std::invalid_argument("map_states: params/topology level mismatch");
  const std::size_t n = topo.nodes();
  const std::size_t k = forest.tree_count;

  const LevelMoments lm = level_moments(params);
  const TreePrecision prec = precision_matrix(params, topo);
  std::vector<double> mu(n), floor_at(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = static_cast<std::size_t>(topo.level_of[i] - 1);
    mu[i] = lm.mu[r];
    floor_at[i] = lm.mu[r] - cfg.floor_sigmas * std::sqrt(lm.sigma_sq[r]);
  }

  MapResult res;
  res.states = StateField(k, n);
  res.converged.assign(k, 0);
  res.floored.assign(k, 0);

  std::vector<std::size_t> fail_partial((k + 255) / 256, 0);
  parallel_blocks(k, 256, cfg.threads, [&](std::size_t bi, std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t) {
      double* s = res.states.tree(t);
      for (std::size_t i = 0; i < n; ++i) {
        // w^2 exp(-mu) overflows when the prior mean sits far below log(w^2)
        // (degenerate fits can push it there); lifting the start to log(w^2)
        // keeps the objective finite, and the optimum does not depend on the
        // start point.
        const double aw = std::abs(forest.coef(t, i));
        s[i] = (aw >= 1e-300) ? std::max(mu[i], 2.0 * std::log(aw)) : mu[i];
      }
      const bool ok = detail::newton_tree(topo, prec, mu,
                                          std::span<const double>(forest.tree(t), n), s,
                                          cfg.tol, cfg.max_iter);
      res.converged[t] = ok ? 1 : 0;
      if (!ok) ++fail_partial[bi];
      for (std::size_t i = 0; i < n; ++i) {
        if (std::abs(forest.coef(t, i)) < 1e-300 && s[i] < floor_at[i]) {
          s[i] = floor_at[i];
          res.floored[t] = 1;
        }
      }
    }
  });
  for (std::size_t f : fail_partial) res.failures += f;
  return res;
}

}  // namespace glg
