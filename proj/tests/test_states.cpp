#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "glg/model.hpp"
#include "glg/rng.hpp"
#include "glg/states.hpp"
#include "glg/wavelet.hpp"
#include "oracle.hpp"

using namespace glg;
using Catch::Matchers::WithinAbs;

namespace {

GlgParams canonical3() {
  GlgParams p;
  p.levels = 3;
  p.mu0 = -0.5;
  p.sigma0_sq = 1.3;
  p.alpha = {0.2, -0.1};
  p.beta = {0.7, 0.5};
  p.kappa_sq = {0.6, 0.4};
  return p;
}

// infinity norm of the posterior gradient at s
double grad_norm(const GlgParams& p, const ForestTopology& topo, const double* s,
                 const double* w) {
  const LevelMoments lm = level_moments(p);
  const TreePrecision prec = precision_matrix(p, topo);
  const std::size_t n = topo.nodes();
  double gmax = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double mu_i = lm.mu[static_cast<std::size_t>(topo.level_of[i] - 1)];
    const double e = (w[i] == 0.0) ? 0.0 : w[i] * w[i] * std::exp(-s[i]);
    double g = -prec.diag[i] * (s[i] - mu_i) + 0.5 * (e - 1.0);
    for (std::size_t j = 1; j < n; ++j) {
      const auto parent = static_cast<std::size_t>(topo.parent_of[j]);
      const double dj = s[j] - lm.mu[static_cast<std::size_t>(topo.level_of[j] - 1)];
      const double dp = s[parent] - lm.mu[static_cast<std::size_t>(topo.level_of[parent] - 1)];
      if (j == i) g -= prec.parent_off[j] * dp;
      if (parent == i) g -= prec.parent_off[j] * dj;
    }
    gmax = std::max(gmax, std::abs(g));
  }
  return gmax;
}

}  // namespace

TEST_CASE("MAP states satisfy the first-order conditions") {
  const GlgParams p = canonical3();
  const ForestTopology topo = ForestTopology::quadtree(3);
  const auto [truth, forest] = simulate_forest(p, topo, 200, 7);
  const MapResult res = map_states(forest, p);
  CHECK(res.failures == 0);
  for (std::size_t t = 0; t < forest.tree_count; ++t) {
    REQUIRE(res.converged[t] == 1);
    CHECK(grad_norm(p, topo, res.states.tree(t), forest.tree(t)) < 1e-8);
  }
}

TEST_CASE("single-node MAP matches a bisection oracle") {
  GlgParams p;
  p.levels = 1;
  p.mu0 = -0.4;
  p.sigma0_sq = 1.2;
  const ForestTopology topo = ForestTopology::quadtree(1);
  for (double w : {1e-3, 0.5, 2.0, 10.0}) {
    WaveletForest f;
    f.topology = topo;
    f.tree_count = 1;
    f.coefficients = {w};
    MapConfig cfg;
    cfg.tol = 1e-12;
    const MapResult res = map_states(f, p, cfg);
    REQUIRE(res.converged[0] == 1);

    auto g = [&](double s) {
      return -(s - p.mu0) / p.sigma0_sq + 0.5 * (w * w * std::exp(-s) - 1.0);
    };
    double lo = p.mu0 - 40.0, hi = p.mu0 + 40.0;
    REQUIRE(g(lo) > 0.0);
    REQUIRE(g(hi) < 0.0);
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (g(mid) > 0.0 ? lo : hi) = mid;
    }
    INFO("w=" << w);
    CHECK_THAT(res.states.at(0, 0), WithinAbs(0.5 * (lo + hi), 1e-10));
  }
}

TEST_CASE("tree-sparse Newton equals the dense oracle") {
  const GlgParams p = canonical3();
  const ForestTopology topo = ForestTopology::quadtree(3);
  const auto [truth, forest] = simulate_forest(p, topo, 20, 99);
  MapConfig cfg;
  cfg.tol = 1e-10;
  const MapResult res = map_states(forest, p, cfg);
  for (std::size_t t = 0; t < forest.tree_count; ++t) {
    REQUIRE(res.converged[t] == 1);
    const std::vector<double> dense = oracle::dense_map(p, topo, forest.tree(t), 1e-10, 200);
    double diff = 0.0;
    for (std::size_t i = 0; i < topo.nodes(); ++i)
      diff = std::max(diff, std::abs(res.states.at(t, i) - dense[i]));
    INFO("tree " << t);
    CHECK(diff < 1e-8);
  }
}

TEST_CASE("negated Hessian at the optimum is positive definite") {
  const GlgParams p = canonical3();
  const ForestTopology topo = ForestTopology::quadtree(3);
  const auto [truth, forest] = simulate_forest(p, topo, 5, 31);
  const MapResult res = map_states(forest, p);
  const Eigen::MatrixXd delta = oracle::dense_precision(p, topo);
  for (std::size_t t = 0; t < forest.tree_count; ++t) {
    Eigen::MatrixXd h = delta;
    for (std::size_t i = 0; i < topo.nodes(); ++i) {
      const double w = forest.coef(t, i);
      h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) +=
          0.5 * w * w * std::exp(-res.states.at(t, i));
    }
    Eigen::LLT<Eigen::MatrixXd> llt(h);
    CHECK(llt.info() == Eigen::Success);
  }
}

TEST_CASE("posterior value at the MAP dominates the prior mean") {
  const GlgParams p = canonical3();
  const ForestTopology topo = ForestTopology::quadtree(3);
  const auto [truth, forest] = simulate_forest(p, topo, 100, 13);
  const MapResult res = map_states(forest, p);
  const LevelMoments lm = level_moments(p);
  std::vector<double> mu(topo.nodes());
  for (std::size_t i = 0; i < topo.nodes(); ++i)
    mu[i] = lm.mu[static_cast<std::size_t>(topo.level_of[i] - 1)];
  for (std::size_t t = 0; t < forest.tree_count; ++t) {
    const std::span<const double> w(forest.tree(t), topo.nodes());
    const std::span<const double> s(res.states.tree(t), topo.nodes());
    CHECK(map_log_posterior(s, w, p, topo) >= map_log_posterior(mu, w, p, topo));
  }
}

TEST_CASE("objective differs from the joint density by a constant in s") {
  const GlgParams p = canonical3();
  const ForestTopology topo = ForestTopology::quadtree(2);
  GlgParams p2 = p;
  p2.levels = 2;
  p2.alpha.resize(1);
  p2.beta.resize(1);
  p2.kappa_sq.resize(1);
  const std::size_t n = topo.nodes();
  RngStream rng(5, 0);
  std::vector<double> w(n);
  for (double& v : w) v = rng.normal();
  double first = 0.0;
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> s(n);
    for (double& v : s) v = rng.normal();
    const double diff = map_log_posterior(s, w, p2, topo) - joint_log_density(p2, topo, s, w);
    if (rep == 0)
      first = diff;
    else
      CHECK_THAT(diff, WithinAbs(first, 1e-10));
  }
}

TEST_CASE("objective is concave along random segments") {
  const GlgParams p = canonical3();
  const ForestTopology topo = ForestTopology::quadtree(3);
  const auto [truth, forest] = simulate_forest(p, topo, 1, 17);
  const std::size_t n = topo.nodes();
  const std::span<const double> w(forest.tree(0), n);
  RngStream rng(23, 0);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> a(n), b(n), mid(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = 2.0 * rng.normal();
      b[i] = 2.0 * rng.normal();
      mid[i] = 0.5 * (a[i] + b[i]);
    }
    const double fa = map_log_posterior(a, w, p, topo);
    const double fb = map_log_posterior(b, w, p, topo);
    const double fm = map_log_posterior(mid, w, p, topo);
    CHECK(fm >= 0.5 * (fa + fb) - 1e-12);
  }
}

TEST_CASE("all-zero coefficients: finite stationary point of the limiting system") {
  const GlgParams p = canonical3();
  const ForestTopology topo = ForestTopology::quadtree(3);
  WaveletForest f;
  f.topology = topo;
  f.tree_count = 1;
  f.coefficients.assign(topo.nodes(), 0.0);
  const MapResult res = map_states(f, p);
  REQUIRE(res.converged[0] == 1);
  CHECK(res.floored[0] == 0);
  CHECK(grad_norm(p, topo, res.states.tree(0), f.tree(0)) < 1e-8);
  // moderate variances keep the w = 0 mode well above the clamp level
  const LevelMoments lm = level_moments(p);
  for (std::size_t i = 0; i < topo.nodes(); ++i) {
    const std::size_t r = static_cast<std::size_t>(topo.level_of[i] - 1);
    CHECK(res.states.at(0, i) > lm.mu[r] - 10.0 * std::sqrt(lm.sigma_sq[r]));
    CHECK(res.states.at(0, i) < lm.mu[r]);
  }
}

TEST_CASE("extreme prior variance triggers the state floor") {
  GlgParams p;
  p.levels = 1;
  p.mu0 = 0.0;
  p.sigma0_sq = 2500.0;  // w = 0 mode at mu0 - sigma0_sq/2, far below mu0 - 10 sigma0
  const ForestTopology topo = ForestTopology::quadtree(1);
  WaveletForest f;
  f.topology = topo;
  f.tree_count = 1;
  f.coefficients = {0.0};
  const MapResult res = map_states(f, p);
  CHECK(res.floored[0] == 1);
  CHECK_THAT(res.states.at(0, 0), WithinAbs(-10.0 * 50.0, 1e-9));
}

TEST_CASE("MAP estimation is deterministic across thread counts") {
  const GlgParams p = canonical3();
  const auto [truth, forest] = simulate_forest(p, ForestTopology::quadtree(3), 600, 41);
  const MapResult a = map_states(forest, p);
  MapConfig cfg;
  cfg.threads = 3;
  const MapResult b = map_states(forest, p, cfg);
  CHECK(a.states.values == b.states.values);
  CHECK(a.converged == b.converged);
}

TEST_CASE("input validation") {
  const GlgParams p = canonical3();
  const auto [truth, forest] = simulate_forest(p, ForestTopology::quadtree(3), 2, 3);
  GlgParams p2 = p;
  p2.levels = 2;
  p2.alpha.resize(1);
  p2.beta.resize(1);
  p2.kappa_sq.resize(1);
  CHECK_THROWS_AS(map_states(forest, p2), std::invalid_argument);

  std::vector<double> s(forest.topology.nodes(), 0.0);
  std::vector<double> short_w(3, 0.0);
  CHECK_THROWS_AS(map_log_posterior(s, short_w, p, forest.topology), std::invalid_argument);
}
