#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace glg {

// Gauss-Hermite rule for the weight exp(-x^2): sum_a w_a f(x_a) ~ integral.
// Exact for polynomials of degree <= 2*order - 1.
struct QuadratureRule {
  int order = 0;
  std::vector<double> nodes;
  std::vector<double> weights;
};

// Golub-Welsch: nodes are the eigenvalues of the symmetric tridiagonal Jacobi
// matrix of the Hermite recurrence (off-diagonal b_i = sqrt(i/2)); the weight
// for node j is sqrt(pi) times the squared first component of its normalized
// eigenvector.  The rule is symmetrized afterwards so that node/weight pairs
// are exactly mirror images and odd orders place a node exactly at zero.
inline QuadratureRule gauss_hermite(int order) {
  if (order < 1 || order > 200)
    throw std::invalid_argument("gauss_hermite: order must be in [1, 200]");

  QuadratureRule rule;
  rule.order = order;
  if (order == 1) {
    rule.nodes = {0.0};
    rule.weights = {std::sqrt(std::numbers::pi)};
    return rule;
  }

  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(order, order);
  for (int i = 1; i < order; ++i) {
    const double b = std::sqrt(static_cast<double>(i) / 2.0);
    jacobi(i, i - 1) = b;
    jacobi(i - 1, i) = b;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi);
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("gauss_hermite: eigen decomposition failed");

  const double sqrt_pi = std::sqrt(std::numbers::pi);
  rule.nodes.resize(static_cast<std::size_t>(order));
  rule.weights.resize(static_cast<std::size_t>(order));
  for (int j = 0; j < order; ++j) {
    rule.nodes[static_cast<std::size_t>(j)] = solver.eigenvalues()(j);
    const double v0 = solver.eigenvectors()(0, j);
    rule.weights[static_cast<std::size_t>(j)] = sqrt_pi * v0 * v0;
  }

  for (int i = 0, j = order - 1; i < j; ++i, --j) {
    const double x = 0.5 * (rule.nodes[static_cast<std::size_t>(j)] -
                            rule.nodes[static_cast<std::size_t>(i)]);
    rule.nodes[static_cast<std::size_t>(i)] = -x;
    rule.nodes[static_cast<std::size_t>(j)] = x;
    const double w = 0.5 * (rule.weights[static_cast<std::size_t>(i)] +
                            rule.weights[static_cast<std::size_t>(j)]);
    rule.weights[static_cast<std::size_t>(i)] = w;
    rule.weights[static_cast<std::size_t>(j)] = w;
  }
  if (order % 2 == 1) rule.nodes[static_cast<std::size_t>(order / 2)] = 0.0;
  return rule;
}

}  // namespace glg
