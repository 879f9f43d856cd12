#pragma once

// Limited-memory BFGS with a strong-Wolfe line search (two-loop recursion,
// textbook constants). Small and dependency-free; used by the pose solver.

#include <Eigen/Dense>
#include <functional>
#include <vector>

namespace dust {

struct LbfgsOptions {
  int memory = 10;
  int max_iterations = 200;
  double grad_inf_tolerance = 1e-9;
  double c1 = 1e-4;  // sufficient decrease
  double c2 = 0.9;   // curvature
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double value = 0.0;
  bool converged = false;
  int iterations = 0;
  std::vector<double> objective_history;  // value at each accepted iterate
};

/// Minimizes f; `func` returns the value and fills the gradient.
LbfgsResult lbfgs_minimize(
    const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& func,
    const Eigen::VectorXd& x0, const LbfgsOptions& options = {});

}  // namespace dust
