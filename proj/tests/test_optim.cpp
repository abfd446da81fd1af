#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "cremem/optim.hpp"

using namespace cremem;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double rosenbrock(const Eigen::VectorXd& x) {
  double s = 0.0;
  for (Eigen::Index i = 0; i + 1 < x.size(); ++i)
    s += 100.0 * std::pow(x[i + 1] - x[i] * x[i], 2) + std::pow(1.0 - x[i], 2);
  return s;
}

const OptimizerKind kAll[] = {OptimizerKind::BoundedQuadraticApprox, OptimizerKind::NelderMead,
                              OptimizerKind::BoundedQuasiNewton};

}  // namespace

TEST(Optim, UnconstrainedQuadratic) {
  // f = (x-a)ᵀ A (x-a) with an ill-conditioned SPD A.
  Eigen::MatrixXd A(4, 4);
  A << 10, 2, 0, 1, 2, 5, 1, 0, 0, 1, 2, 0.5, 1, 0, 0.5, 1;
  Eigen::VectorXd a(4);
  a << 0.3, -1.2, 2.0, 0.7;
  auto f = [&](const Eigen::VectorXd& x) { return (x - a).dot(A * (x - a)); };
  const Eigen::VectorXd lo = Eigen::VectorXd::Constant(4, -kInf), hi = Eigen::VectorXd::Constant(4, kInf);
  for (auto k : kAll) {
    const auto r = run_optimizer(k, f, Eigen::VectorXd::Zero(4), lo, hi);
    EXPECT_TRUE(r.success) << to_string(k) << " " << r.message;
    EXPECT_LT((r.x - a).norm(), 1e-4) << to_string(k);
    EXPECT_LT(r.f, 1e-8) << to_string(k);
  }
}

TEST(Optim, ActiveLowerBound) {
  // Unconstrained minimum at (-1, 2); bound x0 >= 0 is active.
  auto f = [](const Eigen::VectorXd& x) { return std::pow(x[0] + 1.0, 2) + std::pow(x[1] - 2.0, 2) + 0.5 * x[0] * x[1]; };
  Eigen::VectorXd lo(2), hi(2), x0(2);
  lo << 0.0, -kInf;
  hi << kInf, kInf;
  x0 << 1.0, 1.0;
  for (auto k : kAll) {
    const auto r = run_optimizer(k, f, x0, lo, hi);
    EXPECT_TRUE(r.success) << to_string(k);
    EXPECT_GE(r.x[0], 0.0);
    EXPECT_NEAR(r.x[0], 0.0, 1e-5) << to_string(k);
    EXPECT_NEAR(r.x[1], 2.0, 1e-4) << to_string(k);
  }
}

TEST(Optim, BoxedRosenbrock) {
  const Eigen::VectorXd lo = Eigen::VectorXd::Zero(3), hi = Eigen::VectorXd::Constant(3, kInf);
  Eigen::VectorXd x0(3);
  x0 << 0.5, 0.1, 1.5;
  const auto r = bobyqa(rosenbrock, x0, lo, hi);
  EXPECT_TRUE(r.success);
  EXPECT_LT((r.x - Eigen::VectorXd::Ones(3)).norm(), 1e-4);
}

TEST(Optim, LargerProblemWithManyBounds) {
  // Sum of shifted quadratics where half the minima lie below the bound.
  const int n = 30;
  Eigen::VectorXd c(n);
  for (int i = 0; i < n; ++i) c[i] = (i % 2 ? 1.0 : -1.0) * (0.2 + 0.05 * i);
  auto f = [&](const Eigen::VectorXd& x) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += (1.0 + i % 5) * std::pow(x[i] - c[i], 2);
    for (int i = 0; i + 1 < n; ++i) s += 0.1 * x[i] * x[i + 1];
    return s;
  };
  const Eigen::VectorXd lo = Eigen::VectorXd::Zero(n), hi = Eigen::VectorXd::Constant(n, kInf);
  const auto r = bobyqa(f, Eigen::VectorXd::Ones(n), lo, hi);
  const auto q = projected_bfgs(f, Eigen::VectorXd::Ones(n), lo, hi);
  EXPECT_TRUE(r.success);
  EXPECT_NEAR(r.f, q.f, 1e-8);
  EXPECT_GE(r.x.minCoeff(), 0.0);
}

TEST(Optim, BudgetExhaustionIsReported) {
  OptimOptions o;
  o.max_evals = 30;
  Eigen::VectorXd x0 = Eigen::VectorXd::Constant(4, -1.0);
  const Eigen::VectorXd lo = Eigen::VectorXd::Constant(4, -kInf), hi = Eigen::VectorXd::Constant(4, kInf);
  for (auto k : kAll) {
    const auto r = run_optimizer(k, rosenbrock, x0, lo, hi, o);
    EXPECT_FALSE(r.success) << to_string(k);
    EXPECT_LE(r.n_evals, 30 + 10) << to_string(k);
  }
}

TEST(Optim, NonFiniteValuesAreAvoided) {
  // Undefined left of x = 0.1; the minimum at 0.5 is reachable from 1.
  auto f = [](const Eigen::VectorXd& x) {
    if (x[0] < 0.1) return std::numeric_limits<double>::quiet_NaN();
    return std::pow(x[0] - 0.5, 2) + std::pow(x[1], 2);
  };
  Eigen::VectorXd x0(2);
  x0 << 1.0, 1.0;
  const Eigen::VectorXd lo = Eigen::VectorXd::Constant(2, -kInf), hi = Eigen::VectorXd::Constant(2, kInf);
  for (auto k : kAll) {
    const auto r = run_optimizer(k, f, x0, lo, hi);
    EXPECT_NEAR(r.x[0], 0.5, 1e-4) << to_string(k);
  }
}

TEST(Optim, ZeroDimensional) {
  auto f = [](const Eigen::VectorXd&) { return 3.0; };
  for (auto k : kAll) {
    const auto r = run_optimizer(k, f, Eigen::VectorXd(0), Eigen::VectorXd(0), Eigen::VectorXd(0));
    EXPECT_TRUE(r.success);
    EXPECT_EQ(r.f, 3.0);
  }
}
