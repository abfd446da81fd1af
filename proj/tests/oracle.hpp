#pragma once

// Independent dense reference implementations used only by the tests.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <boost/math/distributions/fisher_f.hpp>
#include <numbers>
#include <random>

#include <Eigen/Dense>

#include "cremem/cremem.hpp"

namespace oracle {

// −2 restricted log-likelihood built from the explicit marginal covariance
// Ω = σ²(ZΛΛᵀZᵀ + I), with σ² at its REML optimum for this θ.
inline double dense_reml_deviance(const cremem::FitProblem& pb, const Eigen::VectorXd& theta) {
  const Eigen::MatrixXd Z = Eigen::MatrixXd(pb.design.Z());
  const Eigen::MatrixXd Lam = Eigen::MatrixXd(cremem::theta_to_lambda(pb.structure(), theta, pb.design.n_groups()));
  const Eigen::MatrixXd& X = pb.design.X;
  const Eigen::VectorXd& y = pb.y;
  const auto n = static_cast<double>(y.size()), p = static_cast<double>(X.cols());
  const Eigen::MatrixXd ZL = Z * Lam;
  const Eigen::MatrixXd V = ZL * ZL.transpose() + Eigen::MatrixXd::Identity(y.size(), y.size());
  Eigen::LDLT<Eigen::MatrixXd> Vf(V);
  const Eigen::MatrixXd XtViX = X.transpose() * Vf.solve(X);
  const Eigen::VectorXd beta = XtViX.ldlt().solve(X.transpose() * Vf.solve(y));
  const Eigen::VectorXd r = y - X * beta;
  const double sigma2 = r.dot(Vf.solve(r)) / (n - p);
  const Eigen::MatrixXd Omega = sigma2 * V;
  Eigen::LLT<Eigen::MatrixXd> Of(Omega);
  const double logdet_omega = 2.0 * Eigen::MatrixXd(Of.matrixL()).diagonal().array().log().sum();
  const Eigen::MatrixXd XtOiX = X.transpose() * Of.solve(X);
  Eigen::LLT<Eigen::MatrixXd> Xf(XtOiX);
  const double logdet_x = 2.0 * Eigen::MatrixXd(Xf.matrixL()).diagonal().array().log().sum();
  const double quad = r.dot(Of.solve(r));
  return logdet_omega + logdet_x + quad + (n - p) * std::log(2.0 * std::numbers::pi);
}

struct Classical {
  double F, df1, df2, p;
};

inline double upper(double F, double d1, double d2) {
  return boost::math::cdf(boost::math::complement(boost::math::fisher_f_distribution<double>(d1, d2), F));
}

// Textbook split-plot ANOVA from cell means: subjects nested in g groups,
// crossed with an a-level within factor, r replicates per cell.
inline std::map<std::string, Classical> split_plot_anova(const cremem::Dataset& d, int g) {
  const auto& y = d.numeric("y");
  const auto& pt = d.categorical("PT").codes;
  const auto& am = d.categorical("Am").codes;
  const int n = d.categorical("PT").n_levels(), a = d.categorical("Am").n_levels();
  std::vector<int> grp(static_cast<std::size_t>(n), 0);
  if (g > 1) {
    const auto& ap = d.categorical("Ap").codes;
    for (std::size_t i = 0; i < y.size(); ++i) grp[static_cast<std::size_t>(pt[i])] = ap[i];
  }
  Eigen::MatrixXd cell = Eigen::MatrixXd::Zero(n, a), cnt = Eigen::MatrixXd::Zero(n, a);
  for (std::size_t i = 0; i < y.size(); ++i) cell(pt[i], am[i]) += y[i], cnt(pt[i], am[i]) += 1;
  const double r = cnt(0, 0);
  cell.array() /= cnt.array();
  double sse = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) sse += std::pow(y[i] - cell(pt[i], am[i]), 2);
  const Eigen::VectorXd subj = cell.rowwise().mean();
  const double grand = cell.mean();
  Eigen::MatrixXd gcell = Eigen::MatrixXd::Zero(g, a);
  Eigen::VectorXd gsize = Eigen::VectorXd::Zero(g);
  for (int i = 0; i < n; ++i) gcell.row(grp[i]) += cell.row(i), gsize[grp[i]] += 1;
  for (int k = 0; k < g; ++k) gcell.row(k) /= gsize[k];
  const Eigen::VectorXd gmean = gcell.rowwise().mean();
  const Eigen::RowVectorXd lmean = cell.colwise().mean();
  double ss_b = 0, ss_sb = 0, ss_a = 0, ss_ab = 0, ss_as = 0;
  for (int i = 0; i < n; ++i) {
    const int k = grp[i];
    ss_b += a * r * std::pow(gmean[k] - grand, 2);
    ss_sb += a * r * std::pow(subj[i] - gmean[k], 2);
    for (int j = 0; j < a; ++j) {
      ss_ab += r * std::pow(gcell(k, j) - gmean[k] - lmean[j] + grand, 2);
      ss_as += r * std::pow(cell(i, j) - subj[i] - gcell(k, j) + gmean[k], 2);
    }
  }
  for (int j = 0; j < a; ++j) ss_a += n * r * std::pow(lmean[j] - grand, 2);
  const double df_sb = n - g, df_as = (a - 1.0) * (n - g);
  std::map<std::string, Classical> out;
  auto add = [&](const std::string& key, double ss, double df1, double ss_den, double df2) {
    const double F = (ss / df1) / (ss_den / df2);
    out[key] = {F, df1, df2, upper(F, df1, df2)};
  };
  add("Am", ss_a, a - 1.0, ss_as, df_as);
  if (g > 1) {
    add("Ap", ss_b, g - 1.0, ss_sb, df_sb);
    add("Ap:Am", ss_ab, (g - 1.0) * (a - 1.0), ss_as, df_as);
  }
  // Interior REML solution needs both strata above the residual.
  const double ms_e = sse / (static_cast<double>(y.size()) - n * a);
  out["_interior"] = {(ss_sb / df_sb > ms_e && ss_as / df_as > ms_e) ? 1.0 : 0.0, 0, 0, 0};
  return out;
}

}  // namespace oracle
