#pragma once

#include <cmath>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "cremem/errors.hpp"

namespace cremem {

enum class ContrastKind { Sum, OrthonormalPolynomial, Identity };

inline std::string_view to_string(ContrastKind k) {
  switch (k) {
    case ContrastKind::Sum: return "sum";
    case ContrastKind::OrthonormalPolynomial: return "poly";
    case ContrastKind::Identity: return "identity";
  }
  return "?";
}

struct ContrastMatrix {
  int n_levels = 0;
  ContrastKind kind = ContrastKind::Identity;
  Eigen::MatrixXd values;

  int n_columns() const { return static_cast<int>(values.cols()); }
};

namespace detail {

// Orthonormal polynomial scores over equally spaced levels, same layout as
// R's contr.poly: Householder QR of the centred Vandermonde matrix, with the
// sign of each column fixed so its leading coefficient is positive.
inline Eigen::MatrixXd orthonormal_poly(int n) {
  Eigen::MatrixXd V(n, n);
  const double mid = (n - 1) / 2.0;
  const double half = n > 1 ? mid : 1.0;
  for (int i = 0; i < n; ++i) {
    const double x = (i - mid) / half;
    double p = 1.0;
    for (int j = 0; j < n; ++j) {
      V(i, j) = p;
      p *= x;
    }
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(V);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd R = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j)
    if (R(j, j) < 0) Q.col(j) = -Q.col(j);
  return Q.rightCols(n - 1);
}

}  // namespace detail

inline ContrastMatrix make_contrast(int n_levels, ContrastKind kind) {
  if (kind == ContrastKind::Identity) {
    if (n_levels < 1) throw InvalidLevels("identity coding needs at least 1 level");
    return {n_levels, kind, Eigen::MatrixXd::Identity(n_levels, n_levels)};
  }
  if (n_levels < 2) throw InvalidLevels("contrast coding needs at least 2 levels, got " + std::to_string(n_levels));
  if (kind == ContrastKind::Sum) {
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(n_levels, n_levels - 1);
    for (int j = 0; j < n_levels - 1; ++j) {
      C(j, j) = 1.0;
      C(n_levels - 1, j) = -1.0;
    }
    return {n_levels, kind, C};
  }
  return {n_levels, kind, detail::orthonormal_poly(n_levels)};
}

// Returns a with C Cᵀ = I − a·11ᵀ. For a complete zero-sum orthonormal
// basis of n levels this is 1/n.
inline double contrast_gram_identity(const ContrastMatrix& C, double tol = 1e-10) {
  const int n = C.n_levels;
  const Eigen::MatrixXd& M = C.values;
  if (M.rows() != n || M.cols() != n - 1) throw NotOrthonormal("contrast is not an n x (n-1) basis");
  const Eigen::MatrixXd ctc = M.transpose() * M;
  if ((ctc - Eigen::MatrixXd::Identity(n - 1, n - 1)).cwiseAbs().maxCoeff() > tol)
    throw NotOrthonormal("contrast columns are not orthonormal");
  const Eigen::MatrixXd G = M * M.transpose();
  const double a = 1.0 - G(0, 0);
  const Eigen::MatrixXd target =
      Eigen::MatrixXd::Identity(n, n) - a * Eigen::MatrixXd::Ones(n, n);
  if ((G - target).cwiseAbs().maxCoeff() > tol)
    throw NotOrthonormal("C Ct is not of the form I - a 11t");
  return a;
}

inline bool is_orthonormal_zero_sum(const Eigen::MatrixXd& C, double tol = 1e-12) {
  const Eigen::MatrixXd ctc = C.transpose() * C;
  if ((ctc - Eigen::MatrixXd::Identity(C.cols(), C.cols())).cwiseAbs().maxCoeff() > tol) return false;
  return C.colwise().sum().cwiseAbs().maxCoeff() <= tol;
}

}  // namespace cremem
