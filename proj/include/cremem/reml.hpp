#pragma once

// Profiled REML deviance and its minimization.
//
// With Λ(θ) block diagonal per unit (I_g ⊗ T_u) and V = ZΛΛᵀZᵀ + I, the
// criterion is
//   log|A| + log|R_X|² + (n−p)(1 + log(2π r²/(n−p))),  A = ΛᵀZᵀZΛ + I,
// where R_XᵀR_X = XᵀV⁻¹X and r² is the penalized residual sum of squares.
//
// A is factored blockwise: the unit with the most columns ("pivot") has a
// block-diagonal part with one small dense block per group; the remaining
// units form a dense Schur complement. [X y] rides along as extra
// right-hand sides, so one pass gives log|A|, XᵀV⁻¹X, XᵀV⁻¹y and yᵀV⁻¹y.

#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cremem/covariance.hpp"
#include "cremem/dataset.hpp"
#include "cremem/design.hpp"
#include "cremem/errors.hpp"
#include "cremem/formula.hpp"
#include "cremem/optim.hpp"

namespace cremem {

struct FitProblem {
  ModelSpec spec;
  std::shared_ptr<const Dataset> data;
  ContrastOverrides overrides;
  DesignMatrices design;
  Eigen::VectorXd y;

  const CovStructure& structure() const { return design.structure; }
  Eigen::Index n_obs() const { return y.size(); }
  Eigen::Index p() const { return design.p(); }
};

inline void check_fixed_rank(const Eigen::MatrixXd& X) {
  Eigen::LLT<Eigen::MatrixXd> llt(X.transpose() * X);
  const Eigen::VectorXd d = llt.matrixLLT().diagonal();
  if (llt.info() != Eigen::Success || d.minCoeff() <= 1e-10 * d.maxCoeff())
    throw SingularFixedDesign("fixed-effect design matrix is rank deficient (empty cells?)");
}

inline FitProblem make_problem(const ModelSpec& spec, std::shared_ptr<const Dataset> data,
                               const CovStructure& structure, const ContrastOverrides& overrides = {}) {
  FitProblem pb;
  pb.spec = spec;
  const auto order = data->canonical_order();
  bool sorted = true;
  for (std::size_t i = 0; i < order.size() && sorted; ++i) sorted = order[i] == i;
  pb.data = sorted ? std::move(data) : std::make_shared<const Dataset>(data->permuted(order));
  pb.overrides = overrides;
  pb.design = build_design(spec, *pb.data, structure, overrides);
  if (!pb.data->has(spec.response)) throw MissingColumn(spec.response);
  if (!pb.data->is_numeric(spec.response)) throw DataError("response '" + spec.response + "' is not numeric");
  const auto& y = pb.data->numeric(spec.response);
  pb.y = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  if (!pb.y.allFinite()) throw DataError("response has non-finite values");
  if (pb.n_obs() <= pb.p()) throw SingularFixedDesign("need more observations than fixed-effect columns");
  check_fixed_rank(pb.design.X);
  return pb;
}

inline FitProblem make_problem(const ModelSpec& spec, const Dataset& data, const CovFamily& family,
                               const ContrastOverrides& overrides = {}) {
  return make_problem(spec, std::make_shared<const Dataset>(data), realize(spec, family), overrides);
}

struct Evaluation {
  double deviance = std::numeric_limits<double>::infinity();
  Eigen::VectorXd beta;
  double sigma2 = 0.0;
  double r2 = 0.0;
  double logdet_A = 0.0;
  double logdet_RX = 0.0;
  Eigen::MatrixXd XtVinvX;  // Mxx: Var(β̂) = σ² Mxx⁻¹
};

class DevianceEvaluator {
 public:
  explicit DevianceEvaluator(const FitProblem& pb) : cs_(pb.structure()) {
    const auto& dm = pb.design;
    n_ = pb.n_obs();
    p_ = pb.p();
    // The deviance is unchanged by y -> y - Xb. Taking out a QR least-squares
    // fit first keeps the cross-products on the scale of the residuals, so r²
    // does not cancel away when the data are nearly explained by X.
    b0_ = dm.X.colPivHouseholderQr().solve(pb.y);
    Eigen::MatrixXd XY(n_, p_ + 1);
    XY << dm.X, pb.y - dm.X * b0_;
    XYtXY_ = XY.transpose() * XY;
    check_fixed_rank(dm.X);
    const int U = static_cast<int>(dm.units.size());
    if (U == 0) return;

    pivot_ = choose_pivot(dm);
    const auto& up = dm.units[static_cast<std::size_t>(pivot_)];
    dP_ = up.dim;
    int off = 0;
    off_r_.assign(static_cast<std::size_t>(U), -1);
    for (int u = 0; u < U; ++u) {
      if (u == pivot_) continue;
      off_r_[static_cast<std::size_t>(u)] = off;
      off += dm.units[static_cast<std::size_t>(u)].n_groups * dm.units[static_cast<std::size_t>(u)].dim;
    }
    qR_ = off;

    G_.assign(static_cast<std::size_t>(up.n_groups), Eigen::MatrixXd::Zero(dP_, dP_));
    F_.assign(static_cast<std::size_t>(up.n_groups), Eigen::MatrixXd::Zero(dP_, p_ + 1));
    cross_.assign(static_cast<std::size_t>(up.n_groups), {});
    std::vector<std::map<int, std::size_t>> where(static_cast<std::size_t>(up.n_groups));
    ZRtZR_ = Eigen::MatrixXd::Zero(qR_, qR_);
    FR_ = Eigen::MatrixXd::Zero(qR_, p_ + 1);

    for (Eigen::Index obs = 0; obs < n_; ++obs) {
      const auto i = static_cast<std::size_t>(up.group[static_cast<std::size_t>(obs)]);
      const Eigen::VectorXd cP = up.codes.row(obs).transpose();
      const Eigen::RowVectorXd xy = XY.row(obs);
      G_[i].noalias() += cP * cP.transpose();
      F_[i].noalias() += cP * xy;
      for (int v = 0; v < U; ++v) {
        if (v == pivot_) continue;
        const auto& uv = dm.units[static_cast<std::size_t>(v)];
        const int col = col_of(dm, v, obs);
        const Eigen::VectorXd cv = uv.codes.row(obs).transpose();
        auto it = where[i].find(col);
        if (it == where[i].end()) {
          it = where[i].emplace(col, cross_[i].size()).first;
          cross_[i].push_back({col, v, Eigen::MatrixXd::Zero(dP_, uv.dim)});
        }
        cross_[i][it->second].K.noalias() += cP * cv.transpose();
        FR_.middleRows(col, uv.dim).noalias() += cv * xy;
        for (int w = 0; w < U; ++w) {
          if (w == pivot_) continue;
          const auto& uw = dm.units[static_cast<std::size_t>(w)];
          const int colw = col_of(dm, w, obs);
          ZRtZR_.block(col, colw, uv.dim, uw.dim).noalias() += cv * uw.codes.row(obs);
        }
      }
    }
    for (int u = 0; u < U; ++u) {
      if (u == pivot_) continue;
      r_units_.push_back({u, off_r_[static_cast<std::size_t>(u)], dm.units[static_cast<std::size_t>(u)].n_groups,
                          dm.units[static_cast<std::size_t>(u)].dim});
    }
  }

  Eigen::Index n_obs() const { return n_; }
  Eigen::Index p() const { return p_; }
  const CovStructure& structure() const { return cs_; }

  Evaluation evaluate(const Eigen::VectorXd& theta, bool check_domain = true) const {
    const auto T = cs_.relative_factors(theta, check_domain);
    Eigen::MatrixXd M = XYtXY_;
    double logdet = 0.0;

    if (!cs_.units.empty()) {
      const Eigen::MatrixXd& TP = T[static_cast<std::size_t>(pivot_)];
      Eigen::MatrixXd S = ZRtZR_;
      Eigen::MatrixXd rhsR = FR_;
      for (const auto& ru : r_units_) {
        const Eigen::MatrixXd& Tv = T[static_cast<std::size_t>(ru.unit)];
        for (int h = 0; h < ru.n_groups; ++h) {
          const int c = ru.offset + h * ru.dim;
          S.middleCols(c, ru.dim) = S.middleCols(c, ru.dim) * Tv;
          rhsR.middleRows(c, ru.dim) = Tv.transpose() * rhsR.middleRows(c, ru.dim);
        }
      }
      for (const auto& ru : r_units_) {
        const Eigen::MatrixXd& Tv = T[static_cast<std::size_t>(ru.unit)];
        for (int h = 0; h < ru.n_groups; ++h) {
          const int c = ru.offset + h * ru.dim;
          S.middleRows(c, ru.dim) = Tv.transpose() * S.middleRows(c, ru.dim);
        }
      }
      S.diagonal().array() += 1.0;

      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(dP_, dP_);
      std::vector<Eigen::MatrixXd> W;
      for (std::size_t i = 0; i < G_.size(); ++i) {
        Eigen::MatrixXd A = TP.transpose() * G_[i] * TP + I;
        Eigen::LLT<Eigen::MatrixXd> llt(A);
        if (llt.info() != Eigen::Success) throw FactorizationFailure("pivot block not positive definite");
        const auto L = llt.matrixL();
        logdet += 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        const Eigen::MatrixXd c1 = L.solve(TP.transpose() * F_[i]);
        M.noalias() -= c1.transpose() * c1;
        const auto& blocks = cross_[i];
        W.resize(blocks.size());
        for (std::size_t b = 0; b < blocks.size(); ++b)
          W[b] = L.solve(TP.transpose() * blocks[b].K * T[static_cast<std::size_t>(blocks[b].unit)]);
        for (std::size_t a = 0; a < blocks.size(); ++a) {
          const auto da = W[a].cols();
          rhsR.middleRows(blocks[a].col, da).noalias() -= W[a].transpose() * c1;
          for (std::size_t b = 0; b < blocks.size(); ++b) {
            if (blocks[b].col > blocks[a].col) continue;
            S.block(blocks[a].col, blocks[b].col, da, W[b].cols()).noalias() -= W[a].transpose() * W[b];
          }
        }
      }
      if (qR_ > 0) {
        Eigen::LLT<Eigen::MatrixXd> lltS(S);
        if (lltS.info() != Eigen::Success) throw FactorizationFailure("Schur complement not positive definite");
        logdet += 2.0 * lltS.matrixLLT().diagonal().array().log().sum();
        const Eigen::MatrixXd cR = lltS.matrixL().solve(rhsR);
        M.noalias() -= cR.transpose() * cR;
      }
    }

    Evaluation ev;
    ev.logdet_A = logdet;
    ev.XtVinvX = M.topLeftCorner(p_, p_);
    Eigen::LLT<Eigen::MatrixXd> lx(ev.XtVinvX);
    if (lx.info() != Eigen::Success) throw SingularFixedDesign("X'V^-1 X not positive definite");
    ev.logdet_RX = 2.0 * lx.matrixLLT().diagonal().array().log().sum();
    const Eigen::VectorXd mxy = M.topRightCorner(p_, 1);
    ev.beta = lx.solve(mxy);
    ev.r2 = std::max(M(p_, p_) - mxy.dot(ev.beta), std::numeric_limits<double>::min());
    ev.beta += b0_;
    const double nmp = static_cast<double>(n_ - p_);
    ev.sigma2 = ev.r2 / nmp;
    ev.deviance = ev.logdet_A + ev.logdet_RX + nmp * (1.0 + std::log(2.0 * std::numbers::pi * ev.r2 / nmp));
    return ev;
  }

  double operator()(const Eigen::VectorXd& theta) const { return evaluate(theta).deviance; }

  // −2 restricted log-likelihood at an explicit residual sd.
  double unprofiled(const Eigen::VectorXd& theta, double sigma) const {
    const auto ev = evaluate(theta, false);
    const double nmp = static_cast<double>(n_ - p_);
    const double s2 = sigma * sigma;
    return ev.logdet_A + ev.logdet_RX + nmp * std::log(s2) + ev.r2 / s2 + nmp * std::log(2.0 * std::numbers::pi);
  }

 private:
  struct Cross {
    int col;   // first column in the dense (non-pivot) part
    int unit;  // unit index of that column block
    Eigen::MatrixXd K;  // Σ c_pivot c_unitᵀ over shared observations
  };
  struct RUnit {
    int unit, offset, n_groups, dim;
  };

  int col_of(const DesignMatrices& dm, int v, Eigen::Index obs) const {
    const auto& uv = dm.units[static_cast<std::size_t>(v)];
    return off_r_[static_cast<std::size_t>(v)] + uv.group[static_cast<std::size_t>(obs)] * uv.dim;
  }

  // Picks the pivot unit minimizing a flop estimate of one evaluation.
  static int choose_pivot(const DesignMatrices& dm) {
    const int U = static_cast<int>(dm.units.size());
    int best = 0;
    double best_cost = std::numeric_limits<double>::infinity();
    for (int P = 0; P < U; ++P) {
      const auto& up = dm.units[static_cast<std::size_t>(P)];
      double qR = 0.0, dbar = 0.0;
      for (int v = 0; v < U; ++v)
        if (v != P) {
          qR += static_cast<double>(dm.units[static_cast<std::size_t>(v)].n_groups) * dm.units[static_cast<std::size_t>(v)].dim;
          dbar = std::max(dbar, static_cast<double>(dm.units[static_cast<std::size_t>(v)].dim));
        }
      std::vector<std::set<std::pair<int, int>>> touched(static_cast<std::size_t>(up.n_groups));
      for (std::size_t obs = 0; obs < up.group.size(); ++obs)
        for (int v = 0; v < U; ++v)
          if (v != P) touched[static_cast<std::size_t>(up.group[obs])].insert({v, dm.units[static_cast<std::size_t>(v)].group[obs]});
      double upd = 0.0;
      for (const auto& t : touched) {
        double w = 0.0;
        for (const auto& [v, h] : t) w += dm.units[static_cast<std::size_t>(v)].dim;
        upd += 0.5 * w * w * up.dim;
      }
      const double cost = qR * qR * qR / 3.0 + 2.0 * qR * qR * dbar + upd;
      if (cost < best_cost) best_cost = cost, best = P;
    }
    return best;
  }

  CovStructure cs_;
  Eigen::Index n_ = 0, p_ = 0;
  int pivot_ = 0, dP_ = 0, qR_ = 0;
  std::vector<int> off_r_;
  std::vector<RUnit> r_units_;
  std::vector<Eigen::MatrixXd> G_, F_;
  std::vector<std::vector<Cross>> cross_;
  Eigen::MatrixXd ZRtZR_, FR_, XYtXY_;
  Eigen::VectorXd b0_;
};

inline Evaluation profiled_deviance(const FitProblem& pb, const Eigen::VectorXd& theta) {
  return DevianceEvaluator(pb).evaluate(theta);
}

struct FitOptions {
  OptimOptions optim;
  std::vector<OptimizerKind> cascade{OptimizerKind::BoundedQuadraticApprox, OptimizerKind::NelderMead,
                                     OptimizerKind::BoundedQuasiNewton};
  double probe_tol = 1e-8;      // max relative improvement allowed on the stencil
  double boundary_tol = 1e-10;  // θ² below this (relative variance) is a zero
  std::optional<Eigen::VectorXd> start;
};

struct StageTrace {
  OptimizerKind optimizer;
  double deviance;
  int n_evals;
  bool optimizer_success;
  bool probe_passed;
};

struct FitResult {
  CovStructure structure;
  Eigen::VectorXd theta_hat;
  Eigen::VectorXd beta_hat;
  double sigma2_hat = 0.0;
  double deviance = std::numeric_limits<double>::infinity();
  bool converged = false;
  std::optional<OptimizerKind> optimizer_used;  // empty for an accepted warm start
  int n_evals = 0;
  std::vector<bool> boundary_flags;
  std::vector<StageTrace> trace;
  Eigen::MatrixXd XtVinvX;

  // Var(β̂) at the estimate.
  Eigen::MatrixXd beta_covariance() const { return sigma2_hat * XtVinvX.inverse(); }
};

// Stencil test: no coordinate probe θ ± h·e_i (h = 1e-4(1+|θ_i|), kept in
// bounds) improves the deviance by more than tol·(1 + |f|).
inline bool stencil_probe(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& theta,
                          double f0, const Eigen::VectorXd& lower, double tol, int* evals = nullptr) {
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double h = 1e-4 * (1.0 + std::abs(theta[i]));
    for (double s : {1.0, -1.0}) {
      Eigen::VectorXd t = theta;
      t[i] = std::max(lower[i], t[i] + s * h);
      if (t[i] == theta[i]) continue;
      double fp;
      try {
        fp = f(t);
      } catch (const std::exception&) {
        continue;
      }
      if (evals) ++*evals;
      if ((f0 - fp) / (1.0 + std::abs(f0)) >= tol) return false;
    }
  }
  return true;
}

inline FitResult fit(const FitProblem& pb, const FitOptions& options = {}) {
  const DevianceEvaluator ev(pb);
  const CovStructure& cs = pb.structure();
  const Eigen::VectorXd lower = cs.lower_bounds();
  const Eigen::VectorXd upper = Eigen::VectorXd::Constant(lower.size(), std::numeric_limits<double>::infinity());
  Eigen::VectorXd start = options.start ? *options.start : cs.initial_theta();
  if (start.size() != lower.size()) throw IncompatibleStructure("start vector has the wrong length");
  start = start.cwiseMax(lower);
  auto f = [&](const Eigen::VectorXd& t) { return ev(t); };

  FitResult res;
  res.structure = cs;
  auto finalize = [&](const Eigen::VectorXd& theta, bool converged) {
    const auto e = ev.evaluate(theta);
    res.theta_hat = theta;
    res.beta_hat = e.beta;
    res.sigma2_hat = e.sigma2;
    res.deviance = e.deviance;
    res.XtVinvX = e.XtVinvX;
    res.converged = converged;
    const auto mask = cs.bounded_mask();
    res.boundary_flags.assign(mask.size(), false);
    for (std::size_t i = 0; i < mask.size(); ++i)
      res.boundary_flags[i] = mask[i] && theta[static_cast<Eigen::Index>(i)] * theta[static_cast<Eigen::Index>(i)] < options.boundary_tol;
  };

  if (options.start) {
    double f0 = std::numeric_limits<double>::infinity();
    try {
      f0 = f(start);
    } catch (const std::exception&) {
    }
    ++res.n_evals;
    if (std::isfinite(f0) && stencil_probe(f, start, f0, lower, options.probe_tol, &res.n_evals)) {
      finalize(start, true);
      return res;
    }
  }

  Eigen::VectorXd best = start;
  double best_f = std::numeric_limits<double>::infinity();
  for (auto kind : options.cascade) {
    const OptimResult r = run_optimizer(kind, f, start, lower, upper, options.optim);
    res.n_evals += r.n_evals;
    bool probe = false;
    if (std::isfinite(r.f)) probe = stencil_probe(f, r.x, r.f, lower, options.probe_tol, &res.n_evals);
    res.trace.push_back({kind, r.f, r.n_evals, r.success, probe});
    if (r.f < best_f) best_f = r.f, best = r.x;
    if (r.success && probe) {
      res.optimizer_used = kind;
      finalize(r.x, true);
      return res;
    }
  }
  if (!std::isfinite(best_f)) {
    res.theta_hat = best;
    res.converged = false;
    res.boundary_flags.assign(static_cast<std::size_t>(best.size()), false);
    return res;
  }
  finalize(best, false);
  return res;
}

inline FitResult fit(const ModelSpec& spec, const Dataset& data, const CovFamily& family,
                     const FitOptions& options = {}) {
  return fit(make_problem(spec, data, family), options);
}

// Per-unit relative covariance T Tᵀ of a fit.
inline std::vector<Eigen::MatrixXd> relative_covariances(const FitResult& r) {
  auto T = r.structure.relative_factors(r.theta_hat);
  for (auto& t : T) t = (t * t.transpose()).eval();
  return T;
}

// Warm start for `target` from a fitted structure: matching terms inherit
// their fitted relative variances, other terms start at 1.
inline Eigen::VectorXd warm_start(const FitResult& from, const CovStructure& target) {
  const auto cov = relative_covariances(from);
  const auto& src = from.structure;
  Eigen::VectorXd theta = target.initial_theta();
  // Relative covariance sub-block of a term in the source, if present.
  auto find = [&](const RandomTerm& t) -> std::optional<Eigen::MatrixXd> {
    const int ui = src.unit_index(t.unit);
    if (ui < 0) return std::nullopt;
    const auto& lay = src.units[static_cast<std::size_t>(ui)];
    for (std::size_t k = 0; k < lay.terms.size(); ++k)
      if (lay.terms[k].factors == t.factors)
        return cov[static_cast<std::size_t>(ui)].block(lay.offset[k], lay.offset[k], lay.width[k], lay.width[k]);
    return std::nullopt;
  };
  for (std::size_t bi = 0; bi < target.blocks.size(); ++bi) {
    const auto& b = target.blocks[bi];
    const auto& lay = target.units[static_cast<std::size_t>(b.unit_index)];
    Eigen::Index k = target.theta_offset[bi];
    // Target relative covariance over the block's columns.
    Eigen::MatrixXd C = Eigen::MatrixXd::Identity(b.n_cols, b.n_cols);
    const bool same_coding = src.coding == target.coding;
    for (std::size_t t = 0; t < lay.terms.size(); ++t) {
      const int lo = std::max(b.first, lay.offset[t]);
      const int hi = std::min(b.first + b.n_cols, lay.offset[t] + lay.width[t]);
      if (lo >= hi) continue;
      const auto s = find(lay.terms[t]);
      if (!s) continue;
      if (same_coding && s->rows() == lay.width[t]) {
        C.block(lo - b.first, lo - b.first, hi - lo, hi - lo) =
            s->block(lo - lay.offset[t], lo - lay.offset[t], hi - lo, hi - lo);
      } else {
        const double v = s->diagonal().mean();
        for (int c = lo; c < hi; ++c) C(c - b.first, c - b.first) = v;
      }
    }
    switch (b.kind) {
      case BlockKind::SharedScalar:
        theta[k] = std::sqrt(std::max(0.0, C.diagonal().mean()));
        break;
      case BlockKind::PerContrastScalar:
        for (int c = 0; c < b.n_cols; ++c) theta[k++] = std::sqrt(std::max(0.0, C(c, c)));
        break;
      case BlockKind::FullCholesky: {
        // Pivot-free Cholesky that tolerates semidefinite input.
        Eigen::MatrixXd L = Eigen::MatrixXd::Zero(b.n_cols, b.n_cols);
        for (int j = 0; j < b.n_cols; ++j) {
          double d = C(j, j) - L.row(j).head(j).squaredNorm();
          d = d > 1e-12 ? std::sqrt(d) : 0.0;
          L(j, j) = d;
          for (int i = j + 1; i < b.n_cols; ++i)
            L(i, j) = d > 0 ? (C(i, j) - L.row(i).head(j).dot(L.row(j).head(j))) / d : 0.0;
        }
        for (int j = 0; j < b.n_cols; ++j)
          for (int i = j; i < b.n_cols; ++i) theta[k++] = L(i, j);
        break;
      }
    }
  }
  return theta;
}

// Refit the same data and fixed part under another covariance structure,
// warm-started from `result`.
inline FitResult refit_with_structure(const FitProblem& pb, const FitResult& result, const CovStructure& target,
                                      FitOptions options = {}) {
  for (const auto& u : target.units)
    for (const auto& t : u.terms)
      for (const auto& f : t.factors)
        if (pb.spec.factor_index(f) < 0) throw IncompatibleStructure("term uses factor '" + f + "' unknown to the model");
  const FitProblem next = make_problem(pb.spec, pb.data, target, pb.overrides);
  options.start = warm_start(result, target);
  return fit(next, options);
}

}  // namespace cremem
