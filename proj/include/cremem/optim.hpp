#pragma once

// Bound-constrained derivative-free minimizers used by the REML fit:
//   bobyqa       - quadratic-interpolation trust region (2n+1 points,
//                  minimum-Frobenius-norm model updates, Powell style)
//   nelder_mead  - simplex with reflection at the bounds
//   projected_bfgs - quasi-Newton with central-difference gradients
// Lower/upper bounds may be ±infinity.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cremem {

using Objective = std::function<double(const Eigen::VectorXd&)>;

enum class OptimizerKind { BoundedQuadraticApprox, NelderMead, BoundedQuasiNewton };

inline std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::BoundedQuadraticApprox: return "bobyqa";
    case OptimizerKind::NelderMead: return "nelder-mead";
    case OptimizerKind::BoundedQuasiNewton: return "bfgs";
  }
  return "?";
}

struct OptimOptions {
  int max_evals = 10000;
  double rho_beg = 0.2;
  double rho_end = 2e-7;
  double ftol_rel = 1e-12;  // Nelder-Mead / BFGS
  double xtol = 1e-9;
};

struct OptimResult {
  Eigen::VectorXd x;
  double f = std::numeric_limits<double>::infinity();
  int n_evals = 0;
  bool success = false;
  std::string message;
};

namespace detail {

// Counts evaluations and maps exceptions / NaN to +inf.
class CountedObjective {
 public:
  CountedObjective(const Objective& f, int budget) : f_(f), budget_(budget) {}
  double operator()(const Eigen::VectorXd& x) {
    ++n_;
    double v;
    try {
      v = f_(x);
    } catch (const std::exception&) {
      v = std::numeric_limits<double>::infinity();
    }
    return std::isnan(v) ? std::numeric_limits<double>::infinity() : v;
  }
  int count() const { return n_; }
  bool exhausted() const { return n_ >= budget_; }

 private:
  const Objective& f_;
  int budget_;
  int n_ = 0;
};

inline Eigen::VectorXd clamp(const Eigen::VectorXd& x, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  return x.cwiseMax(lo).cwiseMin(hi);
}

class Bobyqa {
 public:
  Bobyqa(const Objective& f, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, const OptimOptions& opt)
      : fun_(f, opt.max_evals), lo_(lo), hi_(hi), opt_(opt), n_(static_cast<int>(lo.size())), m_(2 * n_ + 1) {}

  OptimResult run(const Eigen::VectorXd& start) {
    OptimResult res;
    if (n_ == 0) {
      res.x = start;
      res.f = fun_(start);
      res.n_evals = fun_.count();
      res.success = std::isfinite(res.f);
      return res;
    }
    double rho = opt_.rho_beg;
    for (int i = 0; i < n_; ++i) rho = std::min(rho, 0.5 * (hi_[i] - lo_[i]));
    const double rho_end = std::min(opt_.rho_end, rho);
    init_points(start, rho);
    if (!rebuild_h()) return finish(false, "singular initial interpolation system");
    rebuild_model();
    double delta = rho;
    int since_rebuild = 0;

    while (true) {
      if (fun_.exhausted()) return finish(false, "evaluation budget exhausted");
      const Eigen::VectorXd xopt = Y_.col(kopt_);
      if (xopt.squaredNorm() > 1e3 * delta * delta || since_rebuild > std::max(100, 2 * m_)) {
        if (xopt.squaredNorm() > 1e3 * delta * delta) shift_base();
        if (!rebuild_h()) return finish(false, "singular interpolation system");
        rebuild_model_keep();
        since_rebuild = 0;
        continue;
      }
      const Eigen::VectorXd gopt = g_ + hess_vec(xopt);
      const Eigen::VectorXd d = trust_step(gopt, xopt, delta);
      const double dnorm = d.norm();

      if (dnorm < 0.5 * rho) {
        int far = farthest(xopt);
        const double dist = (Y_.col(far) - xopt).norm();
        if (dist > 2.0 * rho) {
          geometry_step(far, std::max(std::min(0.1 * dist, delta), rho));
          ++since_rebuild;
          continue;
        }
        if (rho <= rho_end) return finish(true, "rho_end reached");
        reduce_rho(rho, delta, rho_end);
        continue;
      }

      const Eigen::VectorXd s = clamp(x0_ + xopt + d, lo_, hi_) - x0_;
      const double fnew = fun_(x0_ + s);
      const double pred = -(gopt.dot(d) + 0.5 * d.dot(hess_vec(d)));
      const double fopt = fval_[kopt_];
      double ratio = -1.0;
      if (std::isfinite(fnew) && pred > 0) ratio = (fopt - fnew) / pred;

      if (ratio <= 0.1) delta = std::min(0.5 * delta, dnorm);
      else if (ratio <= 0.7) delta = std::max(0.5 * delta, dnorm);
      else delta = std::max(0.5 * delta, 2.0 * dnorm);
      if (delta <= 1.5 * rho) delta = rho;

      if (std::isfinite(fnew)) {
        const int t = choose_replacement(s, fnew < fopt, delta);
        if (t >= 0) {
          replace_point(t, s, fnew);
          ++since_rebuild;
        }
      }
      if (ratio >= 0.1) continue;

      const Eigen::VectorXd xo = Y_.col(kopt_);
      int far = farthest(xo);
      const double dist = (Y_.col(far) - xo).norm();
      if (dist > 2.0 * delta) {
        geometry_step(far, std::max(std::min(0.1 * dist, delta), rho));
        ++since_rebuild;
        continue;
      }
      if (std::max(delta, dnorm) > rho) continue;
      if (rho <= rho_end) return finish(true, "rho_end reached");
      reduce_rho(rho, delta, rho_end);
    }
  }

 private:
  void init_points(const Eigen::VectorXd& start, double rho) {
    x0_ = clamp(start, lo_, hi_);
    for (int i = 0; i < n_; ++i) {
      if (x0_[i] - lo_[i] < rho) x0_[i] = x0_[i] - lo_[i] <= 0.5 * rho ? lo_[i] : lo_[i] + rho;
      else if (hi_[i] - x0_[i] < rho) x0_[i] = hi_[i] - x0_[i] <= 0.5 * rho ? hi_[i] : hi_[i] - rho;
    }
    Y_ = Eigen::MatrixXd::Zero(n_, m_);
    for (int i = 0; i < n_; ++i) {
      double a = rho, b = -rho;
      if (x0_[i] <= lo_[i]) b = 2.0 * rho;
      else if (x0_[i] >= hi_[i]) a = -rho, b = -2.0 * rho;
      Y_(i, 1 + i) = a;
      Y_(i, 1 + n_ + i) = b;
    }
    fval_.resize(m_);
    for (int j = 0; j < m_; ++j) fval_[j] = fun_(x0_ + Y_.col(j));
    // Non-finite values would poison the model; replace them by a large
    // finite penalty above the worst finite value.
    double worst = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < m_; ++j)
      if (std::isfinite(fval_[j])) worst = std::max(worst, fval_[j]);
    for (int j = 0; j < m_; ++j)
      if (!std::isfinite(fval_[j])) fval_[j] = std::isfinite(worst) ? worst + 1e3 * (1.0 + std::abs(worst)) : 1e300;
    fval_.minCoeff(&kopt_);
  }

  bool rebuild_h() {
    const int N = m_ + n_ + 1;
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(N, N);
    const Eigen::MatrixXd G = Y_.transpose() * Y_;
    W.topLeftCorner(m_, m_) = 0.5 * G.array().square().matrix();
    W.block(m_, 0, 1, m_).setOnes();
    W.block(0, m_, m_, 1).setOnes();
    W.block(m_ + 1, 0, n_, m_) = Y_;
    W.block(0, m_ + 1, m_, n_) = Y_.transpose();
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(W);
    H_ = lu.inverse();
    if (!H_.allFinite()) return false;
    H_ = 0.5 * (H_ + H_.transpose()).eval();
    return true;
  }

  // Fresh minimum-norm model through all points.
  void rebuild_model() {
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m_ + n_ + 1);
    rhs.head(m_) = fval_;
    const Eigen::VectorXd sol = H_ * rhs;
    pq_ = sol.head(m_);
    c_ = sol[m_];
    g_ = sol.tail(n_);
    HQ_ = Eigen::MatrixXd::Zero(n_, n_);
  }

  // After a rebuild of H: keep the curvature accumulated so far and refit
  // the remaining interpolation residuals with a minimum-norm correction.
  void rebuild_model_keep() {
    Eigen::VectorXd resid(m_);
    for (int j = 0; j < m_; ++j) resid[j] = fval_[j] - model(Y_.col(j));
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m_ + n_ + 1);
    rhs.head(m_) = resid;
    const Eigen::VectorXd sol = H_ * rhs;
    pq_ += sol.head(m_);
    c_ += sol[m_];
    g_ += sol.tail(n_);
  }

  Eigen::VectorXd hess_vec(const Eigen::VectorXd& v) const {
    return HQ_ * v + Y_ * (pq_.array() * (Y_.transpose() * v).array()).matrix();
  }

  double model(const Eigen::VectorXd& s) const { return c_ + g_.dot(s) + 0.5 * s.dot(hess_vec(s)); }

  // Moves the base point to the current best point. The implicit Hessian
  // part depends on the base, so it is folded into the explicit matrix.
  void shift_base() {
    const Eigen::VectorXd xopt = Y_.col(kopt_);
    HQ_ += Y_ * pq_.asDiagonal() * Y_.transpose();
    pq_.setZero();
    c_ = model(xopt);
    g_ += HQ_ * xopt;
    x0_ += xopt;
    Y_.colwise() -= xopt;
    Y_.col(kopt_).setZero();
  }

  int farthest(const Eigen::VectorXd& xopt) const {
    int far = 0;
    double best = -1.0;
    for (int j = 0; j < m_; ++j) {
      const double d = (Y_.col(j) - xopt).squaredNorm();
      if (j != kopt_ && d > best) best = d, far = j;
    }
    return far;
  }

  void reduce_rho(double& rho, double& delta, double rho_end) const {
    const double r = rho / rho_end;
    const double next = r <= 16.0 ? rho_end : (r <= 250.0 ? std::sqrt(rho * rho_end) : 0.1 * rho);
    delta = std::max(0.5 * rho, next);
    rho = next;
  }

  Eigen::VectorXd wvec(const Eigen::VectorXd& s) const {
    Eigen::VectorXd w(m_ + n_ + 1);
    w.head(m_) = 0.5 * (Y_.transpose() * s).array().square().matrix();
    w[m_] = 1.0;
    w.tail(n_) = s;
    return w;
  }

  int choose_replacement(const Eigen::VectorXd& s, bool improved, double delta) const {
    const Eigen::VectorXd w = wvec(s);
    const Eigen::VectorXd Hw = H_ * w;
    const double beta = 0.5 * s.squaredNorm() * s.squaredNorm() - w.dot(Hw);
    const Eigen::VectorXd xopt = Y_.col(kopt_);
    int best = -1;
    double score = 0.0;
    for (int j = 0; j < m_; ++j) {
      if (!improved && j == kopt_) continue;
      const double sig = H_(j, j) * beta + Hw[j] * Hw[j];
      const double dist2 = (Y_.col(j) - xopt).squaredNorm() / (delta * delta);
      const double sc = std::abs(sig) * std::pow(std::max(1.0, dist2), 2);
      if (sc > score) score = sc, best = j;
    }
    return best;
  }

  // Replaces interpolation point t by s (value f): updates H (rank-2
  // Woodbury-type formula) and the model (least Frobenius change).
  void replace_point(int t, const Eigen::VectorXd& s, double f) {
    const double diff = f - model(s);
    const Eigen::VectorXd w = wvec(s);
    const Eigen::VectorXd Hw = H_ * w;
    const double beta = 0.5 * s.squaredNorm() * s.squaredNorm() - w.dot(Hw);
    const double alpha = H_(t, t);
    const double tau = Hw[t];
    const double sigma = alpha * beta + tau * tau;

    const Eigen::VectorXd yt = Y_.col(t);
    HQ_ += pq_[t] * yt * yt.transpose();
    pq_[t] = 0.0;
    Y_.col(t) = s;
    fval_[t] = f;

    bool ok = std::abs(sigma) > 1e-10 * (std::abs(alpha * beta) + tau * tau) && std::isfinite(sigma);
    if (ok) {
      Eigen::VectorXd u = -Hw;
      u[t] += 1.0;  // e_t − Hw
      const Eigen::VectorXd He = H_.col(t);
      H_.noalias() += (alpha / sigma) * u * u.transpose();
      H_.noalias() -= (beta / sigma) * He * He.transpose();
      H_.noalias() += (tau / sigma) * He * u.transpose();
      H_.noalias() += (tau / sigma) * u * He.transpose();
      ok = H_.allFinite();
    }
    if (!ok) rebuild_h();
    const Eigen::VectorXd col = H_.col(t);
    pq_ += diff * col.head(m_);
    c_ += diff * col[m_];
    g_ += diff * col.tail(n_);
    if (f < fval_[kopt_]) kopt_ = t;
  }

  // Truncated conjugate gradient on the box/ball constrained model.
  Eigen::VectorXd trust_step(const Eigen::VectorXd& g, const Eigen::VectorXd& xopt, double delta) const {
    const Eigen::VectorXd sl = lo_ - x0_ - xopt;
    const Eigen::VectorXd su = hi_ - x0_ - xopt;
    Eigen::VectorXd d = Eigen::VectorXd::Zero(n_);
    std::vector<bool> fixed(static_cast<std::size_t>(n_), false);
    for (int i = 0; i < n_; ++i)
      if ((sl[i] >= 0 && g[i] > 0) || (su[i] <= 0 && g[i] < 0)) fixed[static_cast<std::size_t>(i)] = true;
    auto mask = [&](Eigen::VectorXd v) {
      for (int i = 0; i < n_; ++i)
        if (fixed[static_cast<std::size_t>(i)]) v[i] = 0.0;
      return v;
    };

    for (int restart = 0; restart <= n_; ++restart) {
      Eigen::VectorXd r = mask(-(g + hess_vec(d)));
      double rr = r.squaredNorm();
      const double rr0 = rr;
      if (rr <= 1e-30) break;
      Eigen::VectorXd p = r;
      bool hit_bound = false;
      for (int it = 0; it < n_; ++it) {
        const Eigen::VectorXd Bp = mask(hess_vec(p));
        const double curv = p.dot(Bp);
        // Distance to the trust-region boundary along p.
        const double pp = p.squaredNorm(), dp = d.dot(p), dd = d.squaredNorm();
        const double disc = std::max(0.0, dp * dp + pp * (delta * delta - dd));
        const double a_tr = (std::sqrt(disc) - dp) / pp;
        double a_b = std::numeric_limits<double>::infinity();
        int ib = -1;
        for (int i = 0; i < n_; ++i) {
          if (fixed[static_cast<std::size_t>(i)] || p[i] == 0.0) continue;
          const double a = p[i] > 0 ? (su[i] - d[i]) / p[i] : (sl[i] - d[i]) / p[i];
          if (a < a_b) a_b = a, ib = i;
        }
        const double a_cg = curv > 0 ? rr / curv : std::numeric_limits<double>::infinity();
        const double a = std::max(0.0, std::min({a_cg, a_tr, a_b}));
        d += a * p;
        if (a_b <= a_tr && a_b <= a_cg) {
          d[ib] = p[ib] > 0 ? su[ib] : sl[ib];
          fixed[static_cast<std::size_t>(ib)] = true;
          hit_bound = true;
          break;
        }
        if (a_tr <= a_cg) return d;
        r -= a * Bp;
        const double rr_new = r.squaredNorm();
        if (rr_new <= 1e-16 * rr0) return d;
        p = r + (rr_new / rr) * p;
        rr = rr_new;
      }
      if (!hit_bound) break;
      if (d.norm() >= delta * (1.0 - 1e-12)) break;
    }
    return d;
  }

  // Moves point t to where its Lagrange function is large in magnitude,
  // keeping the interpolation system well conditioned.
  void geometry_step(int t, double dg) {
    const Eigen::VectorXd xopt = Y_.col(kopt_);
    const Eigen::VectorXd lam = H_.col(t).head(m_);
    const Eigen::VectorXd gl = H_.col(t).tail(n_);
    const Eigen::VectorXd yx = Y_.transpose() * xopt;
    const Eigen::VectorXd grad = gl + Y_ * (lam.array() * yx.array()).matrix();
    const double l0 = (t == kopt_) ? 1.0 : 0.0;
    const Eigen::VectorXd sl = lo_ - x0_ - xopt;
    const Eigen::VectorXd su = hi_ - x0_ - xopt;

    auto max_step = [&](const Eigen::VectorXd& v, double a) {
      // Largest |a'| ≤ |a| with sign of a keeping xopt + a'v in the box.
      double lim = std::abs(a);
      for (int i = 0; i < n_; ++i) {
        const double vi = a > 0 ? v[i] : -v[i];
        if (vi > 0) lim = std::min(lim, su[i] / vi);
        else if (vi < 0) lim = std::min(lim, sl[i] / vi);
      }
      return a > 0 ? std::max(0.0, lim) : -std::max(0.0, lim);
    };

    // Column j of YtV is Y^T (y_j - xopt).
    const Eigen::MatrixXd YtV = (Y_.transpose() * Y_).colwise() - yx;
    Eigen::VectorXd best_d = Eigen::VectorXd::Zero(n_);
    double best_val = -1.0;
    for (int j = 0; j < m_; ++j) {
      if (j == kopt_) continue;
      const Eigen::VectorXd v = Y_.col(j) - xopt;
      const double vn = v.norm();
      if (vn == 0.0) continue;
      const double slope = grad.dot(v);
      const double curv = (lam.array() * YtV.col(j).array().square()).sum();
      for (double sgn : {1.0, -1.0}) {
        const double a = max_step(v, sgn * dg / vn);
        std::vector<double> cands{a};
        if (curv != 0.0) {
          const double stat = -slope / curv;
          if (stat * a > 0 && std::abs(stat) < std::abs(a)) cands.push_back(stat);
        }
        for (double c : cands) {
          const double val = std::abs(l0 + slope * c + 0.5 * curv * c * c);
          if (val > best_val) best_val = val, best_d = c * v;
        }
      }
    }
    const double gn = grad.norm();
    if (gn > 0) {
      for (double sgn : {1.0, -1.0}) {
        Eigen::VectorXd dd = (sgn * dg / gn) * grad;
        dd = dd.cwiseMax(sl).cwiseMin(su);
        const Eigen::VectorXd w = wvec(xopt + dd);
        const double val = std::abs((H_.col(t).transpose() * w)(0));
        if (val > best_val) best_val = val, best_d = dd;
      }
    }
    if (best_d.squaredNorm() == 0.0) return;
    const Eigen::VectorXd s = clamp(x0_ + xopt + best_d, lo_, hi_) - x0_;
    const double f = fun_(x0_ + s);
    if (!std::isfinite(f)) return;
    replace_point(t, s, f);
  }

  OptimResult finish(bool ok, const char* msg) {
    OptimResult r;
    r.x = clamp(x0_ + Y_.col(kopt_), lo_, hi_);
    r.f = fval_[kopt_];
    r.n_evals = fun_.count();
    r.success = ok && std::isfinite(r.f);
    r.message = msg;
    return r;
  }

  CountedObjective fun_;
  Eigen::VectorXd lo_, hi_;
  OptimOptions opt_;
  int n_, m_;
  Eigen::VectorXd x0_;
  Eigen::MatrixXd Y_;  // interpolation points relative to x0, n × m
  Eigen::VectorXd fval_;
  int kopt_ = 0;
  Eigen::MatrixXd H_;  // inverse of the KKT matrix
  double c_ = 0.0;
  Eigen::VectorXd g_, pq_;
  Eigen::MatrixXd HQ_;
};

}  // namespace detail

inline OptimResult bobyqa(const Objective& f, const Eigen::VectorXd& x0, const Eigen::VectorXd& lo,
                          const Eigen::VectorXd& hi, const OptimOptions& opt = {}) {
  return detail::Bobyqa(f, lo, hi, opt).run(x0);
}

inline OptimResult nelder_mead(const Objective& f, const Eigen::VectorXd& x0, const Eigen::VectorXd& lo,
                               const Eigen::VectorXd& hi, const OptimOptions& opt = {}) {
  detail::CountedObjective fun(f, opt.max_evals);
  const int n = static_cast<int>(x0.size());
  OptimResult res;
  if (n == 0) {
    res.x = x0;
    res.f = fun(x0);
    res.n_evals = 1;
    res.success = std::isfinite(res.f);
    return res;
  }
  // Adaptive coefficients (Gao & Han) behave better in higher dimension.
  const double a_r = 1.0, a_e = 1.0 + 2.0 / n, a_c = 0.75 - 0.5 / n, a_s = 1.0 - 1.0 / n;
  auto reflect_into = [&](Eigen::VectorXd x) {
    for (int i = 0; i < n; ++i) {
      if (x[i] < lo[i]) x[i] = lo[i] + (lo[i] - x[i]);
      if (x[i] > hi[i]) x[i] = hi[i] - (x[i] - hi[i]);
    }
    return detail::clamp(x, lo, hi);
  };

  Eigen::VectorXd best = detail::clamp(x0, lo, hi);
  double fbest = std::numeric_limits<double>::infinity();
  bool converged = false;
  for (int restart = 0; restart < 2 && !fun.exhausted(); ++restart) {
    std::vector<Eigen::VectorXd> S(static_cast<std::size_t>(n + 1), best);
    std::vector<double> F(static_cast<std::size_t>(n + 1));
    const double step = restart == 0 ? opt.rho_beg : std::max(10 * opt.xtol, 0.05 * opt.rho_beg);
    for (int i = 0; i < n; ++i) {
      auto& v = S[static_cast<std::size_t>(i + 1)];
      v[i] += (v[i] + step <= hi[i]) ? step : -step;
      v = detail::clamp(v, lo, hi);
    }
    for (std::size_t k = 0; k <= static_cast<std::size_t>(n); ++k) F[k] = fun(S[k]);
    converged = false;
    std::vector<int> idx(static_cast<std::size_t>(n + 1));
    while (!fun.exhausted()) {
      std::iota(idx.begin(), idx.end(), 0);
      std::sort(idx.begin(), idx.end(), [&](int a, int b) { return F[static_cast<std::size_t>(a)] < F[static_cast<std::size_t>(b)]; });
      const auto ib = static_cast<std::size_t>(idx.front()), iw = static_cast<std::size_t>(idx.back()),
                 is = static_cast<std::size_t>(idx[idx.size() - 2]);
      double size = 0.0;
      for (std::size_t k = 0; k <= static_cast<std::size_t>(n); ++k)
        size = std::max(size, (S[k] - S[ib]).cwiseAbs().maxCoeff());
      if (std::isfinite(F[ib]) && F[iw] - F[ib] <= opt.ftol_rel * (1.0 + std::abs(F[ib])) &&
          size <= opt.xtol * (1.0 + S[ib].cwiseAbs().maxCoeff())) {
        converged = true;
        break;
      }
      Eigen::VectorXd cen = Eigen::VectorXd::Zero(n);
      for (std::size_t k = 0; k <= static_cast<std::size_t>(n); ++k)
        if (k != iw) cen += S[k];
      cen /= n;
      const Eigen::VectorXd xr = reflect_into(cen + a_r * (cen - S[iw]));
      const double fr = fun(xr);
      if (fr < F[ib]) {
        const Eigen::VectorXd xe = reflect_into(cen + a_e * (cen - S[iw]));
        const double fe = fun(xe);
        if (fe < fr) S[iw] = xe, F[iw] = fe;
        else S[iw] = xr, F[iw] = fr;
      } else if (fr < F[is]) {
        S[iw] = xr, F[iw] = fr;
      } else {
        const bool outside = fr < F[iw];
        const Eigen::VectorXd xc = outside ? reflect_into(cen + a_c * (xr - cen)) : reflect_into(cen + a_c * (S[iw] - cen));
        const double fc = fun(xc);
        if (fc < std::min(fr, F[iw])) {
          S[iw] = xc, F[iw] = fc;
        } else {
          for (std::size_t k = 0; k <= static_cast<std::size_t>(n); ++k) {
            if (k == ib) continue;
            S[k] = detail::clamp(S[ib] + a_s * (S[k] - S[ib]), lo, hi);
            F[k] = fun(S[k]);
          }
        }
      }
    }
    for (std::size_t k = 0; k <= static_cast<std::size_t>(n); ++k)
      if (F[k] < fbest) fbest = F[k], best = S[k];
    if (!converged) break;
  }
  res.x = best;
  res.f = fbest;
  res.n_evals = fun.count();
  res.success = converged && std::isfinite(fbest);
  res.message = converged ? "simplex collapsed" : "evaluation budget exhausted";
  return res;
}

namespace detail {

// Central differences, one-sided next to a bound.
inline Eigen::VectorXd fd_gradient(CountedObjective& fun, const Eigen::VectorXd& x, double fx,
                                   const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  const auto n = x.size();
  Eigen::VectorXd g(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double h = 1e-6 * (1.0 + std::abs(x[i]));
    Eigen::VectorXd xp = x, xm = x;
    if (x[i] - h < lo[i]) {
      xp[i] += h;
      g[i] = (fun(xp) - fx) / h;
    } else if (x[i] + h > hi[i]) {
      xm[i] -= h;
      g[i] = (fx - fun(xm)) / h;
    } else {
      xp[i] += h;
      xm[i] -= h;
      g[i] = (fun(xp) - fun(xm)) / (2 * h);
    }
  }
  return g;
}

}  // namespace detail

inline OptimResult projected_bfgs(const Objective& f, const Eigen::VectorXd& x0, const Eigen::VectorXd& lo,
                                  const Eigen::VectorXd& hi, const OptimOptions& opt = {}) {
  detail::CountedObjective fun(f, opt.max_evals);
  const auto n = x0.size();
  OptimResult res;
  Eigen::VectorXd x = detail::clamp(x0, lo, hi);
  double fx = fun(x);
  res.message = "evaluation budget exhausted";
  if (!std::isfinite(fx)) {
    res.x = x;
    res.f = fx;
    res.n_evals = fun.count();
    res.message = "non-finite objective at start";
    return res;
  }
  Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd g = detail::fd_gradient(fun, x, fx, lo, hi);
  auto active = [&](Eigen::Index i, const Eigen::VectorXd& gr) {
    return (x[i] <= lo[i] && gr[i] > 0) || (x[i] >= hi[i] && gr[i] < 0);
  };
  while (!fun.exhausted()) {
    double pg = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!active(i, g)) pg = std::max(pg, std::abs(g[i]));
    if (pg <= 1e-7 * (1.0 + std::abs(fx))) {
      res.success = true;
      res.message = "projected gradient small";
      break;
    }
    Eigen::VectorXd dir = -Hinv * g;
    for (Eigen::Index i = 0; i < n; ++i)
      if (active(i, g)) dir[i] = 0.0;
    if (dir.dot(g) >= 0) {
      Hinv.setIdentity();
      dir = -g;
      for (Eigen::Index i = 0; i < n; ++i)
        if (active(i, g)) dir[i] = 0.0;
    }
    double a = 1.0;
    Eigen::VectorXd xn;
    double fn = fx;
    bool moved = false;
    for (int k = 0; k < 40 && !fun.exhausted(); ++k, a *= 0.5) {
      xn = detail::clamp(x + a * dir, lo, hi);
      fn = fun(xn);
      if (fn <= fx + 1e-4 * g.dot(xn - x) && fn < fx) {
        moved = true;
        break;
      }
    }
    if (!moved) {
      if (Hinv.isIdentity()) {
        res.message = "line search failed";
        break;
      }
      Hinv.setIdentity();
      continue;
    }
    const Eigen::VectorXd s = xn - x;
    const Eigen::VectorXd gn = detail::fd_gradient(fun, xn, fn, lo, hi);
    const Eigen::VectorXd yv = gn - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      const double r = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      Hinv = (I - r * s * yv.transpose()) * Hinv * (I - r * yv * s.transpose()) + r * s * s.transpose();
    }
    const bool tiny = std::abs(fx - fn) <= opt.ftol_rel * (1.0 + std::abs(fx)) && s.cwiseAbs().maxCoeff() <= opt.xtol;
    x = xn;
    fx = fn;
    g = gn;
    if (tiny) {
      res.success = true;
      res.message = "no further progress";
      break;
    }
  }
  res.x = x;
  res.f = fx;
  res.n_evals = fun.count();
  return res;
}

inline OptimResult run_optimizer(OptimizerKind kind, const Objective& f, const Eigen::VectorXd& x0,
                                 const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, const OptimOptions& opt = {}) {
  switch (kind) {
    case OptimizerKind::BoundedQuadraticApprox: return bobyqa(f, x0, lo, hi, opt);
    case OptimizerKind::NelderMead: return nelder_mead(f, x0, lo, hi, opt);
    case OptimizerKind::BoundedQuasiNewton: return projected_bfgs(f, x0, lo, hi, opt);
  }
  return {};
}

}  // namespace cremem
