#pragma once

// Fixed-effect tests: type-III F with Satterthwaite denominator df, the
// classical quasi-F for balanced designs, the gANOVA/RI-L variance map and
// the PCA-driven structure selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/fisher_f.hpp>

#include "cremem/covariance.hpp"
#include "cremem/dataset.hpp"
#include "cremem/design.hpp"
#include "cremem/errors.hpp"
#include "cremem/formula.hpp"
#include "cremem/reml.hpp"

namespace cremem {

struct TestResult {
  FixedTerm effect;
  std::string label;
  double F = 0.0;
  int df_num = 0;
  double df_den = 0.0;
  double p_value = 1.0;
  bool df_fallback = false;  // Satterthwaite unavailable, residual df used
};

// Upper tail of F(d1, d2) at f.
inline double f_upper_tail(double f, double d1, double d2) {
  if (!(f > 0.0)) return 1.0;
  if (!std::isfinite(f)) return 0.0;
  return boost::math::cdf(boost::math::complement(boost::math::fisher_f_distribution<double>(d1, d2), f));
}

inline double chi2_upper_tail(double x, double df) {
  if (!(x > 0.0)) return 1.0;
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared_distribution<double>(df), x));
}

// Rows of the identity selecting the effect's coefficients.
inline Eigen::MatrixXd hypothesis_matrix(const DesignMatrices& dm, const FixedTerm& effect) {
  const auto& fc = dm.columns_of(effect);
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(fc.n_cols, dm.p());
  for (int j = 0; j < fc.n_cols; ++j) L(j, fc.first + j) = 1.0;
  return L;
}

// Satterthwaite machinery shared by every test on one fit. φ = (θ, σ); the
// covariance of φ̂ is the inverse finite-difference Hessian of half the
// unprofiled REML deviance, and ∂Var(β̂)/∂φ comes from central differences.
// Steps are 1e-4·(1 + |φ_j|) and may cross θ = 0: the criterion is even in
// each scale entry, so no bound is applied.
class Satterthwaite {
 public:
  Satterthwaite(const FitProblem& pb, const FitResult& fit) : pb_(&pb) {
    if (!fit.converged) throw NonConvergedFit("type-III tests need a converged fit");
    if (fit.theta_hat.size() != pb.structure().n_params())
      throw IncompatibleStructure("fit and problem have different covariance structures");
    const DevianceEvaluator ev(pb);
    const Eigen::Index k = fit.theta_hat.size();
    const double sigma = std::sqrt(fit.sigma2_hat);
    const Eigen::MatrixXd Minv = fit.XtVinvX.inverse();
    Vbeta_ = fit.sigma2_hat * Minv;
    beta_ = fit.beta_hat;
    n_minus_p_ = static_cast<double>(pb.n_obs() - pb.p());

    Eigen::VectorXd phi(k + 1);
    phi << fit.theta_hat, sigma;
    const Eigen::Index m = phi.size();
    auto half_dev = [&](const Eigen::VectorXd& x) { return 0.5 * ev.unprofiled(x.head(k), x[k]); };
    Eigen::VectorXd h(m);
    for (Eigen::Index i = 0; i < m; ++i) h[i] = 1e-4 * (1.0 + std::abs(phi[i]));

    const double f0 = half_dev(phi);
    Eigen::MatrixXd H(m, m);
    Eigen::VectorXd fp(m), fm(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      Eigen::VectorXd x = phi;
      x[i] += h[i];
      fp[i] = half_dev(x);
      x[i] = phi[i] - h[i];
      fm[i] = half_dev(x);
      H(i, i) = (fp[i] - 2.0 * f0 + fm[i]) / (h[i] * h[i]);
    }
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < i; ++j) {
        double s = 0.0;
        for (double a : {1.0, -1.0})
          for (double b : {1.0, -1.0}) {
            Eigen::VectorXd x = phi;
            x[i] += a * h[i];
            x[j] += b * h[j];
            s += a * b * half_dev(x);
          }
        H(i, j) = H(j, i) = s / (4.0 * h[i] * h[j]);
      }
    H = (0.5 * (H + H.transpose())).eval();

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
    const Eigen::VectorXd lam = es.eigenvalues();
    const double lmax = lam.cwiseAbs().maxCoeff();
    hessian_singular_ = !(lam.minCoeff() > 1e-10 * lmax);
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(m);
    for (Eigen::Index i = 0; i < m; ++i)
      if (lam[i] > 1e-10 * lmax) inv[i] = 1.0 / lam[i];
    cov_phi_ = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();

    // ∂Var(β̂)/∂φ_j, Var(β̂) = σ² Mxx(θ)⁻¹.
    dV_.resize(static_cast<std::size_t>(m));
    for (Eigen::Index j = 0; j < k; ++j) {
      Eigen::VectorXd t = fit.theta_hat;
      t[j] += h[j];
      const Eigen::MatrixXd Mp = ev.evaluate(t, false).XtVinvX.inverse();
      t[j] = fit.theta_hat[j] - h[j];
      const Eigen::MatrixXd Mm = ev.evaluate(t, false).XtVinvX.inverse();
      dV_[static_cast<std::size_t>(j)] = fit.sigma2_hat * (Mp - Mm) / (2.0 * h[j]);
    }
    dV_[static_cast<std::size_t>(k)] = 2.0 * sigma * Minv;
  }

  const Eigen::MatrixXd& beta_covariance() const { return Vbeta_; }
  const Eigen::MatrixXd& phi_covariance() const { return cov_phi_; }
  bool hessian_singular() const { return hessian_singular_; }

  // ν = 2v²/Var(v) for v = ℓᵀVar(β̂)ℓ; empty when Var(v) is not positive.
  std::optional<double> df(const Eigen::RowVectorXd& l) const {
    const double v = l * Vbeta_ * l.transpose();
    Eigen::VectorXd g(static_cast<Eigen::Index>(dV_.size()));
    for (std::size_t j = 0; j < dV_.size(); ++j) g[static_cast<Eigen::Index>(j)] = l * dV_[j] * l.transpose();
    const double var_v = g.dot(cov_phi_ * g);
    if (!(var_v > 0.0) || !std::isfinite(var_v)) return std::nullopt;
    return 2.0 * v * v / var_v;
  }

  // F test of Lβ = 0. The q×q matrix L Var(β̂) Lᵀ is rotated to its
  // eigenbasis, giving q independent single-df contrasts with dfs ν_m.
  // Denominator df (the lmerTest rule): ν if q = 1; the common value if all
  // ν_m agree; 2 if any ν_m ≤ 2; else 2E/(E − q) with E = Σ ν_m/(ν_m − 2),
  // i.e. the df whose F(q, ·) mean matches the mean of the averaged
  // t²-statistics.
  TestResult test(const Eigen::MatrixXd& L, const FixedTerm& effect = {}) const {
    if (L.rows() == 0 || L.cols() != Vbeta_.rows()) throw DomainError("hypothesis matrix has no rows or wrong width");
    const Eigen::MatrixXd VL = L * Vbeta_ * L.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (VL + VL.transpose()));
    const Eigen::VectorXd d = es.eigenvalues();
    const double dmax = d.cwiseAbs().maxCoeff();
    if (!(dmax > 0.0)) throw DomainError("hypothesis matrix has rank 0");
    const Eigen::VectorXd Lb = L * beta_;
    std::vector<double> nu;
    double F = 0.0;
    bool fallback = false;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      if (d[i] <= 1e-10 * dmax) continue;
      const Eigen::VectorXd P = es.eigenvectors().col(i);
      const double c = P.dot(Lb);
      F += c * c / d[i];
      const auto n = df(P.transpose() * L);
      if (!n) fallback = true;
      nu.push_back(n ? *n : n_minus_p_);
    }
    const int q = static_cast<int>(nu.size());
    TestResult r;
    r.effect = effect;
    r.label = term_label(effect);
    r.df_num = q;
    r.F = F / q;
    if (fallback) {
      r.df_den = n_minus_p_;
      r.df_fallback = true;
    } else {
      r.df_den = combine_df(nu);
    }
    r.p_value = f_upper_tail(r.F, q, r.df_den);
    return r;
  }

  TestResult test(const FixedTerm& effect) const {
    return test(hypothesis_matrix(pb_->design, effect), effect);
  }

  static double combine_df(const std::vector<double>& nu) {
    if (nu.size() == 1) return nu[0];
    const auto [lo, hi] = std::minmax_element(nu.begin(), nu.end());
    if (*hi - *lo < 1e-8) {
      double s = 0.0;
      for (double v : nu) s += v;
      return s / static_cast<double>(nu.size());
    }
    if (*lo <= 2.0) return 2.0;
    double E = 0.0;
    for (double v : nu) E += v / (v - 2.0);
    return 2.0 * E / (E - static_cast<double>(nu.size()));
  }

 private:
  const FitProblem* pb_;
  Eigen::MatrixXd Vbeta_, cov_phi_;
  Eigen::VectorXd beta_;
  std::vector<Eigen::MatrixXd> dV_;
  double n_minus_p_ = 0.0;
  bool hessian_singular_ = false;
};

inline TestResult type3_test(const FitResult& fit, const FitProblem& pb, const FixedTerm& effect) {
  return Satterthwaite(pb, fit).test(effect);
}

// Every fixed term of the model, sharing one Hessian.
inline std::vector<TestResult> type3_all(const FitResult& fit, const FitProblem& pb) {
  const Satterthwaite s(pb, fit);
  std::vector<TestResult> out;
  for (const auto& t : pb.spec.fixed_terms) out.push_back(s.test(t));
  return out;
}

// ---------------------------------------------------------------------------
// Quasi-F for balanced designs.
//
// Terms are subsets of the fixed factors plus the random factors P and S.
// A term containing P is nested in the participant-level factors (they are
// "dead" subscripts), likewise S for the stimulus-level ones. Expected mean
// squares follow the restricted (sum-to-zero) model: σ²_T' enters E[MS_T]
// when T' contains every subscript of T and the live subscripts T' adds are
// all random. Random-containing terms absent from the spec are pooled into
// the residual.

namespace detail {

struct QTerm {
  unsigned live = 0, dead = 0;
  bool random = false;
  unsigned all() const { return live | dead; }
};

class QuasiF {
 public:
  QuasiF(const Dataset& data, const ModelSpec& spec) : spec_(spec) {
    if (spec.random_terms.empty()) throw IncompatibleSpec("quasi-F needs at least one random term");
    const int k = static_cast<int>(spec.fixed_factors.size());
    P_ = k;
    S_ = k + 1;
    for (const auto& t : spec.random_terms) {
      if (t.unit != Unit::Stimulus) use_P_ = true;
      if (t.unit != Unit::Participant) use_S_ = true;
    }
    if (!data.has(spec.response) || !data.is_numeric(spec.response)) throw MissingColumn(spec.response);
    const auto& yv = data.numeric(spec.response);
    y_ = Eigen::Map<const Eigen::VectorXd>(yv.data(), static_cast<Eigen::Index>(yv.size()));
    n_ = static_cast<std::size_t>(y_.size());
    codes_.resize(static_cast<std::size_t>(k + 2));
    radix_.assign(static_cast<std::size_t>(k + 2), 1);
    for (int f = 0; f < k; ++f) {
      const auto& fac = spec.fixed_factors[static_cast<std::size_t>(f)];
      if (fac.kind() == FactorKind::PS)
        throw IncompatibleSpec("quasi-F does not support participant-by-stimulus factors ('" + fac.name() + "')");
      if (fac.kind() == FactorKind::P) ap_ |= 1u << f;
      if (fac.kind() == FactorKind::S) as_ |= 1u << f;
      codes_[static_cast<std::size_t>(f)] = detail::factor_column(data, fac).codes;
      radix_[static_cast<std::size_t>(f)] = fac.n_levels();
    }
    if (use_P_) {
      const auto& c = detail::id_column(data, spec.units.participant);
      codes_[static_cast<std::size_t>(P_)] = c.codes;
      radix_[static_cast<std::size_t>(P_)] = c.n_levels();
    }
    if (use_S_) {
      const auto& c = detail::id_column(data, spec.units.stimulus);
      codes_[static_cast<std::size_t>(S_)] = c.codes;
      radix_[static_cast<std::size_t>(S_)] = c.n_levels();
    }
    check_balance();
    build_terms();
    decompose();
  }

  TestResult test(const FixedTerm& effect) const {
    unsigned mask = 0;
    for (const auto& name : effect) {
      const int idx = spec_.factor_index(name);
      if (idx < 0) throw UnknownIdentifier(name);
      mask |= 1u << idx;
    }
    const int e = find_term(mask, 0);
    if (mask == 0 || e < 0) throw UnknownIdentifier(term_label(effect));
    const auto& T = terms_[static_cast<std::size_t>(e)];

    // Denominator weights w with Σ_s w_s E[MS_s] = E[MS_effect] − fixed part.
    const Eigen::Index ns = static_cast<Eigen::Index>(sources_.size());
    Eigen::MatrixXd M(ns, ns);
    for (Eigen::Index r = 0; r < ns; ++r) M.row(r) = ems(terms_[static_cast<std::size_t>(sources_[static_cast<std::size_t>(r)])]);
    const Eigen::RowVectorXd target = ems(T);
    const Eigen::VectorXd w = M.transpose().colPivHouseholderQr().solve(target.transpose());
    if ((M.transpose() * w - target.transpose()).norm() > 1e-8 * (1.0 + target.norm()))
      throw IncompatibleSpec("no combination of mean squares matches the effect's expected mean square");

    TestResult r;
    r.effect = effect;
    r.label = term_label(effect);
    r.df_num = static_cast<int>(df_[static_cast<std::size_t>(e)]);
    const double ms_e = ss_[static_cast<std::size_t>(e)] / df_[static_cast<std::size_t>(e)];
    double den = 0.0, den_pos = 0.0, den_neg = 0.0, sq = 0.0, sq_pos = 0.0, sq_neg = 0.0;
    for (Eigen::Index s = 0; s < ns; ++s) {
      if (std::abs(w[s]) < 1e-12) continue;
      const auto si = static_cast<std::size_t>(sources_[static_cast<std::size_t>(s)]);
      const double c = w[s] * ss_[si] / df_[si];
      const double c2 = c * c / df_[si];
      den += c;
      sq += c2;
      (c > 0 ? den_pos : den_neg) += std::abs(c);
      (c > 0 ? sq_pos : sq_neg) += c2;
    }
    if (!(ms_e > 0.0)) {
      r.F = 0.0;
      r.df_den = den > 0.0 && sq > 0.0 ? den * den / sq : static_cast<double>(residual_df_);
      r.p_value = 1.0;
      return r;
    }
    if (den > 0.0) {
      // F' = MS_effect / Σ w MS with Satterthwaite denominator df.
      r.F = ms_e / den;
      r.df_den = den * den / sq;
      r.p_value = f_upper_tail(r.F, r.df_num, r.df_den);
      return r;
    }
    // F'': negative-weight mean squares move to the numerator.
    const double num = ms_e + den_neg;
    const double df1 = num * num / (ms_e * ms_e / df_[static_cast<std::size_t>(e)] + sq_neg);
    r.F = den_pos > 0.0 ? num / den_pos : std::numeric_limits<double>::infinity();
    r.df_den = den_pos > 0.0 ? den_pos * den_pos / sq_pos : 1.0;
    r.p_value = f_upper_tail(r.F, df1, r.df_den);
    return r;
  }

 private:
  void check_balance() {
    const unsigned dead_all = (use_P_ ? ap_ : 0u) | (use_S_ ? as_ : 0u);
    const unsigned full = (1u << (P_ + 2)) - 1u;
    unsigned cells_mask = full;
    if (!use_P_) cells_mask &= ~(1u << P_);
    if (!use_S_) cells_mask &= ~(1u << S_);
    if (n_ == 0) throw UnbalancedDesign("no observations");
    std::unordered_map<std::int64_t, int> count;
    for (std::size_t i = 0; i < n_; ++i) ++count[key(cells_mask, i)];
    const int c0 = count.begin()->second;
    for (const auto& [_, c] : count)
      if (c != c0) throw UnbalancedDesign("cells have unequal replication");
    std::int64_t expected = 1;
    for (int f = 0; f < P_ + 2; ++f)
      if ((cells_mask >> f & 1u) && !(dead_all >> f & 1u)) expected *= radix_[static_cast<std::size_t>(f)];
    if (static_cast<std::int64_t>(count.size()) != expected) throw UnbalancedDesign("design has empty cells");
    auto nested = [&](int unit, unsigned dead, std::int64_t& per) {
      std::unordered_map<int, std::int64_t> owner;
      std::unordered_map<std::int64_t, std::int64_t> groups;
      for (std::size_t i = 0; i < n_; ++i) {
        const int g = codes_[static_cast<std::size_t>(unit)][i];
        const std::int64_t k = key(dead, i);
        auto [it, fresh] = owner.emplace(g, k);
        if (fresh) ++groups[k];
        else if (it->second != k) throw UnbalancedDesign("a unit-level factor varies within a unit");
      }
      per = groups.begin()->second;
      std::int64_t levels = 1;
      for (int f = 0; f < P_; ++f)
        if (dead >> f & 1u) levels *= radix_[static_cast<std::size_t>(f)];
      for (const auto& [_, c] : groups)
        if (c != per) throw UnbalancedDesign("units are unevenly spread over unit-level factor levels");
      if (static_cast<std::int64_t>(groups.size()) != levels) throw UnbalancedDesign("a unit-level factor level has no units");
      if (static_cast<std::int64_t>(owner.size()) != radix_[static_cast<std::size_t>(unit)])
        throw UnbalancedDesign("unused unit levels");
    };
    if (use_P_) nested(P_, ap_, m_P_);
    if (use_S_) nested(S_, as_, m_S_);
  }

  void build_terms() {
    const int k = P_;
    std::vector<unsigned> rsets{0u};
    if (use_P_) rsets.push_back(1u << P_);
    if (use_S_) rsets.push_back(1u << S_);
    if (use_P_ && use_S_) rsets.push_back((1u << P_) | (1u << S_));
    for (unsigned R : rsets)
      for (unsigned A = 0; A < (1u << k); ++A) {
        const bool hasP = R >> P_ & 1u, hasS = R >> S_ & 1u;
        if ((hasP && (A & ap_)) || (hasS && (A & as_))) continue;
        QTerm t;
        t.live = A | R;
        t.dead = (hasP ? ap_ : 0u) | (hasS ? as_ : 0u);
        t.random = R != 0;
        terms_.push_back(t);
      }
    for (const auto& rt : spec_.random_terms) {
      unsigned A = 0;
      for (const auto& name : rt.factors) A |= 1u << spec_.factor_index(name);
      const unsigned R = rt.unit == Unit::Participant ? 1u << P_
                         : rt.unit == Unit::Stimulus  ? 1u << S_
                                                      : (1u << P_) | (1u << S_);
      const int idx = find_term(A, R);
      if (idx < 0) throw IncompatibleSpec("random term " + term_label(rt, spec_.units) + " is not a valid balanced-design term");
      sources_.push_back(idx);
    }
  }

  int find_term(unsigned A, unsigned R) const {
    for (std::size_t i = 0; i < terms_.size(); ++i)
      if (terms_[i].live == (A | R)) return static_cast<int>(i);
    return -1;
  }

  std::int64_t key(unsigned mask, std::size_t i) const {
    std::int64_t k = 0;
    for (int f = 0; f < P_ + 2; ++f)
      if (mask >> f & 1u) k = k * radix_[static_cast<std::size_t>(f)] + codes_[static_cast<std::size_t>(f)][i];
    return k;
  }

  // Per-observation cell mean over the factors in `mask`.
  const Eigen::VectorXd& cell_means(unsigned mask) {
    auto it = means_.find(mask);
    if (it != means_.end()) return it->second;
    std::unordered_map<std::int64_t, std::pair<double, int>> acc;
    for (std::size_t i = 0; i < n_; ++i) {
      auto& a = acc[key(mask, i)];
      a.first += y_[static_cast<Eigen::Index>(i)];
      ++a.second;
    }
    Eigen::VectorXd m(static_cast<Eigen::Index>(n_));
    for (std::size_t i = 0; i < n_; ++i) {
      const auto& a = acc.at(key(mask, i));
      m[static_cast<Eigen::Index>(i)] = a.first / a.second;
    }
    return means_.emplace(mask, std::move(m)).first->second;
  }

  void decompose() {
    double used_df = 0.0, used_ss = 0.0;
    for (const auto& t : terms_) {
      // Möbius inversion over the live subscripts, dead ones always kept.
      Eigen::VectorXd eff = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_));
      for (unsigned B = t.live;; B = (B - 1) & t.live) {
        const int sign = (__builtin_popcount(t.live & ~B) % 2) ? -1 : 1;
        eff += sign * cell_means(B | t.dead);
        if (B == 0) break;
      }
      double df = 1.0;
      for (int f = 0; f < P_ + 2; ++f) {
        const double l = f == P_ ? static_cast<double>(m_P_) : f == S_ ? static_cast<double>(m_S_)
                                                                       : static_cast<double>(radix_[static_cast<std::size_t>(f)]);
        if (t.live >> f & 1u) df *= l - 1.0;
        else if (t.dead >> f & 1u) df *= l;
      }
      ss_.push_back(eff.squaredNorm());
      df_.push_back(df);
      std::unordered_map<std::int64_t, int> cells;
      for (std::size_t i = 0; i < n_; ++i) cells[key(t.all(), i)] = 1;
      coef_.push_back(static_cast<double>(n_) / static_cast<double>(cells.size()));
    }
    for (std::size_t i = 0; i < terms_.size(); ++i) {
      const bool source = std::find(sources_.begin(), sources_.end(), static_cast<int>(i)) != sources_.end();
      if (!terms_[i].random || source) {
        used_df += df_[i];
        used_ss += ss_[i];
      }
    }
    residual_df_ = static_cast<double>(n_) - used_df;
    if (residual_df_ < 0.5) throw IncompatibleSpec("no residual degrees of freedom left for the quasi-F");
    // The residual is a pseudo-term appended at the end.
    terms_.push_back({});
    ss_.push_back(std::max(0.0, y_.squaredNorm() - used_ss));
    df_.push_back(residual_df_);
    coef_.push_back(1.0);
    sources_.push_back(static_cast<int>(terms_.size()) - 1);
  }

  // E[MS_T] as coefficients over (sources..., residual).
  Eigen::RowVectorXd ems(const QTerm& T) const {
    const std::size_t ns = sources_.size();
    Eigen::RowVectorXd e = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(ns));
    const unsigned fixed_bits = (1u << P_) - 1u;
    const bool is_residual = &T == &terms_.back();
    for (std::size_t s = 0; s + 1 < ns; ++s) {
      const auto& U = terms_[static_cast<std::size_t>(sources_[s])];
      if (is_residual) continue;
      if ((T.all() & ~U.all()) != 0) continue;
      if ((U.live & ~T.all()) & fixed_bits) continue;
      e[static_cast<Eigen::Index>(s)] = coef_[static_cast<std::size_t>(sources_[s])];
    }
    e[static_cast<Eigen::Index>(ns - 1)] = 1.0;
    return e;
  }

  const ModelSpec& spec_;
  Eigen::VectorXd y_;
  std::size_t n_ = 0;
  int P_ = 0, S_ = 0;
  bool use_P_ = false, use_S_ = false;
  unsigned ap_ = 0, as_ = 0;
  std::int64_t m_P_ = 1, m_S_ = 1;
  std::vector<std::vector<int>> codes_;
  std::vector<std::int64_t> radix_;
  std::vector<QTerm> terms_;
  std::vector<int> sources_;
  std::vector<double> ss_, df_, coef_;
  double residual_df_ = 0.0;
  std::map<unsigned, Eigen::VectorXd> means_;
};

}  // namespace detail

inline TestResult quasi_f(const Dataset& data, const ModelSpec& spec, const FixedTerm& effect) {
  return detail::QuasiF(data, spec).test(effect);
}

// ---------------------------------------------------------------------------
// gANOVA ↔ RI-L. For one factor with n levels and an orthonormal zero-sum
// coding C, CCᵀ = I − (1/n)11ᵀ, so the two models give the same marginal
// covariance iff the slope variances agree and the RI-L intercept variance is
// σ²_i − σ²_F/n. The RI-L model cannot represent σ²_i < σ²_F/n.

struct VarianceMap {
  double sigma2_intercept_uc = 0.0;
  double sigma2_F_uc = 0.0;
  double sigma2_eps_uc = 0.0;
  bool feasible = false;
};

struct GanovaVariances {
  double sigma2_intercept = 0.0;
  double sigma2_F = 0.0;
  double sigma2_eps = 0.0;
};

inline double ganova_ril_fraction(int n_levels) {
  if (n_levels < 2) throw InvalidLevels("a factor needs at least 2 levels");
  return 1.0 / n_levels;
}

inline VarianceMap map_ganova_to_ril(double sigma2_c_i, double sigma2_c_F, double sigma2_c_eps, int n_levels) {
  const double a = ganova_ril_fraction(n_levels);
  VarianceMap m;
  m.sigma2_intercept_uc = sigma2_c_i - a * sigma2_c_F;
  m.sigma2_F_uc = sigma2_c_F;
  m.sigma2_eps_uc = sigma2_c_eps;
  m.feasible = m.sigma2_intercept_uc >= 0.0;
  return m;
}

inline GanovaVariances map_ril_to_ganova(const VarianceMap& m, int n_levels) {
  const double a = ganova_ril_fraction(n_levels);
  return {m.sigma2_intercept_uc + a * m.sigma2_F_uc, m.sigma2_F_uc, m.sigma2_eps_uc};
}

// Absolute variance of each random term of a fit (σ² · mean diagonal of its
// relative covariance block), keyed like term_label(term, ids).
inline std::map<std::string, double> term_variances(const FitResult& r, const UnitIds& ids = {}) {
  std::map<std::string, double> out;
  const auto cov = relative_covariances(r);
  for (std::size_t u = 0; u < r.structure.units.size(); ++u) {
    const auto& lay = r.structure.units[u];
    for (std::size_t t = 0; t < lay.terms.size(); ++t)
      out[term_label(lay.terms[t], ids)] =
          r.sigma2_hat * cov[u].diagonal().segment(lay.offset[t], lay.width[t]).mean();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model comparison.

enum class SelectionCriterion { LikelihoodRatio, AIC };

inline double lrt_p_value(double deviance_small, double deviance_big, int df) {
  if (df <= 0) return 1.0;
  return chi2_upper_tail(std::max(0.0, deviance_small - deviance_big), df);
}

inline double aic(const FitResult& r) { return r.deviance + 2.0 * r.structure.n_params_total(); }

// True when the larger of two nested fits is preferred.
inline bool prefer_bigger(const FitResult& small, const FitResult& big, SelectionCriterion c, double alpha) {
  if (c == SelectionCriterion::AIC) return aic(big) < aic(small);
  return lrt_p_value(small.deviance, big.deviance, big.structure.n_params() - small.structure.n_params()) < alpha;
}

// ---------------------------------------------------------------------------
// Structure selection by PCA of the MAX fit.

struct CsPcaOptions {
  SelectionCriterion criterion = SelectionCriterion::LikelihoodRatio;
  double alpha = 0.05;
  double variance_share = 0.999;  // leading eigenvalues kept until this share
  FitOptions fit;
};

struct CsPcaResult {
  CovStructure structure;
  FitResult fit;
  ModelSpec spec;                 // random terms of the selected structure
  std::vector<int> pca_rank;      // per unit of the MAX structure
  bool correlated_after_pca = false;
  std::vector<std::string> steps;
};

namespace detail {

inline ModelSpec with_terms(ModelSpec spec, std::vector<RandomTerm> terms, bool correlated) {
  for (auto& t : terms) t.bar = correlated ? Bar::Correlated : Bar::Uncorrelated;
  spec.random_terms = std::move(terms);
  return spec;
}

inline CovFamily pca_family(const std::vector<RandomTerm>& terms, bool correlated) {
  CovFamily f{correlated ? FamilyTag::MAX : FamilyTag::ZCPpoly, false};
  for (const auto& t : terms)
    if (t.unit == Unit::ParticipantStimulus) f.include_ps = true;
  return f;
}

// Index of the term to drop next: highest order, then the later unit, then
// the later term. Intercepts are never dropped.
inline int highest_term(const std::vector<RandomTerm>& terms) {
  int best = -1;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].order() == 0) continue;
    if (best < 0 || terms[i].order() >= terms[static_cast<std::size_t>(best)].order()) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace detail

// The spec's random terms define the MAX structure (bars are ignored).
inline CsPcaResult cs_pca_select(const Dataset& data, const ModelSpec& spec, const CsPcaOptions& opt = {}) {
  auto data_ptr = std::make_shared<const Dataset>(data);
  auto fit_terms = [&](const std::vector<RandomTerm>& terms, bool correlated, const FitResult* from) {
    const ModelSpec s = detail::with_terms(spec, terms, correlated);
    const CovStructure cs = realize(s, detail::pca_family(terms, correlated));
    FitProblem pb = make_problem(s, data_ptr, cs);
    FitOptions fo = opt.fit;
    if (from) fo.start = warm_start(*from, cs);
    return fit(pb, fo);
  };

  CsPcaResult out;
  std::vector<RandomTerm> terms = spec.random_terms;
  const FitResult max_fit = fit_terms(terms, true, nullptr);
  if (!max_fit.converged) throw MaxFitFailed("the MAX fit did not converge with any optimizer");
  out.steps.push_back("MAX deviance " + std::to_string(max_fit.deviance));

  // Per unit: dimensionality from the eigenvalues of the relative covariance.
  const auto cov = relative_covariances(max_fit);
  std::vector<RandomTerm> kept;
  for (std::size_t u = 0; u < max_fit.structure.units.size(); ++u) {
    const auto& lay = max_fit.structure.units[u];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov[u]);
    Eigen::VectorXd ev = es.eigenvalues().reverse().cwiseMax(0.0);
    const double total = ev.sum();
    int r = 0;
    double acc = 0.0;
    while (total > 0.0 && r < ev.size() && acc < opt.variance_share * total) acc += ev[r++];
    r = std::max(r, 1);
    out.pca_rank.push_back(r);
    std::vector<RandomTerm> unit_terms = lay.terms;
    std::vector<int> width = lay.width;
    int cols = lay.dim;
    while (cols > r) {
      const int h = detail::highest_term(unit_terms);
      if (h < 0) break;
      cols -= width[static_cast<std::size_t>(h)];
      unit_terms.erase(unit_terms.begin() + h);
      width.erase(width.begin() + h);
    }
    kept.insert(kept.end(), unit_terms.begin(), unit_terms.end());
  }

  FitResult plus = fit_terms(kept, true, &max_fit);
  FitResult minus = fit_terms(kept, false, &max_fit);
  bool correlated = prefer_bigger(minus, plus, opt.criterion, opt.alpha);
  out.correlated_after_pca = correlated;
  FitResult current = correlated ? plus : minus;
  out.steps.push_back(std::string("after PCA: ") + (correlated ? "correlated" : "uncorrelated") + ", " +
                      std::to_string(kept.size()) + " terms");

  for (;;) {
    const int h = detail::highest_term(kept);
    if (h < 0) break;
    std::vector<RandomTerm> smaller = kept;
    smaller.erase(smaller.begin() + h);
    FitResult s = fit_terms(smaller, correlated, &current);
    if (prefer_bigger(s, current, opt.criterion, opt.alpha)) break;
    out.steps.push_back("dropped " + term_label(kept[static_cast<std::size_t>(h)], spec.units));
    kept = std::move(smaller);
    current = std::move(s);
  }

  // Add or remove the correlations, whichever the PCA step did not use.
  FitResult flipped = fit_terms(kept, !correlated, &current);
  const bool flip = correlated ? !prefer_bigger(flipped, current, opt.criterion, opt.alpha)
                               : prefer_bigger(current, flipped, opt.criterion, opt.alpha);
  if (flip) {
    correlated = !correlated;
    current = std::move(flipped);
    out.steps.push_back(std::string("final: switched to ") + (correlated ? "correlated" : "uncorrelated"));
  }
  out.spec = detail::with_terms(spec, kept, correlated);
  out.structure = current.structure;
  out.fit = std::move(current);
  return out;
}

}  // namespace cremem
