#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "cremem/cremem.hpp"
#include "helpers.hpp"
#include "oracle.hpp"

using namespace cremem;

namespace {

struct SmallProblem {
  Dataset data;
  std::string design;
  CovFamily family;
};

// Small generated data sets (at most 108 rows) over a rotating family.
SmallProblem small_problem(int k) {
  static const char* designs[] = {"M1", "M2", "M4"};
  static const char* families[] = {"RI", "RI-L", "MAX", "ZCP-sum", "ZCP-poly", "gANOVA",
                                   "RI+", "RI-L+", "MAX+", "ZCP-sum+", "ZCP-poly+", "gANOVA+"};
  GenConfig g;
  g.design = designs[k % 3];
  g.n_participants = 6;
  g.n_stimuli = 6;
  g.include_ps_effects = k % 2 == 0;
  g.re_pattern = k % 4 < 2 ? RePattern::Spherical : RePattern::Correlated;
  g.seed = 1000 + static_cast<std::uint64_t>(k);
  return {generate(g), g.design, parse_family(families[k % 12])};
}

double rel(double a, double b) { return std::abs(a - b) / (1.0 + std::abs(b)); }

}  // namespace

TEST(Reml, MatchesDenseOracle) {
  std::mt19937_64 rng(77);
  for (int k = 0; k < 36; ++k) {
    const auto sp = small_problem(k);
    const auto pb = make_problem(study_spec(sp.design, sp.family), sp.data, sp.family);
    ASSERT_LE(pb.n_obs(), 200);
    for (int rep = 0; rep < 2; ++rep) {
      const Eigen::VectorXd th = rep == 0 ? pb.structure().initial_theta() : testdata::random_theta(pb.structure(), rng);
      const double ours = profiled_deviance(pb, th).deviance;
      const double ref = oracle::dense_reml_deviance(pb, th);
      EXPECT_LT(rel(ours, ref), 1e-9) << sp.design << " " << family_name(sp.family) << " rep " << rep;
    }
  }
}

// θ = 0: ordinary least squares with the REML variance estimate.
TEST(Reml, ZeroThetaIsFixedEffectsModel) {
  const auto sp = small_problem(5);
  const auto pb = make_problem(study_spec(sp.design, sp.family), sp.data, sp.family);
  const Eigen::VectorXd th = Eigen::VectorXd::Zero(pb.structure().n_params());
  const auto& X = pb.design.X;
  const Eigen::VectorXd beta = X.colPivHouseholderQr().solve(pb.y);
  const double rss = (pb.y - X * beta).squaredNorm();
  const double n = static_cast<double>(pb.n_obs()), p = static_cast<double>(pb.p());
  const double s2 = rss / (n - p);
  const Eigen::MatrixXd XtX = X.transpose() * X;
  const Eigen::MatrixXd Lx = XtX.llt().matrixL();
  const double logdet = 2.0 * Lx.diagonal().array().log().sum();
  const double want = (n - p) * std::log(2.0 * std::numbers::pi * s2) + logdet + (n - p);
  const auto ev = profiled_deviance(pb, th);
  EXPECT_LT(rel(ev.deviance, want), 1e-10);
  EXPECT_LT((ev.beta - beta).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Reml, DuplicatedRowsAgreeWithOracle) {
  const auto sp = small_problem(1);
  std::vector<std::size_t> twice;
  for (std::size_t i = 0; i < sp.data.n_obs(); ++i) twice.push_back(i);
  for (std::size_t i = 0; i < sp.data.n_obs(); ++i) twice.push_back(i);
  // Row selection with repeats, built column by column.
  Dataset d(twice.size());
  for (const auto& name : sp.data.column_order()) {
    if (sp.data.is_numeric(name)) {
      std::vector<double> v;
      for (auto i : twice) v.push_back(sp.data.numeric(name)[i]);
      d.add_numeric(name, v);
    } else {
      const auto& c = sp.data.categorical(name);
      Categorical e{c.levels, {}};
      for (auto i : twice) e.codes.push_back(c.codes[i]);
      d.add_categorical(name, e);
    }
  }
  const auto pb1 = make_problem(study_spec(sp.design, sp.family), sp.data, sp.family);
  const auto pb2 = make_problem(study_spec(sp.design, sp.family), d, sp.family);
  std::mt19937_64 rng(3);
  const Eigen::VectorXd th = testdata::random_theta(pb1.structure(), rng);
  EXPECT_LT(rel(profiled_deviance(pb2, th).deviance, oracle::dense_reml_deviance(pb2, th)), 1e-9);
  EXPECT_GT(std::abs(profiled_deviance(pb2, th).deviance - profiled_deviance(pb1, th).deviance), 1.0);
}

TEST(Reml, RowPermutationInvariance) {
  GenConfig g;
  g.n_participants = 8;
  g.n_stimuli = 8;
  g.seed = 5;
  const auto data = generate(g);
  std::vector<std::size_t> perm(data.n_obs());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(11);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto shuffled = data.permuted(perm);
  for (const char* f : {"RI", "gANOVA", "MAX", "ZCP-sum+"}) {
    const auto fam = parse_family(f);
    const auto spec = study_spec("M1", fam);
    const auto a = make_problem(spec, data, fam);
    const auto b = make_problem(spec, shuffled, fam);
    const Eigen::VectorXd th = testdata::random_theta(a.structure(), rng);
    EXPECT_LT(rel(profiled_deviance(a, th).deviance, profiled_deviance(b, th).deviance), 1e-11) << f;
    const auto fa = fit(a), fb = fit(b);
    ASSERT_TRUE(fa.converged && fb.converged) << f;
    EXPECT_LT(rel(fa.deviance, fb.deviance), 1e-8) << f;
    EXPECT_LT((fa.beta_hat - fb.beta_hat).cwiseAbs().maxCoeff(), 1e-5) << f;
  }
}

TEST(Reml, ConstrainedFitInvariantToBasisRotation) {
  testdata::WithinConfig c;
  c.levels = 3;
  c.n_participants = 12;
  c.seed = 9;
  const auto data = testdata::within_data(c);
  const auto spec = parse_formula("y ~ Am + (1|PT|Am)", testdata::within_table(c));
  const CovFamily fam{FamilyTag::GANOVA, false};
  const double ang = 0.7;
  Eigen::Matrix2d R;
  R << std::cos(ang), -std::sin(ang), std::sin(ang), std::cos(ang);
  ContrastMatrix rot = make_contrast(3, ContrastKind::OrthonormalPolynomial);
  rot.values = (rot.values * R).eval();
  const auto a = make_problem(spec, data, fam);
  const auto b = make_problem(spec, data, fam, {{"Am", rot}});
  std::mt19937_64 rng(1);
  const Eigen::VectorXd th = testdata::random_theta(a.structure(), rng);
  EXPECT_LT(rel(profiled_deviance(a, th).deviance, profiled_deviance(b, th).deviance), 1e-12);
  EXPECT_THROW(make_problem(spec, data, fam, {{"Am", make_contrast(2, ContrastKind::OrthonormalPolynomial)}}),
               LevelMismatch);
}

// RI is gANOVA with the slope variances pinned at zero, and gANOVA is
// ZCP-poly with equal per-contrast variances, which is MAX without
// correlations: minimized deviances are ordered accordingly.
TEST(Reml, NestedFamiliesOrderDeviance) {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    GenConfig g;
    g.design = "M2";
    g.n_participants = 9;
    g.n_stimuli = 9;
    g.seed = seed;
    const auto data = generate(g);
    auto dev = [&](const char* f) {
      const auto fam = parse_family(f);
      const auto r = fit(make_problem(study_spec("M2", fam), data, fam));
      EXPECT_TRUE(r.converged) << f;
      return r.deviance;
    };
    const double ri = dev("RI"), ga = dev("gANOVA"), zcp = dev("ZCP-poly");
    EXPECT_LE(ga, ri + 1e-6);
    EXPECT_LE(zcp, ga + 1e-6);
  }
}

TEST(Reml, RefitWithSameStructureIsIdempotent) {
  const auto sp = small_problem(5);
  const auto pb = make_problem(study_spec(sp.design, sp.family), sp.data, sp.family);
  const auto r = fit(pb);
  ASSERT_TRUE(r.converged);
  const auto again = refit_with_structure(pb, r, pb.structure());
  EXPECT_TRUE(again.converged);
  EXPECT_NEAR(again.deviance, r.deviance, 1e-9);
}

TEST(Reml, RefitMaxAsZcpIsNotBetter) {
  GenConfig g;
  g.n_participants = 10;
  g.n_stimuli = 10;
  g.seed = 4;
  g.re_pattern = RePattern::Correlated;
  const auto data = generate(g);
  const auto fam = parse_family("MAX");
  const auto pb = make_problem(study_spec("M1", fam), data, fam);
  const auto r = fit(pb);
  ASSERT_TRUE(r.converged);
  const auto zfam = parse_family("ZCP-poly");
  const auto z = refit_with_structure(pb, r, realize(study_spec("M1", zfam), zfam));
  ASSERT_TRUE(z.converged);
  EXPECT_GE(z.deviance, r.deviance - 1e-6);
}

// Dummy-coded fits cannot reach negative intercept covariance; the
// constrained coding can, so it wins clearly on data generated there.
TEST(Reml, ConstrainedBeatsDummyOutsideFeasibleRegion) {
  testdata::WithinConfig c;
  c.n_participants = 20;
  c.levels = 3;
  c.var_i = 0.0;
  c.var_f = 4.0;
  c.seed = 31;
  const auto data = testdata::within_data(c);
  const auto table = testdata::within_table(c);
  const auto r_pb = make_problem(parse_formula("y ~ Am + (1|PT) + (1|PT:Am)", table), data, {FamilyTag::RIL, false});
  const auto ril = fit(r_pb);
  ASSERT_TRUE(ril.converged);
  EXPECT_TRUE(ril.boundary_flags[0]);
  const auto g = refit_with_structure(
      r_pb, ril, realize(parse_formula("y ~ Am + (1|PT|Am)", table), {FamilyTag::GANOVA, false}));
  ASSERT_TRUE(g.converged);
  EXPECT_LT(g.deviance, ril.deviance - 1e-3);
}

TEST(Reml, RecoversRandomInterceptVariances) {
  std::vector<double> err_p, err_s;
  for (std::uint64_t s = 0; s < 50; ++s) {
    // y = u_P + w_S + e with var(u) = 4, var(w) = 2.25, var(e) = 1.
    std::mt19937_64 rng(500 + s);
    std::normal_distribution<double> N;
    const int n = 30;
    std::vector<double> u(n), w(n);
    for (auto& x : u) x = 2.0 * N(rng);
    for (auto& x : w) x = 1.5 * N(rng);
    std::vector<double> y;
    std::vector<int> pt, sm, am;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < 2; ++k) {
          y.push_back(u[i] + w[j] + N(rng));
          pt.push_back(i), sm.push_back(j), am.push_back(k);
        }
    Dataset d(y.size());
    d.add_numeric("y", y);
    d.add_categorical("PT", {testdata::labels('P', n), pt});
    d.add_categorical("SM", {testdata::labels('S', n), sm});
    d.add_categorical("Am", {testdata::labels('a', 2), am});
    FactorTable t;
    t.emplace("Am", Factor("Am", FactorKind::M, 2));
    const auto r = fit(make_problem(parse_formula("y ~ Am + (1|PT) + (1|SM)", t), d, {FamilyTag::RI, false}));
    ASSERT_TRUE(r.converged);
    err_p.push_back(std::abs(r.theta_hat[0] * r.theta_hat[0] / 4.0 - 1.0));
    err_s.push_back(std::abs(r.theta_hat[1] * r.theta_hat[1] / 2.25 - 1.0));
  }
  std::nth_element(err_p.begin(), err_p.begin() + 25, err_p.end());
  std::nth_element(err_s.begin(), err_s.begin() + 25, err_s.end());
  EXPECT_LT(err_p[25], 0.25);
  EXPECT_LT(err_s[25], 0.25);
}

TEST(Reml, NoiseFreeDataGoesToBoundary) {
  GenConfig g;
  g.n_participants = 6;
  g.n_stimuli = 6;
  g.effect_scale = 1.0;
  const auto gen = generate_with_effects(g);
  Dataset d = gen.data;
  // Fixed part plus a tiny jitter only.
  std::mt19937_64 rng(2);
  std::normal_distribution<double> N;
  auto& y = d.numeric_mut("y");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = gen.fixed_part[static_cast<Eigen::Index>(i)] + 1e-8 * N(rng);
  const auto fam = parse_family("gANOVA");
  const auto r = fit(make_problem(study_spec("M1", fam), d, fam));
  ASSERT_TRUE(r.converged);
  EXPECT_LT(r.sigma2_hat, 1e-14);
  for (bool b : r.boundary_flags) EXPECT_TRUE(b);
  for (Eigen::Index i = 0; i < r.theta_hat.size(); ++i) EXPECT_LT(r.sigma2_hat * r.theta_hat[i] * r.theta_hat[i], 1e-12);
}

TEST(Reml, FitReportsCascadeTrace) {
  const auto sp = small_problem(4);
  const auto pb = make_problem(study_spec(sp.design, sp.family), sp.data, sp.family);
  const auto r = fit(pb);
  ASSERT_TRUE(r.converged);
  ASSERT_FALSE(r.trace.empty());
  EXPECT_TRUE(r.trace.back().probe_passed);
  EXPECT_GT(r.sigma2_hat, 0.0);
  EXPECT_TRUE(std::isfinite(r.deviance));
  EXPECT_EQ(static_cast<Eigen::Index>(r.boundary_flags.size()), r.theta_hat.size());
  // The result satisfies the probe it was accepted with.
  const DevianceEvaluator ev(pb);
  EXPECT_TRUE(stencil_probe([&](const Eigen::VectorXd& t) { return ev(t); }, r.theta_hat, r.deviance,
                            pb.structure().lower_bounds(), 1e-8));
}

TEST(Reml, RejectsBadInputs) {
  const auto sp = small_problem(0);
  const auto spec = study_spec(sp.design, sp.family);
  Dataset d = sp.data;
  EXPECT_THROW(make_problem(study_spec(sp.design, parse_family("gANOVA+")), d, parse_family("gANOVA")),
               IncompatibleSpec);
  EXPECT_THROW(make_problem(study_spec(sp.design, parse_family("gANOVA")), d, parse_family("ZCP")), IncompatibleSpec);
  const auto pb = make_problem(spec, d, sp.family);
  EXPECT_THROW(profiled_deviance(pb, Eigen::VectorXd::Ones(pb.structure().n_params() + 1)), DomainError);
  Eigen::VectorXd neg = pb.structure().initial_theta();
  neg[0] = -1.0;
  EXPECT_THROW(profiled_deviance(pb, neg), DomainError);
}
