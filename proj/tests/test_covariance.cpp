#include <cmath>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "cremem/cremem.hpp"
#include "helpers.hpp"

using namespace cremem;

TEST(Contrasts, SumCoding) {
  const auto c = make_contrast(3, ContrastKind::Sum);
  Eigen::MatrixXd want(3, 2);
  want << 1, 0, 0, 1, -1, -1;
  EXPECT_EQ(c.values, want);
}

TEST(Contrasts, PolynomialIsOrthonormalZeroSum) {
  for (int n = 2; n <= 9; ++n) {
    const auto c = make_contrast(n, ContrastKind::OrthonormalPolynomial);
    ASSERT_EQ(c.n_columns(), n - 1);
    EXPECT_TRUE(is_orthonormal_zero_sum(c.values)) << n;
  }
  const auto c2 = make_contrast(2, ContrastKind::OrthonormalPolynomial).values;
  EXPECT_NEAR(std::abs(c2(0, 0)), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(c2(0, 0), -c2(1, 0), 1e-15);
  // Linear and quadratic scores for 3 levels.
  const auto c3 = make_contrast(3, ContrastKind::OrthonormalPolynomial).values;
  EXPECT_NEAR(c3(0, 0), -1.0 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(c3(1, 0), 0.0, 1e-12);
  EXPECT_NEAR(c3(1, 1), -2.0 / std::sqrt(6.0), 1e-12);
}

TEST(Contrasts, GramIdentityFraction) {
  for (int n = 2; n <= 8; ++n) {
    const auto c = make_contrast(n, ContrastKind::OrthonormalPolynomial);
    const double a = contrast_gram_identity(c);
    EXPECT_NEAR(a, 1.0 / n, 1e-12);
    // Independent check: C Cᵀ is the centring projector.
    const Eigen::MatrixXd P = Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / n);
    EXPECT_LT((c.values * c.values.transpose() - P).cwiseAbs().maxCoeff(), 1e-10);
  }
  EXPECT_THROW(contrast_gram_identity(make_contrast(3, ContrastKind::Sum)), NotOrthonormal);
  EXPECT_THROW(make_contrast(1, ContrastKind::Sum), InvalidLevels);
}

TEST(Covariance, ParameterCountsAllDesigns) {
  const char* designs[] = {"M1", "M2", "M3", "M4", "M5"};
  struct Row {
    const char* family;
    int counts[5];
  };
  const Row table[] = {
      {"RI", {2, 2, 2, 2, 2}},           {"RI-L", {8, 8, 16, 16, 64}},
      {"MAX", {20, 90, 342, 342, 5256}}, {"ZCP", {8, 18, 36, 36, 144}},
      {"gANOVA", {8, 8, 16, 16, 64}},    {"RI+", {3, 3, 3, 3, 3}},
      {"RI-L+", {9, 9, 19, 17, 71}},     {"MAX+", {21, 91, 352, 343, 5311}},
      {"ZCP+", {9, 19, 40, 37, 154}},    {"gANOVA+", {9, 9, 19, 17, 71}},
  };
  int cells = 0;
  for (const auto& row : table)
    for (int d = 0; d < 5; ++d, ++cells)
      EXPECT_EQ(count_params(parse_family(row.family), standard_design(designs[d])), row.counts[d])
          << row.family << " " << designs[d];
  EXPECT_EQ(cells, 50);
}

TEST(Covariance, SingleManipulationFactor) {
  FactorTable t;
  t.emplace("Am", Factor("Am", FactorKind::M, 2));
  const auto spec = parse_formula("y ~ Am + (1|PT|Am)", t);
  const auto cs = realize(spec, {FamilyTag::GANOVA, false});
  EXPECT_EQ(cs.n_params(), 2);
  EXPECT_EQ(cs.n_params_total(), 3);
}

TEST(Covariance, LambdaForMaxBlockReproducesCovariance) {
  FactorTable t;
  t.emplace("Am", Factor("Am", FactorKind::M, 2));
  const auto spec = parse_formula("y ~ Am + (Am|PT)", t);
  const auto cs = realize(spec, {FamilyTag::MAX, false});
  ASSERT_EQ(cs.n_params(), 3);
  Eigen::Matrix2d S;
  S << 2.0, 0.7, 0.7, 0.9;
  const Eigen::Matrix2d L = S.llt().matrixL();
  Eigen::VectorXd th(3);
  th << L(0, 0), L(1, 0), L(1, 1);
  const Eigen::MatrixXd Lam = Eigen::MatrixXd(theta_to_lambda(cs, th, {4}));
  ASSERT_EQ(Lam.rows(), 8);
  for (int g = 0; g < 4; ++g) {
    const Eigen::MatrixXd blk = Lam.block(2 * g, 2 * g, 2, 2);
    EXPECT_LT((blk * blk.transpose() - S).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_TRUE(Eigen::MatrixXd(Lam.triangularView<Eigen::StrictlyUpper>()).isZero(0.0));
}

TEST(Covariance, RiUnitThetaGivesIdentityLambda) {
  const auto fam = parse_family("RI+");
  const auto cs = realize(saturated_spec(standard_design("M1"), fam), fam);
  const Eigen::MatrixXd L = Eigen::MatrixXd(theta_to_lambda(cs, Eigen::VectorXd::Ones(3), {4, 5, 20}));
  EXPECT_TRUE(L.isIdentity(0.0));
  const Eigen::MatrixXd Z0 = Eigen::MatrixXd(theta_to_lambda(cs, Eigen::VectorXd::Zero(3), {4, 5, 20}));
  EXPECT_TRUE(Z0.isZero(0.0));
}

TEST(Covariance, IncompatibleSpecs) {
  FactorTable t;
  t.emplace("Am", Factor("Am", FactorKind::M, 2));
  const auto ps = parse_formula("y ~ Am + (1|PT) + (1|PT:SM)", t);
  EXPECT_THROW(realize(ps, {FamilyTag::RIL, false}), IncompatibleSpec);
  const auto slope = parse_formula("y ~ Am + (1|PT) + (1|PT:Am)", t);
  EXPECT_THROW(realize(slope, {FamilyTag::RI, false}), IncompatibleSpec);
  const auto con = parse_formula("y ~ Am + (1|PT|Am)", t);
  EXPECT_THROW(realize(con, {FamilyTag::ZCPpoly, false}), IncompatibleSpec);
  EXPECT_THROW(parse_family("nope"), InvalidConfig);
  EXPECT_THROW(standard_design("M9"), InvalidConfig);
}

TEST(Design, BlockWidthsForRiOnM1) {
  GenConfig g;
  g.n_participants = 18;
  g.n_stimuli = 18;
  const auto data = generate(g);
  const auto fam = parse_family("RI+");
  const auto dm = build_design(study_spec("M1", fam), data, fam);
  const auto groups = dm.n_groups();
  ASSERT_EQ(groups.size(), 3u);
  EXPECT_EQ(groups[0], 18);
  EXPECT_EQ(groups[1], 18);
  EXPECT_EQ(groups[2], 324);
  const Eigen::MatrixXd Z = Eigen::MatrixXd(dm.Z());
  EXPECT_EQ(Z.cols(), 360);
  // Every row hits exactly one column per unit.
  for (Eigen::Index i = 0; i < Z.rows(); ++i) EXPECT_EQ(Z.row(i).sum(), 3.0);
  // Each participant column collects n_S × 2 observations.
  EXPECT_EQ(Z.col(0).sum(), 36.0);
}

TEST(Design, SingleUnitGanovaWidths) {
  testdata::WithinConfig c;
  c.levels = 2;
  c.n_participants = 7;
  const auto data = testdata::within_data(c);
  const auto spec = parse_formula("y ~ Am + (1|PT|Am)", testdata::within_table(c));
  const auto dm = build_design(spec, data, CovFamily{FamilyTag::GANOVA, false});
  EXPECT_EQ(dm.q(), 14);
  EXPECT_EQ(dm.structure.units.size(), 1u);
  EXPECT_EQ(dm.structure.units[0].dim, 2);
}

// With an orthonormal zero-sum coding, the per-participant covariance
// σ²_i J + σ²_F C Cᵀ equals the dummy-coded σ²_i' J + σ²_F I once
// σ²_i' = σ²_i − σ²_F / n: the two parametrizations share one family of
// marginal covariances on the feasible side.
TEST(Design, ConstrainedAndDummyBlocksAgree) {
  for (int n : {2, 3, 4}) {
    testdata::WithinConfig c;
    c.levels = n;
    c.n_participants = 5;
    const auto data = testdata::within_data(c);
    const auto table = testdata::within_table(c);
    const auto g_pb = make_problem(parse_formula("y ~ Am + (1|PT|Am)", table), data, {FamilyTag::GANOVA, false});
    const auto r_pb = make_problem(parse_formula("y ~ Am + (1|PT) + (1|PT:Am)", table), data, {FamilyTag::RIL, false});
    const double ti = 1.3, tf = 0.8;  // gANOVA relative sds
    Eigen::VectorXd tg(2), tr(2);
    tg << ti, tf;
    tr << std::sqrt(ti * ti - tf * tf / n), tf;
    auto cov = [](const FitProblem& pb, const Eigen::VectorXd& th) {
      const Eigen::MatrixXd ZL =
          Eigen::MatrixXd(pb.design.Z()) * Eigen::MatrixXd(theta_to_lambda(pb.structure(), th, pb.design.n_groups()));
      return Eigen::MatrixXd(ZL * ZL.transpose());
    };
    EXPECT_LT((cov(g_pb, tg) - cov(r_pb, tr)).cwiseAbs().maxCoeff(), 1e-10) << n;
    EXPECT_NEAR(profiled_deviance(g_pb, tg).deviance, profiled_deviance(r_pb, tr).deviance, 1e-9);
  }
}
