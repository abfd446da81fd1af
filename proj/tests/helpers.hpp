#pragma once

// Small data builders shared by the test suites and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <set>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cremem/cremem.hpp"

namespace testdata {

inline std::vector<std::string> labels(char prefix, int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(cremem::detail::padded(prefix, i, n));
  return out;
}

// Participants crossed with a within factor Am (levels a1..), `reps`
// observations per cell. Participant effects follow the constrained
// parametrization: intercept ~ N(0, var_i), interaction = C u with
// u ~ N(0, var_f I) and C orthonormal zero-sum. With `between_levels` > 1 a
// between-participant factor Ap splits the participants evenly and carries
// fixed effect `between_shift` per level step.
struct WithinConfig {
  int n_participants = 10;
  int levels = 3;
  int reps = 2;
  double var_i = 1.0;
  double var_f = 1.0;
  double var_e = 1.0;
  int between_levels = 1;
  double effect = 0.0;
  std::uint64_t seed = 1;
};

inline cremem::Dataset within_data(const WithinConfig& c) {
  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> N;
  const Eigen::MatrixXd C = cremem::make_contrast(c.levels, cremem::ContrastKind::OrthonormalPolynomial).values;
  std::vector<double> y;
  std::vector<int> pt, am, ap;
  for (int i = 0; i < c.n_participants; ++i) {
    const double b0 = std::sqrt(c.var_i) * N(rng);
    Eigen::VectorXd u(c.levels - 1);
    for (int k = 0; k < u.size(); ++k) u[k] = std::sqrt(c.var_f) * N(rng);
    const Eigen::VectorXd b = C * u;
    const int g = c.between_levels > 1 ? i % c.between_levels : 0;
    for (int j = 0; j < c.levels; ++j)
      for (int r = 0; r < c.reps; ++r) {
        y.push_back(c.effect * (j - 0.5 * (c.levels - 1)) + 0.3 * g + b0 + b[j] + std::sqrt(c.var_e) * N(rng));
        pt.push_back(i);
        am.push_back(j);
        ap.push_back(g);
      }
  }
  cremem::Dataset d(y.size());
  d.add_numeric("y", y);
  d.add_categorical("PT", {labels('P', c.n_participants), pt});
  if (c.between_levels > 1) d.add_categorical("Ap", {labels('g', c.between_levels), ap});
  d.add_categorical("Am", {labels('a', c.levels), am});
  return d;
}

inline cremem::FactorTable within_table(const WithinConfig& c) {
  cremem::FactorTable t;
  t.emplace("Am", cremem::Factor("Am", cremem::FactorKind::M, c.levels));
  if (c.between_levels > 1) t.emplace("Ap", cremem::Factor("Ap", cremem::FactorKind::P, c.between_levels));
  return t;
}

// Full fit of `spec` under `family`; throws if the fit does not converge.
inline cremem::FitResult fit_ok(const cremem::FitProblem& pb) {
  auto r = cremem::fit(pb);
  if (!r.converged) throw cremem::NonConvergedFit("test fit did not converge");
  return r;
}

// Random θ inside the structure's domain: scale entries in [0.1, 1.6],
// Cholesky off-diagonals N(0, 0.4²).
inline Eigen::VectorXd random_theta(const cremem::CovStructure& cs, std::mt19937_64& rng) {
  const auto mask = cs.bounded_mask();
  std::uniform_real_distribution<double> U(0.1, 1.6);
  std::normal_distribution<double> N(0.0, 0.4);
  Eigen::VectorXd t(static_cast<Eigen::Index>(mask.size()));
  for (std::size_t i = 0; i < mask.size(); ++i) t[static_cast<Eigen::Index>(i)] = mask[i] ? U(rng) : N(rng);
  return t;
}

// Formula pool for the round-trip property.
inline const std::vector<cremem::Factor>& pool() {
  using cremem::Factor, cremem::FactorKind;
  static const std::vector<Factor> f = {Factor("Ap", FactorKind::P, 3),  Factor("As", FactorKind::S, 3),
                                        Factor("Am1", FactorKind::M, 3), Factor("Am2", FactorKind::M, 2),
                                        Factor("Aps", FactorKind::PS, 2), Factor("Ao", FactorKind::O, 2)};
  return f;
}

inline cremem::FactorTable pool_table() {
  cremem::FactorTable t;
  for (const auto& f : pool()) t.emplace(f.name(), f);
  return t;
}

inline std::string join(const std::vector<std::string>& v, const std::string& sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

// A random valid formula over a random subset of the factor pool; terms,
// factors inside terms and the random blocks come in random order.
inline std::string random_formula(std::mt19937_64& rng) {
  auto coin = [&](double p) { return std::bernoulli_distribution(p)(rng); };
  std::vector<cremem::Factor> chosen;
  while (chosen.empty())
    for (const auto& f : pool())
      if (coin(0.5)) chosen.push_back(f);
  std::shuffle(chosen.begin(), chosen.end(), rng);

  std::vector<std::string> pieces;
  // Fixed part: every chosen factor appears at least once.
  std::vector<std::string> names;
  for (const auto& f : chosen) names.push_back(f.name());
  std::size_t i = 0;
  while (i < names.size()) {
    const std::size_t k = std::min(names.size() - i, std::size_t{1} + rng() % 3);
    std::vector<std::string> chunk(names.begin() + static_cast<long>(i), names.begin() + static_cast<long>(i + k));
    pieces.push_back(join(chunk, coin(0.5) ? "*" : ":"));
    i += k;
  }
  if (coin(0.3)) pieces.push_back("1");

  std::vector<std::string> confounded;
  for (const auto& f : chosen)
    if (f.kind() == cremem::FactorKind::M || f.kind() == cremem::FactorKind::O) confounded.push_back(f.name());
  std::sort(confounded.begin(), confounded.end());

  for (cremem::Unit u : cremem::kAllUnits) {
    if (!coin(0.7)) continue;
    // Without M/O factors each participant-stimulus cell is a single row.
    if (u == cremem::Unit::ParticipantStimulus && confounded.empty()) continue;
    const std::string ut = u == cremem::Unit::Participant ? "PT" : (u == cremem::Unit::Stimulus ? "SM" : "PT:SM");
    std::vector<std::string> allowed;
    for (const auto& f : chosen)
      if (cremem::estimable(u, f.kind())) allowed.push_back(f.name());
    std::vector<std::vector<std::string>> subsets;
    std::set<std::vector<std::string>> seen;
    for (int tries = 0; tries < 4 && !allowed.empty(); ++tries) {
      std::vector<std::string> s;
      for (const auto& a : allowed)
        if (coin(0.5)) s.push_back(a);
      if (s.empty()) continue;
      auto key = s;
      std::sort(key.begin(), key.end());
      if (u == cremem::Unit::ParticipantStimulus && key == confounded) continue;
      if (!seen.insert(key).second) continue;
      std::shuffle(s.begin(), s.end(), rng);
      subsets.push_back(s);
    }
    const int style = static_cast<int>(rng() % 4);
    if (subsets.empty() || style == 0) {
      pieces.push_back("(1|" + ut + ")");
      for (const auto& s : subsets) pieces.push_back("(1|" + ut + ":" + join(s, ":") + ")");
      continue;
    }
    std::vector<std::string> ex;
    for (const auto& s : subsets) ex.push_back(join(s, ":"));
    const std::string expr = join(ex, " + ");
    if (style == 1) pieces.push_back("(" + expr + "|" + ut + ")");
    else if (style == 2) pieces.push_back("(" + expr + "||" + ut + ")");
    else pieces.push_back("(1|" + ut + "|" + expr + ")");
  }
  std::shuffle(pieces.begin(), pieces.end(), rng);
  return "y ~ " + join(pieces, " + ");
}

}  // namespace testdata
