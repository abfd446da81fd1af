#pragma once

// Correlation-structure families realized as parameter layouts over the
// random terms of a ModelSpec.

#include <cctype>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "cremem/contrasts.hpp"
#include "cremem/errors.hpp"
#include "cremem/formula.hpp"

namespace cremem {

enum class FamilyTag { RI, RIL, MAX, ZCPsum, ZCPpoly, GANOVA };

inline constexpr FamilyTag kAllFamilies[] = {FamilyTag::RI, FamilyTag::RIL, FamilyTag::MAX,
                                             FamilyTag::ZCPsum, FamilyTag::ZCPpoly, FamilyTag::GANOVA};

struct CovFamily {
  FamilyTag tag = FamilyTag::GANOVA;
  bool include_ps = false;

  friend bool operator==(const CovFamily&, const CovFamily&) = default;
};

inline std::string_view to_string(FamilyTag t) {
  switch (t) {
    case FamilyTag::RI: return "RI";
    case FamilyTag::RIL: return "RI-L";
    case FamilyTag::MAX: return "MAX";
    case FamilyTag::ZCPsum: return "ZCP-sum";
    case FamilyTag::ZCPpoly: return "ZCP-poly";
    case FamilyTag::GANOVA: return "gANOVA";
  }
  return "?";
}

inline std::string family_name(const CovFamily& f) {
  return std::string(to_string(f.tag)) + (f.include_ps ? "+" : "");
}

// Case-insensitive; a trailing '+' selects the variant with
// participant:stimulus terms. "zcp" means ZCP-poly.
inline CovFamily parse_family(std::string_view text) {
  std::string s;
  for (char c : text)
    if (c != '-' && c != '_' && c != ' ') s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  CovFamily f;
  if (!s.empty() && s.back() == '+') {
    f.include_ps = true;
    s.pop_back();
  }
  if (s == "ri") f.tag = FamilyTag::RI;
  else if (s == "ril") f.tag = FamilyTag::RIL;
  else if (s == "max") f.tag = FamilyTag::MAX;
  else if (s == "zcpsum") f.tag = FamilyTag::ZCPsum;
  else if (s == "zcp" || s == "zcppoly") f.tag = FamilyTag::ZCPpoly;
  else if (s == "ganova") f.tag = FamilyTag::GANOVA;
  else throw InvalidConfig("unknown covariance family '" + std::string(text) + "'");
  return f;
}

inline ContrastKind family_coding(FamilyTag t) {
  switch (t) {
    case FamilyTag::RIL: return ContrastKind::Identity;
    case FamilyTag::ZCPsum: return ContrastKind::Sum;
    default: return ContrastKind::OrthonormalPolynomial;
  }
}

inline Bar family_bar(FamilyTag t) {
  switch (t) {
    case FamilyTag::GANOVA: return Bar::Constrained;
    case FamilyTag::MAX: return Bar::Correlated;
    case FamilyTag::ZCPsum:
    case FamilyTag::ZCPpoly: return Bar::Uncorrelated;
    default: return Bar::Plain;
  }
}

// Number of coding columns of one term on one grouping level.
inline int term_width(const std::vector<std::string>& factors, const ModelSpec& spec, ContrastKind coding) {
  int w = 1;
  for (const auto& name : factors) {
    const int l = spec.factor(name).n_levels();
    w *= coding == ContrastKind::Identity ? l : l - 1;
  }
  return w;
}

enum class BlockKind { SharedScalar, PerContrastScalar, FullCholesky };

// A set of columns of one unit's per-group coding vector and how they are
// parametrized. Column indices are relative to the unit's per-group layout.
struct VarianceBlock {
  int unit_index = 0;
  int first = 0;
  int n_cols = 0;
  BlockKind kind = BlockKind::SharedScalar;
  int term_index = -1;  // -1 for a block spanning several terms

  int n_params() const {
    switch (kind) {
      case BlockKind::SharedScalar: return 1;
      case BlockKind::PerContrastScalar: return n_cols;
      case BlockKind::FullCholesky: return n_cols * (n_cols + 1) / 2;
    }
    return 0;
  }
};

struct UnitLayout {
  Unit unit = Unit::Participant;
  std::vector<RandomTerm> terms;
  std::vector<int> offset;
  std::vector<int> width;
  int dim = 0;
};

struct CovStructure {
  CovFamily family;
  ContrastKind coding = ContrastKind::OrthonormalPolynomial;
  std::vector<UnitLayout> units;
  std::vector<VarianceBlock> blocks;
  std::vector<int> theta_offset;  // per block

  // Covariance parameters, residual variance excluded (Table 3 convention).
  int n_params() const {
    int n = 0;
    for (const auto& b : blocks) n += b.n_params();
    return n;
  }
  int n_params_total() const { return n_params() + 1; }

  int unit_index(Unit u) const {
    for (std::size_t i = 0; i < units.size(); ++i)
      if (units[i].unit == u) return static_cast<int>(i);
    return -1;
  }

  // True for θ entries that are variance-scale (bounded below by 0):
  // scalar entries and Cholesky diagonals.
  std::vector<bool> bounded_mask() const {
    std::vector<bool> m;
    for (const auto& b : blocks) {
      if (b.kind != BlockKind::FullCholesky) {
        m.insert(m.end(), static_cast<std::size_t>(b.n_params()), true);
        continue;
      }
      for (int j = 0; j < b.n_cols; ++j)
        for (int i = j; i < b.n_cols; ++i) m.push_back(i == j);
    }
    return m;
  }

  Eigen::VectorXd lower_bounds() const {
    const auto mask = bounded_mask();
    Eigen::VectorXd lb(static_cast<Eigen::Index>(mask.size()));
    for (std::size_t i = 0; i < mask.size(); ++i)
      lb[static_cast<Eigen::Index>(i)] = mask[i] ? 0.0 : -std::numeric_limits<double>::infinity();
    return lb;
  }

  // θ₀: unit relative sds, identity Cholesky factors.
  Eigen::VectorXd initial_theta() const {
    const auto mask = bounded_mask();
    Eigen::VectorXd t(static_cast<Eigen::Index>(mask.size()));
    for (std::size_t i = 0; i < mask.size(); ++i) t[static_cast<Eigen::Index>(i)] = mask[i] ? 1.0 : 0.0;
    return t;
  }

  std::vector<std::string> theta_labels(const UnitIds& ids) const {
    std::vector<std::string> out;
    for (const auto& b : blocks) {
      const auto& u = units[static_cast<std::size_t>(b.unit_index)];
      const std::string unit_name = grouping_unit(ids, u.unit).id_column;
      auto col_label = [&](int c) {
        for (std::size_t t = 0; t < u.terms.size(); ++t) {
          if (c >= u.offset[t] && c < u.offset[t] + u.width[t]) {
            std::string s = term_label(u.terms[t].factors);
            if (u.width[t] > 1) s += "[" + std::to_string(c - u.offset[t] + 1) + "]";
            return s;
          }
        }
        return std::string("?");
      };
      if (b.kind == BlockKind::SharedScalar) {
        out.push_back(unit_name + ": " + term_label(u.terms[static_cast<std::size_t>(b.term_index)].factors));
      } else if (b.kind == BlockKind::PerContrastScalar) {
        for (int c = 0; c < b.n_cols; ++c) out.push_back(unit_name + ": " + col_label(b.first + c));
      } else {
        for (int j = 0; j < b.n_cols; ++j)
          for (int i = j; i < b.n_cols; ++i)
            out.push_back(unit_name + ": L(" + col_label(b.first + i) + ", " + col_label(b.first + j) + ")");
      }
    }
    return out;
  }

  // Per-unit relative covariance factor T_u (dim × dim, lower triangular),
  // so that the unit's random effects have covariance σ² I_g ⊗ T_u T_uᵀ.
  // With check_domain = false negative scale entries are accepted (the
  // criterion is even in them); used by finite differences at the boundary.
  std::vector<Eigen::MatrixXd> relative_factors(const Eigen::VectorXd& theta, bool check_domain = true) const {
    if (theta.size() != n_params())
      throw DomainError("theta has length " + std::to_string(theta.size()) + ", expected " +
                        std::to_string(n_params()));
    std::vector<Eigen::MatrixXd> T;
    for (const auto& u : units) T.push_back(Eigen::MatrixXd::Zero(u.dim, u.dim));
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      const auto& b = blocks[bi];
      auto& M = T[static_cast<std::size_t>(b.unit_index)];
      Eigen::Index k = theta_offset[bi];
      auto take = [&](bool bounded) {
        const double v = theta[k++];
        if (!std::isfinite(v) || (check_domain && bounded && v < 0.0)) throw DomainError("theta outside its domain");
        return v;
      };
      switch (b.kind) {
        case BlockKind::SharedScalar: {
          const double v = take(true);
          for (int c = 0; c < b.n_cols; ++c) M(b.first + c, b.first + c) = v;
          break;
        }
        case BlockKind::PerContrastScalar:
          for (int c = 0; c < b.n_cols; ++c) M(b.first + c, b.first + c) = take(true);
          break;
        case BlockKind::FullCholesky:
          for (int j = 0; j < b.n_cols; ++j)
            for (int i = j; i < b.n_cols; ++i) M(b.first + i, b.first + j) = take(i == j);
          break;
      }
    }
    return T;
  }
};

// Builds the parameter layout of `family` over the spec's random terms.
inline CovStructure realize(const ModelSpec& spec, const CovFamily& family) {
  CovStructure cs;
  cs.family = family;
  cs.coding = family_coding(family.tag);
  for (const auto& t : spec.random_terms) {
    if (t.unit == Unit::ParticipantStimulus && !family.include_ps)
      throw IncompatibleSpec("participant:stimulus terms need the '+' variant of " + family_name(family));
    if (family.tag == FamilyTag::RI && !t.factors.empty())
      throw IncompatibleSpec("the RI family has random intercepts only");
    if (t.bar == Bar::Constrained && family.tag != FamilyTag::GANOVA)
      throw IncompatibleSpec("constrained (1|unit|expr) terms need the gANOVA family");
  }
  for (Unit u : kAllUnits) {
    UnitLayout layout;
    layout.unit = u;
    for (const auto& t : spec.random_terms) {
      if (t.unit != u) continue;
      layout.terms.push_back(t);
      layout.offset.push_back(layout.dim);
      layout.width.push_back(term_width(t.factors, spec, cs.coding));
      layout.dim += layout.width.back();
    }
    if (layout.terms.empty()) continue;
    const int ui = static_cast<int>(cs.units.size());
    if (family.tag == FamilyTag::MAX) {
      cs.blocks.push_back({ui, 0, layout.dim, BlockKind::FullCholesky, -1});
    } else {
      for (std::size_t t = 0; t < layout.terms.size(); ++t) {
        const bool per_col = family.tag == FamilyTag::ZCPsum || family.tag == FamilyTag::ZCPpoly;
        cs.blocks.push_back({ui, layout.offset[t], layout.width[t],
                             per_col ? BlockKind::PerContrastScalar : BlockKind::SharedScalar,
                             static_cast<int>(t)});
      }
    }
    cs.units.push_back(std::move(layout));
  }
  int off = 0;
  for (const auto& b : cs.blocks) {
    cs.theta_offset.push_back(off);
    off += b.n_params();
  }
  return cs;
}

// The family's full model over a design: intercepts only for RI, every
// estimable term otherwise.
inline ModelSpec saturated_spec(const std::vector<Factor>& design, const CovFamily& family,
                                std::string response = "y", UnitIds ids = {}) {
  ModelSpec spec;
  spec.response = std::move(response);
  spec.units = std::move(ids);
  spec.fixed_factors = design;
  spec.fixed_terms = full_factorial(design);
  if (family.tag == FamilyTag::RI) {
    for (Unit u : kAllUnits)
      if (u != Unit::ParticipantStimulus || family.include_ps) spec.random_terms.push_back({u, {}, Bar::Plain});
  } else {
    spec.random_terms = saturated_terms(design, family.include_ps);
    for (auto& t : spec.random_terms) t.bar = family_bar(family.tag);
  }
  validate(spec);
  return spec;
}

inline int count_params(const CovFamily& family, const std::vector<Factor>& design) {
  return realize(saturated_spec(design, family), family).n_params();
}

// Sparse Λ(θ) over all random-effect columns: units in structure order,
// each laid out group-major (column g·dim + j), Λ_u = I_g ⊗ T_u.
inline Eigen::SparseMatrix<double> theta_to_lambda(const CovStructure& cs, const Eigen::VectorXd& theta,
                                                   const std::vector<int>& n_groups) {
  if (n_groups.size() != cs.units.size()) throw DomainError("group counts do not match the structure's units");
  const auto T = cs.relative_factors(theta);
  std::vector<Eigen::Triplet<double>> trip;
  int base = 0;
  for (std::size_t u = 0; u < cs.units.size(); ++u) {
    const int d = cs.units[u].dim;
    for (int g = 0; g < n_groups[u]; ++g)
      for (int j = 0; j < d; ++j)
        for (int i = j; i < d; ++i)
          if (T[u](i, j) != 0.0) trip.emplace_back(base + g * d + i, base + g * d + j, T[u](i, j));
    base += n_groups[u] * d;
  }
  Eigen::SparseMatrix<double> L(base, base);
  L.setFromTriplets(trip.begin(), trip.end());
  return L;
}

// Standard designs of the simulation study.
inline std::vector<Factor> standard_design(std::string_view name) {
  using K = FactorKind;
  if (name == "M1") return {Factor("Ap", K::P, 2), Factor("As", K::S, 2), Factor("Am", K::M, 2)};
  if (name == "M2") return {Factor("Ap", K::P, 3), Factor("As", K::S, 3), Factor("Am", K::M, 3)};
  if (name == "M3")
    return {Factor("Ap", K::P, 3), Factor("As", K::S, 3), Factor("Am1", K::M, 3), Factor("Am2", K::M, 2)};
  if (name == "M4")
    return {Factor("Ap", K::P, 3), Factor("As", K::S, 3), Factor("Am", K::M, 3), Factor("Aps", K::PS, 2)};
  if (name == "M5")
    return {Factor("Ap", K::P, 3),  Factor("As", K::S, 3),  Factor("Am1", K::M, 3),
            Factor("Am2", K::M, 2), Factor("Aps", K::PS, 2), Factor("Ao", K::O, 2)};
  throw InvalidConfig("unknown design '" + std::string(name) + "' (expected M1..M5)");
}

}  // namespace cremem
