#pragma once

// Fixed-effect matrix X and random-effect design Z. Z is stored per grouping
// unit as a group index plus a dense coding row per observation; the unit's
// sparse block is the rowwise Khatri-Rao product of the group dummies with
// those coding rows, laid out group-major (column g·dim + j).

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "cremem/contrasts.hpp"
#include "cremem/covariance.hpp"
#include "cremem/dataset.hpp"
#include "cremem/errors.hpp"
#include "cremem/formula.hpp"

namespace cremem {

using ContrastOverrides = std::map<std::string, ContrastMatrix>;

struct UnitDesign {
  Unit unit = Unit::Participant;
  int n_groups = 0;
  int dim = 0;
  std::vector<int> group;  // per observation
  std::vector<std::string> group_labels;
  Eigen::MatrixXd codes;   // n_obs × dim

  Eigen::SparseMatrix<double> Z() const {
    std::vector<Eigen::Triplet<double>> trip;
    for (Eigen::Index i = 0; i < codes.rows(); ++i)
      for (int j = 0; j < dim; ++j)
        if (codes(i, j) != 0.0) trip.emplace_back(i, group[static_cast<std::size_t>(i)] * dim + j, codes(i, j));
    Eigen::SparseMatrix<double> Z(codes.rows(), static_cast<Eigen::Index>(n_groups) * dim);
    Z.setFromTriplets(trip.begin(), trip.end());
    return Z;
  }
};

struct FixedColumns {
  FixedTerm term;
  int first = 0;
  int n_cols = 0;
};

struct ZBlock {
  RandomTerm term;
  Eigen::SparseMatrix<double> Z;  // term-major: column g·width + j
};

struct DesignMatrices {
  Eigen::MatrixXd X;
  std::vector<std::string> x_labels;
  std::vector<FixedColumns> fixed_columns;  // excludes the intercept (column 0)
  CovStructure structure;
  std::vector<UnitDesign> units;  // parallel to structure.units

  Eigen::Index n_obs() const { return X.rows(); }
  Eigen::Index p() const { return X.cols(); }
  Eigen::Index q() const {
    Eigen::Index s = 0;
    for (const auto& u : units) s += static_cast<Eigen::Index>(u.n_groups) * u.dim;
    return s;
  }
  std::vector<int> n_groups() const {
    std::vector<int> g;
    for (const auto& u : units) g.push_back(u.n_groups);
    return g;
  }

  const FixedColumns& columns_of(const FixedTerm& term) const {
    for (const auto& fc : fixed_columns)
      if (fc.term == term) return fc;
    throw UnknownIdentifier(term_label(term));
  }

  // All units side by side, matching theta_to_lambda's column order.
  Eigen::SparseMatrix<double> Z() const {
    std::vector<Eigen::Triplet<double>> trip;
    Eigen::Index base = 0;
    for (const auto& u : units) {
      const auto Zu = u.Z();
      for (int k = 0; k < Zu.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(Zu, k); it; ++it)
          trip.emplace_back(it.row(), base + it.col(), it.value());
      base += Zu.cols();
    }
    Eigen::SparseMatrix<double> Z(n_obs(), base);
    Z.setFromTriplets(trip.begin(), trip.end());
    return Z;
  }

  // One sparse block per random term.
  std::vector<ZBlock> Z_blocks() const {
    std::vector<ZBlock> out;
    for (std::size_t u = 0; u < units.size(); ++u) {
      const auto& lay = structure.units[u];
      const auto& ud = units[u];
      for (std::size_t t = 0; t < lay.terms.size(); ++t) {
        const int w = lay.width[t], off = lay.offset[t];
        std::vector<Eigen::Triplet<double>> trip;
        for (Eigen::Index i = 0; i < ud.codes.rows(); ++i)
          for (int j = 0; j < w; ++j)
            if (ud.codes(i, off + j) != 0.0)
              trip.emplace_back(i, ud.group[static_cast<std::size_t>(i)] * w + j, ud.codes(i, off + j));
        Eigen::SparseMatrix<double> Z(n_obs(), static_cast<Eigen::Index>(ud.n_groups) * w);
        Z.setFromTriplets(trip.begin(), trip.end());
        out.push_back({lay.terms[t], std::move(Z)});
      }
    }
    return out;
  }
};

namespace detail {

inline const Categorical& factor_column(const Dataset& data, const Factor& f) {
  if (!data.has(f.name())) throw MissingColumn(f.name());
  if (data.is_numeric(f.name())) throw LevelMismatch("factor column '" + f.name() + "' is numeric");
  const auto& c = data.categorical(f.name());
  if (c.n_levels() != f.n_levels())
    throw LevelMismatch("factor '" + f.name() + "' declares " + std::to_string(f.n_levels()) +
                        " levels, data has " + std::to_string(c.n_levels()));
  return c;
}

inline const Categorical& id_column(const Dataset& data, const std::string& name) {
  if (!data.has(name)) throw MissingColumn(name);
  if (data.is_numeric(name)) throw LevelMismatch("unit id column '" + name + "' is numeric");
  return data.categorical(name);
}

// Kronecker product of one contrast row per factor (first factor slowest).
inline Eigen::RowVectorXd coding_row(const std::vector<const ContrastMatrix*>& contrasts,
                                     const std::vector<const Categorical*>& cols, std::size_t obs) {
  Eigen::RowVectorXd r = Eigen::RowVectorXd::Ones(1);
  for (std::size_t k = 0; k < contrasts.size(); ++k) {
    const Eigen::RowVectorXd c = contrasts[k]->values.row(cols[k]->codes[obs]);
    Eigen::RowVectorXd next(r.size() * c.size());
    for (Eigen::Index a = 0; a < r.size(); ++a) next.segment(a * c.size(), c.size()) = r[a] * c;
    r = std::move(next);
  }
  return r;
}

}  // namespace detail

inline DesignMatrices build_design(const ModelSpec& spec, const Dataset& data, const CovStructure& structure,
                                   const ContrastOverrides& overrides = {}) {
  DesignMatrices dm;
  dm.structure = structure;
  const std::size_t n = data.n_obs();

  std::map<std::string, const Categorical*> cols;
  std::map<std::string, ContrastMatrix> fixed_c, random_c;
  for (const auto& f : spec.fixed_factors) {
    cols[f.name()] = &detail::factor_column(data, f);
    fixed_c[f.name()] = make_contrast(f.n_levels(), ContrastKind::Sum);
    auto it = overrides.find(f.name());
    if (it != overrides.end()) {
      const int want = structure.coding == ContrastKind::Identity ? f.n_levels() : f.n_levels() - 1;
      if (it->second.n_levels != f.n_levels() || it->second.n_columns() != want)
        throw LevelMismatch("contrast override for '" + f.name() + "' has the wrong shape");
      random_c[f.name()] = it->second;
    } else {
      random_c[f.name()] = make_contrast(f.n_levels(), structure.coding);
    }
  }

  // Fixed part: intercept, then each term's sum-coded tensor columns.
  Eigen::Index p = 1;
  for (const auto& t : spec.fixed_terms) {
    const int w = term_width(t, spec, ContrastKind::Sum);
    dm.fixed_columns.push_back({t, static_cast<int>(p), w});
    p += w;
  }
  dm.X.resize(static_cast<Eigen::Index>(n), p);
  dm.X.col(0).setOnes();
  dm.x_labels.push_back("(Intercept)");
  for (const auto& fc : dm.fixed_columns) {
    std::vector<const ContrastMatrix*> cs;
    std::vector<const Categorical*> cc;
    for (const auto& name : fc.term) {
      cs.push_back(&fixed_c.at(name));
      cc.push_back(cols.at(name));
    }
    for (std::size_t i = 0; i < n; ++i)
      dm.X.row(static_cast<Eigen::Index>(i)).segment(fc.first, fc.n_cols) = detail::coding_row(cs, cc, i);
    for (int j = 0; j < fc.n_cols; ++j)
      dm.x_labels.push_back(term_label(fc.term) + (fc.n_cols > 1 ? std::to_string(j + 1) : ""));
  }

  for (const auto& lay : structure.units) {
    UnitDesign ud;
    ud.unit = lay.unit;
    ud.dim = lay.dim;
    ud.group.resize(n);
    if (lay.unit == Unit::Participant || lay.unit == Unit::Stimulus) {
      const auto& name = lay.unit == Unit::Participant ? spec.units.participant : spec.units.stimulus;
      const auto& idc = detail::id_column(data, name);
      ud.n_groups = idc.n_levels();
      ud.group_labels = idc.levels;
      for (std::size_t i = 0; i < n; ++i) ud.group[i] = idc.codes[i];
    } else {
      // Observed (participant, stimulus) pairs, ordered by their codes.
      const auto& pc = detail::id_column(data, spec.units.participant);
      const auto& sc = detail::id_column(data, spec.units.stimulus);
      std::map<std::pair<int, int>, int> pairs;
      for (std::size_t i = 0; i < n; ++i) pairs[{pc.codes[i], sc.codes[i]}] = 0;
      int k = 0;
      for (auto& [key, idx] : pairs) {
        idx = k++;
        ud.group_labels.push_back(pc.levels[static_cast<std::size_t>(key.first)] + ":" +
                                  sc.levels[static_cast<std::size_t>(key.second)]);
      }
      ud.n_groups = k;
      for (std::size_t i = 0; i < n; ++i) ud.group[i] = pairs.at({pc.codes[i], sc.codes[i]});
    }
    ud.codes.resize(static_cast<Eigen::Index>(n), lay.dim);
    for (std::size_t t = 0; t < lay.terms.size(); ++t) {
      std::vector<const ContrastMatrix*> cs;
      std::vector<const Categorical*> cc;
      for (const auto& name : lay.terms[t].factors) {
        if (!random_c.count(name)) throw UnknownIdentifier(name);
        cs.push_back(&random_c.at(name));
        cc.push_back(cols.at(name));
      }
      for (std::size_t i = 0; i < n; ++i)
        ud.codes.row(static_cast<Eigen::Index>(i)).segment(lay.offset[t], lay.width[t]) =
            detail::coding_row(cs, cc, i);
    }
    dm.units.push_back(std::move(ud));
  }
  return dm;
}

inline DesignMatrices build_design(const ModelSpec& spec, const Dataset& data, const CovFamily& family,
                                   const ContrastOverrides& overrides = {}) {
  return build_design(spec, data, realize(spec, family), overrides);
}

}  // namespace cremem
