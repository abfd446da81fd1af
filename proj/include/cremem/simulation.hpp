#pragma once

// Data generation for crossed participant × stimulus designs and the
// Monte-Carlo study harness (type-I error, power, convergence).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include "cremem/contrasts.hpp"
#include "cremem/covariance.hpp"
#include "cremem/dataset.hpp"
#include "cremem/errors.hpp"
#include "cremem/formula.hpp"
#include "cremem/inference.hpp"
#include "cremem/reml.hpp"

namespace cremem {

enum class RePattern { Spherical, Correlated };

inline std::string_view to_string(RePattern p) { return p == RePattern::Spherical ? "spherical" : "correlated"; }

inline RePattern parse_re_pattern(std::string_view s) {
  if (s == "spherical" || s == "Spherical") return RePattern::Spherical;
  if (s == "correlated" || s == "Correlated") return RePattern::Correlated;
  throw InvalidConfig("unknown random-effect pattern '" + std::string(s) + "'");
}

struct GenConfig {
  std::string design = "M1";
  int n_participants = 12;
  int n_stimuli = 12;
  RePattern re_pattern = RePattern::Spherical;
  bool include_ps_effects = false;
  double base_sd = 1.0;
  double interaction_decay = 0.5;
  double stimulus_shrink = 0.9;
  double ps_shrink = 0.8;
  double effect_scale = 0.0;
  double intercept_scale = 1.0;  // multiplies the random-intercept sds; 0 drops them
  std::uint64_t seed = 1;
  std::uint64_t rotation_seed = 0x5eed;  // orientation of the correlated pattern, shared by replicates

  friend bool operator==(const GenConfig&, const GenConfig&) = default;
};

inline void validate(const GenConfig& c) {
  standard_design(c.design);
  if (c.n_participants < 2 || c.n_stimuli < 2) throw InvalidConfig("need at least 2 participants and 2 stimuli");
  if (!(c.base_sd >= 0.0)) throw InvalidConfig("base_sd must be nonnegative");
  for (double s : {c.interaction_decay, c.stimulus_shrink, c.ps_shrink})
    if (!(s > 0.0 && s <= 1.0)) throw InvalidConfig("decay and shrink factors must lie in (0, 1]");
  if (!(c.effect_scale >= 0.0)) throw InvalidConfig("effect_scale must be nonnegative");
  if (!(c.intercept_scale >= 0.0)) throw InvalidConfig("intercept_scale must be nonnegative");
}

// splitmix64 step; seeds of independent streams are derived from a master
// seed and a counter, so a replicate's data never depends on execution order.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t counter) {
  std::uint64_t s = master;
  splitmix64(s);
  s ^= counter * 0xd1b54a32d192ed03ULL;
  return splitmix64(s);
}

// Random-effect coordinates of one unit (orthonormal coding), one row per
// group.
struct UnitEffects {
  Unit unit = Unit::Participant;
  std::vector<RandomTerm> terms;
  std::vector<int> offset, width;
  Eigen::MatrixXd coords;
};

struct GeneratedData {
  Dataset data;
  std::vector<UnitEffects> effects;
  Eigen::VectorXd fixed_part;
};

namespace detail {

inline std::string padded(char prefix, int i, int n) {
  const int w = static_cast<int>(std::to_string(n).size());
  std::string s = std::to_string(i + 1);
  return std::string(1, prefix) + std::string(static_cast<std::size_t>(std::max(0, w - static_cast<int>(s.size()))), '0') + s;
}

// Haar-distributed orthogonal matrix.
inline Eigen::MatrixXd random_orthogonal(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> N;
  Eigen::MatrixXd G(d, d);
  for (int j = 0; j < d; ++j)
    for (int i = 0; i < d; ++i) G(i, j) = N(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
  Eigen::MatrixXd Q = qr.householderQ();
  const Eigen::MatrixXd R = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < d; ++j)
    if (R(j, j) < 0) Q.col(j) *= -1.0;
  return Q;
}

}  // namespace detail

// Model the generator's data are analysed with: full-factorial fixed part and
// the family's saturated random part.
inline ModelSpec study_spec(const std::string& design, const CovFamily& family) {
  return saturated_spec(standard_design(design), family);
}

inline GeneratedData generate_with_effects(const GenConfig& cfg) {
  validate(cfg);
  const auto design = standard_design(cfg.design);
  const int nP = cfg.n_participants, nS = cfg.n_stimuli;

  // Levels of unit-level factors follow the unit index (mixed radix), so
  // every unit-level cell holds the same number of units.
  int p_levels = 1, s_levels = 1;
  for (const auto& f : design) {
    if (f.kind() == FactorKind::P) p_levels *= f.n_levels();
    if (f.kind() == FactorKind::S) s_levels *= f.n_levels();
    if (f.kind() == FactorKind::PS) {
      if (f.n_levels() % 2 != 0) throw InvalidConfig("participant-by-stimulus factors need an even level count");
      if (nP % f.n_levels() != 0 || nS % f.n_levels() != 0)
        throw InvalidConfig("participant and stimulus counts must be multiples of the levels of '" + f.name() + "'");
    }
  }
  if (nP % p_levels != 0) throw InvalidConfig("participant count must be a multiple of the participant-level cells");
  if (nS % s_levels != 0) throw InvalidConfig("stimulus count must be a multiple of the stimulus-level cells");

  std::vector<const Factor*> within;  // crossed inside each participant-stimulus pair
  for (const auto& f : design)
    if (f.kind() == FactorKind::M || f.kind() == FactorKind::O) within.push_back(&f);
  int n_within = 1;
  for (auto* f : within) n_within *= f->n_levels();

  const std::size_t n = static_cast<std::size_t>(nP) * static_cast<std::size_t>(nS) * static_cast<std::size_t>(n_within);
  std::vector<int> pt(n), sm(n);
  std::vector<std::vector<int>> lv(design.size(), std::vector<int>(n));
  std::size_t row = 0;
  for (int i = 0; i < nP; ++i)
    for (int m = 0; m < nS; ++m)
      for (int w = 0; w < n_within; ++w, ++row) {
        pt[row] = i;
        sm[row] = m;
        int pi = i, si = m, wi = w;
        for (std::size_t f = 0; f < design.size(); ++f) {
          const int l = design[f].n_levels();
          switch (design[f].kind()) {
            case FactorKind::P: lv[f][row] = pi % l; pi /= l; break;
            case FactorKind::S: lv[f][row] = si % l; si /= l; break;
            case FactorKind::PS: lv[f][row] = (i + m) % l; break;
            case FactorKind::M:
            case FactorKind::O: lv[f][row] = wi % l; wi /= l; break;
          }
        }
      }

  std::mt19937_64 rng(derive_seed(cfg.seed, 0));
  std::mt19937_64 rot_rng(derive_seed(cfg.rotation_seed, 1));
  std::normal_distribution<double> N;

  std::vector<ContrastMatrix> C;
  for (const auto& f : design) C.push_back(make_contrast(f.n_levels(), ContrastKind::OrthonormalPolynomial));
  auto coding = [&](const std::vector<std::string>& factors, std::size_t r) {
    Eigen::RowVectorXd v = Eigen::RowVectorXd::Ones(1);
    for (const auto& name : factors) {
      std::size_t f = 0;
      while (design[f].name() != name) ++f;
      const Eigen::RowVectorXd c = C[f].values.row(lv[f][r]);
      Eigen::RowVectorXd next(v.size() * c.size());
      for (Eigen::Index a = 0; a < v.size(); ++a) next.segment(a * c.size(), c.size()) = v[a] * c;
      v = std::move(next);
    }
    return v;
  };

  GeneratedData out;
  Eigen::VectorXd y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));

  // Fixed part: every coordinate of every non-intercept term equals
  // effect_scale · base_sd.
  out.fixed_part = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  if (cfg.effect_scale > 0.0)
    for (const auto& t : full_factorial(design))
      for (std::size_t r = 0; r < n; ++r)
        out.fixed_part[static_cast<Eigen::Index>(r)] += cfg.effect_scale * cfg.base_sd * coding(t, r).sum();
  y += out.fixed_part;

  const auto terms = saturated_terms(design, cfg.include_ps_effects);
  for (Unit u : kAllUnits) {
    UnitEffects ue;
    ue.unit = u;
    int dim = 0;
    for (const auto& t : terms) {
      if (t.unit != u) continue;
      ue.terms.push_back(t);
      ue.offset.push_back(dim);
      int w = 1;
      for (const auto& name : t.factors) {
        std::size_t f = 0;
        while (design[f].name() != name) ++f;
        w *= design[f].n_levels() - 1;
      }
      ue.width.push_back(w);
      dim += w;
    }
    if (ue.terms.empty()) continue;
    const double shrink = u == Unit::Participant ? 1.0 : u == Unit::Stimulus ? cfg.stimulus_shrink : cfg.ps_shrink;
    Eigen::VectorXd sd(dim);
    for (std::size_t t = 0; t < ue.terms.size(); ++t) {
      double s = cfg.base_sd * std::pow(cfg.interaction_decay, ue.terms[t].order()) * shrink;
      if (ue.terms[t].order() == 0) s *= cfg.intercept_scale;
      sd.segment(ue.offset[t], ue.width[t]).setConstant(s);
    }
    const int n_groups = u == Unit::Participant ? nP : u == Unit::Stimulus ? nS : nP * nS;
    // Correlated: γ = A·R·P·z·√2 with P the projection on the first half of
    // the coordinates, so the covariance has rank ⌈d/2⌉, a random (seeded)
    // orientation and average marginal variance matching the spherical sds.
    Eigen::MatrixXd B = sd.asDiagonal();
    if (cfg.re_pattern == RePattern::Correlated && dim > 1) {
      const Eigen::MatrixXd R = detail::random_orthogonal(dim, rot_rng);
      B = std::sqrt(2.0) * sd.asDiagonal() * R.leftCols((dim + 1) / 2);
    }
    ue.coords.resize(n_groups, dim);
    for (int g = 0; g < n_groups; ++g) {
      Eigen::VectorXd z(B.cols());
      for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = N(rng);
      ue.coords.row(g) = (B * z).transpose();
    }
    for (std::size_t r = 0; r < n; ++r) {
      const int g = u == Unit::Participant ? pt[r] : u == Unit::Stimulus ? sm[r] : pt[r] * nS + sm[r];
      double v = 0.0;
      for (std::size_t t = 0; t < ue.terms.size(); ++t)
        v += coding(ue.terms[t].factors, r).dot(ue.coords.row(g).segment(ue.offset[t], ue.width[t]));
      y[static_cast<Eigen::Index>(r)] += v;
    }
    out.effects.push_back(std::move(ue));
  }

  for (std::size_t r = 0; r < n; ++r) y[static_cast<Eigen::Index>(r)] += cfg.base_sd * N(rng);

  Dataset ds(n);
  ds.add_numeric("y", std::vector<double>(y.data(), y.data() + y.size()));
  Categorical pc, sc;
  for (int i = 0; i < nP; ++i) pc.levels.push_back(detail::padded('P', i, nP));
  for (int m = 0; m < nS; ++m) sc.levels.push_back(detail::padded('S', m, nS));
  pc.codes = pt;
  sc.codes = sm;
  ds.add_categorical("PT", std::move(pc));
  ds.add_categorical("SM", std::move(sc));
  for (std::size_t f = 0; f < design.size(); ++f) {
    Categorical c;
    for (int l = 0; l < design[f].n_levels(); ++l) c.levels.push_back("a" + std::to_string(l + 1));
    c.codes = lv[f];
    ds.add_categorical(design[f].name(), std::move(c));
  }
  out.data = std::move(ds);
  return out;
}

inline Dataset generate(const GenConfig& cfg) { return generate_with_effects(cfg).data; }

// ---------------------------------------------------------------------------

struct Interval {
  double low = 0.0, high = 1.0;
};

// Adjusted-Wald interval: ñ = n + z², p̃ = (x + z²/2)/ñ, p̃ ± z√(p̃(1−p̃)/ñ),
// clipped to [0, 1]. It is centred on p̃, not on x/n.
inline Interval agresti_coull_ci(int successes, int n, double level = 0.95) {
  if (n < 1 || successes < 0 || successes > n) throw DomainError("agresti_coull_ci needs 0 <= successes <= n, n >= 1");
  const double z = boost::math::quantile(boost::math::normal_distribution<double>(), 0.5 + level / 2.0);
  const double nt = n + z * z;
  const double pt = (successes + z * z / 2.0) / nt;
  const double hw = z * std::sqrt(pt * (1.0 - pt) / nt);
  return {std::max(0.0, pt - hw), std::min(1.0, pt + hw)};
}

struct StudyOptions {
  double alpha = 0.05;
  int threads = 1;
  bool run_tests = true;
  FitOptions fit;
};

// Outcome of one structure on one replicate.
struct ReplicateOutcome {
  bool converged = false;
  std::vector<double> p_values;  // per fixed effect; empty when not converged
};

struct StudyCell {
  std::size_t config_index = 0;
  std::string structure;
  bool include_ps = false;
  std::string effect;
  int rejections = 0;
  int n_used = 0;
  int n_failures = 0;
  int n_replicates = 0;
  double rate = 0.0;
  double ci_low = 0.0, ci_high = 1.0;
  double conv_fail_rate = 0.0;
};

struct SimReport {
  std::vector<GenConfig> configs;
  std::vector<CovFamily> structures;
  int n_replicates = 0;
  double alpha = 0.05;
  std::vector<StudyCell> cells;
  // raw[config][structure][replicate]
  std::vector<std::vector<std::vector<ReplicateOutcome>>> raw;
  std::vector<std::string> effects;  // labels of the fixed effects
};

inline ReplicateOutcome run_replicate(const Dataset& data, const std::string& design, const CovFamily& family,
                                      const StudyOptions& opt) {
  ReplicateOutcome o;
  try {
    const FitProblem pb = make_problem(study_spec(design, family), data, family);
    const FitResult fr = fit(pb, opt.fit);
    o.converged = fr.converged;
    if (fr.converged && opt.run_tests)
      for (const auto& t : type3_all(fr, pb)) o.p_values.push_back(t.p_value);
  } catch (const SpecError&) {
    throw;
  } catch (const Error&) {
    o.converged = false;
    o.p_values.clear();
  }
  return o;
}

// Replicate r of configuration c uses seed derive_seed(config.seed, r).
// Work items run on `threads` workers; results land in fixed slots, so the
// report does not depend on scheduling.
inline SimReport run_study(const std::vector<GenConfig>& configs, const std::vector<CovFamily>& structures,
                           int n_replicates, const StudyOptions& opt = {}) {
  if (n_replicates < 1) throw InvalidConfig("n_replicates must be at least 1");
  if (configs.empty() || structures.empty()) throw InvalidConfig("need at least one configuration and structure");
  for (const auto& c : configs) validate(c);
  for (const auto& s : structures) realize(study_spec(configs[0].design, s), s);

  SimReport rep;
  rep.configs = configs;
  rep.structures = structures;
  rep.n_replicates = n_replicates;
  rep.alpha = opt.alpha;
  rep.raw.assign(configs.size(), std::vector<std::vector<ReplicateOutcome>>(
                                     structures.size(), std::vector<ReplicateOutcome>(static_cast<std::size_t>(n_replicates))));
  for (const auto& t : full_factorial(standard_design(configs[0].design))) rep.effects.push_back(term_label(t));
  for (const auto& c : configs)
    if (full_factorial(standard_design(c.design)).size() != rep.effects.size())
      throw InvalidConfig("all configurations of a study must share a design");

  const std::size_t n_items = configs.size() * static_cast<std::size_t>(n_replicates);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (;;) {
      const std::size_t item = next++;
      if (item >= n_items || failed) return;
      const std::size_t c = item / static_cast<std::size_t>(n_replicates);
      const std::size_t r = item % static_cast<std::size_t>(n_replicates);
      try {
        GenConfig g = configs[c];
        g.seed = derive_seed(configs[c].seed, r);
        const Dataset data = generate(g);
        for (std::size_t s = 0; s < structures.size(); ++s)
          rep.raw[c][s][r] = run_replicate(data, g.design, structures[s], opt);
      } catch (...) {
        if (!failed.exchange(true)) failure = std::current_exception();
        return;
      }
    }
  };
  const int nt = std::max(1, opt.threads);
  if (nt == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nt; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (std::size_t c = 0; c < configs.size(); ++c)
    for (std::size_t s = 0; s < structures.size(); ++s) {
      const auto& outs = rep.raw[c][s];
      int fails = 0;
      for (const auto& o : outs) fails += o.converged ? 0 : 1;
      const std::size_t n_eff = opt.run_tests ? rep.effects.size() : 1;
      for (std::size_t e = 0; e < n_eff; ++e) {
        StudyCell cell;
        cell.config_index = c;
        cell.structure = std::string(to_string(structures[s].tag));
        cell.include_ps = structures[s].include_ps;
        cell.effect = opt.run_tests ? rep.effects[e] : "";
        cell.n_replicates = n_replicates;
        cell.n_failures = fails;
        cell.conv_fail_rate = static_cast<double>(fails) / n_replicates;
        for (const auto& o : outs) {
          if (!o.converged || o.p_values.size() <= e) continue;
          ++cell.n_used;
          if (o.p_values[e] < opt.alpha) ++cell.rejections;
        }
        if (cell.n_used > 0) {
          cell.rate = static_cast<double>(cell.rejections) / cell.n_used;
          const auto ci = agresti_coull_ci(cell.rejections, cell.n_used);
          cell.ci_low = ci.low;
          cell.ci_high = ci.high;
        } else {
          cell.rate = std::numeric_limits<double>::quiet_NaN();
        }
        rep.cells.push_back(cell);
      }
    }
  return rep;
}

inline const StudyCell& find_cell(const SimReport& r, std::string_view structure, bool include_ps,
                                  std::string_view effect, std::size_t config_index = 0) {
  for (const auto& c : r.cells)
    if (c.structure == structure && c.include_ps == include_ps && c.effect == effect && c.config_index == config_index)
      return c;
  throw DomainError("no study cell for " + std::string(structure) + " / " + std::string(effect));
}

// ---------------------------------------------------------------------------

struct PowerPoint {
  std::string structure;
  bool include_ps = false;
  std::string effect;
  double effect_scale = 0.0;
  int n_used = 0;
  double rate = 0.0;
  double corrected_rate = 0.0;  // against the structure's empirical null critical value
  double ratio_vs_ganova = std::numeric_limits<double>::quiet_NaN();
  double corrected_ratio_vs_ganova = std::numeric_limits<double>::quiet_NaN();
};

struct PowerReport {
  GenConfig config;
  std::vector<CovFamily> structures;
  std::vector<double> scales;  // first entry 0: the null run
  int n_replicates = 0;
  double alpha = 0.05;
  std::vector<PowerPoint> points;
};

// α-quantile of the null p-values (the corrected critical value).
inline double empirical_critical_p(std::vector<double> p, double alpha) {
  if (p.empty()) return alpha;
  std::sort(p.begin(), p.end());
  const auto k = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(p.size())));
  return k == 0 ? 0.0 : p[k - 1];
}

// Runs the null study and effect_scale ∈ {.2,.4,.6,.8,1}·max_effect with all
// fixed effects scaled together. The corrected rate rejects when p ≤ c, c
// the ⌊α·n⌋-th smallest null p-value of that structure and effect.
inline PowerReport power_study(const GenConfig& config, const std::vector<CovFamily>& structures, double max_effect,
                               int n_replicates, const StudyOptions& opt = {}) {
  PowerReport pr;
  pr.config = config;
  pr.structures = structures;
  pr.n_replicates = n_replicates;
  pr.alpha = opt.alpha;
  pr.scales = {0.0};
  for (double f : {0.2, 0.4, 0.6, 0.8, 1.0}) pr.scales.push_back(f * max_effect);
  std::vector<GenConfig> cfgs;
  for (double s : pr.scales) {
    GenConfig g = config;
    g.effect_scale = s;
    cfgs.push_back(g);
  }
  StudyOptions o = opt;
  o.run_tests = true;
  const SimReport rep = run_study(cfgs, structures, n_replicates, o);

  const std::size_t ne = rep.effects.size();
  // crit[s][e]
  std::vector<std::vector<double>> crit(structures.size(), std::vector<double>(ne, opt.alpha));
  for (std::size_t s = 0; s < structures.size(); ++s)
    for (std::size_t e = 0; e < ne; ++e) {
      std::vector<double> p;
      for (const auto& o2 : rep.raw[0][s])
        if (o2.converged && o2.p_values.size() > e) p.push_back(o2.p_values[e]);
      crit[s][e] = empirical_critical_p(p, opt.alpha);
    }
  for (std::size_t c = 0; c < cfgs.size(); ++c)
    for (std::size_t s = 0; s < structures.size(); ++s)
      for (std::size_t e = 0; e < ne; ++e) {
        PowerPoint pt;
        pt.structure = std::string(to_string(structures[s].tag));
        pt.include_ps = structures[s].include_ps;
        pt.effect = rep.effects[e];
        pt.effect_scale = pr.scales[c];
        int rej = 0, rej_c = 0;
        for (const auto& o2 : rep.raw[c][s]) {
          if (!o2.converged || o2.p_values.size() <= e) continue;
          ++pt.n_used;
          rej += o2.p_values[e] < opt.alpha;
          rej_c += o2.p_values[e] <= crit[s][e];
        }
        pt.rate = pt.n_used ? static_cast<double>(rej) / pt.n_used : std::numeric_limits<double>::quiet_NaN();
        pt.corrected_rate = pt.n_used ? static_cast<double>(rej_c) / pt.n_used : std::numeric_limits<double>::quiet_NaN();
        pr.points.push_back(pt);
      }
  // Ratios against gANOVA with the same PS setting, when it is in the study.
  for (auto& pt : pr.points)
    for (const auto& ref : pr.points)
      if (ref.structure == "gANOVA" && ref.include_ps == pt.include_ps && ref.effect == pt.effect &&
          ref.effect_scale == pt.effect_scale) {
        if (ref.rate > 0) pt.ratio_vs_ganova = pt.rate / ref.rate;
        if (ref.corrected_rate > 0) pt.corrected_ratio_vs_ganova = pt.corrected_rate / ref.corrected_rate;
      }
  return pr;
}

}  // namespace cremem
