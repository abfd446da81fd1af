#pragma once

// Report emission. JSON documents carry a versioned "schema" field and the
// resolved configuration; CSV and aligned text are views of the same data.

#include <cmath>
#include <cstdio>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cremem/covariance.hpp"
#include "cremem/inference.hpp"
#include "cremem/reml.hpp"
#include "cremem/simulation.hpp"

namespace cremem {

using Json = nlohmann::ordered_json;

inline constexpr const char* kFitSchema = "cremem.fit/1";
inline constexpr const char* kNullSchema = "cremem.null-study/1";
inline constexpr const char* kPowerSchema = "cremem.power-study/1";
inline constexpr const char* kParamCountSchema = "cremem.param-count/1";
inline constexpr const char* kConvergenceSchema = "cremem.convergence/1";

inline Json to_json(const GenConfig& c) {
  return Json{{"design", c.design},
              {"n_participants", c.n_participants},
              {"n_stimuli", c.n_stimuli},
              {"re_pattern", std::string(to_string(c.re_pattern))},
              {"include_ps_effects", c.include_ps_effects},
              {"base_sd", c.base_sd},
              {"interaction_decay", c.interaction_decay},
              {"stimulus_shrink", c.stimulus_shrink},
              {"ps_shrink", c.ps_shrink},
              {"effect_scale", c.effect_scale},
              {"intercept_scale", c.intercept_scale},
              {"seed", c.seed},
              {"rotation_seed", c.rotation_seed}};
}

// Missing keys keep their defaults; unknown keys are an error.
inline GenConfig gen_config_from_json(const Json& j, GenConfig c = {}) {
  if (!j.is_object()) throw InvalidConfig("generator configuration must be an object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "design") c.design = v.get<std::string>();
      else if (k == "n_participants") c.n_participants = v.get<int>();
      else if (k == "n_stimuli") c.n_stimuli = v.get<int>();
      else if (k == "re_pattern") c.re_pattern = parse_re_pattern(v.get<std::string>());
      else if (k == "include_ps_effects") c.include_ps_effects = v.get<bool>();
      else if (k == "base_sd") c.base_sd = v.get<double>();
      else if (k == "interaction_decay") c.interaction_decay = v.get<double>();
      else if (k == "stimulus_shrink") c.stimulus_shrink = v.get<double>();
      else if (k == "ps_shrink") c.ps_shrink = v.get<double>();
      else if (k == "effect_scale") c.effect_scale = v.get<double>();
      else if (k == "intercept_scale") c.intercept_scale = v.get<double>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "rotation_seed") c.rotation_seed = v.get<std::uint64_t>();
      else throw InvalidConfig("unknown generator key '" + k + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("bad generator configuration: ") + e.what());
  }
  validate(c);
  return c;
}

// NaN and infinities become null.
inline Json num(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "NA";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline std::string full(double v) {
  if (std::isnan(v)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Columns padded to their widest cell; the first column left-aligned.
inline void write_table(std::ostream& out, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> w;
  for (const auto& r : rows)
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (w.size() <= j) w.push_back(0);
      w[j] = std::max(w[j], r[j].size());
    }
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (j) out << "  ";
      if (j == 0) out << std::left << std::setw(static_cast<int>(w[j])) << r[j];
      else out << std::right << std::setw(static_cast<int>(w[j])) << r[j];
    }
    out << std::left << '\n';
  }
}

// ---------------------------------------------------------------------------
// Fit.

inline Json fit_json(const FitProblem& pb, const FitResult& r, const std::vector<TestResult>& anova, const Json& config) {
  Json j;
  j["schema"] = kFitSchema;
  j["config"] = config;
  j["family"] = family_name(r.structure.family);
  j["converged"] = r.converged;
  j["optimizer"] = r.optimizer_used ? std::string(to_string(*r.optimizer_used)) : std::string("warm-start");
  j["n_evals"] = r.n_evals;
  j["deviance"] = num(r.deviance);
  j["sigma2"] = num(r.sigma2_hat);
  Json theta = Json::array();
  const auto labels = r.structure.theta_labels(pb.spec.units);
  for (Eigen::Index i = 0; i < r.theta_hat.size(); ++i)
    theta.push_back({{"label", labels[static_cast<std::size_t>(i)]},
                     {"value", r.theta_hat[i]},
                     {"boundary", static_cast<bool>(r.boundary_flags[static_cast<std::size_t>(i)])}});
  j["theta"] = theta;
  Json beta = Json::array();
  for (Eigen::Index i = 0; i < r.beta_hat.size(); ++i)
    beta.push_back({{"label", pb.design.x_labels[static_cast<std::size_t>(i)]}, {"value", r.beta_hat[i]}});
  j["beta"] = beta;
  Json var = Json::object();
  for (const auto& [k, v] : term_variances(r, pb.spec.units)) var[k] = v;
  var["Residual"] = r.sigma2_hat;
  j["variances"] = var;
  Json an = Json::array();
  for (const auto& t : anova)
    an.push_back({{"effect", t.label},
                  {"F", num(t.F)},
                  {"df_num", t.df_num},
                  {"df_den", num(t.df_den)},
                  {"p_value", num(t.p_value)},
                  {"df_fallback", t.df_fallback}});
  j["anova"] = an;
  return j;
}

inline void write_fit_text(std::ostream& out, const FitProblem& pb, const FitResult& r,
                           const std::vector<TestResult>& anova) {
  out << "family " << family_name(r.structure.family) << ", REML deviance " << fixed(r.deviance, 4)
      << (r.converged ? "" : " (NOT CONVERGED)") << ", " << r.n_evals << " evaluations\n\n";
  std::vector<std::vector<std::string>> vt{{"random term", "variance", "sd"}};
  for (const auto& [k, v] : term_variances(r, pb.spec.units)) vt.push_back({k, fixed(v, 6), fixed(std::sqrt(v), 6)});
  vt.push_back({"Residual", fixed(r.sigma2_hat, 6), fixed(std::sqrt(r.sigma2_hat), 6)});
  write_table(out, vt);
  out << '\n';
  std::vector<std::vector<std::string>> at{{"effect", "F", "df_num", "df_den", "p"}};
  for (const auto& t : anova)
    at.push_back({t.label, fixed(t.F, 4), std::to_string(t.df_num), fixed(t.df_den, 2) + (t.df_fallback ? "*" : ""),
                  fixed(t.p_value, 4)});
  write_table(out, at);
}

// ---------------------------------------------------------------------------
// Studies.

inline Json structures_json(const std::vector<CovFamily>& s) {
  Json a = Json::array();
  for (const auto& f : s) a.push_back(family_name(f));
  return a;
}

inline Json sim_json(const SimReport& r, const Json& config) {
  Json j;
  j["schema"] = kNullSchema;
  j["config"] = config;
  j["alpha"] = r.alpha;
  j["n_replicates"] = r.n_replicates;
  j["structures"] = structures_json(r.structures);
  Json cells = Json::array();
  for (const auto& c : r.cells)
    cells.push_back({{"config_index", c.config_index},
                     {"structure", c.structure},
                     {"include_ps", c.include_ps},
                     {"effect", c.effect},
                     {"rate", num(c.rate)},
                     {"ci_low", num(c.ci_low)},
                     {"ci_high", num(c.ci_high)},
                     {"rejections", c.rejections},
                     {"n_used", c.n_used},
                     {"n_failures", c.n_failures},
                     {"conv_fail_rate", c.conv_fail_rate}});
  j["cells"] = cells;
  return j;
}

inline void write_sim_csv(std::ostream& out, const SimReport& r) {
  out << "structure,include_ps,effect,rate,ci_low,ci_high,n_used,conv_fail_rate\n";
  for (const auto& c : r.cells)
    out << c.structure << ',' << (c.include_ps ? "true" : "false") << ',' << c.effect << ',' << full(c.rate) << ','
        << full(c.ci_low) << ',' << full(c.ci_high) << ',' << c.n_used << ',' << full(c.conv_fail_rate) << '\n';
}

// Table-5 shape: one row per structure, one column per effect.
inline void write_sim_text(std::ostream& out, const SimReport& r) {
  std::vector<std::vector<std::string>> t{{"structure"}};
  for (const auto& e : r.effects) t[0].push_back(e);
  t[0].push_back("conv.fail");
  for (const auto& s : r.structures) {
    std::vector<std::string> row{family_name(s)};
    double fail = 0.0;
    for (const auto& e : r.effects) {
      const auto& c = find_cell(r, to_string(s.tag), s.include_ps, e);
      row.push_back(fixed(c.rate, 3) + " [" + fixed(c.ci_low, 3) + ";" + fixed(c.ci_high, 3) + "]");
      fail = c.conv_fail_rate;
    }
    row.push_back(fixed(100.0 * fail, 1) + "%");
    t.push_back(std::move(row));
  }
  write_table(out, t);
}

inline Json power_json(const PowerReport& p, const Json& config) {
  Json j;
  j["schema"] = kPowerSchema;
  j["config"] = config;
  j["alpha"] = p.alpha;
  j["n_replicates"] = p.n_replicates;
  j["structures"] = structures_json(p.structures);
  j["effect_scales"] = p.scales;
  Json pts = Json::array();
  for (const auto& q : p.points)
    pts.push_back({{"structure", q.structure},
                   {"include_ps", q.include_ps},
                   {"effect", q.effect},
                   {"effect_scale", q.effect_scale},
                   {"rate", num(q.rate)},
                   {"corrected_rate", num(q.corrected_rate)},
                   {"ratio_vs_ganova", num(q.ratio_vs_ganova)},
                   {"corrected_ratio_vs_ganova", num(q.corrected_ratio_vs_ganova)},
                   {"n_used", q.n_used}});
  j["points"] = pts;
  return j;
}

inline void write_power_csv(std::ostream& out, const PowerReport& p) {
  out << "structure,include_ps,effect,effect_scale,rate,corrected_rate,ratio_vs_ganova,corrected_ratio_vs_ganova,n_used\n";
  for (const auto& q : p.points)
    out << q.structure << ',' << (q.include_ps ? "true" : "false") << ',' << q.effect << ',' << full(q.effect_scale)
        << ',' << full(q.rate) << ',' << full(q.corrected_rate) << ',' << full(q.ratio_vs_ganova) << ','
        << full(q.corrected_ratio_vs_ganova) << ',' << q.n_used << '\n';
}

// ---------------------------------------------------------------------------
// Parameter counts (Table-3 shape): families × {−, +} rows, designs columns.

struct ParamCountTable {
  std::vector<std::string> designs;
  std::vector<CovFamily> families;
  std::vector<std::vector<int>> counts;  // [family][design]
};

inline ParamCountTable param_count_table(const std::vector<std::string>& designs, const std::vector<CovFamily>& families) {
  ParamCountTable t{designs, families, {}};
  for (const auto& f : families) {
    std::vector<int> row;
    for (const auto& d : designs) row.push_back(count_params(f, standard_design(d)));
    t.counts.push_back(std::move(row));
  }
  return t;
}

inline Json param_count_json(const ParamCountTable& t) {
  Json j;
  j["schema"] = kParamCountSchema;
  j["designs"] = t.designs;
  Json rows = Json::array();
  for (std::size_t i = 0; i < t.families.size(); ++i) rows.push_back({{"family", family_name(t.families[i])}, {"counts", t.counts[i]}});
  j["rows"] = rows;
  return j;
}

inline void write_param_count_text(std::ostream& out, const ParamCountTable& t) {
  std::vector<std::vector<std::string>> rows{{"family"}};
  for (const auto& d : t.designs) rows[0].push_back(d);
  for (std::size_t i = 0; i < t.families.size(); ++i) {
    std::vector<std::string> r{family_name(t.families[i])};
    for (int c : t.counts[i]) r.push_back(std::to_string(c));
    rows.push_back(std::move(r));
  }
  write_table(out, rows);
}

inline void write_param_count_csv(std::ostream& out, const ParamCountTable& t) {
  out << "family";
  for (const auto& d : t.designs) out << ',' << d;
  out << '\n';
  for (std::size_t i = 0; i < t.families.size(); ++i) {
    out << family_name(t.families[i]);
    for (int c : t.counts[i]) out << ',' << c;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Convergence (Table-4 shape): failure percentage per structure and design.

struct ConvergenceTable {
  std::vector<std::string> designs;
  std::vector<CovFamily> families;
  std::vector<std::vector<double>> fail_rate;  // [family][design]
  int n_replicates = 0;
};

inline Json convergence_json(const ConvergenceTable& t, const Json& config) {
  Json j;
  j["schema"] = kConvergenceSchema;
  j["config"] = config;
  j["designs"] = t.designs;
  j["n_replicates"] = t.n_replicates;
  Json rows = Json::array();
  for (std::size_t i = 0; i < t.families.size(); ++i)
    rows.push_back({{"family", family_name(t.families[i])}, {"fail_rate", t.fail_rate[i]}});
  j["rows"] = rows;
  return j;
}

inline void write_convergence_text(std::ostream& out, const ConvergenceTable& t) {
  std::vector<std::vector<std::string>> rows{{"family"}};
  for (const auto& d : t.designs) rows[0].push_back(d);
  for (std::size_t i = 0; i < t.families.size(); ++i) {
    std::vector<std::string> r{family_name(t.families[i])};
    for (double v : t.fail_rate[i]) r.push_back(fixed(100.0 * v, 1) + "%");
    rows.push_back(std::move(r));
  }
  write_table(out, rows);
}

}  // namespace cremem
