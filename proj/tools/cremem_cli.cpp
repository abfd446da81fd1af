// Command-line front end: fit user data, run simulation studies, print the
// parameter-count and convergence tables.
//
// Exit status: 0 success, 1 numerical failure, 2 configuration / model
// specification error, 3 data error.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cremem/cremem.hpp"

using namespace cremem;

namespace {

struct Settings {
  // shared
  std::string config_path;
  std::uint64_t seed = 1;
  int threads = 1;
  double alpha = 0.05;
  int replicates = 500;
  std::string output_json, output_csv;
  bool json_stdout = false;
  // fit
  std::string data_path, formula, family = "auto";
  std::vector<std::string> factors;
  std::string participant_id = "PT", stimulus_id = "SM";
  // studies
  std::vector<std::string> families{"ganova"};
  std::vector<std::string> designs{"M1"};
  int participants = 12, stimuli = 12;
  std::string pattern = "spherical";
  bool ps_effects = false;
  double base_sd = 1.0, effect_scale = 0.0, intercept_scale = 1.0, max_effect = 0.5;
  std::uint64_t rotation_seed = GenConfig{}.rotation_seed;
};

// "M1..M5" or a comma / space separated list.
std::vector<std::string> expand_designs(const std::vector<std::string>& in) {
  std::vector<std::string> out;
  for (const auto& s : in) {
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = cremem::detail::trim(tok);
      if (tok.empty()) continue;
      const auto dots = tok.find("..");
      if (dots != std::string::npos && tok.size() > dots + 2 && tok[0] == 'M' && tok[dots + 2] == 'M') {
        const int a = std::stoi(tok.substr(1, dots - 1)), b = std::stoi(tok.substr(dots + 3));
        for (int k = a; k <= b; ++k) out.push_back("M" + std::to_string(k));
      } else {
        out.push_back(tok);
      }
    }
  }
  for (const auto& d : out) standard_design(d);
  return out;
}

// "all" expands to the ten families of the parameter table (ZCP = ZCP-poly).
std::vector<CovFamily> expand_families(const std::vector<std::string>& in) {
  std::vector<CovFamily> out;
  for (const auto& s : in) {
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = cremem::detail::trim(tok);
      if (tok.empty()) continue;
      if (tok == "all") {
        for (bool ps : {false, true})
          for (auto t : {FamilyTag::RI, FamilyTag::RIL, FamilyTag::MAX, FamilyTag::ZCPpoly, FamilyTag::GANOVA})
            out.push_back({t, ps});
      } else {
        out.push_back(parse_family(tok));
      }
    }
  }
  if (out.empty()) throw InvalidConfig("no covariance family given");
  return out;
}

// Family implied by the bars of the random part.
CovFamily infer_family(const ModelSpec& spec) {
  CovFamily f{FamilyTag::RI, false};
  bool slopes = false, constrained = false, correlated = false, uncorrelated = false;
  for (const auto& t : spec.random_terms) {
    if (t.unit == Unit::ParticipantStimulus) f.include_ps = true;
    if (!t.factors.empty()) slopes = true;
    constrained |= t.bar == Bar::Constrained;
    correlated |= t.bar == Bar::Correlated;
    uncorrelated |= t.bar == Bar::Uncorrelated;
  }
  if (constrained + correlated + uncorrelated > 1)
    throw IncompatibleSpec("random part mixes bar kinds; pass --family explicitly");
  if (constrained) f.tag = FamilyTag::GANOVA;
  else if (correlated) f.tag = FamilyTag::MAX;
  else if (uncorrelated) f.tag = FamilyTag::ZCPpoly;
  else f.tag = slopes ? FamilyTag::RIL : FamilyTag::RI;
  return f;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidConfig("cannot write '" + path + "'");
  out << content;
}

Json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot open config file '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig("config file '" + path + "' is not valid JSON: " + e.what());
  }
}

// Fills settings the command line left unset from the config file. Keys
// mirror the long option names with '-' replaced by '_'; "gen" holds
// generator fields.
void apply_config(const Json& cfg, CLI::App& sub, Settings& s) {
  auto unset = [&](const char* opt) {
    const CLI::Option* o = sub.get_option_no_throw(opt);
    return !o || o->count() == 0;
  };
  try {
    for (const auto& [k, v] : cfg.items()) {
      if (k == "mode") {
        if (v.get<std::string>() != sub.get_name()) throw InvalidConfig("config mode '" + v.get<std::string>() + "' does not match subcommand '" + sub.get_name() + "'");
      } else if (k == "gen") {
        GenConfig g = gen_config_from_json(v);
        if (unset("--design")) s.designs = {g.design};
        if (unset("--participants")) s.participants = g.n_participants;
        if (unset("--stimuli")) s.stimuli = g.n_stimuli;
        if (unset("--pattern")) s.pattern = std::string(to_string(g.re_pattern));
        if (unset("--ps-effects")) s.ps_effects = g.include_ps_effects;
        if (unset("--base-sd")) s.base_sd = g.base_sd;
        if (unset("--effect-scale")) s.effect_scale = g.effect_scale;
        if (unset("--intercept-scale")) s.intercept_scale = g.intercept_scale;
        if (unset("--rotation-seed")) s.rotation_seed = g.rotation_seed;
        if (unset("--seed") && v.contains("seed")) s.seed = g.seed;
      } else if (k == "seed") { if (unset("--seed")) s.seed = v.get<std::uint64_t>(); }
      else if (k == "threads") { if (unset("--threads")) s.threads = v.get<int>(); }
      else if (k == "alpha") { if (unset("--alpha")) s.alpha = v.get<double>(); }
      else if (k == "replicates") { if (unset("--replicates")) s.replicates = v.get<int>(); }
      else if (k == "output_json" || k == "output_path") { if (unset("--output-json")) s.output_json = v.get<std::string>(); }
      else if (k == "output_csv") { if (unset("--output-csv")) s.output_csv = v.get<std::string>(); }
      else if (k == "data") { if (unset("--data")) s.data_path = v.get<std::string>(); }
      else if (k == "formula") { if (unset("--formula")) s.formula = v.get<std::string>(); }
      else if (k == "family") {
        if (sub.get_name() == "fit") { if (unset("--family")) s.family = v.get<std::string>(); }
        else if (unset("--family")) s.families = {v.get<std::string>()};
      }
      else if (k == "families") { if (unset("--family")) s.families = v.get<std::vector<std::string>>(); }
      else if (k == "designs") { if (unset("--designs")) s.designs = v.get<std::vector<std::string>>(); }
      else if (k == "factors") { if (unset("--factor")) s.factors = v.get<std::vector<std::string>>(); }
      else if (k == "participant_id") { if (unset("--participant-id")) s.participant_id = v.get<std::string>(); }
      else if (k == "stimulus_id") { if (unset("--stimulus-id")) s.stimulus_id = v.get<std::string>(); }
      else if (k == "max_effect") { if (unset("--max-effect")) s.max_effect = v.get<double>(); }
      else throw InvalidConfig("unknown config key '" + k + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("bad config value: ") + e.what());
  }
}

GenConfig gen_config(const Settings& s, const std::string& design) {
  GenConfig g;
  g.design = design;
  g.n_participants = s.participants;
  g.n_stimuli = s.stimuli;
  g.re_pattern = parse_re_pattern(s.pattern);
  g.include_ps_effects = s.ps_effects;
  g.base_sd = s.base_sd;
  g.effect_scale = s.effect_scale;
  g.intercept_scale = s.intercept_scale;
  g.seed = s.seed;
  g.rotation_seed = s.rotation_seed;
  validate(g);
  return g;
}

Json study_config_json(const Settings& s, const std::string& mode, const GenConfig& g,
                       const std::vector<CovFamily>& fams) {
  return Json{{"mode", mode},       {"gen", to_json(g)},         {"families", structures_json(fams)},
              {"replicates", s.replicates}, {"alpha", s.alpha}, {"threads", s.threads}};
}

int run_fit(const Settings& s) {
  if (s.data_path.empty() || s.formula.empty()) throw InvalidConfig("fit needs --data and --formula");
  const auto tilde = s.formula.find('~');
  if (tilde == std::string::npos) throw SyntaxError("expected '~'", 0);
  const std::string response = cremem::detail::trim(s.formula.substr(0, tilde));
  CsvSchema schema;
  schema.numeric.insert(response);
  const Dataset data = ingest_csv(s.data_path, schema);

  FactorTable table;
  for (const auto& f : s.factors) {
    const auto eq = f.find('=');
    if (eq == std::string::npos) throw InvalidConfig("--factor expects NAME=KIND, got '" + f + "'");
    const std::string name = f.substr(0, eq);
    const auto kind = parse_factor_kind(f.substr(eq + 1));
    if (!kind) throw InvalidConfig("unknown factor kind in '" + f + "' (P, S, M, PS or O)");
    if (!data.has(name)) throw MissingColumn(name);
    if (data.is_numeric(name)) throw LevelMismatch("factor column '" + name + "' is numeric");
    table.emplace(name, Factor(name, *kind, data.categorical(name).n_levels()));
  }
  const ModelSpec spec = parse_formula(s.formula, table, UnitIds{s.participant_id, s.stimulus_id, {}});
  const CovFamily fam = s.family == "auto" ? infer_family(spec) : parse_family(s.family);
  const FitProblem pb = make_problem(spec, std::make_shared<const Dataset>(data), realize(spec, fam));
  const FitResult fr = fit(pb);
  std::vector<TestResult> anova;
  if (fr.converged) anova = type3_all(fr, pb);

  Json cfg{{"mode", "fit"}, {"data", s.data_path}, {"formula", render(spec)}, {"family", family_name(fam)},
           {"factors", s.factors}};
  const Json j = fit_json(pb, fr, anova, cfg);
  if (!s.output_json.empty()) write_text_file(s.output_json, j.dump(2) + "\n");
  if (s.json_stdout) std::cout << j.dump(2) << '\n';
  else write_fit_text(std::cout, pb, fr, anova);
  if (!fr.converged) {
    std::cerr << "warning: the fit did not converge; no tests reported\n";
    return 1;
  }
  return 0;
}

int run_null(const Settings& s) {
  const auto designs = expand_designs(s.designs);
  if (designs.size() != 1) throw InvalidConfig("simulate-null takes one design");
  const auto fams = expand_families(s.families);
  const GenConfig g = gen_config(s, designs[0]);
  StudyOptions opt;
  opt.alpha = s.alpha;
  opt.threads = s.threads;
  const SimReport rep = run_study({g}, fams, s.replicates, opt);
  const Json j = sim_json(rep, study_config_json(s, "simulate-null", g, fams));
  if (!s.output_json.empty()) write_text_file(s.output_json, j.dump(2) + "\n");
  if (!s.output_csv.empty()) {
    std::ostringstream os;
    write_sim_csv(os, rep);
    write_text_file(s.output_csv, os.str());
  }
  if (s.json_stdout) std::cout << j.dump(2) << '\n';
  else write_sim_text(std::cout, rep);
  return 0;
}

int run_power(const Settings& s) {
  const auto designs = expand_designs(s.designs);
  if (designs.size() != 1) throw InvalidConfig("simulate-power takes one design");
  const auto fams = expand_families(s.families);
  const GenConfig g = gen_config(s, designs[0]);
  StudyOptions opt;
  opt.alpha = s.alpha;
  opt.threads = s.threads;
  const PowerReport pr = power_study(g, fams, s.max_effect, s.replicates, opt);
  Json cfg = study_config_json(s, "simulate-power", g, fams);
  cfg["max_effect"] = s.max_effect;
  const Json j = power_json(pr, cfg);
  if (!s.output_json.empty()) write_text_file(s.output_json, j.dump(2) + "\n");
  std::ostringstream os;
  write_power_csv(os, pr);
  if (!s.output_csv.empty()) write_text_file(s.output_csv, os.str());
  if (s.json_stdout) std::cout << j.dump(2) << '\n';
  else std::cout << os.str();
  return 0;
}

int run_param_count(const Settings& s) {
  const auto t = param_count_table(expand_designs(s.designs), expand_families(s.families));
  const Json j = param_count_json(t);
  if (!s.output_json.empty()) write_text_file(s.output_json, j.dump(2) + "\n");
  if (!s.output_csv.empty()) {
    std::ostringstream os;
    write_param_count_csv(os, t);
    write_text_file(s.output_csv, os.str());
  }
  if (s.json_stdout) std::cout << j.dump(2) << '\n';
  else write_param_count_text(std::cout, t);
  return 0;
}

int run_convergence(const Settings& s) {
  ConvergenceTable t;
  t.designs = expand_designs(s.designs);
  t.families = expand_families(s.families);
  t.n_replicates = s.replicates;
  t.fail_rate.assign(t.families.size(), std::vector<double>(t.designs.size(), 0.0));
  StudyOptions opt;
  opt.threads = s.threads;
  opt.run_tests = false;
  Json gens = Json::array();
  for (std::size_t d = 0; d < t.designs.size(); ++d) {
    const GenConfig g = gen_config(s, t.designs[d]);
    gens.push_back(to_json(g));
    const SimReport rep = run_study({g}, t.families, s.replicates, opt);
    for (std::size_t f = 0; f < t.families.size(); ++f)
      t.fail_rate[f][d] = find_cell(rep, to_string(t.families[f].tag), t.families[f].include_ps, "").conv_fail_rate;
  }
  const Json j = convergence_json(t, Json{{"mode", "convergence"}, {"gen", gens}, {"replicates", s.replicates}, {"threads", s.threads}});
  if (!s.output_json.empty()) write_text_file(s.output_json, j.dump(2) + "\n");
  if (s.json_stdout) std::cout << j.dump(2) << '\n';
  else write_convergence_text(std::cout, t);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Crossed participant/stimulus mixed models: REML fits, type-III tests and simulation studies"};
  app.require_subcommand(1);
  Settings s;

  auto shared = [&](CLI::App* sub) {
    sub->add_option("--config", s.config_path, "JSON file with default values for this command");
    sub->add_option("--output-json", s.output_json, "write the JSON report here");
    sub->add_flag("--json", s.json_stdout, "print JSON instead of a text table");
  };
  auto study = [&](CLI::App* sub) {
    sub->add_option("--design", s.designs, "design M1..M5");
    sub->add_option("--family", s.families, "covariance families (comma list, 'all', trailing '+' adds PS terms)");
    sub->add_option("--participants", s.participants, "participants per dataset");
    sub->add_option("--stimuli", s.stimuli, "stimuli per dataset");
    sub->add_option("--replicates", s.replicates, "Monte-Carlo replicates");
    sub->add_option("--alpha", s.alpha, "test level");
    sub->add_option("--seed", s.seed, "master seed");
    sub->add_option("--rotation-seed", s.rotation_seed, "seed of the correlated pattern's orientation");
    sub->add_option("--threads", s.threads, "worker threads");
    sub->add_option("--pattern", s.pattern, "random-effect pattern: spherical or correlated");
    sub->add_flag("--ps-effects", s.ps_effects, "generate participant:stimulus random effects");
    sub->add_option("--base-sd", s.base_sd, "base standard deviation");
    sub->add_option("--intercept-scale", s.intercept_scale, "multiplier of the random-intercept sds");
    sub->add_option("--output-csv", s.output_csv, "write the CSV report here");
  };

  auto* fit_cmd = app.add_subcommand("fit", "fit a model to a long-format CSV and test every fixed effect");
  shared(fit_cmd);
  fit_cmd->add_option("--data", s.data_path, "CSV file, one row per observation");
  fit_cmd->add_option("--formula", s.formula, "model formula, e.g. \"y ~ Am + (1|PT|Am) + (1|SM)\"");
  fit_cmd->add_option("--family", s.family, "covariance family or 'auto' (from the bars)");
  fit_cmd->add_option("--factor", s.factors, "NAME=KIND with KIND in P, S, M, PS, O (repeatable)");
  fit_cmd->add_option("--participant-id", s.participant_id, "participant id column");
  fit_cmd->add_option("--stimulus-id", s.stimulus_id, "stimulus id column");

  auto* null_cmd = app.add_subcommand("simulate-null", "type-I error study");
  shared(null_cmd);
  study(null_cmd);
  null_cmd->add_option("--effect-scale", s.effect_scale, "fixed-effect size (0 = null)");

  auto* power_cmd = app.add_subcommand("simulate-power", "power curves at .2,.4,.6,.8,1 x max effect");
  shared(power_cmd);
  study(power_cmd);
  power_cmd->add_option("--max-effect", s.max_effect, "largest effect scale");

  auto* count_cmd = app.add_subcommand("param-count", "number of covariance parameters per family and design");
  shared(count_cmd);
  count_cmd->add_option("--designs", s.designs, "designs, e.g. M1..M5");
  count_cmd->add_option("--families", s.families, "families or 'all'");
  count_cmd->add_option("--output-csv", s.output_csv, "write the CSV table here");

  auto* conv_cmd = app.add_subcommand("convergence", "convergence-failure rates per family and design");
  shared(conv_cmd);
  study(conv_cmd);
  conv_cmd->add_option("--designs", s.designs, "designs, e.g. M1,M2");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    if (sub == count_cmd && count_cmd->get_option("--designs")->count() == 0) s.designs = {"M1..M5"};
    if (sub == count_cmd && count_cmd->get_option("--families")->count() == 0) s.families = {"all"};
    if (!s.config_path.empty()) apply_config(load_config(s.config_path), *sub, s);
    if (sub == fit_cmd) return run_fit(s);
    if (sub == null_cmd) return run_null(s);
    if (sub == power_cmd) return run_power(s);
    if (sub == count_cmd) return run_param_count(s);
    return run_convergence(s);
  } catch (const SpecError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
