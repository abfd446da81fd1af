#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "cremem/cremem.hpp"

using namespace cremem;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / ("cremem_io_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

void write_file(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  out << s;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Run {
  int status;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(CREMEM_CLI) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {-1, ""};
  std::string out;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) out.append(buf.data(), n);
  const int st = pclose(pipe);
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, out};
}

const char* kToy =
    "y,PT,SM,Am\n"
    "1.5,p1,s1,a1\n"
    "2.0,p1,s1,a2\n"
    "0.5,p2,s1,a1\n"
    "1.0,p2,s1,a2\n";

}  // namespace

TEST(Csv, ToyIngest) {
  std::istringstream in(kToy);
  CsvSchema schema;
  schema.numeric.insert("y");
  const auto d = parse_csv(in, schema);
  EXPECT_EQ(d.n_obs(), 4u);
  EXPECT_TRUE(d.is_numeric("y"));
  EXPECT_EQ(d.categorical("PT").levels, (std::vector<std::string>{"p1", "p2"}));
  EXPECT_EQ(d.categorical("Am").codes, (std::vector<int>{0, 1, 0, 1}));
  EXPECT_DOUBLE_EQ(d.numeric("y")[3], 1.0);
}

TEST(Csv, LevelsAreSortedUnlessGiven) {
  std::istringstream in("y,A\n1,b\n2,c\n3,a\n");
  CsvSchema schema;
  schema.numeric.insert("y");
  EXPECT_EQ(parse_csv(in, schema).categorical("A").levels, (std::vector<std::string>{"a", "b", "c"}));
  std::istringstream in2("y,A\n1,b\n2,c\n3,a\n");
  schema.levels["A"] = {"c", "b", "a"};
  EXPECT_EQ(parse_csv(in2, schema).categorical("A").codes, (std::vector<int>{1, 0, 2}));
  std::istringstream in3("y,A\n1,b\n2,d\n");
  try {
    parse_csv(in3, schema);
    FAIL();
  } catch (const UnknownLevel& e) {
    EXPECT_EQ(e.row(), 2u);
    EXPECT_EQ(e.column(), "A");
  }
}

TEST(Csv, MissingValueReportsCell) {
  std::istringstream in("y,PT,SM,Am\n1.5,p1,s1,a1\n,p1,s1,a2\n");
  CsvSchema schema;
  schema.numeric.insert("y");
  try {
    parse_csv(in, schema);
    FAIL();
  } catch (const MissingValue& e) {
    EXPECT_EQ(e.row(), 2u);
    EXPECT_EQ(e.column(), "y");
  }
}

TEST(Csv, MalformedInput) {
  CsvSchema schema;
  schema.numeric.insert("y");
  std::istringstream short_row("y,PT\n1,p1\n2\n");
  EXPECT_THROW(parse_csv(short_row, schema), ParseError);
  std::istringstream bad_number("y,PT\n1,p1\nx,p2\n");
  EXPECT_THROW(parse_csv(bad_number, schema), ParseError);
  std::istringstream no_y("z,PT\n1,p1\n");
  EXPECT_THROW(parse_csv(no_y, schema), MissingColumn);
  std::istringstream empty("");
  EXPECT_THROW(parse_csv(empty, schema), ParseError);
  EXPECT_THROW(ingest_csv((scratch() / "nope.csv").string(), schema), DataError);
}

TEST(Csv, QuotedFields) {
  std::istringstream in("y,PT\n1,\"p,1\"\n2,\"say \"\"hi\"\"\"\n");
  CsvSchema schema;
  schema.numeric.insert("y");
  const auto d = parse_csv(in, schema);
  EXPECT_EQ(d.categorical("PT").levels, (std::vector<std::string>{"p,1", "say \"hi\""}));
}

TEST(Csv, RoundTripGeneratedData) {
  for (const char* design : {"M1", "M2", "M4"}) {
    GenConfig g;
    g.design = design;
    g.n_participants = 6;
    g.n_stimuli = 6;
    g.seed = 12;
    const auto d = generate(g);
    const auto path = scratch() / (std::string(design) + ".csv");
    write_csv(path.string(), d);
    CsvSchema schema;
    schema.numeric.insert("y");
    EXPECT_EQ(ingest_csv(path.string(), schema), d) << design;
  }
}

TEST(Cli, ParamCountTable) {
  const auto r = cli("param-count --designs M1..M5 --families all --json");
  ASSERT_EQ(r.status, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("designs"), nlohmann::json({"M1", "M2", "M3", "M4", "M5"}));
  const std::map<std::string, std::vector<int>> table = {
      {"RI", {2, 2, 2, 2, 2}},           {"RI-L", {8, 8, 16, 16, 64}},
      {"MAX", {20, 90, 342, 342, 5256}}, {"ZCP", {8, 18, 36, 36, 144}},
      {"gANOVA", {8, 8, 16, 16, 64}},    {"RI+", {3, 3, 3, 3, 3}},
      {"RI-L+", {9, 9, 19, 17, 71}},     {"MAX+", {21, 91, 352, 343, 5311}},
      {"ZCP+", {9, 19, 40, 37, 154}},    {"gANOVA+", {9, 9, 19, 17, 71}},
  };
  ASSERT_EQ(j.at("rows").size(), 10u);
  for (const auto& row : j.at("rows")) {
    std::string fam = row.at("family");
    // ZCP rows may carry their coding in the name.
    if (fam.rfind("ZCP", 0) == 0) fam = fam.back() == '+' ? "ZCP+" : "ZCP";
    ASSERT_TRUE(table.count(fam)) << fam;
    EXPECT_EQ(row.at("counts").get<std::vector<int>>(), table.at(fam)) << fam;
  }
}

TEST(Cli, FitJsonShape) {
  GenConfig g;
  g.n_participants = 8;
  g.n_stimuli = 8;
  g.seed = 3;
  const auto path = scratch() / "fit.csv";
  write_csv(path.string(), generate(g));
  const auto r = cli("fit --data " + path.string() +
                     " --formula \"y ~ Am + (1|PT|Am) + (1|SM)\" --factor Am=M --family ganova --json");
  ASSERT_EQ(r.status, 0) << r.out;
  const auto j = nlohmann::json::parse(r.out);
  for (const char* key : {"theta", "beta", "sigma2", "deviance", "anova", "schema", "config"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j.at("anova").size(), 1u);
  // Text output is the default.
  const auto t = cli("fit --data " + path.string() + " --formula \"y ~ Am + (1|PT|Am) + (1|SM)\" --factor Am=M");
  EXPECT_EQ(t.status, 0);
  EXPECT_NE(t.out.find("Am"), std::string::npos);
}

TEST(Cli, SimulateNullIsDeterministic) {
  const std::string args = "simulate-null --design M1 --participants 6 --stimuli 6 --replicates 6 --family ganova --seed 7";
  const auto a = scratch() / "null_a.json", b = scratch() / "null_b.json";
  const auto ca = scratch() / "null_a.csv";
  ASSERT_EQ(cli(args + " --output-json " + a.string() + " --output-csv " + ca.string()).status, 0);
  ASSERT_EQ(cli(args + " --output-json " + b.string()).status, 0);
  EXPECT_EQ(read_file(a), read_file(b));
  EXPECT_FALSE(read_file(a).empty());
  const std::string csv = read_file(ca);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "structure,include_ps,effect,rate,ci_low,ci_high,n_used,conv_fail_rate");
  const auto j = nlohmann::json::parse(read_file(a));
  EXPECT_TRUE(j.contains("schema"));
  EXPECT_EQ(j.at("config").at("gen").at("seed"), 7);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(cli("param-count --designs M9").status, 2);
  EXPECT_EQ(cli("param-count --families nope").status, 2);
  EXPECT_EQ(cli("no-such-command").status, 2);
  EXPECT_EQ(cli("fit --data " + (scratch() / "absent.csv").string() + " --formula \"y ~ Am + (1|PT)\" --factor Am=M").status, 3);
  const auto bad = scratch() / "bad.csv";
  write_file(bad, "y,PT,SM,Am\n1,p1,s1,a1\n,p1,s1,a2\n");
  EXPECT_EQ(cli("fit --data " + bad.string() + " --formula \"y ~ Am + (1|PT)\" --factor Am=M").status, 3);
  const auto ok = scratch() / "toy.csv";
  write_file(ok, kToy);
  EXPECT_EQ(cli("fit --data " + ok.string() + " --formula \"y ~ Am + (1|PT|\" --factor Am=M").status, 2);
  EXPECT_EQ(cli("fit --data " + ok.string() + " --formula \"y ~ Zz + (1|PT)\" --factor Am=M").status, 2);
}

TEST(Cli, ConfigFile) {
  const auto cfg = scratch() / "count.json";
  write_file(cfg, R"({"designs": ["M1", "M2"], "families": ["RI", "MAX"]})");
  const auto r = cli("param-count --config " + cfg.string() + " --json");
  ASSERT_EQ(r.status, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("designs").size(), 2u);
  EXPECT_EQ(j.at("rows").size(), 2u);
  EXPECT_EQ(j.at("rows")[1].at("counts"), nlohmann::json({20, 90}));
}
