#pragma once

// Model formula mini-language, factor taxonomy and the estimability rules
// for crossed participant/stimulus designs.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cremem/errors.hpp"

namespace cremem {

// Which sampling unit a factor describes.
//   P  - feature of the participant (between-participant)
//   S  - feature of the stimulus
//   M  - experimental manipulation (crossed with both units)
//   PS - feature of the participant/stimulus pair
//   O  - feature of the single observation
enum class FactorKind { P, S, M, PS, O };

inline std::string_view to_string(FactorKind k) {
  switch (k) {
    case FactorKind::P: return "P";
    case FactorKind::S: return "S";
    case FactorKind::M: return "M";
    case FactorKind::PS: return "PS";
    case FactorKind::O: return "O";
  }
  return "?";
}

// Accepts "P", "A_P", "ap" and similar spellings.
inline std::optional<FactorKind> parse_factor_kind(std::string_view text) {
  std::string s;
  for (char c : text) {
    if (c != '_') s.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  }
  if (s.size() > 1 && s[0] == 'A') s.erase(0, 1);
  if (s == "P") return FactorKind::P;
  if (s == "S") return FactorKind::S;
  if (s == "M") return FactorKind::M;
  if (s == "PS") return FactorKind::PS;
  if (s == "O") return FactorKind::O;
  return std::nullopt;
}

class Factor {
 public:
  Factor(std::string name, FactorKind kind, int n_levels)
      : name_(std::move(name)), kind_(kind), n_levels_(n_levels) {
    if (n_levels_ < 2) {
      throw InvalidLevels("factor '" + name_ + "' needs at least 2 levels, got " +
                          std::to_string(n_levels_));
    }
  }

  const std::string& name() const noexcept { return name_; }
  FactorKind kind() const noexcept { return kind_; }
  int n_levels() const noexcept { return n_levels_; }

  friend bool operator==(const Factor&, const Factor&) = default;

 private:
  std::string name_;
  FactorKind kind_;
  int n_levels_;
};

using FactorTable = std::map<std::string, Factor, std::less<>>;

enum class Unit { Participant, Stimulus, ParticipantStimulus };

inline constexpr Unit kAllUnits[] = {Unit::Participant, Unit::Stimulus, Unit::ParticipantStimulus};

inline std::string_view to_string(Unit u) {
  switch (u) {
    case Unit::Participant: return "participant";
    case Unit::Stimulus: return "stimulus";
    case Unit::ParticipantStimulus: return "participant:stimulus";
  }
  return "?";
}

// Column names identifying the two sampling units. `crossed_alias` is an
// optional single identifier for the participant:stimulus pair (e.g. PTSM).
struct UnitIds {
  std::string participant = "PT";
  std::string stimulus = "SM";
  std::string crossed_alias;

  friend bool operator==(const UnitIds&, const UnitIds&) = default;
};

struct GroupingUnit {
  Unit tag;
  std::string id_column;  // "PT:SM" for the crossed unit
};

inline GroupingUnit grouping_unit(const UnitIds& ids, Unit u) {
  switch (u) {
    case Unit::Participant: return {u, ids.participant};
    case Unit::Stimulus: return {u, ids.stimulus};
    case Unit::ParticipantStimulus: return {u, ids.participant + ":" + ids.stimulus};
  }
  return {u, ""};
}

// Table 1 of the factor taxonomy. `kind == nullopt` is the random intercept,
// allowed for every unit.
inline bool estimable(Unit unit, std::optional<FactorKind> kind) {
  if (!kind) return true;
  switch (unit) {
    case Unit::Participant:
      return *kind != FactorKind::P;
    case Unit::Stimulus:
      return *kind != FactorKind::S;
    case Unit::ParticipantStimulus:
      return *kind == FactorKind::M || *kind == FactorKind::O;
  }
  return false;
}

// How a random term was written. Plain `(1|U:A)`, correlated `(A|U)`,
// uncorrelated `(A||U)`, constrained `(1|U|A)`.
enum class Bar { Plain, Correlated, Uncorrelated, Constrained };

struct RandomTerm {
  Unit unit = Unit::Participant;
  std::vector<std::string> factors;  // canonical (fixed-part) order, empty = intercept
  Bar bar = Bar::Plain;

  bool constrained() const noexcept { return bar == Bar::Constrained; }
  int order() const noexcept { return static_cast<int>(factors.size()); }
  bool same_effect(const RandomTerm& o) const { return unit == o.unit && factors == o.factors; }

  friend bool operator==(const RandomTerm&, const RandomTerm&) = default;
};

using FixedTerm = std::vector<std::string>;

struct ModelSpec {
  std::string response;
  std::vector<Factor> fixed_factors;     // by kind (P, S, M, PS, O), then name
  std::vector<FixedTerm> fixed_terms;    // intercept implicit
  std::vector<RandomTerm> random_terms;  // canonical order
  UnitIds units;

  const Factor& factor(std::string_view name) const {
    for (const auto& f : fixed_factors)
      if (f.name() == name) return f;
    throw UnknownIdentifier(std::string(name));
  }
  int factor_index(std::string_view name) const {
    for (std::size_t i = 0; i < fixed_factors.size(); ++i)
      if (fixed_factors[i].name() == name) return static_cast<int>(i);
    return -1;
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline std::string term_label(const std::vector<std::string>& factors) {
  if (factors.empty()) return "(Intercept)";
  std::string s;
  for (std::size_t i = 0; i < factors.size(); ++i) {
    if (i) s += ':';
    s += factors[i];
  }
  return s;
}

inline std::string term_label(const RandomTerm& t, const UnitIds& ids) {
  std::string s = grouping_unit(ids, t.unit).id_column;
  for (const auto& f : t.factors) s += ":" + f;
  return s;
}

namespace detail {

// Sort key for a factor set: (size, positions in the fixed-factor list).
inline std::vector<int> term_key(const std::vector<std::string>& factors,
                                 const std::vector<Factor>& order) {
  std::vector<int> key{static_cast<int>(factors.size())};
  for (const auto& f : factors) {
    int idx = static_cast<int>(order.size());
    for (std::size_t i = 0; i < order.size(); ++i)
      if (order[i].name() == f) idx = static_cast<int>(i);
    key.push_back(idx);
  }
  return key;
}

inline void canonicalize_factors(std::vector<std::string>& factors, const std::vector<Factor>& order) {
  auto pos = [&](const std::string& n) {
    for (std::size_t i = 0; i < order.size(); ++i)
      if (order[i].name() == n) return i;
    return order.size();
  };
  std::stable_sort(factors.begin(), factors.end(),
                   [&](const std::string& a, const std::string& b) { return pos(a) < pos(b); });
  factors.erase(std::unique(factors.begin(), factors.end()), factors.end());
}

inline void sort_terms(std::vector<FixedTerm>& terms, const std::vector<Factor>& order) {
  std::stable_sort(terms.begin(), terms.end(), [&](const FixedTerm& a, const FixedTerm& b) {
    return term_key(a, order) < term_key(b, order);
  });
}

inline void sort_random_terms(std::vector<RandomTerm>& terms, const std::vector<Factor>& order) {
  std::stable_sort(terms.begin(), terms.end(), [&](const RandomTerm& a, const RandomTerm& b) {
    auto ka = std::make_tuple(static_cast<int>(a.unit), static_cast<int>(a.bar), term_key(a.factors, order));
    auto kb = std::make_tuple(static_cast<int>(b.unit), static_cast<int>(b.bar), term_key(b.factors, order));
    return ka < kb;
  });
}

}  // namespace detail

// All non-empty factor subsets of `factors` as terms, ordered by degree.
inline std::vector<FixedTerm> full_factorial(const std::vector<Factor>& factors) {
  std::vector<FixedTerm> out;
  const std::size_t n = factors.size();
  for (std::size_t mask = 1; mask < (std::size_t{1} << n); ++mask) {
    FixedTerm t;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (std::size_t{1} << i)) t.push_back(factors[i].name());
    out.push_back(std::move(t));
  }
  detail::sort_terms(out, factors);
  return out;
}

// The random interaction with the crossed unit that has no replication to
// separate it from the residual: all M/O factors of the design at once.
inline std::vector<std::string> error_confounded_factors(const std::vector<Factor>& design) {
  std::vector<std::string> out;
  for (const auto& f : design)
    if (f.kind() == FactorKind::M || f.kind() == FactorKind::O) out.push_back(f.name());
  return out;
}

// Every estimable random term (all subsets of the estimable factors per
// unit) minus the error-confounded crossed-unit term.
inline std::vector<RandomTerm> saturated_terms(const std::vector<Factor>& design, bool include_ps) {
  std::vector<RandomTerm> out;
  const auto confounded = error_confounded_factors(design);
  for (Unit u : kAllUnits) {
    if (u == Unit::ParticipantStimulus && !include_ps) continue;
    std::vector<Factor> allowed;
    for (const auto& f : design)
      if (estimable(u, f.kind())) allowed.push_back(f);
    std::vector<RandomTerm> unit_terms{RandomTerm{u, {}, Bar::Plain}};
    for (auto& t : full_factorial(allowed)) unit_terms.push_back(RandomTerm{u, std::move(t), Bar::Plain});
    for (auto& t : unit_terms) {
      if (u == Unit::ParticipantStimulus && t.factors == confounded) continue;
      out.push_back(std::move(t));
    }
  }
  return out;
}

// Checks the ModelSpec invariants; throws on the first violation.
inline void validate(const ModelSpec& spec) {
  const auto confounded = error_confounded_factors(spec.fixed_factors);
  for (std::size_t i = 0; i < spec.random_terms.size(); ++i) {
    const auto& t = spec.random_terms[i];
    std::set<std::string> seen;
    for (const auto& name : t.factors) {
      if (!seen.insert(name).second)
        throw DuplicateTerm("factor '" + name + "' repeated in random term " + term_label(t, spec.units));
      const int idx = spec.factor_index(name);
      if (idx < 0)
        throw EstimabilityError("factor '" + name + "' is used in a random term but not in the fixed part");
      const auto& f = spec.fixed_factors[static_cast<std::size_t>(idx)];
      if (!estimable(t.unit, f.kind())) {
        throw EstimabilityError("random interaction " + grouping_unit(spec.units, t.unit).id_column + ":" +
                                name + " is not estimable (factor of kind " +
                                std::string(to_string(f.kind())) + ")");
      }
    }
    if (t.unit == Unit::ParticipantStimulus && t.factors == confounded) {
      throw EstimabilityError("random term " + term_label(t, spec.units) +
                              " is confounded with the residual error");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (spec.random_terms[j].same_effect(t))
        throw DuplicateTerm("duplicate random term " + term_label(t, spec.units));
    }
  }
}

namespace detail {

enum class Tok { Ident, One, Zero, Tilde, Plus, Star, Colon, Bar, Bar2, LParen, RParen, End };

struct Token {
  Tok kind;
  std::string text;
  std::size_t pos;
};

inline std::vector<Token> tokenize(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '.') {
      const std::size_t start = i;
      while (i < s.size() && (std::isalnum(static_cast<unsigned char>(s[i])) || s[i] == '_' || s[i] == '.')) ++i;
      out.push_back({Tok::Ident, std::string(s.substr(start, i - start)), start});
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      const std::size_t start = i;
      while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
      const auto num = s.substr(start, i - start);
      if (num == "1") out.push_back({Tok::One, "1", start});
      else if (num == "0") out.push_back({Tok::Zero, "0", start});
      else throw SyntaxError("unexpected number '" + std::string(num) + "'", start);
      continue;
    }
    switch (c) {
      case '~': out.push_back({Tok::Tilde, "~", i}); break;
      case '+': out.push_back({Tok::Plus, "+", i}); break;
      case '*': out.push_back({Tok::Star, "*", i}); break;
      case ':': out.push_back({Tok::Colon, ":", i}); break;
      case '(': out.push_back({Tok::LParen, "(", i}); break;
      case ')': out.push_back({Tok::RParen, ")", i}); break;
      case '|':
        if (i + 1 < s.size() && s[i + 1] == '|') {
          out.push_back({Tok::Bar2, "||", i});
          ++i;
        } else {
          out.push_back({Tok::Bar, "|", i});
        }
        break;
      default:
        throw SyntaxError(std::string("unexpected character '") + c + "'", i);
    }
    ++i;
  }
  out.push_back({Tok::End, "", s.size()});
  return out;
}

struct IdentRef {
  std::string name;
  std::size_t pos;
};

// A '*' chain of ':' products, e.g. A*B:C -> {{A},{B,C}}.
using Chunks = std::vector<std::vector<IdentRef>>;

class FormulaParser {
 public:
  FormulaParser(std::string_view text, const FactorTable& table, const UnitIds& ids)
      : toks_(tokenize(text)), table_(table), ids_(ids) {}

  ModelSpec parse() {
    ModelSpec spec;
    spec.units = ids_;
    spec.response = expect(Tok::Ident, "response name").text;
    expect(Tok::Tilde, "'~'");

    std::vector<Chunks> fixed;
    struct PendingRandom {
      Bar bar;
      std::vector<IdentRef> unit_chain;
      std::vector<Chunks> expr;
      std::size_t pos;
    };
    std::vector<PendingRandom> randoms;

    bool first = true;
    while (true) {
      if (!first) {
        if (peek().kind != Tok::Plus) break;
        next();
      }
      first = false;
      const Token& t = peek();
      if (t.kind == Tok::One) {
        next();
      } else if (t.kind == Tok::Ident) {
        fixed.push_back(parse_term());
      } else if (t.kind == Tok::LParen) {
        const std::size_t pos = next().pos;
        PendingRandom r{Bar::Plain, {}, {}, pos};
        if (peek().kind == Tok::One) {
          next();
          expect(Tok::Bar, "'|'");
          r.unit_chain = parse_chain();
          if (peek().kind == Tok::Bar) {
            next();
            r.bar = Bar::Constrained;
            r.expr = parse_expr();
          }
        } else {
          r.expr = parse_expr();
          const Token& b = next();
          if (b.kind == Tok::Bar) r.bar = Bar::Correlated;
          else if (b.kind == Tok::Bar2) r.bar = Bar::Uncorrelated;
          else throw SyntaxError("expected '|' or '||'", b.pos);
          r.unit_chain = parse_chain();
        }
        expect(Tok::RParen, "')'");
        randoms.push_back(std::move(r));
      } else {
        throw SyntaxError("expected a term", t.pos);
      }
    }
    if (peek().kind != Tok::End) throw SyntaxError("unexpected '" + peek().text + "'", peek().pos);

    // Fixed part. Factor order comes from the factors, not the text: a
    // first-appearance order is not always reproducible by render().
    for (const auto& chunks : fixed)
      for (const auto& chunk : chunks)
        for (const auto& id : chunk) {
          const Factor& f = lookup_factor(id);
          if (spec.factor_index(f.name()) < 0) spec.fixed_factors.push_back(f);
        }
    std::sort(spec.fixed_factors.begin(), spec.fixed_factors.end(), [](const Factor& a, const Factor& b) {
      return std::make_pair(static_cast<int>(a.kind()), a.name()) < std::make_pair(static_cast<int>(b.kind()), b.name());
    });
    for (const auto& chunks : fixed)
      for (auto& t : expand(chunks)) {
        detail::canonicalize_factors(t, spec.fixed_factors);
        if (std::find(spec.fixed_terms.begin(), spec.fixed_terms.end(), t) == spec.fixed_terms.end())
          spec.fixed_terms.push_back(std::move(t));
      }
    detail::sort_terms(spec.fixed_terms, spec.fixed_factors);

    for (const auto& r : randoms) {
      std::vector<std::string> chain_factors;
      const Unit unit = resolve_unit(r.unit_chain, r.bar == Bar::Plain, chain_factors);
      auto check_factor = [&](const std::string& name) {
        if (spec.factor_index(name) < 0)
          throw EstimabilityError("factor '" + name + "' is used in a random term but not in the fixed part");
      };
      if (r.bar == Bar::Plain) {
        for (const auto& n : chain_factors) check_factor(n);
        detail::canonicalize_factors(chain_factors, spec.fixed_factors);
        spec.random_terms.push_back(RandomTerm{unit, chain_factors, Bar::Plain});
        continue;
      }
      spec.random_terms.push_back(RandomTerm{unit, {}, r.bar});
      std::vector<std::vector<std::string>> expanded;
      for (const auto& chunks : r.expr)
        for (auto& t : expand(chunks)) {
          for (const auto& n : t) check_factor(n);
          detail::canonicalize_factors(t, spec.fixed_factors);
          if (std::find(expanded.begin(), expanded.end(), t) != expanded.end()) continue;
          expanded.push_back(t);
          spec.random_terms.push_back(RandomTerm{unit, std::move(t), r.bar});
        }
    }
    validate(spec);
    detail::sort_random_terms(spec.random_terms, spec.fixed_factors);
    return spec;
  }

 private:
  const Token& peek() const { return toks_[i_]; }
  const Token& next() { return toks_[i_ < toks_.size() - 1 ? i_++ : i_]; }
  const Token& expect(Tok k, const char* what) {
    const Token& t = peek();
    if (t.kind != k) throw SyntaxError(std::string("expected ") + what, t.pos);
    return next();
  }

  Chunks parse_term() {
    Chunks chunks{{}};
    const Token& first = expect(Tok::Ident, "identifier");
    chunks.back().push_back({first.text, first.pos});
    while (peek().kind == Tok::Star || peek().kind == Tok::Colon) {
      const bool star = next().kind == Tok::Star;
      if (star) chunks.emplace_back();
      const Token& id = expect(Tok::Ident, "identifier");
      chunks.back().push_back({id.text, id.pos});
    }
    return chunks;
  }

  std::vector<Chunks> parse_expr() {
    std::vector<Chunks> terms{parse_term()};
    while (peek().kind == Tok::Plus) {
      next();
      terms.push_back(parse_term());
    }
    return terms;
  }

  std::vector<IdentRef> parse_chain() {
    std::vector<IdentRef> chain;
    const Token& first = expect(Tok::Ident, "grouping unit");
    chain.push_back({first.text, first.pos});
    while (peek().kind == Tok::Colon) {
      next();
      const Token& id = expect(Tok::Ident, "identifier");
      chain.push_back({id.text, id.pos});
    }
    return chain;
  }

  const Factor& lookup_factor(const IdentRef& id) const {
    auto it = table_.find(id.name);
    if (it == table_.end()) throw UnknownIdentifier(id.name);
    return it->second;
  }

  // Splits a ':' chain into grouping-unit identifiers and factor names.
  Unit resolve_unit(const std::vector<IdentRef>& chain, bool allow_factors,
                    std::vector<std::string>& factors) const {
    bool has_p = false, has_s = false;
    for (const auto& id : chain) {
      if (id.name == ids_.participant) {
        has_p = true;
      } else if (id.name == ids_.stimulus) {
        has_s = true;
      } else if (!ids_.crossed_alias.empty() && id.name == ids_.crossed_alias) {
        has_p = has_s = true;
      } else if (table_.count(id.name)) {
        if (!allow_factors) throw SyntaxError("expected a grouping unit, found factor '" + id.name + "'", id.pos);
        factors.push_back(id.name);
      } else {
        throw UnknownIdentifier(id.name);
      }
    }
    if (!has_p && !has_s) throw SyntaxError("random term has no grouping unit", chain.front().pos);
    if (has_p && has_s) return Unit::ParticipantStimulus;
    return has_p ? Unit::Participant : Unit::Stimulus;
  }

  std::vector<std::vector<std::string>> expand(const Chunks& chunks) const {
    for (const auto& chunk : chunks)
      for (const auto& id : chunk) lookup_factor(id);
    std::vector<std::vector<std::string>> out;
    const std::size_t n = chunks.size();
    for (std::size_t mask = 1; mask < (std::size_t{1} << n); ++mask) {
      std::vector<std::string> t;
      for (std::size_t i = 0; i < n; ++i)
        if (mask & (std::size_t{1} << i))
          for (const auto& id : chunks[i]) t.push_back(id.name);
      out.push_back(std::move(t));
    }
    return out;
  }

  std::vector<Token> toks_;
  std::size_t i_ = 0;
  const FactorTable& table_;
  const UnitIds& ids_;
};

}  // namespace detail

inline ModelSpec parse_formula(std::string_view text, const FactorTable& table, const UnitIds& ids = {}) {
  return detail::FormulaParser(text, table, ids).parse();
}

// Canonical text form; parse_formula(render(spec)) == spec.
inline std::string render(const ModelSpec& spec) {
  std::ostringstream os;
  os << spec.response << " ~ ";
  if (spec.fixed_terms.empty()) {
    os << "1";
  } else {
    for (std::size_t i = 0; i < spec.fixed_terms.size(); ++i) os << (i ? " + " : "") << term_label(spec.fixed_terms[i]);
  }
  const auto unit_text = [&](Unit u) { return grouping_unit(spec.units, u).id_column; };
  std::vector<bool> done(spec.random_terms.size(), false);
  for (std::size_t i = 0; i < spec.random_terms.size(); ++i) {
    if (done[i]) continue;
    const auto& t = spec.random_terms[i];
    if (t.bar == Bar::Plain) {
      os << " + (1|" << term_label(t, spec.units) << ")";
      done[i] = true;
      continue;
    }
    std::vector<std::string> parts;
    for (std::size_t j = i; j < spec.random_terms.size(); ++j) {
      const auto& o = spec.random_terms[j];
      if (o.unit != t.unit || o.bar != t.bar) continue;
      done[j] = true;
      if (!o.factors.empty()) parts.push_back(term_label(o.factors));
    }
    std::string expr;
    for (std::size_t k = 0; k < parts.size(); ++k) expr += (k ? " + " : "") + parts[k];
    if (parts.empty()) {
      os << " + (1|" << unit_text(t.unit) << ")";
    } else if (t.bar == Bar::Constrained) {
      os << " + (1|" << unit_text(t.unit) << "|" << expr << ")";
    } else {
      os << " + (" << expr << (t.bar == Bar::Correlated ? "|" : "||") << unit_text(t.unit) << ")";
    }
  }
  return os.str();
}

}  // namespace cremem
