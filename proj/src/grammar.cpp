#include "grl/grammar.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_map>

namespace grl {

namespace {

constexpr std::string_view kOdot = "\xE2\x8A\x99";  // U+2299

std::string strip(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string replace_odot(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size();) {
    if (s.substr(i, kOdot.size()) == kOdot) {
      out.push_back('o');
      i += kOdot.size();
    } else {
      out.push_back(s[i]);
      ++i;
    }
  }
  return out;
}

constexpr std::size_t kInfinite = std::numeric_limits<std::size_t>::max() / 4;

}  // namespace

Cfg Cfg::from_text(std::string_view text) {
  Cfg g;
  std::vector<std::pair<std::string, std::vector<std::string>>> lines;  // lhs, alternatives
  std::istringstream in{replace_odot(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = strip(line);
    if (t.empty() || t.front() == '#') continue;
    const auto arrow = t.find("->");
    if (arrow == std::string::npos) {
      throw GrammarError("grammar line " + std::to_string(line_no) + ": missing '->'");
    }
    const std::string lhs = strip(t.substr(0, arrow));
    if (lhs.size() != 1) {
      throw GrammarError("grammar line " + std::to_string(line_no) +
                         ": left-hand side must be a single character");
    }
    std::vector<std::string> alts;
    std::string current;
    for (char c : t.substr(arrow + 2)) {
      if (c == '|') {
        alts.push_back(current);
        current.clear();
      } else if (c != ' ' && c != '\t') {
        current.push_back(c);
      }
    }
    alts.push_back(current);
    for (const auto& a : alts) {
      if (a.empty()) {
        throw GrammarError("grammar line " + std::to_string(line_no) + ": empty alternative");
      }
    }
    if (g.find_variable(lhs)) {
      throw GrammarError("grammar line " + std::to_string(line_no) + ": variable '" + lhs +
                         "' declared twice");
    }
    g.variables_.push_back(lhs);
    lines.emplace_back(lhs, std::move(alts));
  }
  if (lines.empty()) throw GrammarError("grammar has no rules");

  g.by_lhs_.resize(g.variables_.size());
  for (std::size_t v = 0; v < lines.size(); ++v) {
    for (const auto& alt : lines[v].second) {
      Rule r{v, {}};
      for (char c : alt) {
        const std::string name(1, c);
        if (auto var = g.find_variable(name)) {
          r.rhs.push_back({true, *var});
        } else {
          auto term = g.find_terminal(name);
          if (!term) {
            g.terminals_.push_back(name);
            term = g.terminals_.size() - 1;
          }
          r.rhs.push_back({false, *term});
        }
      }
      g.by_lhs_[v].push_back(g.rules_.size());
      g.rules_.push_back(std::move(r));
    }
  }
  g.start_ = 0;
  g.finalize();
  return g;
}

void Cfg::finalize() {
  min_length_.assign(variables_.size(), kInfinite);
  bool changed = true;
  while (changed) {
    changed = false;
    for (const Rule& r : rules_) {
      const std::size_t len = min_length(r);
      if (len < min_length_[r.lhs]) {
        min_length_[r.lhs] = len;
        changed = true;
      }
    }
  }
  for (std::size_t v = 0; v < variables_.size(); ++v) {
    if (min_length_[v] >= kInfinite) {
      throw GrammarError("variable '" + variables_[v] + "' derives no terminal string");
    }
  }
}

std::optional<std::size_t> Cfg::find_variable(std::string_view name) const {
  for (std::size_t i = 0; i < variables_.size(); ++i)
    if (variables_[i] == name) return i;
  return std::nullopt;
}

std::optional<std::size_t> Cfg::find_terminal(std::string_view name) const {
  for (std::size_t i = 0; i < terminals_.size(); ++i)
    if (terminals_[i] == name) return i;
  return std::nullopt;
}

std::size_t Cfg::min_length(const Rule& rule) const {
  std::size_t len = 0;
  for (const Symbol& s : rule.rhs) {
    const std::size_t part = s.is_variable ? min_length_[s.index] : terminals_[s.index].size();
    if (part >= kInfinite) return kInfinite;
    len += part;
  }
  return len;
}

std::size_t Cfg::min_completion_length(const SententialForm& form) const {
  std::size_t len = 0;
  for (const Symbol& s : form) len += s.is_variable ? min_length_[s.index] : terminals_[s.index].size();
  return len;
}

bool Cfg::is_terminal_rule(std::size_t rule) const {
  const auto& rhs = rules_[rule].rhs;
  return std::none_of(rhs.begin(), rhs.end(), [](const Symbol& s) { return s.is_variable; });
}

std::string Cfg::render(const SententialForm& form) const {
  std::string out;
  for (const Symbol& s : form) out += s.is_variable ? variables_[s.index] : terminals_[s.index];
  return out;
}

std::string Cfg::render_rule(std::size_t rule) const {
  const Rule& r = rules_[rule];
  return variables_[r.lhs] + "->" + render(r.rhs);
}

const Cfg& g3() {
  static const Cfg g = Cfg::from_text("M -> (MoM) | (MM) | A | I | J\n");
  return g;
}

const Cfg& g3_tilde() {
  static const Cfg g = Cfg::from_text(
      "E -> (EoM) | (NE) | (EN) | A | J\n"
      "N -> (NoM) | (NoN) | I\n"
      "M -> (MM) | (EE)\n");
  return g;
}

std::optional<FirstVariable> read_first_variable(const SententialForm& form) {
  for (std::size_t i = 0; i < form.size(); ++i)
    if (form[i].is_variable) return FirstVariable{form[i].index, i};
  return std::nullopt;
}

SententialForm replace(const Cfg& g, const SententialForm& form, std::size_t position,
                       std::size_t rule) {
  if (position >= form.size()) throw GrammarError("replace: position out of range");
  if (rule >= g.rules().size()) throw GrammarError("replace: unknown rule");
  const Symbol& at = form[position];
  if (!at.is_variable) throw GrammarError("replace: symbol at position is a terminal");
  const Rule& r = g.rules()[rule];
  if (r.lhs != at.index) {
    throw GrammarError("replace: rule " + g.render_rule(rule) + " does not expand variable '" +
                       g.variables()[at.index] + "'");
  }
  SententialForm out;
  out.reserve(form.size() + r.rhs.size() - 1);
  out.insert(out.end(), form.begin(), form.begin() + static_cast<std::ptrdiff_t>(position));
  out.insert(out.end(), r.rhs.begin(), r.rhs.end());
  out.insert(out.end(), form.begin() + static_cast<std::ptrdiff_t>(position) + 1, form.end());
  return out;
}

std::vector<std::size_t> legal_rules(const Cfg& g, const SententialForm& form, std::size_t c_max) {
  std::vector<std::size_t> out;
  const auto first = read_first_variable(form);
  if (!first) return out;
  const std::size_t base = g.min_completion_length(form) - g.min_length(first->variable);
  for (std::size_t r : g.rules_of(first->variable)) {
    if (base + g.min_length(g.rules()[r]) <= c_max) out.push_back(r);
  }
  return out;
}

std::string generate(const Cfg& g, const RuleChooser& chooser, std::size_t c_max) {
  SententialForm form = g.start_form();
  while (auto first = read_first_variable(form)) {
    const auto legal = legal_rules(g, form, c_max);
    if (legal.empty()) {
      throw GrammarError("generate: no rule of '" + g.variables()[first->variable] +
                         "' fits within c_max=" + std::to_string(c_max));
    }
    const std::size_t r = chooser(form, legal);
    if (std::find(legal.begin(), legal.end(), r) == legal.end()) {
      throw GrammarError("generate: chooser returned an illegal rule");
    }
    form = replace(g, form, first->position, r);
  }
  return g.render(form);
}

TokenSet::TokenSet(const Cfg& g)
    : variable_count_(g.variables().size()),
      rule_count_(g.rules().size()),
      terminal_count_(g.terminals().size()) {
  masks_.assign(variable_count_, std::vector<bool>(rule_count_, false));
  terminal_rule_.resize(rule_count_);
  for (std::size_t r = 0; r < rule_count_; ++r) {
    masks_[g.rules()[r].lhs][r] = true;
    terminal_rule_[r] = g.is_terminal_rule(r);
  }
}

// ---------------------------------------------------------------------------
// Sentences

Sentence Sentence::leaf(Op op) {
  if (op == Op::MatMul || op == Op::Hadamard) throw std::invalid_argument("leaf: not a leaf op");
  auto node = std::make_shared<Node>();
  node->op = op;
  node->text = op == Op::A ? "A" : op == Op::I ? "I" : "J";
  return Sentence(std::move(node));
}

Sentence Sentence::matmul(Sentence lhs, Sentence rhs) {
  auto node = std::make_shared<Node>();
  node->op = Op::MatMul;
  node->text = "(" + lhs.text() + rhs.text() + ")";
  node->children = std::make_unique<std::pair<Sentence, Sentence>>(std::move(lhs), std::move(rhs));
  return Sentence(std::move(node));
}

Sentence Sentence::hadamard(Sentence lhs, Sentence rhs) {
  auto node = std::make_shared<Node>();
  node->op = Op::Hadamard;
  node->text = "(" + lhs.text() + "o" + rhs.text() + ")";
  node->children = std::make_unique<std::pair<Sentence, Sentence>>(std::move(lhs), std::move(rhs));
  return Sentence(std::move(node));
}

std::string normalize_sentence(std::string_view s) {
  std::string out;
  for (char c : replace_odot(s))
    if (c != ' ' && c != '\t' && c != '\n' && c != '\r') out.push_back(c);
  return out;
}

namespace {

class RelaxedParser {
 public:
  explicit RelaxedParser(const std::string& s) : s_(s) {}

  Sentence parse_all() {
    Sentence t = term();
    if (pos_ != s_.size()) throw ParseError("unexpected trailing input", pos_);
    return t;
  }

 private:
  Sentence term() {
    if (pos_ >= s_.size()) throw ParseError("unexpected end of input", pos_);
    switch (s_[pos_]) {
      case 'A': ++pos_; return Sentence::leaf(Op::A);
      case 'I': ++pos_; return Sentence::leaf(Op::I);
      case 'J': ++pos_; return Sentence::leaf(Op::J);
      case '(': {
        ++pos_;
        Sentence lhs = term();
        bool is_hadamard = false;
        if (pos_ < s_.size() && s_[pos_] == 'o') {
          is_hadamard = true;
          ++pos_;
        }
        Sentence rhs = term();
        if (pos_ >= s_.size() || s_[pos_] != ')') throw ParseError("expected ')'", pos_);
        ++pos_;
        return is_hadamard ? Sentence::hadamard(std::move(lhs), std::move(rhs))
                           : Sentence::matmul(std::move(lhs), std::move(rhs));
      }
      default:
        throw ParseError(std::string("unexpected character '") + s_[pos_] + "'", pos_);
    }
  }

  const std::string& s_;
  std::size_t pos_ = 0;
};

// Memoised recogniser: ends(v, p) is the set of positions where a derivation
// of v starting at p can end. Left recursion is not supported.
class Recognizer {
 public:
  Recognizer(const Cfg& g, const std::string& s) : g_(g), s_(s) {}

  bool accepts() { return contains(ends(g_.start(), 0), s_.size()); }
  std::size_t furthest() const { return furthest_; }

 private:
  static bool contains(const std::vector<std::size_t>& v, std::size_t x) {
    return std::find(v.begin(), v.end(), x) != v.end();
  }

  const std::vector<std::size_t>& ends(std::size_t var, std::size_t pos) {
    const auto key = std::make_pair(var, pos);
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    memo_[key] = {};  // guards against left recursion
    std::vector<std::size_t> result;
    for (std::size_t r : g_.rules_of(var)) {
      std::vector<std::size_t> frontier{pos};
      for (const Symbol& sym : g_.rules()[r].rhs) {
        std::vector<std::size_t> next;
        for (std::size_t p : frontier) {
          if (sym.is_variable) {
            for (std::size_t e : ends(sym.index, p))
              if (!contains(next, e)) next.push_back(e);
          } else {
            const std::string& t = g_.terminals()[sym.index];
            if (s_.compare(p, t.size(), t) == 0) {
              if (!contains(next, p + t.size())) next.push_back(p + t.size());
            } else {
              furthest_ = std::max(furthest_, p);
            }
          }
        }
        frontier = std::move(next);
        if (frontier.empty()) break;
      }
      for (std::size_t e : frontier)
        if (!contains(result, e)) result.push_back(e);
    }
    auto& slot = memo_[key];
    slot = std::move(result);
    return slot;
  }

  const Cfg& g_;
  const std::string& s_;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> memo_;
  std::size_t furthest_ = 0;
};

}  // namespace

Sentence parse_relaxed(std::string_view s) {
  const std::string norm = normalize_sentence(s);
  return RelaxedParser(norm).parse_all();
}

bool in_language(std::string_view s, const Cfg& g) {
  const std::string norm = normalize_sentence(s);
  return Recognizer(g, norm).accepts();
}

Sentence parse(std::string_view s, const Cfg& g) {
  const std::string norm = normalize_sentence(s);
  Sentence t = RelaxedParser(norm).parse_all();
  Recognizer rec(g, norm);
  if (!rec.accepts()) {
    throw ParseError("sentence is not in the language of the grammar",
                     std::min(rec.furthest(), norm.size() ? norm.size() - 1 : 0));
  }
  return t;
}

struct SentenceEvaluator::Impl {
  explicit Impl(const DenseMatrix& a) : a(a) {}

  const DenseMatrix& eval(const Sentence& t) {
    if (auto it = cache.find(t.text()); it != cache.end()) return it->second;
    DenseMatrix value;
    switch (t.op()) {
      case Op::A: value = a; break;
      case Op::I: value = DenseMatrix::identity(a.size()); break;
      case Op::J: value = DenseMatrix::ones_off_diagonal(a.size()); break;
      case Op::Hadamard: value = hadamard(eval(t.lhs()), eval(t.rhs())); break;
      case Op::MatMul: {
        const Sentence& l = t.lhs();
        const Sentence& r = t.rhs();
        if (l.op() == Op::I) value = eval(r);
        else if (r.op() == Op::I) value = eval(l);
        else if (l.op() == Op::J) value = mul_by_j(eval(r), Side::left);
        else if (r.op() == Op::J) value = mul_by_j(eval(l), Side::right);
        else value = matmul(eval(l), eval(r));
        break;
      }
    }
    return cache.emplace(t.text(), std::move(value)).first->second;
  }

  DenseMatrix a;
  std::unordered_map<std::string, DenseMatrix> cache;
};

SentenceEvaluator::SentenceEvaluator(const DenseMatrix& a) : impl_(std::make_shared<Impl>(a)) {}

const DenseMatrix& SentenceEvaluator::operator()(const Sentence& t) { return impl_->eval(t); }

std::size_t SentenceEvaluator::cached() const { return impl_->cache.size(); }

DenseMatrix evaluate_sentence(const Sentence& t, const DenseMatrix& a) {
  SentenceEvaluator ev(a);
  return ev(t);
}

}  // namespace grl
