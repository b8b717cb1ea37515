#include "grl/formulas.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>

namespace grl {

void LinearCombo::add(double coefficient, const Sentence& sentence) {
  for (auto it = terms_.begin(); it != terms_.end(); ++it) {
    if (it->sentence == sentence) {
      it->coefficient += coefficient;
      if (it->coefficient == 0.0) terms_.erase(it);
      return;
    }
  }
  if (coefficient != 0.0) terms_.push_back({coefficient, sentence});
}

// ---------------------------------------------------------------------------
// Formula DAG

struct Formula::Node {
  Kind kind;
  Op op = Op::A;
  std::vector<Formula> operands;               // MatMul / Hadamard
  std::vector<std::pair<double, Formula>> sum;  // Sum
  std::string key;
};

Formula Formula::leaf(Op op) {
  auto n = std::make_shared<Node>();
  n->kind = Kind::Leaf;
  n->op = op;
  n->key = Sentence::leaf(op).text();
  return Formula(std::move(n));
}

Formula Formula::matmul(Formula lhs, Formula rhs) {
  auto n = std::make_shared<Node>();
  n->kind = Kind::MatMul;
  n->key = "(" + lhs.key() + rhs.key() + ")";
  n->operands = {std::move(lhs), std::move(rhs)};
  return Formula(std::move(n));
}

Formula Formula::hadamard(Formula lhs, Formula rhs) {
  auto n = std::make_shared<Node>();
  n->kind = Kind::Hadamard;
  n->key = "(" + lhs.key() + "o" + rhs.key() + ")";
  n->operands = {std::move(lhs), std::move(rhs)};
  return Formula(std::move(n));
}

Formula Formula::sum(std::vector<std::pair<double, Formula>> terms) {
  if (terms.size() == 1 && terms.front().first == 1.0) return terms.front().second;
  auto n = std::make_shared<Node>();
  n->kind = Kind::Sum;
  n->key = "[";
  for (const auto& [c, f] : terms) n->key += format_number(c) + "*" + f.key() + ";";
  n->key += "]";
  n->sum = std::move(terms);
  return Formula(std::move(n));
}

Formula::Kind Formula::kind() const { return node_->kind; }
Op Formula::leaf_op() const { return node_->op; }
const Formula& Formula::lhs() const { return node_->operands.at(0); }
const Formula& Formula::rhs() const { return node_->operands.at(1); }
const std::vector<std::pair<double, Formula>>& Formula::summands() const { return node_->sum; }
const std::string& Formula::key() const { return node_->key; }

LinearCombo Formula::expand() const {
  std::unordered_map<std::string, LinearCombo> memo;
  auto go = [&memo](auto&& self, const Formula& f) -> const LinearCombo& {
    if (auto it = memo.find(f.key()); it != memo.end()) return it->second;
    LinearCombo out;
    switch (f.kind()) {
      case Kind::Leaf:
        out.add(1.0, Sentence::leaf(f.leaf_op()));
        break;
      case Kind::MatMul:
      case Kind::Hadamard: {
        const LinearCombo& l = self(self, f.lhs());
        const LinearCombo& r = self(self, f.rhs());
        for (const auto& tl : l.terms())
          for (const auto& tr : r.terms()) {
            out.add(tl.coefficient * tr.coefficient,
                    f.kind() == Kind::MatMul ? Sentence::matmul(tl.sentence, tr.sentence)
                                             : Sentence::hadamard(tl.sentence, tr.sentence));
          }
        break;
      }
      case Kind::Sum:
        for (const auto& [c, sub] : f.summands())
          for (const auto& t : self(self, sub).terms()) out.add(c * t.coefficient, t.sentence);
        break;
    }
    return memo.emplace(f.key(), std::move(out)).first->second;
  };
  return go(go, *this);
}

// ---------------------------------------------------------------------------
// Infix formula parser

namespace {

class FormulaParser {
 public:
  FormulaParser(std::string text, const std::vector<std::pair<std::string, Formula>>& named)
      : s_(std::move(text)), named_(named) {}

  Formula parse() {
    Formula f = expr();
    skip();
    if (pos_ != s_.size()) fail("unexpected trailing input");
    return f;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError("formula: " + what, pos_);
  }

  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  char peek() {
    skip();
    return pos_ < s_.size() ? s_[pos_] : '\0';
  }

  Formula expr() {
    std::vector<std::pair<double, Formula>> terms;
    double sign = 1.0;
    if (peek() == '-') {
      sign = -1.0;
      ++pos_;
    } else if (peek() == '+') {
      ++pos_;
    }
    while (true) {
      double coef = sign;
      if (std::isdigit(static_cast<unsigned char>(peek()))) coef *= number();
      terms.emplace_back(coef, hadamard_chain());
      const char c = peek();
      if (c == '+' || c == '-') {
        sign = c == '+' ? 1.0 : -1.0;
        ++pos_;
        continue;
      }
      break;
    }
    return Formula::sum(std::move(terms));
  }

  double number() {
    skip();
    std::size_t start = pos_;
    while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    return std::stod(s_.substr(start, pos_ - start));
  }

  Formula hadamard_chain() {
    Formula f = product();
    while (peek() == 'o') {
      ++pos_;
      f = Formula::hadamard(f, product());
    }
    return f;
  }

  static bool starts_factor(char c) { return c == 'A' || c == 'I' || c == 'J' || c == '(' || c == '{'; }

  Formula product() {
    if (!starts_factor(peek())) fail("expected a factor");
    Formula f = power();
    while (starts_factor(peek())) f = Formula::matmul(f, power());
    return f;
  }

  Formula power() {
    Formula base = atom();
    if (peek() == '^') {
      ++pos_;
      skip();
      if (!std::isdigit(static_cast<unsigned char>(peek()))) fail("expected exponent");
      const int k = static_cast<int>(number());
      if (k < 1) fail("exponent must be positive");
      Formula f = base;
      for (int i = 1; i < k; ++i) f = Formula::matmul(f, base);
      return f;
    }
    return base;
  }

  Formula atom() {
    const char c = peek();
    ++pos_;
    switch (c) {
      case 'A': return Formula::leaf(Op::A);
      case 'I': return Formula::leaf(Op::I);
      case 'J': return Formula::leaf(Op::J);
      case '(': {
        Formula f = expr();
        if (peek() != ')') fail("expected ')'");
        ++pos_;
        return f;
      }
      case '{': {
        const auto close = s_.find('}', pos_);
        if (close == std::string::npos) fail("unterminated reference");
        const std::string name = s_.substr(pos_, close - pos_);
        pos_ = close + 1;
        for (const auto& [n, f] : named_)
          if (n == name) return f;
        fail("unknown reference '" + name + "'");
      }
      default:
        --pos_;
        fail(std::string("unexpected character '") + c + "'");
    }
  }

  std::string s_;
  const std::vector<std::pair<std::string, Formula>>& named_;
  std::size_t pos_ = 0;
};

}  // namespace

Formula parse_formula(std::string_view text, const std::vector<std::pair<std::string, Formula>>& named) {
  std::string s;
  constexpr std::string_view odot = "\xE2\x8A\x99";
  for (std::size_t i = 0; i < text.size();) {
    if (text.substr(i, odot.size()) == odot) {
      s.push_back('o');
      i += odot.size();
    } else {
      s.push_back(text[i++]);
    }
  }
  return FormulaParser(std::move(s), named).parse();
}

// ---------------------------------------------------------------------------
// Published formulas

namespace {

struct Library {
  std::vector<std::pair<std::string, Formula>> named;

  const Formula& get(const std::string& name) const {
    for (const auto& [n, f] : named)
      if (n == name) return f;
    throw std::logic_error("formula library: missing " + name);
  }

  void define(const std::string& name, std::string_view text) {
    named.emplace_back(name, parse_formula(text, named));
  }
};

const Library& library() {
  static const Library lib = [] {
    Library l;
    // Voropaev path formulas.
    l.define("P2", "J o A^2");
    l.define("P3", "J o A^3 - (I o A^2)A - A(I o A^2) + A");
    l.define("P4",
             "J o A^4 - J o (A(I o A^2)A) + 2(J o A^2) - (I o A^2)(J o A^2) - (J o A^2)(I o A^2)"
             " - A(I o A^3) - (I o A^3)A + 3 A o A^2");
    l.define("P5",
             "J o A^5 - (I o A^4)A - A(I o A^4) - (I o A^3)(J o A^2) - (J o A^2)(I o A^3)"
             " - (I o A^2)(J o A^3) - (J o A^3)(I o A^2) - J o (A(I o A^3)A) + 3 A o A^3"
             " + 2 A(I o A^2)(I o A^2) + 2 (I o A^2)(I o A^2)A + 3 A o A^2 o A^2"
             " + (I o A^2)A(I o A^2)"
             " - J o (A(I o A^2)A^2) - J o (A^2(I o A^2)A) + 3 J o ((A o A^2)A) + 3 J o (A(A o A^2))"
             " + (I o (A(I o A^2)A))A + A(I o (A(I o A^2)A)) - 6(I o A^2)A - 6A(I o A^2)"
             " - 4 A o A^2 + 3 J o A^3 + 4A");
    l.define("P6",
             "J o A^6 - (I o A^5)A - A(I o A^5) - (I o A^2)(J o A^4) - (J o A^4)(I o A^2)"
             " - (I o A^4)(J o A^2) - (J o A^2)(I o A^4) - J o (A(I o A^4)A) + 3 A o A^4"
             " - (J o A^3)(I o A^3) - (I o A^3)(J o A^3) - J o (A(I o A^2)A^3) - J o (A^3(I o A^2)A)"
             " - J o (A(I o A^3)A^2) - J o (A^2(I o A^3)A) + 4 A(I o A^2)(I o A^3)"
             " + 4 (I o A^3)(I o A^2)A"
             " + 6 A o A^2 o A^3 + (I o A^2)A(I o A^3) + (I o A^3)A(I o A^2) + 3 J o ((A o A^3)A)"
             " + 3 J o (A(A o A^3)) + (I o (A(I o A^3)A))A + A(I o (A(I o A^3)A))"
             " - J o (A^2(I o A^2)A^2)"
             " + 2 (J o A^2)(I o A^2)(I o A^2) + 2 (I o A^2)(I o A^2)(J o A^2)"
             " + J o A^2 o A^2 o A^2"
             " + (I o A^2)(J o A^2)(I o A^2)"
             " + 3 J o ((A o A^2)A^2) + 3 J o (A^2(A o A^2)) + (I o (A(I o A^2)A))(J o A^2)"
             " + (J o A^2)(I o (A(I o A^2)A))"
             " + J o ((I o A^2)A(I o A^2)A) + J o (A(I o A^2)A(I o A^2))"
             " + 2 J o (A(I o A^2)(I o A^2)A)"
             " + (I o (A(I o A^2)A^2))A + A(I o (A(I o A^2)A^2)) + (I o (A^2(I o A^2)A))A"
             " + A(I o (A^2(I o A^2)A))"
             " + 3 J o ((A o A^2 o A^2)A) + 3 J o (A(A o A^2 o A^2)) - 12(I o A^2)(A o A^2)"
             " - 12(A o A^2)(I o A^2)"
             " - 4 J o A^2 o A^2 - 8 A o (A(A o A^2)) - 8 A o ((A o A^2)A) - 3 A o (A(I o A^2)A)"
             " + 3 J o (A(A o A^2)A) + J o (A(I o (A(I o A^2)A))A) - 4 J o (A(A o A^2))"
             " - 4 J o ((A o A^2)A)"
             " + 4 J o A^4 - 5 A(I o A^3) - 5 (I o A^3)A - 4(I o (A(A o A^2)))A"
             " - 4 A(I o (A(A o A^2)))"
             " - 4(I o ((A o A^2)A))A - 4 A(I o ((A o A^2)A)) - 7(I o A^2)(J o A^2)"
             " - 7(J o A^2)(I o A^2)"
             " - 10 J o (A(I o A^2)A) + 44 A o A^2 + 12 J o A^2");

    // Voropaev cycle formulas, C_l = A o P_{l-1}.
    l.define("C3", "A o A^2");
    l.define("C4", "A o A^3 - A(I o A^2) - (I o A^2)A + A");
    l.define("C5",
             "A o A^4 - A o (A(I o A^2)A) - (I o A^2)(A o A^2) - (A o A^2)(I o A^2)"
             " - A(I o A^3) - (I o A^3)A + 5 A o A^2");
    l.define("C6",
             "A o A^5 - (I o A^4)A - A(I o A^4) - (I o A^3)(A o A^2) - (A o A^2)(I o A^3)"
             " - (I o A^2)(A o A^3) - (A o A^3)(I o A^2) - A o (A(I o A^3)A) + 6 A o A^3"
             " + 2 A(I o A^2)(I o A^2) + 2 (I o A^2)(I o A^2)A + 3 A o A^2 o A^2"
             " + (I o A^2)A(I o A^2)"
             " - A o (A(I o A^2)A^2) - A o (A^2(I o A^2)A) + 3 A o ((A o A^2)A) + 3 A o (A(A o A^2))"
             " + (I o (A(I o A^2)A))A + A(I o (A(I o A^2)A)) - 6(I o A^2)A - 6A(I o A^2)"
             " - 4 A o A^2 + 4A");
    l.define("C7",
             "A o A^6 - (I o A^5)A - A(I o A^5) - (I o A^2)(A o A^4) - (A o A^4)(I o A^2)"
             " - (I o A^4)(A o A^2) - (A o A^2)(I o A^4) - A o (A(I o A^4)A) + 3 A o A^4"
             " - (A o A^3)(I o A^3) - (I o A^3)(A o A^3) - A o (A(I o A^2)A^3) - A o (A^3(I o A^2)A)"
             " - A o (A(I o A^3)A^2) - A o (A^2(I o A^3)A) + 4 A(I o A^2)(I o A^3)"
             " + 4 (I o A^3)(I o A^2)A"
             " + 6 A o A^2 o A^3 + (I o A^2)A(I o A^3) + (I o A^3)A(I o A^2) + 3 A o ((A o A^3)A)"
             " + 3 A o (A(A o A^3)) + (I o (A(I o A^3)A))A + A(I o (A(I o A^3)A))"
             " - A o (A^2(I o A^2)A^2)"
             " + 2 (A o A^2)(I o A^2)(I o A^2) + 2 (I o A^2)(I o A^2)(A o A^2)"
             " + A o A^2 o A^2 o A^2"
             " + (I o A^2)(A o A^2)(I o A^2)"
             " + 3 A o ((A o A^2)A^2) + 3 A o (A^2(A o A^2)) + (I o (A(I o A^2)A))(A o A^2)"
             " + (A o A^2)(I o (A(I o A^2)A))"
             " + A o ((I o A^2)A(I o A^2)A) + A o (A(I o A^2)A(I o A^2))"
             " + 2 A o (A(I o A^2)(I o A^2)A)"
             " + (I o (A(I o A^2)A^2))A + A(I o (A(I o A^2)A^2)) + (I o (A^2(I o A^2)A))A"
             " + A(I o (A^2(I o A^2)A))"
             " + 3 A o ((A o A^2 o A^2)A) + 3 A o (A(A o A^2 o A^2)) - 12(I o A^2)(A o A^2)"
             " - 12(A o A^2)(I o A^2)"
             " - 4 A o A^2 o A^2 - 8 A o (A(A o A^2)) - 8 A o ((A o A^2)A) - 3 A o (A(I o A^2)A)"
             " + 3 A o (A(A o A^2)A) + A o (A(I o (A(I o A^2)A))A) - 4 A o (A(A o A^2))"
             " - 4 A o ((A o A^2)A)"
             " + 4 A o A^4 - 5 A(I o A^3) - 5 (I o A^3)A - 4(I o (A(A o A^2)))A"
             " - 4 A(I o (A(A o A^2)))"
             " - 4(I o ((A o A^2)A))A - 4 A(I o ((A o A^2)A)) - 7(I o A^2)(A o A^2)"
             " - 7(A o A^2)(I o A^2)"
             " - 10 A o (A(I o A^2)A) + 56 A o A^2");

    // Efficient formulas. Later ones reuse earlier ones as whole matrices.
    l.define("P2*", "J o A^2");
    l.define("P3*", "J o (A(J o A^2)) - A o (AJ)");
    l.define("C4f", "A o (A(J o A^2)) - A o (AJ)");
    l.define("P4*",
             "J o (A(J o (A(J o A^2)))) - J o (A(A o (AJ))) - J o ((A o (AJ))A)"
             " - A o ((A o A^2)J) + 2 A o A^2");
    l.define("C5f",
             "A o (A(J o (A(J o A^2)))) - A o (A(A o (AJ))) - A o ((A o (AJ))A)"
             " - A o ((A o A^2)J) + 2 A o A^2");
    l.define("P5*",
             "J o (A{P4*}) - (J o A^2) o ((A o A^2)J) - A o ({C4f}J) - (AJ) o {P3*}"
             " + {P3*} + {C4f} + 2 A o A^2 o A^2 + 3 J o ((A o A^2)A) - 4 A o A^2");
    l.define("C6f",
             "A o (A{P4*}) - (A o A^2) o ((A o A^2)J) - A o ({C4f}J) - (AJ) o {C4f}"
             " + 2{C4f} + 2 A o A^2 o A^2 + 3 A o ((A o A^2)A) - 4 A o A^2");
    l.define("P6*",
             "J o (A{P5*}) - {P3*} o ((A o A^2)J) - A o ({C5f}J) - {P4*} o (AJ)"
             " + {P4*} + {C5f} - (J o A^2) o ({C4f}J) + 4 A o A^2 o {P3*}"
             " + 3 J o ((A o A^2)(J o A^2)) + 3 J o ({C4f}A)"
             " + J o A^2 o A^2 o A^2 + 3 J o ((A o A^2 o A^2)A) - 4 J o A^2 o A^2"
             " - 8 A o (A(A o A^2))"
             " - 8 A o ((A o A^2)A) - 4 J o ((A o A^2)A) - 3 A o ((A o A^2)J) + 17 A o A^2"
             " + 3 J o A^2");
    l.define("C7f",
             "A o (A{P5*}) - {C4f} o ((A o A^2)J) - A o ({C5f}J) - {C5f} o (AJ) + 2{C5f}"
             " - (A o A^2) o ({C4f}J) + 4 A o A^2 o {P3*} + 3 A o ((A o A^2)(J o A^2))"
             " + 3 A o ({C4f}A) + A o A^2 o A^2 o A^2"
             " + 3 A o ((A o A^2 o A^2)A) - 4 A o A^2 o A^2 - 8 A o (A(A o A^2))"
             " - 12 A o ((A o A^2)A)"
             " - 3 A o ((A o A^2)J) + 20 A o A^2");
    return l;
  }();
  return lib;
}

}  // namespace

Formula path_formula(Family family, unsigned l) {
  if (l < 2 || l > 6) {
    throw FormulaRangeError("path formulas exist for lengths 2..6, got " + std::to_string(l));
  }
  const std::string name = "P" + std::to_string(l) + (family == Family::star ? "*" : "");
  return library().get(name);
}

Formula cycle_formula(Family family, unsigned l) {
  if (l < 3 || l > 7) {
    throw FormulaRangeError("cycle formulas exist for lengths 3..7, got " + std::to_string(l));
  }
  if (family == Family::voropaev || l == 3) return library().get("C" + std::to_string(l));
  return library().get("C" + std::to_string(l) + "f");
}

LinearCombo voropaev_paths(unsigned l) { return path_formula(Family::voropaev, l).expand(); }
LinearCombo star_paths(unsigned l) { return path_formula(Family::star, l).expand(); }
LinearCombo voropaev_cycles(unsigned l) { return cycle_formula(Family::voropaev, l).expand(); }

LinearCombo star_cycles(unsigned l) {
  if (l < 3 || l > 7) {
    throw FormulaRangeError("cycle formulas exist for lengths 3..7, got " + std::to_string(l));
  }
  return cycle_formula(Family::star, l).expand();
}

// ---------------------------------------------------------------------------

bool lemma_rewrite_check(const DenseMatrix& n, const DenseMatrix& m, const DenseMatrix& p) {
  const std::size_t sz = n.size();
  if (m.size() != sz || p.size() != sz) throw DimensionError("lemma_rewrite_check: size mismatch");
  for (std::size_t i = 0; i < sz; ++i) {
    double s = 0.0;
    for (double v : m.row(i)) s += v;
    if (std::abs(n(i, i) - s) > 1e-9 * std::max(1.0, std::abs(s))) {
      throw LemmaPreconditionError("lemma precondition violated: N(" + std::to_string(i) + "," +
                                   std::to_string(i) + ") != row sum of M");
    }
  }
  const DenseMatrix lhs = hadamard(p, mul_by_j(m, Side::right));
  DenseMatrix rhs = matmul(hadamard(DenseMatrix::identity(sz), n), p);
  rhs -= hadamard(p, m);
  const double scale = std::max({1.0, lhs.max_abs(), rhs.max_abs()});
  for (std::size_t k = 0; k < sz * sz; ++k)
    if (std::abs(lhs.values()[k] - rhs.values()[k]) > 1e-9 * scale) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Cost model

namespace {

bool sentence_is_diagonal(const Sentence& t) {
  switch (t.op()) {
    case Op::I: return true;
    case Op::A:
    case Op::J: return false;
    case Op::Hadamard: return sentence_is_diagonal(t.lhs()) || sentence_is_diagonal(t.rhs());
    case Op::MatMul: return sentence_is_diagonal(t.lhs()) && sentence_is_diagonal(t.rhs());
  }
  return false;
}

bool formula_is_diagonal(const Formula& f) {
  switch (f.kind()) {
    case Formula::Kind::Leaf: return f.leaf_op() == Op::I;
    case Formula::Kind::Hadamard: return formula_is_diagonal(f.lhs()) || formula_is_diagonal(f.rhs());
    case Formula::Kind::MatMul: return formula_is_diagonal(f.lhs()) && formula_is_diagonal(f.rhs());
    case Formula::Kind::Sum:
      for (const auto& [c, s] : f.summands())
        if (!formula_is_diagonal(s)) return false;
      return true;
  }
  return false;
}

void count_product(CostReport& r, bool j_operand, bool identity_operand, bool diagonal_operand,
                   const CostPolicy& policy) {
  if (j_operand) {
    ++r.j_products;
    return;
  }
  if (identity_operand) return;  // (IX) is a copy
  if (diagonal_operand) {
    ++r.diagonal_products;
    if (!policy.diagonal_products_heavy) return;
  }
  ++r.heavy_matmuls;
}

}  // namespace

CostReport cost_of(const LinearCombo& c, const CostPolicy& policy) {
  CostReport r;
  std::set<std::string> seen;
  auto walk = [&](auto&& self, const Sentence& t) -> void {
    if (t.is_leaf() || !seen.insert(t.text()).second) return;
    self(self, t.lhs());
    self(self, t.rhs());
    if (t.op() == Op::Hadamard) {
      ++r.hadamards;
      return;
    }
    const bool j = t.lhs().op() == Op::J || t.rhs().op() == Op::J;
    const bool id = t.lhs().op() == Op::I || t.rhs().op() == Op::I;
    const bool diag = sentence_is_diagonal(t.lhs()) || sentence_is_diagonal(t.rhs());
    count_product(r, j, id, diag, policy);
  };
  for (const auto& term : c.terms()) walk(walk, term.sentence);
  return r;
}

CostReport cost_of(const Formula& f, const CostPolicy& policy) {
  CostReport r;
  std::set<std::string> seen;
  auto walk = [&](auto&& self, const Formula& x) -> void {
    if (x.kind() == Formula::Kind::Leaf || !seen.insert(x.key()).second) return;
    if (x.kind() == Formula::Kind::Sum) {
      for (const auto& [c, s] : x.summands()) self(self, s);
      return;
    }
    self(self, x.lhs());
    self(self, x.rhs());
    if (x.kind() == Formula::Kind::Hadamard) {
      ++r.hadamards;
      return;
    }
    auto is_leaf = [](const Formula& y, Op op) {
      return y.kind() == Formula::Kind::Leaf && y.leaf_op() == op;
    };
    const bool j = is_leaf(x.lhs(), Op::J) || is_leaf(x.rhs(), Op::J);
    const bool id = is_leaf(x.lhs(), Op::I) || is_leaf(x.rhs(), Op::I);
    const bool diag = formula_is_diagonal(x.lhs()) || formula_is_diagonal(x.rhs());
    count_product(r, j, id, diag, policy);
  };
  walk(walk, f);
  return r;
}

// ---------------------------------------------------------------------------

DenseMatrix evaluate_combo(const LinearCombo& c, const DenseMatrix& a) {
  DenseMatrix out(a.size());
  SentenceEvaluator ev(a);
  for (const auto& t : c.terms()) out.add_scaled(ev(t.sentence), t.coefficient);
  return out;
}

DenseMatrix evaluate_formula(const Formula& f, const DenseMatrix& a) {
  const std::size_t n = a.size();
  std::unordered_map<std::string, DenseMatrix> cache;
  auto eval = [&](auto&& self, const Formula& x) -> const DenseMatrix& {
    if (auto it = cache.find(x.key()); it != cache.end()) return it->second;
    DenseMatrix value;
    switch (x.kind()) {
      case Formula::Kind::Leaf:
        value = x.leaf_op() == Op::A   ? a
                : x.leaf_op() == Op::I ? DenseMatrix::identity(n)
                                       : DenseMatrix::ones_off_diagonal(n);
        break;
      case Formula::Kind::Hadamard:
        value = hadamard(self(self, x.lhs()), self(self, x.rhs()));
        break;
      case Formula::Kind::MatMul: {
        const Formula& l = x.lhs();
        const Formula& r = x.rhs();
        auto is_leaf = [](const Formula& y, Op op) {
          return y.kind() == Formula::Kind::Leaf && y.leaf_op() == op;
        };
        if (is_leaf(l, Op::I)) value = self(self, r);
        else if (is_leaf(r, Op::I)) value = self(self, l);
        else if (is_leaf(l, Op::J)) value = mul_by_j(self(self, r), Side::left);
        else if (is_leaf(r, Op::J)) value = mul_by_j(self(self, l), Side::right);
        else value = matmul(self(self, l), self(self, r));
        break;
      }
      case Formula::Kind::Sum:
        value = DenseMatrix(n);
        for (const auto& [c, s] : x.summands()) value.add_scaled(self(self, s), c);
        break;
    }
    return cache.emplace(x.key(), std::move(value)).first->second;
  };
  return eval(eval, f);
}

std::string format_coefficient(double c) {
  if (std::abs(c - std::round(c)) < 1e-12) return format_number(std::round(c));
  for (long q = 2; q <= 16; ++q) {
    const double p = std::round(c * static_cast<double>(q));
    if (std::abs(c - p / static_cast<double>(q)) < 1e-12 && std::gcd(static_cast<long>(p), q) == 1) {
      return format_number(p) + "/" + std::to_string(q);
    }
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", c);
  return buf;
}

double parse_coefficient(std::string_view text) {
  const std::string s(text);
  const auto slash = s.find('/');
  std::size_t used = 0;
  if (slash == std::string::npos) {
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("bad coefficient '" + s + "'");
    return v;
  }
  const double num = std::stod(s.substr(0, slash), &used);
  if (used != slash) throw std::invalid_argument("bad coefficient '" + s + "'");
  const std::string den_text = s.substr(slash + 1);
  const double den = std::stod(den_text, &used);
  if (used != den_text.size() || den == 0.0) throw std::invalid_argument("bad coefficient '" + s + "'");
  return num / den;
}

void write_combo(std::ostream& out, const LinearCombo& c) {
  for (const auto& t : c.terms()) out << format_coefficient(t.coefficient) << '\t' << t.sentence.text() << '\n';
}

LinearCombo read_combo(std::istream& in, const Cfg& g) {
  LinearCombo c;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error("combo line " + std::to_string(line_no) + ": expected coefficient<TAB>sentence");
    }
    double coef = 0.0;
    try {
      coef = parse_coefficient(line.substr(0, tab));
    } catch (const std::exception&) {
      throw std::runtime_error("combo line " + std::to_string(line_no) + ": bad coefficient");
    }
    try {
      c.add(coef, parse(line.substr(tab + 1), g));
    } catch (const ParseError& e) {
      throw std::runtime_error("combo line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

}  // namespace grl
